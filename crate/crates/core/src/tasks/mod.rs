//! Task data: tokenizer, Countdown, graph QA, corpora and datasets.

pub mod corpus;
pub mod countdown;
pub mod dataset;
pub mod graph;
pub mod tokenizer;

pub use corpus::{ingest_text_corpus, synthetic_corpus};
pub use countdown::{
    branching_factor, enumeration_count, format_countdown, gen_countdown, gen_countdown_unfiltered, parse_answer,
    prompt_text, render_countdown, score_countdown, solve_countdown, CountdownInstance, Expr, FormattedExample, Op,
    ScoreOutcome,
};
pub use dataset::{read_jsonl, write_jsonl, CotExample, CotRecord};
pub use graph::{gen_graph_qa, GraphQAInstance};
pub use tokenizer::{Tokenizer, ANSWER_CLOSE, ANSWER_OPEN, ANSWER_SEP, LATENT, PAD, QUESTION_SEP, VOCAB_SIZE};
