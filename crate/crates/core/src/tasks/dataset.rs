//! JSON-lines datasets and the question/steps/answer example shape.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::countdown::{answer_tokens, prompt_text, CountdownInstance};
use super::graph::GraphQAInstance;
use super::tokenizer::{Tokenizer, ANSWER_CLOSE, ANSWER_OPEN, ANSWER_SEP, QUESTION_SEP};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::contract(format!("serialize: {}", e)))?;
        writeln!(w, "{}", line).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Blank lines are skipped; a bad line reports its starting byte offset.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut offset = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        let n = match reader.read_line(&mut line) {
            Ok(n) => n,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    offset,
                    message: "invalid UTF-8".into(),
                })
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        if n == 0 {
            break;
        }
        if !line.trim().is_empty() {
            let item = serde_json::from_str(line.trim_end()).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                offset,
                message: e.to_string(),
            })?;
            out.push(item);
        }
        offset += n;
    }
    Ok(out)
}

/// Generic chain-of-thought record as found in external JSONL files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotRecord {
    pub question: String,
    #[serde(default)]
    pub steps: Vec<String>,
    pub answer: String,
}

/// Tokenized example: question, CoT steps, answer stream.
///
/// The answer stream starts with the separator that ends the thinking
/// region; that separator is always given and never predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CotExample {
    pub question: Vec<usize>,
    pub steps: Vec<Vec<usize>>,
    pub answer: Vec<usize>,
}

impl CotExample {
    pub fn from_record(r: &CotRecord) -> Self {
        let tok = Tokenizer;
        let mut question = tok.encode(&r.question);
        question.push(QUESTION_SEP);
        let steps = r.steps.iter().map(|s| tok.encode(&format!("{} ", s))).collect();
        let mut answer = vec![ANSWER_SEP, ANSWER_OPEN];
        answer.extend(tok.encode(&format!(" {} ", r.answer)));
        answer.push(ANSWER_CLOSE);
        Self {
            question,
            steps,
            answer,
        }
    }

    pub fn from_countdown(inst: &CountdownInstance) -> Result<Self> {
        let solution = inst
            .solution
            .as_deref()
            .ok_or_else(|| Error::contract("countdown instance without a solution"))?;
        Ok(Self {
            question: Tokenizer.encode(&prompt_text(inst)),
            steps: Vec::new(),
            answer: answer_tokens(solution),
        })
    }

    pub fn from_graph(inst: &GraphQAInstance) -> Self {
        Self::from_record(&CotRecord {
            question: inst.question.clone(),
            steps: inst.steps.clone(),
            answer: inst.answer.clone(),
        })
    }
}
