//! Plain-text pretraining corpora.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tokenizer::Tokenizer;

fn corpus_files(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "txt") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads UTF-8 text (a file, or every `.txt` file of a directory in name
/// order) and cuts the byte stream into non-overlapping windows of
/// `window` tokens. A trailing partial window is dropped.
pub fn ingest_text_corpus(path: &Path, window: usize) -> Result<Vec<Vec<usize>>> {
    if window == 0 {
        return Err(Error::contract("corpus window length must be positive"));
    }
    let mut tokens = Vec::new();
    for file in corpus_files(path)? {
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if let Err(e) = std::str::from_utf8(&bytes) {
            return Err(Error::Malformed {
                path: file,
                offset: e.valid_up_to(),
                message: "invalid UTF-8".into(),
            });
        }
        tokens.extend(Tokenizer.encode_bytes(&bytes));
    }
    Ok(tokens.chunks_exact(window).map(|c| c.to_vec()).collect())
}

const SUBJECTS: [&str; 8] = [
    "the cat",
    "a farmer",
    "the old ship",
    "my sister",
    "the river",
    "a robot",
    "the king",
    "our team",
];
const VERBS: [&str; 8] = [
    "sees", "builds", "follows", "paints", "carries", "finds", "likes", "moves",
];
const OBJECTS: [&str; 8] = [
    "a red box",
    "the long road",
    "two apples",
    "the bright star",
    "an empty cup",
    "the north gate",
    "a small drum",
    "the green hill",
];

/// Deterministic synthetic text with local syntax, arithmetic facts and
/// copy patterns, so both short- and long-range structure is learnable.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 64);
    while out.len() < n_bytes {
        match rng.random_range(0..4) {
            0 | 1 => {
                let s = SUBJECTS.choose(&mut rng).unwrap();
                let v = VERBS.choose(&mut rng).unwrap();
                let o = OBJECTS.choose(&mut rng).unwrap();
                out.push_str(&format!("{} {} {}. ", s, v, o));
            }
            2 => {
                let a = rng.random_range(0..50);
                let b = rng.random_range(0..50);
                out.push_str(&format!("{} + {} = {}. ", a, b, a + b));
            }
            _ => {
                let len = rng.random_range(3..7);
                let word: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
                out.push_str(&format!("say {} {} again. ", word, word));
            }
        }
    }
    out.truncate(n_bytes);
    out
}
