//! Byte-level tokenizer with a handful of reserved specials.

pub const BYTE_VOCAB: usize = 256;
pub const PAD: usize = 256;
pub const LATENT: usize = 257;
pub const ANSWER_OPEN: usize = 258;
pub const ANSWER_CLOSE: usize = 259;
pub const QUESTION_SEP: usize = 260;
pub const ANSWER_SEP: usize = 261;
pub const VOCAB_SIZE: usize = 262;

/// Text form of each special, used when rendering decoded output.
pub fn special_text(id: usize) -> Option<&'static str> {
    match id {
        PAD => Some(""),
        LATENT => Some("<latent>"),
        ANSWER_OPEN => Some("<answer>"),
        ANSWER_CLOSE => Some("</answer>"),
        QUESTION_SEP => Some("\n"),
        ANSWER_SEP => Some("\n"),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    pub fn is_special(&self, id: usize) -> bool {
        (BYTE_VOCAB..VOCAB_SIZE).contains(&id)
    }

    /// Raw bytes with specials rendered as their text form; ids outside the
    /// vocabulary are dropped.
    pub fn decode_bytes(&self, ids: &[usize]) -> Vec<u8> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < BYTE_VOCAB {
                out.push(id as u8);
            } else if let Some(s) = special_text(id) {
                out.extend_from_slice(s.as_bytes());
            }
        }
        out
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }
}
