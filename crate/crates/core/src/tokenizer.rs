//! Byte-level tokenizer: every UTF-8 byte is one token, offset past the
//! special ids, so any text (Chinese included) round-trips.

use alloc::string::String;
use alloc::vec::Vec;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;

/// Minimum number of special ids; the four above occupy `0..4`.
pub const MIN_SPECIAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteTokenizer {
    n_special: usize,
}

impl ByteTokenizer {
    pub fn new(n_special: usize) -> Self {
        assert!(n_special >= MIN_SPECIAL, "need at least {MIN_SPECIAL} special tokens");
        Self { n_special }
    }

    pub fn n_special(&self) -> usize {
        self.n_special
    }

    pub fn vocab_size(&self) -> usize {
        256 + self.n_special
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| b as u32 + self.n_special as u32).collect()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.n_special
    }

    /// The byte a token stands for, or `None` for special ids.
    pub fn byte(&self, id: u32) -> Option<u8> {
        let off = (id as usize).checked_sub(self.n_special)?;
        u8::try_from(off).ok()
    }

    /// Raw bytes of the non-special tokens.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().filter_map(|&id| self.byte(id)).collect()
    }

    /// Lossy decode; special ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }
}

/// Turns a byte stream into text deltas.
///
/// Bytes are buffered until they complete a character. Invalid sequences
/// become U+FFFD with the same rules as [`String::from_utf8_lossy`], so the
/// concatenation of every delta plus [`finish`](Self::finish) equals the lossy
/// decoding of the whole stream.
#[derive(Debug, Default, Clone)]
pub struct Utf8StreamDecoder {
    pending: Vec<u8>,
}

impl Utf8StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one byte and returns whatever text became final.
    pub fn push(&mut self, byte: u8) -> String {
        self.pending.push(byte);
        let mut out = String::new();
        loop {
            match core::str::from_utf8(&self.pending) {
                Ok(s) => {
                    out.push_str(s);
                    self.pending.clear();
                    return out;
                }
                Err(e) => {
                    let valid = e.valid_up_to();
                    out.push_str(core::str::from_utf8(&self.pending[..valid]).unwrap_or_default());
                    match e.error_len() {
                        Some(bad) => {
                            out.push(char::REPLACEMENT_CHARACTER);
                            self.pending.drain(..valid + bad);
                        }
                        None => {
                            self.pending.drain(..valid);
                            return out;
                        }
                    }
                }
            }
        }
    }

    /// Flushes an incomplete trailing sequence.
    pub fn finish(&mut self) -> String {
        let out = String::from_utf8_lossy(&self.pending).into_owned();
        self.pending.clear();
        out
    }
}
