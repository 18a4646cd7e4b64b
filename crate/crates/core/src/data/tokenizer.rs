use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved id for out-of-vocabulary symbols under the small-vocab scheme.
pub const UNK_TOKEN: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum Tokenizer {
    /// One token per UTF-8 byte; vocabulary of 256.
    Byte,
    /// One token per character of a fitted symbol set, plus [`UNK_TOKEN`].
    SmallVocab { symbols: Vec<char> },
}

impl Tokenizer {
    /// Fit a small vocabulary over every character in `texts`.
    pub fn fit_small_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| t.chars()).collect();
        Tokenizer::SmallVocab {
            symbols: set.into_iter().collect(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::SmallVocab { symbols } => symbols.len() + 1,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self {
            Tokenizer::Byte => text.bytes().map(usize::from).collect(),
            Tokenizer::SmallVocab { symbols } => {
                let mut unknown = 0usize;
                let ids = text
                    .chars()
                    .map(|c| match symbols.binary_search(&c) {
                        Ok(i) => i + 1,
                        Err(_) => {
                            unknown += 1;
                            UNK_TOKEN
                        }
                    })
                    .collect();
                if unknown > 0 {
                    log::warn!("{unknown} out-of-vocabulary symbol(s) mapped to the unknown token");
                }
                ids
            }
        }
    }

    /// Byte scheme: lossless for valid UTF-8 and replaces invalid sequences.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        match self {
            Tokenizer::Byte => {
                let bytes = ids
                    .iter()
                    .map(|&i| u8::try_from(i).map_err(|_| Error::Input(format!("byte token {i} > 255"))))
                    .collect::<Result<Vec<u8>>>()?;
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            Tokenizer::SmallVocab { symbols } => ids
                .iter()
                .map(|&i| match i {
                    UNK_TOKEN => Ok('\u{FFFD}'),
                    _ => symbols
                        .get(i - 1)
                        .copied()
                        .ok_or_else(|| Error::Input(format!("token {i} outside vocabulary"))),
                })
                .collect(),
        }
    }

    /// Raw byte round trip for the byte scheme (works on non-UTF-8 input too).
    pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| usize::from(b)).collect()
    }

    pub fn decode_bytes(ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&i| i as u8).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_scheme_encodes_ascii() {
        assert_eq!(Tokenizer::Byte.encode("A"), vec![65]);
        assert_eq!(Tokenizer::Byte.decode(&[104, 105]).unwrap(), "hi");
    }

    #[test]
    fn small_vocab_round_trips_in_vocabulary_text() {
        let tok = Tokenizer::fit_small_vocab(["K:a3 V:x7", "Q:a3 A:"]);
        let ids = tok.encode("V:a3 A:x7");
        assert!(ids.iter().all(|&i| i != UNK_TOKEN));
        assert_eq!(tok.decode(&ids).unwrap(), "V:a3 A:x7");
        assert_eq!(tok.encode("z"), vec![UNK_TOKEN]);
    }

    #[test]
    fn byte_decode_rejects_large_ids() {
        assert!(Tokenizer::Byte.decode(&[300]).is_err());
    }
}
