use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{gen_synthetic, load_jsonl, shuffle_mix, split_episodes, template, Episode, SyntheticTask, Tokenizer, ALPHABET};
use crate::error::{Error, Result};
use crate::seed::stream_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub task: SyntheticTask,
    pub n: usize,
    pub difficulty: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic { tasks: Vec<TaskMix> },
    Jsonl { path: PathBuf, template: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerScheme {
    Byte,
    SmallVocab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(flatten)]
    pub source: DataSource,
    pub tokenizer: TokenizerScheme,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                tasks: vec![
                    TaskMix {
                        task: SyntheticTask::KvRecall,
                        n: 6000,
                        difficulty: 4,
                    },
                    TaskMix {
                        task: SyntheticTask::CopyTransform,
                        n: 6000,
                        difficulty: 2,
                    },
                ],
            },
            tokenizer: TokenizerScheme::SmallVocab,
        }
    }
}

/// A tokenized, split episode collection.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub tokenizer: Tokenizer,
    pub train: Vec<Episode>,
    pub held_out: Vec<Episode>,
}

/// Generate or load every episode, drop those that do not fit
/// `max_seq_len`, and split by hashed id.
pub fn build_corpus(spec: &DataSpec, max_seq_len: usize, seed: u64) -> Result<Corpus> {
    let (tokenizer, episodes) = match &spec.source {
        DataSource::Synthetic { tasks } => {
            if tasks.is_empty() {
                return Err(Error::config("data.tasks", "at least one task is required"));
            }
            let tokenizer = match spec.tokenizer {
                TokenizerScheme::Byte => Tokenizer::Byte,
                TokenizerScheme::SmallVocab => Tokenizer::fit_small_vocab([ALPHABET]),
            };
            let mut all = Vec::new();
            for t in tasks {
                all.extend(gen_synthetic(t.task, t.n, seed, t.difficulty, &tokenizer)?);
            }
            (tokenizer, shuffle_mix(all, stream_seed(seed, "corpus-mix")))
        }
        DataSource::Jsonl { path, template: name } => {
            let tpl = template(name)?;
            let tokenizer = match spec.tokenizer {
                TokenizerScheme::Byte => Tokenizer::Byte,
                TokenizerScheme::SmallVocab => {
                    let text = std::fs::read_to_string(path)?;
                    let mut fixed = String::new();
                    for p in &tpl.parts {
                        if let super::Part::Text(t) = p {
                            fixed.push_str(t);
                        }
                    }
                    Tokenizer::fit_small_vocab([text.as_str(), fixed.as_str(), tpl.cue.as_str()])
                }
            };
            let report = load_jsonl(path, &tpl, &tokenizer, max_seq_len)?;
            log::info!(
                "loaded {} episodes from {} ({} too long, {} empty answers, {} skipped)",
                report.loaded,
                path.display(),
                report.dropped_too_long,
                report.dropped_empty_answer,
                report.skipped.len()
            );
            (tokenizer, report.episodes)
        }
    };
    let before = episodes.len();
    let episodes: Vec<Episode> = episodes.into_iter().filter(|e| e.validate(max_seq_len, true).is_ok()).collect();
    if episodes.len() < before {
        log::warn!("dropped {} episodes longer than {max_seq_len} tokens", before - episodes.len());
    }
    if episodes.is_empty() {
        return Err(Error::Empty("corpus has no usable episodes".into()));
    }
    let (train, held_out) = split_episodes(episodes, seed);
    Ok(Corpus {
        tokenizer,
        train,
        held_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_is_split_and_deterministic() {
        let spec = DataSpec {
            source: DataSource::Synthetic {
                tasks: vec![TaskMix {
                    task: SyntheticTask::KvRecall,
                    n: 400,
                    difficulty: 1,
                }],
            },
            tokenizer: TokenizerScheme::SmallVocab,
        };
        let a = build_corpus(&spec, 64, 5).unwrap();
        let b = build_corpus(&spec, 64, 5).unwrap();
        assert_eq!(a.train.len() + a.held_out.len(), 400);
        assert!(!a.held_out.is_empty());
        assert_eq!(a.train, b.train);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = DataSpec::default();
        let v = serde_json::to_string(&spec).unwrap();
        assert!(v.contains("\"source\":\"synthetic\""));
        assert_eq!(serde_json::from_str::<DataSpec>(&v).unwrap(), spec);
    }
}
