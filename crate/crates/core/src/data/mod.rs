//! Episode sourcing: tokenization, prompt templates, JSONL ingestion and
//! synthetic task generators.

mod corpus;
mod episode;
mod jsonl;
mod split;
mod synthetic;
mod template;
mod tokenizer;

pub use corpus::{build_corpus, Corpus, DataSource, DataSpec, TaskMix, TokenizerScheme};
pub use episode::Episode;
pub use jsonl::{load_jsonl, LoadReport, SkippedRow};
pub use split::{is_held_out, split_episodes, HELD_OUT_PERCENT};
pub use synthetic::{gen_synthetic, shuffle_mix, SyntheticTask, ALPHABET};
pub use template::{registry, template, AnswerBinding, Part, TemplateSpec};
pub use tokenizer::{Tokenizer, UNK_TOKEN};
