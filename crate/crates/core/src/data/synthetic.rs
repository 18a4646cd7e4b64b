//! Desk-scale synthetic tasks. Every prompt carries the full task context, so
//! adapting on the prompt alone is well posed.
//!
//! * `kv-recall`: `K:a3 V:x7 K:b2 V:q1 Q:a3 A:` -> `x7`. The answer is always
//!   present in the prompt.
//! * `copy-transform`: a named operation (`rev`, `rot`, `srt`) is shown on
//!   `difficulty` demonstration words and then requested for a new word:
//!   `T:rev W:pqr A:rqp W:abcd A:` -> `dcba`.
//! * `pattern-complete`: an arithmetic letter progression with a hidden
//!   stride; the answer is the next two terms, which never occur in the prompt:
//!   `P:c f i l o A:` -> `r u`.

use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Episode, Tokenizer};
use crate::error::{Error, Result};
use crate::seed::episode_seed;

/// Every character a synthetic prompt or answer can contain.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 :AKPQTVW";

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const DIGITS: &[u8] = b"0123456789";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    KvRecall,
    CopyTransform,
    PatternComplete,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::KvRecall => "kv-recall",
            SyntheticTask::CopyTransform => "copy-transform",
            SyntheticTask::PatternComplete => "pattern-complete",
        }
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv-recall" => Ok(SyntheticTask::KvRecall),
            "copy-transform" => Ok(SyntheticTask::CopyTransform),
            "pattern-complete" => Ok(SyntheticTask::PatternComplete),
            other => Err(Error::Input(format!(
                "unknown synthetic task `{other}` (known: kv-recall, copy-transform, pattern-complete)"
            ))),
        }
    }
}

fn symbol(rng: &mut ChaCha8Rng) -> String {
    let l = *LETTERS.choose(rng).expect("non-empty") as char;
    let d = *DIGITS.choose(rng).expect("non-empty") as char;
    format!("{l}{d}")
}

fn kv_recall(rng: &mut ChaCha8Rng, difficulty: usize) -> (String, String) {
    let pairs = 2 + difficulty;
    let mut keys: Vec<String> = Vec::with_capacity(pairs);
    while keys.len() < pairs {
        let k = symbol(rng);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let values: Vec<String> = (0..pairs).map(|_| symbol(rng)).collect();
    let mut prompt = String::new();
    for (k, v) in keys.iter().zip(&values) {
        prompt.push_str(&format!("K:{k} V:{v} "));
    }
    let q = rng.random_range(0..pairs);
    prompt.push_str(&format!("Q:{} A:", keys[q]));
    (prompt, values[q].clone())
}

fn random_word(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    (0..len)
        .map(|_| *LETTERS.choose(rng).expect("non-empty") as char)
        .collect()
}

fn transform(op: &str, word: &str) -> String {
    match op {
        "rev" => word.chars().rev().collect(),
        "rot" => word
            .bytes()
            .map(|b| (b'a' + (b - b'a' + 1) % 26) as char)
            .collect(),
        "srt" => {
            let mut cs: Vec<char> = word.chars().collect();
            cs.sort_unstable();
            cs.into_iter().collect()
        }
        _ => unreachable!("fixed op set"),
    }
}

fn copy_transform(rng: &mut ChaCha8Rng, difficulty: usize) -> (String, String) {
    let op = *["rev", "rot", "srt"].choose(rng).expect("non-empty");
    let mut prompt = format!("T:{op} ");
    for _ in 0..difficulty {
        let demo = random_word(rng, 3, 5);
        prompt.push_str(&format!("W:{demo} A:{} ", transform(op, &demo)));
    }
    let word = random_word(rng, 3, 5);
    prompt.push_str(&format!("W:{word} A:"));
    (prompt, transform(op, &word))
}

fn pattern_complete(rng: &mut ChaCha8Rng, difficulty: usize) -> (String, String) {
    // Strides below 7 keep all shown and answered terms distinct mod 26.
    let stride = rng.random_range(1..=6usize);
    let start = rng.random_range(0..26usize);
    let shown = 4 + difficulty.min(3);
    let term = |i: usize| (b'a' + ((start + i * stride) % 26) as u8) as char;
    let terms: Vec<String> = (0..shown).map(|i| term(i).to_string()).collect();
    let prompt = format!("P:{} A:", terms.join(" "));
    let answer = format!("{} {}", term(shown), term(shown + 1));
    (prompt, answer)
}

/// `n` episodes of `task`. Episode `i` depends only on `(seed, i)`.
pub fn gen_synthetic(
    task: SyntheticTask,
    n: usize,
    seed: u64,
    difficulty: usize,
    tokenizer: &Tokenizer,
) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(Error::Empty("gen_synthetic needs n >= 1".into()));
    }
    let task_salt = match task {
        SyntheticTask::KvRecall => 0x4B56,
        SyntheticTask::CopyTransform => 0x4354,
        SyntheticTask::PatternComplete => 0x5043,
    };
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed ^ task_salt, i as u64));
            let (prompt, answer) = match task {
                SyntheticTask::KvRecall => kv_recall(&mut rng, difficulty),
                SyntheticTask::CopyTransform => copy_transform(&mut rng, difficulty),
                SyntheticTask::PatternComplete => pattern_complete(&mut rng, difficulty),
            };
            Episode {
                id: format!("{}-{seed}-{i}", task.name()),
                prompt_tokens: tokenizer.encode(&prompt),
                answer_tokens: tokenizer.encode(&answer),
                template: task.name().to_string(),
                raw_prompt: prompt,
                raw_answer: answer,
            }
        })
        .collect())
}

/// Interleave several task streams in a seeded random order.
pub fn shuffle_mix(mut episodes: Vec<Episode>, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    episodes.shuffle(&mut rng);
    episodes
}
