use std::io::BufRead;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{Episode, TemplateSpec, Tokenizer};
use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct SkippedRow {
    /// 1-based line number.
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LoadReport {
    #[serde(skip)]
    pub episodes: Vec<Episode>,
    pub loaded: usize,
    pub dropped_too_long: usize,
    pub dropped_empty_answer: usize,
    pub skipped: Vec<SkippedRow>,
}

/// Read one episode per JSONL row, rendering prompts through `template`.
///
/// Malformed rows and rows missing a bound field are skipped with a reason;
/// rows with an empty answer or longer than `max_seq_len` are dropped and
/// counted.
pub fn load_jsonl(
    path: &Path,
    template: &TemplateSpec,
    tokenizer: &Tokenizer,
    max_seq_len: usize,
) -> Result<LoadReport> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut report = LoadReport::default();

    for (idx, line) in reader.lines().enumerate() {
        let row_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("row {row_no}: malformed JSON: {e}");
                report.skipped.push(SkippedRow {
                    row: row_no,
                    reason: format!("malformed JSON: {e}"),
                });
                continue;
            }
        };
        let rendered = template
            .render_prompt(&row)
            .and_then(|p| template.extract_answer(&row).map(|a| (p, a)));
        let (prompt, answer) = match rendered {
            Ok(pa) => pa,
            Err(e) => {
                log::warn!("row {row_no}: {e}");
                report.skipped.push(SkippedRow {
                    row: row_no,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let answer = match answer {
            Some(a) if !a.is_empty() => a,
            _ => {
                report.dropped_empty_answer += 1;
                continue;
            }
        };
        let id = match row.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("{}-{row_no}", template.name),
        };
        let episode = Episode {
            id,
            prompt_tokens: tokenizer.encode(&prompt),
            answer_tokens: tokenizer.encode(&answer),
            template: template.name.clone(),
            raw_prompt: prompt,
            raw_answer: answer,
        };
        if episode.prompt_tokens.is_empty() {
            report.skipped.push(SkippedRow {
                row: row_no,
                reason: "empty prompt".into(),
            });
            continue;
        }
        if episode.len() > max_seq_len {
            report.dropped_too_long += 1;
            continue;
        }
        report.episodes.push(episode);
    }
    report.loaded = report.episodes.len();
    if report.dropped_too_long > 0 {
        log::info!("{}: dropped {} rows longer than {max_seq_len} tokens", path.display(), report.dropped_too_long);
    }
    if report.dropped_empty_answer > 0 {
        log::info!("{}: dropped {} rows with empty answers", path.display(), report.dropped_empty_answer);
    }
    Ok(report)
}
