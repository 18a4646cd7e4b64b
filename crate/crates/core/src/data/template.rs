//! Prompt templates for the supported JSONL schemas.
//!
//! Cues are rendered exactly as written below with no trailing whitespace:
//! the prompt of every shipped template ends with the bytes of its cue
//! (`Summary:`, `Answer:` or `### Response:`), and the answer text follows
//! immediately in the teacher-forced sequence.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Text(String),
    Field(String),
    /// Renders `then` when `field` is present and non-empty, else `otherwise`.
    IfNonEmpty {
        field: String,
        then: Vec<Part>,
        otherwise: Vec<Part>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerBinding {
    /// A string field.
    Field(String),
    /// First entry of a list field. Also accepts the `{"text": [...]}` object
    /// layout and a bare string.
    FirstOf(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub name: String,
    pub parts: Vec<Part>,
    pub answer: AnswerBinding,
    pub cue: String,
}

fn text(s: &str) -> Part {
    Part::Text(s.to_string())
}

fn field(s: &str) -> Part {
    Part::Field(s.to_string())
}

const ALPACA_PREAMBLE: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n\n";
const ALPACA_INPUT_PREAMBLE: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.\n\n";

fn instruction_template(name: &str, instruction_field: &str, answer_field: &str) -> TemplateSpec {
    TemplateSpec {
        name: name.into(),
        parts: vec![
            text(ALPACA_PREAMBLE),
            text("### Instruction:\n"),
            field(instruction_field),
            text("\n\n### Response:"),
        ],
        answer: AnswerBinding::Field(answer_field.into()),
        cue: "### Response:".into(),
    }
}

/// Every shipped template, by name.
pub fn registry() -> Vec<TemplateSpec> {
    vec![
        TemplateSpec {
            name: "plain".into(),
            parts: vec![field("prompt")],
            answer: AnswerBinding::Field("answer".into()),
            cue: String::new(),
        },
        TemplateSpec {
            name: "xsum".into(),
            parts: vec![
                text("Summarize the following news article in one concise sentence.\n\nArticle:\n"),
                field("document"),
                text("\n\nSummary:"),
            ],
            answer: AnswerBinding::Field("summary".into()),
            cue: "Summary:".into(),
        },
        TemplateSpec {
            name: "squad".into(),
            parts: vec![
                text("You are given a passage and a question.\nAnswer with the exact text span from the passage. Output ONLY the answer span.\n\nPassage:\n"),
                field("context"),
                text("\n\nQuestion:\n"),
                field("question"),
                text("\n\nAnswer:"),
            ],
            answer: AnswerBinding::FirstOf("answers".into()),
            cue: "Answer:".into(),
        },
        TemplateSpec {
            name: "nq-open".into(),
            parts: vec![
                text("Give a short answer of the following question. Output only the answer.\n\nQuestion: "),
                field("question"),
                text("\nAnswer:"),
            ],
            answer: AnswerBinding::FirstOf("answer".into()),
            cue: "Answer:".into(),
        },
        instruction_template("agriculture-qa", "question", "answers"),
        instruction_template("instruction-output", "instruction", "output"),
        TemplateSpec {
            name: "alpaca".into(),
            parts: vec![Part::IfNonEmpty {
                field: "input".into(),
                then: vec![
                    text(ALPACA_INPUT_PREAMBLE),
                    text("### Instruction:\n"),
                    field("instruction"),
                    text("\n\n### Input:\n"),
                    field("input"),
                    text("\n\n### Response:"),
                ],
                otherwise: vec![
                    text(ALPACA_PREAMBLE),
                    text("### Instruction:\n"),
                    field("instruction"),
                    text("\n\n### Response:"),
                ],
            }],
            answer: AnswerBinding::Field("output".into()),
            cue: "### Response:".into(),
        },
    ]
}

pub fn template(name: &str) -> Result<TemplateSpec> {
    registry()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| {
            let names: Vec<String> = registry().into_iter().map(|t| t.name).collect();
            Error::Input(format!("unknown template `{name}` (known: {})", names.join(", ")))
        })
}

fn string_field<'a>(row: &'a Value, name: &str) -> Result<&'a str> {
    match row.get(name) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(Error::Input(format!("field `{name}` is not a string: {other}"))),
        None => Err(Error::Input(format!("missing field `{name}`"))),
    }
}

fn render_parts(parts: &[Part], row: &Value, out: &mut String) -> Result<()> {
    for part in parts {
        match part {
            Part::Text(t) => out.push_str(t),
            Part::Field(f) => out.push_str(string_field(row, f)?),
            Part::IfNonEmpty {
                field,
                then,
                otherwise,
            } => {
                let present = matches!(row.get(field), Some(Value::String(s)) if !s.is_empty());
                render_parts(if present { then } else { otherwise }, row, out)?;
            }
        }
    }
    Ok(())
}

impl TemplateSpec {
    pub fn render_prompt(&self, row: &Value) -> Result<String> {
        let mut out = String::new();
        render_parts(&self.parts, row, &mut out)?;
        Ok(out)
    }

    /// The gold answer; `Ok(None)` when the bound list is empty.
    pub fn extract_answer(&self, row: &Value) -> Result<Option<String>> {
        match &self.answer {
            AnswerBinding::Field(f) => Ok(Some(string_field(row, f)?.to_string())),
            AnswerBinding::FirstOf(f) => {
                let value = row
                    .get(f)
                    .ok_or_else(|| Error::Input(format!("missing field `{f}`")))?;
                let list = match value {
                    Value::String(s) => return Ok(Some(s.clone())),
                    Value::Array(items) => items,
                    Value::Object(obj) => match obj.get("text") {
                        Some(Value::Array(items)) => items,
                        _ => return Err(Error::Input(format!("field `{f}` has no `text` list"))),
                    },
                    other => return Err(Error::Input(format!("field `{f}` is not a list: {other}"))),
                };
                match list.first() {
                    None => Ok(None),
                    Some(Value::String(s)) => Ok(Some(s.clone())),
                    Some(other) => Err(Error::Input(format!("`{f}[0]` is not a string: {other}"))),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn xsum_prompt_ends_with_summary_cue() {
        let t = template("xsum").unwrap();
        let row = json!({"document": "A storm hit.", "summary": "Storm."});
        let p = t.render_prompt(&row).unwrap();
        assert!(p.ends_with("Summary:"));
        assert!(p.contains("Article:\nA storm hit.\n\n"));
        assert_eq!(t.extract_answer(&row).unwrap().as_deref(), Some("Storm."));
    }

    #[test]
    fn alpaca_input_block_only_when_input_non_empty() {
        let t = template("alpaca").unwrap();
        let with = json!({"instruction": "Add.", "input": "2 3", "output": "5"});
        let without = json!({"instruction": "Add.", "input": "", "output": "5"});
        let missing = json!({"instruction": "Add.", "output": "5"});
        let p_with = t.render_prompt(&with).unwrap();
        assert!(p_with.contains("### Input:\n2 3\n\n### Response:"));
        assert!(p_with.starts_with(ALPACA_INPUT_PREAMBLE));
        for row in [without, missing] {
            let p = t.render_prompt(&row).unwrap();
            assert!(!p.contains("### Input:"));
            assert!(p.ends_with("### Response:"));
            assert!(p.starts_with(ALPACA_PREAMBLE));
        }
    }

    #[test]
    fn squad_takes_first_answer_in_either_layout() {
        let t = template("squad").unwrap();
        let flat = json!({"context": "c", "question": "q", "answers": ["x", "y"]});
        let nested = json!({"context": "c", "question": "q", "answers": {"text": ["x"], "answer_start": [0]}});
        let empty = json!({"context": "c", "question": "q", "answers": []});
        assert_eq!(t.extract_answer(&flat).unwrap().as_deref(), Some("x"));
        assert_eq!(t.extract_answer(&nested).unwrap().as_deref(), Some("x"));
        assert_eq!(t.extract_answer(&empty).unwrap(), None);
        assert!(t.render_prompt(&flat).unwrap().ends_with("\n\nAnswer:"));
    }

    #[test]
    fn nq_open_layout() {
        let t = template("nq-open").unwrap();
        let row = json!({"question": "who?", "answer": ["me"]});
        assert_eq!(
            t.render_prompt(&row).unwrap(),
            "Give a short answer of the following question. Output only the answer.\n\nQuestion: who?\nAnswer:"
        );
    }

    #[test]
    fn every_template_ends_with_its_cue() {
        let row = json!({
            "prompt": "p", "answer": "a", "document": "d", "summary": "s",
            "context": "c", "question": "q", "answers": ["a"],
            "instruction": "i", "input": "x", "output": "o"
        });
        for t in registry() {
            let p = t.render_prompt(&row).unwrap();
            assert!(p.ends_with(&t.cue), "{}", t.name);
        }
    }

    #[test]
    fn unknown_template_is_an_error() {
        assert!(template("nope").is_err());
    }
}
