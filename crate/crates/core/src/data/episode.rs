use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One prompt/answer pair. The prompt is what adaptation sees; the answer is
/// only used for scoring and for the meta-objective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub prompt_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub template: String,
    pub raw_prompt: String,
    pub raw_answer: String,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.prompt_tokens.len() + self.answer_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prompt followed by answer, the teacher-forced evaluation sequence.
    pub fn joined_tokens(&self) -> Vec<usize> {
        let mut all = self.prompt_tokens.clone();
        all.extend_from_slice(&self.answer_tokens);
        all
    }

    pub fn validate(&self, max_seq_len: usize, need_answer: bool) -> Result<()> {
        if self.prompt_tokens.is_empty() {
            return Err(Error::Empty(format!("episode {} has an empty prompt", self.id)));
        }
        if need_answer && self.answer_tokens.is_empty() {
            return Err(Error::Empty(format!("episode {} has an empty answer", self.id)));
        }
        if self.len() > max_seq_len {
            return Err(Error::Input(format!(
                "episode {} has {} tokens > max_seq_len {}",
                self.id,
                self.len(),
                max_seq_len
            )));
        }
        Ok(())
    }
}
