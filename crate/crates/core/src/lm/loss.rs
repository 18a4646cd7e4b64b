use super::{forward, HiddenCapture, LmParams};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::lora::LoraState;
use crate::real::Real;
use crate::tensor::{kernels, Graph, Tensor, Var};

/// Which next-token predictions count toward a loss. Flag `t` selects the
/// prediction of token `t` from the logits at row `t - 1`, so flag 0 can never
/// be set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    flags: Vec<bool>,
}

impl TokenMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    /// Every predictable position of a sequence of `len` tokens.
    pub fn all(len: usize) -> Self {
        Self {
            flags: (0..len).map(|t| t > 0).collect(),
        }
    }

    /// Positions `1..prompt_len`: the prompt predicting itself.
    pub fn prompt(prompt_len: usize) -> Self {
        Self::all(prompt_len)
    }

    /// Answer positions of a joined `(prompt, answer)` sequence.
    pub fn answer(prompt_len: usize, answer_len: usize) -> Self {
        Self {
            flags: (0..prompt_len + answer_len).map(|t| t >= prompt_len && t > 0).collect(),
        }
    }

    /// Only position `t` of a sequence of `len` tokens.
    pub fn single(len: usize, t: usize) -> Self {
        Self {
            flags: (0..len).map(|i| i == t).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().enumerate().filter(|(_, &f)| f).map(|(t, _)| t)
    }

    /// Logit rows feeding the selected predictions.
    fn rows(&self, seq_len: usize) -> Result<Vec<usize>> {
        if self.flags.len() != seq_len {
            return Err(Error::Shape(format!(
                "mask of length {} for {seq_len} tokens",
                self.flags.len()
            )));
        }
        if self.flags.first() == Some(&true) {
            return Err(Error::Input("position 0 has no preceding logits".into()));
        }
        let rows: Vec<usize> = self.positions().map(|t| t - 1).collect();
        if rows.is_empty() {
            return Err(Error::Empty("token mask selects no positions".into()));
        }
        Ok(rows)
    }
}

fn shifted_targets(tokens: &[usize]) -> Vec<usize> {
    // Row r predicts token r + 1; the last row has no target and is never
    // selected.
    let mut targets: Vec<usize> = tokens.iter().skip(1).copied().collect();
    targets.push(0);
    targets
}

/// Mean over selected positions of `-log softmax(logits[t-1])[tokens[t]]`.
pub fn masked_nll<S: Real>(logits: &Tensor<S>, tokens: &[usize], mask: &TokenMask) -> Result<S> {
    if logits.rank() != 2 || logits.shape()[0] != tokens.len() {
        return Err(Error::Shape(format!(
            "logits {:?} for {} tokens",
            logits.shape(),
            tokens.len()
        )));
    }
    let rows = mask.rows(tokens.len())?;
    let v = logits.shape()[1];
    let mut total = S::zero();
    for &r in &rows {
        let target = tokens[r + 1];
        if target >= v {
            return Err(Error::Input(format!("token {target} >= vocab size {v}")));
        }
        let row = logits.row(r);
        total += kernels::logsumexp(row) - row[target];
    }
    Ok(total / S::lit(rows.len() as f64))
}

/// Differentiable [`masked_nll`] on a graph.
pub fn masked_nll_on<S: Real>(g: &mut Graph<S>, logits: Var, tokens: &[usize], mask: &TokenMask) -> Result<Var> {
    let rows = mask.rows(tokens.len())?;
    g.cross_entropy(logits, &shifted_targets(tokens), &rows)
}

/// Mean next-token NLL of the prompt predicting itself.
pub fn prompt_nll<S: Real>(params: &LmParams<S>, lora: Option<&LoraState<S>>, episode: &Episode) -> Result<S> {
    let (logits, _) = forward(params, lora, &episode.prompt_tokens)?;
    masked_nll(&logits, &episode.prompt_tokens, &TokenMask::prompt(episode.prompt_tokens.len()))
}

/// Mean NLL per answer token, teacher-forced over the joined sequence.
pub fn answer_nll<S: Real>(params: &LmParams<S>, lora: Option<&LoraState<S>>, episode: &Episode) -> Result<S> {
    if episode.answer_tokens.is_empty() {
        return Err(Error::Empty(format!("episode {} has no answer", episode.id)));
    }
    let tokens = episode.joined_tokens();
    let (logits, _) = forward(params, lora, &tokens)?;
    let mask = TokenMask::answer(episode.prompt_tokens.len(), episode.answer_tokens.len());
    masked_nll(&logits, &tokens, &mask)
}

/// `[mean_t H0[t] ; mean_t HL[t]]`, length `2 * d_model`.
pub fn prompt_representation<S: Real>(capture: &HiddenCapture<S>) -> Result<Vec<S>> {
    if capture.h0.rows() == 0 || capture.hl.rows() == 0 {
        return Err(Error::Empty("prompt representation of zero tokens".into()));
    }
    if capture.h0.shape() != capture.hl.shape() {
        return Err(Error::Shape(format!(
            "H0 {:?} vs HL {:?}",
            capture.h0.shape(),
            capture.hl.shape()
        )));
    }
    let mut h = capture.h0.mean_rows();
    h.extend(capture.hl.mean_rows());
    Ok(h)
}
