use crate::error::Result;
use crate::lm::{forward, LmParams};
use crate::lora::LoraState;
use crate::real::Real;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;

/// Greedy continuation of `prompt`, stopping at `stop`, after `max_new`
/// tokens, or at the model's context limit. The stop token is not returned.
pub fn greedy_generate<S: Real>(
    params: &LmParams<S>,
    lora: Option<&LoraState<S>>,
    prompt: &[usize],
    max_new: usize,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && tokens.len() < params.config.max_seq_len {
        let (logits, _) = forward(params, lora, &tokens)?;
        let last = logits.row(tokens.len() - 1);
        let next = last
            .iter()
            .enumerate()
            .fold((0, S::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if Some(next) == stop {
            break;
        }
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    #[test]
    fn respects_the_cap_and_is_deterministic() {
        let p = LmParams::<f64>::init(&ModelConfig::tiny(8), 1).unwrap();
        let a = greedy_generate(&p, None, &[1, 2, 3], 4, None).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, greedy_generate(&p, None, &[1, 2, 3], 4, None).unwrap());
        assert!(greedy_generate(&p, None, &[1, 2, 3], 0, None).unwrap().is_empty());
    }
}
