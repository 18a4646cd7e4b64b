//! Central-difference checks of every differentiable primitive and of the
//! prompt-NLL gradient through the full adapted model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::lm::{forward, masked_nll, LmParams, ModelConfig, TokenMask};
use crate::lora::{init_lora, prompt_pass, LoraBlock, LoraConfig, LoraState};
use crate::tensor::{compare_gradient, gradcheck, DiscrepancyReport, Graph, Tensor, Var};

const EPS: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub name: String,
    pub report: DiscrepancyReport,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduce an op's output to a scalar through fixed random weights, so no
/// structural symmetry (such as softmax rows summing to one) hides errors.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(randn(g.value(y).shape(), &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>, Build)> {
    let c34 = randn(&[3, 4], rng);
    let c45 = randn(&[4, 5], rng);
    let c245 = randn(&[2, 4, 5], rng);
    let c4 = randn(&[4], rng);
    let gain = randn(&[4], rng);
    let x34 = randn(&[3, 4], rng);
    let ids = vec![2usize, 0, 3, 2];
    let targets = vec![1usize, 4, 0];
    let mut cases: Vec<(&'static str, Tensor<f64>, Build)> = Vec::new();
    macro_rules! case {
        ($name:expr, $point:expr, $seed:expr, |$g:ident, $x:ident| $body:expr) => {{
            cases.push((
                $name,
                $point,
                Box::new(move |$g: &mut Graph<f64>, $x: Var| {
                    let y = $body;
                    weighted($g, y, $seed)
                }),
            ));
        }};
    }
    {
        let c = c45.clone();
        case!("matmul/left", randn(&[3, 4], rng), 1, |g, x| {
            let b = g.constant(c.clone());
            g.matmul(x, b)?
        });
    }
    {
        let c = c34.clone();
        case!("matmul/right", randn(&[4, 5], rng), 2, |g, x| {
            let a = g.constant(c.clone());
            g.matmul(a, x)?
        });
    }
    {
        let c = c245.clone();
        case!("matmul/batched", randn(&[2, 3, 4], rng), 3, |g, x| {
            let b = g.constant(c.clone());
            g.matmul(x, b)?
        });
    }
    case!("transpose", randn(&[2, 3, 4], rng), 4, |g, x| g.transpose(x)?);
    {
        let c = c4.clone();
        case!("add/broadcast", randn(&[3, 4], rng), 5, |g, x| {
            let b = g.constant(c.clone());
            g.add(x, b)?
        });
    }
    {
        let c = c34.clone();
        case!("add/reduced-operand", randn(&[4], rng), 6, |g, x| {
            let a = g.constant(c.clone());
            g.add(a, x)?
        });
    }
    {
        let c = c34.clone();
        case!("sub/reduced-operand", randn(&[4], rng), 7, |g, x| {
            let a = g.constant(c.clone());
            g.sub(a, x)?
        });
    }
    {
        let c = c4.clone();
        case!("sub/broadcast", randn(&[3, 4], rng), 23, |g, x| {
            let b = g.constant(c.clone());
            g.sub(x, b)?
        });
    }
    {
        let c = c4.clone();
        case!("mul/broadcast", randn(&[3, 4], rng), 8, |g, x| {
            let b = g.constant(c.clone());
            g.mul(x, b)?
        });
    }
    {
        let c = c34.clone();
        case!("mul/reduced-operand", randn(&[4], rng), 9, |g, x| {
            let a = g.constant(c.clone());
            g.mul(a, x)?
        });
    }
    case!("mul/self", randn(&[3, 4], rng), 10, |g, x| g.mul(x, x)?);
    case!("scale", randn(&[3, 4], rng), 11, |g, x| g.scale(x, -1.7));
    case!("add_scalar", randn(&[3, 4], rng), 12, |g, x| {
        let y = g.add_scalar(x, 0.3);
        g.mul(y, y)?
    });
    case!("exp", randn(&[3, 4], rng), 13, |g, x| g.exp(x));
    case!("log", randn(&[3, 4], rng).map(|v| 0.5 + v.abs()), 14, |g, x| g.log(x));
    case!("silu", randn(&[3, 4], rng), 15, |g, x| g.silu(x));
    case!("softmax", randn(&[3, 5], rng), 16, |g, x| g.softmax(x));
    {
        let gn = gain.clone();
        case!("rms_norm/input", x34.clone(), 17, |g, x| {
            let w = g.constant(gn.clone());
            g.rms_norm(x, w, 1e-6)?
        });
    }
    {
        let xs = x34.clone();
        case!("rms_norm/gain", gain.clone(), 18, |g, w| {
            let x = g.constant(xs.clone());
            g.rms_norm(x, w, 1e-6)?
        });
    }
    case!("embedding", randn(&[5, 3], rng), 19, |g, t| g.embedding(t, &ids)?);
    {
        let tg = targets.clone();
        cases.push((
            "cross_entropy",
            randn(&[3, 5], rng),
            Box::new(move |g: &mut Graph<f64>, x: Var| g.cross_entropy(x, &tg, &[0, 2])),
        ));
    }
    cases.push((
        "sum",
        randn(&[3, 4], rng),
        Box::new(|g: &mut Graph<f64>, x: Var| {
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        }),
    ));
    cases.push((
        "mean",
        randn(&[3, 4], rng),
        Box::new(|g: &mut Graph<f64>, x: Var| {
            let y = g.exp(x);
            Ok(g.mean(y))
        }),
    ));
    {
        let c = randn(&[3, 2], rng);
        case!("concat", randn(&[3, 4], rng), 20, |g, x| {
            let b = g.constant(c.clone());
            g.concat(&[b, x, x])?
        });
    }
    case!("narrow", randn(&[3, 6], rng), 21, |g, x| g.narrow(x, 2, 3)?);
    case!("reshape", randn(&[3, 4], rng), 22, |g, x| g.reshape(x, &[2, 6])?);
    cases
}

/// Every primitive on small random inputs.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases(&mut rng)
        .into_iter()
        .map(|(name, point, build)| {
            Ok(GradcheckCase {
                name: name.to_string(),
                report: gradcheck(build, &point, EPS)?,
            })
        })
        .collect()
}

/// Prompt NLL against each `A` and `B` of every adapter block, on the tiny
/// model with a random (non-zero) adapter state and a prompt of `len` tokens.
pub fn lora_gradchecks(seed: u64, len: usize) -> Result<Vec<GradcheckCase>> {
    let vocab = 11;
    let cfg = ModelConfig::tiny(vocab);
    let params = LmParams::<f64>::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f7261);
    let mut lora: LoraState<f64> = init_lora(&cfg, &LoraConfig { sigma: 0.3, ..Default::default() }, seed)?;
    for b in &mut lora.blocks {
        b.b = Tensor::randn(b.b.shape(), 0.3, &mut rng);
    }
    let tokens: Vec<usize> = (0..len).map(|i| (i * 7 + seed as usize) % vocab).collect();
    let episode = crate::data::Episode {
        id: "gradcheck".into(),
        prompt_tokens: tokens.clone(),
        answer_tokens: vec![],
        template: "plain".into(),
        raw_prompt: String::new(),
        raw_answer: String::new(),
    };
    let analytic = prompt_pass(&params, &lora, &episode)?.grads;
    let mask = TokenMask::prompt(len);
    let loss_at = |state: &LoraState<f64>| -> Result<f64> {
        let (logits, _) = forward(&params, Some(state), &tokens)?;
        masked_nll(&logits, &tokens, &mask)
    };
    let mut out = Vec::new();
    for (i, blk) in lora.blocks.iter().enumerate() {
        for (which, point, grad) in [("A", &blk.a, &analytic.blocks[i].a), ("B", &blk.b, &analytic.blocks[i].b)] {
            let report = compare_gradient(
                |p| {
                    let mut s = lora.clone();
                    let target: &mut LoraBlock<f64> = &mut s.blocks[i];
                    if which == "A" {
                        target.a = p.clone();
                    } else {
                        target.b = p.clone();
                    }
                    loss_at(&s)
                },
                point,
                grad,
                EPS,
            )?;
            out.push(GradcheckCase {
                name: format!("prompt-nll/block{i}/{which}"),
                report,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_primitives_pass() {
        for c in primitive_gradchecks(0).unwrap() {
            assert!(c.report.passed(), "{}: {:e}", c.name, c.report.max_rel_error);
        }
    }

    #[test]
    fn adapted_prompt_nll_passes() {
        for c in lora_gradchecks(1, 8).unwrap().into_iter().chain(lora_gradchecks(4, 5).unwrap()) {
            assert!(c.report.passed(), "{}: {:e}", c.name, c.report.max_rel_error);
        }
    }
}
