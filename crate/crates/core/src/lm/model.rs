use super::LmParams;
use crate::error::{Error, Result};
use crate::lora::{LoraState, LoraVars};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

const NORM_EPS: f64 = 1e-6;
const MASKED_SCORE: f64 = -1e9;

/// Hidden states captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenCapture<S> {
    /// Input to the first layer (token plus position embeddings), `[T, d]`.
    pub h0: Tensor<S>,
    /// Output of the last layer after the final normalization, `[T, d]`.
    pub hl: Tensor<S>,
}

struct LayerVars {
    attn_norm: Var,
    wq_t: Var,
    wk_t: Var,
    wv_t: Var,
    wo_t: Var,
    mlp_norm: Var,
    w_up_t: Var,
    w_down_t: Var,
}

/// Base weights placed on a graph, with projections pre-transposed.
pub struct BaseVars {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
    head_t: Var,
    /// Leaves in [`LmParams::tensors_mut`] order, when trainable.
    pub leaves: Vec<Var>,
}

impl BaseVars {
    fn place<S: Real>(g: &mut Graph<S>, params: &LmParams<S>, trainable: bool) -> Result<Self> {
        let mut leaves = Vec::new();
        let mut put = |g: &mut Graph<S>, t: &Tensor<S>| {
            if trainable {
                let v = g.leaf(t.clone());
                leaves.push(v);
                v
            } else {
                g.constant(t.clone())
            }
        };
        let tok_emb = put(g, &params.tok_emb);
        let pos_emb = put(g, &params.pos_emb);
        let mut raw_layers = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            raw_layers.push([
                put(g, &l.attn_norm),
                put(g, &l.wq),
                put(g, &l.wk),
                put(g, &l.wv),
                put(g, &l.wo),
                put(g, &l.mlp_norm),
                put(g, &l.w_up),
                put(g, &l.w_down),
            ]);
        }
        let final_norm = put(g, &params.final_norm);
        let head = match &params.head {
            Some(h) => put(g, h),
            None => tok_emb,
        };
        let mut layers = Vec::with_capacity(raw_layers.len());
        for [attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down] in raw_layers {
            layers.push(LayerVars {
                attn_norm,
                wq_t: g.transpose(wq)?,
                wk_t: g.transpose(wk)?,
                wv_t: g.transpose(wv)?,
                wo_t: g.transpose(wo)?,
                mlp_norm,
                w_up_t: g.transpose(w_up)?,
                w_down_t: g.transpose(w_down)?,
            });
        }
        let head_t = g.transpose(head)?;
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head_t,
            leaves,
        })
    }

    /// Frozen weights: no gradient is ever computed for them.
    pub fn constants<S: Real>(g: &mut Graph<S>, params: &LmParams<S>) -> Result<Self> {
        Self::place(g, params, false)
    }

    /// Trainable weights, for pretraining.
    pub fn leaves<S: Real>(g: &mut Graph<S>, params: &LmParams<S>) -> Result<Self> {
        Self::place(g, params, true)
    }
}

/// Graph handles produced by [`forward_on`].
pub struct Forward {
    pub logits: Var,
    pub h0: Var,
    pub hl: Var,
}

impl Forward {
    pub fn capture<S: Real>(&self, g: &Graph<S>) -> HiddenCapture<S> {
        HiddenCapture {
            h0: g.value(self.h0).clone(),
            hl: g.value(self.hl).clone(),
        }
    }
}

/// `x @ w_t + scale * (x @ A^T) @ B^T`
fn project<S: Real>(g: &mut Graph<S>, x: Var, w_t: Var, adapter: Option<(Var, Var, S)>) -> Result<Var> {
    let base = g.matmul(x, w_t)?;
    match adapter {
        None => Ok(base),
        Some((a, b, scale)) => {
            let a_t = g.transpose(a)?;
            let b_t = g.transpose(b)?;
            let down = g.matmul(x, a_t)?;
            let up = g.matmul(down, b_t)?;
            let up = g.scale(up, scale);
            g.add(base, up)
        }
    }
}

fn causal_mask<S: Real>(t: usize) -> Tensor<S> {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = S::lit(MASKED_SCORE);
        }
    }
    m
}

/// Build the forward pass on `g`. Logits at row `t` depend only on tokens
/// `0..=t`.
pub fn forward_on<S: Real>(
    g: &mut Graph<S>,
    params: &LmParams<S>,
    base: &BaseVars,
    lora: Option<&LoraVars>,
    tokens: &[usize],
) -> Result<Forward> {
    let cfg = &params.config;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Empty("forward on an empty token sequence".into()));
    }
    if t > cfg.max_seq_len {
        return Err(Error::Input(format!("{t} tokens > max_seq_len {}", cfg.max_seq_len)));
    }
    if let Some(l) = lora {
        if l.blocks.len() != 2 * cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} adapter blocks for {} layers",
                l.blocks.len(),
                cfg.n_layers
            )));
        }
    }
    let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let positions: Vec<usize> = (0..t).collect();
    let tok = g.embedding(base.tok_emb, tokens)?;
    let pos = g.embedding(base.pos_emb, &positions)?;
    let h0 = g.add(tok, pos)?;
    let mask = g.constant(causal_mask(t));
    let score_scale = S::lit(1.0 / (dh as f64).sqrt());

    let mut x = h0;
    for (li, lv) in base.layers.iter().enumerate() {
        let adapter = |p: usize| lora.map(|l| (l.blocks[2 * li + p].0, l.blocks[2 * li + p].1, S::lit(l.scale)));
        let a = g.rms_norm(x, lv.attn_norm, NORM_EPS)?;
        let q = project(g, a, lv.wq_t, adapter(0))?;
        let k = g.matmul(a, lv.wk_t)?;
        let v = project(g, a, lv.wv_t, adapter(1))?;
        let mut heads = Vec::with_capacity(h);
        for hi in 0..h {
            let qh = g.narrow(q, hi * dh, dh)?;
            let kh = g.narrow(k, hi * dh, dh)?;
            let vh = g.narrow(v, hi * dh, dh)?;
            let kh_t = g.transpose(kh)?;
            let scores = g.matmul(qh, kh_t)?;
            let scores = g.scale(scores, score_scale);
            let scores = g.add(scores, mask)?;
            let att = g.softmax(scores);
            heads.push(g.matmul(att, vh)?);
        }
        let merged = if h == 1 { heads[0] } else { g.concat(&heads)? };
        let attn_out = g.matmul(merged, lv.wo_t)?;
        x = g.add(x, attn_out)?;

        let m = g.rms_norm(x, lv.mlp_norm, NORM_EPS)?;
        let up = g.matmul(m, lv.w_up_t)?;
        let act = g.silu(up);
        let down = g.matmul(act, lv.w_down_t)?;
        x = g.add(x, down)?;
    }
    debug_assert_eq!(g.value(x).shape(), &[t, d]);
    let hl = g.rms_norm(x, base.final_norm, NORM_EPS)?;
    let logits = g.matmul(hl, base.head_t)?;
    Ok(Forward { logits, h0, hl })
}

/// Logits `[T, V]` and hidden capture for `tokens`, with optional adapters.
pub fn forward<S: Real>(
    params: &LmParams<S>,
    lora: Option<&LoraState<S>>,
    tokens: &[usize],
) -> Result<(Tensor<S>, HiddenCapture<S>)> {
    let mut g = Graph::new();
    let base = BaseVars::constants(&mut g, params)?;
    let lv = lora.map(|l| LoraVars::constants(&mut g, l));
    let out = forward_on(&mut g, params, &base, lv.as_ref(), tokens)?;
    Ok((g.value(out.logits).clone(), out.capture(&g)))
}
