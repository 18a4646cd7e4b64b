//! The learning-rate hypernetwork: a two-layer MLP over the prompt
//! representation and step features, followed by a clamp and a smooth
//! positive map.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{kernels, Tensor};

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_CLAMP: f64 = 8.0;

/// `exp(a)` for `a <= 0`, `1 + a + a^2 / 2` above. Strictly positive and C1.
pub fn positive_map(a: f64) -> f64 {
    if a <= 0.0 {
        a.exp()
    } else {
        1.0 + a + 0.5 * a * a
    }
}

/// Derivative of [`positive_map`].
pub fn positive_map_grad(a: f64) -> f64 {
    if a <= 0.0 {
        a.exp()
    } else {
        1.0 + a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleHead {
    /// One multiplier per adapter block.
    LayerWise,
    /// A single multiplier per step, shared by every block.
    StepWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleNetConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub head: ScaleHead,
}

impl ScaleNetConfig {
    pub fn new(d_model: usize, n_layers: usize, head: ScaleHead) -> Self {
        Self {
            d_model,
            n_layers,
            hidden: DEFAULT_HIDDEN,
            head,
        }
    }

    pub fn input_width(&self) -> usize {
        2 * self.d_model + 2
    }

    pub fn output_width(&self) -> usize {
        match self.head {
            ScaleHead::LayerWise => 2 * self.n_layers,
            ScaleHead::StepWise => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleNetParams<S> {
    pub config: ScaleNetConfig,
    /// `[hidden, input]`
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    /// `[output, hidden]`
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// One forward evaluation, kept so the backward pass can replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTensor {
    /// Unconstrained network outputs, before the clamp.
    pub raw: Vec<f64>,
    pub scales: Vec<f64>,
    pub k: usize,
    #[serde(rename = "K")]
    pub total: usize,
    /// The full network input `[h; k / K_max; K / K_max]`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub input: Vec<f64>,
    pub clamp: f64,
}

/// Gradient with the same layout as [`ScaleNetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleNetGrad<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Real> ScaleNetGrad<S> {
    pub fn zeros(config: &ScaleNetConfig) -> Self {
        let (i, h, o) = (config.input_width(), config.hidden, config.output_width());
        Self {
            w1: Tensor::zeros(&[h, i]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[o, h]),
            b2: Tensor::zeros(&[o]),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w1.add_assign(&other.w1);
        self.b1.add_assign(&other.b1);
        self.w2.add_assign(&other.w2);
        self.b2.add_assign(&other.b2);
    }

    pub fn scale_inplace(&mut self, s: S) {
        for t in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            t.scale_inplace(s);
        }
    }

    pub fn tensors(&self) -> [&Tensor<S>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn into_tensors(self) -> Vec<Tensor<S>> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm().as_f64()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

impl<S: Real> ScaleNetParams<S> {
    /// Hidden weights `N(0, 1 / input_width)`; output layer zero, so a fresh
    /// network predicts scale 1 everywhere.
    pub fn init(config: ScaleNetConfig, seed: u64) -> Result<Self> {
        if config.d_model == 0 || config.n_layers == 0 || config.hidden == 0 {
            return Err(Error::config("scalenet", "d_model, n_layers and hidden must be positive"));
        }
        let (i, h, o) = (config.input_width(), config.hidden, config.output_width());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config,
            w1: Tensor::randn(&[h, i], 1.0 / (i as f64).sqrt(), &mut rng),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[o, h]),
            b2: Tensor::zeros(&[o]),
        })
    }

    /// All weights and biases zero.
    pub fn zeros(config: ScaleNetConfig) -> Self {
        let g = ScaleNetGrad::<S>::zeros(&config);
        Self {
            config,
            w1: g.w1,
            b1: g.b1,
            w2: g.w2,
            b2: g.b2,
        }
    }

    pub fn tensors(&self) -> [&Tensor<S>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "config": self.config,
            "input_width": self.config.input_width(),
            "output_width": self.config.output_width(),
        });
        let arrays = [
            ("w1".to_string(), &self.w1),
            ("b1".to_string(), &self.b1),
            ("w2".to_string(), &self.w2),
            ("b2".to_string(), &self.b2),
        ];
        checkpoint::save(path, "scalenet", meta, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck = checkpoint::load::<S>(path, "scalenet")?;
        let config: ScaleNetConfig = serde_json::from_value(ck.manifest.meta["config"].clone())?;
        for (key, want) in [
            ("input_width", config.input_width()),
            ("output_width", config.output_width()),
        ] {
            if ck.manifest.meta[key].as_u64() != Some(want as u64) {
                return Err(Error::Checkpoint(format!("{key} does not match the stored config")));
            }
        }
        let (i, h, o) = (config.input_width(), config.hidden, config.output_width());
        Ok(Self {
            config,
            w1: ck.take("w1", &[h, i])?,
            b1: ck.take("b1", &[h])?,
            w2: ck.take("w2", &[o, h])?,
            b2: ck.take("b2", &[o])?,
        })
    }
}

struct Activations<S> {
    x: Vec<S>,
    z1: Vec<S>,
    a1: Vec<S>,
    raw: Vec<S>,
}

fn run<S: Real>(psi: &ScaleNetParams<S>, x: Vec<S>) -> Activations<S> {
    let (i, h, o) = (psi.config.input_width(), psi.config.hidden, psi.config.output_width());
    let mut z1 = psi.b1.data().to_vec();
    kernels::gemm_nt(&x, psi.w1.data(), &mut z1, 1, i, h);
    let a1: Vec<S> = z1.iter().map(|&z| kernels::silu(z)).collect();
    let mut raw = psi.b2.data().to_vec();
    kernels::gemm_nt(&a1, psi.w2.data(), &mut raw, 1, h, o);
    Activations { x, z1, a1, raw }
}

/// Scales for step `k` of a `total`-step schedule.
pub fn scalenet_forward<S: Real>(
    psi: &ScaleNetParams<S>,
    h: &[S],
    k: usize,
    total: usize,
    k_max: usize,
    clamp: f64,
) -> Result<ScaleTensor> {
    if k == 0 || k > total || total > k_max {
        return Err(Error::Input(format!("step {k} of {total} with K_max {k_max}")));
    }
    if h.len() != 2 * psi.config.d_model {
        return Err(Error::Shape(format!(
            "representation of length {} for d_model {}",
            h.len(),
            psi.config.d_model
        )));
    }
    if !(clamp > 0.0) {
        return Err(Error::config("clamp", "must be positive"));
    }
    let mut x = h.to_vec();
    x.push(S::lit(k as f64 / k_max as f64));
    x.push(S::lit(total as f64 / k_max as f64));
    let act = run(psi, x);
    let raw: Vec<f64> = act.raw.iter().map(|r| r.as_f64()).collect();
    let scales = raw.iter().map(|&r| positive_map(r.clamp(-clamp, clamp))).collect();
    Ok(ScaleTensor {
        raw,
        scales,
        k,
        total,
        input: act.x.iter().map(|v| v.as_f64()).collect(),
        clamp,
    })
}

/// Gradient of `sum_i upstream[i] * scales[i]` with respect to every
/// parameter, replaying the forward pass recorded in `inputs`.
pub fn scalenet_backward<S: Real>(psi: &ScaleNetParams<S>, inputs: &ScaleTensor, upstream: &[f64]) -> Result<ScaleNetGrad<S>> {
    let (i, h, o) = (psi.config.input_width(), psi.config.hidden, psi.config.output_width());
    if upstream.len() != o {
        return Err(Error::Shape(format!("{} upstream values for {o} outputs", upstream.len())));
    }
    if inputs.input.len() != i {
        return Err(Error::Shape(format!("recorded input of width {} for {i}", inputs.input.len())));
    }
    let act = run(psi, inputs.input.iter().map(|&v| S::lit(v)).collect());
    let draw: Vec<S> = act
        .raw
        .iter()
        .zip(upstream)
        .map(|(r, &u)| {
            let r = r.as_f64();
            if r.abs() > inputs.clamp {
                S::zero()
            } else {
                S::lit(u * positive_map_grad(r))
            }
        })
        .collect();
    let mut g = ScaleNetGrad::zeros(&psi.config);
    g.b2.data_mut().copy_from_slice(&draw);
    kernels::gemm_nn(&draw, &act.a1, g.w2.data_mut(), o, 1, h);
    let mut da1 = vec![S::zero(); h];
    kernels::gemm_nn(&draw, psi.w2.data(), &mut da1, 1, o, h);
    let dz1: Vec<S> = da1
        .iter()
        .zip(&act.z1)
        .map(|(&d, &z)| d * kernels::silu_grad(z))
        .collect();
    g.b1.data_mut().copy_from_slice(&dz1);
    kernels::gemm_nn(&dz1, &act.x, g.w1.data_mut(), h, 1, i);
    Ok(g)
}
