#![allow(dead_code)]

use lwtta_core::data::{gen_synthetic, Episode, SyntheticTask, Tokenizer, ALPHABET};
use lwtta_core::lm::{LmParams, ModelConfig};
use lwtta_core::lora::{init_lora, LoraConfig, LoraState};
use lwtta_core::scalenet::{ScaleHead, ScaleNetConfig, ScaleNetParams};
use lwtta_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tokenizer() -> Tokenizer {
    Tokenizer::fit_small_vocab([ALPHABET])
}

/// d=16, L=2 with room for short synthetic episodes.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        max_seq_len: 64,
        ..ModelConfig::tiny(tokenizer().vocab_size())
    }
}

pub fn tiny_model(seed: u64) -> LmParams<f64> {
    LmParams::init(&tiny_config(), seed).unwrap()
}

/// Short kv-recall episodes that fit the tiny model.
pub fn episodes(n: usize, seed: u64) -> Vec<Episode> {
    gen_synthetic(SyntheticTask::KvRecall, n, seed, 0, &tokenizer()).unwrap()
}

/// An adapter away from the identity, so every block has a gradient.
pub fn random_lora(params: &LmParams<f64>, seed: u64) -> LoraState<f64> {
    let cfg = LoraConfig {
        sigma: 0.3,
        ..LoraConfig::default()
    };
    let mut lora = init_lora(&params.config, &cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    for b in &mut lora.blocks {
        b.b = Tensor::randn(b.b.shape(), 0.3, &mut rng);
    }
    lora
}

/// A ScaleNet with every parameter random, so no gradient path is zero.
pub fn random_psi(params: &LmParams<f64>, head: ScaleHead, seed: u64) -> ScaleNetParams<f64> {
    let config = ScaleNetConfig::new(params.config.d_model, params.config.n_layers, head);
    let mut psi = ScaleNetParams::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1e);
    psi.w2 = Tensor::randn(psi.w2.shape(), 0.05, &mut rng);
    psi.b1 = Tensor::randn(psi.b1.shape(), 0.1, &mut rng);
    psi.b2 = Tensor::randn(psi.b2.shape(), 0.1, &mut rng);
    psi
}

/// Answer NLL of the stop-gradient surrogate: the episode's recorded prompt
/// gradients and representations are held fixed and only the scales are
/// recomputed from `psi`.
pub fn surrogate_nll(
    params: &LmParams<f64>,
    psi: &ScaleNetParams<f64>,
    trace: &lwtta_core::tta::TtaTrace<f64>,
    episode: &Episode,
    cfg: &lwtta_core::tta::TtaConfig,
    seed: u64,
) -> f64 {
    let d2 = 2 * params.config.d_model;
    let mut lora = init_lora::<f64>(&params.config, &cfg.lora, seed).unwrap();
    for step in &trace.steps {
        let net = step.net.as_ref().unwrap();
        let (_, scales) = lwtta_core::tta::step_scales(psi, &net.input[..d2], step.k, cfg).unwrap();
        lora = lora.scaled_step(step.grads.as_ref().unwrap(), cfg.eta, &scales).unwrap();
    }
    lwtta_core::lm::answer_nll(params, Some(&lora), episode).unwrap()
}

/// Central differences of `surrogate_nll` over every ScaleNet coordinate.
pub fn surrogate_fd(
    params: &LmParams<f64>,
    psi: &ScaleNetParams<f64>,
    trace: &lwtta_core::tta::TtaTrace<f64>,
    episode: &Episode,
    cfg: &lwtta_core::tta::TtaConfig,
    seed: u64,
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..4 {
        let n = psi.tensors()[t].numel();
        for i in 0..n {
            let at = |delta: f64| {
                let mut p = psi.clone();
                p.tensors_mut()[t].data_mut()[i] += delta;
                surrogate_nll(params, &p, trace, episode, cfg, seed)
            };
            out.push((at(h) - at(-h)) / (2.0 * h));
        }
    }
    out
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
    let is_subseq = |sub: &[&str]| {
        let mut it = b.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&str> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

pub fn f_measure(lcs: usize, m: usize, n: usize) -> f64 {
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / m as f64;
    let r = lcs as f64 / n as f64;
    2.0 * p * r / (p + r)
}
