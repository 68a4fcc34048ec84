//! Finite-difference verification of every training objective through the
//! full network.
//!
//! Each check builds a small random network and input, computes the analytic
//! gradient with the hand-written reverse pass, and compares every parameter
//! coordinate against a central difference evaluated in f64. The network is
//! piecewise linear, so a difference step that moves any rectifier (or the
//! split-loss clip) across its kink is not a derivative of the piece the
//! analytic gradient describes; such coordinates are re-evaluated with a
//! smaller step until the activation pattern is stable on both sides.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mca::{activate, overall_loss_grad, seg_loss_grad, McaConfig, MetaActivation};
use crate::metric_embedding::{batch_circle_loss, region_pool_raw, CircleLossConfig, ProjectionHead};
use crate::tensor_io::{BitMask, LabelMap, IGNORE_LABEL};
use crate::toynet::{pool_backward, NetDims, ToyNetParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub seeds: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are compared absolutely.
    pub floor: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            height: 6,
            width: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Batch circle loss on region embeddings (pool → projection head).
    CircleLoss,
    /// Cross entropy on the logits.
    SegLoss,
    /// Four-term fine-tuning objective with per-channel sigmoid.
    OverallSigmoid,
    /// Four-term fine-tuning objective with softmax over all channels.
    OverallSoftmax,
}

impl CheckKind {
    pub const ALL: [CheckKind; 4] = [
        CheckKind::CircleLoss,
        CheckKind::SegLoss,
        CheckKind::OverallSigmoid,
        CheckKind::OverallSoftmax,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub kind: CheckKind,
    pub seed: u64,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_param: usize,
    /// Coordinates that needed a smaller step to stay on one linear piece.
    pub reduced_steps: usize,
    pub passed: bool,
}

/// Smallest step tried before a coordinate is declared unverifiable.
const MIN_STEP_FACTOR: f64 = 1e-3;

/// Loss, analytic gradient and a fingerprint of every kink the loss depends on.
type Evaluation = (f64, Vec<f64>, Vec<bool>);

struct Problem {
    params: Vec<f64>,
    eval: Box<dyn Fn(&[f64], bool) -> Result<Evaluation>>,
}

fn random_params(dims: NetDims, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // random biases keep roughly half the rectifiers active on tiny inputs
    ToyNetParams::init(dims, rng)
        .params()
        .iter()
        .map(|&v| if v == 0.0 { rng.gen_range(-0.3..0.5) } else { v })
        .collect()
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn random_labels(h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> LabelMap {
    let labels = (0..h * w)
        .map(|i| {
            if i % 7 == 3 {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..classes)
            }
        })
        .collect();
    LabelMap::new(h, w, labels).expect("label count")
}

fn small_dims(outputs: usize) -> NetDims {
    NetDims {
        input: 3,
        hidden: 3,
        features: 4,
        outputs,
    }
}

fn seg_problem(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Problem {
    let (h, w) = (cfg.height, cfg.width);
    let dims = small_dims(4);
    let image = random_image(h, w, rng);
    let labels = random_labels(h, w, 4, rng);
    Problem {
        params: random_params(dims, rng),
        eval: Box::new(move |p, want_grad| {
            let net = ToyNetParams::from_params(dims, p.to_vec())?;
            let cache = net.forward_raw(&image, h, w);
            let (loss, d_u) = seg_loss_grad(&cache.logits, dims.outputs, dims.outputs, &labels)?;
            let mut grads = vec![0.0; p.len()];
            if want_grad {
                net.backward(&cache, Some(&d_u), None, &mut grads);
            }
            Ok((loss, grads, cache.relu_pattern()))
        }),
    }
}

fn overall_problem(cfg: &GradCheckConfig, activation: MetaActivation, rng: &mut ChaCha8Rng) -> Problem {
    let (h, w) = (cfg.height, cfg.width);
    let n_known = 3;
    let mca = McaConfig {
        k: 2,
        // small frames: a larger scale keeps the split term off its clip
        eta: 0.5,
        activation,
        ..McaConfig::default()
    };
    let dims = small_dims(n_known + mca.k);
    let image = random_image(h, w, rng);
    let labels = random_labels(h, w, n_known as u8, rng);
    Problem {
        params: random_params(dims, rng),
        eval: Box::new(move |p, want_grad| {
            let net = ToyNetParams::from_params(dims, p.to_vec())?;
            let cache = net.forward_raw(&image, h, w);
            let (br, d_u) = overall_loss_grad(&cache.logits, dims.outputs, n_known, &labels, &image, &mca)?;
            let mut grads = vec![0.0; p.len()];
            if want_grad {
                net.backward(&cache, Some(&d_u), None, &mut grads);
            }
            let plane = h * w;
            let c = activate(&cache.logits, dims.outputs, plane, mca.activation);
            let mut pattern = cache.relu_pattern();
            for i in n_known..dims.outputs {
                let mass: f64 = c[i * plane..(i + 1) * plane].iter().sum();
                pattern.push(mca.eta * mass > 1.0);
            }
            Ok((br.total, grads, pattern))
        }),
    }
}

fn circle_problem(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Problem {
    let (h, w) = (cfg.height, cfg.width);
    let dims = small_dims(3);
    let (head_hidden, head_out) = (5, 3);
    let net_params = random_params(dims, rng);
    let head_params: Vec<f64> = (0..ProjectionHead::num_params(dims.features, head_hidden, head_out))
        .map(|_| rng.gen_range(-0.8..0.8))
        .collect();
    let image = random_image(h, w, rng);
    // six regions partitioning the frame, two per class
    let owner: Vec<usize> = (0..h * w).map(|i| if i < 6 { i } else { rng.gen_range(0..6) }).collect();
    let masks: Vec<BitMask> = (0..6)
        .map(|r| BitMask::new(h, w, owner.iter().map(|&o| o == r).collect()).expect("mask size"))
        .collect();
    let classes: Vec<u8> = vec![0, 0, 1, 1, 2, 2];
    let circle = CircleLossConfig::default();
    let n_net = dims.num_params();
    let mut params = net_params;
    params.extend(head_params);
    Problem {
        params,
        eval: Box::new(move |p, want_grad| {
            let net = ToyNetParams::from_params(dims, p[..n_net].to_vec())?;
            let head = ProjectionHead::from_params(dims.features, head_hidden, head_out, p[n_net..].to_vec())?;
            let cache = net.forward_raw(&image, h, w);
            let mut pattern = cache.relu_pattern();
            let mut pooled = Vec::new();
            let mut embeddings = Vec::new();
            let mut caches = Vec::new();
            for m in &masks {
                let x = region_pool_raw(&cache.features, dims.features, m)?;
                let (e, hc) = head.forward_cached(&x);
                pattern.extend(hc.active());
                pooled.push(x);
                embeddings.push(e);
                caches.push(hc);
            }
            let (loss, d_emb) = batch_circle_loss(&embeddings, &classes, &circle)?;
            let mut grads = vec![0.0; p.len()];
            if want_grad {
                let mut d_f = vec![0.0; cache.features.len()];
                let (g_net, g_head) = grads.split_at_mut(n_net);
                for (((x, hc), d), m) in pooled.iter().zip(&caches).zip(&d_emb).zip(&masks) {
                    let d_x = head.backward(x, hc, d, g_head);
                    pool_backward(&d_x, m.bits(), &mut d_f);
                }
                net.backward(&cache, None, Some(&d_f), g_net);
            }
            Ok((loss, grads, pattern))
        }),
    }
}

fn build(kind: CheckKind, cfg: &GradCheckConfig, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        CheckKind::CircleLoss => circle_problem(cfg, &mut rng),
        CheckKind::SegLoss => seg_problem(cfg, &mut rng),
        CheckKind::OverallSigmoid => overall_problem(cfg, MetaActivation::SigmoidPerChannel, &mut rng),
        CheckKind::OverallSoftmax => overall_problem(cfg, MetaActivation::SoftmaxAll, &mut rng),
    }
}

/// Runs one check: analytic gradient vs. central differences on every coordinate.
pub fn check(kind: CheckKind, seed: u64, cfg: &GradCheckConfig) -> Result<CheckReport> {
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0 && cfg.floor > 0.0) || cfg.height < 3 || cfg.width < 3 {
        return Err(Error::Config("grad-check step, tolerance and floor must be positive, frame at least 3x3".into()));
    }
    let problem = build(kind, cfg, seed);
    let (_, analytic, base_pattern) = (problem.eval)(&problem.params, true)?;
    let mut worst = (0.0f64, 0usize);
    let mut reduced = 0usize;
    let mut params = problem.params.clone();
    for i in 0..params.len() {
        let orig = params[i];
        let mut step = cfg.step;
        let numeric = loop {
            params[i] = orig + step;
            let (plus, _, pat_plus) = (problem.eval)(&params, false)?;
            params[i] = orig - step;
            let (minus, _, pat_minus) = (problem.eval)(&params, false)?;
            params[i] = orig;
            if pat_plus == base_pattern && pat_minus == base_pattern {
                break Some((plus - minus) / (2.0 * step));
            }
            step *= 0.1;
            if step < cfg.step * MIN_STEP_FACTOR {
                break None;
            }
        };
        if step < cfg.step {
            reduced += 1;
        }
        let rel = match numeric {
            Some(n) => (analytic[i] - n).abs() / analytic[i].abs().max(n.abs()).max(cfg.floor),
            // the base point sits on a kink: no derivative to compare against
            None => f64::INFINITY,
        };
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, i);
        }
    }
    Ok(CheckReport {
        kind,
        seed,
        params: params.len(),
        max_rel_error: worst.0,
        worst_param: worst.1,
        reduced_steps: reduced,
        passed: worst.0 < cfg.tolerance,
    })
}

/// Every check kind on seeds `0..cfg.seeds`.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<CheckReport>> {
    let mut out = Vec::with_capacity(cfg.seeds * CheckKind::ALL.len());
    for seed in 0..cfg.seeds as u64 {
        for kind in CheckKind::ALL {
            out.push(check(kind, seed, cfg)?);
        }
    }
    Ok(out)
}
