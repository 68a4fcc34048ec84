//! Meta-channel aggregation.
//!
//! The segmentation head is widened from `N` known-class channels to
//! `N + K`; the extra meta channels are trained to over-segment whatever the
//! known channels do not explain. At inference the meta channels that
//! overlap the few-shot novel masks are unioned into candidate regions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region_separation::{connected_components, fill_holes, Connectivity, RegionSet};
use crate::tensor_io::{BitMask, LabelMap, Tensor3, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetaActivation {
    /// Softmax across all `N + K` channels.
    SoftmaxAll,
    /// Independent sigmoid per channel.
    #[default]
    SigmoidPerChannel,
}

/// Numerator of the candidate-channel ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// Whole-frame mass of the binarized channel.
    #[default]
    Literal,
    /// Mass of the binarized channel inside the novel mask.
    Intersect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McaConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub eta: f64,
    pub lambda_inter: f64,
    pub lambda_split: f64,
    pub lambda_rec: f64,
    pub kappa: f64,
    pub dice_epsilon: f64,
    pub activation: MetaActivation,
    #[serde(default)]
    pub candidate_mode: CandidateMode,
}

impl Default for McaConfig {
    fn default() -> Self {
        Self {
            k: 4,
            eta: 0.02,
            lambda_inter: 0.1,
            lambda_split: 0.1,
            lambda_rec: 0.01,
            kappa: 0.1,
            dice_epsilon: 1e-6,
            activation: MetaActivation::SigmoidPerChannel,
            candidate_mode: CandidateMode::Literal,
        }
    }
}

impl McaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        for (name, v) in [
            ("lambda_inter", self.lambda_inter),
            ("lambda_split", self.lambda_split),
            ("lambda_rec", self.lambda_rec),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("kappa must be in (0, 1), got {}", self.kappa)));
        }
        if !(self.dice_epsilon >= 0.0) {
            return Err(Error::Config("dice_epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// Activated `(N + K)`-channel output.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutput {
    values: Tensor3,
    activation: MetaActivation,
}

impl MetaOutput {
    /// Wraps already-activated values after checking the activation's invariant.
    pub fn new(values: Tensor3, activation: MetaActivation) -> Result<Self> {
        if values.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Precondition("meta output values must lie in [0, 1]".into()));
        }
        if activation == MetaActivation::SoftmaxAll {
            let plane = values.plane_len();
            for p in 0..plane {
                let s: f64 = (0..values.channels()).map(|c| f64::from(values.data()[c * plane + p])).sum();
                if (s - 1.0).abs() > 1e-5 {
                    return Err(Error::Precondition(format!("softmax channels sum to {s} at pixel {p}")));
                }
            }
        }
        Ok(Self { values, activation })
    }

    pub fn from_logits(logits: &Tensor3, activation: MetaActivation) -> Self {
        let act = activate(&logits.to_f64(), logits.channels(), logits.plane_len(), activation);
        let values = Tensor3::from_f64(logits.channels(), logits.height(), logits.width(), &act).expect("finite activations");
        Self { values, activation }
    }

    pub fn values(&self) -> &Tensor3 {
        &self.values
    }

    pub fn activation(&self) -> MetaActivation {
        self.activation
    }

    pub fn channels(&self) -> usize {
        self.values.channels()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn activate(u: &[f64], channels: usize, plane: usize, act: MetaActivation) -> Vec<f64> {
    match act {
        MetaActivation::SigmoidPerChannel => u.iter().map(|&v| sigmoid(v)).collect(),
        MetaActivation::SoftmaxAll => {
            let mut out = vec![0.0; u.len()];
            for p in 0..plane {
                let max = (0..channels).map(|c| u[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..channels {
                    let e = (u[c * plane + p] - max).exp();
                    out[c * plane + p] = e;
                    sum += e;
                }
                for c in 0..channels {
                    out[c * plane + p] /= sum;
                }
            }
            out
        }
    }
}

/// Chain rule through the activation: gradient on logits from gradient on
/// activated values.
pub(crate) fn activation_backward(c: &[f64], d_c: &[f64], channels: usize, plane: usize, act: MetaActivation) -> Vec<f64> {
    match act {
        MetaActivation::SigmoidPerChannel => c.iter().zip(d_c).map(|(&v, &g)| g * v * (1.0 - v)).collect(),
        MetaActivation::SoftmaxAll => {
            let mut out = vec![0.0; c.len()];
            for p in 0..plane {
                let dot: f64 = (0..channels).map(|k| c[k * plane + p] * d_c[k * plane + p]).sum();
                for k in 0..channels {
                    out[k * plane + p] = c[k * plane + p] * (d_c[k * plane + p] - dot);
                }
            }
            out
        }
    }
}

/// Mean cross entropy over non-ignored pixels of the first `n_classes`
/// channels, with its gradient on all `channels` logits.
pub(crate) fn seg_loss_grad(u: &[f64], channels: usize, n_classes: usize, labels: &LabelMap) -> Result<(f64, Vec<f64>)> {
    let plane = labels.height() * labels.width();
    if u.len() != channels * plane || n_classes > channels || n_classes < 1 {
        return Err(Error::Shape("seg loss: logits and labels disagree".into()));
    }
    labels.validate(n_classes)?;
    let valid = labels.labels().iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(Error::Precondition("every pixel is ignored".into()));
    }
    let inv = 1.0 / valid as f64;
    let mut grad = vec![0.0; u.len()];
    let mut loss = 0.0;
    for (p, &l) in labels.labels().iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let max = (0..n_classes).map(|c| u[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n_classes).map(|c| (u[c * plane + p] - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - u[usize::from(l) * plane + p];
        for c in 0..n_classes {
            let prob = (u[c * plane + p] - log_z).exp();
            grad[c * plane + p] = (prob - if c == usize::from(l) { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Mean cross entropy over non-ignored pixels, using every logit channel as a class.
pub fn seg_loss(logits: &Tensor3, labels: &LabelMap) -> Result<f64> {
    if logits.height() != labels.height() || logits.width() != labels.width() {
        return Err(Error::Shape("logits and labels differ in size".into()));
    }
    Ok(seg_loss_grad(&logits.to_f64(), logits.channels(), logits.channels(), labels)?.0)
}

/// `2·Σ(a⊙b) / (Σa + Σb + eps)`.
pub fn dice_coeff(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let (mut ab, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        sa += x;
        sb += y;
    }
    let denom = sa + sb + eps;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * ab / denom
    }
}

fn planes(c: &[f64], plane: usize) -> Vec<&[f64]> {
    c.chunks(plane).collect()
}

pub(crate) fn inter_loss_raw(c: &[f64], plane: usize, eps: f64) -> f64 {
    let ch = planes(c, plane);
    let mut total = 0.0;
    for i in 0..ch.len() {
        for j in i + 1..ch.len() {
            total += dice_coeff(ch[i], ch[j], eps);
        }
    }
    total
}

fn inter_loss_grad(c: &[f64], plane: usize, eps: f64, scale: f64, d_c: &mut [f64]) {
    let ch = planes(c, plane);
    let sums: Vec<f64> = ch.iter().map(|p| p.iter().sum()).collect();
    for i in 0..ch.len() {
        for j in i + 1..ch.len() {
            let denom = sums[i] + sums[j] + eps;
            if denom == 0.0 {
                continue;
            }
            let dice = dice_coeff(ch[i], ch[j], eps);
            for p in 0..plane {
                d_c[i * plane + p] += scale * (2.0 * ch[j][p] - dice) / denom;
                d_c[j * plane + p] += scale * (2.0 * ch[i][p] - dice) / denom;
            }
        }
    }
}

/// Sum of pairwise dice coefficients over all channels.
pub fn inter_loss(c: &MetaOutput, eps: f64) -> f64 {
    inter_loss_raw(&c.values.to_f64(), c.values.plane_len(), eps)
}

pub(crate) fn split_loss_raw(c: &[f64], plane: usize, n: usize, k: usize, eta: f64) -> f64 {
    (n..n + k)
        .map(|i| {
            let mass: f64 = c[i * plane..(i + 1) * plane].iter().sum();
            -(eta * mass).max(1.0).ln()
        })
        .sum()
}

fn split_loss_grad(c: &[f64], plane: usize, n: usize, k: usize, eta: f64, scale: f64, d_c: &mut [f64]) {
    for i in n..n + k {
        let mass: f64 = c[i * plane..(i + 1) * plane].iter().sum();
        if eta * mass > 1.0 {
            let g = -scale / mass;
            d_c[i * plane..(i + 1) * plane].iter_mut().for_each(|d| *d += g);
        }
    }
}

/// `Σ_{meta channels} −log(max(η · mass, 1))`; always ≤ 0.
pub fn split_loss(c: &MetaOutput, n: usize, k: usize, eta: f64) -> Result<f64> {
    if n + k > c.channels() {
        return Err(Error::Shape(format!(
            "{} channels cannot hold {n} known + {k} meta channels",
            c.channels()
        )));
    }
    Ok(split_loss_raw(&c.values.to_f64(), c.values.plane_len(), n, k, eta))
}

pub(crate) fn rec_loss_raw(image: &[f64], c: &[f64], plane: usize) -> f64 {
    let residual = channel_sum_residual(c, plane);
    image
        .chunks(plane)
        .map(|x| x.iter().zip(&residual).map(|(&xv, &r)| (xv * r) * (xv * r)).sum::<f64>())
        .sum()
}

fn channel_sum_residual(c: &[f64], plane: usize) -> Vec<f64> {
    let mut r = vec![-1.0; plane];
    for ch in c.chunks(plane) {
        for (rv, &v) in r.iter_mut().zip(ch) {
            *rv += v;
        }
    }
    r
}

fn rec_loss_grad(image: &[f64], c: &[f64], plane: usize, scale: f64, d_c: &mut [f64]) {
    let residual = channel_sum_residual(c, plane);
    let mut weight = vec![0.0; plane];
    for x in image.chunks(plane) {
        for (w, &xv) in weight.iter_mut().zip(x) {
            *w += xv * xv;
        }
    }
    for ch in d_c.chunks_mut(plane) {
        for p in 0..plane {
            ch[p] += scale * 2.0 * residual[p] * weight[p];
        }
    }
}

/// `‖X ⊙ (Σ_i C_i − 1)‖²`, the residual broadcast over the image channels.
pub fn rec_loss(image: &Tensor3, c: &MetaOutput) -> Result<f64> {
    if !image.same_plane(&c.values) {
        return Err(Error::Shape("image and meta output differ in size".into()));
    }
    Ok(rec_loss_raw(&image.to_f64(), &c.values.to_f64(), image.plane_len()))
}

/// Raw terms and weighted total of the fine-tuning objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub inter: f64,
    pub split: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(seg: f64, inter: f64, split: f64, rec: f64, cfg: &McaConfig) -> Self {
        Self {
            seg,
            inter,
            split,
            rec,
            total: seg + cfg.lambda_inter * inter + cfg.lambda_split * split + cfg.lambda_rec * rec,
        }
    }
}

/// Fine-tuning objective on raw `(N + K)`-channel logits `u`, returning the
/// breakdown and `∂total/∂u`. The cross entropy normalizes over all output
/// channels, so labelled pixels also push the meta channels down.
pub(crate) fn overall_loss_grad(
    u: &[f64],
    channels: usize,
    n_known: usize,
    labels: &LabelMap,
    image: &[f64],
    cfg: &McaConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let plane = labels.height() * labels.width();
    if channels != n_known + cfg.k {
        return Err(Error::Shape(format!(
            "expected {} + {} channels, got {channels}",
            n_known, cfg.k
        )));
    }
    labels.validate(n_known)?;
    let (seg, mut d_u) = seg_loss_grad(u, channels, channels, labels)?;
    let c = activate(u, channels, plane, cfg.activation);
    let inter = inter_loss_raw(&c, plane, cfg.dice_epsilon);
    let split = split_loss_raw(&c, plane, n_known, cfg.k, cfg.eta);
    let rec = rec_loss_raw(image, &c, plane);
    let mut d_c = vec![0.0; c.len()];
    if cfg.lambda_inter != 0.0 {
        inter_loss_grad(&c, plane, cfg.dice_epsilon, cfg.lambda_inter, &mut d_c);
    }
    if cfg.lambda_split != 0.0 {
        split_loss_grad(&c, plane, n_known, cfg.k, cfg.eta, cfg.lambda_split, &mut d_c);
    }
    if cfg.lambda_rec != 0.0 {
        rec_loss_grad(image, &c, plane, cfg.lambda_rec, &mut d_c);
    }
    let d_from_c = activation_backward(&c, &d_c, channels, plane, cfg.activation);
    for (a, b) in d_u.iter_mut().zip(&d_from_c) {
        *a += b;
    }
    Ok((LossBreakdown::combine(seg, inter, split, rec, cfg), d_u))
}

/// Weighted fine-tuning objective for `(N + K)`-channel logits.
pub fn overall_loss(logits: &Tensor3, labels: &LabelMap, image: &Tensor3, n_known: usize, cfg: &McaConfig) -> Result<LossBreakdown> {
    if !logits.same_plane(image) || logits.height() != labels.height() || logits.width() != labels.width() {
        return Err(Error::Shape("logits, labels and image differ in size".into()));
    }
    Ok(overall_loss_grad(&logits.to_f64(), logits.channels(), n_known, labels, &image.to_f64(), cfg)?.0)
}

/// Per-pixel argmax over all channels (lowest index wins ties); returns one
/// mask per meta channel `n..`.
pub fn binarize_meta(c: &MetaOutput, n: usize) -> Vec<BitMask> {
    let v = &c.values;
    let plane = v.plane_len();
    let data = v.data();
    let mut masks = vec![vec![false; plane]; v.channels().saturating_sub(n)];
    for p in 0..plane {
        let mut best = 0;
        for ch in 1..v.channels() {
            if data[ch * plane + p] > data[best * plane + p] {
                best = ch;
            }
        }
        if best >= n {
            masks[best - n][p] = true;
        }
    }
    masks
        .into_iter()
        .map(|bits| BitMask::new(v.height(), v.width(), bits).expect("shape preserved"))
        .collect()
}

/// Meta channels whose binarized mass exceeds `kappa` times the novel mass.
pub fn candidate_channels(meta: &[BitMask], novel: &BitMask, kappa: f64, mode: CandidateMode) -> Result<BTreeSet<usize>> {
    let novel_mass = novel.count();
    if novel_mass == 0 {
        return Err(Error::Precondition("candidate selection needs a nonempty novel mask".into()));
    }
    Ok(meta
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let mass = match mode {
                CandidateMode::Literal => m.count(),
                CandidateMode::Intersect => m.intersection(novel).count(),
            };
            mass as f64 / novel_mass as f64 > kappa
        })
        .map(|(i, _)| i)
        .collect())
}

/// Union over annotated shots of their candidate channels.
pub fn candidate_channels_union(
    shots: &[(MetaOutput, BitMask)],
    n: usize,
    kappa: f64,
    mode: CandidateMode,
) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for (c, novel) in shots {
        out.extend(candidate_channels(&binarize_meta(c, n), novel, kappa, mode)?);
    }
    Ok(out)
}

/// Pointwise union `1 − Π(1 − c_j)` of the selected masks.
pub fn aggregate_channels(masks: &[&BitMask], height: usize, width: usize) -> BitMask {
    if masks.is_empty() {
        log::warn!("no meta channel selected; aggregated mask is empty");
    }
    let mut out = BitMask::empty(height, width);
    for m in masks {
        out = out.union(m);
    }
    out
}

/// Candidate regions of one frame from a fixed channel selection.
pub fn regions_for_channels(
    c: &MetaOutput,
    n: usize,
    selected: &BTreeSet<usize>,
    connectivity: Connectivity,
    min_area: usize,
) -> RegionSet {
    let meta = binarize_meta(c, n);
    let chosen: Vec<&BitMask> = selected.iter().filter_map(|&i| meta.get(i)).collect();
    let agg = aggregate_channels(&chosen, c.values.height(), c.values.width());
    let filled = fill_holes(&agg, connectivity.dual());
    connected_components(&filled, connectivity, min_area)
}

/// Binarize, select channels from the shots, aggregate, fill holes and split
/// into components.
pub fn mca_regions(
    c: &MetaOutput,
    shots: &[(MetaOutput, BitMask)],
    n: usize,
    cfg: &McaConfig,
    connectivity: Connectivity,
    min_area: usize,
) -> Result<RegionSet> {
    let selected = candidate_channels_union(shots, n, cfg.kappa, cfg.candidate_mode)?;
    Ok(regions_for_channels(c, n, &selected, connectivity, min_area))
}
