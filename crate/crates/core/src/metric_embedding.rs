//! Region-aware embeddings: masked feature pooling, a two-layer projection
//! head, class prototypes, cosine similarity and circle-loss training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Sgd, SgdConfig};
use crate::tensor_io::{BitMask, LabelMap, Tensor3};

/// Region embedding produced by the projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_raw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {}-dim and {}-dim vectors", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Precondition("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_raw(&a.0, &b.0)
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
pub(crate) fn cosine_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let c = dot(a, b) / (na * nb);
    let da = a.iter().zip(b).map(|(&x, &y)| y / (na * nb) - c * x / (na * na)).collect();
    let db = a.iter().zip(b).map(|(&x, &y)| x / (na * nb) - c * y / (nb * nb)).collect();
    (c, da, db)
}

/// Masked mean of per-pixel feature vectors stored channel-major in `data`.
pub fn region_pool_raw(data: &[f64], channels: usize, mask: &BitMask) -> Result<Vec<f64>> {
    let plane = mask.height() * mask.width();
    if data.len() != channels * plane {
        return Err(Error::Shape(format!(
            "feature buffer of {} values does not match {channels}x{}x{}",
            data.len(),
            mask.height(),
            mask.width()
        )));
    }
    let idx: Vec<usize> = mask.bits().iter().enumerate().filter(|(_, &b)| b).map(|(p, _)| p).collect();
    if idx.is_empty() {
        return Err(Error::Precondition("region_pool over an empty mask".into()));
    }
    let inv = 1.0 / idx.len() as f64;
    Ok((0..channels)
        .map(|c| {
            let plane_data = &data[c * plane..(c + 1) * plane];
            idx.iter().map(|&p| plane_data[p]).sum::<f64>() * inv
        })
        .collect())
}

pub fn region_pool(features: &Tensor3, region: &BitMask) -> Result<Vec<f64>> {
    if features.height() != region.height() || features.width() != region.width() {
        return Err(Error::Shape("feature map and region differ in size".into()));
    }
    region_pool_raw(&features.to_f64(), features.channels(), region)
}

/// Two affine layers with a rectifier between them.
///
/// Parameters live in one flat buffer laid out as
/// `[w1 (hidden×input), b1 (hidden), w2 (output×hidden), b2 (output)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    input: usize,
    hidden: usize,
    output: usize,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    hidden_pre: Vec<f64>,
}

impl HeadCache {
    /// Which hidden rectifiers are active.
    pub fn active(&self) -> Vec<bool> {
        self.hidden_pre.iter().map(|&v| v > 0.0).collect()
    }
}

impl ProjectionHead {
    pub fn num_params(input: usize, hidden: usize, output: usize) -> usize {
        hidden * input + hidden + output * hidden + output
    }

    pub fn from_params(input: usize, hidden: usize, output: usize, params: Vec<f64>) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::Shape("projection head sizes must be positive".into()));
        }
        if params.len() != Self::num_params(input, hidden, output) {
            return Err(Error::Shape(format!(
                "projection head {input}->{hidden}->{output} needs {} params, got {}",
                Self::num_params(input, hidden, output),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite projection head parameter".into()));
        }
        Ok(Self {
            input,
            hidden,
            output,
            params,
        })
    }

    /// Uniform ±√(6/(fan_in+fan_out)) weights, zero biases.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut params = vec![0.0; Self::num_params(input, hidden, output)];
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        for v in &mut params[..hidden * input] {
            *v = rng.gen_range(-a1..a1);
        }
        let off = hidden * input + hidden;
        let a2 = (6.0 / (hidden + output) as f64).sqrt();
        for v in &mut params[off..off + output * hidden] {
            *v = rng.gen_range(-a2..a2);
        }
        Self {
            input,
            hidden,
            output,
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(self.hidden * self.input);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.output * self.hidden);
        (w1, b1, w2, b2)
    }

    pub fn layer1(&self) -> (&[f64], &[f64]) {
        let (w1, b1, _, _) = self.split();
        (w1, b1)
    }

    pub fn layer2(&self) -> (&[f64], &[f64]) {
        let (_, _, w2, b2) = self.split();
        (w2, b2)
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, HeadCache) {
        assert_eq!(x.len(), self.input, "projection head input size");
        let (w1, b1, w2, b2) = self.split();
        let hidden_pre: Vec<f64> = (0..self.hidden)
            .map(|j| b1[j] + dot(&w1[j * self.input..(j + 1) * self.input], x))
            .collect();
        let act: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let out = (0..self.output)
            .map(|k| b2[k] + dot(&w2[k * self.hidden..(k + 1) * self.hidden], &act))
            .collect();
        (out, HeadCache { hidden_pre })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, x: &[f64], cache: &HeadCache, d_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let (_, _, w2, _) = self.split();
        let (h, i, o) = (self.hidden, self.input, self.output);
        let off_b1 = h * i;
        let off_w2 = off_b1 + h;
        let off_b2 = off_w2 + o * h;
        let act: Vec<f64> = cache.hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut d_act = vec![0.0; h];
        for k in 0..o {
            let g = d_out[k];
            grads[off_b2 + k] += g;
            for j in 0..h {
                grads[off_w2 + k * h + j] += g * act[j];
                d_act[j] += g * w2[k * h + j];
            }
        }
        let (w1, _, _, _) = self.split();
        let mut d_x = vec![0.0; i];
        for j in 0..h {
            if cache.hidden_pre[j] <= 0.0 {
                continue;
            }
            let g = d_act[j];
            grads[off_b1 + j] += g;
            for m in 0..i {
                grads[j * i + m] += g * x[m];
                d_x[m] += g * w1[j * i + m];
            }
        }
        d_x
    }
}

/// Pools `region` from a feature map and projects it.
pub fn embed_region(features: &Tensor3, region: &BitMask, head: &ProjectionHead) -> Result<Embedding> {
    let pooled = region_pool(features, region)?;
    embed_pooled(&pooled, head)
}

pub fn embed_pooled(pooled: &[f64], head: &ProjectionHead) -> Result<Embedding> {
    if pooled.len() != head.input_dim() {
        return Err(Error::Shape(format!(
            "pooled vector has {} dims, head expects {}",
            pooled.len(),
            head.input_dim()
        )));
    }
    Ok(Embedding(head.forward(pooled)))
}

/// Known-class prototypes keyed by class index.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    protos: BTreeMap<u8, (Embedding, usize)>,
}

impl PrototypeBank {
    pub fn new(entries: impl IntoIterator<Item = (u8, Embedding, usize)>) -> Result<Self> {
        let mut protos = BTreeMap::new();
        for (class, e, count) in entries {
            if e.norm() == 0.0 || !e.norm().is_finite() {
                return Err(Error::Precondition(format!("prototype of class {class} has zero norm")));
            }
            protos.insert(class, (e, count));
        }
        Ok(Self { protos })
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    pub fn get(&self, class: u8) -> Option<&Embedding> {
        self.protos.get(&class).map(|(e, _)| e)
    }

    pub fn count(&self, class: u8) -> Option<usize> {
        self.protos.get(&class).map(|&(_, n)| n)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &Embedding)> {
        self.protos.iter().map(|(&c, (e, _))| (c, e))
    }

    pub fn classes(&self) -> Vec<u8> {
        self.protos.keys().copied().collect()
    }
}

fn mean_vectors(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let inv = 1.0 / vs.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Per class: the embedding of each image's class mask, averaged over the
/// images that contain the class.
pub fn known_prototypes(dataset: &[(Tensor3, LabelMap)], classes: &[u8], head: &ProjectionHead) -> Result<PrototypeBank> {
    let mut per_class: BTreeMap<u8, Vec<Vec<f64>>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for (features, labels) in dataset {
        for &class in classes {
            let mask = labels.mask_of(class);
            if mask.is_empty() {
                continue;
            }
            let e = embed_region(features, &mask, head)?;
            per_class.get_mut(&class).unwrap().push(e.0);
        }
    }
    let missing: Vec<u8> = per_class.iter().filter(|(_, v)| v.is_empty()).map(|(&c, _)| c).collect();
    if !missing.is_empty() {
        return Err(Error::MissingPrototype(missing));
    }
    PrototypeBank::new(
        per_class
            .into_iter()
            .map(|(c, vs)| (c, Embedding(mean_vectors(&vs)), vs.len())),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircleLossConfig {
    pub gamma: f64,
    pub margin: f64,
}

impl Default for CircleLossConfig {
    fn default() -> Self {
        Self {
            gamma: 8.0,
            margin: 0.25,
        }
    }
}

impl CircleLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin must be in [0, 1), got {}", self.margin)));
        }
        Ok(())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
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

fn circle_terms(s_p: &[f64], s_n: &[f64], cfg: &CircleLossConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if s_p.is_empty() || s_n.is_empty() {
        return Err(Error::Precondition(format!(
            "circle loss needs at least one positive and one negative score (got {} and {})",
            s_p.len(),
            s_n.len()
        )));
    }
    let a = s_n.iter().map(|&s| cfg.gamma * (s + cfg.margin)).collect();
    let b = s_p.iter().map(|&s| -cfg.gamma * s).collect();
    Ok((a, b))
}

/// `log[1 + Σ_j exp(γ(s_n^j + m)) · Σ_i exp(−γ s_p^i)]`, evaluated as a
/// softplus of two log-sum-exps.
pub fn circle_loss(s_p: &[f64], s_n: &[f64], cfg: &CircleLossConfig) -> Result<f64> {
    let (a, b) = circle_terms(s_p, s_n, cfg)?;
    Ok(softplus(log_sum_exp(&a) + log_sum_exp(&b)))
}

/// Analytic partials `(∂L/∂s_p, ∂L/∂s_n)`.
pub fn circle_loss_grad(s_p: &[f64], s_n: &[f64], cfg: &CircleLossConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b) = circle_terms(s_p, s_n, cfg)?;
    let (lse_a, lse_b) = (log_sum_exp(&a), log_sum_exp(&b));
    let outer = sigmoid(lse_a + lse_b) * cfg.gamma;
    let d_p = b.iter().map(|&v| -outer * (v - lse_b).exp()).collect();
    let d_n = a.iter().map(|&v| outer * (v - lse_a).exp()).collect();
    Ok((d_p, d_n))
}

/// Circle loss over a batch of labeled embeddings.
///
/// Each embedding is scored against its own class's batch mean (itself
/// excluded) as the positive and every other class's batch mean as the
/// negatives. Embeddings whose class has no other member in the batch are
/// skipped. Returns the mean loss over scored embeddings and the gradient
/// with respect to every embedding.
pub fn batch_circle_loss(embeddings: &[Vec<f64>], labels: &[u8], cfg: &CircleLossConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    assert_eq!(embeddings.len(), labels.len());
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut members: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::Precondition("batch circle loss needs at least two classes".into()));
    }
    let sums: BTreeMap<u8, Vec<f64>> = members
        .iter()
        .map(|(&c, idx)| {
            let mut s = vec![0.0; dim];
            for &i in idx {
                for (a, b) in s.iter_mut().zip(&embeddings[i]) {
                    *a += b;
                }
            }
            (c, s)
        })
        .collect();
    let mut grads = vec![vec![0.0; dim]; embeddings.len()];
    let mut total = 0.0;
    let mut scored = 0usize;
    for (r, e) in embeddings.iter().enumerate() {
        let own = labels[r];
        let own_idx = &members[&own];
        if own_idx.len() < 2 {
            continue;
        }
        let k = (own_idx.len() - 1) as f64;
        let p_own: Vec<f64> = sums[&own].iter().zip(e).map(|(s, x)| (s - x) / k).collect();
        let (s_p, de_p, dp_own) = cosine_grad(e, &p_own);
        let mut negs = Vec::new();
        for (&c, s) in &sums {
            if c == own {
                continue;
            }
            let n = members[&c].len() as f64;
            let p: Vec<f64> = s.iter().map(|v| v / n).collect();
            negs.push((c, n, cosine_grad(e, &p)));
        }
        let s_n: Vec<f64> = negs.iter().map(|(_, _, (c, _, _))| *c).collect();
        total += circle_loss(&[s_p], &s_n, cfg)?;
        scored += 1;
        let (g_p, g_n) = circle_loss_grad(&[s_p], &s_n, cfg)?;
        // stash per-embedding contributions; scaled by 1/scored at the end
        for (d, v) in grads[r].iter_mut().zip(&de_p) {
            *d += g_p[0] * v;
        }
        for &q in own_idx {
            if q != r {
                for (d, v) in grads[q].iter_mut().zip(&dp_own) {
                    *d += g_p[0] * v / k;
                }
            }
        }
        for ((c, n, (_, de, dp)), g) in negs.iter().zip(&g_n) {
            for (d, v) in grads[r].iter_mut().zip(de) {
                *d += g * v;
            }
            for &q in &members[c] {
                for (d, v) in grads[q].iter_mut().zip(dp) {
                    *d += g * v / n;
                }
            }
        }
    }
    if scored == 0 {
        return Err(Error::Precondition("no class has two members in the batch".into()));
    }
    let inv = 1.0 / scored as f64;
    for g in &mut grads {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total * inv, grads))
}

/// One labeled training region: its pooled feature vector and class.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSample {
    pub pooled: Vec<f64>,
    pub class: u8,
}

/// Pools every class mask of every image into a training sample.
pub fn region_samples(dataset: &[(Tensor3, LabelMap)], classes: &[u8]) -> Result<Vec<RegionSample>> {
    let mut out = Vec::new();
    for (features, labels) in dataset {
        let data = features.to_f64();
        for &class in classes {
            let mask = labels.mask_of(class);
            if mask.is_empty() {
                continue;
            }
            out.push(RegionSample {
                pooled: region_pool_raw(&data, features.channels(), &mask)?,
                class,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTrainConfig {
    pub iters: usize,
    /// Regions drawn per class per batch.
    pub per_class: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            iters: 400,
            per_class: 6,
            sgd: SgdConfig {
                lr0: 0.05,
                ..SgdConfig::default()
            },
            seed: 17,
        }
    }
}

/// Trains the projection head with SGD on the batch circle loss.
pub fn train_head(
    samples: &[RegionSample],
    head: &ProjectionHead,
    cfg: &CircleLossConfig,
    opt: &HeadTrainConfig,
) -> Result<(ProjectionHead, Vec<f64>)> {
    cfg.validate()?;
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.pooled.len() != head.input_dim() {
            return Err(Error::Shape(format!(
                "sample {i} has {} dims, head expects {}",
                s.pooled.len(),
                head.input_dim()
            )));
        }
        by_class.entry(s.class).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Precondition(format!(
            "head training needs at least two classes, found {}",
            by_class.len()
        )));
    }
    let mut head = head.clone();
    let mut sgd = Sgd::new(opt.sgd, head.params().len(), opt.iters);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let per_class = opt.per_class.max(2);
    let mut losses = Vec::with_capacity(opt.iters);
    for it in 0..opt.iters {
        let mut batch = Vec::new();
        for idx in by_class.values() {
            if idx.len() >= per_class {
                batch.extend(idx.choose_multiple(&mut rng, per_class).copied());
            } else {
                batch.extend((0..per_class).map(|_| idx[rng.gen_range(0..idx.len())]));
            }
        }
        let fwd: Vec<(Vec<f64>, HeadCache)> = batch.iter().map(|&i| head.forward_cached(&samples[i].pooled)).collect();
        let embeds: Vec<Vec<f64>> = fwd.iter().map(|(e, _)| e.clone()).collect();
        let labels: Vec<u8> = batch.iter().map(|&i| samples[i].class).collect();
        let (loss, d_embeds) = batch_circle_loss(&embeds, &labels, cfg)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("circle loss became {loss} at iteration {it}")));
        }
        losses.push(loss);
        let mut grads = vec![0.0; head.params().len()];
        for ((&i, (_, cache)), d) in batch.iter().zip(&fwd).zip(&d_embeds) {
            head.backward(&samples[i].pooled, cache, d, &mut grads);
        }
        sgd.step(head.params_mut(), &grads, it);
    }
    Ok((head, losses))
}
