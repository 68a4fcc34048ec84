//! Region-aware anomaly scoring and the pixel-level detection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric_embedding::{cosine, embed_region, Embedding, PrototypeBank, ProjectionHead};
use crate::region_separation::{separate_regions, RegionSet, UrsConfig};
use crate::tensor_io::{BitMask, Tensor3};

/// Per-pixel anomalous probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AnomalyMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_f64(1, self.height, self.width, &self.values).expect("finite map")
    }
}

/// Scores paired with ground truth (`true` = anomalous).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredPixels {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredPixels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Precondition("non-finite score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn extend(&mut self, other: &ScoredPixels) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (pos, neg) = self.counts();
        if pos == 0 || neg == 0 {
            return Err(Error::Precondition(format!(
                "metric needs both classes, got {pos} positives and {neg} negatives"
            )));
        }
        Ok((pos, neg))
    }

    /// Indices sorted by descending score, grouped into equal-score blocks of
    /// `(positives, negatives)`.
    fn descending_blocks(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut blocks = Vec::new();
        let mut i = 0;
        while i < idx.len() {
            let s = self.scores[idx[i]];
            let (mut p, mut n) = (0, 0);
            while i < idx.len() && self.scores[idx[i]] == s {
                if self.labels[idx[i]] {
                    p += 1;
                } else {
                    n += 1;
                }
                i += 1;
            }
            blocks.push((p, n));
        }
        blocks
    }
}

/// Largest cosine similarity between a region embedding and any known prototype.
pub fn region_anomaly_prob(f_object: &Embedding, bank: &PrototypeBank) -> Result<f64> {
    if bank.is_empty() {
        return Err(Error::Precondition("empty prototype bank".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for (_, proto) in bank.iter() {
        best = best.max(cosine(f_object, proto)?);
    }
    Ok(best)
}

/// Negative max logit per pixel, each scaled by its region's probability;
/// pixels outside every region keep a probability of 1.
pub fn uncertainty_map(logits: &Tensor3, regions: &RegionSet, probs: &[f64]) -> Result<Tensor3> {
    if regions.len() != probs.len() {
        return Err(Error::Shape(format!(
            "{} regions but {} probabilities",
            regions.len(),
            probs.len()
        )));
    }
    if regions.height() != logits.height() || regions.width() != logits.width() {
        return Err(Error::Shape("regions and logits differ in size".into()));
    }
    let plane = logits.plane_len();
    let owner = regions.owner_map();
    let data = logits.data();
    let q: Vec<f64> = (0..plane)
        .map(|p| {
            let max = (0..logits.channels())
                .map(|c| f64::from(data[c * plane + p]))
                .fold(f64::NEG_INFINITY, f64::max);
            let prob = owner[p].map_or(1.0, |i| probs[i]);
            -max * prob
        })
        .collect();
    Tensor3::from_f64(1, logits.height(), logits.width(), &q)
}

/// Per-frame min-max rescaling to `[0, 1]`; a constant frame maps to 0.5.
pub fn normalize_map(q: &Tensor3) -> AnomalyMap {
    let vals = q.to_f64();
    let (min, max) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let values = if max > min {
        vals.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.5; vals.len()]
    };
    AnomalyMap {
        height: q.height(),
        width: q.width(),
        values,
    }
}

/// Negative-MaxLogit baseline, normalized the same way as the region-aware map.
pub fn maxlogit_map(logits: &Tensor3) -> Result<AnomalyMap> {
    let empty = RegionSet::empty(logits.height(), logits.width());
    Ok(normalize_map(&uncertainty_map(logits, &empty, &[])?))
}

/// Mann-Whitney estimate of P(score_pos > score_neg) + ½·P(tie).
pub fn auroc(s: &ScoredPixels) -> Result<f64> {
    let (pos, neg) = s.require_both()?;
    // sweep ascending: each positive beats every negative seen so far
    let mut blocks = s.descending_blocks();
    blocks.reverse();
    let mut neg_below = 0usize;
    let mut wins = 0.0f64;
    for (p, n) in blocks {
        wins += p as f64 * neg_below as f64 + 0.5 * p as f64 * n as f64;
        neg_below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision with equal scores treated as one threshold.
pub fn aupr(s: &ScoredPixels) -> Result<f64> {
    let (pos, _) = s.counts();
    if pos == 0 {
        return Err(Error::Precondition("average precision needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (p, n) in s.descending_blocks() {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// False-positive rate at the largest threshold whose recall reaches 95 %.
pub fn fpr95(s: &ScoredPixels) -> Result<f64> {
    let (pos, neg) = s.require_both()?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in s.descending_blocks() {
        tp += p;
        fp += n;
        if tp * 100 >= 95 * pos {
            return Ok(fp as f64 / neg as f64);
        }
    }
    unreachable!("recall reaches 1 after the last block")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMetrics {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub pixels: usize,
}

pub fn anomaly_metrics(s: &ScoredPixels) -> Result<AnomalyMetrics> {
    Ok(AnomalyMetrics {
        auroc: auroc(s)?,
        aupr: aupr(s)?,
        fpr95: fpr95(s)?,
        pixels: s.len(),
    })
}

/// How metrics combine several frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricPooling {
    /// Every pixel of every frame in one pool.
    #[default]
    Pooled,
    /// Mean of per-frame metrics over frames containing both classes.
    PerImage,
}

/// `frames` pairs each map with its anomaly ground truth and a mask of
/// pixels to evaluate.
pub fn evaluate_maps(frames: &[(&AnomalyMap, &BitMask, &BitMask)], pooling: MetricPooling) -> Result<AnomalyMetrics> {
    let per_frame: Vec<ScoredPixels> = frames
        .iter()
        .map(|(map, truth, valid)| {
            let (scores, labels) = map
                .values
                .iter()
                .zip(truth.bits())
                .zip(valid.bits())
                .filter(|(_, &v)| v)
                .map(|((&s, &t), _)| (s, t))
                .unzip();
            ScoredPixels::new(scores, labels)
        })
        .collect::<Result<_>>()?;
    match pooling {
        MetricPooling::Pooled => {
            let mut all = ScoredPixels::default();
            for f in &per_frame {
                all.extend(f);
            }
            anomaly_metrics(&all)
        }
        MetricPooling::PerImage => {
            let usable: Vec<AnomalyMetrics> = per_frame
                .iter()
                .filter(|f| f.require_both().is_ok())
                .map(anomaly_metrics)
                .collect::<Result<_>>()?;
            if usable.is_empty() {
                return Err(Error::Precondition("no frame contains both classes".into()));
            }
            let n = usable.len() as f64;
            Ok(AnomalyMetrics {
                auroc: usable.iter().map(|m| m.auroc).sum::<f64>() / n,
                aupr: usable.iter().map(|m| m.aupr).sum::<f64>() / n,
                fpr95: usable.iter().map(|m| m.fpr95).sum::<f64>() / n,
                pixels: per_frame.iter().map(ScoredPixels::len).sum(),
            })
        }
    }
}

/// Intermediate products of [`score_image`].
#[derive(Debug, Clone)]
pub struct ScoredFrame {
    pub regions: RegionSet,
    pub probs: Vec<f64>,
    pub map: AnomalyMap,
}

/// Full region-aware scoring of one frame.
pub fn score_image_detailed(
    image: &Tensor3,
    features: &Tensor3,
    logits: &Tensor3,
    head: &ProjectionHead,
    bank: &PrototypeBank,
    cfg: &UrsConfig,
) -> Result<ScoredFrame> {
    let regions = separate_regions(image, logits, cfg)?;
    let probs = regions
        .iter()
        .map(|r| region_anomaly_prob(&embed_region(features, r, head)?, bank))
        .collect::<Result<Vec<_>>>()?;
    let map = normalize_map(&uncertainty_map(logits, &regions, &probs)?);
    Ok(ScoredFrame { regions, probs, map })
}

pub fn score_image(
    image: &Tensor3,
    features: &Tensor3,
    logits: &Tensor3,
    head: &ProjectionHead,
    bank: &PrototypeBank,
    cfg: &UrsConfig,
) -> Result<AnomalyMap> {
    Ok(score_image_detailed(image, features, logits, head, bank, cfg)?.map)
}
