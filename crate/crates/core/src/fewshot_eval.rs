//! Few-shot classification of candidate regions and the mIoU family of
//! segmentation metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric_embedding::{cosine, embed_region, Embedding, ProjectionHead};
use crate::region_separation::RegionSet;
use crate::tensor_io::{BitMask, LabelMap, Tensor3, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewshotConfig {
    pub theta_novel: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        Self {
            theta_novel: 0.8,
            m: 1,
            l: 5,
        }
    }
}

impl FewshotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_novel > 0.0 && self.theta_novel < 1.0) {
            return Err(Error::Config(format!("theta_novel must be in (0, 1), got {}", self.theta_novel)));
        }
        if self.m == 0 {
            return Err(Error::Config("M must be >= 1".into()));
        }
        if self.l == 0 {
            return Err(Error::Config("L must be >= 1".into()));
        }
        Ok(())
    }
}

/// One annotated example of a novel class.
#[derive(Debug, Clone, Copy)]
pub struct Shot<'a> {
    pub id: &'a str,
    pub features: &'a Tensor3,
    pub mask: &'a BitMask,
}

/// Mean shot embedding per novel class, in class order `1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelPrototypes {
    prototypes: Vec<Embedding>,
    shots: usize,
    sources: Vec<Vec<String>>,
}

impl NovelPrototypes {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn prototypes(&self) -> &[Embedding] {
        &self.prototypes
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    /// Shot identifiers per class.
    pub fn sources(&self) -> &[Vec<String>] {
        &self.sources
    }
}

/// Builds one prototype per class from exactly `L` shots each.
pub fn novel_prototypes(classes: &[Vec<Shot<'_>>], head: &ProjectionHead) -> Result<NovelPrototypes> {
    let l = classes.first().map_or(0, Vec::len);
    if classes.is_empty() || l == 0 {
        return Err(Error::Precondition("at least one class with one shot is required".into()));
    }
    let mut prototypes = Vec::with_capacity(classes.len());
    let mut sources = Vec::with_capacity(classes.len());
    for (ci, shots) in classes.iter().enumerate() {
        if shots.len() != l {
            return Err(Error::Precondition(format!(
                "novel class {} has {} shots, expected {l}",
                ci + 1,
                shots.len()
            )));
        }
        let mut sum = vec![0.0; head.output_dim()];
        for shot in shots {
            if shot.mask.is_empty() {
                return Err(Error::Precondition(format!("shot '{}' has an empty novel mask", shot.id)));
            }
            let e = embed_region(shot.features, shot.mask, head)?;
            sum.iter_mut().zip(&e.0).for_each(|(s, v)| *s += v);
        }
        let mean = Embedding(sum.into_iter().map(|v| v / l as f64).collect());
        if mean.norm() == 0.0 {
            return Err(Error::Precondition(format!("novel class {} prototype is zero", ci + 1)));
        }
        prototypes.push(mean);
        sources.push(shots.iter().map(|s| s.id.to_string()).collect());
    }
    Ok(NovelPrototypes {
        prototypes,
        shots: l,
        sources,
    })
}

/// Cosine similarity of a region embedding to each novel prototype.
pub fn region_similarities(f_object: &Embedding, protos: &NovelPrototypes) -> Result<Vec<f64>> {
    protos.prototypes.iter().map(|c| cosine(f_object, c)).collect()
}

/// Outcome of classifying one candidate region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    /// Novel class index in `1..=M`.
    Novel(usize),
    Reject,
}

/// Accepts the argmax class only if it strictly exceeds `theta_novel` and
/// every other similarity; ties at the maximum are rejected.
pub fn classify_region(sims: &[f64], theta_novel: f64) -> Decision {
    let Some((best, &top)) = sims
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
    else {
        return Decision::Reject;
    };
    let dominates = sims.iter().enumerate().all(|(i, &s)| i == best || top > s);
    if dominates && top > theta_novel {
        Decision::Novel(best + 1)
    } else {
        Decision::Reject
    }
}

/// Overwrites accepted regions of the closed-set prediction with label
/// `n_closed + i − 1` for novel class `i`.
pub fn assemble_segmentation(
    closed_pred: &LabelMap,
    regions: &RegionSet,
    decisions: &[Decision],
    n_closed: usize,
) -> Result<LabelMap> {
    if regions.len() != decisions.len() {
        return Err(Error::Precondition(format!(
            "{} regions but {} decisions",
            regions.len(),
            decisions.len()
        )));
    }
    if regions.height() != closed_pred.height() || regions.width() != closed_pred.width() {
        return Err(Error::Shape("regions and prediction differ in size".into()));
    }
    let mut out = closed_pred.clone();
    for (region, decision) in regions.iter().zip(decisions) {
        let Decision::Novel(i) = *decision else {
            continue;
        };
        let label = n_closed + i - 1;
        if i == 0 || label >= usize::from(IGNORE_LABEL) {
            return Err(Error::Precondition(format!("novel class {i} has no valid label")));
        }
        for (dst, &bit) in out.labels_mut().iter_mut().zip(region.bits()) {
            if bit {
                *dst = label as u8;
            }
        }
    }
    Ok(out)
}

/// Per-class TP/FP/FN counts; shards merge by addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl Default for ConfusionCounts {
    fn default() -> Self {
        Self {
            tp: vec![0; 256],
            fp: vec![0; 256],
            fn_: vec![0; 256],
        }
    }
}

impl ConfusionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one frame; ground-truth ignore pixels are skipped.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape("prediction and ground truth differ in size".into()));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p == g {
                self.tp[usize::from(g)] += 1;
            } else {
                self.fp[usize::from(p)] += 1;
                self.fn_[usize::from(g)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in [(&mut self.tp, &other.tp), (&mut self.fp, &other.fp), (&mut self.fn_, &other.fn_)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// `TP / (TP + FP + FN)`, or `None` if the class appears in neither map.
    pub fn iou(&self, class: u8) -> Option<f64> {
        let c = usize::from(class);
        let denom = self.tp[c] + self.fp[c] + self.fn_[c];
        (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
    }

    pub fn report(&self, known: &BTreeSet<u8>, novel: &BTreeSet<u8>) -> MiouReport {
        let per_class: BTreeMap<u8, Option<f64>> = known.iter().chain(novel).map(|&c| (c, self.iou(c))).collect();
        let mean_of = |set: &BTreeSet<u8>| {
            let defined: Vec<f64> = set.iter().filter_map(|c| per_class[c]).collect();
            let absent = set.len() - defined.len();
            if absent > 0 {
                log::info!("{absent} class(es) absent from prediction and ground truth; excluded from the mean");
            }
            if defined.is_empty() {
                0.0
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            }
        };
        let all: BTreeSet<u8> = known.union(novel).copied().collect();
        let miou_old = mean_of(known);
        let miou_novel = mean_of(novel);
        MiouReport {
            miou_all: mean_of(&all),
            miou_old,
            miou_novel,
            miou_harm: harmonic_mean(miou_old, miou_novel),
            per_class,
        }
    }
}

/// IoU summary with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: BTreeMap<u8, Option<f64>>,
    pub miou_all: f64,
    pub miou_novel: f64,
    pub miou_old: f64,
    pub miou_harm: f64,
}

fn percent(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}

impl MiouReport {
    /// JSON view with percentages rounded to one decimal.
    pub fn to_percent_json(&self) -> serde_json::Value {
        let per_class: serde_json::Map<String, serde_json::Value> = self
            .per_class
            .iter()
            .map(|(c, v)| (c.to_string(), v.map_or(serde_json::Value::Null, |x| serde_json::json!(percent(x)))))
            .collect();
        serde_json::json!({
            "per_class": per_class,
            "miou_all": percent(self.miou_all),
            "miou_novel": percent(self.miou_novel),
            "miou_old": percent(self.miou_old),
            "miou_harm": percent(self.miou_harm),
        })
    }
}

/// `2ab / (a + b)`, zero when either side is zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// mIoU family for a single prediction.
pub fn miou(pred: &LabelMap, gt: &LabelMap, known: &BTreeSet<u8>, novel: &BTreeSet<u8>) -> Result<MiouReport> {
    let mut counts = ConfusionCounts::new();
    counts.add(pred, gt)?;
    Ok(counts.report(known, novel))
}

/// How shot images are chosen from the candidates of a novel class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ShotSelection {
    /// Images with the largest novel area, ties broken by index.
    #[default]
    LargestArea,
    Random { seed: u64 },
}

/// Picks `l` image indices from `(index, novel_area)` candidates with nonzero area.
pub fn select_shots(candidates: &[(usize, usize)], l: usize, mode: ShotSelection) -> Result<Vec<usize>> {
    let mut pool: Vec<(usize, usize)> = candidates.iter().copied().filter(|&(_, a)| a > 0).collect();
    if pool.len() < l {
        return Err(Error::Precondition(format!(
            "{l} shots requested but only {} images contain the class",
            pool.len()
        )));
    }
    match mode {
        ShotSelection::LargestArea => {
            pool.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            Ok(pool.into_iter().take(l).map(|(i, _)| i).collect())
        }
        ShotSelection::Random { seed } => {
            pool.sort();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(pool.choose_multiple(&mut rng, l).map(|&(i, _)| i).collect())
        }
    }
}
