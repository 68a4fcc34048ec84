//! Independent reference implementations and the check routines shared by
//! the oracle suite and the acceptance runner. Every oracle here is written
//! from the defining formula, without reusing library internals.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raml_core::anomaly::{aupr, auroc, fpr95, ScoredPixels};
use raml_core::fewshot_eval::{classify_region, Decision};
use raml_core::mca::{
    dice_coeff, inter_loss, overall_loss, rec_loss, seg_loss, split_loss, McaConfig, MetaActivation, MetaOutput,
};
use raml_core::metric_embedding::{circle_loss, region_pool, CircleLossConfig};
use raml_core::region_separation::{connected_components, edge_map, fill_holes, Connectivity, UrsConfig};
use raml_core::tensor_io::{BitMask, LabelMap, Tensor3, IGNORE_LABEL};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BitMask {
    BitMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

fn offsets(conn: Connectivity) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let diagonal = dy != 0 && dx != 0;
            if (dy, dx) == (0, 0) || (diagonal && conn == Connectivity::Four) {
                continue;
            }
            out.push((dy, dx));
        }
    }
    out
}

/// Depth-first flood fill from `start` over pixels where `inside` holds.
fn flood(h: usize, w: usize, start: (usize, usize), conn: Connectivity, inside: &dyn Fn(usize, usize) -> bool) -> Vec<Vec<bool>> {
    let mut seen = vec![vec![false; w]; h];
    let mut stack = vec![start];
    seen[start.0][start.1] = true;
    while let Some((y, x)) = stack.pop() {
        for (dy, dx) in offsets(conn) {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if !seen[ny][nx] && inside(ny, nx) {
                seen[ny][nx] = true;
                stack.push((ny, nx));
            }
        }
    }
    seen
}

/// Components of the set pixels, largest first, ties by first raster pixel,
/// dropping those below `min_area`.
pub fn oracle_components(mask: &BitMask, conn: Connectivity, min_area: usize) -> Vec<Vec<bool>> {
    let (h, w) = (mask.height(), mask.width());
    let mut claimed = vec![vec![false; w]; h];
    let mut comps: Vec<(usize, usize, Vec<bool>)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) || claimed[y][x] {
                continue;
            }
            let comp = flood(h, w, (y, x), conn, &|yy, xx| mask.get(yy, xx));
            let flat: Vec<bool> = comp.iter().flatten().copied().collect();
            for yy in 0..h {
                for xx in 0..w {
                    claimed[yy][xx] |= comp[yy][xx];
                }
            }
            let area = flat.iter().filter(|&&b| b).count();
            comps.push((area, y * w + x, flat));
        }
    }
    comps.retain(|c| c.0 >= min_area.max(1));
    comps.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    comps.into_iter().map(|c| c.2).collect()
}

/// A clear pixel becomes set exactly when its background component (under
/// `conn`) never touches the border.
pub fn oracle_fill_holes(mask: &BitMask, conn: Connectivity) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = mask.bits().to_vec();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                continue;
            }
            let comp = flood(h, w, (y, x), conn, &|yy, xx| !mask.get(yy, xx));
            let touches = (0..h).any(|yy| comp[yy][0] || comp[yy][w - 1]) || (0..w).any(|xx| comp[0][xx] || comp[h - 1][xx]);
            out[y * w + x] = !touches;
        }
    }
    out
}

pub fn check_components(count: usize) -> Check {
    let mut r = rng(101);
    for case in 0..count {
        let density = r.gen_range(0.2..0.8);
        let mask = random_mask(&mut r, 32, 32, density);
        let conn = if case % 2 == 0 { Connectivity::Four } else { Connectivity::Eight };
        let min_area = r.gen_range(0..6);
        let got: Vec<Vec<bool>> = connected_components(&mask, conn, min_area)
            .iter()
            .map(|m| m.bits().to_vec())
            .collect();
        let want = oracle_components(&mask, conn, min_area);
        if got != want {
            return Err(format!("case {case}: {} components vs oracle {}", got.len(), want.len()));
        }
    }
    Ok(format!("{count} masks exact"))
}

pub fn check_fill_holes(count: usize) -> Check {
    let mut r = rng(202);
    for case in 0..count {
        let density = r.gen_range(0.3..0.8);
        let mask = random_mask(&mut r, 32, 32, density);
        let conn = if case % 2 == 0 { Connectivity::Four } else { Connectivity::Eight };
        if fill_holes(&mask, conn).bits() != oracle_fill_holes(&mask, conn).as_slice() {
            return Err(format!("case {case}: fill differs from oracle"));
        }
    }
    Ok(format!("{count} masks exact"))
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn thresholds_desc(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn counts_at(scores: &[f64], labels: &[bool], t: f64) -> (usize, usize) {
    let tp = scores.iter().zip(labels).filter(|(&s, &l)| l && s >= t).count();
    let fp = scores.iter().zip(labels).filter(|(&s, &l)| !l && s >= t).count();
    (tp, fp)
}

/// Σ over thresholds of (recall gain) × precision at that threshold.
pub fn threshold_aupr(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        let recall = tp as f64 / pos;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    ap
}

/// FPR at the highest threshold whose TPR reaches 0.95.
pub fn threshold_fpr95(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    for t in thresholds_desc(scores) {
        let (tp, fp) = counts_at(scores, labels, t);
        if tp as f64 / pos >= 0.95 {
            return fp as f64 / neg;
        }
    }
    1.0
}

pub fn check_ranking_metrics(count: usize) -> Check {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for case in 0..count {
        let n = r.gen_range(2..300);
        // coarse quantization in half the cases produces many ties
        let levels: f64 = if case % 2 == 0 { 7.0 } else { 1e6 };
        let mut scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0.0..1.0) * levels).floor() / levels).collect();
        let bias = r.gen_range(0.1..0.9);
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen_bool(bias)).collect();
        labels[0] = true;
        labels[1] = false;
        if case % 5 == 0 {
            // informative scores
            for (s, &l) in scores.iter_mut().zip(&labels) {
                if l {
                    *s += 0.3;
                }
            }
        }
        let sp = ScoredPixels::new(scores.clone(), labels.clone()).map_err(|e| e.to_string())?;
        let diffs = [
            (auroc(&sp).map_err(|e| e.to_string())? - pairwise_auroc(&scores, &labels)).abs(),
            (aupr(&sp).map_err(|e| e.to_string())? - threshold_aupr(&scores, &labels)).abs(),
            (fpr95(&sp).map_err(|e| e.to_string())? - threshold_fpr95(&scores, &labels)).abs(),
        ];
        let d = diffs.iter().copied().fold(0.0, f64::max);
        worst = worst.max(d);
        if d > 1e-12 {
            return Err(format!("case {case}: deviation {d:e} (auroc/aupr/fpr95 {diffs:?})"));
        }
    }
    Ok(format!("{count} score sets, max deviation {worst:.1e}"))
}

fn random_tensor(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> Tensor3 {
    Tensor3::new(c, h, w, (0..c * h * w).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn plane_values(t: &Tensor3, c: usize) -> Vec<f64> {
    t.channel(c).iter().map(|&v| f64::from(v)).collect()
}

pub fn oracle_pool(t: &Tensor3, mask: &BitMask) -> Vec<f64> {
    (0..t.channels())
        .map(|c| {
            let (mut s, mut n) = (0.0, 0.0);
            for y in 0..t.height() {
                for x in 0..t.width() {
                    if mask.get(y, x) {
                        s += f64::from(t.get(c, y, x));
                        n += 1.0;
                    }
                }
            }
            s / n
        })
        .collect()
}

/// Mean over labelled pixels of −log softmax(u)[label], computed directly.
pub fn oracle_seg_loss(u: &Tensor3, labels: &LabelMap) -> f64 {
    let (mut total, mut n) = (0.0, 0.0);
    for y in 0..u.height() {
        for x in 0..u.width() {
            let l = labels.get(y, x);
            if l == IGNORE_LABEL {
                continue;
            }
            let z: f64 = (0..u.channels()).map(|c| f64::from(u.get(c, y, x)).exp()).sum();
            total += -(f64::from(u.get(usize::from(l), y, x)).exp() / z).ln();
            n += 1.0;
        }
    }
    total / n
}

pub fn oracle_dice(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    2.0 * inter / (a.iter().sum::<f64>() + b.iter().sum::<f64>() + eps)
}

pub fn oracle_inter(c: &Tensor3, eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..c.channels() {
        for j in 0..c.channels() {
            if i < j {
                total += oracle_dice(&plane_values(c, i), &plane_values(c, j), eps);
            }
        }
    }
    total
}

pub fn oracle_split(c: &Tensor3, n: usize, k: usize, eta: f64) -> f64 {
    (n..n + k)
        .map(|i| {
            let mass: f64 = plane_values(c, i).iter().sum();
            -f64::max(eta * mass, 1.0).ln()
        })
        .sum()
}

pub fn oracle_rec(image: &Tensor3, c: &Tensor3) -> f64 {
    let mut total = 0.0;
    for ch in 0..image.channels() {
        for y in 0..image.height() {
            for x in 0..image.width() {
                let s: f64 = (0..c.channels()).map(|k| f64::from(c.get(k, y, x))).sum();
                let v = f64::from(image.get(ch, y, x)) * (s - 1.0);
                total += v * v;
            }
        }
    }
    total
}

pub fn oracle_circle(s_p: &[f64], s_n: &[f64], cfg: &CircleLossConfig) -> f64 {
    let mut inner = 0.0;
    for &n in s_n {
        for &p in s_p {
            inner += (cfg.gamma * (n + cfg.margin - p)).exp();
        }
    }
    (1.0 + inner).ln()
}

pub fn check_pool_and_losses(cases: usize) -> Check {
    let mut r = rng(404);
    let mut worst = 0.0f64;
    let mut track = |name: &str, got: f64, want: f64, case: usize| -> Result<(), String> {
        let d = (got - want).abs() / want.abs().max(1.0);
        worst = worst.max(d);
        if d > 1e-9 || !got.is_finite() {
            return Err(format!("{name} case {case}: {got} vs oracle {want}"));
        }
        Ok(())
    };
    for case in 0..cases {
        let (h, w) = (r.gen_range(3..12), r.gen_range(3..12));
        // region pool
        let feats = random_tensor(&mut r, 5, h, w, -2.0, 2.0);
        let mut mask = random_mask(&mut r, h, w, 0.4);
        mask.set(0, 0, true);
        let pooled = region_pool(&feats, &mask).map_err(|e| e.to_string())?;
        for (g, o) in pooled.iter().zip(oracle_pool(&feats, &mask)) {
            track("region_pool", *g, o, case)?;
        }
        // segmentation cross entropy
        let classes = r.gen_range(2..6);
        let logits = random_tensor(&mut r, classes, h, w, -3.0, 3.0);
        let mut labels: Vec<u8> = (0..h * w)
            .map(|_| if r.gen_bool(0.15) { IGNORE_LABEL } else { r.gen_range(0..classes as u8) })
            .collect();
        labels[0] = 0;
        let labels = LabelMap::new(h, w, labels).unwrap();
        track(
            "seg_loss",
            seg_loss(&logits, &labels).map_err(|e| e.to_string())?,
            oracle_seg_loss(&logits, &labels),
            case,
        )?;
        // meta-channel terms
        let (n, k) = (r.gen_range(1..4), r.gen_range(1..5));
        let c = random_tensor(&mut r, n + k, h, w, 0.0, 1.0);
        let meta = MetaOutput::new(c.clone(), MetaActivation::SigmoidPerChannel).map_err(|e| e.to_string())?;
        let eps = 1e-6;
        let a = plane_values(&c, 0);
        let b = plane_values(&c, 1);
        track("dice_coeff", dice_coeff(&a, &b, eps), oracle_dice(&a, &b, eps), case)?;
        track("inter_loss", inter_loss(&meta, eps), oracle_inter(&c, eps), case)?;
        let eta = r.gen_range(0.01..1.0);
        track(
            "split_loss",
            split_loss(&meta, n, k, eta).map_err(|e| e.to_string())?,
            oracle_split(&c, n, k, eta),
            case,
        )?;
        let image = random_tensor(&mut r, 3, h, w, 0.0, 1.0);
        track(
            "rec_loss",
            rec_loss(&image, &meta).map_err(|e| e.to_string())?,
            oracle_rec(&image, &c),
            case,
        )?;
        // circle loss
        let cfg = CircleLossConfig::default();
        let s_p: Vec<f64> = (0..r.gen_range(1..4)).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s_n: Vec<f64> = (0..r.gen_range(1..5)).map(|_| r.gen_range(-1.0..1.0)).collect();
        track(
            "circle_loss",
            circle_loss(&s_p, &s_n, &cfg).map_err(|e| e.to_string())?,
            oracle_circle(&s_p, &s_n, &cfg),
            case,
        )?;
    }
    Ok(format!("{cases} cases, max relative deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// loss laws

fn random_meta(r: &mut ChaCha8Rng, channels: usize, h: usize, w: usize, act: MetaActivation) -> MetaOutput {
    let logits = random_tensor(r, channels, h, w, -4.0, 4.0);
    MetaOutput::from_logits(&logits, act)
}

pub fn check_inter_and_split_signs(cases: usize) -> Check {
    let mut r = rng(505);
    for case in 0..cases {
        let (n, k) = (r.gen_range(1..5), r.gen_range(1..5));
        let act = if case % 2 == 0 { MetaActivation::SigmoidPerChannel } else { MetaActivation::SoftmaxAll };
        let meta = random_meta(&mut r, n + k, 16, 16, act);
        let inter = inter_loss(&meta, 1e-6);
        let eta = r.gen_range(0.001..1.0);
        let split = split_loss(&meta, n, k, eta).map_err(|e| e.to_string())?;
        if inter < 0.0 || split > 0.0 {
            return Err(format!("case {case}: inter {inter}, split {split}"));
        }
    }
    Ok(format!("{cases} random outputs: inter >= 0, split <= 0"))
}

pub fn check_rec_zero_softmax(cases: usize) -> Check {
    let mut r = rng(606);
    let mut worst = 0.0f64;
    let n = 3;
    for case in 0..cases {
        let mca = McaConfig {
            k: r.gen_range(1..5),
            activation: MetaActivation::SoftmaxAll,
            ..McaConfig::default()
        };
        let (h, w) = (12, 12);
        let logits = random_tensor(&mut r, n + mca.k, h, w, -5.0, 5.0);
        let image = random_tensor(&mut r, 3, h, w, 0.0, 1.0);
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| r.gen_range(0..n as u8)).collect()).unwrap();
        let rec = overall_loss(&logits, &labels, &image, n, &mca).map_err(|e| e.to_string())?.rec;
        worst = worst.max(rec);
        if rec > 1e-20 {
            return Err(format!("case {case}: rec_loss {rec:e} under softmax_all"));
        }
    }
    Ok(format!("{cases} random frames, max rec {worst:.1e}"))
}

/// Builds a sigmoid-mode output whose meta channels carry the given masses
/// as constant planes.
fn meta_with_masses(n: usize, masses: &[f64], plane: usize) -> MetaOutput {
    let mut data = vec![0.0f32; (n + masses.len()) * plane];
    for (i, &m) in masses.iter().enumerate() {
        let v = (m / plane as f64) as f32;
        data[(n + i) * plane..(n + i + 1) * plane].iter_mut().for_each(|d| *d = v);
    }
    MetaOutput::new(Tensor3::new(n + masses.len(), 1, plane, data).unwrap(), MetaActivation::SigmoidPerChannel).unwrap()
}

pub fn check_split_equal_allocation(trials: usize) -> Check {
    let mut r = rng(707);
    let (n, k, eta, plane) = (2, 4, 0.02, 1024);
    // η·M/K = 3 > e
    let total = 3.0 * k as f64 / eta;
    let equal = split_loss(&meta_with_masses(n, &vec![total / k as f64; k], plane), n, k, eta).map_err(|e| e.to_string())?;
    let mut best_other = f64::INFINITY;
    for trial in 0..trials {
        let weights: Vec<f64> = (0..k).map(|_| -r.gen_range(1e-9f64..1.0).ln()).collect();
        let sum: f64 = weights.iter().sum();
        let masses: Vec<f64> = weights.iter().map(|w| total * w / sum).collect();
        let v = split_loss(&meta_with_masses(n, &masses, plane), n, k, eta).map_err(|e| e.to_string())?;
        best_other = best_other.min(v);
        if v < equal - 1e-9 {
            return Err(format!("trial {trial}: allocation {masses:?} gives {v} < equal {equal}"));
        }
    }
    Ok(format!("equal {equal:.6} <= best of {trials} random {best_other:.6}"))
}

pub fn check_edge_map_monotone(cases: usize) -> Check {
    let mut r = rng(808);
    for case in 0..cases {
        let (h, w) = (r.gen_range(3..20), r.gen_range(3..20));
        let image = random_tensor(&mut r, 3, h, w, 0.0, 1.0);
        let logits = random_tensor(&mut r, 4, h, w, -3.0, 3.0);
        let mut alphas: Vec<f64> = (0..5).map(|_| r.gen_range(0.0..400.0)).collect();
        alphas.sort_by(f64::total_cmp);
        let beta = r.gen_range(0.2..0.9);
        let maps = alphas
            .iter()
            .map(|&alpha| {
                edge_map(
                    &image,
                    &logits,
                    &UrsConfig {
                        alpha,
                        beta,
                        ..UrsConfig::default()
                    },
                )
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        for pair in maps.windows(2) {
            if !pair[1].is_subset_of(&pair[0]) {
                return Err(format!("case {case}: raising alpha added edge pixels"));
            }
        }
    }
    Ok(format!("{cases} frames x 5 alphas nested"))
}

pub fn check_theta_rejection_monotone(cases: usize) -> Check {
    let mut r = rng(909);
    for case in 0..cases {
        let m = r.gen_range(1..5);
        let sims: Vec<f64> = (0..m).map(|_| (r.gen_range(-1.0f64..1.0) * 20.0).round() / 20.0).collect();
        let mut thetas: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
        thetas.sort_by(f64::total_cmp);
        let decisions: Vec<Decision> = thetas.iter().map(|&t| classify_region(&sims, t)).collect();
        for (i, pair) in decisions.windows(2).enumerate() {
            let ok = match (pair[0], pair[1]) {
                (Decision::Reject, Decision::Novel(_)) => false,
                (Decision::Novel(a), Decision::Novel(b)) => a == b,
                _ => true,
            };
            if !ok {
                return Err(format!(
                    "case {case}: sims {sims:?} {:?} at θ={} then {:?} at θ={}",
                    pair[0],
                    thetas[i],
                    pair[1],
                    thetas[i + 1]
                ));
            }
        }
    }
    Ok(format!("{cases} similarity vectors x 6 thresholds"))
}

/// Label sets used by the fixture: background plus known shapes, then novel.
pub fn label_sets(n_closed: u8, m: u8) -> (BTreeSet<u8>, BTreeSet<u8>) {
    ((0..n_closed).collect(), (n_closed..n_closed + m).collect())
}
