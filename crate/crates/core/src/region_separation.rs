//! Uncertainty-based region separation.
//!
//! An edge map is built from Sobel gradients of the input image and the
//! softmax confidence of the close-set logits. The non-edge pixels are then
//! split into connected components, each with its enclosed holes filled,
//! giving the candidate regions that the metric-learning stage classifies.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{BitMask, Tensor3};

/// Pixel adjacency used for flood fills and component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    /// 4 ↔ 8.
    pub fn dual(self) -> Self {
        match self {
            Connectivity::Four => Connectivity::Eight,
            Connectivity::Eight => Connectivity::Four,
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Direction of the confidence test in the edge map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MspMode {
    /// Edge where the maximum softmax probability is at most `beta`.
    Uncertainty,
    /// Edge where the maximum softmax probability is at least `beta`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UrsConfig {
    /// Sobel threshold on the 0-255 intensity scale.
    pub alpha: f64,
    pub beta: f64,
    pub msp_mode: MspMode,
    pub connectivity: Connectivity,
    pub min_region_area: usize,
}

impl Default for UrsConfig {
    fn default() -> Self {
        Self {
            alpha: 50.0,
            beta: 0.7,
            msp_mode: MspMode::Uncertainty,
            connectivity: Connectivity::Four,
            min_region_area: 16,
        }
    }
}

impl UrsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if self.min_region_area == 0 {
            return Err(Error::Config("min_region_area must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ordered, pairwise-disjoint candidate regions of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    height: usize,
    width: usize,
    regions: Vec<BitMask>,
}

impl RegionSet {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            regions: Vec::new(),
        }
    }

    /// Checks shape agreement, non-emptiness and disjointness.
    pub fn new(height: usize, width: usize, regions: Vec<BitMask>) -> Result<Self> {
        let mut owner = vec![false; height * width];
        for (i, r) in regions.iter().enumerate() {
            if r.height() != height || r.width() != width {
                return Err(Error::Shape(format!("region {i} has wrong shape")));
            }
            if r.is_empty() {
                return Err(Error::Precondition(format!("region {i} is empty")));
            }
            for (p, &b) in r.bits().iter().enumerate() {
                if b {
                    if owner[p] {
                        return Err(Error::Precondition(format!("region {i} overlaps another region")));
                    }
                    owner[p] = true;
                }
            }
        }
        Ok(Self {
            height,
            width,
            regions,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> &[BitMask] {
        &self.regions
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BitMask> {
        self.regions.iter()
    }

    /// Per-pixel owning region index.
    pub fn owner_map(&self) -> Vec<Option<usize>> {
        let mut owner = vec![None; self.height * self.width];
        for (i, r) in self.regions.iter().enumerate() {
            for (p, &b) in r.bits().iter().enumerate() {
                if b {
                    owner[p] = Some(i);
                }
            }
        }
        owner
    }

    /// Byte image with 0 for unassigned pixels and `i + 1` for region `i`
    /// (saturating at 254).
    pub fn to_id_bytes(&self) -> Vec<u8> {
        self.owner_map()
            .into_iter()
            .map(|o| o.map_or(0, |i| (i + 1).min(254) as u8))
            .collect()
    }

    pub fn union(&self) -> BitMask {
        let mut out = BitMask::empty(self.height, self.width);
        for r in &self.regions {
            out = out.union(r);
        }
        out
    }
}

fn luminance_255(image: &Tensor3) -> Vec<f64> {
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) * 255.0)
        .collect()
}

/// Sobel gradient magnitude of the 0-255 luminance, borders replicated.
pub fn sobel_magnitude_f64(image: &Tensor3) -> Result<Vec<f64>> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!(
            "sobel expects a 3-channel image, got {} channels",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let gray = luminance_255(image);
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    Ok(out)
}

pub fn sobel_magnitude(image: &Tensor3) -> Result<Tensor3> {
    let mag = sobel_magnitude_f64(image)?;
    Tensor3::from_f64(1, image.height(), image.width(), &mag)
}

/// Maximum softmax probability per pixel, in `[1/N, 1]`.
pub fn msp_f64(logits: &Tensor3) -> Result<Vec<f64>> {
    let n = logits.channels();
    if n < 2 {
        return Err(Error::Shape(format!("msp needs at least 2 classes, got {n}")));
    }
    let plane = logits.plane_len();
    let data = logits.data();
    let mut out = vec![0.0; plane];
    for (p, o) in out.iter_mut().enumerate() {
        let max = (0..n).map(|c| f64::from(data[c * plane + p])).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).map(|c| (f64::from(data[c * plane + p]) - max).exp()).sum();
        *o = 1.0 / denom;
    }
    Ok(out)
}

pub fn msp(logits: &Tensor3) -> Result<Tensor3> {
    let v = msp_f64(logits)?;
    Tensor3::from_f64(1, logits.height(), logits.width(), &v)
}

pub fn edge_map(image: &Tensor3, logits: &Tensor3, cfg: &UrsConfig) -> Result<BitMask> {
    if !image.same_plane(logits) {
        return Err(Error::Shape(format!(
            "image is {}x{} but logits are {}x{}",
            image.height(),
            image.width(),
            logits.height(),
            logits.width()
        )));
    }
    let sobel = sobel_magnitude_f64(image)?;
    let conf = msp_f64(logits)?;
    let bits = sobel
        .iter()
        .zip(&conf)
        .map(|(&s, &m)| {
            let uncertain = match cfg.msp_mode {
                MspMode::Uncertainty => m <= cfg.beta,
                MspMode::Literal => m >= cfg.beta,
            };
            s >= cfg.alpha || uncertain
        })
        .collect();
    BitMask::new(image.height(), image.width(), bits)
}

fn neighbors(
    p: usize,
    h: usize,
    w: usize,
    conn: Connectivity,
) -> impl Iterator<Item = usize> {
    let (y, x) = ((p / w) as isize, (p % w) as isize);
    conn.offsets().iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y + dy, x + dx);
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then(|| ny as usize * w + nx as usize)
    })
}

/// Adds every background component that does not reach the image border.
/// `connectivity` is the adjacency of the background.
pub fn fill_holes(mask: &BitMask, connectivity: Connectivity) -> BitMask {
    let (h, w) = (mask.height(), mask.width());
    let bits = mask.bits();
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for p in 0..h * w {
        let (y, x) = (p / w, p % w);
        let on_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
        if on_border && !bits[p] && !outside[p] {
            outside[p] = true;
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        for q in neighbors(p, h, w, connectivity) {
            if !bits[q] && !outside[q] {
                outside[q] = true;
                queue.push_back(q);
            }
        }
    }
    BitMask::new(h, w, outside.into_iter().map(|o| !o).collect()).expect("shape preserved")
}

/// Component label per pixel (`u32::MAX` for unset pixels) and component count,
/// labels assigned in raster order of each component's first pixel.
pub(crate) fn label_components(mask: &BitMask, connectivity: Connectivity) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let bits = mask.bits();
    let mut labels = vec![u32::MAX; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !bits[start] || labels[start] != u32::MAX {
            continue;
        }
        labels[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for q in neighbors(p, h, w, connectivity) {
                if bits[q] && labels[q] == u32::MAX {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    (labels, next as usize)
}

fn ordered_region_set(h: usize, w: usize, labels: &[u32], count: usize, min_area: usize) -> RegionSet {
    let mut masks: Vec<(usize, Vec<bool>)> = vec![(usize::MAX, vec![false; h * w]); count];
    let mut areas = vec![0usize; count];
    for (p, &l) in labels.iter().enumerate() {
        if l != u32::MAX {
            let l = l as usize;
            masks[l].0 = masks[l].0.min(p);
            masks[l].1[p] = true;
            areas[l] += 1;
        }
    }
    let mut order: Vec<usize> = (0..count).filter(|&i| areas[i] >= min_area.max(1)).collect();
    order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(masks[a].0.cmp(&masks[b].0)));
    let regions = order
        .into_iter()
        .map(|i| BitMask::new(h, w, std::mem::take(&mut masks[i].1)).expect("shape preserved"))
        .collect();
    RegionSet {
        height: h,
        width: w,
        regions,
    }
}

/// Maximal connected components of the set pixels, largest first (ties by
/// raster position of the first pixel); components below `min_area` dropped.
pub fn connected_components(mask: &BitMask, connectivity: Connectivity, min_area: usize) -> RegionSet {
    let (labels, count) = label_components(mask, connectivity);
    ordered_region_set(mask.height(), mask.width(), &labels, count, min_area)
}

/// Candidate regions of one frame.
///
/// Non-edge components are labeled with `cfg.connectivity`. Every enclosed
/// group of edge pixels (background adjacency is the dual connectivity) that
/// borders exactly one component is a hole of that component and is merged
/// into it; edge groups separating two or more components stay edges.
pub fn separate_regions(image: &Tensor3, logits: &Tensor3, cfg: &UrsConfig) -> Result<RegionSet> {
    cfg.validate()?;
    let edges = edge_map(image, logits, cfg)?;
    Ok(regions_from_edges(&edges, cfg.connectivity, cfg.min_region_area))
}

/// Region extraction from a precomputed edge map.
pub fn regions_from_edges(edges: &BitMask, connectivity: Connectivity, min_area: usize) -> RegionSet {
    let (h, w) = (edges.height(), edges.width());
    let open = edges.complement();
    let (mut labels, count) = label_components(&open, connectivity);
    let filled = fill_holes(&open, connectivity.dual());
    let hole_pixels = BitMask::new(
        h,
        w,
        filled.bits().iter().zip(open.bits()).map(|(&f, &o)| f && !o).collect(),
    )
    .expect("shape preserved");
    let (hole_labels, hole_count) = label_components(&hole_pixels, connectivity.dual());
    let mut hole_owner: Vec<Option<Option<u32>>> = vec![None; hole_count];
    for p in 0..h * w {
        let hl = hole_labels[p];
        if hl == u32::MAX {
            continue;
        }
        for q in neighbors(p, h, w, connectivity.dual()) {
            let l = labels[q];
            if l == u32::MAX {
                continue;
            }
            let entry = &mut hole_owner[hl as usize];
            *entry = match *entry {
                None => Some(Some(l)),
                Some(Some(prev)) if prev == l => Some(Some(l)),
                _ => Some(None),
            };
        }
    }
    for p in 0..h * w {
        let hl = hole_labels[p];
        if hl != u32::MAX {
            if let Some(Some(owner)) = hole_owner[hl as usize] {
                labels[p] = owner;
            }
        }
    }
    ordered_region_set(h, w, &labels, count, min_area)
}
