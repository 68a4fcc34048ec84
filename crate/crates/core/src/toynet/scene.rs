//! Procedural scenes: flat-colored shapes on a gray gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{LabelMap, Tensor3, IGNORE_LABEL};

/// Samples per pixel side used for coverage estimation.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    StripeBar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::StripeBar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::StripeBar => "stripe-bar",
        }
    }

    /// Base RGB color of the class.
    pub fn color(self) -> [f64; 3] {
        match self {
            ShapeKind::Disk => [0.85, 0.2, 0.2],
            ShapeKind::Square => [0.2, 0.75, 0.25],
            ShapeKind::Triangle => [0.25, 0.35, 0.9],
            ShapeKind::Cross => [0.9, 0.85, 0.2],
            ShapeKind::Ring => [0.8, 0.3, 0.8],
            ShapeKind::StripeBar => [0.2, 0.8, 0.8],
        }
    }

    /// Whether the point `(dx, dy)` relative to the centre lies inside a
    /// shape of size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => {
                // apex up, base at 0.8 r below the centre
                let top = -r;
                let bottom = 0.8 * r;
                if dy < top || dy > bottom {
                    return false;
                }
                let half = r * (dy - top) / (bottom - top);
                dx.abs() <= half
            }
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
            ShapeKind::StripeBar => dx.abs() <= r && dy.abs() <= 0.3 * r,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape '{s}'")))
    }
}

/// Generator settings. Label 0 is background, known shapes take labels
/// `1..=known.len()` and novel shapes follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub known: Vec<ShapeKind>,
    pub novel: Vec<ShapeKind>,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Per-channel uniform color jitter amplitude.
    pub color_jitter: f64,
    /// Per-pixel uniform noise amplitude.
    pub noise: f64,
    /// Chance that a scene contains a novel shape.
    pub novel_probability: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            known: vec![ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle],
            novel: vec![ShapeKind::Cross],
            min_shapes: 2,
            max_shapes: 4,
            min_size: 7.0,
            max_size: 12.0,
            color_jitter: 0.06,
            noise: 0.02,
            novel_probability: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("height and width must be positive".into()));
        }
        if self.known.is_empty() {
            return Err(Error::Config("known: at least one known shape is required".into()));
        }
        if self.known.len() + self.novel.len() + 1 >= usize::from(IGNORE_LABEL) {
            return Err(Error::Config("too many classes".into()));
        }
        for s in &self.novel {
            if self.known.contains(s) {
                return Err(Error::Config(format!("novel: '{s}' is also a known shape")));
            }
        }
        if !(self.min_size >= 1.0 && self.max_size >= self.min_size) {
            return Err(Error::Config("min_size/max_size: need 1 <= min_size <= max_size".into()));
        }
        let canvas = self.height.min(self.width) as f64;
        if 2.0 * self.max_size + 2.0 > canvas {
            return Err(Error::Config(format!(
                "max_size: a shape of size {} does not fit a {}x{} canvas",
                self.max_size, self.height, self.width
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes: must not exceed max_shapes".into()));
        }
        if !(0.0..=1.0).contains(&self.novel_probability) {
            return Err(Error::Config("novel_probability: must lie in [0, 1]".into()));
        }
        if !(0.0..=0.5).contains(&self.color_jitter) || !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config("color_jitter/noise: must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    /// Number of closed-set classes, background included.
    pub fn closed_classes(&self) -> usize {
        1 + self.known.len()
    }

    pub fn label_of(&self, kind: ShapeKind) -> Option<u8> {
        if let Some(i) = self.known.iter().position(|&k| k == kind) {
            return Some(i as u8 + 1);
        }
        self.novel
            .iter()
            .position(|&k| k == kind)
            .map(|i| (self.closed_classes() + i) as u8)
    }
}

/// A placed shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

/// A rendered scene and its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor3,
    pub labels: LabelMap,
    pub shapes: Vec<PlacedShape>,
}

/// Renders one scene. Shapes are placed without overlap where possible and
/// drawn back to front; a pixel takes a shape's label when at least half of
/// it is covered.
pub fn gen_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Scene> {
    spec.validate()?;
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let with_novel = !spec.novel.is_empty() && rng.gen_bool(spec.novel_probability);
    let mut kinds: Vec<ShapeKind> = Vec::with_capacity(count.max(1));
    if with_novel {
        kinds.push(spec.novel[rng.gen_range(0..spec.novel.len())]);
    }
    while kinds.len() < count {
        kinds.push(spec.known[rng.gen_range(0..spec.known.len())]);
    }
    // the novel shape goes first so it always finds room
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let size = if spec.max_size > spec.min_size {
            rng.gen_range(spec.min_size..spec.max_size)
        } else {
            spec.min_size
        };
        let mut placed = None;
        for _ in 0..30 {
            let cx = rng.gen_range(size + 1.0..spec.width as f64 - size - 1.0);
            let cy = rng.gen_range(size + 1.0..spec.height as f64 - size - 1.0);
            let clear = shapes.iter().all(|s| {
                let (dx, dy) = (s.cx - cx, s.cy - cy);
                (dx * dx + dy * dy).sqrt() >= s.size + size + 2.0
            });
            if clear {
                placed = Some(PlacedShape { kind, cx, cy, size });
                break;
            }
        }
        if let Some(p) = placed {
            shapes.push(p);
        }
    }
    Ok(render(spec, &shapes, rng))
}

fn render(spec: &SceneSpec, shapes: &[PlacedShape], rng: &mut impl Rng) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let base = rng.gen_range(0.12..0.22);
    let gx = rng.gen_range(-0.06..0.06);
    let gy = rng.gen_range(-0.06..0.06);
    let mut rgb = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let v = base + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            for c in 0..3 {
                rgb[c * plane + y * w + x] = v;
            }
        }
    }
    let mut labels = vec![0u8; plane];
    let sub = SUPERSAMPLE as f64;
    for shape in shapes {
        let label = spec.label_of(shape.kind).expect("shape kind is listed in the scene description");
        let mut color = shape.kind.color();
        for c in &mut color {
            *c = (*c + rng.gen_range(-1.0..=1.0) * spec.color_jitter).clamp(0.0, 1.0);
        }
        let x0 = (shape.cx - shape.size - 1.0).floor().max(0.0) as usize;
        let x1 = ((shape.cx + shape.size + 1.0).ceil() as usize).min(w - 1);
        let y0 = (shape.cy - shape.size - 1.0).floor().max(0.0) as usize;
        let y1 = ((shape.cy + shape.size + 1.0).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / sub - shape.cx;
                        let py = y as f64 + (sy as f64 + 0.5) / sub - shape.cy;
                        if shape.kind.contains(px, py, shape.size) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let alpha = hits as f64 / (sub * sub);
                let p = y * w + x;
                for (c, &col) in color.iter().enumerate() {
                    let v = &mut rgb[c * plane + p];
                    *v = (1.0 - alpha) * *v + alpha * col;
                }
                if 2 * hits >= SUPERSAMPLE * SUPERSAMPLE {
                    labels[p] = label;
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in &mut rgb {
            *v = (*v + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
        }
    }
    Scene {
        image: Tensor3::from_f64(3, h, w, &rgb).expect("finite pixels"),
        labels: LabelMap::new(h, w, labels).expect("label count"),
        shapes: shapes.to_vec(),
    }
}

/// Ground truth with every label at or above `n_closed` replaced by the
/// ignore label, as used for closed-set training.
pub fn training_labels(gt: &LabelMap, n_closed: usize) -> LabelMap {
    let mut out = gt.clone();
    for l in out.labels_mut() {
        if usize::from(*l) >= n_closed && *l != IGNORE_LABEL {
            *l = IGNORE_LABEL;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_shapes_is_background() {
        let spec = SceneSpec {
            min_shapes: 0,
            max_shapes: 0,
            novel_probability: 0.0,
            ..SceneSpec::default()
        };
        let s = gen_scene(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.labels.labels().iter().all(|&l| l == 0));
        assert!(s.shapes.is_empty());
    }

    #[test]
    fn disk_area_matches_analytic() {
        let spec = SceneSpec::default();
        let r = 10.0;
        let shape = PlacedShape {
            kind: ShapeKind::Disk,
            cx: 32.0,
            cy: 32.0,
            size: r,
        };
        let s = render(&spec, &[shape], &mut ChaCha8Rng::seed_from_u64(2));
        let area = s.labels.labels().iter().filter(|&&l| l == 1).count() as f64;
        let expected = std::f64::consts::PI * r * r;
        assert!((area - expected).abs() <= 0.02 * expected, "{area} vs {expected}");
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a = gen_scene(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = gen_scene(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_size_names_field() {
        let spec = SceneSpec {
            max_size: 40.0,
            ..SceneSpec::default()
        };
        let err = gen_scene(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("max_size"));
        let overlap = SceneSpec {
            novel: vec![ShapeKind::Disk],
            ..SceneSpec::default()
        };
        assert!(overlap.validate().unwrap_err().to_string().contains("novel"));
    }

    #[test]
    fn label_layout_and_training_mask() {
        let spec = SceneSpec {
            novel_probability: 1.0,
            ..SceneSpec::default()
        };
        assert_eq!(spec.label_of(ShapeKind::Square), Some(2));
        assert_eq!(spec.label_of(ShapeKind::Cross), Some(4));
        assert_eq!(spec.label_of(ShapeKind::Ring), None);
        let s = gen_scene(&spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert!(s.labels.labels().contains(&4));
        let t = training_labels(&s.labels, spec.closed_classes());
        assert!(!t.labels().contains(&4));
        assert!(t.labels().contains(&IGNORE_LABEL));
    }

    #[test]
    fn shape_names_parse() {
        for k in ShapeKind::ALL {
            assert_eq!(k.name().parse::<ShapeKind>().unwrap(), k);
        }
        assert!("hexagon".parse::<ShapeKind>().is_err());
        assert_eq!(serde_json::to_string(&ShapeKind::StripeBar).unwrap(), "\"stripe-bar\"");
    }
}
