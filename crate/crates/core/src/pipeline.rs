//! On-disk pipeline: a single JSON run configuration and one function per
//! stage. Every stage reads the artifacts of earlier stages from disk and
//! writes its own, so stages can be re-run independently and reproduce
//! byte-identical outputs for an unchanged configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::anomaly::{
    evaluate_maps, maxlogit_map, normalize_map, region_anomaly_prob, uncertainty_map, AnomalyMap, AnomalyMetrics,
    MetricPooling,
};
use crate::error::{Error, Result};
use crate::fewshot_eval::{
    assemble_segmentation, classify_region, novel_prototypes, region_similarities, select_shots, ConfusionCounts,
    Decision, FewshotConfig, MiouReport, Shot, ShotSelection,
};
use crate::gradcheck::{run_suite, GradCheckConfig};
use crate::mca::{candidate_channels_union, regions_for_channels, McaConfig, MetaOutput};
use crate::metric_embedding::{
    embed_region, known_prototypes, region_samples, train_head, CircleLossConfig, Embedding, HeadTrainConfig,
    PrototypeBank, ProjectionHead,
};
use crate::region_separation::{edge_map, separate_regions, RegionSet, UrsConfig};
use crate::tensor_io::{
    read_image_ppm, read_label_pgm, read_tensor, write_heat_pgm, write_image_ppm, write_label_pgm, write_mask_pgm,
    write_tensor, BitMask, LabelMap, Tensor3,
};
use crate::toynet::{
    argmax_labels, finetune_baseline, finetune_mca, gen_scene, train_closed, training_labels, Sample, SceneSpec,
    ShapeKind, ToyNetParams, TrainConfig, BLOCK_NAMES,
};

/// Root directories of the three artifact trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoints: "checkpoints".into(),
            output: "out".into(),
        }
    }
}

/// Size and seeding of the generated dataset. Scene `i` is drawn from the
/// stream `i` of a generator seeded with `seed`; the last `test_fraction`
/// of the scenes form the test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub test_fraction: f64,
    pub seed: u64,
    /// Chance of a novel shape in a test scene (training scenes use the
    /// scene generator's own setting).
    pub test_novel_probability: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            test_fraction: 0.25,
            seed: 7,
            test_novel_probability: 1.0,
        }
    }
}

/// Projection head widths and initialization seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub hidden: usize,
    pub output: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            output: 16,
            seed: 3,
        }
    }
}

/// Every knob of a pipeline run. The default is the frozen fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub scene: SceneSpec,
    pub dataset: DatasetConfig,
    /// Feature width of the segmentation network.
    pub features: usize,
    pub embedding: EmbeddingConfig,
    pub circle: CircleLossConfig,
    pub head_train: HeadTrainConfig,
    pub urs: UrsConfig,
    pub mca: McaConfig,
    pub fewshot: FewshotConfig,
    pub shot_selection: ShotSelection,
    pub train: TrainConfig,
    pub mca_train: TrainConfig,
    pub baseline_train: TrainConfig,
    pub pooling: MetricPooling,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            scene: SceneSpec::default(),
            dataset: DatasetConfig::default(),
            features: 32,
            embedding: EmbeddingConfig::default(),
            circle: CircleLossConfig::default(),
            head_train: HeadTrainConfig::default(),
            urs: UrsConfig::default(),
            // 64×64 frames hold a few hundred pixels per shape, so the split
            // term needs a larger scale than full-resolution street scenes
            // to stay off its clip
            mca: McaConfig {
                eta: 2.0,
                ..McaConfig::default()
            },
            fewshot: FewshotConfig::default(),
            shot_selection: ShotSelection::default(),
            train: TrainConfig::default(),
            // the freshly initialized meta channels start with a large
            // reconstruction residual; clipping keeps the first steps from
            // saturating them before the split term can act
            mca_train: TrainConfig {
                iters: 1500,
                lr0: 0.03,
                seed: 5,
                clip_norm: 1.0,
                ..TrainConfig::default()
            },
            baseline_train: TrainConfig {
                iters: 200,
                lr0: 0.01,
                seed: 11,
                ..TrainConfig::default()
            },
            pooling: MetricPooling::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.dataset.scenes < 2 {
            return Err(Error::Config("dataset.scenes: need at least 2 scenes".into()));
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return Err(Error::Config("dataset.test_fraction: must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.test_novel_probability) {
            return Err(Error::Config("dataset.test_novel_probability: must lie in [0, 1]".into()));
        }
        if self.features == 0 || self.embedding.hidden == 0 || self.embedding.output == 0 {
            return Err(Error::Config("features/embedding widths must be positive".into()));
        }
        self.circle.validate()?;
        self.urs.validate()?;
        self.mca.validate()?;
        self.fewshot.validate()?;
        self.train.validate()?;
        self.mca_train.validate()?;
        self.baseline_train.validate()?;
        if self.fewshot.m != self.scene.novel.len() {
            return Err(Error::Config(format!(
                "fewshot.M is {} but scene.novel lists {} shape(s)",
                self.fewshot.m,
                self.scene.novel.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with `paths` removed, so the same
    /// experiment in two directories hashes identically.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    fn split_point(&self) -> usize {
        let n = self.dataset.scenes;
        let test = ((n as f64 * self.dataset.test_fraction).round() as usize).clamp(1, n - 1);
        n - test
    }
}

/// The stages after data generation, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainClosed,
    EmbedTrain,
    Separate,
    AnomalyScore,
    McaFinetune,
    Fewshot,
    Evaluate,
    GradCheck,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenData,
        Stage::TrainClosed,
        Stage::EmbedTrain,
        Stage::Separate,
        Stage::AnomalyScore,
        Stage::McaFinetune,
        Stage::Fewshot,
        Stage::Evaluate,
        Stage::GradCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainClosed => "train-closed",
            Stage::EmbedTrain => "embed-train",
            Stage::Separate => "separate",
            Stage::AnomalyScore => "anomaly-score",
            Stage::McaFinetune => "mca-finetune",
            Stage::Fewshot => "fewshot",
            Stage::Evaluate => "evaluate",
            Stage::GradCheck => "grad-check",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))
    }
}

/// Per-invocation switches that are not part of the experiment definition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOptions {
    /// Also score and evaluate the MaxLogit baseline in `anomaly-score`.
    pub baseline_maxlogit: bool,
    /// Evaluate label maps from this directory instead of the few-shot outputs.
    pub pred_dir: Option<PathBuf>,
}

/// What a stage produced: its headline JSON and whether a check failed.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub summary: Value,
    pub check_failed: bool,
}

impl StageOutcome {
    fn ok(stage: Stage, summary: Value) -> Self {
        Self {
            stage,
            summary,
            check_failed: false,
        }
    }
}

/// Runs one stage.
pub fn run_stage(cfg: &RunConfig, stage: Stage, opts: &StageOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    log::info!("stage {stage} (config {})", &cfg.hash()[..12]);
    match stage {
        Stage::GenData => gen_data(cfg),
        Stage::TrainClosed => stage_train_closed(cfg),
        Stage::EmbedTrain => stage_embed_train(cfg),
        Stage::Separate => stage_separate(cfg),
        Stage::AnomalyScore => stage_anomaly(cfg, opts.baseline_maxlogit),
        Stage::McaFinetune => stage_mca(cfg),
        Stage::Fewshot => stage_fewshot(cfg),
        Stage::Evaluate => stage_evaluate(cfg, opts.pred_dir.as_deref()),
        Stage::GradCheck => stage_grad_check(cfg),
    }
}

/// Runs every stage in order, stopping at the first error.
pub fn run_all(cfg: &RunConfig, opts: &StageOptions) -> Result<Vec<StageOutcome>> {
    Stage::ALL.into_iter().map(|s| run_stage(cfg, s, opts)).collect()
}

// ---------------------------------------------------------------------------
// file helpers

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: stage.name(),
        })
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T> {
    require(path, stage)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_tensor_from(path: &Path, stage: Stage) -> Result<Tensor3> {
    require(path, stage)?;
    read_tensor(path)
}

// ---------------------------------------------------------------------------
// dataset

/// Contents of the dataset index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config_hash: String,
    pub seed: u64,
    pub scene: SceneSpec,
    pub known: Vec<ShapeKind>,
    pub novel: Vec<ShapeKind>,
    /// Background plus known classes.
    pub n_closed: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// A dataset frame as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub image: Tensor3,
    /// Ground truth including novel labels.
    pub gt: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

impl Dataset {
    pub fn novel_labels(&self) -> BTreeSet<u8> {
        (0..self.index.novel.len()).map(|i| (self.index.n_closed + i) as u8).collect()
    }

    pub fn known_labels(&self) -> BTreeSet<u8> {
        (0..self.index.n_closed as u8).collect()
    }
}

fn index_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.dataset.join("index.json")
}

fn frame_paths(root: &Path, split: &str, id: &str) -> (PathBuf, PathBuf) {
    let dir = root.join(split);
    (dir.join(format!("{id}.ppm")), dir.join(format!("{id}.pgm")))
}

fn gen_data(cfg: &RunConfig) -> Result<StageOutcome> {
    let root = &cfg.paths.dataset;
    ensure_dir(&root.join("train"))?;
    ensure_dir(&root.join("test"))?;
    let split = cfg.split_point();
    let test_spec = SceneSpec {
        novel_probability: cfg.dataset.test_novel_probability,
        ..cfg.scene.clone()
    };
    let width = cfg.dataset.scenes.saturating_sub(1).to_string().len().max(4);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..cfg.dataset.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.dataset.seed);
        rng.set_stream(i as u64);
        let is_test = i >= split;
        let scene = gen_scene(if is_test { &test_spec } else { &cfg.scene }, &mut rng)?;
        let id = format!("{i:0width$}");
        let split_name = if is_test { "test" } else { "train" };
        let (ppm, pgm) = frame_paths(root, split_name, &id);
        write_image_ppm(&ppm, &scene.image)?;
        write_label_pgm(&pgm, &scene.labels)?;
        if is_test { &mut test } else { &mut train }.push(id);
    }
    let index = DatasetIndex {
        config_hash: cfg.hash(),
        seed: cfg.dataset.seed,
        scene: cfg.scene.clone(),
        known: cfg.scene.known.clone(),
        novel: cfg.scene.novel.clone(),
        n_closed: cfg.scene.closed_classes(),
        train,
        test,
    };
    let value = serde_json::to_value(&index)?;
    write_json(&index_path(cfg), &value)?;
    Ok(StageOutcome::ok(
        Stage::GenData,
        json!({"scenes": cfg.dataset.scenes, "train": index.train.len(), "test": index.test.len()}),
    ))
}

/// Reads the index and both splits.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let index: DatasetIndex = read_json(&index_path(cfg), Stage::GenData)?;
    if index.novel.len() != cfg.fewshot.m {
        return Err(Error::Config(format!(
            "dataset has {} novel class(es) but fewshot.M is {}",
            index.novel.len(),
            cfg.fewshot.m
        )));
    }
    let load = |split: &str, ids: &[String]| -> Result<Vec<Frame>> {
        ids.iter()
            .map(|id| {
                let (ppm, pgm) = frame_paths(&cfg.paths.dataset, split, id);
                require(&ppm, Stage::GenData)?;
                require(&pgm, Stage::GenData)?;
                let image = read_image_ppm(&ppm)?;
                let gt = read_label_pgm(&pgm)?;
                if image.height() != gt.height() || image.width() != gt.width() {
                    return Err(Error::Shape(format!("frame {id}: image and labels differ in size")));
                }
                Ok(Frame {
                    id: id.clone(),
                    image,
                    gt,
                })
            })
            .collect()
    };
    let train = load("train", &index.train)?;
    let test = load("test", &index.test)?;
    Ok(Dataset { index, train, test })
}

fn closed_samples(ds: &Dataset) -> Vec<Sample> {
    ds.train
        .iter()
        .map(|f| (f.image.clone(), training_labels(&f.gt, ds.index.n_closed)))
        .collect()
}

// ---------------------------------------------------------------------------
// network checkpoints

fn save_net(dir: &Path, net: &ToyNetParams, manifest: Value) -> Result<()> {
    ensure_dir(dir)?;
    let mut shapes = serde_json::Map::new();
    for (name, t) in net.to_tensors() {
        write_tensor(dir.join(format!("{name}.tnsr")), &t)?;
        shapes.insert(name.into(), json!([t.channels(), t.height(), t.width()]));
    }
    let mut m = manifest;
    m["shapes"] = Value::Object(shapes);
    write_json(&dir.join("manifest.json"), &m)
}

fn load_net(dir: &Path, stage: Stage) -> Result<ToyNetParams> {
    let blocks = BLOCK_NAMES
        .iter()
        .map(|name| read_tensor_from(&dir.join(format!("{name}.tnsr")), stage))
        .collect::<Result<Vec<_>>>()?;
    ToyNetParams::from_tensors(&blocks)
}

fn closed_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints.join("closed")
}

fn head_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints.join("head")
}

fn mca_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints.join("mca")
}

fn finetune_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoints.join("finetune")
}

fn stage_train_closed(cfg: &RunConfig) -> Result<StageOutcome> {
    let ds = load_dataset(cfg)?;
    let samples = closed_samples(&ds);
    let n_closed = ds.index.n_closed;
    let (net, log) = train_closed(&samples, n_closed, cfg.features, &cfg.train)?;
    let mut counts = ConfusionCounts::new();
    for (image, labels) in &samples {
        let (_, u) = net.forward(image)?;
        counts.add(&argmax_labels(&u, n_closed), labels)?;
    }
    let train_report = counts.report(&ds.known_labels(), &BTreeSet::new());
    let final_loss = log.final_loss().unwrap_or(f64::NAN);
    save_net(
        &closed_dir(cfg),
        &net,
        json!({
            "config_hash": cfg.hash(),
            "iters": cfg.train.iters,
            "seed": cfg.train.seed,
            "final_loss": final_loss,
            "train_miou_known": train_report.miou_old,
        }),
    )?;
    Ok(StageOutcome::ok(
        Stage::TrainClosed,
        json!({"final_loss": final_loss, "train_miou_known": train_report.miou_old}),
    ))
}

// ---------------------------------------------------------------------------
// projection head and prototypes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadManifest {
    config_hash: String,
    input: usize,
    hidden: usize,
    output: usize,
    seed: u64,
    iters: usize,
    final_loss: f64,
    classes: Vec<u8>,
    counts: Vec<usize>,
}

fn stage_embed_train(cfg: &RunConfig) -> Result<StageOutcome> {
    let ds = load_dataset(cfg)?;
    let closed = load_net(&closed_dir(cfg), Stage::TrainClosed)?;
    let features: Vec<(Tensor3, LabelMap)> = closed_samples(&ds)
        .into_iter()
        .map(|(image, labels)| Ok((closed.forward(&image)?.0, labels)))
        .collect::<Result<_>>()?;
    let classes: Vec<u8> = ds.known_labels().into_iter().collect();
    let samples = region_samples(&features, &classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.embedding.seed);
    let init = ProjectionHead::init(closed.dims().features, cfg.embedding.hidden, cfg.embedding.output, &mut rng);
    let (head, losses) = train_head(&samples, &init, &cfg.circle, &cfg.head_train)?;
    let bank = known_prototypes(&features, &classes, &head)?;

    let dir = head_dir(cfg);
    ensure_dir(&dir)?;
    let (w1, b1) = head.layer1();
    let (w2, b2) = head.layer2();
    let (i, h, o) = (head.input_dim(), head.hidden_dim(), head.output_dim());
    write_tensor(dir.join("layer1.weight.tnsr"), &Tensor3::from_f64(1, h, i, w1)?)?;
    write_tensor(dir.join("layer1.bias.tnsr"), &Tensor3::from_f64(1, 1, h, b1)?)?;
    write_tensor(dir.join("layer2.weight.tnsr"), &Tensor3::from_f64(1, o, h, w2)?)?;
    write_tensor(dir.join("layer2.bias.tnsr"), &Tensor3::from_f64(1, 1, o, b2)?)?;
    let proto: Vec<f64> = bank.iter().flat_map(|(_, e)| e.0.iter().copied()).collect();
    write_tensor(dir.join("prototypes.tnsr"), &Tensor3::from_f64(1, bank.len(), o, &proto)?)?;
    let classes = bank.classes();
    let manifest = HeadManifest {
        config_hash: cfg.hash(),
        input: i,
        hidden: h,
        output: o,
        seed: cfg.embedding.seed,
        iters: cfg.head_train.iters,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        counts: classes.iter().map(|&c| bank.count(c).unwrap_or(0)).collect(),
        classes,
    };
    write_json(&dir.join("manifest.json"), &serde_json::to_value(&manifest)?)?;
    Ok(StageOutcome::ok(
        Stage::EmbedTrain,
        json!({"final_loss": manifest.final_loss, "regions": samples.len()}),
    ))
}

fn load_head(cfg: &RunConfig) -> Result<(ProjectionHead, PrototypeBank)> {
    let dir = head_dir(cfg);
    let stage = Stage::EmbedTrain;
    let m: HeadManifest = read_json(&dir.join("manifest.json"), stage)?;
    let mut params = Vec::with_capacity(ProjectionHead::num_params(m.input, m.hidden, m.output));
    for name in ["layer1.weight", "layer1.bias", "layer2.weight", "layer2.bias"] {
        params.extend(read_tensor_from(&dir.join(format!("{name}.tnsr")), stage)?.to_f64());
    }
    let head = ProjectionHead::from_params(m.input, m.hidden, m.output, params)?;
    let protos = read_tensor_from(&dir.join("prototypes.tnsr"), stage)?;
    if protos.height() != m.classes.len() || protos.width() != m.output || m.counts.len() != m.classes.len() {
        return Err(Error::format("prototypes", "shape disagrees with the head manifest"));
    }
    let data = protos.to_f64();
    let bank = PrototypeBank::new(m.classes.iter().enumerate().map(|(k, &c)| {
        (
            c,
            Embedding(data[k * m.output..(k + 1) * m.output].to_vec()),
            m.counts[k],
        )
    }))?;
    Ok((head, bank))
}

// ---------------------------------------------------------------------------
// region separation and anomaly scoring

fn separate_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output.join("separate")
}

fn anomaly_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output.join("anomaly")
}

fn regions_to_tensor(regions: &RegionSet) -> Tensor3 {
    let ids: Vec<f64> = regions
        .owner_map()
        .into_iter()
        .map(|o| o.map_or(0.0, |i| (i + 1) as f64))
        .collect();
    Tensor3::from_f64(1, regions.height(), regions.width(), &ids).expect("finite ids")
}

fn regions_from_tensor(t: &Tensor3) -> Result<RegionSet> {
    if t.channels() != 1 {
        return Err(Error::format("regions", format!("expected 1 channel, got {}", t.channels())));
    }
    let mut ids = Vec::with_capacity(t.plane_len());
    for &v in t.data() {
        if !(v >= 0.0 && v.fract() == 0.0) {
            return Err(Error::format("regions", format!("invalid region id {v}")));
        }
        ids.push(v as usize);
    }
    let count = ids.iter().copied().max().unwrap_or(0);
    let regions = (1..=count)
        .map(|r| BitMask::new(t.height(), t.width(), ids.iter().map(|&i| i == r).collect()))
        .collect::<Result<Vec<_>>>()?;
    RegionSet::new(t.height(), t.width(), regions)
}

fn stage_separate(cfg: &RunConfig) -> Result<StageOutcome> {
    let ds = load_dataset(cfg)?;
    let closed = load_net(&closed_dir(cfg), Stage::TrainClosed)?;
    let dir = separate_dir(cfg);
    ensure_dir(&dir)?;
    let mut frames = Vec::with_capacity(ds.test.len());
    for f in &ds.test {
        let (_, u) = closed.forward(&f.image)?;
        let edges = edge_map(&f.image, &u, &cfg.urs)?;
        let regions = separate_regions(&f.image, &u, &cfg.urs)?;
        write_mask_pgm(dir.join(format!("{}.edges.pgm", f.id)), &edges)?;
        write_tensor(dir.join(format!("{}.regions.tnsr", f.id)), &regions_to_tensor(&regions))?;
        write_label_pgm(
            dir.join(format!("{}.regions.pgm", f.id)),
            &LabelMap::new(regions.height(), regions.width(), regions.to_id_bytes())?,
        )?;
        frames.push(json!({"id": f.id, "regions": regions.len()}));
    }
    let total: u64 = frames.iter().map(|v| v["regions"].as_u64().unwrap_or(0)).sum();
    write_json(
        &dir.join("separate.json"),
        &json!({"config_hash": cfg.hash(), "frames": frames}),
    )?;
    Ok(StageOutcome::ok(
        Stage::Separate,
        json!({"frames": ds.test.len(), "regions": total}),
    ))
}

/// Pixels of any novel class.
fn novel_truth(gt: &LabelMap, n_closed: usize) -> BitMask {
    BitMask::new(
        gt.height(),
        gt.width(),
        gt.labels().iter().map(|&l| usize::from(l) >= n_closed && l != crate::tensor_io::IGNORE_LABEL).collect(),
    )
    .expect("same size")
}

fn stage_anomaly(cfg: &RunConfig, baseline: bool) -> Result<StageOutcome> {
    let ds = load_dataset(cfg)?;
    let closed = load_net(&closed_dir(cfg), Stage::TrainClosed)?;
    let (head, bank) = load_head(cfg)?;
    let sep = separate_dir(cfg);
    let dir = anomaly_dir(cfg);
    ensure_dir(&dir)?;
    let mut raml: Vec<AnomalyMap> = Vec::new();
    let mut maxlogit: Vec<AnomalyMap> = Vec::new();
    let mut truths = Vec::new();
    for f in &ds.test {
        let (feat, u) = closed.forward(&f.image)?;
        let regions = regions_from_tensor(&read_tensor_from(&sep.join(format!("{}.regions.tnsr", f.id)), Stage::Separate)?)?;
        if regions.height() != f.gt.height() || regions.width() != f.gt.width() {
            return Err(Error::Shape(format!("frame {}: stored regions differ in size", f.id)));
        }
        let probs = regions
            .iter()
            .map(|r| region_anomaly_prob(&embed_region(&feat, r, &head)?, &bank))
            .collect::<Result<Vec<_>>>()?;
        let map = normalize_map(&uncertainty_map(&u, &regions, &probs)?);
        let t = map.to_tensor();
        write_tensor(dir.join(format!("{}.raml.tnsr", f.id)), &t)?;
        write_heat_pgm(dir.join(format!("{}.raml.pgm", f.id)), &t)?;
        raml.push(map);
        if baseline {
            let ml = maxlogit_map(&u)?;
            let t = ml.to_tensor();
            write_tensor(dir.join(format!("{}.maxlogit.tnsr", f.id)), &t)?;
            write_heat_pgm(dir.join(format!("{}.maxlogit.pgm", f.id)), &t)?;
            maxlogit.push(ml);
        }
        truths.push(novel_truth(&f.gt, ds.index.n_closed));
    }
    let valid: Vec<BitMask> = truths.iter().map(|t| BitMask::full(t.height(), t.width())).collect();
    let metrics = |maps: &[AnomalyMap]| -> Result<AnomalyMetrics> {
        let frames: Vec<_> = maps.iter().zip(&truths).zip(&valid).map(|((m, t), v)| (m, t, v)).collect();
        evaluate_maps(&frames, cfg.pooling)
    };
    let mut out = json!({
        "config_hash": cfg.hash(),
        "pooling": cfg.pooling,
        "raml": metrics(&raml)?,
    });
    if baseline {
        out["maxlogit"] = serde_json::to_value(metrics(&maxlogit)?)?;
    }
    write_json(&dir.join("anomaly.json"), &out)?;
    Ok(StageOutcome::ok(Stage::AnomalyScore, out))
}

// ---------------------------------------------------------------------------
// meta-channel fine-tuning and the naive baseline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShotClass {
    label: u8,
    shape: ShapeKind,
    shots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShotsFile {
    config_hash: String,
    classes: Vec<ShotClass>,
}

fn choose_shots(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<ShotClass>> {
    ds.index
        .novel
        .iter()
        .enumerate()
        .map(|(i, &shape)| {
            let label = (ds.index.n_closed + i) as u8;
            let candidates: Vec<(usize, usize)> = ds
                .train
                .iter()
                .enumerate()
                .map(|(k, f)| (k, f.gt.labels().iter().filter(|&&l| l == label).count()))
                .collect();
            let picked = select_shots(&candidates, cfg.fewshot.l, cfg.shot_selection)?;
            Ok(ShotClass {
                label,
                shape,
                shots: picked.into_iter().map(|k| ds.train[k].id.clone()).collect(),
            })
        })
        .collect()
}

fn frame_by_id<'a>(frames: &'a [Frame], id: &str) -> Result<&'a Frame> {
    frames
        .iter()
        .find(|f| f.id == id)
        .ok_or_else(|| Error::format("shots", format!("shot '{id}' is not a training frame")))
}

fn stage_mca(cfg: &RunConfig) -> Result<StageOutcome> {
    let ds = load_dataset(cfg)?;
    let closed = load_net(&closed_dir(cfg), Stage::TrainClosed)?;
    let classes = choose_shots(cfg, &ds)?;
    let n_closed = ds.index.n_closed;

    // meta-channel fine-tuning sees the shots with known labels only
    let mut shot_ids: Vec<&str> = classes.iter().flat_map(|c| c.shots.iter().map(String::as_str)).collect();
    shot_ids.sort_unstable();
    shot_ids.dedup();
    let shot_samples: Vec<Sample> = shot_ids
        .iter()
        .map(|id| {
            let f = frame_by_id(&ds.train, id)?;
            Ok((f.image.clone(), training_labels(&f.gt, n_closed)))
        })
        .collect::<Result<_>>()?;
    let (wide, breakdown) = finetune_mca(&closed, &closed_samples(&ds), &shot_samples, &cfg.mca, &cfg.mca_train)?;
    let hash = cfg.hash();
    save_net(
        &mca_dir(cfg),
        &wide,
        json!({
            "config_hash": hash,
            "iters": cfg.mca_train.iters,
            "seed": cfg.mca_train.seed,
            "K": cfg.mca.k,
            "final_total": breakdown.last().map(|b| b.total),
        }),
    )?;
    write_json(
        &mca_dir(cfg).join("shots.json"),
        &serde_json::to_value(ShotsFile {
            config_hash: hash.clone(),
            classes: classes.clone(),
        })?,
    )?;
    let out_dir = cfg.paths.output.join("mca");
    ensure_dir(&out_dir)?;
    let mut log_text = String::new();
    for (iter, b) in breakdown.iter().enumerate() {
        log_text.push_str(
            &json!({"iter": iter, "seg": b.seg, "inter": b.inter, "split": b.split, "rec": b.rec, "total": b.total})
                .to_string(),
        );
        log_text.push('\n');
    }
    let log_path = out_dir.join("mca_log.jsonl");
    fs::write(&log_path, log_text).map_err(|e| Error::io(&log_path, e))?;

    // the baseline sees the shots with novel labels only
    let ft_samples: Vec<Sample> = classes
        .iter()
        .flat_map(|c| c.shots.iter().map(move |id| (c.label, id)))
        .map(|(label, id)| {
            let f = frame_by_id(&ds.train, id)?;
            let labels = f
                .gt
                .labels()
                .iter()
                .map(|&l| if l == label { l } else { crate::tensor_io::IGNORE_LABEL })
                .collect();
            Ok((f.image.clone(), LabelMap::new(f.gt.height(), f.gt.width(), labels)?))
        })
        .collect::<Result<_>>()?;
    let (ft, ft_log) = finetune_baseline(&closed, &ft_samples, classes.len(), &cfg.baseline_train)?;
    save_net(
        &finetune_dir(cfg),
        &ft,
        json!({
            "config_hash": hash,
            "iters": cfg.baseline_train.iters,
            "seed": cfg.baseline_train.seed,
            "final_loss": ft_log.final_loss(),
        }),
    )?;
    Ok(StageOutcome::ok(
        Stage::McaFinetune,
        json!({
            "final": breakdown.last(),
            "shots": classes.iter().map(|c| json!({"label": c.label, "shots": c.shots})).collect::<Vec<_>>(),
        }),
    ))
}

// ---------------------------------------------------------------------------
// few-shot segmentation and evaluation

/// Prediction sets written by the few-shot stage.
pub const PREDICTION_SETS: [&str; 3] = ["raml", "closed", "finetune"];

fn fewshot_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output.join("fewshot")
}

fn stage_fewshot(cfg: &RunConfig) -> Result<StageOutcome> {
    let ds = load_dataset(cfg)?;
    let closed = load_net(&closed_dir(cfg), Stage::TrainClosed)?;
    let wide = load_net(&mca_dir(cfg), Stage::McaFinetune)?;
    let ft = load_net(&finetune_dir(cfg), Stage::McaFinetune)?;
    let (head, _) = load_head(cfg)?;
    let shots: ShotsFile = read_json(&mca_dir(cfg).join("shots.json"), Stage::McaFinetune)?;
    let n_closed = ds.index.n_closed;
    let m = shots.classes.len();
    if ft.dims().outputs != n_closed + m || wide.dims().outputs != n_closed + cfg.mca.k {
        return Err(Error::format("checkpoints", "fine-tuned head widths disagree with the configuration"));
    }

    // channel selection from the meta outputs on the shots
    let mut shot_meta = Vec::new();
    let mut shot_features = Vec::new();
    for class in &shots.classes {
        for id in &class.shots {
            let f = frame_by_id(&ds.train, id)?;
            let (_, u) = wide.forward(&f.image)?;
            let mask = f.gt.mask_of(class.label);
            shot_meta.push((MetaOutput::from_logits(&u, cfg.mca.activation), mask.clone()));
            shot_features.push((id.as_str(), closed.forward(&f.image)?.0, mask));
        }
    }
    let selected = candidate_channels_union(&shot_meta, n_closed, cfg.mca.kappa, cfg.mca.candidate_mode)?;
    let l = cfg.fewshot.l;
    let per_class: Vec<Vec<Shot<'_>>> = shot_features
        .chunks(l)
        .map(|chunk| {
            chunk
                .iter()
                .map(|(id, features, mask)| Shot { id, features, mask })
                .collect()
        })
        .collect();
    let protos = novel_prototypes(&per_class, &head)?;

    let dir = fewshot_dir(cfg);
    for set in PREDICTION_SETS {
        ensure_dir(&dir.join(set))?;
    }
    let (mut accepted, mut proposed) = (0usize, 0usize);
    for f in &ds.test {
        let (feat, u) = closed.forward(&f.image)?;
        let closed_pred = argmax_labels(&u, n_closed);
        let (_, uw) = wide.forward(&f.image)?;
        let meta = MetaOutput::from_logits(&uw, cfg.mca.activation);
        let regions = regions_for_channels(&meta, n_closed, &selected, cfg.urs.connectivity, cfg.urs.min_region_area);
        let decisions = regions
            .iter()
            .map(|r| {
                let sims = region_similarities(&embed_region(&feat, r, &head)?, &protos)?;
                Ok(classify_region(&sims, cfg.fewshot.theta_novel))
            })
            .collect::<Result<Vec<Decision>>>()?;
        proposed += decisions.len();
        accepted += decisions.iter().filter(|d| matches!(d, Decision::Novel(_))).count();
        let pred = assemble_segmentation(&closed_pred, &regions, &decisions, n_closed)?;
        write_label_pgm(dir.join("raml").join(format!("{}.pgm", f.id)), &pred)?;
        write_label_pgm(dir.join("closed").join(format!("{}.pgm", f.id)), &closed_pred)?;
        let (_, uf) = ft.forward(&f.image)?;
        write_label_pgm(
            dir.join("finetune").join(format!("{}.pgm", f.id)),
            &argmax_labels(&uf, n_closed + m),
        )?;
    }
    let out = json!({
        "config_hash": cfg.hash(),
        "selected_channels": selected,
        "prototype_sources": protos.sources(),
        "regions_proposed": proposed,
        "regions_accepted": accepted,
    });
    write_json(&dir.join("fewshot.json"), &out)?;
    Ok(StageOutcome::ok(Stage::Fewshot, out))
}

/// mIoU of the label maps `dir/{id}.pgm` against the test split.
pub fn evaluate_dir(ds: &Dataset, dir: &Path, producer: Stage) -> Result<MiouReport> {
    let mut counts = ConfusionCounts::new();
    for f in &ds.test {
        let path = dir.join(format!("{}.pgm", f.id));
        require(&path, producer)?;
        counts.add(&read_label_pgm(&path)?, &f.gt)?;
    }
    Ok(counts.report(&ds.known_labels(), &ds.novel_labels()))
}

fn stage_evaluate(cfg: &RunConfig, pred_dir: Option<&Path>) -> Result<StageOutcome> {
    let ds = load_dataset(cfg)?;
    let hash = cfg.hash();
    let (file, raw) = match pred_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "prediction directory not found")));
            }
            let report = evaluate_dir(&ds, dir, Stage::Fewshot)?;
            (
                json!({"config_hash": hash, "report": report.to_percent_json()}),
                json!({"report": report}),
            )
        }
        None => {
            let mut file = json!({"config_hash": hash});
            let mut raw = json!({});
            for set in PREDICTION_SETS {
                let report = evaluate_dir(&ds, &fewshot_dir(cfg).join(set), Stage::Fewshot)?;
                file[set] = report.to_percent_json();
                raw[set] = serde_json::to_value(&report)?;
            }
            (file, raw)
        }
    };
    write_json(&cfg.paths.output.join("evaluate.json"), &file)?;
    Ok(StageOutcome::ok(Stage::Evaluate, raw))
}

// ---------------------------------------------------------------------------
// gradient verification

fn stage_grad_check(cfg: &RunConfig) -> Result<StageOutcome> {
    let reports = run_suite(&cfg.grad_check)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let out = json!({
        "config_hash": cfg.hash(),
        "config": cfg.grad_check,
        "checks": reports.len(),
        "failed": failed,
        "max_rel_error": worst,
        "reports": reports,
    });
    write_json(&cfg.paths.output.join("grad_check.json"), &out)?;
    Ok(StageOutcome {
        stage: Stage::GradCheck,
        summary: json!({"checks": reports.len(), "failed": failed, "max_rel_error": worst}),
        check_failed: failed > 0,
    })
}
