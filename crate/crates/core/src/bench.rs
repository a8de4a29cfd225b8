//! Small-scale experiment harness: synthetic classification tasks with
//! controlled distribution shifts, a pool of small MLPs finetuned from one
//! shared initialization, and in/out-of-distribution evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seeds::derive_seed;
use crate::soups::{EvalError, Evaluator, ModelPool, PoolMember, SoupError};
use crate::tensor_store::{self, CheckpointError, Metadata, ParameterSet, TensorError};

pub const TASK_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TASK_JSON: &str = include_str!("../configs/task.v1.json");
pub const REFERENCE_GRID_JSON: &str = include_str!("../configs/reference_grid.v1.json");

const TASK_FILE: &str = "task.json";
const POOL_FILE: &str = "pool.json";
const EVAL_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid training grid: {0}")]
    InvalidGrid(String),
    #[error("training grid is empty")]
    EmptyGrid,
    #[error("every config diverged: {0}")]
    AllDiverged(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Soup(#[from] SoupError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| BenchError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Task description

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    /// One isotropic Gaussian per class. Centers are drawn as
    /// `separation · N(0, I)` unless given explicitly.
    GaussianBlobs {
        separation: f64,
        std: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        centers: Option<Vec<Vec<f64>>>,
    },
    /// Two interleaved spirals in the first two coordinates; remaining
    /// coordinates carry pure noise.
    TwoSpirals { turns: f64, noise: f64 },
}

impl Generator {
    pub fn id(&self) -> &'static str {
        match self {
            Generator::GaussianBlobs { .. } => "gaussian-blobs",
            Generator::TwoSpirals { .. } => "two-spirals",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShiftKind {
    /// Rotation of every coordinate pair (0,1), (2,3), ... by `degrees`.
    Rotation { degrees: f64 },
    /// Additive Gaussian noise.
    Noise { sigma: f64 },
    /// Each feature zeroed independently with probability `rate`.
    Dropout { rate: f64 },
    /// Global multiplicative scaling; 1 is the identity.
    Scale { factor: f64 },
    /// `(1-alpha)·x + alpha·x_j` for a random partner `j`, label of `x` kept.
    MixupBlur { alpha: f64 },
}

impl ShiftKind {
    pub fn is_identity(&self) -> bool {
        match *self {
            ShiftKind::Rotation { degrees } => degrees == 0.0,
            ShiftKind::Noise { sigma } => sigma == 0.0,
            ShiftKind::Dropout { rate } => rate == 0.0,
            ShiftKind::Scale { factor } => factor == 1.0,
            ShiftKind::MixupBlur { alpha } => alpha == 0.0,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            ShiftKind::Rotation { degrees } => degrees.is_finite(),
            ShiftKind::Noise { sigma } => sigma.is_finite() && sigma >= 0.0,
            ShiftKind::Dropout { rate } => (0.0..=1.0).contains(&rate),
            ShiftKind::Scale { factor } => factor.is_finite(),
            ShiftKind::MixupBlur { alpha } => (0.0..=1.0).contains(&alpha),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("bad shift parameters {self:?}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: ShiftKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub version: u32,
    pub generator: Generator,
    pub input_dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub shifts: Vec<ShiftSpec>,
}

impl TaskSpec {
    pub fn default_v1() -> Self {
        serde_json::from_str(DEFAULT_TASK_JSON).expect("bundled task config parses")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        read_json(path.as_ref())
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidTask(m));
        if self.version != TASK_FORMAT_VERSION {
            return bad(format!("unsupported task version {}", self.version));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        for (name, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n < self.classes {
                return bad(format!("{name}={n} is smaller than the class count"));
            }
        }
        match &self.generator {
            Generator::GaussianBlobs {
                separation,
                std,
                centers,
            } => {
                if !(separation.is_finite() && std.is_finite() && *std >= 0.0) {
                    return bad("gaussian-blobs needs finite separation and std >= 0".into());
                }
                if let Some(c) = centers {
                    if c.len() != self.classes
                        || c.iter().any(|row| {
                            row.len() != self.input_dim || row.iter().any(|v| !v.is_finite())
                        })
                    {
                        return bad("explicit centers must be classes x input_dim finite values".into());
                    }
                }
            }
            Generator::TwoSpirals { turns, noise } => {
                if self.classes != 2 || self.input_dim < 2 {
                    return bad("two-spirals needs 2 classes and input_dim >= 2".into());
                }
                if !(turns.is_finite() && noise.is_finite() && *noise >= 0.0) {
                    return bad("two-spirals needs finite turns and noise >= 0".into());
                }
            }
        }
        let mut ids = BTreeSet::new();
        for s in &self.shifts {
            if s.id.is_empty() || s.id == "clean" || s.id == "val" || !ids.insert(&s.id) {
                return bad(format!("shift id {:?} is empty, reserved or repeated", s.id));
            }
            if !s
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return bad(format!("shift id {:?} must be [A-Za-z0-9_-]", s.id));
            }
            s.kind.validate().map_err(BenchError::InvalidTask)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Materialized data

/// A labelled dataset: `n` rows of `dim` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub dim: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Accuracy of always predicting the most frequent class.
    pub fn majority_rate(&self, classes: usize) -> f64 {
        let max = self.class_counts(classes).into_iter().max().unwrap_or(0);
        max as f64 / self.len() as f64
    }

    fn to_params(&self) -> Result<ParameterSet, TensorError> {
        ParameterSet::from_entries([
            ("features".to_string(), vec![self.len(), self.dim], self.features.clone()),
            (
                "labels".to_string(),
                vec![self.len()],
                self.labels.iter().map(|&l| l as f32).collect(),
            ),
        ])
    }

    fn from_params(ps: &ParameterSet, classes: usize) -> Result<Self, String> {
        let f = ps.get("features").ok_or("missing tensor \"features\"")?;
        let l = ps.get("labels").ok_or("missing tensor \"labels\"")?;
        let (n, dim) = match f.shape() {
            [n, d] => (*n, *d),
            s => return Err(format!("features must be 2-d, got shape {s:?}")),
        };
        if l.shape() != [n] {
            return Err(format!("labels shape {:?} does not match {n} rows", l.shape()));
        }
        let labels = l
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                    Ok(v as u32)
                } else {
                    Err(format!("label {v} is not a class index below {classes}"))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            features: f.data().to_vec(),
            labels,
            dim,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedSplit {
    pub spec: ShiftSpec,
    pub split: Split,
}

/// A materialized task: train/val/test splits plus one shifted copy of the
/// test split per entry of the shift suite.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBundle {
    pub spec: TaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub shifts: Vec<ShiftedSplit>,
}

fn sample_generator(spec: &TaskSpec, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u32>) {
    let d = spec.input_dim;
    let c = spec.classes;
    // balanced labels: earlier classes take the remainder
    let mut labels: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();
    labels.shuffle(rng);
    let mut features = vec![0.0; n * d];
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    match &spec.generator {
        Generator::GaussianBlobs {
            separation,
            std,
            centers,
        } => {
            let centers: Vec<Vec<f64>> = match centers {
                Some(c) => c.clone(),
                None => {
                    // centers come from their own stream so every split shares them
                    let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "centers", 0));
                    (0..c)
                        .map(|_| (0..d).map(|_| separation * std_normal.sample(&mut crng)).collect())
                        .collect()
                }
            };
            for (i, &l) in labels.iter().enumerate() {
                for j in 0..d {
                    features[i * d + j] = centers[l as usize][j] + std * std_normal.sample(rng);
                }
            }
        }
        Generator::TwoSpirals { turns, noise } => {
            for (i, &l) in labels.iter().enumerate() {
                let t: f64 = rng.random::<f64>().sqrt();
                let angle = t * turns * std::f64::consts::TAU + f64::from(l) * std::f64::consts::PI;
                features[i * d] = t * angle.cos() + noise * std_normal.sample(rng);
                features[i * d + 1] = t * angle.sin() + noise * std_normal.sample(rng);
                for j in 2..d {
                    features[i * d + j] = noise * std_normal.sample(rng);
                }
            }
        }
    }
    (features, labels)
}

fn round_features(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Applies a shift to a clean split. Labels, size and order are preserved;
/// identity shifts return an exact copy.
pub fn apply_shift(clean: &Split, shift: &ShiftKind, seed: u64) -> Split {
    if shift.is_identity() {
        return clean.clone();
    }
    let d = clean.dim;
    let n = clean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = clean.features.iter().map(|&v| f64::from(v)).collect();
    let mut out = x.clone();
    match *shift {
        ShiftKind::Rotation { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            for i in 0..n {
                for p in (0..d.saturating_sub(1)).step_by(2) {
                    let (a, b) = (x[i * d + p], x[i * d + p + 1]);
                    out[i * d + p] = c * a - s * b;
                    out[i * d + p + 1] = s * a + c * b;
                }
            }
        }
        ShiftKind::Noise { sigma } => {
            let normal = Normal::new(0.0, sigma).unwrap();
            for v in &mut out {
                *v += normal.sample(&mut rng);
            }
        }
        ShiftKind::Dropout { rate } => {
            for v in &mut out {
                if rng.random::<f64>() < rate {
                    *v = 0.0;
                }
            }
        }
        ShiftKind::Scale { factor } => {
            for v in &mut out {
                *v *= factor;
            }
        }
        ShiftKind::MixupBlur { alpha } => {
            for i in 0..n {
                let j = rng.random_range(0..n);
                for k in 0..d {
                    out[i * d + k] = (1.0 - alpha) * x[i * d + k] + alpha * x[j * d + k];
                }
            }
        }
    }
    Split {
        features: round_features(&out),
        labels: clean.labels.clone(),
        dim: d,
    }
}

/// Generates every split of a task. Deterministic in `spec`.
pub fn make_task(spec: &TaskSpec) -> Result<TaskBundle, BenchError> {
    spec.validate()?;
    let d = spec.input_dim;
    let n_pool = spec.n_train + spec.n_val;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "make-task", 0));
    let (x, y) = sample_generator(spec, n_pool, &mut rng);
    // train and val are disjoint slices of one shuffled draw
    let split = |lo: usize, hi: usize| Split {
        features: round_features(&x[lo * d..hi * d]),
        labels: y[lo..hi].to_vec(),
        dim: d,
    };
    let train = split(0, spec.n_train);
    let val = split(spec.n_train, n_pool);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "make-task", 1));
    let (tx, ty) = sample_generator(spec, spec.n_test, &mut rng);
    let test = Split {
        features: round_features(&tx),
        labels: ty,
        dim: d,
    };
    let shifts = spec
        .shifts
        .iter()
        .enumerate()
        .map(|(i, s)| ShiftedSplit {
            spec: s.clone(),
            split: apply_shift(&test, &s.kind, derive_seed(spec.seed, "shift", i as u64)),
        })
        .collect();
    Ok(TaskBundle {
        spec: spec.clone(),
        train,
        val,
        test,
        shifts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShiftFile {
    id: String,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskDescriptor {
    format_version: u32,
    spec: TaskSpec,
    train: String,
    val: String,
    test: String,
    shifts: Vec<ShiftFile>,
}

fn save_split(split: &Split, role: &str, path: &Path) -> Result<(), BenchError> {
    let mut meta = Metadata::new();
    meta.insert("role".into(), role.into());
    tensor_store::save(&split.to_params()?, &meta, path).map_err(|source| BenchError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

fn load_split(path: &Path, spec: &TaskSpec) -> Result<Split, BenchError> {
    let (ps, _) = tensor_store::load(path).map_err(|source| BenchError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    let split = Split::from_params(&ps, spec.classes)
        .map_err(|m| BenchError::Bundle(format!("{}: {m}", path.display())))?;
    if split.dim != spec.input_dim {
        return Err(BenchError::Bundle(format!(
            "{}: feature dim {} does not match input_dim {}",
            path.display(),
            split.dim,
            spec.input_dim
        )));
    }
    Ok(split)
}

impl TaskBundle {
    /// Writes `task.json` plus one checkpoint-format file per split into
    /// `dir` (created if missing). Returns the descriptor path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf, BenchError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut desc = TaskDescriptor {
            format_version: TASK_FORMAT_VERSION,
            spec: self.spec.clone(),
            train: "train.ckpt".into(),
            val: "val.ckpt".into(),
            test: "test.ckpt".into(),
            shifts: Vec::new(),
        };
        save_split(&self.train, "train", &dir.join(&desc.train))?;
        save_split(&self.val, "val", &dir.join(&desc.val))?;
        save_split(&self.test, "test", &dir.join(&desc.test))?;
        for s in &self.shifts {
            let file = format!("shift-{}.ckpt", s.spec.id);
            save_split(&s.split, &s.spec.id, &dir.join(&file))?;
            desc.shifts.push(ShiftFile {
                id: s.spec.id.clone(),
                file,
            });
        }
        let path = dir.join(TASK_FILE);
        write_json(&path, &desc)?;
        Ok(path)
    }

    /// Reads a bundle from a directory or from its `task.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let (dir, desc_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(TASK_FILE))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let desc: TaskDescriptor = read_json(&desc_path)?;
        if desc.format_version != TASK_FORMAT_VERSION {
            return Err(BenchError::Bundle(format!(
                "unsupported bundle version {}",
                desc.format_version
            )));
        }
        desc.spec.validate()?;
        let spec = desc.spec;
        if desc.shifts.len() != spec.shifts.len()
            || desc.shifts.iter().zip(&spec.shifts).any(|(f, s)| f.id != s.id)
        {
            return Err(BenchError::Bundle("shift files do not match the shift suite".into()));
        }
        let train = load_split(&dir.join(&desc.train), &spec)?;
        let val = load_split(&dir.join(&desc.val), &spec)?;
        let test = load_split(&dir.join(&desc.test), &spec)?;
        let mut shifts = Vec::new();
        for (f, s) in desc.shifts.iter().zip(&spec.shifts) {
            let split = load_split(&dir.join(&f.file), &spec)?;
            if split.labels != test.labels {
                return Err(BenchError::Bundle(format!(
                    "shift {:?} labels differ from the clean test set",
                    f.id
                )));
            }
            shifts.push(ShiftedSplit {
                spec: s.clone(),
                split,
            });
        }
        Ok(Self {
            spec,
            train,
            val,
            test,
            shifts,
        })
    }

    /// Looks up a split by id: `train`, `val`, `clean` (or `test`), or a
    /// shift id.
    pub fn split(&self, id: &str) -> Option<&Split> {
        match id {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "clean" | "test" => Some(&self.test),
            other => self
                .shifts
                .iter()
                .find(|s| s.spec.id == other)
                .map(|s| &s.split),
        }
    }
}

// ---------------------------------------------------------------------------
// Model

/// MLP layout: elementwise input affine, ReLU hidden layers, linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            classes,
        }
    }

    /// Tensor names and shapes in checkpoint order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.input_dim;
        let mut out = vec![
            ("norm.gain".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
        ];
        let mut prev = d;
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("fc{}.weight", i + 1), vec![h, prev]));
            out.push((format!("fc{}.bias", i + 1), vec![h]));
            prev = h;
        }
        out.push(("head.weight".to_string(), vec![self.classes, prev]));
        out.push(("head.bias".to_string(), vec![self.classes]));
        out
    }

    /// Recovers the layout from a checkpoint's tensor shapes.
    pub fn infer(ps: &ParameterSet) -> Result<Self, BenchError> {
        let bad = || BenchError::Schema("checkpoint is not an MLP of this toolkit".into());
        let d = match ps.get("norm.gain").map(|t| t.shape()) {
            Some([d]) => *d,
            _ => return Err(bad()),
        };
        let mut hidden = Vec::new();
        while let Some(t) = ps.get(&format!("fc{}.weight", hidden.len() + 1)) {
            hidden.push(t.shape()[0]);
        }
        let classes = match ps.get("head.weight").map(|t| t.shape()) {
            Some([c, _]) => *c,
            _ => return Err(bad()),
        };
        let arch = Self::new(d, hidden, classes);
        arch.check(ps)?;
        arch.validate().map_err(|_| bad())?;
        Ok(arch)
    }

    pub fn check(&self, ps: &ParameterSet) -> Result<(), BenchError> {
        let schema = self.schema();
        let ok = ps.len() == schema.len()
            && ps
                .tensors()
                .iter()
                .zip(&schema)
                .all(|(t, (n, s))| t.name() == n && t.shape() == s.as_slice());
        if ok {
            Ok(())
        } else {
            Err(BenchError::Schema(format!(
                "checkpoint does not match MLP {}-{:?}-{}",
                self.input_dim, self.hidden, self.classes
            )))
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.input_dim == 0 || self.classes < 2 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(BenchError::InvalidGrid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
            n_in,
            n_out,
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.w.chunks_exact(self.n_in).zip(&self.b)) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Working copy of the MLP in f64. Also used as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
struct Net {
    gain: Vec<f64>,
    bias: Vec<f64>,
    layers: Vec<Dense>,
}

struct Scratch {
    acts: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    input: Vec<f64>,
}

impl Net {
    fn zeros(arch: &Architecture) -> Self {
        let mut layers = Vec::new();
        let mut prev = arch.input_dim;
        for &h in arch.hidden.iter().chain(std::iter::once(&arch.classes)) {
            layers.push(Dense::zeros(prev, h));
            prev = h;
        }
        Self {
            gain: vec![0.0; arch.input_dim],
            bias: vec![0.0; arch.input_dim],
            layers,
        }
    }

    fn from_params(arch: &Architecture, ps: &ParameterSet) -> Result<Self, BenchError> {
        arch.check(ps)?;
        let mut t = ps.tensors().iter().map(|t| t.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
        let gain = t.next().unwrap();
        let bias = t.next().unwrap();
        let mut net = Self::zeros(arch);
        net.gain = gain;
        net.bias = bias;
        for layer in &mut net.layers {
            layer.w = t.next().unwrap();
            layer.b = t.next().unwrap();
        }
        Ok(net)
    }

    fn to_params(&self, arch: &Architecture) -> Result<ParameterSet, TensorError> {
        let mut data = vec![&self.gain, &self.bias];
        for l in &self.layers {
            data.push(&l.w);
            data.push(&l.b);
        }
        ParameterSet::from_entries(
            arch.schema()
                .into_iter()
                .zip(data)
                .map(|((n, s), v)| (n, s, v.iter().map(|&x| x as f32).collect())),
        )
    }

    fn scratch(&self) -> Scratch {
        let mut acts = vec![vec![0.0; self.gain.len()]];
        acts.extend(self.layers.iter().map(|l| vec![0.0; l.n_out]));
        let grads = acts.clone();
        Scratch {
            acts,
            grads,
            input: vec![0.0; self.gain.len()],
        }
    }

    /// Fills `s.acts` from `s.input`; the last entry holds the logits.
    fn forward(&self, s: &mut Scratch) {
        for (j, a) in s.acts[0].iter_mut().enumerate() {
            *a = self.gain[j] * s.input[j] + self.bias[j];
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = s.acts.split_at_mut(l + 1);
            let out = &mut rest[0];
            layer.forward(&prev[l], out);
            if l != last {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }

    fn predict(&self, s: &mut Scratch) -> usize {
        self.forward(s);
        argmax(s.acts.last().unwrap())
    }

    /// Adds the cross-entropy gradient for one example to `g` and returns
    /// the example's loss.
    fn backprop(&self, label: usize, g: &mut Net, s: &mut Scratch) -> f64 {
        self.forward(s);
        let depth = self.layers.len();
        let logits = &s.acts[depth];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let loss = z.ln() + max - logits[label];
        let dl = &mut s.grads[depth];
        for (k, d) in dl.iter_mut().enumerate() {
            *d = (logits[k] - max).exp() / z - if k == label { 1.0 } else { 0.0 };
        }
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let gl = &mut g.layers[l];
            let (lower, upper) = s.grads.split_at_mut(l + 1);
            let dz = &upper[0];
            let a_prev = &s.acts[l];
            let da_prev = &mut lower[l];
            da_prev.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..layer.n_out {
                let d = dz[o];
                if d == 0.0 {
                    continue;
                }
                gl.b[o] += d;
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                let grow = &mut gl.w[o * layer.n_in..(o + 1) * layer.n_in];
                for i in 0..layer.n_in {
                    grow[i] += d * a_prev[i];
                    da_prev[i] += d * row[i];
                }
            }
            if l > 0 {
                // ReLU: gradient flows only where the activation was positive
                for (d, a) in da_prev.iter_mut().zip(a_prev) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        for j in 0..self.gain.len() {
            g.gain[j] += s.grads[0][j] * s.input[j];
            g.bias[j] += s.grads[0][j];
        }
        loss
    }

    fn clear(&mut self) {
        self.gain.iter_mut().for_each(|v| *v = 0.0);
        self.bias.iter_mut().for_each(|v| *v = 0.0);
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// SGD step with decoupled-from-bias weight decay on dense weights.
    fn sgd_step(&mut self, g: &Net, lr: f64, scale: f64, wd: f64) {
        for (p, d) in self.gain.iter_mut().zip(&g.gain) {
            *p -= lr * d * scale;
        }
        for (p, d) in self.bias.iter_mut().zip(&g.bias) {
            *p -= lr * d * scale;
        }
        for (l, gl) in self.layers.iter_mut().zip(&g.layers) {
            for (p, d) in l.w.iter_mut().zip(&gl.w) {
                *p -= lr * (d * scale + wd * *p);
            }
            for (p, d) in l.b.iter_mut().zip(&gl.b) {
                *p -= lr * d * scale;
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.gain.iter().chain(&self.bias).all(|v| v.is_finite())
            && self
                .layers
                .iter()
                .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Evaluation

/// Top-1 accuracy of `params` on `split`. Chunks run in parallel; only
/// integer counts are reduced, so the result does not depend on scheduling.
pub fn evaluate(params: &ParameterSet, arch: &Architecture, split: &Split) -> Result<f64, BenchError> {
    if split.dim != arch.input_dim {
        return Err(BenchError::Schema(format!(
            "split has {} features, model expects {}",
            split.dim, arch.input_dim
        )));
    }
    if split.is_empty() {
        return Err(BenchError::Bundle("cannot evaluate on an empty split".into()));
    }
    let net = Net::from_params(arch, params)?;
    let d = split.dim;
    let correct: usize = split
        .features
        .par_chunks(EVAL_CHUNK * d)
        .zip(split.labels.par_chunks(EVAL_CHUNK))
        .map(|(xs, ys)| {
            let mut s = net.scratch();
            let mut hits = 0;
            for (x, &y) in xs.chunks_exact(d).zip(ys) {
                for (dst, &v) in s.input.iter_mut().zip(x) {
                    *dst = f64::from(v);
                }
                if net.predict(&mut s) == y as usize {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftAccuracy {
    pub id: String,
    pub accuracy: f64,
}

/// Accuracies of one checkpoint on the clean test set and each shifted set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<f64>,
    pub clean: f64,
    pub shifts: Vec<ShiftAccuracy>,
    /// Unweighted mean of the shifted-set accuracies; absent without shifts.
    pub avg_ood: Option<f64>,
}

impl EvalResult {
    pub fn new(val: Option<f64>, clean: f64, shifts: Vec<ShiftAccuracy>) -> Self {
        let avg_ood = if shifts.is_empty() {
            None
        } else {
            Some(shifts.iter().map(|s| s.accuracy).sum::<f64>() / shifts.len() as f64)
        };
        Self {
            val,
            clean,
            shifts,
            avg_ood,
        }
    }
}

/// Clean and shifted-set accuracies (plus validation accuracy) in shift
/// suite order.
pub fn evaluate_ood(params: &ParameterSet, task: &TaskBundle, arch: &Architecture) -> Result<EvalResult, BenchError> {
    let val = evaluate(params, arch, &task.val)?;
    let clean = evaluate(params, arch, &task.test)?;
    let shifts = task
        .shifts
        .iter()
        .map(|s| {
            Ok(ShiftAccuracy {
                id: s.spec.id.clone(),
                accuracy: evaluate(params, arch, &s.split)?,
            })
        })
        .collect::<Result<_, BenchError>>()?;
    Ok(EvalResult::new(Some(val), clean, shifts))
}

/// Validation-split evaluator handed to the soup algorithms.
pub struct SplitEvaluator<'a> {
    arch: Architecture,
    split: &'a Split,
    id: String,
}

impl<'a> SplitEvaluator<'a> {
    pub fn new(arch: Architecture, split: &'a Split, id: impl Into<String>) -> Self {
        Self {
            arch,
            split,
            id: id.into(),
        }
    }

    pub fn validation(task: &'a TaskBundle, arch: Architecture) -> Self {
        let id = format!("{}:seed{}:val", task.spec.generator.id(), task.spec.seed);
        Self::new(arch, &task.val, id)
    }
}

impl Evaluator for SplitEvaluator<'_> {
    fn accuracy(&self, params: &ParameterSet) -> Result<f64, EvalError> {
        evaluate(params, &self.arch, self.split).map_err(|e| match e {
            BenchError::Schema(m) => EvalError::Schema(m),
            other => EvalError::Failed(other.to_string()),
        })
    }

    fn dataset_id(&self) -> &str {
        &self.id
    }
}

// ---------------------------------------------------------------------------
// Training

/// The shared starting point of every pool member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub id: String,
    pub seed: u64,
    /// Fit the head on frozen random features before finetuning.
    pub linear_probe: bool,
    pub probe_steps: usize,
    pub probe_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub id: String,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aug_noise: f64,
    pub seed: u64,
    pub init_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainGrid {
    pub version: u32,
    pub init: InitSpec,
    pub configs: Vec<TrainConfig>,
}

impl TrainGrid {
    pub fn reference_v1() -> Self {
        serde_json::from_str(REFERENCE_GRID_JSON).expect("bundled grid config parses")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        read_json(path.as_ref())
    }

    /// Checks the grid and returns the shared architecture for `task`.
    pub fn validate(&self, task: &TaskSpec) -> Result<Architecture, BenchError> {
        let bad = |m: String| Err(BenchError::InvalidGrid(m));
        if self.version != 1 {
            return bad(format!("unsupported grid version {}", self.version));
        }
        let first = self.configs.first().ok_or(BenchError::EmptyGrid)?;
        let arch = Architecture::new(task.input_dim, first.hidden.clone(), task.classes);
        arch.validate()?;
        if self.init.linear_probe && !(self.init.probe_lr.is_finite() && self.init.probe_lr > 0.0) {
            return bad("probe_lr must be positive".into());
        }
        let mut ids = BTreeSet::new();
        for c in &self.configs {
            if c.id.is_empty()
                || !c.id.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_')
            {
                return bad(format!("config id {:?} must be non-empty [A-Za-z0-9_-]", c.id));
            }
            if !ids.insert(&c.id) {
                return bad(format!("duplicate config id {:?}", c.id));
            }
            if c.hidden != first.hidden {
                return bad(format!("config {:?}: all configs must share one architecture", c.id));
            }
            if c.init_id != self.init.id {
                return bad(format!(
                    "config {:?}: init {:?} differs from shared init {:?}",
                    c.id, c.init_id, self.init.id
                ));
            }
            if !(c.lr.is_finite() && c.lr > 0.0)
                || !(c.weight_decay.is_finite() && c.weight_decay >= 0.0)
                || !(c.aug_noise.is_finite() && c.aug_noise >= 0.0)
                || c.batch_size == 0
            {
                return bad(format!("config {:?}: invalid hyperparameters", c.id));
            }
        }
        Ok(arch)
    }
}

/// Builds the shared initialization: He-normal hidden layers, identity
/// input affine, and a head fitted by softmax regression on the frozen
/// random features when `linear_probe` is set.
pub fn shared_init(arch: &Architecture, train: &Split, init: &InitSpec) -> Result<ParameterSet, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(init.seed, "init", 0));
    let mut net = Net::zeros(arch);
    net.gain.iter_mut().for_each(|v| *v = 1.0);
    let depth = net.layers.len();
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let is_head = l == depth - 1;
        if is_head && init.linear_probe {
            continue;
        }
        let gain = if is_head { 1.0 } else { 2.0 };
        let normal = Normal::new(0.0, (gain / layer.n_in as f64).sqrt()).unwrap();
        for w in &mut layer.w {
            *w = normal.sample(&mut rng);
        }
    }
    if init.linear_probe {
        fit_probe(&mut net, train, arch.classes, init);
    }
    if !net.is_finite() {
        return Err(BenchError::InvalidGrid("linear probe diverged".into()));
    }
    Ok(net.to_params(arch)?)
}

fn fit_probe(net: &mut Net, train: &Split, classes: usize, init: &InitSpec) {
    let mut s = net.scratch();
    let depth = net.layers.len();
    // penultimate features of the frozen body
    let feats: Vec<Vec<f64>> = (0..train.len())
        .map(|i| {
            for (dst, &v) in s.input.iter_mut().zip(train.row(i)) {
                *dst = f64::from(v);
            }
            net.forward(&mut s);
            s.acts[depth - 1].clone()
        })
        .collect();
    let head = net.layers.last_mut().unwrap();
    let n = feats.len() as f64;
    let mut logits = vec![0.0; classes];
    for _ in 0..init.probe_steps {
        let mut gw = vec![0.0; head.w.len()];
        let mut gb = vec![0.0; classes];
        for (f, &y) in feats.iter().zip(&train.labels) {
            head.forward(f, &mut logits);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            for k in 0..classes {
                let d = (logits[k] - max).exp() / z - if k == y as usize { 1.0 } else { 0.0 };
                gb[k] += d;
                for (g, x) in gw[k * head.n_in..(k + 1) * head.n_in].iter_mut().zip(f) {
                    *g += d * x;
                }
            }
        }
        for (w, g) in head.w.iter_mut().zip(&gw) {
            *w -= init.probe_lr * g / n;
        }
        for (b, g) in head.b.iter_mut().zip(&gb) {
            *b -= init.probe_lr * g / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub params: ParameterSet,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedConfig {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPool {
    pub arch: Architecture,
    pub init: ParameterSet,
    pub models: Vec<TrainedModel>,
    pub failed: Vec<FailedConfig>,
}

impl TrainedPool {
    pub fn to_model_pool(&self) -> Result<ModelPool, SoupError> {
        ModelPool::new(
            self.models
                .iter()
                .map(|m| PoolMember::new(m.config.id.clone(), m.params.clone(), Some(m.val_acc)))
                .collect(),
        )
    }
}

/// Finetunes one model from `init` with minibatch SGD on cross-entropy.
/// Returns `Err(reason)` if the loss or the weights become non-finite.
pub fn train_one(
    arch: &Architecture,
    init: &ParameterSet,
    train: &Split,
    config: &TrainConfig,
    master_seed: u64,
) -> Result<ParameterSet, String> {
    let mut net = Net::from_params(arch, init).map_err(|e| e.to_string())?;
    let mut grad = Net::zeros(arch);
    let mut s = net.scratch();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, "train-pool", config.seed));
    let noise = Normal::new(0.0, config.aug_noise).unwrap();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.clear();
            let mut loss = 0.0;
            for &i in batch {
                for (dst, &v) in s.input.iter_mut().zip(train.row(i)) {
                    *dst = f64::from(v);
                    if config.aug_noise > 0.0 {
                        *dst += noise.sample(&mut rng);
                    }
                }
                loss += net.backprop(train.labels[i] as usize, &mut grad, &mut s);
            }
            if !loss.is_finite() {
                return Err(format!("non-finite loss in epoch {}", epoch + 1));
            }
            net.sgd_step(&grad, config.lr, 1.0 / batch.len() as f64, config.weight_decay);
        }
        if !net.is_finite() {
            return Err(format!("non-finite weights after epoch {}", epoch + 1));
        }
    }
    net.to_params(arch).map_err(|e| format!("weights overflow f32: {e}"))
}

/// Trains every grid config from the shared initialization, in parallel.
/// Diverged configs are excluded and listed in `failed`.
pub fn train_pool(task: &TaskBundle, grid: &TrainGrid, master_seed: u64) -> Result<TrainedPool, BenchError> {
    let arch = grid.validate(&task.spec)?;
    let init = shared_init(&arch, &task.train, &grid.init)?;
    let results: Vec<_> = grid
        .configs
        .par_iter()
        .map(|c| train_one(&arch, &init, &task.train, c, master_seed))
        .collect();
    let mut models = Vec::new();
    let mut failed = Vec::new();
    for (config, result) in grid.configs.iter().zip(results) {
        match result {
            Ok(params) => {
                let val_acc = evaluate(&params, &arch, &task.val)?;
                models.push(TrainedModel {
                    config: config.clone(),
                    params,
                    val_acc,
                });
            }
            Err(reason) => failed.push(FailedConfig {
                id: config.id.clone(),
                reason,
            }),
        }
    }
    if models.is_empty() {
        let reasons: Vec<String> = failed.iter().map(|f| format!("{}: {}", f.id, f.reason)).collect();
        return Err(BenchError::AllDiverged(reasons.join("; ")));
    }
    Ok(TrainedPool {
        arch,
        init,
        models,
        failed,
    })
}

// ---------------------------------------------------------------------------
// Pool directories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub checkpoint: String,
    pub val_acc: f64,
    pub config: TrainConfig,
}

/// `pool.json`: what `train-pool` produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub master_seed: u64,
    pub task_seed: u64,
    pub members: Vec<PoolEntry>,
    pub failed: Vec<FailedConfig>,
}

impl PoolManifest {
    /// Ids ordered by descending validation accuracy (stable).
    pub fn ranked(&self) -> Vec<&PoolEntry> {
        let mut v: Vec<&PoolEntry> = self.members.iter().collect();
        v.sort_by(|a, b| b.val_acc.total_cmp(&a.val_acc));
        v
    }
}

/// Writes one checkpoint per trained model and `pool.json` into `dir`.
pub fn save_pool(pool: &TrainedPool, master_seed: u64, task_seed: u64, dir: impl AsRef<Path>) -> Result<PathBuf, BenchError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut members = Vec::new();
    for m in &pool.models {
        let file = format!("{}.ckpt", m.config.id);
        let mut meta = Metadata::new();
        meta.insert("id".into(), m.config.id.clone());
        meta.insert("val_acc".into(), format!("{:?}", m.val_acc));
        meta.insert("config".into(), serde_json::to_string(&m.config).expect("serializable"));
        let path = dir.join(&file);
        tensor_store::save(&m.params, &meta, &path).map_err(|source| BenchError::Checkpoint { path, source })?;
        members.push(PoolEntry {
            id: m.config.id.clone(),
            checkpoint: file,
            val_acc: m.val_acc,
            config: m.config.clone(),
        });
    }
    let manifest = PoolManifest {
        format_version: 1,
        architecture: pool.arch.clone(),
        master_seed,
        task_seed,
        members,
        failed: pool.failed.clone(),
    };
    let path = dir.join(POOL_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Reads `pool.json` and every member checkpoint.
pub fn load_pool(dir: impl AsRef<Path>) -> Result<(PoolManifest, ModelPool), BenchError> {
    let dir = dir.as_ref();
    let manifest: PoolManifest = read_json(&dir.join(POOL_FILE))?;
    let mut members = Vec::new();
    for e in &manifest.members {
        let path = dir.join(&e.checkpoint);
        let (params, _) = tensor_store::load(&path).map_err(|source| BenchError::Checkpoint {
            path: path.clone(),
            source,
        })?;
        manifest.architecture.check(&params)?;
        members.push(PoolMember::new(e.id.clone(), params, Some(e.val_acc)));
    }
    if members.is_empty() {
        return Err(BenchError::Bundle(format!("{}: pool has no members", dir.display())));
    }
    Ok((manifest, ModelPool::new(members)?))
}
