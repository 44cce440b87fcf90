//! Run configuration: a flat `key = value` text file.
//!
//! Keys are dotted (`model.n_layers = 4`); a `[section]` header prefixes the
//! keys that follow it. `#` starts a comment. Every field of [`TrainConfig`]
//! has a key, unknown or repeated keys are errors, and parse errors carry the
//! line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::model::ModelConfig;
use crate::sampler::{SamplerSeed, DEFAULT_QUEUE_CAPACITY, RNG_ALGORITHM};
use crate::scheduler::SamplingScheduler;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Sample subnetworks according to the scheduler.
    Est,
    /// Plain full-model training; the scheduler only fixes the step budget.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decay {
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay: Decay,
    pub min_lr: f64,
    pub total_steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: PathBuf,
    /// Held-out corpus; when absent the tail of the training corpus is held out.
    pub val: Option<PathBuf>,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scheduler: SamplingScheduler,
    pub steps: u64,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub grad_clip: f64,
    pub optimizer: OptimizerConfig,
    pub warmup_steps: u64,
    pub decay: Decay,
    pub min_lr: f64,
    pub seed: u64,
    pub sampler_stream: u64,
    pub data_stream: u64,
    pub data: DataConfig,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub eval_batches: usize,
    pub backward_multiplier: f64,
    pub queue_capacity: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "model.n_layers",
    "model.n_heads",
    "model.head_dim",
    "model.hidden",
    "model.mlp_inner",
    "model.vocab",
    "model.seq_len",
    "scheduler.preset",
    "scheduler.scale",
    "scheduler.stages",
    "train.steps",
    "train.batch_size",
    "train.mode",
    "train.grad_clip",
    "train.checkpoint_every",
    "train.eval_every",
    "train.eval_batches",
    "optimizer.peak_lr",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.weight_decay",
    "lr_schedule.warmup_steps",
    "lr_schedule.decay",
    "lr_schedule.min_lr",
    "seed.seed",
    "seed.sampler_stream",
    "seed.data_stream",
    "seed.rng",
    "data.train",
    "data.val",
    "data.val_fraction",
    "cost.backward_multiplier",
    "sampler.queue_capacity",
];

impl TrainConfig {
    /// Desk-scale defaults around `train_path`: a 4-layer byte-level model
    /// and the practical three-stage schedule scaled to 3,000 steps.
    pub fn desk_scale(train_path: impl Into<PathBuf>) -> Self {
        let scheduler =
            SamplingScheduler::preset("practical-gpt2", Some(0.02)).expect("valid preset");
        Self {
            model: ModelConfig {
                n_layers: 4,
                n_heads: 4,
                head_dim: 32,
                hidden: 128,
                mlp_inner: 512,
                vocab: 256,
                seq_len: 64,
            },
            steps: scheduler.total_steps(),
            scheduler,
            batch_size: 16,
            mode: TrainMode::Est,
            grad_clip: 1.0,
            optimizer: OptimizerConfig {
                peak_lr: 2e-3,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                weight_decay: 0.1,
            },
            warmup_steps: 100,
            decay: Decay::Linear,
            min_lr: 1e-4,
            seed: 1,
            sampler_stream: 1,
            data_stream: 2,
            data: DataConfig {
                train: train_path.into(),
                val: None,
                val_fraction: 0.1,
            },
            checkpoint_every: 0,
            eval_every: 0,
            eval_batches: 8,
            backward_multiplier: crate::cost::DEFAULT_BACKWARD_MULTIPLIER,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }

    pub fn sampler_seed(&self) -> SamplerSeed {
        SamplerSeed {
            seed: self.seed,
            stream_id: self.sampler_stream,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.optimizer.peak_lr,
            warmup_steps: self.warmup_steps,
            decay: self.decay,
            min_lr: self.min_lr,
            total_steps: self.steps,
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.model.seq_len) as u64
    }

    /// Hard invariants; returns scheduler warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.model.validate()?;
        let warnings = self.scheduler.validate(self.steps)?;
        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(path, format!("{v} must be positive")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        positive("train.grad_clip", self.grad_clip)?;
        positive("optimizer.peak_lr", self.optimizer.peak_lr)?;
        positive("optimizer.eps", self.optimizer.eps)?;
        for (path, b) in [("optimizer.beta1", self.optimizer.beta1), ("optimizer.beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(path, format!("{b} is outside [0, 1)")));
            }
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.optimizer.peak_lr) {
            return Err(Error::config("lr_schedule.min_lr", "must lie in [0, peak_lr]"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config("lr_schedule.warmup_steps", "exceeds train.steps"));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction", "must lie in (0, 1)"));
        }
        if self.eval_batches == 0 {
            return Err(Error::config("train.eval_batches", "must be at least 1"));
        }
        if !(self.backward_multiplier >= 0.0) {
            return Err(Error::config("cost.backward_multiplier", "must be non-negative"));
        }
        if self.sampler_stream == self.data_stream {
            return Err(Error::config("seed.data_stream", "must differ from seed.sampler_stream"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("sampler.queue_capacity", "must be at least 1"));
        }
        Ok(warnings)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::path::absolute(parent).map_err(|e| Error::io(parent, e))?;
        Self::parse(&text, &path.display().to_string(), &base)
    }

    /// Parses config text; relative data paths resolve against `base_dir`.
    pub fn parse(text: &str, origin: &str, base_dir: &Path) -> Result<Self> {
        let entries = parse_entries(text, origin)?;
        check_known_keys(&entries, origin)?;
        let mut r = Reader {
            entries,
            origin,
        };

        let model = ModelConfig {
            n_layers: r.req("model.n_layers")?,
            n_heads: r.req("model.n_heads")?,
            head_dim: r.req("model.head_dim")?,
            hidden: r.req("model.hidden")?,
            mlp_inner: r.req("model.mlp_inner")?,
            vocab: r.opt("model.vocab")?.unwrap_or(256),
            seq_len: r.req("model.seq_len")?,
        };

        let preset: Option<String> = r.opt("scheduler.preset")?;
        let scale: Option<f64> = r.opt("scheduler.scale")?;
        let stages: Option<String> = r.opt("scheduler.stages")?;
        let scheduler = match (preset, stages) {
            (Some(_), Some(_)) => {
                return Err(r.error_at("scheduler.stages", "give either scheduler.preset or scheduler.stages"))
            }
            (Some(name), None) => SamplingScheduler::preset(&name, scale)?,
            (None, Some(text)) => {
                let s = SamplingScheduler::parse_stages(&text)?;
                match scale {
                    Some(f) => s.scaled(f)?,
                    None => s,
                }
            }
            (None, None) => {
                return Err(Error::config("scheduler", "scheduler.preset or scheduler.stages is required"))
            }
        };
        let defaults = TrainConfig::desk_scale(PathBuf::new());
        let steps = r.opt("train.steps")?.unwrap_or(scheduler.total_steps());

        let rng: Option<String> = r.opt("seed.rng")?;
        if let Some(alg) = rng {
            if alg != RNG_ALGORITHM {
                return Err(r.error_at("seed.rng", &format!("unsupported generator `{alg}`, expected `{RNG_ALGORITHM}`")));
            }
        }

        let train: String = r.req("data.train")?;
        let val: Option<String> = r.opt("data.val")?;
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };

        let cfg = TrainConfig {
            model,
            scheduler,
            steps,
            batch_size: r.opt("train.batch_size")?.unwrap_or(defaults.batch_size),
            mode: r.opt("train.mode")?.unwrap_or(defaults.mode),
            grad_clip: r.opt("train.grad_clip")?.unwrap_or(defaults.grad_clip),
            optimizer: OptimizerConfig {
                peak_lr: r.opt("optimizer.peak_lr")?.unwrap_or(defaults.optimizer.peak_lr),
                beta1: r.opt("optimizer.beta1")?.unwrap_or(defaults.optimizer.beta1),
                beta2: r.opt("optimizer.beta2")?.unwrap_or(defaults.optimizer.beta2),
                eps: r.opt("optimizer.eps")?.unwrap_or(defaults.optimizer.eps),
                weight_decay: r
                    .opt("optimizer.weight_decay")?
                    .unwrap_or(defaults.optimizer.weight_decay),
            },
            warmup_steps: r.opt("lr_schedule.warmup_steps")?.unwrap_or(defaults.warmup_steps),
            decay: r.opt("lr_schedule.decay")?.unwrap_or(defaults.decay),
            min_lr: r.opt("lr_schedule.min_lr")?.unwrap_or(defaults.min_lr),
            seed: r.opt("seed.seed")?.unwrap_or(defaults.seed),
            sampler_stream: r.opt("seed.sampler_stream")?.unwrap_or(defaults.sampler_stream),
            data_stream: r.opt("seed.data_stream")?.unwrap_or(defaults.data_stream),
            data: DataConfig {
                train: resolve(train),
                val: val.map(resolve),
                val_fraction: r.opt("data.val_fraction")?.unwrap_or(defaults.data.val_fraction),
            },
            checkpoint_every: r.opt("train.checkpoint_every")?.unwrap_or(defaults.checkpoint_every),
            eval_every: r.opt("train.eval_every")?.unwrap_or(defaults.eval_every),
            eval_batches: r.opt("train.eval_batches")?.unwrap_or(defaults.eval_batches),
            backward_multiplier: r
                .opt("cost.backward_multiplier")?
                .unwrap_or(defaults.backward_multiplier),
            queue_capacity: r.opt("sampler.queue_capacity")?.unwrap_or(defaults.queue_capacity),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "n_layers = {}", m.n_layers);
        let _ = writeln!(s, "n_heads = {}", m.n_heads);
        let _ = writeln!(s, "head_dim = {}", m.head_dim);
        let _ = writeln!(s, "hidden = {}", m.hidden);
        let _ = writeln!(s, "mlp_inner = {}", m.mlp_inner);
        let _ = writeln!(s, "vocab = {}", m.vocab);
        let _ = writeln!(s, "seq_len = {}", m.seq_len);
        let _ = writeln!(s, "\n[scheduler]");
        let _ = writeln!(s, "stages = {}", self.scheduler.format_stages());
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "eval_batches = {}", self.eval_batches);
        let _ = writeln!(s, "\n[optimizer]");
        let _ = writeln!(s, "peak_lr = {}", o.peak_lr);
        let _ = writeln!(s, "beta1 = {}", o.beta1);
        let _ = writeln!(s, "beta2 = {}", o.beta2);
        let _ = writeln!(s, "eps = {}", o.eps);
        let _ = writeln!(s, "weight_decay = {}", o.weight_decay);
        let _ = writeln!(s, "\n[lr_schedule]");
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "decay = {}", self.decay);
        let _ = writeln!(s, "min_lr = {}", self.min_lr);
        let _ = writeln!(s, "\n[seed]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "sampler_stream = {}", self.sampler_stream);
        let _ = writeln!(s, "data_stream = {}", self.data_stream);
        let _ = writeln!(s, "rng = {RNG_ALGORITHM}");
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "train = {}", self.data.train.display());
        if let Some(val) = &self.data.val {
            let _ = writeln!(s, "val = {}", val.display());
        }
        let _ = writeln!(s, "val_fraction = {}", self.data.val_fraction);
        let _ = writeln!(s, "\n[cost]");
        let _ = writeln!(s, "backward_multiplier = {}", self.backward_multiplier);
        let _ = writeln!(s, "\n[sampler]");
        let _ = writeln!(s, "queue_capacity = {}", self.queue_capacity);
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Est => "est",
            TrainMode::Dense => "dense",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "est" => Ok(TrainMode::Est),
            "dense" => Ok(TrainMode::Dense),
            other => Err(format!("unknown mode `{other}` (est | dense)")),
        }
    }
}

impl std::fmt::Display for Decay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decay::Linear => "linear",
            Decay::Cosine => "cosine",
        })
    }
}

impl FromStr for Decay {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Decay::Linear),
            "cosine" => Ok(Decay::Cosine),
            other => Err(format!("unknown decay `{other}` (linear | cosine)")),
        }
    }
}

/// `key → (value, line)` of a flat key=value document.
pub(crate) fn parse_entries(text: &str, origin: &str) -> Result<BTreeMap<String, (String, usize)>> {
    let mut section = String::new();
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            msg,
        };
        if let Some(inner) = line.strip_prefix('[') {
            let name = inner
                .strip_suffix(']')
                .ok_or_else(|| err(format!("malformed section header `{line}`")))?
                .trim();
            if name.is_empty() {
                return Err(err("empty section name".into()));
            }
            section = format!("{name}.");
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let key = format!("{section}{}", key.trim());
        if entries.contains_key(&key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        entries.insert(key, (value.trim().to_string(), line_no));
    }
    Ok(entries)
}

struct Reader<'a> {
    entries: BTreeMap<String, (String, usize)>,
    origin: &'a str,
}

impl Reader<'_> {
    fn error_at(&self, key: &str, msg: &str) -> Error {
        match self.entries.get(key) {
            Some((_, line)) => Error::Parse {
                path: self.origin.to_string(),
                line: *line,
                msg: format!("{key}: {msg}"),
            },
            None => Error::config(key, msg),
        }
    }

    fn opt<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((value, _)) => value
                .parse::<V>()
                .map(Some)
                .map_err(|e| self.error_at(key, &format!("cannot parse `{value}`: {e}"))),
        }
    }

    fn req<V: FromStr>(&mut self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.opt(key)?
            .ok_or_else(|| Error::config(key, "missing required key"))
    }
}

/// Rejects keys outside the schema, reporting the first by line number.
fn check_known_keys(entries: &BTreeMap<String, (String, usize)>, origin: &str) -> Result<()> {
    let mut unknown: Vec<_> = entries
        .iter()
        .filter(|(k, _)| !KNOWN_KEYS.contains(&k.as_str()))
        .map(|(k, (_, line))| (*line, k.clone()))
        .collect();
    unknown.sort();
    match unknown.first() {
        Some((line, key)) => Err(Error::Parse {
            path: origin.to_string(),
            line: *line,
            msg: format!("unknown key `{key}`"),
        }),
        None => Ok(()),
    }
}
