//! Flat `key = value` run configuration.
//!
//! Sources, lowest precedence first: built-in defaults, the `--config` file,
//! `ALPHADIST_<KEY>` environment variables, then `--set key=value` and
//! dedicated flags. Every key is validated before any work starts.

use alphadist::divergence::{DivergenceKind, DivergenceSpec, ProbDist};
use alphadist::search::SearchBudget;
use alphadist::supernet::{SubnetTargets, TrainConfig};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const ENV_PREFIX: &str = "ALPHADIST_";

/// `(key, default, description)`. An empty default means "unset".
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out", "out", "output directory; every file a command writes goes here"),
    ("seed", "0", "training / search seed"),
    ("workers", "1", "worker threads for sub-network evaluation"),
    ("data", "blobs", "dataset source: blobs or idx"),
    ("blobs_per_class", "2000", "synthetic samples per class"),
    ("blobs_classes", "10", "synthetic class count"),
    ("blobs_dim", "32", "synthetic feature dimension"),
    ("blobs_spread", "2.0", "synthetic isotropic noise scale"),
    ("data_seed", "1000", "seed for synthetic data"),
    ("split_seed", "2000", "seed for the train/validation split"),
    ("train_frac", "0.8", "fraction of samples used for training"),
    ("idx_images", "", "IDX image file (data = idx)"),
    ("idx_labels", "", "IDX label file (data = idx)"),
    ("idx_classes", "10", "class count for IDX labels"),
    ("hidden", "32,32,32", "maximal hidden widths of the supernet"),
    ("width_multipliers", "0.25,0.5,0.75,1.0", "admissible width multipliers per hidden layer"),
    ("epochs", "30", "training epochs"),
    ("batch_size", "64", "mini-batch size"),
    ("base_lr", "0.01", "initial learning rate of the cosine schedule"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "1e-5", "SGD weight decay"),
    ("k_random", "2", "random sub-networks per step besides the smallest"),
    ("label_smoothing", "0.1", "label smoothing of the cross-entropy terms"),
    ("subnet_targets", "teacher", "teacher (in-place KD) or labels (no KD)"),
    ("resume", "true", "continue from <out>/checkpoint.bin when present"),
    ("divergence", "adaptive-alpha", "kl, reverse-kl, symmetric-kl, alpha or adaptive-alpha"),
    ("alpha_minus", "-1", "negative α of the adaptive pair"),
    ("alpha_plus", "1", "positive α of the adaptive pair; the α of kind alpha"),
    ("clip_factor", "5", "importance-weight clip β"),
    ("temperature", "1", "softmax temperature for teacher and student"),
    ("distill_weight", "0.9", "KD share of the single-network loss"),
    ("kd_weight", "", "γ; defaults to 1 + k_random"),
    ("checkpoint", "", "supernet checkpoint for search / eval; defaults to <out>/checkpoint.bin"),
    ("teacher", "", "teacher checkpoint for kd-single"),
    ("student_hidden", "8", "hidden widths of the kd-single student"),
    ("initial_random", "64", "search: initial random population"),
    ("survivors", "16", "search: parents kept per round"),
    ("crossover", "16", "search: crossover children per round"),
    ("mutation", "16", "search: mutants per round"),
    ("rounds", "10", "search: evolution rounds"),
    ("mutation_rate", "0.2", "search: per-layer resampling probability"),
    ("pairs", "", "divergence-demo: extra pairs as p1,p2,..|q1,q2,..;..."),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Raw string values after layering.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

fn split_kv(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim().to_string(), v.trim().to_string()))
}

impl RawConfig {
    pub fn defaults() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }

    fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        if !known(key) {
            return Err(ConfigError(format!("{origin}: unknown key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a config file body. `#` starts a comment line; a key may appear once.
    pub fn apply_file(&mut self, text: &str, name: &str) -> Result<(), ConfigError> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let origin = format!("{name}:{}", i + 1);
            let (k, v) = split_kv(line).ok_or_else(|| ConfigError(format!("{origin}: expected key = value")))?;
            if let Some(prev) = seen.insert(k.clone(), i + 1) {
                return Err(ConfigError(format!("{origin}: '{k}' already set on line {prev}")));
            }
            self.set(&k, &v, &origin)?;
        }
        Ok(())
    }

    /// Apply `ALPHADIST_<KEY>` variables for known keys; other variables are ignored.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), ConfigError> {
        for (name, value) in vars {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase();
                if known(&key) {
                    self.set(&key, &value, &name)?;
                }
            }
        }
        Ok(())
    }

    pub fn apply_set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = split_kv(assignment)
            .ok_or_else(|| ConfigError(format!("--set expects key=value, got '{assignment}'")))?;
        self.set(&k, &v, "--set")
    }

    pub fn override_key(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set(key, value, "flag")
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a default")
    }

    /// Resolved config as a loadable file body, keys sorted.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| ConfigError(format!("{key} = '{v}': {e}")))
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: Display,
    {
        let v = self.get(key);
        let items: Vec<T> = v
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| ConfigError(format!("{key} = '{v}': {e}"))))
            .collect::<Result<_, _>>()?;
        Ok(items)
    }

    fn bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(ConfigError(format!("{key} = '{v}': expected true or false"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs { per_class: usize, classes: usize, dim: usize, spread: f64, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf, classes: usize },
}

/// Typed view of a [`RawConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: DataSource,
    pub split_seed: u64,
    pub train_frac: f64,
    pub hidden: Vec<usize>,
    pub width_multipliers: Vec<f64>,
    pub train: TrainConfig,
    pub resume: bool,
    pub checkpoint: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub student_hidden: Vec<usize>,
    pub budget: SearchBudget,
    pub mutation_rate: f64,
    pub pairs: Vec<(ProbDist, ProbDist)>,
}

fn parse_pairs(text: &str) -> Result<Vec<(ProbDist, ProbDist)>, ConfigError> {
    let dist = |s: &str| -> Result<ProbDist, ConfigError> {
        let v = s
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| ConfigError(format!("pairs: '{x}': {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        ProbDist::new(v).map_err(|e| ConfigError(format!("pairs: '{s}': {e}")))
    };
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (p, q) = pair
                .split_once('|')
                .ok_or_else(|| ConfigError(format!("pairs: '{pair}' needs the form p1,p2,..|q1,q2,..")))?;
            let (p, q) = (dist(p)?, dist(q)?);
            if p.len() != q.len() {
                return Err(ConfigError(format!("pairs: '{pair}' has unequal lengths")));
            }
            Ok((p, q))
        })
        .collect()
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let data = match raw.get("data") {
            "blobs" => DataSource::Blobs {
                per_class: raw.parse("blobs_per_class")?,
                classes: raw.parse("blobs_classes")?,
                dim: raw.parse("blobs_dim")?,
                spread: raw.parse("blobs_spread")?,
                seed: raw.parse("data_seed")?,
            },
            "idx" => DataSource::Idx {
                images: raw
                    .optional("idx_images")?
                    .ok_or_else(|| ConfigError("data = idx requires idx_images".into()))?,
                labels: raw
                    .optional("idx_labels")?
                    .ok_or_else(|| ConfigError("data = idx requires idx_labels".into()))?,
                classes: raw.parse("idx_classes")?,
            },
            other => return Err(ConfigError(format!("data = '{other}': expected blobs or idx"))),
        };
        let kind: DivergenceKind = raw.parse("divergence")?;
        let k_random: usize = raw.parse("k_random")?;
        let divergence = DivergenceSpec {
            kind,
            alpha_minus: raw.parse("alpha_minus")?,
            alpha_plus: raw.parse("alpha_plus")?,
            clip_factor: raw.parse("clip_factor")?,
            temperature: raw.parse("temperature")?,
            distill_weight: raw.parse("distill_weight")?,
            kd_weight: raw.optional("kd_weight")?.unwrap_or((1 + k_random) as f64),
        };
        let subnet_targets = match raw.get("subnet_targets") {
            "teacher" => SubnetTargets::Teacher,
            "labels" => SubnetTargets::Labels,
            other => return Err(ConfigError(format!("subnet_targets = '{other}': expected teacher or labels"))),
        };
        let train = TrainConfig {
            epochs: raw.parse("epochs")?,
            batch_size: raw.parse("batch_size")?,
            base_lr: raw.parse("base_lr")?,
            momentum: raw.parse("momentum")?,
            weight_decay: raw.parse("weight_decay")?,
            seed: raw.parse("seed")?,
            k_random,
            divergence,
            label_smoothing: raw.parse("label_smoothing")?,
            subnet_targets,
            workers: raw.parse("workers")?,
        };
        train.validate().map_err(|e| ConfigError(e.to_string()))?;
        let budget = SearchBudget {
            initial_random: raw.parse("initial_random")?,
            survivors: raw.parse("survivors")?,
            crossover: raw.parse("crossover")?,
            mutation: raw.parse("mutation")?,
            rounds: raw.parse("rounds")?,
        };
        budget.validate().map_err(|e| ConfigError(e.to_string()))?;
        let mutation_rate: f64 = raw.parse("mutation_rate")?;
        if !(0.0..=1.0).contains(&mutation_rate) {
            return Err(ConfigError(format!("mutation_rate must lie in [0, 1], got {mutation_rate}")));
        }
        let train_frac: f64 = raw.parse("train_frac")?;
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(ConfigError(format!("train_frac must lie in (0, 1), got {train_frac}")));
        }
        let out: PathBuf = raw.parse("out")?;
        if out.as_os_str().is_empty() {
            return Err(ConfigError("out must not be empty".into()));
        }
        Ok(Self {
            out,
            data,
            split_seed: raw.parse("split_seed")?,
            train_frac,
            hidden: raw.list("hidden")?,
            width_multipliers: raw.list("width_multipliers")?,
            train,
            resume: raw.bool("resume")?,
            checkpoint: raw.optional("checkpoint")?,
            teacher: raw.optional("teacher")?,
            student_hidden: raw.list("student_hidden")?,
            budget,
            mutation_rate,
            pairs: parse_pairs(raw.get("pairs"))?,
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.bin"))
    }

    pub fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Layer every source and type-check the result.
pub fn load(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    sets: &[String],
    out_flag: Option<&str>,
) -> Result<(RawConfig, RunConfig), ConfigError> {
    let mut raw = RawConfig::defaults();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("reading config {}: {e}", path.display())))?;
        raw.apply_file(&text, &path.display().to_string())?;
    }
    raw.apply_env(env)?;
    for s in sets {
        raw.apply_set(s)?;
    }
    if let Some(out) = out_flag {
        raw.override_key("out", out)?;
    }
    let typed = RunConfig::from_raw(&raw)?;
    Ok((raw, typed))
}
