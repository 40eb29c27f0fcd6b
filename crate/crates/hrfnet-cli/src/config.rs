//! Run configuration: one merged, provenance-tracked view of every knob
//! the subcommands use. Values resolve in precedence order defaults <
//! config file < environment < flags, and the fully resolved config is
//! serialized next to each command's outputs so any run can be repeated
//! from its artifacts alone.
//!
//! The file format is flat dotted-key TOML, e.g.
//!
//! ```toml
//! seed = 7
//! data.height = 256
//! train.epochs = 2
//! ```
//!
//! Environment overrides use the `HRFNET_` prefix with `__` standing in
//! for the dot: `HRFNET_TRAIN__EPOCHS=2`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hrfnet::datasynth::{Split, SynthConfig};
use hrfnet::eval::AucMode;
use hrfnet::model::ModelConfig;
use hrfnet::train::TrainConfig;
use hrfnet::{Error, Result};
use toml::Value as TomlValue;

pub const ENV_PREFIX: &str = "HRFNET_";

/// Every recognized dotted key, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.height",
    "data.width",
    "paths.bases",
    "paths.data",
    "paths.out",
    "paths.image",
    "paths.checkpoint",
    "model.deep_input",
    "model.width_multiplier",
    "model.fusion_channels",
    "model.aspp_rates",
    "train.epochs",
    "train.batch_size",
    "train.lr0",
    "train.decay_factor",
    "train.decay_every",
    "train.tampered_weight",
    "train.augment_flips",
    "train.freeze_srm",
    "synth.count",
    "synth.make_bases",
    "synth.split_fractions",
    "synth.region_sizes",
    "synth.feather_radius",
    "eval.auc_mode",
    "eval.split",
    "eval.threshold",
    "eval.samples",
    "bench.iters",
    "bench.warmup",
    "bench.widths",
];

/// Which layer last set a config value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl Source {
    fn as_str(&self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PathParams {
    pub bases: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct EvalParams {
    pub auc_mode: AucMode,
    pub split: Split,
    pub threshold: f64,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct BenchParams {
    pub iters: usize,
    pub warmup: usize,
    pub widths: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    /// Working resolution (rows, cols); feeds both the synthesized
    /// dataset size and the model's full-resolution input.
    pub data_size: (usize, usize),
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Synthesize this many base images into `paths.bases` before
    /// dataset generation when the directory has none.
    pub synth_make_bases: usize,
    pub eval: EvalParams,
    pub bench: BenchParams,
    pub paths: PathParams,
    provenance: BTreeMap<String, Source>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            data_size: model.full_res,
            model,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            synth_make_bases: 0,
            eval: EvalParams {
                auc_mode: AucMode::Pooled,
                split: Split::Test,
                threshold: 0.5,
                samples: 4,
            },
            bench: BenchParams { iters: 10, warmup: 3, widths: vec![1.0] },
            paths: PathParams::default(),
            provenance: KEYS.iter().map(|k| (k.to_string(), Source::Default)).collect(),
        }
    }
}

/// A value on its way into the config, either parsed TOML or raw text
/// from a flag or environment variable.
enum Raw<'a> {
    Toml(&'a TomlValue),
    Text(&'a str),
}

impl Raw<'_> {
    fn type_err(key: &str, want: &str) -> Error {
        Error::Config(format!("config key '{key}' expects {want}"))
    }

    fn u64_(&self, key: &str) -> Result<u64> {
        match self {
            Raw::Toml(TomlValue::Integer(i)) if *i >= 0 => Ok(*i as u64),
            Raw::Toml(_) => Err(Self::type_err(key, "a non-negative integer")),
            Raw::Text(s) => s
                .trim()
                .parse()
                .map_err(|_| Self::type_err(key, "a non-negative integer")),
        }
    }

    fn usize_(&self, key: &str) -> Result<usize> {
        Ok(self.u64_(key)? as usize)
    }

    fn f64_(&self, key: &str) -> Result<f64> {
        match self {
            Raw::Toml(TomlValue::Float(f)) => Ok(*f),
            Raw::Toml(TomlValue::Integer(i)) => Ok(*i as f64),
            Raw::Toml(_) => Err(Self::type_err(key, "a number")),
            Raw::Text(s) => s.trim().parse().map_err(|_| Self::type_err(key, "a number")),
        }
    }

    fn bool_(&self, key: &str) -> Result<bool> {
        match self {
            Raw::Toml(TomlValue::Boolean(b)) => Ok(*b),
            Raw::Toml(_) => Err(Self::type_err(key, "a boolean")),
            Raw::Text(s) => match s.trim() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Self::type_err(key, "a boolean")),
            },
        }
    }

    fn str_(&self, key: &str) -> Result<String> {
        match self {
            Raw::Toml(TomlValue::String(s)) => Ok(s.clone()),
            Raw::Toml(_) => Err(Self::type_err(key, "a string")),
            Raw::Text(s) => Ok(s.to_string()),
        }
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        match self {
            Raw::Toml(TomlValue::Array(a)) => a
                .iter()
                .map(|v| Raw::Toml(v).usize_(key))
                .collect(),
            Raw::Toml(_) => Err(Self::type_err(key, "a list of integers")),
            Raw::Text(s) => s
                .split(',')
                .map(|p| Raw::Text(p).usize_(key))
                .collect(),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        match self {
            Raw::Toml(TomlValue::Array(a)) => a.iter().map(|v| Raw::Toml(v).f64_(key)).collect(),
            Raw::Toml(_) => Err(Self::type_err(key, "a list of numbers")),
            Raw::Text(s) => s.split(',').map(|p| Raw::Text(p).f64_(key)).collect(),
        }
    }
}

fn parse_auc_mode(key: &str, s: &str) -> Result<AucMode> {
    match s {
        "pooled" => Ok(AucMode::Pooled),
        "per_image_mean" => Ok(AucMode::PerImageMean),
        other => Err(Error::Config(format!(
            "config key '{key}': unknown AUC mode '{other}' (pooled | per_image_mean)"
        ))),
    }
}

fn parse_split(key: &str, s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "config key '{key}': unknown split '{other}' (train | val | test)"
        ))),
    }
}

impl RunConfig {
    /// Resolve from defaults, then an optional config file, then
    /// `HRFNET_*` environment variables, then flag overrides.
    pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_env(|name| std::env::var(name).ok())?;
        for (key, value) in flags {
            cfg.set(key, Raw::Text(value), Source::Flag)?;
        }
        cfg.finalize();
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (key, value) in flat {
            self.set(&key, Raw::Toml(value), Source::File)?;
        }
        Ok(())
    }

    /// Apply environment overrides via a lookup function (injectable
    /// for tests; production passes `std::env::var`).
    pub fn apply_env<F: Fn(&str) -> Option<String>>(&mut self, lookup: F) -> Result<()> {
        for key in KEYS {
            if let Some(value) = lookup(&env_name(key)) {
                self.set(key, Raw::Text(&value), Source::Env)?;
            }
        }
        Ok(())
    }

    pub fn set_from_flag(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, Raw::Text(value), Source::Flag)
    }

    fn set(&mut self, key: &str, v: Raw, src: Source) -> Result<()> {
        match key {
            "seed" => self.seed = v.u64_(key)?,
            "data.height" => self.data_size.0 = v.usize_(key)?,
            "data.width" => self.data_size.1 = v.usize_(key)?,
            "paths.bases" => self.paths.bases = Some(PathBuf::from(v.str_(key)?)),
            "paths.data" => self.paths.data = Some(PathBuf::from(v.str_(key)?)),
            "paths.out" => self.paths.out = Some(PathBuf::from(v.str_(key)?)),
            "paths.image" => self.paths.image = Some(PathBuf::from(v.str_(key)?)),
            "paths.checkpoint" => self.paths.checkpoint = Some(PathBuf::from(v.str_(key)?)),
            "model.deep_input" => {
                let s = v.usize_(key)?;
                self.model.deep_input_size = (s, s);
            }
            "model.width_multiplier" => self.model.width_multiplier = v.f64_(key)?,
            "model.fusion_channels" => self.model.fusion_channels = v.usize_(key)?,
            "model.aspp_rates" => self.model.aspp_rates = v.usize_list(key)?,
            "train.epochs" => self.train.epochs = v.usize_(key)?,
            "train.batch_size" => self.train.batch_size = v.usize_(key)?,
            "train.lr0" => self.train.lr0 = v.f64_(key)?,
            "train.decay_factor" => self.train.decay_factor = v.f64_(key)?,
            "train.decay_every" => self.train.decay_every = v.usize_(key)?,
            "train.tampered_weight" => self.train.tampered_weight = v.f64_(key)?,
            "train.augment_flips" => self.train.augment_flips = v.bool_(key)?,
            "train.freeze_srm" => self.train.freeze_srm = v.bool_(key)?,
            "synth.count" => self.synth.count = v.usize_(key)?,
            "synth.make_bases" => self.synth_make_bases = v.usize_(key)?,
            "synth.split_fractions" => {
                let f = v.f64_list(key)?;
                if f.len() != 3 {
                    return Err(Error::Config(format!(
                        "config key '{key}' expects exactly three fractions"
                    )));
                }
                self.synth.split_fractions = (f[0], f[1], f[2]);
            }
            "synth.region_sizes" => self.synth.region_sizes = v.usize_list(key)?,
            "synth.feather_radius" => self.synth.feather_radius = v.usize_(key)?,
            "eval.auc_mode" => self.eval.auc_mode = parse_auc_mode(key, &v.str_(key)?)?,
            "eval.split" => self.eval.split = parse_split(key, &v.str_(key)?)?,
            "eval.threshold" => self.eval.threshold = v.f64_(key)?,
            "eval.samples" => self.eval.samples = v.usize_(key)?,
            "bench.iters" => self.bench.iters = v.usize_(key)?,
            "bench.warmup" => self.bench.warmup = v.usize_(key)?,
            "bench.widths" => self.bench.widths = v.f64_list(key)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        self.provenance.insert(key.to_string(), src);
        Ok(())
    }

    /// Propagate the shared knobs into the per-module configs.
    fn finalize(&mut self) {
        self.model.full_res = self.data_size;
        self.synth.size = self.data_size;
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
    }

    pub fn provenance(&self, key: &str) -> Source {
        self.provenance.get(key).copied().unwrap_or(Source::Default)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone()
    }

    pub fn synth_config(&self) -> SynthConfig {
        self.synth.clone()
    }

    fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Parameter(format!("missing required --{flag} (key paths.{flag})")))
    }

    pub fn require_bases(&self) -> Result<PathBuf> {
        Self::require(&self.paths.bases, "bases")
    }

    pub fn require_data(&self) -> Result<PathBuf> {
        Self::require(&self.paths.data, "data")
    }

    pub fn require_out(&self) -> Result<PathBuf> {
        Self::require(&self.paths.out, "out")
    }

    pub fn require_image(&self) -> Result<PathBuf> {
        Self::require(&self.paths.image, "image")
    }

    pub fn require_checkpoint(&self) -> Result<PathBuf> {
        Self::require(&self.paths.checkpoint, "checkpoint")
    }

    fn value_string(&self, key: &str) -> Option<String> {
        let f = |x: f64| format!("{x:?}");
        let fl = |xs: &[f64]| {
            let inner: Vec<String> = xs.iter().map(|&x| format!("{x:?}")).collect();
            format!("[{}]", inner.join(", "))
        };
        let il = |xs: &[usize]| {
            let inner: Vec<String> = xs.iter().map(usize::to_string).collect();
            format!("[{}]", inner.join(", "))
        };
        let p = |x: &Option<PathBuf>| {
            x.as_ref()
                .map(|p| TomlValue::String(p.to_string_lossy().into_owned()).to_string())
        };
        Some(match key {
            "seed" => self.seed.to_string(),
            "data.height" => self.data_size.0.to_string(),
            "data.width" => self.data_size.1.to_string(),
            "paths.bases" => return p(&self.paths.bases),
            "paths.data" => return p(&self.paths.data),
            "paths.out" => return p(&self.paths.out),
            "paths.image" => return p(&self.paths.image),
            "paths.checkpoint" => return p(&self.paths.checkpoint),
            "model.deep_input" => self.model.deep_input_size.0.to_string(),
            "model.width_multiplier" => f(self.model.width_multiplier),
            "model.fusion_channels" => self.model.fusion_channels.to_string(),
            "model.aspp_rates" => il(&self.model.aspp_rates),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr0" => f(self.train.lr0),
            "train.decay_factor" => f(self.train.decay_factor),
            "train.decay_every" => self.train.decay_every.to_string(),
            "train.tampered_weight" => f(self.train.tampered_weight),
            "train.augment_flips" => self.train.augment_flips.to_string(),
            "train.freeze_srm" => self.train.freeze_srm.to_string(),
            "synth.count" => self.synth.count.to_string(),
            "synth.make_bases" => self.synth_make_bases.to_string(),
            "synth.split_fractions" => {
                let (a, b, c) = self.synth.split_fractions;
                fl(&[a, b, c])
            }
            "synth.region_sizes" => il(&self.synth.region_sizes),
            "synth.feather_radius" => self.synth.feather_radius.to_string(),
            "eval.auc_mode" => match self.eval.auc_mode {
                AucMode::Pooled => "\"pooled\"".into(),
                AucMode::PerImageMean => "\"per_image_mean\"".into(),
            },
            "eval.split" => match self.eval.split {
                Split::Train => "\"train\"".into(),
                Split::Val => "\"val\"".into(),
                Split::Test => "\"test\"".into(),
            },
            "eval.threshold" => f(self.eval.threshold),
            "eval.samples" => self.eval.samples.to_string(),
            "bench.iters" => self.bench.iters.to_string(),
            "bench.warmup" => self.bench.warmup.to_string(),
            "bench.widths" => fl(&self.bench.widths),
            _ => return None,
        })
    }

    /// Serialize as a dotted-key config file with per-key provenance
    /// comments; loading the result reproduces this exact config.
    pub fn to_dotted_toml(&self) -> String {
        let mut out = String::from("# resolved run configuration (dotted keys, loadable via --config)\n");
        for key in KEYS {
            if let Some(value) = self.value_string(key) {
                let _ = writeln!(out, "{key} = {value}  # {}", self.provenance(key).as_str());
            }
        }
        out
    }

    /// Write the resolved config next to a command's outputs.
    pub fn write_beside(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("run_config.toml");
        std::fs::write(&path, self.to_dotted_toml())?;
        Ok(path)
    }
}

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "__"))
}

fn flatten<'a>(prefix: &str, table: &'a toml::Table, out: &mut Vec<(String, &'a TomlValue)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            TomlValue::Table(t) => flatten(&key, t, out),
            other => out.push((key, other)),
        }
    }
}
