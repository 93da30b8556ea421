//! Flat `key = value` run configuration. `#` starts a comment, unknown and
//! repeated keys are rejected, and command-line overrides win over the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msdamil::data::CorpusConfig;
use msdamil::model::ModelConfig;
use msdamil::train::{Mode, TrainConfig};
use msdamil::{Error, Result};

/// Every key the file may contain.
pub const KNOWN_KEYS: [&str; 32] = [
    "seed",
    "corpus_dir",
    "checkpoint_dir",
    "output_dir",
    "mode",
    "train_scales",
    "split",
    "slides_per_class",
    "scales",
    "patch_size",
    "regions_per_slide",
    "bag_size",
    "max_bags",
    "tumor_rate",
    "shift_strength",
    "scale_split",
    "fine_amplitude",
    "coarse_amplitude",
    "conv1_channels",
    "conv2_channels",
    "kernel_size",
    "embed_dim",
    "attention_hidden",
    "domain_hidden",
    "learning_rate",
    "momentum",
    "epochs",
    "alpha",
    "alpha_grid",
    "resample_bags",
    "augment_threshold",
    "heatmap_cell_px",
];

/// Raw key/value pairs before typing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            let key = key.trim();
            check_known(key)?;
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: key `{key}` given twice", n + 1)));
            }
        }
        Ok(RawConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RawConfig::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not `key=value`")))?;
        let key = key.trim();
        check_known(key)?;
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("key `{key}`: cannot parse {v:?}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("key `{key}`: cannot parse {v:?}"))))
                    .collect()
            })
            .transpose()
    }
}

fn check_known(key: &str) -> Result<()> {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key `{key}`")))
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected true or false, got {v:?}"))),
    }
}

/// Typed run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub mode: Mode,
    pub train_scales: Vec<usize>,
    pub split: (f64, f64, f64),
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Empty means use `train.alpha` without validation.
    pub alpha_grid: Vec<f64>,
    pub heatmap_cell_px: usize,
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let seed = raw.parsed("seed")?.ok_or_else(|| missing("seed"))?;
        let bool_key = |key: &str, default: bool| raw.get(key).map_or(Ok(default), |v| parse_bool(key, v));
        let cd = CorpusConfig::default();
        let corpus = CorpusConfig {
            slides_per_class: raw.or("slides_per_class", cd.slides_per_class)?,
            scales: raw.or("scales", cd.scales)?,
            patch_size: raw.or("patch_size", cd.patch_size)?,
            regions_per_slide: raw.or("regions_per_slide", cd.regions_per_slide)?,
            bag_size: raw.or("bag_size", cd.bag_size)?,
            max_bags: raw.or("max_bags", cd.max_bags)?,
            tumor_rate: raw.or("tumor_rate", cd.tumor_rate)?,
            shift_strength: raw.or("shift_strength", cd.shift_strength)?,
            scale_split: bool_key("scale_split", cd.scale_split)?,
            fine_amplitude: raw.or("fine_amplitude", cd.fine_amplitude)?,
            coarse_amplitude: raw.or("coarse_amplitude", cd.coarse_amplitude)?,
            seed,
        };
        corpus.validate()?;
        let md = ModelConfig::default();
        let model = ModelConfig {
            in_channels: 3,
            patch_size: corpus.patch_size,
            conv1_channels: raw.or("conv1_channels", md.conv1_channels)?,
            conv2_channels: raw.or("conv2_channels", md.conv2_channels)?,
            kernel_size: raw.or("kernel_size", md.kernel_size)?,
            embed_dim: raw.or("embed_dim", md.embed_dim)?,
            attention_hidden: raw.or("attention_hidden", md.attention_hidden)?,
            domain_hidden: raw.or("domain_hidden", md.domain_hidden)?,
        };
        model.validate()?;
        let td = TrainConfig::default();
        let train = TrainConfig {
            learning_rate: raw.or("learning_rate", td.learning_rate)?,
            momentum: raw.or("momentum", td.momentum)?,
            epochs: raw.or("epochs", td.epochs)?,
            alpha: raw.or("alpha", td.alpha)?,
            bag_size: corpus.bag_size,
            max_bags: corpus.max_bags,
            resample_bags: bool_key("resample_bags", td.resample_bags)?,
            augment_threshold: raw.or("augment_threshold", td.augment_threshold)?,
            seed,
        };
        train.validate()?;
        let split = match raw.list::<f64>("split")?.as_deref() {
            None => (0.6, 0.2, 0.2),
            Some(&[a, b, c]) => (a, b, c),
            Some(other) => return Err(Error::Config(format!("key `split`: expected three fractions, got {other:?}"))),
        };
        let train_scales = raw.list("train_scales")?.unwrap_or_else(|| corpus.scale_ids());
        if train_scales.is_empty() || train_scales.iter().any(|s| !corpus.scale_ids().contains(s)) {
            return Err(Error::Config(format!(
                "key `train_scales`: {train_scales:?} not within the corpus scales {:?}",
                corpus.scale_ids()
            )));
        }
        let alpha_grid: Vec<f64> = raw.list("alpha_grid")?.unwrap_or_default();
        if alpha_grid.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config(format!("key `alpha_grid`: values must be positive, got {alpha_grid:?}")));
        }
        let heatmap_cell_px = raw.or("heatmap_cell_px", 8)?;
        if heatmap_cell_px == 0 {
            return Err(Error::Config("key `heatmap_cell_px` must be positive".into()));
        }
        Ok(RunConfig {
            seed,
            corpus_dir: raw.get("corpus_dir").map(PathBuf::from),
            checkpoint_dir: raw.get("checkpoint_dir").map(PathBuf::from),
            output_dir: raw.get("output_dir").map(PathBuf::from),
            mode: raw.or("mode", Mode::Msdamil)?,
            train_scales,
            split,
            corpus,
            model,
            train,
            alpha_grid,
            heatmap_cell_px,
        })
    }

    pub fn corpus_dir(&self) -> Result<&Path> {
        self.corpus_dir.as_deref().ok_or_else(|| missing("corpus_dir"))
    }

    pub fn checkpoint_dir(&self) -> Result<&Path> {
        self.checkpoint_dir.as_deref().ok_or_else(|| missing("checkpoint_dir"))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir.as_deref().ok_or_else(|| missing("output_dir"))
    }

    /// Candidate α values: the grid if given, otherwise the single `alpha`.
    pub fn alphas(&self) -> Vec<f64> {
        if self.alpha_grid.is_empty() {
            vec![self.train.alpha]
        } else {
            self.alpha_grid.clone()
        }
    }
}

fn missing(key: &str) -> Error {
    Error::Config(format!("missing required key `{key}`"))
}
