//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `MSDM`, then `u32` version, scale count and tensor count,
//! then one record per tensor: `u32` name length, UTF-8 name, `u32` rank,
//! `u32` dims, `f32` values. Records are sorted by name. Run metadata is kept
//! in `meta.*` tensors so the file stays self-describing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::patch::PatchClassifier;
use super::stage1::Stage1Model;
use super::stage2::MultiScaleModel;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{BagPredictorParams, Conv, DomainPredictorParams, FeatureExtractorParams, Linear, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MSDM";
pub const VERSION: u32 = 1;

/// Which model family a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Patch,
    Mil,
    Damil,
    Msdamil,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Patch, Mode::Mil, Mode::Damil, Mode::Msdamil];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Patch => "patch",
            Mode::Mil => "mil",
            Mode::Damil => "damil",
            Mode::Msdamil => "msdamil",
        }
    }

    fn code(self) -> f32 {
        Mode::ALL.iter().position(|&m| m == self).expect("listed") as f32
    }

    fn from_code(code: f32) -> Option<Mode> {
        Mode::ALL.iter().copied().find(|m| m.code() == code)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected patch, mil, damil or msdamil")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: Mode,
    pub scales: Vec<usize>,
    pub epoch: usize,
    pub patch_size: usize,
    /// Training settings echoed for provenance; reals are stored as f32.
    pub config: TrainConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn insert_set<P: ParamSet<f32>>(tensors: &mut BTreeMap<String, Tensor<f32>>, prefix: &str, set: &P) {
    for (name, t) in set.named_tensors() {
        tensors.insert(format!("{prefix}.{name}"), t.clone());
    }
}

impl Checkpoint {
    fn empty(mode: Mode, scales: Vec<usize>, epoch: usize, patch_size: usize, cfg: &TrainConfig) -> Self {
        Checkpoint {
            mode,
            scales,
            epoch,
            patch_size,
            config: cfg.clone(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_stage1(model: &Stage1Model<f32>, mode: Mode, epoch: usize, cfg: &TrainConfig) -> Result<Self> {
        if !matches!(mode, Mode::Mil | Mode::Damil) {
            return Err(Error::Argument(format!("a stage-1 model cannot be saved as {mode}")));
        }
        let s = model.scale();
        let mut c = Checkpoint::empty(mode, vec![s], epoch, model.extractor.patch_size, cfg);
        insert_set(&mut c.tensors, &format!("f{s}"), &model.extractor);
        insert_set(&mut c.tensors, &format!("y{s}"), &model.head);
        insert_set(&mut c.tensors, &format!("d{s}"), &model.domain);
        Ok(c)
    }

    pub fn from_patch(model: &PatchClassifier<f32>, epoch: usize, cfg: &TrainConfig) -> Self {
        let s = model.extractor.scale;
        let mut c = Checkpoint::empty(Mode::Patch, vec![s], epoch, model.extractor.patch_size, cfg);
        insert_set(&mut c.tensors, &format!("f{s}"), &model.extractor);
        for (name, t) in [
            ("fc.weight", &model.fc.weight),
            ("fc.bias", &model.fc.bias),
            ("classifier.weight", &model.classifier.weight),
            ("classifier.bias", &model.classifier.bias),
        ] {
            c.tensors.insert(format!("p{s}.{name}"), t.clone());
        }
        c
    }

    pub fn from_multiscale(model: &MultiScaleModel<f32>, epoch: usize, cfg: &TrainConfig) -> Result<Self> {
        let first = model
            .extractors
            .first()
            .ok_or_else(|| Error::Argument("multi-scale model without extractors".into()))?;
        let mut c = Checkpoint::empty(Mode::Msdamil, model.scales(), epoch, first.patch_size, cfg);
        for e in &model.extractors {
            insert_set(&mut c.tensors, &format!("f{}", e.scale), e);
        }
        insert_set(&mut c.tensors, "yall", &model.head);
        Ok(c)
    }

    fn get(&self, name: &str) -> Result<Tensor<f32>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn linear(&self, prefix: &str) -> Result<Linear<f32>> {
        Ok(Linear {
            weight: self.get(&format!("{prefix}.weight"))?,
            bias: self.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn extractor(&self, scale: usize) -> Result<FeatureExtractorParams<f32>> {
        if !self.scales.contains(&scale) {
            return Err(Error::MissingScale(scale));
        }
        let conv = |i: usize| -> Result<Conv<f32>> {
            Ok(Conv {
                kernels: self.get(&format!("f{scale}.conv{i}.kernels"))?,
                bias: self.get(&format!("f{scale}.conv{i}.bias"))?,
            })
        };
        Ok(FeatureExtractorParams {
            scale,
            patch_size: self.patch_size,
            conv1: conv(1)?,
            conv2: conv(2)?,
        })
    }

    fn head(&self, prefix: &str) -> Result<BagPredictorParams<f32>> {
        Ok(BagPredictorParams {
            fc: self.linear(&format!("{prefix}.fc"))?,
            attention_v: self.get(&format!("{prefix}.attention.v"))?,
            attention_w: self.get(&format!("{prefix}.attention.w"))?,
            classifier: self.linear(&format!("{prefix}.classifier"))?,
        })
    }

    fn incompatible(&self, expected: &str) -> Error {
        Error::IncompatibleCheckpoint {
            expected: expected.to_string(),
            found: format!("{} with scales {:?}", self.mode, self.scales),
        }
    }

    pub fn stage1_model(&self) -> Result<Stage1Model<f32>> {
        if !matches!(self.mode, Mode::Mil | Mode::Damil) || self.scales.len() != 1 {
            return Err(self.incompatible("a single-scale mil or damil checkpoint"));
        }
        let s = self.scales[0];
        Ok(Stage1Model {
            extractor: self.extractor(s)?,
            head: self.head(&format!("y{s}"))?,
            domain: DomainPredictorParams {
                hidden: self.linear(&format!("d{s}.hidden"))?,
                output: self.linear(&format!("d{s}.output"))?,
            },
        })
    }

    pub fn patch_model(&self) -> Result<PatchClassifier<f32>> {
        if self.mode != Mode::Patch || self.scales.len() != 1 {
            return Err(self.incompatible("a single-scale patch checkpoint"));
        }
        let s = self.scales[0];
        Ok(PatchClassifier {
            extractor: self.extractor(s)?,
            fc: self.linear(&format!("p{s}.fc"))?,
            classifier: self.linear(&format!("p{s}.classifier"))?,
        })
    }

    pub fn multiscale_model(&self) -> Result<MultiScaleModel<f32>> {
        if self.mode != Mode::Msdamil {
            return Err(self.incompatible("an msdamil checkpoint"));
        }
        Ok(MultiScaleModel {
            extractors: self.scales.iter().map(|&s| self.extractor(s)).collect::<Result<_>>()?,
            head: self.head("yall")?,
        })
    }

    fn meta(&self) -> Vec<(String, Tensor<f32>)> {
        let c = &self.config;
        let one = |v: f64| Tensor::vector(vec![v as f32]);
        let exact = |v: f64| Tensor::vector(split_u64(v.to_bits()));
        vec![
            ("meta.mode".into(), one(self.mode.code() as f64)),
            ("meta.epoch".into(), one(self.epoch as f64)),
            ("meta.patch_size".into(), one(self.patch_size as f64)),
            ("meta.scales".into(), Tensor::vector(self.scales.iter().map(|&s| s as f32).collect())),
            ("meta.seed".into(), Tensor::vector(split_u64(c.seed))),
            ("meta.learning_rate".into(), exact(c.learning_rate)),
            ("meta.momentum".into(), exact(c.momentum)),
            ("meta.epochs".into(), one(c.epochs as f64)),
            ("meta.alpha".into(), exact(c.alpha)),
            ("meta.bag_size".into(), one(c.bag_size as f64)),
            ("meta.max_bags".into(), one(c.max_bags as f64)),
            ("meta.resample_bags".into(), one(c.resample_bags as u8 as f64)),
            ("meta.augment_threshold".into(), one(c.augment_threshold as f64)),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut all: BTreeMap<&str, &Tensor<f32>> = self.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let meta = self.meta();
        for (k, v) in &meta {
            all.insert(k, v);
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, self.scales.len() as u32, all.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, t) in all {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let n_scales = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut take_meta = |key: &str| -> Result<Vec<f32>> {
            tensors
                .remove(&format!("meta.{key}"))
                .map(Tensor::into_data)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta.{key}")))
        };
        let first = |v: Vec<f32>| v[0] as f64;
        let mode_code = take_meta("mode")?[0];
        let mode = Mode::from_code(mode_code).ok_or_else(|| Error::Checkpoint(format!("unknown mode code {mode_code}")))?;
        let epoch = first(take_meta("epoch")?) as usize;
        let patch_size = first(take_meta("patch_size")?) as usize;
        let scales: Vec<usize> = take_meta("scales")?.into_iter().map(|s| s as usize).collect();
        let seed = join_u64(&take_meta("seed")?)?;
        let mut exact = |key: &str| -> Result<f64> { Ok(f64::from_bits(join_u64(&take_meta(key)?)?)) };
        let (learning_rate, momentum, alpha) = (exact("learning_rate")?, exact("momentum")?, exact("alpha")?);
        let config = TrainConfig {
            learning_rate,
            momentum,
            epochs: first(take_meta("epochs")?) as usize,
            alpha,
            bag_size: first(take_meta("bag_size")?) as usize,
            max_bags: first(take_meta("max_bags")?) as usize,
            resample_bags: first(take_meta("resample_bags")?) != 0.0,
            augment_threshold: first(take_meta("augment_threshold")?) as usize,
            seed,
        };
        if scales.len() != n_scales {
            return Err(Error::Checkpoint(format!(
                "header lists {n_scales} scales but metadata lists {}",
                scales.len()
            )));
        }
        Ok(Checkpoint {
            mode,
            scales,
            epoch,
            patch_size,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Four 16-bit chunks, each exact in an `f32`.
fn split_u64(v: u64) -> Vec<f32> {
    (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect()
}

fn join_u64(chunks: &[f32]) -> Result<u64> {
    if chunks.len() != 4 {
        return Err(Error::Checkpoint(format!("expected 4 chunks, found {}", chunks.len())));
    }
    Ok(chunks.iter().enumerate().fold(0u64, |acc, (i, &c)| acc | ((c as u64) << (16 * i))))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
