use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::aggregate::{patch_baseline_probability, slide_probability};
use super::heatmap::HeatCell;
use super::metrics::{compute_metrics, Metrics, DEFAULT_THRESHOLD};
use crate::data::{derive_seed, extract_bags, Bag, ClassLabel, Patch, Slide};
use crate::error::{Error, Result};
use crate::model::{bag_predict, multiscale_bag_predict, BagOutput};
use crate::tensor::Tensor;
use crate::train::{Checkpoint, Mode, MultiScaleModel, PatchClassifier, Stage1Model, TrainConfig};

/// Most patches per slide scored by the patch baseline.
pub const PATCH_CAP: usize = 5000;
const PATCH_BATCH: usize = 64;
const EVAL_STREAM: u64 = 4 << 32;

/// How evaluation bags are cut from a slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BagSampling {
    pub bag_size: usize,
    pub max_bags: usize,
    pub seed: u64,
}

impl From<&TrainConfig> for BagSampling {
    fn from(cfg: &TrainConfig) -> Self {
        BagSampling {
            bag_size: cfg.bag_size,
            max_bags: cfg.max_bags,
            seed: derive_seed(cfg.seed, EVAL_STREAM),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceInfo {
    pub region_id: usize,
    pub position: Option<(usize, usize)>,
    pub signal: Option<bool>,
}

/// Output of one bag. `attentions`, `instance_scales` and `instances` are
/// aligned: in multi-scale mode every region appears once per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction {
    pub bag_id: String,
    pub probs: [f64; 2],
    pub attentions: Vec<f64>,
    pub instance_scales: Vec<usize>,
    pub instances: Vec<InstanceInfo>,
}

impl BagPrediction {
    fn from_output(bag: &Bag, out: &BagOutput<f32>) -> Self {
        let n = bag.instances.len();
        let infos: Vec<InstanceInfo> = bag
            .instances
            .iter()
            .map(|i| InstanceInfo {
                region_id: i.region_id,
                position: i.position,
                signal: i.signal,
            })
            .collect();
        let copies = out.attentions.len() / n.max(1);
        BagPrediction {
            bag_id: bag.id.clone(),
            probs: [out.class_probs.data()[0] as f64, out.class_probs.data()[1] as f64],
            attentions: out.attentions.iter().map(|&a| a as f64).collect(),
            instance_scales: out.instance_scales.clone(),
            instances: (0..copies).flat_map(|_| infos.iter().cloned()).collect(),
        }
    }

    pub fn heat_cells(&self) -> Vec<HeatCell> {
        self.instances
            .iter()
            .zip(&self.attentions)
            .zip(&self.instance_scales)
            .map(|((inst, &a), &s)| HeatCell {
                scale: s,
                position: inst.position,
                attention: a,
            })
            .collect()
    }

    /// Total attention per scale.
    pub fn attention_mass(&self) -> BTreeMap<usize, f64> {
        let mut mass = BTreeMap::new();
        for (&s, &a) in self.instance_scales.iter().zip(&self.attentions) {
            *mass.entry(s).or_insert(0.0) += a;
        }
        mass
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub label: ClassLabel,
    pub probability: f64,
    /// Empty for the patch baseline.
    pub bags: Vec<BagPrediction>,
}

impl SlidePrediction {
    pub fn bag_probs(&self) -> Vec<[f64; 2]> {
        self.bags.iter().map(|b| b.probs).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mode: Mode,
    pub metrics: Metrics,
    pub predictions: Vec<SlidePrediction>,
}

/// A trained model ready to score slides.
#[derive(Clone, Debug)]
pub enum Predictor {
    Patch(PatchClassifier<f32>),
    SingleScale(Stage1Model<f32>),
    MultiScale(MultiScaleModel<f32>),
}

impl Predictor {
    /// Loads the model for `mode`, refusing checkpoints of another mode.
    pub fn from_checkpoint(ckpt: &Checkpoint, mode: Mode) -> Result<Self> {
        let mismatch = || Error::IncompatibleCheckpoint {
            expected: match mode {
                Mode::Msdamil => "msdamil checkpoint with at least 2 scales".to_string(),
                other => format!("{other} checkpoint"),
            },
            found: format!("{} checkpoint with scales {:?}", ckpt.mode, ckpt.scales),
        };
        if ckpt.mode != mode || (mode == Mode::Msdamil && ckpt.scales.len() < 2) {
            return Err(mismatch());
        }
        Ok(match mode {
            Mode::Patch => Predictor::Patch(ckpt.patch_model()?),
            Mode::Mil | Mode::Damil => Predictor::SingleScale(ckpt.stage1_model()?),
            Mode::Msdamil => Predictor::MultiScale(ckpt.multiscale_model()?),
        })
    }

    pub fn scales(&self) -> Vec<usize> {
        match self {
            Predictor::Patch(m) => vec![m.extractor.scale],
            Predictor::SingleScale(m) => vec![m.scale()],
            Predictor::MultiScale(m) => m.scales(),
        }
    }

    /// Bag-level output; not available for the patch baseline.
    pub fn predict_bag(&self, bag: &Bag) -> Result<BagPrediction> {
        let out = match self {
            Predictor::Patch(_) => {
                return Err(Error::Argument("the patch baseline does not score bags".into()));
            }
            Predictor::SingleScale(m) => bag_predict(&bag.tensors(m.scale())?, &m.extractor, &m.head)?,
            Predictor::MultiScale(m) => {
                let per_scale = m
                    .extractors
                    .iter()
                    .map(|e| Ok((e.scale, bag.tensors(e.scale)?)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                multiscale_bag_predict(&per_scale, &m.extractors, &m.head)?
            }
        };
        Ok(BagPrediction::from_output(bag, &out))
    }

    pub fn predict_slide(&self, slide: &Slide, sampling: &BagSampling) -> Result<SlidePrediction> {
        if let Predictor::Patch(m) = self {
            let scale = m.extractor.scale;
            let patches: Vec<&Patch> = slide
                .regions
                .iter()
                .take(PATCH_CAP)
                .map(|r| {
                    r.patches
                        .get(&scale)
                        .ok_or_else(|| Error::Data(format!("slide {} has no patches at scale {scale}", slide.id)))
                })
                .collect::<Result<_>>()?;
            let mut probs = Vec::with_capacity(patches.len());
            for chunk in patches.chunks(PATCH_BATCH) {
                let batch = Tensor::stack(&chunk.iter().map(|p| p.to_tensor::<f32>()).collect::<Vec<_>>())?;
                probs.extend(m.predict(&batch)?);
            }
            return Ok(SlidePrediction {
                slide_id: slide.id.clone(),
                label: slide.label,
                probability: patch_baseline_probability(&probs)?,
                bags: Vec::new(),
            });
        }
        let bags = extract_bags(slide, sampling.bag_size, sampling.max_bags, sampling.seed)?;
        let bags = bags.iter().map(|b| self.predict_bag(b)).collect::<Result<Vec<_>>>()?;
        let probability = slide_probability(&bags.iter().map(|b| b.probs).collect::<Vec<_>>())?;
        Ok(SlidePrediction {
            slide_id: slide.id.clone(),
            label: slide.label,
            probability,
            bags,
        })
    }
}

/// Scores every slide and computes metrics at the default threshold.
pub fn evaluate_predictor(
    predictor: &Predictor,
    mode: Mode,
    slides: &[&Slide],
    sampling: &BagSampling,
) -> Result<Evaluation> {
    let predictions = slides
        .iter()
        .map(|s| predictor.predict_slide(s, sampling))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<(f64, ClassLabel)> = predictions.iter().map(|p| (p.probability, p.label)).collect();
    Ok(Evaluation {
        mode,
        metrics: compute_metrics(&scored, DEFAULT_THRESHOLD)?,
        predictions,
    })
}

/// Full evaluation pipeline of `mode` from a checkpoint.
pub fn evaluate_corpus(ckpt: &Checkpoint, slides: &[&Slide], mode: Mode, sampling: &BagSampling) -> Result<Evaluation> {
    let predictor = Predictor::from_checkpoint(ckpt, mode)?;
    evaluate_predictor(&predictor, mode, slides, sampling)
}

pub const PREDICTIONS_HEADER: &str = "slide_id\tP_pos\ttrue_label\tmode";

/// Per-slide records; probabilities use the shortest exact decimal form.
pub fn format_predictions(eval: &Evaluation) -> String {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for p in &eval.predictions {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", p.slide_id, p.probability, p.label, eval.mode);
    }
    out
}

/// Parses records written by [`format_predictions`] into `(P, label)` pairs.
pub fn parse_predictions(text: &str) -> Result<Vec<(String, f64, ClassLabel)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PREDICTIONS_HEADER) {
        return Err(Error::Data("predictions file has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Data(format!("bad predictions row {l:?}")));
            }
            let p = f[1].parse().map_err(|_| Error::Data(format!("bad probability {:?}", f[1])))?;
            Ok((f[0].to_string(), p, f[2].parse()?))
        })
        .collect()
}
