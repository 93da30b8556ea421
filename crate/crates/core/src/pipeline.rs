//! Whole-mode runs on one train/validation/test split: the patch baseline,
//! single-scale MIL with and without domain adversary, and the two-stage
//! multi-scale model.

use std::collections::BTreeMap;

use crate::data::Slide;
use crate::error::{Error, Result};
use crate::eval::{evaluate_predictor, BagSampling, Evaluation, Predictor};
use crate::model::{domain_forward, DomainPredictorParams, FeatureExtractorParams, ModelConfig, ParamSet};
use crate::tensor::{Graph, Tensor};
use crate::train::{
    batch_features, epoch_order, patch_train, sgd_momentum_step, stage1_train, stage2_train, training_bags, Mode,
    OptimizerState, Stage1Outcome, TrainConfig,
};

/// Candidate values of the schedule hyperparameter.
pub const ALPHA_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// The adversarial stage-1 run kept after trying every candidate α.
#[derive(Clone, Debug)]
pub struct AlphaSelection {
    pub alpha: f64,
    pub outcome: Stage1Outcome,
    /// `(α, validation accuracy)` for every candidate, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Trains adversarial stage 1 once per α and keeps the most accurate model on
/// `val`; ties go to the earlier candidate. A single candidate skips validation.
pub fn select_alpha(
    train: &[&Slide],
    val: &[&Slide],
    scale: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<AlphaSelection> {
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    if grid.len() > 1 && val.is_empty() {
        return Err(Error::Config("alpha selection needs validation slides".into()));
    }
    let mut best: Option<(f64, f64, Stage1Outcome)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let cfg = TrainConfig { alpha, ..cfg.clone() };
        let outcome = stage1_train(train, scale, model_cfg, &cfg, true, |_, _| Ok(()))?;
        let accuracy = if grid.len() == 1 {
            f64::NAN
        } else {
            let predictor = Predictor::SingleScale(outcome.model.clone());
            evaluate_predictor(&predictor, Mode::Damil, val, &BagSampling::from(&cfg))?.metrics.accuracy
        };
        scores.push((alpha, accuracy));
        if best.as_ref().map_or(true, |(_, a, _)| accuracy > *a) {
            best = Some((alpha, accuracy, outcome));
        }
    }
    let (alpha, _, outcome) = best.expect("grid is not empty");
    Ok(AlphaSelection { alpha, outcome, scores })
}

/// Test results of one mode. Single-scale modes hold one evaluation per
/// scale and report their mean accuracy.
#[derive(Clone, Debug)]
pub struct ModeReport {
    pub mode: Mode,
    pub accuracy: f64,
    pub evaluations: Vec<Evaluation>,
    /// Selected α per scale (adversarial modes only).
    pub alphas: BTreeMap<usize, f64>,
}

/// Slides of a train/validation/test partition.
#[derive(Clone, Copy, Debug)]
pub struct SplitView<'a> {
    pub train: &'a [&'a Slide],
    pub val: &'a [&'a Slide],
    pub test: &'a [&'a Slide],
}

/// Runs each requested mode on `scales`. The multi-scale model reuses the
/// adversarial stage-1 extractors when `Damil` is also requested.
pub fn run_modes(
    split: SplitView<'_>,
    modes: &[Mode],
    scales: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<ModeReport>> {
    if scales.is_empty() {
        return Err(Error::Config("no scales to train".into()));
    }
    let sampling = BagSampling::from(cfg);
    let mut damil: Option<Vec<AlphaSelection>> = None;
    let damil_runs = |damil: &mut Option<Vec<AlphaSelection>>| -> Result<Vec<AlphaSelection>> {
        if damil.is_none() {
            *damil = Some(
                scales
                    .iter()
                    .map(|&s| select_alpha(split.train, split.val, s, model_cfg, cfg, grid))
                    .collect::<Result<_>>()?,
            );
        }
        Ok(damil.clone().expect("just filled"))
    };

    let mut reports = Vec::new();
    for &mode in modes {
        let mut alphas = BTreeMap::new();
        let predictors: Vec<Predictor> = match mode {
            Mode::Patch => scales
                .iter()
                .map(|&s| Ok(Predictor::Patch(patch_train(split.train, s, model_cfg, cfg, |_, _| Ok(()))?.model)))
                .collect::<Result<_>>()?,
            Mode::Mil => scales
                .iter()
                .map(|&s| {
                    let out = stage1_train(split.train, s, model_cfg, cfg, false, |_, _| Ok(()))?;
                    Ok(Predictor::SingleScale(out.model))
                })
                .collect::<Result<_>>()?,
            Mode::Damil => damil_runs(&mut damil)?
                .into_iter()
                .map(|sel| {
                    alphas.insert(sel.outcome.model.scale(), sel.alpha);
                    Predictor::SingleScale(sel.outcome.model)
                })
                .collect(),
            Mode::Msdamil => {
                let runs = damil_runs(&mut damil)?;
                let extractors: Vec<FeatureExtractorParams<f32>> = runs
                    .iter()
                    .map(|sel| {
                        alphas.insert(sel.outcome.model.scale(), sel.alpha);
                        sel.outcome.model.extractor.clone()
                    })
                    .collect();
                let out = stage2_train(split.train, &extractors, scales, model_cfg, cfg, |_, _| Ok(()))?;
                vec![Predictor::MultiScale(out.model)]
            }
        };
        let evaluations = predictors
            .iter()
            .map(|p| evaluate_predictor(p, mode, split.test, &sampling))
            .collect::<Result<Vec<_>>>()?;
        let accuracy = evaluations.iter().map(|e| e.metrics.accuracy).sum::<f64>() / evaluations.len() as f64;
        reports.push(ModeReport {
            mode,
            accuracy,
            evaluations,
            alphas,
        });
    }
    Ok(reports)
}

/// Settings of the domain probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 5,
            learning_rate: 1e-2,
            momentum: 0.9,
        }
    }
}

/// How well slide identity can be read from frozen features: trains a fresh
/// domain classifier on the instances of the training bags and returns its
/// accuracy on those same instances.
pub fn domain_probe_accuracy(
    extractor: &FeatureExtractorParams<f32>,
    slides: &[&Slide],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    probe: &ProbeConfig,
) -> Result<f64> {
    let scale = extractor.scale;
    let bags = training_bags::<f32>(slides, &[scale], cfg, 0)?;
    let groups: Vec<Vec<(usize, Tensor<f32>)>> = bags
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|b| Ok((b.domain, batch_features(extractor, &b.batches[&scale])?)))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let n_domains = slides.len();
    let mut rng = crate::train::probe_rng(cfg.seed, scale);
    let mut head = DomainPredictorParams::init(model_cfg, extractor.feature_dim(), n_domains, &mut rng)?;
    let mut opt = OptimizerState::new(&head.tensors());
    let targets = |domain: usize, n: usize| -> Result<Tensor<f32>> {
        let mut t = vec![0.0; n * n_domains];
        for row in 0..n {
            t[row * n_domains + domain] = 1.0;
        }
        Tensor::new(vec![n, n_domains], t)
    };
    for _ in 0..probe.epochs {
        for (s, b) in epoch_order(&groups, &mut rng) {
            let (domain, feats) = &groups[s][b];
            let n = feats.shape()[0];
            let mut g = Graph::new();
            let vars = head.bind(&mut g, true);
            let x = g.constant(feats.clone());
            let probs = domain_forward(&mut g, &vars, x)?;
            let ce = g.cross_entropy(&targets(*domain, n)?, probs)?;
            let loss = g.mean(ce);
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = vars
                .vars()
                .into_iter()
                .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
                .collect();
            sgd_momentum_step(
                &mut head.tensors_mut(),
                &grads.iter().collect::<Vec<_>>(),
                &mut opt,
                probe.learning_rate as f32,
                probe.momentum as f32,
            )?;
        }
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (domain, feats) in groups.iter().flatten() {
        let mut g = Graph::new();
        let vars = head.bind(&mut g, false);
        let x = g.constant(feats.clone());
        let probs = domain_forward(&mut g, &vars, x)?;
        for row in g.value(probs).data().chunks(n_domains) {
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &p)| if p > row[best] { i } else { best });
            hits += usize::from(argmax == *domain);
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}
