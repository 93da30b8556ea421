use std::collections::BTreeMap;

use super::history::EpochRecord;
use super::optim::{sgd_momentum_step, OptimizerState};
use super::prepare::{
    check_finite, epoch_order, mean, shuffled_rows, stream_rng, training_bags, STREAM_INIT, STREAM_ORDER,
};
use super::TrainConfig;
use crate::data::{ClassLabel, Slide};
use crate::error::{Error, Result};
use crate::model::{extractor_forward, head_forward, BagPredictorParams, FeatureExtractorParams, ModelConfig, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Frozen per-scale extractors plus one head shared by every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleModel<T> {
    pub extractors: Vec<FeatureExtractorParams<T>>,
    pub head: BagPredictorParams<T>,
}

impl<T: Scalar> MultiScaleModel<T> {
    pub fn scales(&self) -> Vec<usize> {
        self.extractors.iter().map(|e| e.scale).collect()
    }
}

/// Sub-stream of the init stream used for the shared head.
pub const SHARED_HEAD_STREAM: u64 = 0xFFFF;

/// Extractor features of every instance of a batch `[n×c×p×p]`, as `[n×Q]`.
pub fn batch_features<T: Scalar>(extractor: &FeatureExtractorParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = extractor.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let h = extractor_forward(&mut g, &vars, x)?;
    Ok(g.value(h).clone())
}

/// Bag loss and head update from precomputed features `[n×Q]`.
pub fn stage2_step<T: Scalar>(
    head: &mut BagPredictorParams<T>,
    opt: &mut OptimizerState<T>,
    features: &Tensor<T>,
    label: ClassLabel,
    cfg: &TrainConfig,
    bag_id: &str,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = head.bind(&mut g, true);
    let h = g.constant(features.clone());
    let nodes = head_forward(&mut g, &vars, h)?;
    let loss = g.cross_entropy(&label.one_hot(), nodes.probs)?;
    let value = g.value(loss).item().as_f64();
    check_finite(bag_id, "bag loss", value)?;
    let mut grads = g.backward(loss)?;
    let grads: Vec<Tensor<T>> = vars
        .vars()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
        .collect();
    sgd_momentum_step(
        &mut head.tensors_mut(),
        &grads.iter().collect::<Vec<_>>(),
        opt,
        T::of(cfg.learning_rate),
        T::of(cfg.momentum),
    )?;
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub model: MultiScaleModel<f32>,
    pub history: Vec<EpochRecord>,
}

/// Orders `extractors` by `scales`, failing on the first scale without one.
pub fn extractors_for_scales<T: Scalar>(
    extractors: &[FeatureExtractorParams<T>],
    scales: &[usize],
) -> Result<Vec<FeatureExtractorParams<T>>> {
    let by_scale: BTreeMap<usize, &FeatureExtractorParams<T>> = extractors.iter().map(|e| (e.scale, e)).collect();
    scales
        .iter()
        .map(|s| by_scale.get(s).map(|e| (*e).clone()).ok_or(Error::MissingScale(*s)))
        .collect()
}

/// Trains a freshly initialised shared head on the concatenated features of
/// all scales. The extractors are only read: features are computed once up
/// front, so they cannot change during training.
pub fn stage2_train(
    slides: &[&Slide],
    extractors: &[FeatureExtractorParams<f32>],
    scales: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &MultiScaleModel<f32>) -> Result<()>,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    if scales.is_empty() {
        return Err(Error::Config("stage 2 needs at least one scale".into()));
    }
    let extractors = extractors_for_scales(extractors, scales)?;
    let dims: Vec<usize> = extractors.iter().map(|e| e.feature_dim()).collect();
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config(format!("extractor feature dimensions differ across scales: {dims:?}")));
    }
    let mut rng = stream_rng(cfg.seed, STREAM_INIT, SHARED_HEAD_STREAM);
    let head = BagPredictorParams::init(model_cfg, dims[0], &mut rng);
    let mut model = MultiScaleModel { extractors, head };
    let mut history = Vec::new();
    if cfg.epochs == 0 {
        return Ok(Stage2Outcome { model, history });
    }

    let frozen = model.extractors.clone();
    let features = |round: u64| -> Result<Vec<Vec<(String, ClassLabel, Tensor<f32>)>>> {
        training_bags::<f32>(slides, scales, cfg, round)?
            .into_iter()
            .map(|group| {
                group
                    .into_iter()
                    .map(|bag| {
                        let parts = frozen
                            .iter()
                            .map(|e| batch_features(e, &bag.batches[&e.scale]))
                            .collect::<Result<Vec<_>>>()?;
                        Ok((bag.id, bag.label, concat_rows(&parts)?))
                    })
                    .collect()
            })
            .collect()
    };
    let mut bags = features(0)?;
    let mut opt = OptimizerState::new(&model.head.tensors());
    let mut order_rng = stream_rng(cfg.seed, STREAM_ORDER, SHARED_HEAD_STREAM);
    for epoch in 1..=cfg.epochs {
        if cfg.resample_bags && epoch > 1 {
            bags = features(epoch as u64)?;
        }
        let mut losses = Vec::new();
        for (s, b) in epoch_order(&bags, &mut order_rng) {
            let (id, label, feats) = &bags[s][b];
            let feats = shuffled_rows(feats, &mut order_rng);
            losses.push(stage2_step(&mut model.head, &mut opt, &feats, *label, cfg, id)?);
        }
        let record = EpochRecord {
            epoch,
            scale: None,
            bag_loss: mean(&losses),
            domain_loss: f64::NAN,
            weighted_domain_loss: f64::NAN,
            lambda: 0.0,
        };
        on_epoch(&record, &model)?;
        history.push(record);
    }
    Ok(Stage2Outcome { model, history })
}

/// Stacks `[n_i×Q]` matrices vertically.
pub fn concat_rows<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
    let q = first.shape()[1];
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.rank() != 2 || p.shape()[1] != q {
            return Err(Error::shape("concat_rows", first.shape(), p.shape()));
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, q], data)
}
