use rand::Rng;

use super::history::EpochRecord;
use super::optim::{sgd_momentum_step, OptimizerState};
use super::prepare::{
    check_finite, epoch_order, mean, shuffled_rows, stream_rng, training_bags, STREAM_INIT, STREAM_ORDER,
};
use super::TrainConfig;
use crate::data::{ClassLabel, Slide};
use crate::error::{Error, Result};
use crate::model::{extractor_forward, FeatureExtractorParams, Linear, ModelConfig, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Patch-level classifier: the extractor followed by `fc → relu → linear → softmax`,
/// trained with every patch labelled as its slide.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchClassifier<T> {
    pub extractor: FeatureExtractorParams<T>,
    pub fc: Linear<T>,
    pub classifier: Linear<T>,
}

impl<T: Scalar> PatchClassifier<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, scale: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let extractor = FeatureExtractorParams::init(cfg, scale, rng);
        let fc = Linear::init(extractor.feature_dim(), cfg.embed_dim, rng);
        let classifier = Linear::init(cfg.embed_dim, 2, rng);
        Ok(PatchClassifier {
            extractor,
            fc,
            classifier,
        })
    }

    fn bind_all(&self, g: &mut Graph<T>, trainable: bool) -> (Vec<Var>, Vec<Var>) {
        let ex = self.extractor.bind(g, trainable).vars();
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let head = vec![
            leaf(g, &self.fc.weight),
            leaf(g, &self.fc.bias),
            leaf(g, &self.classifier.weight),
            leaf(g, &self.classifier.bias),
        ];
        (ex, head)
    }

    fn forward(&self, g: &mut Graph<T>, batch: &Tensor<T>, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let (ex, head) = self.bind_all(g, trainable);
        let ex_vars = crate::model::ExtractorVars {
            conv1_kernels: ex[0],
            conv1_bias: ex[1],
            conv2_kernels: ex[2],
            conv2_bias: ex[3],
        };
        let x = g.constant(batch.clone());
        let h = extractor_forward(g, &ex_vars, x)?;
        let h = g.linear(h, head[0], head[1])?;
        let h = g.relu(h);
        let logits = g.linear(h, head[2], head[3])?;
        let probs = g.softmax(logits)?;
        Ok((probs, ex.into_iter().chain(head).collect()))
    }

    /// `[P(negative), P(positive)]` for every patch of a batch `[n×c×p×p]`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<[f64; 2]>> {
        let mut g = Graph::new();
        let (probs, _) = self.forward(&mut g, batch, false)?;
        Ok(g.value(probs)
            .data()
            .chunks_exact(2)
            .map(|p| [p[0].as_f64(), p[1].as_f64()])
            .collect())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.extractor.tensors_mut();
        v.extend([
            &mut self.fc.weight,
            &mut self.fc.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]);
        v
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.extractor.tensors();
        v.extend([&self.fc.weight, &self.fc.bias, &self.classifier.weight, &self.classifier.bias]);
        v
    }

    /// Mean patch cross entropy over a batch and one momentum step.
    pub fn step(
        &mut self,
        opt: &mut OptimizerState<T>,
        batch: &Tensor<T>,
        label: ClassLabel,
        cfg: &TrainConfig,
        batch_id: &str,
    ) -> Result<f64> {
        let n = batch.shape()[0];
        let mut g = Graph::new();
        let (probs, vars) = self.forward(&mut g, batch, true)?;
        let target: Vec<T> = (0..n).flat_map(|_| label.one_hot::<T>().into_data()).collect();
        let per_patch = g.cross_entropy(&Tensor::new(vec![n, 2], target)?, probs)?;
        let loss = g.mean(per_patch);
        let value = g.value(loss).item().as_f64();
        check_finite(batch_id, "patch loss", value)?;
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor<T>> = vars
            .into_iter()
            .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
            .collect();
        sgd_momentum_step(
            &mut self.params_mut(),
            &grads.iter().collect::<Vec<_>>(),
            opt,
            T::of(cfg.learning_rate),
            T::of(cfg.momentum),
        )?;
        Ok(value)
    }
}

#[derive(Clone, Debug)]
pub struct PatchOutcome {
    pub model: PatchClassifier<f32>,
    pub history: Vec<EpochRecord>,
}

/// Offset keeping the baseline's random streams apart from stage 1.
pub const PATCH_STREAM: u64 = 0x1000;

/// Trains the patch baseline at one scale. Batches are the same bags the
/// MIL modes use, so every mode sees identical patches per step.
pub fn patch_train(
    slides: &[&Slide],
    scale: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &PatchClassifier<f32>) -> Result<()>,
) -> Result<PatchOutcome> {
    cfg.validate()?;
    if slides.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = stream_rng(cfg.seed, STREAM_INIT, PATCH_STREAM + scale as u64);
    let mut model = PatchClassifier::init(model_cfg, scale, &mut rng)?;
    let mut history = Vec::new();
    if cfg.epochs == 0 {
        return Ok(PatchOutcome { model, history });
    }
    let mut opt = OptimizerState::new(&model.params());
    let mut order_rng = stream_rng(cfg.seed, STREAM_ORDER, PATCH_STREAM + scale as u64);
    let mut bags = training_bags::<f32>(slides, &[scale], cfg, 0)?;
    for epoch in 1..=cfg.epochs {
        if cfg.resample_bags && epoch > 1 {
            bags = training_bags(slides, &[scale], cfg, epoch as u64)?;
        }
        let mut losses = Vec::new();
        for (s, b) in epoch_order(&bags, &mut order_rng) {
            let bag = &bags[s][b];
            let batch = shuffled_rows(&bag.batches[&scale], &mut order_rng);
            losses.push(model.step(&mut opt, &batch, bag.label, cfg, &bag.id)?);
        }
        let record = EpochRecord {
            epoch,
            scale: Some(scale),
            bag_loss: mean(&losses),
            domain_loss: f64::NAN,
            weighted_domain_loss: f64::NAN,
            lambda: 0.0,
        };
        on_epoch(&record, &model)?;
        history.push(record);
    }
    Ok(PatchOutcome { model, history })
}
