use rand::Rng;

use super::history::EpochRecord;
use super::optim::{lambda_schedule, sgd_momentum_step, OptimizerState};
use super::prepare::{
    check_finite, epoch_order, mean, shuffled_rows, stream_rng, training_bags, STREAM_INIT, STREAM_ORDER,
};
use super::TrainConfig;
use crate::data::{ClassLabel, Slide};
use crate::error::{Error, Result};
use crate::model::{
    beta_weights, domain_forward, extractor_forward, head_forward, BagPredictorParams, DomainPredictorParams,
    FeatureExtractorParams, ModelConfig, ParamSet,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Extractor, bag head and domain head of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model<T> {
    pub extractor: FeatureExtractorParams<T>,
    pub head: BagPredictorParams<T>,
    pub domain: DomainPredictorParams<T>,
}

impl<T: Scalar> Stage1Model<T> {
    /// Draws extractor, head and domain head in that order.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, scale: usize, n_domains: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let extractor = FeatureExtractorParams::init(cfg, scale, rng);
        let head = BagPredictorParams::init(cfg, extractor.feature_dim(), rng);
        let domain = DomainPredictorParams::init(cfg, extractor.feature_dim(), n_domains, rng)?;
        Ok(Stage1Model {
            extractor,
            head,
            domain,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Stage1Model<U> {
        Stage1Model {
            extractor: self.extractor.cast(),
            head: self.head.cast(),
            domain: self.domain.cast(),
        }
    }

    pub fn scale(&self) -> usize {
        self.extractor.scale
    }
}

/// Velocity buffers of the three parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Optimizer<T> {
    pub extractor: OptimizerState<T>,
    pub head: OptimizerState<T>,
    pub domain: OptimizerState<T>,
}

impl<T: Scalar> Stage1Optimizer<T> {
    pub fn new(model: &Stage1Model<T>) -> Self {
        Stage1Optimizer {
            extractor: OptimizerState::new(&model.extractor.tensors()),
            head: OptimizerState::new(&model.head.tensors()),
            domain: OptimizerState::new(&model.domain.tensors()),
        }
    }
}

/// Losses of one bag: class loss, mean domain loss, and the mean domain loss
/// weighted by each instance's attention gap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub bag_loss: f64,
    pub domain_loss: f64,
    pub weighted_domain_loss: f64,
}

/// Update directions of one bag, one tensor per parameter in `ParamSet` order.
///
/// * head: gradient of the bag loss
/// * domain: `λ ×` gradient of the unweighted domain loss, `None` when `λ = 0`
/// * extractor: gradient of the bag loss minus `λ ×` gradient of the weighted domain loss
#[derive(Clone, Debug)]
pub struct Stage1Gradients<T> {
    pub extractor: Vec<Tensor<T>>,
    pub head: Vec<Tensor<T>>,
    pub domain: Option<Vec<Tensor<T>>>,
    pub losses: StepLosses,
    pub attentions: Vec<T>,
}

/// Forward and backward pass for one bag `[n×c×p×p]` with slide label and domain index.
///
/// A single backward pass yields all three directions: the domain head reads
/// the features through a gradient scaler with row factors `−β_i`, and its
/// loss enters the objective with weight `λ`.
pub fn stage1_gradients<T: Scalar>(
    model: &Stage1Model<T>,
    batch: &Tensor<T>,
    label: ClassLabel,
    domain: usize,
    lambda: T,
) -> Result<Stage1Gradients<T>> {
    let n_domains = model.domain.n_domains();
    if domain >= n_domains {
        return Err(Error::Argument(format!("domain {domain} out of range for {n_domains} domains")));
    }
    if batch.rank() != 4 || batch.shape()[0] == 0 {
        return Err(Error::shape("stage1 batch", batch.shape(), &[0, 0, 0, 0]));
    }
    let n = batch.shape()[0];
    let mut g = Graph::new();
    let ex = model.extractor.bind(&mut g, true);
    let hd = model.head.bind(&mut g, true);
    let dm = model.domain.bind(&mut g, lambda != T::zero());

    let x = g.constant(batch.clone());
    let features = extractor_forward(&mut g, &ex, x)?;
    let nodes = head_forward(&mut g, &hd, features)?;
    let bag_loss = g.cross_entropy(&label.one_hot(), nodes.probs)?;
    let attentions = g.value(nodes.attentions).data().to_vec();
    let betas = beta_weights(&attentions);

    let mut domain_target = vec![T::zero(); n * n_domains];
    for row in 0..n {
        domain_target[row * n_domains + domain] = T::one();
    }
    let domain_target = Tensor::new(vec![n, n_domains], domain_target)?;
    let reversed = g.row_grad_scale(features, betas.iter().map(|&b| -b).collect())?;
    let domain_probs = domain_forward(&mut g, &dm, reversed)?;
    let per_instance = g.cross_entropy(&domain_target, domain_probs)?;
    let domain_mean = g.mean(per_instance);

    let per_instance_values = g.value(per_instance).data();
    let inv_n = T::one() / T::of(n as f64);
    let weighted: T = betas.iter().zip(per_instance_values).map(|(&b, &l)| b * l).sum::<T>() * inv_n;
    let losses = StepLosses {
        bag_loss: g.value(bag_loss).item().as_f64(),
        domain_loss: g.value(domain_mean).item().as_f64(),
        weighted_domain_loss: weighted.as_f64(),
    };

    let objective = if lambda != T::zero() {
        let scaled = g.scale(domain_mean, lambda);
        g.add(bag_loss, scaled)?
    } else {
        bag_loss
    };
    let mut grads = g.backward(objective)?;
    let mut take = |vars: Vec<crate::tensor::Var>| -> Vec<Tensor<T>> {
        vars.into_iter()
            .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
            .collect()
    };
    let extractor = take(ex.vars());
    let head = take(hd.vars());
    let domain = (lambda != T::zero()).then(|| take(dm.vars()));
    Ok(Stage1Gradients {
        extractor,
        head,
        domain,
        losses,
        attentions,
    })
}

/// One update of all three parameter groups from a single bag. With `λ = 0`
/// the domain head and its velocity are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step<T: Scalar>(
    model: &mut Stage1Model<T>,
    opt: &mut Stage1Optimizer<T>,
    batch: &Tensor<T>,
    label: ClassLabel,
    domain: usize,
    lambda: T,
    cfg: &TrainConfig,
    bag_id: &str,
) -> Result<StepLosses> {
    let grads = stage1_gradients(model, batch, label, domain, lambda)?;
    let l = grads.losses;
    check_finite(bag_id, "bag loss", l.bag_loss)?;
    check_finite(bag_id, "domain loss", l.domain_loss)?;
    check_finite(bag_id, "weighted domain loss", l.weighted_domain_loss)?;
    let lr = T::of(cfg.learning_rate);
    let mu = T::of(cfg.momentum);
    sgd_momentum_step(&mut model.head.tensors_mut(), &refs(&grads.head), &mut opt.head, lr, mu)?;
    sgd_momentum_step(&mut model.extractor.tensors_mut(), &refs(&grads.extractor), &mut opt.extractor, lr, mu)?;
    if let Some(d) = &grads.domain {
        sgd_momentum_step(&mut model.domain.tensors_mut(), &refs(d), &mut opt.domain, lr, mu)?;
    }
    Ok(l)
}

/// Result of training one scale.
#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub model: Stage1Model<f32>,
    pub history: Vec<EpochRecord>,
}

/// Initial stage-1 model for `scale`, as drawn by [`stage1_train`].
pub fn stage1_init(cfg: &TrainConfig, model_cfg: &ModelConfig, scale: usize, n_domains: usize) -> Result<Stage1Model<f32>> {
    let mut rng = stream_rng(cfg.seed, STREAM_INIT, scale as u64);
    Stage1Model::init(model_cfg, scale, n_domains, &mut rng)
}

/// Trains the extractor, bag head and domain head of one scale.
///
/// With `adversarial` false the domain weight is 0 for every epoch, which is
/// plain attention MIL; otherwise it follows [`lambda_schedule`] with epochs
/// numbered from 1. Each bag is one update. `on_epoch` sees every finished
/// epoch, e.g. to write a checkpoint.
pub fn stage1_train(
    slides: &[&Slide],
    scale: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    adversarial: bool,
    mut on_epoch: impl FnMut(&EpochRecord, &Stage1Model<f32>) -> Result<()>,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    let mut model = stage1_init(cfg, model_cfg, scale, slides.len().max(1))?;
    let mut history = Vec::new();
    if cfg.epochs == 0 {
        return Ok(Stage1Outcome { model, history });
    }
    let mut opt = Stage1Optimizer::new(&model);
    let mut rng = stream_rng(cfg.seed, STREAM_ORDER, scale as u64);
    let mut bags = training_bags::<f32>(slides, &[scale], cfg, 0)?;

    for epoch in 1..=cfg.epochs {
        if cfg.resample_bags && epoch > 1 {
            bags = training_bags(slides, &[scale], cfg, epoch as u64)?;
        }
        let lambda = if adversarial {
            lambda_schedule(epoch, cfg.epochs, cfg.alpha)?
        } else {
            0.0
        };
        let (mut lb, mut ld, mut lw) = (Vec::new(), Vec::new(), Vec::new());
        for (s, b) in epoch_order(&bags, &mut rng) {
            let bag = &bags[s][b];
            let batch = shuffled_rows(&bag.batches[&scale], &mut rng);
            let l = stage1_step(&mut model, &mut opt, &batch, bag.label, bag.domain, lambda as f32, cfg, &bag.id)?;
            lb.push(l.bag_loss);
            ld.push(l.domain_loss);
            lw.push(l.weighted_domain_loss);
        }
        let record = EpochRecord {
            epoch,
            scale: Some(scale),
            bag_loss: mean(&lb),
            domain_loss: mean(&ld),
            weighted_domain_loss: mean(&lw),
            lambda,
        };
        on_epoch(&record, &model)?;
        history.push(record);
    }
    Ok(Stage1Outcome { model, history })
}

fn refs<T>(v: &[T]) -> Vec<&T> {
    v.iter().collect()
}
