use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// A group of trainable tensors with stable names and a stable order.
pub trait ParamSet<T: Scalar> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

fn uniform<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// `x · weight + bias` with `weight` stored as `[in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform in ±1/√fan_in, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: uniform(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Convolution kernels `[k×c×r×r]` and per-kernel bias `[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv<T> {
    /// He-uniform kernels (±√(6/fan_in)), zero bias.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, size: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * size * size;
        Conv {
            kernels: uniform(
                vec![out_ch, in_ch, size, size],
                (6.0 / fan_in as f64).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(vec![out_ch]),
        }
    }
}

/// θ_f for one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractorParams<T> {
    pub scale: usize,
    pub patch_size: usize,
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
}

impl<T: Scalar> FeatureExtractorParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, scale: usize, rng: &mut R) -> Self {
        FeatureExtractorParams {
            scale,
            patch_size: cfg.patch_size,
            conv1: Conv::init(cfg.in_channels, cfg.conv1_channels, cfg.kernel_size, rng),
            conv2: Conv::init(cfg.conv1_channels, cfg.conv2_channels, cfg.kernel_size, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.kernels.shape()[1]
    }

    /// Feature dimension Q.
    pub fn feature_dim(&self) -> usize {
        let k = self.conv1.kernels.shape()[2];
        let side1 = (self.patch_size + 1 - k) / 2;
        let side2 = (side1 + 1 - k) / 2;
        self.conv2.kernels.shape()[0] * side2 * side2
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ExtractorVars {
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ExtractorVars {
            conv1_kernels: leaf(g, &self.conv1.kernels),
            conv1_bias: leaf(g, &self.conv1.bias),
            conv2_kernels: leaf(g, &self.conv2.kernels),
            conv2_bias: leaf(g, &self.conv2.bias),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractorParams<U> {
        FeatureExtractorParams {
            scale: self.scale,
            patch_size: self.patch_size,
            conv1: Conv {
                kernels: self.conv1.kernels.cast(),
                bias: self.conv1.bias.cast(),
            },
            conv2: Conv {
                kernels: self.conv2.kernels.cast(),
                bias: self.conv2.bias.cast(),
            },
        }
    }
}

impl<T: Scalar> ParamSet<T> for FeatureExtractorParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("conv1.kernels".into(), &self.conv1.kernels),
            ("conv1.bias".into(), &self.conv1.bias),
            ("conv2.kernels".into(), &self.conv2.kernels),
            ("conv2.bias".into(), &self.conv2.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.conv1.kernels,
            &mut self.conv1.bias,
            &mut self.conv2.kernels,
            &mut self.conv2.bias,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExtractorVars {
    pub conv1_kernels: Var,
    pub conv1_bias: Var,
    pub conv2_kernels: Var,
    pub conv2_bias: Var,
}

impl ExtractorVars {
    /// Same order as [`ParamSet::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.conv1_kernels,
            self.conv1_bias,
            self.conv2_kernels,
            self.conv2_bias,
        ]
    }
}

/// θ_y: fully connected layer, attention network (V, w) and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BagPredictorParams<T> {
    /// Q → Q′, followed by ReLU.
    pub fc: Linear<T>,
    /// `[hidden×Q′]`
    pub attention_v: Tensor<T>,
    /// `[hidden]`
    pub attention_w: Tensor<T>,
    /// Q′ → 2, followed by softmax.
    pub classifier: Linear<T>,
}

impl<T: Scalar> BagPredictorParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, feature_dim: usize, rng: &mut R) -> Self {
        let embed = cfg.embed_dim;
        let hidden = cfg.attention_hidden;
        BagPredictorParams {
            fc: Linear::init(feature_dim, embed, rng),
            attention_v: uniform(vec![hidden, embed], 1.0 / (embed as f64).sqrt(), rng),
            attention_w: uniform(vec![hidden], 1.0 / (hidden as f64).sqrt(), rng),
            classifier: Linear::init(embed, 2, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fc.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> HeadVars {
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        HeadVars {
            fc_weight: leaf(g, &self.fc.weight),
            fc_bias: leaf(g, &self.fc.bias),
            attention_v: leaf(g, &self.attention_v),
            attention_w: leaf(g, &self.attention_w),
            classifier_weight: leaf(g, &self.classifier.weight),
            classifier_bias: leaf(g, &self.classifier.bias),
        }
    }

    pub fn cast<U: Scalar>(&self) -> BagPredictorParams<U> {
        BagPredictorParams {
            fc: Linear {
                weight: self.fc.weight.cast(),
                bias: self.fc.bias.cast(),
            },
            attention_v: self.attention_v.cast(),
            attention_w: self.attention_w.cast(),
            classifier: Linear {
                weight: self.classifier.weight.cast(),
                bias: self.classifier.bias.cast(),
            },
        }
    }
}

impl<T: Scalar> ParamSet<T> for BagPredictorParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("fc.weight".into(), &self.fc.weight),
            ("fc.bias".into(), &self.fc.bias),
            ("attention.v".into(), &self.attention_v),
            ("attention.w".into(), &self.attention_w),
            ("classifier.weight".into(), &self.classifier.weight),
            ("classifier.bias".into(), &self.classifier.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.fc.weight,
            &mut self.fc.bias,
            &mut self.attention_v,
            &mut self.attention_w,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub fc_weight: Var,
    pub fc_bias: Var,
    pub attention_v: Var,
    pub attention_w: Var,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
}

impl HeadVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.fc_weight,
            self.fc_bias,
            self.attention_v,
            self.attention_w,
            self.classifier_weight,
            self.classifier_bias,
        ]
    }
}

/// θ_d: Q → hidden (ReLU) → N domains (softmax).
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPredictorParams<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> DomainPredictorParams<T> {
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        feature_dim: usize,
        n_domains: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_domains == 0 {
            return Err(Error::Argument("domain predictor needs at least one domain".into()));
        }
        Ok(DomainPredictorParams {
            hidden: Linear::init(feature_dim, cfg.domain_hidden, rng),
            output: Linear::init(cfg.domain_hidden, n_domains, rng),
        })
    }

    pub fn n_domains(&self) -> usize {
        self.output.out_dim()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> DomainVars {
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        DomainVars {
            hidden_weight: leaf(g, &self.hidden.weight),
            hidden_bias: leaf(g, &self.hidden.bias),
            output_weight: leaf(g, &self.output.weight),
            output_bias: leaf(g, &self.output.bias),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DomainPredictorParams<U> {
        DomainPredictorParams {
            hidden: Linear {
                weight: self.hidden.weight.cast(),
                bias: self.hidden.bias.cast(),
            },
            output: Linear {
                weight: self.output.weight.cast(),
                bias: self.output.bias.cast(),
            },
        }
    }
}

impl<T: Scalar> ParamSet<T> for DomainPredictorParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("hidden.weight".into(), &self.hidden.weight),
            ("hidden.bias".into(), &self.hidden.bias),
            ("output.weight".into(), &self.output.weight),
            ("output.bias".into(), &self.output.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DomainVars {
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub output_weight: Var,
    pub output_bias: Var,
}

impl DomainVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.hidden_weight,
            self.hidden_bias,
            self.output_weight,
            self.output_bias,
        ]
    }
}
