use std::collections::BTreeMap;

use super::params::{
    BagPredictorParams, DomainPredictorParams, DomainVars, ExtractorVars, FeatureExtractorParams,
    HeadVars,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Extractor on a batch `[n×c×p×p]`, returning features `[n×Q]`. Each patch
/// is first shifted to zero mean intensity.
pub fn extractor_forward<T: Scalar>(g: &mut Graph<T>, vars: &ExtractorVars, patches: Var) -> Result<Var> {
    let patches = centre_patches(g, patches)?;
    let x = g.conv2d(patches, vars.conv1_kernels, vars.conv1_bias, 1)?;
    let x = g.relu(x);
    let x = g.maxpool2x2(x)?;
    let x = g.conv2d(x, vars.conv2_kernels, vars.conv2_bias, 1)?;
    let x = g.relu(x);
    let x = g.maxpool2x2(x)?;
    let shape = g.value(x).shape().to_vec();
    let n = shape[0];
    let q = shape[1..].iter().product();
    g.reshape(x, &[n, q])
}

/// Subtracts from every patch of `[n×…]` the mean over all its values.
fn centre_patches<T: Scalar>(g: &mut Graph<T>, patches: Var) -> Result<Var> {
    let shape = g.value(patches).shape().to_vec();
    let n = shape[0];
    let d: usize = shape[1..].iter().product();
    let flat = g.reshape(patches, &[n, d])?;
    let averager = g.constant(Tensor::new(vec![d, 1], vec![T::one() / T::of(d as f64); d])?);
    let means = g.matmul(flat, averager)?;
    let spread = g.constant(Tensor::new(vec![1, d], vec![-T::one(); d])?);
    let offsets = g.matmul(means, spread)?;
    let centred = g.add(flat, offsets)?;
    g.reshape(centred, &shape)
}

/// Graph nodes produced by the attention bag head.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    /// h′ after the fully connected layer, `[n×Q′]`.
    pub embedded: Var,
    /// Attention weights a, `[n]`.
    pub attentions: Var,
    /// z = Σ a_i h′_i, `[1×Q′]`.
    pub pooled: Var,
    /// P(Ŷ_b), `[2]` with index 1 the positive class.
    pub probs: Var,
}

/// Attention bag head on features `[n×Q]`.
pub fn head_forward<T: Scalar>(g: &mut Graph<T>, vars: &HeadVars, features: Var) -> Result<HeadNodes> {
    let n = g.value(features).shape()[0];
    let embedded = g.linear(features, vars.fc_weight, vars.fc_bias)?;
    let embedded = g.relu(embedded);
    let attentions = attention_scores(g, vars.attention_v, vars.attention_w, embedded)?;
    let attentions = g.softmax(attentions)?;
    let a_row = g.reshape(attentions, &[1, n])?;
    let pooled = g.matmul(a_row, embedded)?;
    let logits = g.linear(pooled, vars.classifier_weight, vars.classifier_bias)?;
    let logits = g.reshape(logits, &[2])?;
    let probs = g.softmax(logits)?;
    Ok(HeadNodes {
        embedded,
        attentions,
        pooled,
        probs,
    })
}

/// Scores wᵀ tanh(V h′_i) for every row of `embedded`, as `[n]`.
fn attention_scores<T: Scalar>(g: &mut Graph<T>, v: Var, w: Var, embedded: Var) -> Result<Var> {
    let n = g.value(embedded).shape()[0];
    let hidden = g.value(w).len();
    let vt = g.transpose(v)?;
    let projected = g.matmul(embedded, vt)?;
    let act = g.tanh(projected);
    let w_col = g.reshape(w, &[hidden, 1])?;
    let scores = g.matmul(act, w_col)?;
    g.reshape(scores, &[n])
}

/// Domain head on features `[n×Q]`, returning probabilities `[n×N]`.
pub fn domain_forward<T: Scalar>(g: &mut Graph<T>, vars: &DomainVars, features: Var) -> Result<Var> {
    let h = g.linear(features, vars.hidden_weight, vars.hidden_bias)?;
    let h = g.relu(h);
    let logits = g.linear(h, vars.output_weight, vars.output_bias)?;
    g.softmax(logits)
}

/// Result of classifying one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagOutput<T> {
    /// `[P(Ŷ=0), P(Ŷ=1)]`
    pub class_probs: Tensor<T>,
    pub attentions: Vec<T>,
    pub betas: Vec<T>,
    /// z, length Q′.
    pub pooled: Tensor<T>,
    /// Scale of each instance, aligned with `attentions`.
    pub instance_scales: Vec<usize>,
}

impl<T: Scalar> BagOutput<T> {
    pub fn positive_probability(&self) -> T {
        self.class_probs.data()[1]
    }

    /// Total attention per scale.
    pub fn attention_mass_by_scale(&self) -> BTreeMap<usize, T> {
        let mut mass = BTreeMap::new();
        for (&s, &a) in self.instance_scales.iter().zip(&self.attentions) {
            *mass.entry(s).or_insert_with(T::zero) += a;
        }
        mass
    }
}

/// β_i = max_j a_j − a_i.
pub fn beta_weights<T: Scalar>(attentions: &[T]) -> Vec<T> {
    let max = attentions.iter().copied().fold(T::neg_infinity(), T::max);
    attentions.iter().map(|&a| max - a).collect()
}

fn check_patch<T: Scalar>(patch: &Tensor<T>, params: &FeatureExtractorParams<T>) -> Result<()> {
    let want = [params.in_channels(), params.patch_size, params.patch_size];
    if patch.shape() != want {
        return Err(Error::shape("extract_features", patch.shape(), &want));
    }
    Ok(())
}

fn stack_patches<T: Scalar>(patches: &[Tensor<T>], params: &FeatureExtractorParams<T>) -> Result<Tensor<T>> {
    for p in patches {
        check_patch(p, params)?;
    }
    Tensor::stack(patches)
}

/// G_f on a single patch `[c×p×p]`, returning the feature vector `[Q]`.
pub fn extract_features<T: Scalar>(patch: &Tensor<T>, params: &FeatureExtractorParams<T>) -> Result<Tensor<T>> {
    check_patch(patch, params)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(patch.clone().reshape(vec![1, patch.shape()[0], patch.shape()[1], patch.shape()[2]])?);
    let h = extractor_forward(&mut g, &vars, x)?;
    let q = g.value(h).len();
    g.value(h).clone().reshape(vec![q])
}

fn stack_rows<T: Scalar>(rows: &[Tensor<T>]) -> Result<Tensor<T>> {
    if rows.is_empty() {
        return Err(Error::Argument("empty bag".into()));
    }
    let width = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != width || r.rank() != 1) {
        return Err(Error::shape("bag features", rows[0].shape(), bad.shape()));
    }
    Tensor::stack(rows)
}

/// Softmax over wᵀ tanh(V h′_i) for each instance feature h′_i.
pub fn attention_weights<T: Scalar>(features_prime: &[Tensor<T>], v: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let h = stack_rows(features_prime)?;
    if v.rank() != 2 || v.shape()[1] != h.shape()[1] || w.shape() != [v.shape()[0]] {
        return Err(Error::shape("attention_weights", v.shape(), w.shape()));
    }
    let mut g = Graph::new();
    let hv = g.constant(h);
    let vv = g.constant(v.clone());
    let wv = g.constant(w.clone());
    let scores = attention_scores(&mut g, vv, wv, hv)?;
    let a = g.softmax(scores)?;
    Ok(g.value(a).clone())
}

/// z = Σ a_i h′_i.
pub fn attention_pool<T: Scalar>(features_prime: &[Tensor<T>], attentions: &Tensor<T>) -> Result<Tensor<T>> {
    if features_prime.len() != attentions.len() {
        return Err(Error::Argument(format!(
            "attention_pool: {} instances but {} attentions",
            features_prime.len(),
            attentions.len()
        )));
    }
    let h = stack_rows(features_prime)?;
    let width = h.shape()[1];
    let mut z = vec![T::zero(); width];
    for (row, &a) in h.data().chunks_exact(width).zip(attentions.data()) {
        for (zv, &hv) in z.iter_mut().zip(row) {
            *zv += a * hv;
        }
    }
    Ok(Tensor::vector(z))
}

/// Shared tail of single- and multi-scale prediction: features of every
/// scale are concatenated into one instance set and pooled by one head.
fn predict_from_features<T: Scalar>(
    g: &mut Graph<T>,
    head: &BagPredictorParams<T>,
    features: &[Var],
    instance_scales: Vec<usize>,
) -> Result<BagOutput<T>> {
    let all = g.concat_rows(features)?;
    let vars = head.bind(g, false);
    let nodes = head_forward(g, &vars, all)?;
    let attentions = g.value(nodes.attentions).data().to_vec();
    Ok(BagOutput {
        class_probs: g.value(nodes.probs).clone(),
        betas: beta_weights(&attentions),
        attentions,
        pooled: g.value(nodes.pooled).clone().reshape(vec![head.embed_dim()])?,
        instance_scales,
    })
}

/// P(Ŷ_b) for a single-scale bag of patches `[c×p×p]`.
pub fn bag_predict<T: Scalar>(
    patches: &[Tensor<T>],
    extractor: &FeatureExtractorParams<T>,
    head: &BagPredictorParams<T>,
) -> Result<BagOutput<T>> {
    if patches.is_empty() {
        return Err(Error::Argument("empty bag".into()));
    }
    let mut by_scale = BTreeMap::new();
    by_scale.insert(extractor.scale, patches.to_vec());
    multiscale_bag_predict(&by_scale, std::slice::from_ref(extractor), head)
}

/// P(Ŷ_b) for a multi-scale bag: each scale's patches go through that
/// scale's extractor, then all instances are pooled jointly.
pub fn multiscale_bag_predict<T: Scalar>(
    patches_per_scale: &BTreeMap<usize, Vec<Tensor<T>>>,
    extractors: &[FeatureExtractorParams<T>],
    head: &BagPredictorParams<T>,
) -> Result<BagOutput<T>> {
    if extractors.is_empty() {
        return Err(Error::Argument("no feature extractors".into()));
    }
    let mut g = Graph::new();
    let mut features = Vec::with_capacity(extractors.len());
    let mut scales = Vec::new();
    for ex in extractors {
        let patches = patches_per_scale
            .get(&ex.scale)
            .ok_or_else(|| Error::Argument(format!("bag is missing scale {}", ex.scale)))?;
        if patches.is_empty() {
            return Err(Error::Argument(format!("bag has no instances at scale {}", ex.scale)));
        }
        if ex.feature_dim() != head.feature_dim() {
            return Err(Error::shape(
                "multiscale_bag_predict",
                &[ex.feature_dim()],
                &[head.feature_dim()],
            ));
        }
        let batch = g.constant(stack_patches(patches, ex)?);
        let vars = ex.bind(&mut g, false);
        features.push(extractor_forward(&mut g, &vars, batch)?);
        scales.extend(std::iter::repeat(ex.scale).take(patches.len()));
    }
    predict_from_features(&mut g, head, &features, scales)
}

/// G_d on one feature vector `[Q]`, returning probabilities over N domains.
pub fn domain_predict<T: Scalar>(feature: &Tensor<T>, params: &DomainPredictorParams<T>) -> Result<Tensor<T>> {
    let q = params.hidden.in_dim();
    if feature.shape() != [q] {
        return Err(Error::shape("domain_predict", feature.shape(), &[q]));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let h = g.constant(feature.clone().reshape(vec![1, q])?);
    let p = domain_forward(&mut g, &vars, h)?;
    g.value(p).clone().reshape(vec![params.n_domains()])
}
