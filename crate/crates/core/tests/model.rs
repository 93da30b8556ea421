use std::collections::BTreeMap;

use msdamil::model::{
    attention_pool, attention_weights, bag_predict, beta_weights, domain_predict, extract_features,
    extractor_forward, multiscale_bag_predict, BagPredictorParams, DomainPredictorParams,
    FeatureExtractorParams, Linear, ModelConfig, ParamSet,
};
use msdamil::tensor::gradcheck::{compare_gradients, finite_diff_gradient};
use msdamil::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        patch_size: 14,
        conv1_channels: 2,
        conv2_channels: 3,
        kernel_size: 3,
        embed_dim: 6,
        attention_hidden: 4,
        domain_hidden: 5,
    }
}

fn random_patch<T: msdamil::Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = cfg.in_channels * cfg.patch_size * cfg.patch_size;
    let data = (0..n).map(|_| T::of(rng.gen::<f64>())).collect();
    Tensor::new(vec![cfg.in_channels, cfg.patch_size, cfg.patch_size], data).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn beta_examples() {
    let b = beta_weights(&[0.5f64, 0.3, 0.2]);
    assert!(close(b[0], 0.0, 1e-15) && close(b[1], 0.2, 1e-15) && close(b[2], 0.3, 1e-15));
    assert_eq!(beta_weights(&[0.25f64; 4]), vec![0.0; 4]);
    assert_eq!(beta_weights(&[1.0f64]), vec![0.0]);
}

#[test]
fn attention_of_identical_instances_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Tensor::vector((0..6).map(|_| rng.gen::<f64>()).collect());
    let v = Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();
    let w = Tensor::vector((0..4).map(|_| rng.gen::<f64>() - 0.5).collect());
    let a = attention_weights(&vec![h.clone(); 5], &v, &w).unwrap();
    for &x in a.data() {
        assert!(close(x, 0.2, 1e-15));
    }
    let single = attention_weights(&[h], &v, &w).unwrap();
    assert_eq!(single.data(), &[1.0]);
}

#[test]
fn attention_with_scores_zero_and_ln3() {
    // V = [1], w = [s]; tanh(V h) = tanh(h). Choose h so that the scores are 0 and ln 3.
    let target = 3f64.ln();
    let h1 = Tensor::vector(vec![0.0]);
    let h2 = Tensor::vector(vec![0.5f64.atanh()]);
    let v = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let w = Tensor::vector(vec![target / 0.5]);
    let a = attention_weights(&[h1, h2], &v, &w).unwrap();
    assert!(close(a.data()[0], 0.25, 1e-12));
    assert!(close(a.data()[1], 0.75, 1e-12));
}

#[test]
fn attention_rejects_empty_bag() {
    let v = Tensor::<f64>::zeros(vec![2, 2]);
    let w = Tensor::<f64>::zeros(vec![2]);
    assert!(matches!(attention_weights(&[], &v, &w), Err(Error::Argument(_))));
}

#[test]
fn attention_pool_examples() {
    let h1 = Tensor::vector(vec![1.0f64, 0.0]);
    let h2 = Tensor::vector(vec![0.0f64, 1.0]);
    let z = attention_pool(&[h1.clone(), h2.clone()], &Tensor::vector(vec![0.25, 0.75])).unwrap();
    assert_eq!(z.data(), &[0.25, 0.75]);
    let z = attention_pool(&[h1.clone(), h2.clone()], &Tensor::vector(vec![0.0, 1.0])).unwrap();
    assert_eq!(z.data(), h2.data());
    let h = Tensor::vector(vec![0.3f64, -1.5]);
    let z = attention_pool(&[h.clone(), h.clone(), h.clone()], &Tensor::vector(vec![0.5, 0.25, 0.25])).unwrap();
    assert!(z.data().iter().zip(h.data()).all(|(a, b)| close(*a, *b, 1e-15)));
    assert!(matches!(
        attention_pool(&[h1, h2], &Tensor::vector(vec![1.0])),
        Err(Error::Argument(_))
    ));
}

#[test]
fn zero_patch_with_zero_bias_gives_zero_features() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ex = FeatureExtractorParams::<f64>::init(&cfg, 1, &mut rng);
    let zero = Tensor::zeros(vec![3, cfg.patch_size, cfg.patch_size]);
    let f = extract_features(&zero, &ex).unwrap();
    assert_eq!(f.len(), cfg.feature_dim());
    assert!(f.data().iter().all(|&x| x == 0.0));
}

#[test]
fn identical_patches_give_identical_features() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ex = FeatureExtractorParams::<f32>::init(&cfg, 1, &mut rng);
    let p = random_patch::<f32>(&cfg, &mut rng);
    assert_eq!(extract_features(&p, &ex).unwrap(), extract_features(&p.clone(), &ex).unwrap());
}

#[test]
fn wrong_patch_size_is_a_dimension_error() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ex = FeatureExtractorParams::<f32>::init(&cfg, 1, &mut rng);
    let p = Tensor::<f32>::zeros(vec![3, 10, 10]);
    assert!(matches!(extract_features(&p, &ex), Err(Error::Shape { .. })));
}

#[test]
fn feature_jacobian_matches_finite_differences() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ex = FeatureExtractorParams::<f64>::init(&cfg, 1, &mut rng);
    let patch = random_patch::<f64>(&cfg, &mut rng);
    let probe: Vec<f64> = (0..cfg.feature_dim()).map(|_| rng.gen::<f64>() - 0.5).collect();

    let objective = |kernels: &Tensor<f64>| {
        let mut e = ex.clone();
        e.conv1.kernels = kernels.clone();
        let f = extract_features(&patch, &e).unwrap();
        f.data().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut g = Graph::<f64>::new();
    let vars = ex.bind(&mut g, true);
    let x = g.constant(patch.clone().reshape(vec![1, 3, cfg.patch_size, cfg.patch_size]).unwrap());
    let h = extractor_forward(&mut g, &vars, x).unwrap();
    let p = g.constant(Tensor::new(vec![1, cfg.feature_dim()], probe.clone()).unwrap());
    let prod = g.mul(h, p).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();

    let analytic = grads.get(vars.conv1_kernels).unwrap();
    let numeric = finite_diff_gradient(objective, &ex.conv1.kernels, 1e-4);
    let cmp = compare_gradients(analytic.data(), numeric.data());
    assert!(cmp.passes(1e-4), "{cmp:?}");
}

#[test]
fn single_instance_bag_is_degenerate() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ex = FeatureExtractorParams::<f64>::init(&cfg, 1, &mut rng);
    let head = BagPredictorParams::<f64>::init(&cfg, cfg.feature_dim(), &mut rng);
    let patch = random_patch::<f64>(&cfg, &mut rng);
    let out = bag_predict(&[patch.clone()], &ex, &head).unwrap();
    assert_eq!(out.attentions, vec![1.0]);
    assert_eq!(out.betas, vec![0.0]);

    // Independent evaluation of softmax(classifier(relu(fc(h)))).
    let h = extract_features(&patch, &ex).unwrap();
    let q = cfg.feature_dim();
    let e = cfg.embed_dim;
    let mut hid = head.fc.bias.data().to_vec();
    for (j, hj) in hid.iter_mut().enumerate() {
        for i in 0..q {
            *hj += h.data()[i] * head.fc.weight.data()[i * e + j];
        }
        *hj = hj.max(0.0);
    }
    let logit = |k: usize| {
        head.classifier.bias.data()[k]
            + (0..e).map(|j| hid[j] * head.classifier.weight.data()[j * 2 + k]).sum::<f64>()
    };
    let (l0, l1) = (logit(0), logit(1));
    let p1 = 1.0 / (1.0 + (l0 - l1).exp());
    assert!(close(out.positive_probability(), p1, 1e-12));
}

#[test]
fn empty_bag_is_rejected() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ex = FeatureExtractorParams::<f32>::init(&cfg, 1, &mut rng);
    let head = BagPredictorParams::<f32>::init(&cfg, cfg.feature_dim(), &mut rng);
    assert!(matches!(bag_predict(&[], &ex, &head), Err(Error::Argument(_))));
}

#[test]
fn single_scale_multiscale_is_bit_identical() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ex = FeatureExtractorParams::<f32>::init(&cfg, 2, &mut rng);
    let head = BagPredictorParams::<f32>::init(&cfg, cfg.feature_dim(), &mut rng);
    let patches: Vec<_> = (0..5).map(|_| random_patch::<f32>(&cfg, &mut rng)).collect();
    let single = bag_predict(&patches, &ex, &head).unwrap();
    let mut map = BTreeMap::new();
    map.insert(2, patches);
    let multi = multiscale_bag_predict(&map, std::slice::from_ref(&ex), &head).unwrap();
    assert_eq!(single, multi);
}

#[test]
fn two_scales_with_identical_features_share_attention_equally() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ex1 = FeatureExtractorParams::<f64>::init(&cfg, 1, &mut rng);
    let ex2 = FeatureExtractorParams { scale: 2, ..ex1.clone() };
    let head = BagPredictorParams::<f64>::init(&cfg, cfg.feature_dim(), &mut rng);
    let patch = random_patch::<f64>(&cfg, &mut rng);
    let n = 4;
    let mut map = BTreeMap::new();
    map.insert(1, vec![patch.clone(); n]);
    map.insert(2, vec![patch; n]);
    let out = multiscale_bag_predict(&map, &[ex1, ex2], &head).unwrap();
    assert_eq!(out.attentions.len(), 2 * n);
    for &a in &out.attentions {
        assert!(close(a, 1.0 / (2 * n) as f64, 1e-15));
    }
    let mass = out.attention_mass_by_scale();
    assert!(close(mass[&1], 0.5, 1e-12) && close(mass[&2], 0.5, 1e-12));
}

#[test]
fn missing_scale_is_named() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ex1 = FeatureExtractorParams::<f32>::init(&cfg, 1, &mut rng);
    let ex2 = FeatureExtractorParams::<f32>::init(&cfg, 2, &mut rng);
    let head = BagPredictorParams::<f32>::init(&cfg, cfg.feature_dim(), &mut rng);
    let mut map = BTreeMap::new();
    map.insert(1, vec![random_patch::<f32>(&cfg, &mut rng)]);
    let err = multiscale_bag_predict(&map, &[ex1, ex2], &head).unwrap_err();
    assert!(err.to_string().contains("scale 2"), "{err}");
}

#[test]
fn zero_output_layer_gives_uniform_domains() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut d = DomainPredictorParams::<f64>::init(&cfg, cfg.feature_dim(), 7, &mut rng).unwrap();
    d.output = Linear::zeros(cfg.domain_hidden, 7);
    let h = Tensor::vector((0..cfg.feature_dim()).map(|_| rng.gen::<f64>()).collect());
    let p = domain_predict(&h, &d).unwrap();
    for &x in p.data() {
        assert!(close(x, 1.0 / 7.0, 1e-15));
    }
    assert!(domain_predict(&Tensor::vector(vec![0.0; cfg.feature_dim() + 1]), &d).is_err());
}

#[test]
fn domain_predict_outputs_probabilities() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = DomainPredictorParams::<f32>::init(&cfg, cfg.feature_dim(), 4, &mut rng).unwrap();
    for _ in 0..20 {
        let h = Tensor::vector((0..cfg.feature_dim()).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect());
        let p = domain_predict(&h, &d).unwrap();
        assert!(p.data().iter().all(|&x| x > 0.0));
        assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    assert!(DomainPredictorParams::<f32>::init(&cfg, 4, 0, &mut rng).is_err());
}

#[test]
fn parameter_sets_are_finite_and_counted() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ex = FeatureExtractorParams::<f32>::init(&cfg, 1, &mut rng);
    assert_eq!(ex.feature_dim(), 576);
    assert_eq!(ex.parameter_count(), 8 * 3 * 9 + 8 + 16 * 8 * 9 + 16);
    assert!(ex.all_finite());
    assert!(ex.conv1.bias.data().iter().all(|&b| b == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bag_prediction_is_permutation_invariant(seed in 0u64..10_000, n in 2usize..6, shift in 1usize..5) {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = FeatureExtractorParams::<f32>::init(&cfg, 1, &mut rng);
        let head = BagPredictorParams::<f32>::init(&cfg, cfg.feature_dim(), &mut rng);
        let patches: Vec<_> = (0..n).map(|_| random_patch::<f32>(&cfg, &mut rng)).collect();
        let mut rotated = patches.clone();
        rotated.rotate_left(shift % n);
        let a = bag_predict(&patches, &ex, &head).unwrap();
        let b = bag_predict(&rotated, &ex, &head).unwrap();
        for k in 0..2 {
            prop_assert!((a.class_probs.data()[k] - b.class_probs.data()[k]).abs() <= 1e-6);
        }
        for i in 0..n {
            let j = (i + n - shift % n) % n;
            prop_assert!((a.attentions[i] - b.attentions[j]).abs() <= 1e-6);
        }
        let total: f32 = a.attentions.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        prop_assert!(a.attentions.iter().all(|&x| x > 0.0));
        prop_assert!(a.betas.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(a.betas.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
    }

    #[test]
    fn betas_are_anchored(raw in prop::collection::vec(0.01f64..1.0, 1..12)) {
        let total: f64 = raw.iter().sum();
        let a: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let b = beta_weights(&a);
        prop_assert!(b.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(b.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        let first_max = a.iter().cloned().enumerate().fold((0, f64::MIN), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc }).0;
        prop_assert_eq!(b[first_max], 0.0);
    }
}
