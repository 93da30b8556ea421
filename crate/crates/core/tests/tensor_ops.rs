use msdamil::tensor::gradcheck::{compare_gradients, finite_diff_gradient};
use msdamil::{Error, Graph, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Backward of `loss(x)` against central differences of the same forward.
fn assert_grad_matches<F>(x: Tensor<f64>, loss: F)
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let l = loss(&mut g, xv);
    let grads = g.backward(l).unwrap();
    let analytic = grads.get(xv).unwrap().to_f64_vec();
    let numeric = finite_diff_gradient(
        |probe| {
            let mut g = Graph::new();
            let xv = g.param(probe.clone());
            let l = loss(&mut g, xv);
            g.value(l).item()
        },
        &x,
        1e-4,
    );
    let cmp = compare_gradients(&analytic, numeric.data());
    assert!(cmp.passes(1e-4), "{cmp:?}");
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let out = g.matmul(eye, col).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 4.0]);

    let row = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let dot = g.matmul(row, col).unwrap();
    assert_eq!(g.value(dot).data(), &[11.0]);
}

#[test]
fn matmul_gradient_wrt_left_operand() {
    let b = t(&[2, 1], &[3.0, 4.0]);
    let mut g = Graph::new();
    let a = g.param(t(&[1, 2], &[1.0, 2.0]));
    let bv = g.constant(b.clone());
    let prod = g.matmul(a, bv).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);

    let numeric = finite_diff_gradient(
        |probe| probe.data()[0] * 3.0 + probe.data()[1] * 4.0,
        &t(&[1, 2], &[1.0, 2.0]),
        1e-4,
    );
    assert!((numeric.data()[0] - 3.0).abs() < 1e-8);
    assert!((numeric.data()[1] - 4.0).abs() < 1e-8);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::ones(vec![1, 3, 3]));
    let k = g.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros(vec![1]));
    let out = g.conv2d(ones, k, b, 1).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 3, 3]);
    assert!(g.value(out).data().iter().all(|&v| v == 1.0));

    let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let k = g.constant(Tensor::ones(vec![1, 1, 2, 2]));
    let out = g.conv2d(x, k, b, 1).unwrap();
    assert_eq!(g.value(out).data(), &[10.0]);
}

#[test]
fn conv2d_output_size_follows_stride() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(vec![2, 7, 7]));
    let k = g.constant(Tensor::ones(vec![4, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(vec![4]));
    let out = g.conv2d(x, k, b, 2).unwrap();
    assert_eq!(g.value(out).shape(), &[4, 3, 3]);
    assert!(g.value(out).data().iter().all(|&v| v == 18.0));
}

#[test]
fn conv2d_rejects_kernel_larger_than_input() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(vec![1, 2, 2]));
    let k = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let b = g.constant(Tensor::zeros(vec![1]));
    assert!(matches!(g.conv2d(x, k, b, 1), Err(Error::Shape { .. })));
}

#[test]
fn conv2d_kernel_gradient_matches_finite_differences() {
    let input = t(&[1, 4, 4], &pseudo_random(16, 1));
    let kernel = t(&[2, 1, 2, 2], &pseudo_random(8, 2));
    let weights = pseudo_random(2 * 3 * 3, 3);
    assert_grad_matches(kernel, |g, k| {
        let x = g.constant(input.clone());
        let b = g.constant(t(&[2], &[0.1, -0.2]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        let w = g.constant(t(&[2, 3, 3], &weights));
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    });
}

#[test]
fn conv2d_batched_input_and_bias_gradients() {
    let input = t(&[2, 2, 5, 5], &pseudo_random(100, 4));
    let kernel = t(&[3, 2, 3, 3], &pseudo_random(54, 5));
    let weights = pseudo_random(2 * 3 * 3 * 3, 6);
    let bias = t(&[3], &[0.05, -0.1, 0.2]);
    assert_grad_matches(input.clone(), |g, x| {
        let k = g.constant(kernel.clone());
        let b = g.constant(bias.clone());
        let y = g.conv2d(x, k, b, 1).unwrap();
        let w = g.constant(t(&[2, 3, 3, 3], &weights));
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    });
    assert_grad_matches(bias.clone(), |g, b| {
        let x = g.constant(input.clone());
        let k = g.constant(kernel.clone());
        let y = g.conv2d(x, k, b, 1).unwrap();
        let w = g.constant(t(&[2, 3, 3, 3], &weights));
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    });
}

#[test]
fn batched_conv_equals_per_image_conv() {
    let a = pseudo_random(3 * 6 * 6, 7);
    let b = pseudo_random(3 * 6 * 6, 8);
    let k = pseudo_random(4 * 3 * 3 * 3, 9);
    let mut g = Graph::<f64>::new();
    let kv = g.constant(t(&[4, 3, 3, 3], &k));
    let bias = g.constant(t(&[4], &[0.0, 0.1, 0.2, 0.3]));
    let batch = g.constant(t(&[2, 3, 6, 6], &[a.clone(), b.clone()].concat()));
    let yb = g.conv2d(batch, kv, bias, 1).unwrap();
    let xa = g.constant(t(&[3, 6, 6], &a));
    let xb = g.constant(t(&[3, 6, 6], &b));
    let ya = g.conv2d(xa, kv, bias, 1).unwrap();
    let yb2 = g.conv2d(xb, kv, bias, 1).unwrap();
    let joined = [g.value(ya).data(), g.value(yb2).data()].concat();
    assert_eq!(g.value(yb).data(), joined.as_slice());
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::scalar(0.0));
    let th = g.tanh(z);
    assert_eq!(g.value(th).item(), 0.0);

    let x = g.constant(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);
}

#[test]
fn maxpool_routes_gradient_to_the_maximum() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.maxpool2x2(x).unwrap();
    assert_eq!(g.value(p).data(), &[4.0]);
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn maxpool_truncates_odd_dimensions_and_breaks_ties_first() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(
        &[1, 3, 3],
        &[5.0, 5.0, 9.0, 5.0, 5.0, 9.0, 9.0, 9.0, 9.0],
    ));
    let p = g.maxpool2x2(x).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1, 1]);
    assert_eq!(g.value(p).data(), &[5.0]);
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(
        grads.get(x).unwrap().data(),
        &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2], &[0.0, 0.0]));
    let s = g.softmax(a).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let b = g.constant(t(&[2], &[0.0, 3f64.ln()]));
    let s = g.softmax(b).unwrap();
    let d = g.value(s).data();
    assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

    let mut g32 = Graph::<f32>::new();
    let big = g32.constant(Tensor::from_f64(vec![2], &[1000.0, 1000.0]).unwrap());
    let s = g32.softmax(big).unwrap();
    assert_eq!(g32.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn cross_entropy_examples() {
    let cases = [
        ([1.0, 0.0], [1.0, 0.0], 0.0),
        ([1.0, 0.0], [0.5, 0.5], std::f64::consts::LN_2),
        ([0.0, 1.0], [0.25, 0.75], -(0.75f64.ln())),
    ];
    for (p, q, want) in cases {
        let mut g = Graph::<f64>::new();
        let qv = g.constant(t(&[2], &q));
        let ce = g.cross_entropy(&t(&[2], &p), qv).unwrap();
        assert!((g.value(ce).item() - want).abs() < 1e-12, "{p:?} {q:?}");
    }
    assert!((-(0.75f64.ln()) - 0.287682).abs() < 1e-6);
}

#[test]
fn cross_entropy_clamps_confident_wrong_predictions() {
    let mut g = Graph::<f64>::new();
    let q = g.param(t(&[2], &[0.0, 1.0]));
    let ce = g.cross_entropy(&t(&[2], &[1.0, 0.0]), q).unwrap();
    let v = g.value(ce).item();
    assert!(v.is_finite());
    assert!((v + 1e-12f64.ln()).abs() < 1e-9);
    let grads = g.backward(ce).unwrap();
    assert!(grads.get(q).unwrap().all_finite());
}

#[test]
fn cross_entropy_length_mismatch_is_an_argument_error() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(t(&[3], &[0.2, 0.3, 0.5]));
    assert!(matches!(
        g.cross_entropy(&t(&[2], &[1.0, 0.0]), q),
        Err(Error::Argument(_))
    ));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss_and_rezeroes() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Argument(_))));

    let l = g.sum(x);
    let first = g.backward(l).unwrap().get(x).unwrap().clone();
    let second = g.backward(l).unwrap().get(x).unwrap().clone();
    assert_eq!(first, second);
}

#[test]
fn composite_conv_relu_matmul_cross_entropy() {
    let input = t(&[2, 6, 6], &pseudo_random(72, 11));
    let kernel = t(&[3, 2, 3, 3], &pseudo_random(54, 12));
    let dense = pseudo_random(3 * 2 * 2 * 2, 13);
    let target = t(&[2], &[0.0, 1.0]);
    let build = |g: &mut Graph<f64>, k: Var| {
        let x = g.constant(input.clone());
        let b = g.constant(t(&[3], &[0.01, -0.02, 0.03]));
        let c = g.conv2d(x, k, b, 1).unwrap();
        let r = g.relu(c);
        let p = g.maxpool2x2(r).unwrap();
        let flat = g.reshape(p, &[1, 12]).unwrap();
        let w = g.constant(t(&[12, 2], &dense));
        let logits = g.matmul(flat, w).unwrap();
        let logits = g.reshape(logits, &[2]).unwrap();
        let probs = g.softmax(logits).unwrap();
        g.cross_entropy(&target, probs).unwrap()
    };
    assert_grad_matches(kernel, build);
}

#[test]
fn attention_pool_subgraph_matches_finite_differences() {
    let feats = t(&[4, 3], &pseudo_random(12, 21));
    let v = pseudo_random(2 * 3, 22);
    let w = pseudo_random(2, 23);
    assert_grad_matches(feats, |g, h| {
        let vv = g.constant(t(&[2, 3], &v));
        let vt = g.transpose(vv).unwrap();
        let hid = g.matmul(h, vt).unwrap();
        let act = g.tanh(hid);
        let wv = g.constant(t(&[2, 1], &w));
        let scores = g.matmul(act, wv).unwrap();
        let scores = g.reshape(scores, &[4]).unwrap();
        let a = g.softmax(scores).unwrap();
        let a_row = g.reshape(a, &[1, 4]).unwrap();
        let z = g.matmul(a_row, h).unwrap();
        let z2 = g.mul(z, z).unwrap();
        g.sum(z2)
    });
}

#[test]
fn elementwise_and_structural_ops_match_finite_differences() {
    let x = t(&[3, 2], &pseudo_random(6, 31));
    assert_grad_matches(x.clone(), |g, x| {
        let b = g.constant(t(&[2], &[0.3, -0.4]));
        let y = g.add_row_bias(x, b).unwrap();
        let c = g.constant(t(&[3, 2], &pseudo_random(6, 32)));
        let y = g.add(y, c).unwrap();
        let y = g.scale(y, 1.7);
        let top = g.concat_rows(&[y, x]).unwrap();
        let tt = g.transpose(top).unwrap();
        let sq = g.mul(tt, tt).unwrap();
        let th = g.tanh(sq);
        g.mean(th)
    });
    // Row gradient scaling flips row contributions without touching the forward value.
    let mut g = Graph::<f64>::new();
    let xv = g.param(x.clone());
    let s = g.row_grad_scale(xv, vec![1.0, -2.0, 0.0]).unwrap();
    assert_eq!(g.value(s), &x);
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    assert_eq!(
        grads.get(xv).unwrap().data(),
        &[1.0, 1.0, -2.0, -2.0, 0.0, 0.0]
    );
}

#[test]
fn softmax_rows_and_cross_entropy_rows_match_finite_differences() {
    let x = t(&[3, 4], &pseudo_random(12, 41));
    let target = t(
        &[3, 4],
        &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.2, 0.3, 0.1, 0.4],
    );
    assert_grad_matches(x, |g, x| {
        let p = g.softmax(x).unwrap();
        let ce = g.cross_entropy(&target, p).unwrap();
        let w = g.constant(t(&[3], &[0.5, 1.0, -0.25]));
        let weighted = g.mul(ce, w).unwrap();
        g.sum(weighted)
    });
}

#[test]
fn operations_are_bit_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_f64(vec![2, 2, 6, 6], &pseudo_random(144, 51)).unwrap());
        let k = g.param(Tensor::from_f64(vec![3, 2, 3, 3], &pseudo_random(54, 52)).unwrap());
        let b = g.param(Tensor::zeros(vec![3]));
        let y = g.conv2d(x, k, b, 1).unwrap();
        let y = g.relu(y);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        (g.value(y).clone(), grads.get(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(v in prop::collection::vec(-50.0f32..50.0, 1..20)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(v));
        let s = g.softmax(x).unwrap();
        let d = g.value(s).data();
        prop_assert!(d.iter().all(|&p| p > 0.0));
        let total: f32 = d.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_shift_invariant(
        ticks in prop::collection::vec(-10_240i32..10_240, 1..12),
        c in -100i32..=100,
    ) {
        // Inputs on a 1/1024 grid so that `v + c` is exact in f32.
        let v: Vec<f32> = ticks.iter().map(|&t| t as f32 / 1024.0).collect();
        let c = c as f32;
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(v.clone()));
        let shifted = g.constant(Tensor::vector(v.iter().map(|x| x + c).collect()));
        let a = g.softmax(x).unwrap();
        let b = g.softmax(shifted).unwrap();
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_passes_stay_finite(v in prop::collection::vec(-1e3f32..1e3, 4)) {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(vec![2, 2], v).unwrap());
        let th = g.tanh(x);
        let r = g.relu(x);
        let sm = g.softmax(x).unwrap();
        let target = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ce = g.cross_entropy(&target, sm).unwrap();
        let l = g.sum(ce);
        for var in [th, r, sm, ce, l] {
            prop_assert!(g.value(var).all_finite());
        }
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.get(x).unwrap().all_finite());
    }
}
