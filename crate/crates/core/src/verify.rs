//! Finite-difference verification of every differentiable operation, the
//! model blocks built from them, and the stage-1 update directions.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ClassLabel;
use crate::error::Result;
use crate::model::{
    beta_weights, domain_forward, extractor_forward, head_forward, DomainVars, ExtractorVars, HeadVars, ModelConfig,
    ParamSet,
};
use crate::tensor::gradcheck::{compare_gradients, finite_diff_gradient, GradComparison};
use crate::tensor::{Graph, OpKind, Tensor, Var};
use crate::train::{stage1_gradients, Stage1Model};

/// Largest accepted relative error.
pub const REL_TOL: f64 = 1e-4;
/// Name of the check covering the full stage-1 objective.
pub const OBJECTIVE_CHECK: &str = "objective";
const STEP: f64 = 1e-4;
/// Used where the extractor's relu and max-pool kinks lie within `STEP` of
/// the sample point, which would make the difference quotient meaningless.
const KINK_STEP: f64 = 1e-6;
const SEED: u64 = 0x6772_6164;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub comparison: GradComparison,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.comparison.passes(REL_TOL)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>8} {:>14} {:>14}  result", "check", "elements", "max_rel_err", "max_small_abs")?;
        for r in &self.results {
            let c = &r.comparison;
            writeln!(
                f,
                "{:<20} {:>8} {:>14.3e} {:>14.3e}  {}",
                r.name,
                c.elements,
                c.max_relative_error,
                c.max_small_abs_error,
                if r.passed() { "pass" } else { "FAIL" }
            )?;
        }
        match self.failures().as_slice() {
            [] => write!(f, "all {} checks passed (tolerance {REL_TOL:e})", self.results.len()),
            failed => write!(f, "FAILED: {}", failed.join(", ")),
        }
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One differentiable computation of some input tensors. The scalar under
/// test is `Σ out ⊙ probe` for a fixed random `probe`.
struct Check {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Build,
    /// Rows of the first input's numeric gradient are multiplied by these,
    /// for operations that only rescale the backward pass.
    row_factors: Option<Vec<f64>>,
    step: f64,
}

impl Check {
    fn new(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Check {
            name,
            inputs,
            build: Box::new(build),
            row_factors: None,
            step: STEP,
        }
    }

    fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    fn run(&self, probe_rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<CheckResult> {
        let forward = |inputs: &[Tensor<f64>], g: &mut Graph<f64>| -> Result<(Vec<Var>, Var)> {
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = (self.build)(g, &vars)?;
            Ok((vars, out))
        };
        let mut g = Graph::new();
        if let Some(kind) = fault {
            g.inject_backward_fault(kind);
        }
        let (vars, out) = forward(&self.inputs, &mut g)?;
        let probe = random(probe_rng, g.value(out).shape().to_vec(), 1.0);
        let loss = weighted_sum(&mut g, out, &probe)?;
        let grads = g.backward(loss)?;

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (i, &v) in vars.iter().enumerate() {
            analytic.extend(grads.get(v).map_or_else(|| vec![0.0; self.inputs[i].len()], |t| t.data().to_vec()));
            let objective = |x: &Tensor<f64>| -> f64 {
                let mut inputs = self.inputs.clone();
                inputs[i] = x.clone();
                let mut g = Graph::new();
                let (_, out) = forward(&inputs, &mut g).expect("forward succeeded at the base point");
                g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let mut fd = finite_diff_gradient(objective, &self.inputs[i], self.step).into_data();
            if let (0, Some(factors)) = (i, &self.row_factors) {
                let cols = fd.len() / factors.len();
                for (row, &f) in fd.chunks_mut(cols).zip(factors) {
                    row.iter_mut().for_each(|v| *v *= f);
                }
            }
            numeric.extend(fd);
        }
        Ok(CheckResult {
            name: self.name.to_string(),
            comparison: compare_gradients(&analytic, &numeric),
        })
    }
}

fn weighted_sum(g: &mut Graph<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = g.constant(probe.clone());
    let prod = g.mul(out, p)?;
    Ok(g.sum(prod))
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape and data agree")
}

/// Values at least 0.1 away from zero, so no step crosses a kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Distinct values spaced 0.05 apart in random order, so pooling windows never tie.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).expect("shape and data agree")
}

fn positive(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.1..1.0)).collect()).expect("shape and data agree")
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        patch_size: 14,
        conv1_channels: 2,
        conv2_channels: 2,
        kernel_size: 3,
        embed_dim: 4,
        attention_hidden: 3,
        domain_hidden: 4,
    }
}

fn op_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut checks = vec![
        Check::new("matmul", vec![random(rng, vec![3, 4], 1.0), random(rng, vec![4, 2], 1.0)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        Check::new("transpose", vec![random(rng, vec![3, 4], 1.0)], |g, v| g.transpose(v[0])),
        Check::new("add", vec![random(rng, vec![2, 3], 1.0), random(rng, vec![2, 3], 1.0)], |g, v| {
            g.add(v[0], v[1])
        }),
        Check::new("mul", vec![random(rng, vec![2, 3], 1.0), random(rng, vec![2, 3], 1.0)], |g, v| {
            g.mul(v[0], v[1])
        }),
        Check::new("scale", vec![random(rng, vec![5], 1.0)], |g, v| Ok(g.scale(v[0], -1.7))),
        Check::new("sum", vec![random(rng, vec![2, 4], 1.0)], |g, v| Ok(g.sum(v[0]))),
        Check::new("mean", vec![random(rng, vec![3, 3], 1.0)], |g, v| Ok(g.mean(v[0]))),
        Check::new("add_row_bias", vec![random(rng, vec![3, 4], 1.0), random(rng, vec![4], 1.0)], |g, v| {
            g.add_row_bias(v[0], v[1])
        }),
        Check::new(
            "linear",
            vec![random(rng, vec![3, 4], 1.0), random(rng, vec![4, 2], 1.0), random(rng, vec![2], 1.0)],
            |g, v| g.linear(v[0], v[1], v[2]),
        ),
        Check::new("reshape", vec![random(rng, vec![2, 6], 1.0)], |g, v| g.reshape(v[0], &[3, 4])),
        Check::new("concat_rows", vec![random(rng, vec![2, 3], 1.0), random(rng, vec![1, 3], 1.0)], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        }),
        Check::new(
            "conv2d",
            vec![random(rng, vec![2, 5, 5], 1.0), random(rng, vec![3, 2, 3, 3], 1.0), random(rng, vec![3], 1.0)],
            |g, v| g.conv2d(v[0], v[1], v[2], 1),
        ),
        Check::new(
            "conv2d_strided",
            vec![random(rng, vec![2, 2, 7, 7], 1.0), random(rng, vec![2, 2, 3, 3], 1.0), random(rng, vec![2], 1.0)],
            |g, v| g.conv2d(v[0], v[1], v[2], 2),
        ),
        Check::new("tanh", vec![random(rng, vec![3, 4], 2.0)], |g, v| Ok(g.tanh(v[0]))),
        Check::new("relu", vec![away_from_zero(rng, vec![3, 4])], |g, v| Ok(g.relu(v[0]))),
        Check::new("maxpool2x2", vec![distinct(rng, vec![2, 5, 4])], |g, v| g.maxpool2x2(v[0])),
        Check::new("softmax", vec![random(rng, vec![5], 2.0)], |g, v| g.softmax(v[0])),
        Check::new("softmax_rows", vec![random(rng, vec![3, 4], 2.0)], |g, v| g.softmax(v[0])),
    ];
    let target = positive(rng, vec![4]);
    checks.push(Check::new("cross_entropy", vec![positive(rng, vec![4])], move |g, v| {
        g.cross_entropy(&target, v[0])
    }));
    let target = positive(rng, vec![3, 4]);
    checks.push(Check::new("cross_entropy_rows", vec![positive(rng, vec![3, 4])], move |g, v| {
        g.cross_entropy(&target, v[0])
    }));
    let factors = vec![-0.5, 0.0, 1.3];
    let mut scaler = {
        let factors = factors.clone();
        Check::new("row_grad_scale", vec![random(rng, vec![3, 4], 1.0)], move |g, v| {
            g.row_grad_scale(v[0], factors.clone())
        })
    };
    scaler.row_factors = Some(factors);
    checks.push(scaler);
    checks
}

fn model_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let cfg = micro_config();
    let model = Stage1Model::<f64>::init(&cfg, 1, 3, rng)?;
    let q = model.extractor.feature_dim();

    let mut inputs: Vec<Tensor<f64>> = model.extractor.tensors().into_iter().cloned().collect();
    inputs.push(random(rng, vec![2, 3, cfg.patch_size, cfg.patch_size], 1.0));
    let extractor = Check::new("extractor", inputs, |g, v| {
        let vars = ExtractorVars {
            conv1_kernels: v[0],
            conv1_bias: v[1],
            conv2_kernels: v[2],
            conv2_bias: v[3],
        };
        extractor_forward(g, &vars, v[4])
    })
    .with_step(KINK_STEP);

    let mut inputs: Vec<Tensor<f64>> = model.head.tensors().into_iter().cloned().collect();
    inputs.push(random(rng, vec![3, q], 1.0));
    let head = Check::new("bag_head", inputs, |g, v| {
        let vars = HeadVars {
            fc_weight: v[0],
            fc_bias: v[1],
            attention_v: v[2],
            attention_w: v[3],
            classifier_weight: v[4],
            classifier_bias: v[5],
        };
        Ok(head_forward(g, &vars, v[6])?.probs)
    });

    let mut inputs: Vec<Tensor<f64>> = model.domain.tensors().into_iter().cloned().collect();
    inputs.push(random(rng, vec![3, q], 1.0));
    let domain = Check::new("domain_head", inputs, |g, v| {
        let vars = DomainVars {
            hidden_weight: v[0],
            hidden_bias: v[1],
            output_weight: v[2],
            output_bias: v[3],
        };
        domain_forward(g, &vars, v[4])
    });
    Ok(vec![extractor, head, domain])
}

/// `(L_bag, L_d, L′_d)` of one bag with the attention gaps held fixed.
pub fn stage1_losses(
    model: &Stage1Model<f64>,
    batch: &Tensor<f64>,
    label: ClassLabel,
    domain: usize,
    betas: &[f64],
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let ex = model.extractor.bind(&mut g, false);
    let hd = model.head.bind(&mut g, false);
    let dm = model.domain.bind(&mut g, false);
    let x = g.constant(batch.clone());
    let h = extractor_forward(&mut g, &ex, x)?;
    let nodes = head_forward(&mut g, &hd, h)?;
    let bag = g.cross_entropy(&label.one_hot(), nodes.probs)?;
    let probs = domain_forward(&mut g, &dm, h)?;
    let n = batch.shape()[0];
    let n_domains = model.domain.n_domains();
    let mut target = vec![0.0; n * n_domains];
    for row in 0..n {
        target[row * n_domains + domain] = 1.0;
    }
    let per = g.cross_entropy(&Tensor::new(vec![n, n_domains], target)?, probs)?;
    let per = g.value(per).data();
    let mean = per.iter().sum::<f64>() / n as f64;
    let weighted = per.iter().zip(betas).map(|(l, b)| l * b).sum::<f64>() / n as f64;
    Ok((g.value(bag).item(), mean, weighted))
}

/// Numeric gradient of `f` with respect to every tensor of the group picked
/// by `select`, flattened in parameter order.
fn group_gradient(
    model: &Stage1Model<f64>,
    select: fn(&mut Stage1Model<f64>) -> Vec<&mut Tensor<f64>>,
    f: &dyn Fn(&Stage1Model<f64>) -> f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    let count = select(&mut probe).len();
    let mut out = Vec::new();
    for k in 0..count {
        let base = select(&mut probe.clone()).swap_remove(k).clone();
        let grad = finite_diff_gradient(
            |x| {
                let mut m = model.clone();
                *select(&mut m).swap_remove(k) = x.clone();
                f(&m)
            },
            &base,
            STEP,
        );
        out.extend(grad.into_data());
    }
    out
}

/// Stage-1 update directions from one backward pass against finite
/// differences of the bag loss, the domain loss and the attention-weighted
/// domain loss.
fn objective_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let cfg = micro_config();
    let model = Stage1Model::<f64>::init(&cfg, 1, 3, rng)?;
    let batch = random(rng, vec![3, 3, cfg.patch_size, cfg.patch_size], 1.0);
    let (label, domain, lambda) = (ClassLabel::Positive, 1, 0.7);
    let grads = stage1_gradients(&model, &batch, label, domain, lambda)?;
    let betas = beta_weights(&grads.attentions);
    let losses = |m: &Stage1Model<f64>| stage1_losses(m, &batch, label, domain, &betas).expect("forward at base point");

    let extractor = group_gradient(&model, |m| m.extractor.tensors_mut(), &|m| {
        let (bag, _, weighted) = losses(m);
        bag - lambda * weighted
    });
    let head = group_gradient(&model, |m| m.head.tensors_mut(), &|m| losses(m).0);
    let dom = group_gradient(&model, |m| m.domain.tensors_mut(), &|m| lambda * losses(m).1);

    let flat = |v: &[Tensor<f64>]| v.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>();
    let mut analytic = flat(&grads.extractor);
    analytic.extend(flat(&grads.head));
    analytic.extend(flat(grads.domain.as_deref().unwrap_or_default()));
    let numeric: Vec<f64> = extractor.into_iter().chain(head).chain(dom).collect();
    Ok(CheckResult {
        name: OBJECTIVE_CHECK.to_string(),
        comparison: compare_gradients(&analytic, &numeric),
    })
}

/// Runs every check in 64-bit. With `fault` set, the backward rule of that
/// operation is deliberately perturbed so the report shows the checker
/// catching it.
pub fn run_gradcheck(fault: Option<OpKind>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut checks = op_checks(&mut rng);
    checks.extend(model_checks(&mut rng)?);
    let mut results = checks
        .iter()
        .map(|c| c.run(&mut rng, fault))
        .collect::<Result<Vec<_>>>()?;
    results.push(objective_check(&mut rng)?);
    Ok(GradcheckReport { results })
}
