//! Built-in oracle suite. Each check compares a fast path against an
//! independent computation and reports pass/fail with the worst deviation.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::cav::{
    gather_rows, random_concepts, train_cav, train_ensemble_on, Cav, CavEnsemble, ProbeConfig,
};
use crate::concepts::{ConceptRule, ConceptSet};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::net::{
    self, lstm_step, Activation, BcLstmModel, BottleneckId, Layer, LstmParams, LstmVars,
    ModelConfig,
};
use crate::oracle::{
    compare_gradients, head_gradient64, head_logits64, lstm_step64, matmul64, numeric_gradient,
    perceptron_separable, sigmoid64, t_two_tailed_quadrature, to_f64, Mismatch,
};
use crate::pipeline::{Pipeline, REPORT_JSON};
use crate::seed::{derive, name_hash};
use crate::synth::{self, generate, orthonormal_directions, PlantedSpec, CLASS_COUNT};
use crate::tcav::{
    build_report, class_gradients, required_rejections, score_distribution_from,
    score_from_derivatives, significance, tcav_score, two_tailed_p, Protocol, ScoreDistribution,
    TcavReport, Triple,
};
use crate::tensor::{self, Graph, Tensor, Var};

/// Relative tolerance of the gradient checks.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Absolute floor of the gradient checks.
pub const GRAD_ABS_TOL: f64 = 1e-6;
const FD_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[derive(Clone, Debug)]
pub struct ValidateOptions {
    pub seed: u64,
    pub gradient_seeds: usize,
    pub monte_carlo_runs: usize,
    /// Corrupts the tanh backward rule during the gradient check.
    pub inject_gradient_fault: bool,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions {
            seed: 0,
            gradient_seeds: 20,
            monte_carlo_runs: 200,
            inject_gradient_fault: false,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // Kept away from zero so relu is differentiable at every sample.
    let data = (0..n)
        .map(|_| {
            let x: f32 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn split64(x: &[f64], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        out.push(x[at..at + s].to_vec());
        at += s;
    }
    out
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;
type Reference = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

/// Analytic gradient of `Σ w ⊙ op(inputs)` against central differences of
/// an f64 reimplementation of `op`.
fn check_op(
    inputs: &[Tensor],
    weights: &Tensor,
    build: &Build,
    reference: &Reference,
) -> Result<Option<Mismatch>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let weighted = g.mul(out, w)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;
    let mut analytic = Vec::new();
    for &v in &vars {
        analytic.extend(to_f64(grads.get(v)?));
    }
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let x: Vec<f64> = inputs.iter().flat_map(to_f64).collect();
    let w64 = to_f64(weights);
    let f = |x: &[f64]| -> f64 {
        reference(&split64(x, &sizes))
            .iter()
            .zip(&w64)
            .map(|(a, b)| a * b)
            .sum()
    };
    let numeric = numeric_gradient(f, &x, FD_EPS);
    Ok(compare_gradients(
        &analytic,
        &numeric,
        GRAD_REL_TOL,
        GRAD_ABS_TOL,
    ))
}

fn elementwise(f: fn(f64) -> f64) -> Box<Reference> {
    Box::new(move |xs: &[Vec<f64>]| xs[0].iter().map(|&x| f(x)).collect())
}

/// Name, inputs, output weights, graph builder and f64 reference.
type Case = (
    &'static str,
    Vec<Tensor>,
    Tensor,
    Box<Build>,
    Box<Reference>,
);

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let (m, k, n) = (3, 4, 5);
    let a = uniform(rng, &[m, k]);
    let b = uniform(rng, &[k, n]);
    let a2 = uniform(rng, &[m, k]);
    let row = uniform(rng, &[k]);
    let wmk = uniform(rng, &[m, k]);
    let wmn = uniform(rng, &[m, n]);
    let row_weights: Vec<f32> = (0..m).map(|i| [1.0, 0.0, -0.5][i % 3]).collect();
    let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let xent_w: Vec<f32> = vec![1.0, 0.5, 0.0];
    let scalar_w = Tensor::scalar(1.0);
    let binary = |f: fn(f64, f64) -> f64| -> Box<Reference> {
        Box::new(move |xs: &[Vec<f64>]| xs[0].iter().zip(&xs[1]).map(|(&x, &y)| f(x, y)).collect())
    };
    let rw = row_weights.clone();
    let rw64: Vec<f64> = row_weights.iter().map(|&w| f64::from(w)).collect();
    let tg = targets.clone();
    let xw = xent_w.clone();
    vec![
        (
            "matmul",
            vec![a.clone(), b.clone()],
            wmn.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1])),
            Box::new(move |xs: &[Vec<f64>]| matmul64(&xs[0], &xs[1], m, k, n)),
        ),
        (
            "add",
            vec![a.clone(), a2.clone()],
            wmk.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1])),
            binary(|x, y| x + y),
        ),
        (
            "sub",
            vec![a.clone(), a2.clone()],
            wmk.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.sub(v[0], v[1])),
            binary(|x, y| x - y),
        ),
        (
            "mul",
            vec![a.clone(), a2.clone()],
            wmk.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1])),
            binary(|x, y| x * y),
        ),
        (
            "sigmoid",
            vec![a.clone()],
            wmk.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.sigmoid(v[0])),
            elementwise(sigmoid64),
        ),
        (
            "tanh",
            vec![a.clone()],
            wmk.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.tanh(v[0])),
            elementwise(f64::tanh),
        ),
        (
            "relu",
            vec![a.clone()],
            wmk.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.relu(v[0])),
            elementwise(|x| x.max(0.0)),
        ),
        (
            "scale",
            vec![a.clone()],
            wmk.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.scale(v[0], -1.75)),
            elementwise(|x| -1.75 * x),
        ),
        (
            "add_row",
            vec![a.clone(), row.clone()],
            wmk.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.add_row(v[0], v[1])),
            Box::new(move |xs: &[Vec<f64>]| (0..m * k).map(|i| xs[0][i] + xs[1][i % k]).collect()),
        ),
        (
            "row_scale",
            vec![a.clone()],
            wmk.clone(),
            Box::new(move |g: &mut Graph, v: &[Var]| g.row_scale(v[0], &rw)),
            Box::new(move |xs: &[Vec<f64>]| (0..m * k).map(|i| xs[0][i] * rw64[i / k]).collect()),
        ),
        (
            "slice_cols",
            vec![a.clone()],
            uniform(rng, &[m, 2]),
            Box::new(|g: &mut Graph, v: &[Var]| g.slice_cols(v[0], 1, 2)),
            Box::new(move |xs: &[Vec<f64>]| {
                (0..m)
                    .flat_map(|i| [xs[0][i * k + 1], xs[0][i * k + 2]])
                    .collect()
            }),
        ),
        (
            "sum",
            vec![a.clone()],
            scalar_w.clone(),
            Box::new(|g: &mut Graph, v: &[Var]| g.sum(v[0])),
            Box::new(|xs: &[Vec<f64>]| vec![xs[0].iter().sum()]),
        ),
        (
            "softmax_cross_entropy",
            vec![a.clone()],
            scalar_w,
            Box::new(move |g: &mut Graph, v: &[Var]| g.softmax_cross_entropy(v[0], &tg, &xw)),
            Box::new(move |xs: &[Vec<f64>]| {
                let mut total = 0.0;
                for i in 0..m {
                    let r = &xs[0][i * k..(i + 1) * k];
                    let lse = r.iter().map(|z| z.exp()).sum::<f64>().ln();
                    total += f64::from(xent_w[i]) * (lse - r[targets[i]]);
                }
                vec![total]
            }),
        ),
    ]
}

fn check_concat(rng: &mut ChaCha8Rng) -> Result<Option<Mismatch>> {
    let (m, p, q) = (3, 2, 4);
    let x = uniform(rng, &[m, p]);
    let y = uniform(rng, &[m, q]);
    let w = uniform(rng, &[m, p + q]);
    check_op(
        &[x, y],
        &w,
        &|g: &mut Graph, v: &[Var]| g.concat_cols(v),
        &move |xs: &[Vec<f64>]| {
            (0..m)
                .flat_map(|i| {
                    xs[0][i * p..(i + 1) * p]
                        .iter()
                        .chain(&xs[1][i * q..(i + 1) * q])
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect()
        },
    )
}

fn check_lstm_step(rng: &mut ChaCha8Rng) -> Result<Option<Mismatch>> {
    let (b, d, u) = (2, 3, 4);
    let p = LstmParams::init(rng, d, u);
    let x = uniform(rng, &[b, d]);
    let h = uniform(rng, &[b, u]);
    let c = uniform(rng, &[b, u]);
    let (wh, wc) = (uniform(rng, &[b, u]), uniform(rng, &[b, u]));
    let inputs = [
        p.input_weights.clone(),
        p.recurrent_weights.clone(),
        p.biases.clone(),
        x,
        h,
        c,
    ];
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let lv = LstmVars {
        input_weights: vars[0],
        recurrent_weights: vars[1],
        biases: vars[2],
        hidden_size: u,
    };
    let (h1, c1) = lstm_step(&mut g, &lv, vars[3], vars[4], vars[5])?;
    let (whv, wcv) = (g.constant(wh.clone()), g.constant(wc.clone()));
    let a = g.mul(h1, whv)?;
    let a = g.sum(a)?;
    let bb = g.mul(c1, wcv)?;
    let bb = g.sum(bb)?;
    let loss = g.add(a, bb)?;
    let grads = g.backward(loss)?;
    let mut analytic = Vec::new();
    for &v in &vars {
        analytic.extend(to_f64(grads.get(v)?));
    }
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let x0: Vec<f64> = inputs.iter().flat_map(to_f64).collect();
    let (wh, wc) = (to_f64(&wh), to_f64(&wc));
    let f = |x: &[f64]| {
        let s = split64(x, &sizes);
        let (h1, c1) = lstm_step64(&s[0], &s[1], &s[2], &s[3], &s[4], &s[5], b, d, u);
        h1.iter().zip(&wh).map(|(a, b)| a * b).sum::<f64>()
            + c1.iter().zip(&wc).map(|(a, b)| a * b).sum::<f64>()
    };
    let numeric = numeric_gradient(f, &x0, FD_EPS);
    Ok(compare_gradients(
        &analytic,
        &numeric,
        GRAD_REL_TOL,
        GRAD_ABS_TOL,
    ))
}

fn small_model(batch: &synth::ConversationBatch, seed: u64) -> Result<BcLstmModel> {
    let mut cfg = ModelConfig::for_batch(batch);
    cfg.unimodal_hidden = 6;
    cfg.unimodal_dense = 5;
    cfg.fusion_hidden = 4;
    cfg.fusion_dense = 5;
    BcLstmModel::new(cfg, seed)
}

fn check_logit_gradients(seed: u64) -> Result<Vec<(String, Option<Mismatch>)>> {
    let batch = generate(&PlantedSpec::default_with_seed(seed), 2, 4)?;
    let model = small_model(&batch, seed)?;
    let k = (seed % CLASS_COUNT as u64) as usize;
    let mut out = Vec::new();
    for l in model.bottlenecks() {
        let acts = model.activations(&batch, &l)?;
        let analytic = model.logit_gradient(&batch, k, &l)?;
        let (n, t, f) = acts.dims3()?;
        let acts64 = to_f64(&acts);
        let mut numeric = vec![0.0; n * t * f];
        for s in 0..n * t {
            if !batch.mask[s] {
                continue;
            }
            let row = &acts64[s * f..(s + 1) * f];
            let fd = numeric_gradient(
                |x| head_logits64(&model, &l, x).map_or(f64::NAN, |z| z[k]),
                row,
                FD_EPS,
            );
            numeric[s * f..(s + 1) * f].copy_from_slice(&fd);
        }
        out.push((
            l.to_string(),
            compare_gradients(&to_f64(&analytic), &numeric, GRAD_REL_TOL, GRAD_ABS_TOL),
        ));
    }
    Ok(out)
}

/// Reverse-mode gradients of every primitive, the LSTM step and
/// `logit_gradient` at every bottleneck against central differences of f64
/// references, over `seeds` seeds.
pub fn gradient_integrity(base_seed: u64, seeds: usize, inject_fault: bool) -> CheckResult {
    timed("gradient integrity", || {
        if inject_fault {
            tensor::set_gradient_fault(true);
        }
        let result = (|| -> Result<(usize, Vec<String>)> {
            let mut checks = 0;
            let mut failures = Vec::new();
            let mut note = |what: String, m: Option<Mismatch>, checks: &mut usize| {
                *checks += 1;
                if let Some(m) = m {
                    failures.push(format!(
                        "{what}: index {} analytic {:.6e} numeric {:.6e} rel {:.2e}",
                        m.index, m.analytic, m.numeric, m.rel_error
                    ));
                }
            };
            for i in 0..seeds {
                let seed = derive(base_seed, &[name_hash("gradients"), i as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for (name, inputs, weights, build, reference) in primitive_cases(&mut rng) {
                    let m = check_op(&inputs, &weights, &*build, &*reference)?;
                    note(format!("seed {i} {name}"), m, &mut checks);
                }
                note(
                    format!("seed {i} concat_cols"),
                    check_concat(&mut rng)?,
                    &mut checks,
                );
                note(
                    format!("seed {i} lstm_step"),
                    check_lstm_step(&mut rng)?,
                    &mut checks,
                );
                for (l, m) in check_logit_gradients(seed)? {
                    note(format!("seed {i} logit_gradient {l}"), m, &mut checks);
                }
            }
            Ok((checks, failures))
        })();
        if inject_fault {
            tensor::set_gradient_fault(false);
        }
        let (checks, failures) = result?;
        Ok(if failures.is_empty() {
            (true, format!("{checks} checks over {seeds} seeds within rel {GRAD_REL_TOL:e} / abs {GRAD_ABS_TOL:e}"))
        } else {
            (
                false,
                format!(
                    "{} of {checks} checks failed; first: {}",
                    failures.len(),
                    failures[0]
                ),
            )
        })
    })
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, center: &[f64], sigma: f64) -> Tensor {
    let d = center.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for &c in center {
            let z: f64 = StandardNormal.sample(rng);
            data.push((c + sigma * z) as f32);
        }
    }
    Tensor::new(vec![n, d], data).expect("shape matches")
}

fn rows64(t: &Tensor) -> Vec<Vec<f64>> {
    let (m, _) = t.dims2().expect("matrix");
    (0..m)
        .map(|i| t.row(i).iter().map(|&x| f64::from(x)).collect())
        .collect()
}

/// Unit-separated clusters give near-perfect held-out accuracy with a stable
/// ensemble; random labels give chance accuracy.
pub fn probe_sanity(base_seed: u64) -> CheckResult {
    timed("probe sanity", || {
        let cfg = ProbeConfig::default();
        let l = BottleneckId::multimodal_canonical();
        let (d, n) = (32, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(derive(base_seed, &[name_hash("probe-separable")]));
        let u: Vec<f64> = orthonormal_directions(&mut rng, 1, d)[0]
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let center = |s: f64| -> Vec<f64> {
            offset
                .iter()
                .zip(&u)
                .map(|(o, u)| o + s * 0.5 * u)
                .collect()
        };
        let pos = gaussian_rows(&mut rng, n, &center(1.0), 0.05);
        let neg = gaussian_rows(&mut rng, n, &center(-1.0), 0.05);
        let all: Vec<Vec<f64>> = rows64(&pos).into_iter().chain(rows64(&neg)).collect();
        let labels: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
        if !perceptron_separable(&all, &labels, 2, 1000) {
            return Ok((false, "separable fixture is not linearly separable".into()));
        }
        let members = (0..30)
            .map(|r| {
                train_cav(
                    "separable",
                    &l,
                    &pos,
                    &neg,
                    derive(base_seed, &[1, r]),
                    &cfg,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ens = CavEnsemble {
            concept: "separable".into(),
            bottleneck: l.clone(),
            members,
        };
        let min_acc = ens
            .members
            .iter()
            .map(|c| c.heldout_accuracy)
            .fold(1.0, f64::min);
        let min_cos = ens
            .members
            .iter()
            .map(|c| {
                c.direction
                    .iter()
                    .zip(&u)
                    .map(|(&a, b)| f64::from(a) * b)
                    .sum::<f64>()
            })
            .fold(1.0, f64::min);
        let std = ens.accuracy_std();

        let mut accs = Vec::new();
        for r in 0..30u64 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive(base_seed, &[name_hash("probe-random"), r]));
            let rows = gaussian_rows(&mut rng, 2 * n, &vec![0.0; 64], 1.0);
            let mut idx: Vec<usize> = (0..2 * n).collect();
            rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
            let pos = gather_rows(&rows.clone().reshape(vec![1, 2 * n, 64])?, &idx[..n])?;
            let neg = gather_rows(&rows.reshape(vec![1, 2 * n, 64])?, &idx[n..])?;
            accs.push(train_cav("random", &l, &pos, &neg, r, &cfg)?.heldout_accuracy);
        }
        let random_mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let passed = min_acc >= 0.99 && std < 0.05 && (random_mean - 0.5).abs() <= 0.1;
        Ok((
            passed,
            format!(
                "separable: min held-out accuracy {min_acc:.3}, std {std:.4}, min cos to planted {min_cos:.3}; random labels: mean {random_mean:.3}"
            ),
        ))
    })
}

/// A model whose video branch has a hand-set dense layer and head:
/// orthogonal dense columns and head column `k` equal to `(e₁ + e₂)/√2`. At the contextual LSTM output the gradient of logit `k`
/// is `W D (e₁ + e₂)/√2` with `D` the positive tanh derivative, so
/// `v_C = W(e₁ + e₂)/√2` has derivative `(D₁₁ + D₂₂)/2 > 0` everywhere while
/// `v_O = W(e₁ − e₂)/√2` has `(D₁₁ − D₂₂)/2`, whose sign varies.
pub struct PlantedFixture {
    pub model: BcLstmModel,
    pub batch: synth::ConversationBatch,
    pub bottleneck: BottleneckId,
    pub class_id: usize,
    pub planted: Vec<f64>,
    pub orthogonal: Vec<f64>,
}

/// Leading eigenvectors of the covariance of `rows` by power iteration with
/// deflation, plus the mean.
fn principal_axes(
    rows: &[Vec<f64>],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let ci = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += ci * (r[j] - mean[j]) / n;
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..count {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2000 {
            let mut w = matmul64(&cov, &v, d, d, 1);
            for a in &axes {
                let p: f64 = w.iter().zip(a).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter_mut().for_each(|x| *x /= norm);
            v = w;
        }
        axes.push(v);
    }
    (axes, mean)
}

/// Standard deviation of the two planted pre-activations.
const PLANTED_SPREAD: f64 = 2.5;

/// Builds the fixture on a random model and a 30-video batch.
///
/// The first two dense columns are `(p₁ ± p₂)/√2` for the top two principal
/// axes `p₁, p₂` of the activations, so that `v_C = p₁` and `v_O = p₂`:
/// concept sets split along a principal axis give probes aligned with it.
/// The dense bias centers the first two pre-activations on the mean over
/// utterances of class `k`.
pub fn planted_fixture(seed: u64) -> Result<PlantedFixture> {
    let batch = generate(&PlantedSpec::default_with_seed(seed), 30, 20)?;
    let mut model = BcLstmModel::new(ModelConfig::for_batch(&batch), seed)?;
    let modality = "video";
    let bottleneck = BottleneckId::unimodal(modality, Layer::ContextualLstmOutput);
    let i = model
        .modality_index(modality)
        .ok_or_else(|| Error::Data("fixture needs a video modality".into()))?;
    let acts = model.activations(&batch, &bottleneck)?;
    let (_, _, fi) = acts.dims3()?;
    let rows: Vec<Vec<f64>> = batch
        .valid_slots()
        .iter()
        .map(|&s| {
            acts.data()[s * fi..(s + 1) * fi]
                .iter()
                .map(|&x| f64::from(x))
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[name_hash("planted")]));
    let (axes, mean) = principal_axes(&rows, 2, &mut rng);
    let k = 3;
    let branch = &mut model.unimodal[i];
    let (_, fo) = branch.dense.weight.dims2()?;
    let s64 = std::f64::consts::FRAC_1_SQRT_2;
    let first = [
        axes[0]
            .iter()
            .zip(&axes[1])
            .map(|(a, b)| s64 * (a + b))
            .collect::<Vec<_>>(),
        axes[0]
            .iter()
            .zip(&axes[1])
            .map(|(a, b)| s64 * (a - b))
            .collect::<Vec<_>>(),
    ];
    // Fill the remaining columns with random directions orthogonal to the
    // first two.
    let mut cols: Vec<Vec<f64>> = first.to_vec();
    while cols.len() < fo {
        let mut v: Vec<f64> = (0..fi).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    // A gain on the first two columns pushes their pre-activations into the
    // saturating range of tanh, so D₁₁ − D₂₂ is not negligible next to
    // D₁₁ + D₂₂.
    let spread = |v: &[f64]| -> f64 {
        let var = rows
            .iter()
            .map(|r| {
                r.iter()
                    .zip(v)
                    .zip(&mean)
                    .map(|((x, a), m)| (x - m) * a)
                    .sum::<f64>()
                    .powi(2)
            })
            .sum::<f64>()
            / rows.len() as f64;
        var.sqrt().max(1e-12)
    };
    let gains: Vec<f64> = (0..fo)
        .map(|j| {
            if j < 2 {
                PLANTED_SPREAD / spread(&cols[j])
            } else {
                1.0
            }
        })
        .collect();
    let mut w = vec![0.0f32; fi * fo];
    for (j, col) in cols.iter().enumerate() {
        for r in 0..fi {
            w[r * fo + j] = (gains[j] * col[r]) as f32;
        }
    }
    let class_rows: Vec<&Vec<f64>> = batch
        .valid_slots()
        .iter()
        .zip(&rows)
        .filter(|(&s, _)| usize::from(batch.labels[s]) == k)
        .map(|(_, r)| r)
        .collect();
    let class_mean: Vec<f64> = (0..fi)
        .map(|j| class_rows.iter().map(|r| r[j]).sum::<f64>() / class_rows.len().max(1) as f64)
        .collect();
    let mut bias = vec![0.0f32; fo];
    for j in 0..2 {
        bias[j] = -(gains[j]
            * cols[j]
                .iter()
                .zip(&class_mean)
                .map(|(c, m)| c * m)
                .sum::<f64>()) as f32;
    }
    branch.dense.weight = Tensor::new(vec![fi, fo], w)?;
    branch.dense.bias = Tensor::from_vec(bias);
    branch.dense.activation = Activation::Tanh;
    let (hi, ho) = branch.head.weight.dims2()?;
    let mut head = branch.head.weight.data().to_vec();
    for r in 0..hi {
        head[r * ho + k] = if r < 2 { s64 as f32 } else { 0.0 };
    }
    branch.head.weight = Tensor::new(vec![hi, ho], head)?;
    branch.head.bias = Tensor::zeros(&[ho]);
    Ok(PlantedFixture {
        model,
        batch,
        bottleneck,
        class_id: k,
        planted: axes[0].clone(),
        orthogonal: axes[1].clone(),
    })
}

/// Top and bottom 40% of valid utterances by projection onto `v`.
pub fn projection_concept(
    name: &str,
    acts: &Tensor,
    mask: &[bool],
    v: &[f64],
) -> Result<ConceptSet> {
    let (_, _, f) = acts.dims3()?;
    let mut proj: Vec<(f64, usize)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(s, _)| {
            let row = &acts.data()[s * f..(s + 1) * f];
            (row.iter().zip(v).map(|(&a, b)| f64::from(a) * b).sum(), s)
        })
        .collect();
    proj.sort_by(|a, b| a.0.total_cmp(&b.0));
    let take = proj.len() * 2 / 5;
    let mut negative_ids: Vec<usize> = proj[..take].iter().map(|p| p.1).collect();
    let mut positive_ids: Vec<usize> = proj[proj.len() - take..].iter().map(|p| p.1).collect();
    positive_ids.sort_unstable();
    negative_ids.sort_unstable();
    Ok(ConceptSet {
        name: name.to_string(),
        rule: ConceptRule::Fixture {
            description: "top vs bottom 40% by projection onto a planted direction".into(),
        },
        positive_ids,
        negative_ids,
    })
}

/// Score counted from f64 closed-form gradients, one utterance at a time.
fn brute_force_score(
    model: &BcLstmModel,
    acts: &Tensor,
    slots: &[usize],
    k: usize,
    l: &BottleneckId,
    v: &[f32],
) -> Result<(f64, usize)> {
    let (_, _, f) = acts.dims3()?;
    let mut positive = 0usize;
    let mut ties = 0usize;
    for &s in slots {
        let row: Vec<f64> = acts.data()[s * f..(s + 1) * f]
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        let grad = head_gradient64(model, l, &row, k)?;
        let mut d = 0.0f64;
        for j in 0..f {
            d += grad[j] * f64::from(v[j]);
        }
        if d > 0.0 {
            positive += 1;
        }
        if d.abs() < 1e-9 {
            ties += 1;
        }
    }
    if slots.is_empty() {
        return Err(Error::UndefinedScore("no utterances of the class".into()));
    }
    Ok((positive as f64 / slots.len() as f64, ties))
}

/// Planted-concept oracle: the planted CAV scores ≥ 0.9 and an orthogonal
/// one lands in [0.3, 0.7], with every score recounted by brute force.
pub fn planted_tcav(seed: u64) -> CheckResult {
    timed("planted-concept TCAV", || {
        let fx = planted_fixture(seed)?;
        let l = &fx.bottleneck;
        let acts = fx.model.activations(&fx.batch, l)?;
        let cfg = ProbeConfig::default();
        let slots = fx.batch.slots_with_label(fx.class_id);
        let grads = class_gradients(&fx.model, &fx.batch, fx.class_id, l)?;
        let mut lines = Vec::new();
        let mut passed = true;
        for (name, dir, lo, hi) in [
            ("planted", &fx.planted, 0.9, 1.0),
            ("orthogonal", &fx.orthogonal, 0.3, 0.7),
        ] {
            let concept = projection_concept(name, &acts, &fx.batch.mask, dir)?;
            let ens = train_ensemble_on(&acts, &concept, l, 10, seed, &cfg)?;
            let dist = score_distribution_from(&grads, fx.class_id, &ens)?;
            let mut mismatches = 0;
            for (c, &score) in ens.members.iter().zip(&dist.scores) {
                let (bf, ties) =
                    brute_force_score(&fx.model, &acts, &slots, fx.class_id, l, &c.direction)?;
                if (bf - score).abs() > ties as f64 / slots.len() as f64 {
                    mismatches += 1;
                }
            }
            // The exact planted directions, bypassing the probe.
            let exact: Vec<f32> = dir.iter().map(|&x| x as f32).collect();
            let (exact_score, _) =
                brute_force_score(&fx.model, &acts, &slots, fx.class_id, l, &exact)?;
            let mean = dist.mean();
            let in_range = dist.scores.iter().all(|&s| s >= lo - 1e-12) && mean <= hi && mean >= lo;
            passed &= in_range && mismatches == 0;
            lines.push(format!(
                "{name}: mean {mean:.3} (min {:.3}, max {:.3}), exact direction {exact_score:.3}, brute-force mismatches {mismatches}",
                dist.scores.iter().copied().fold(1.0, f64::min),
                dist.scores.iter().copied().fold(0.0, f64::max),
            ));
        }
        lines.push(format!(
            "{} utterances of class {}",
            slots.len(),
            fx.class_id
        ));
        Ok((passed, lines.join("; ")))
    })
}

/// Pipeline scores on small batches equal an explicit recount from
/// closed-form per-utterance gradients.
pub fn brute_force_equivalence(base_seed: u64) -> CheckResult {
    timed("brute-force equivalence", || {
        let mut compared = 0;
        let mut failures = Vec::new();
        for i in 0..10u64 {
            let seed = derive(base_seed, &[name_hash("brute"), i]);
            let batch = generate(&PlantedSpec::default_with_seed(seed), 5, 10)?;
            if batch.valid_count() > 50 {
                return Err(Error::Contract(
                    "brute-force batch exceeds 50 utterances".into(),
                ));
            }
            let model = small_model(&batch, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for l in [
                BottleneckId::unimodal_canonical("audio"),
                BottleneckId::multimodal_canonical(),
            ] {
                let acts = model.activations(&batch, &l)?;
                let f = acts.dims3()?.2;
                let mut cavs: Vec<Cav> = orthonormal_directions(&mut rng, 3, f)
                    .into_iter()
                    .map(|direction| Cav {
                        concept: "random".into(),
                        bottleneck: l.clone(),
                        direction,
                        bias: 0.0,
                        heldout_accuracy: 0.0,
                        seed,
                    })
                    .collect();
                let relaxed = ProbeConfig {
                    min_train_per_class: 2,
                    ..ProbeConfig::default()
                };
                let randoms = random_concepts(&batch.mask, 1, 40, seed)?;
                cavs.push(
                    train_ensemble_on(&acts, &randoms[0], &l, 1, seed, &relaxed)?
                        .members
                        .remove(0),
                );
                for k in 0..CLASS_COUNT {
                    let slots = batch.slots_with_label(k);
                    if slots.is_empty() {
                        continue;
                    }
                    for c in &cavs {
                        let fast = tcav_score(&model, &batch, k, c, &l)?;
                        let (slow, _) =
                            brute_force_score(&model, &acts, &slots, k, &l, &c.direction)?;
                        compared += 1;
                        if fast != slow {
                            failures.push(format!(
                                "seed {i} {l} class {k}: pipeline {fast} brute force {slow}"
                            ));
                        }
                    }
                }
            }
        }
        Ok(if failures.is_empty() {
            (true, format!("{compared} scores identical"))
        } else {
            (
                false,
                format!(
                    "{} of {compared} differ; first: {}",
                    failures.len(),
                    failures[0]
                ),
            )
        })
    })
}

/// p-values against quadrature of the t density, and Monte Carlo power and
/// size of the significance gate.
pub fn statistics_oracle(base_seed: u64, runs: usize) -> CheckResult {
    timed("statistics oracle", || {
        let mut worst: f64 = 0.0;
        for &t in &[0.5, 1.0, 2.0, 3.0] {
            for &df in &[2.0, 5.0, 10.0, 30.0] {
                let p = two_tailed_p(t, df)?;
                worst = worst.max((p - t_two_tailed_quadrature(t, df)).abs());
            }
        }
        let (reps, randoms, n_utt) = (30, 50, 50u64);
        let dist = |rng: &mut ChaCha8Rng, p: f64, name: &str| -> Result<ScoreDistribution> {
            let b = Binomial::new(n_utt, p).map_err(|e| Error::Contract(e.to_string()))?;
            Ok(ScoreDistribution {
                concept: name.into(),
                class_id: 0,
                bottleneck: BottleneckId::multimodal_canonical(),
                scores: (0..reps)
                    .map(|_| b.sample(rng) as f64 / n_utt as f64)
                    .collect(),
            })
        };
        let (mut planted_hits, mut null_hits) = (0usize, 0usize);
        for r in 0..runs as u64 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive(base_seed, &[name_hash("monte-carlo"), r]));
            let random: Vec<ScoreDistribution> = (0..randoms)
                .map(|i| dist(&mut rng, 0.5, &format!("random_{i}")))
                .collect::<Result<_>>()?;
            let planted = dist(&mut rng, 0.95, "planted")?;
            let null = dist(&mut rng, 0.5, "null")?;
            planted_hits += usize::from(significance(&planted, &random, 0.05)?.significant);
            null_hits += usize::from(!significance(&null, &random, 0.05)?.significant);
        }
        let frac = |h: usize| h as f64 / runs as f64;
        let passed = worst <= 1e-6 && frac(planted_hits) >= 0.95 && frac(null_hits) >= 0.95;
        Ok((
            passed,
            format!(
                "max |p − quadrature| {worst:.2e}; planted significant in {planted_hits}/{runs}, null rejected as insignificant in {null_hits}/{runs}"
            ),
        ))
    })
}

/// The report carries the default protocol constants and its contents are
/// consistent with them.
pub fn protocol_fidelity(report: &TcavReport) -> CheckResult {
    timed("protocol fidelity", || {
        let p = &report.protocol;
        let mut problems = Vec::new();
        let mut expect = |ok: bool, what: &str| {
            if !ok {
                problems.push(what.to_string());
            }
        };
        expect(p.repetitions == 30, "repetitions ≠ 30");
        expect(p.random_concepts == 50, "random concepts ≠ 50");
        expect(p.alpha == 0.05, "alpha ≠ 0.05");
        expect(p.required_rejections == 40, "required rejections ≠ 40");
        expect(p.strict_positive, "scoring is not strict");
        expect(
            p.bottlenecks == ["unimodal/contextual_lstm_output", "multimodal/dense_output"],
            "bottlenecks differ from the unimodal contextual LSTM and multimodal dense outputs",
        );
        expect(report.entries.len() == 36, "entry count ≠ 36");
        for e in &report.entries {
            let layer_ok = matches!(
                (&e.bottleneck.level, e.bottleneck.layer),
                (net::Level::Unimodal(_), Layer::ContextualLstmOutput)
                    | (net::Level::Multimodal, Layer::DenseOutput)
            );
            expect(layer_ok, "entry at an unexpected layer");
            expect(e.scores.len() == 30, "entry without 30 scores");
            expect(e.p_values.len() == 50, "entry without 50 p-values");
            let rejects = e.p_values.iter().filter(|&&p| f64::from(p) < 0.05).count();
            expect(
                e.significant == (e.rejections >= 40),
                "verdict inconsistent with rejection count",
            );
            expect(
                rejects == e.rejections || !e.p_values.iter().all(|p| p.is_finite()),
                "rejections inconsistent with p-values",
            );
        }
        expect(
            score_from_derivatives(&[0.0, 0.0, 1.0, -1.0]).ok() == Some(0.25),
            "zero derivatives are counted",
        );
        problems.dedup();
        Ok(if problems.is_empty() {
            (
                true,
                format!(
                    "R={}, {} random concepts, α={}, strict positive, {:?}",
                    p.repetitions, p.random_concepts, p.alpha, p.bottlenecks
                ),
            )
        } else {
            (false, problems.join("; "))
        })
    })
}

/// Two full runs into separate directories; the report bytes must match and
/// each run must finish within `limit_seconds`.
pub fn determinism(
    config: &RunConfig,
    dir_a: &Path,
    dir_b: &Path,
    limit_seconds: f64,
) -> (CheckResult, Option<TcavReport>) {
    let mut report = None;
    let check = timed("end-to-end determinism", || {
        let mut times = Vec::new();
        let mut bytes = Vec::new();
        for dir in [dir_a, dir_b] {
            let mut c = config.clone();
            c.out_dir = dir.to_path_buf();
            let start = Instant::now();
            let r = Pipeline::new(c, true)?.run_all()?;
            times.push(start.elapsed().as_secs_f64());
            let p = dir.join(REPORT_JSON);
            bytes.push(std::fs::read(&p).map_err(|e| Error::io(p, e))?);
            report = Some(r);
        }
        let same = bytes[0] == bytes[1];
        let fast = times.iter().all(|&t| t < limit_seconds);
        Ok((
            same && fast,
            format!(
                "report JSON {} ({} bytes); runs took {:.1}s and {:.1}s (limit {limit_seconds:.0}s)",
                if same { "byte-identical" } else { "differs" },
                bytes[0].len(),
                times[0],
                times[1]
            ),
        ))
    });
    (check, report)
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

/// Feature archive, checkpoint, CAV and report JSON survive save/load with
/// bit-identical payloads.
pub fn format_roundtrips(seed: u64) -> CheckResult {
    timed("format roundtrips", || {
        let mut problems = Vec::new();
        let dir =
            std::env::temp_dir().join(format!("emotcav-roundtrip-{}-{seed}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let batch = generate(&PlantedSpec::default_with_seed(seed), 5, 6)?;
        let path = dir.join("features.mmer");
        synth::export_features(&batch, &path)?;
        let back = synth::import_features(&path)?;
        let same = back
            .modalities
            .iter()
            .zip(&batch.modalities)
            .all(|(a, b)| bits(&a.features) == bits(&b.features))
            && back.mask == batch.mask
            && back.labels == batch.labels
            && back.waveforms == batch.waveforms
            && back.transcripts == batch.transcripts
            && synth::write_features(&back)? == synth::write_features(&batch)?;
        if !same {
            problems.push("feature archive");
        }

        let model = small_model(&batch, seed)?;
        let path = dir.join("model.bclc");
        net::save_checkpoint(&model, &path)?;
        let loaded = net::load_checkpoint(&path)?;
        let same = model
            .named_tensors()
            .iter()
            .zip(loaded.named_tensors())
            .all(|((na, a), (nb, b))| na == &nb && bits(a) == bits(b))
            && net::write_checkpoint(&loaded)?
                == std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if !same {
            problems.push("checkpoint");
        }

        let l = BottleneckId::unimodal_canonical("audio");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members: Vec<Cav> = (0..3)
            .map(|r| Cav {
                concept: "C".into(),
                bottleneck: l.clone(),
                direction: (0..12)
                    .map(|_| rng.random_range(-1.0f32..1.0) / 3.0)
                    .collect(),
                bias: rng.random_range(-1.0f32..1.0),
                heldout_accuracy: rng.random_range(0.0..1.0),
                seed: r,
            })
            .collect();
        let ens = CavEnsemble {
            concept: "C".into(),
            bottleneck: l.clone(),
            members,
        };
        let path = dir.join("cav.json");
        ens.save(&path)?;
        let back = CavEnsemble::load(&path)?;
        let exact = back.members.iter().zip(&ens.members).all(|(a, b)| {
            a.direction
                .iter()
                .map(|x| x.to_bits())
                .eq(b.direction.iter().map(|x| x.to_bits()))
                && a.bias.to_bits() == b.bias.to_bits()
                && a.heldout_accuracy.to_bits() == b.heldout_accuracy.to_bits()
        });
        let single = Cav::from_json(&ens.members[0].to_json()?)? == ens.members[0];
        if back != ens || !exact || !single {
            problems.push("CAV export");
        }

        let dists: Vec<ScoreDistribution> = (0..CLASS_COUNT)
            .map(|k| ScoreDistribution {
                concept: "C".into(),
                class_id: k,
                bottleneck: l.clone(),
                scores: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect();
        let randoms: Vec<ScoreDistribution> = (0..3)
            .map(|i| ScoreDistribution {
                concept: format!("random_{i}"),
                class_id: 0,
                bottleneck: l.clone(),
                scores: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect();
        let verdicts = dists
            .iter()
            .map(|d| significance(d, &randoms, 0.05))
            .collect::<Result<Vec<_>>>()?;
        let requested: Vec<Triple> = (0..CLASS_COUNT)
            .map(|k| Triple {
                concept: "C".into(),
                class_id: k,
                bottleneck: l.clone(),
            })
            .collect();
        let protocol = Protocol {
            repetitions: 4,
            random_concepts: 3,
            random_set_size: 10,
            alpha: 0.05,
            required_rejections: required_rejections(3),
            strict_positive: true,
            bottlenecks: vec![l.to_string()],
        };
        let report = build_report(&requested, &dists, &verdicts, &[ens], protocol, "0123abcd")?;
        let path = dir.join("report.json");
        report.save(&path)?;
        let back = TcavReport::load(&path)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if back != report || back.to_json()?.as_bytes() != bytes.as_slice() {
            problems.push("report JSON");
        }
        let _ = std::fs::remove_dir_all(&dir);
        Ok(if problems.is_empty() {
            (true, "feature archive, checkpoint, CAV export and report JSON are bit-identical after reload".into())
        } else {
            (false, format!("mismatch in {}", problems.join(", ")))
        })
    })
}

/// Checks that need no full pipeline run.
pub fn quick_checks(opts: &ValidateOptions) -> Vec<CheckResult> {
    vec![
        gradient_integrity(opts.seed, opts.gradient_seeds, opts.inject_gradient_fault),
        probe_sanity(opts.seed),
        planted_tcav(opts.seed),
        brute_force_equivalence(opts.seed),
        statistics_oracle(opts.seed, opts.monte_carlo_runs),
        format_roundtrips(opts.seed),
    ]
}

/// Every check, including two default-scale runs under `work_dir`.
pub fn run_all(opts: &ValidateOptions, config: &RunConfig, work_dir: &Path) -> Vec<CheckResult> {
    let mut results = quick_checks(opts);
    let (det, report) = determinism(
        config,
        &work_dir.join("run_a"),
        &work_dir.join("run_b"),
        600.0,
    );
    results.insert(
        5,
        match &report {
            Some(r) => protocol_fidelity(r),
            None => CheckResult {
                name: "protocol fidelity".into(),
                passed: false,
                detail: "no report was produced".into(),
                seconds: 0.0,
            },
        },
    );
    results.insert(6, det);
    results
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::bidirectional_contextual_lstm;

    #[test]
    fn gradient_check_passes_on_one_seed() {
        let r = gradient_integrity(5, 1, false);
        assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn statistics_grid() {
        let r = statistics_oracle(0, 10);
        assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn roundtrips() {
        let r = format_roundtrips(3);
        assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn bidirectional_layer_is_covered_by_activations() {
        // The contextual LSTM output used by the checks is the bidirectional
        // layer's output.
        let b = generate(&PlantedSpec::default_with_seed(1), 2, 3).unwrap();
        let model = small_model(&b, 1).unwrap();
        let br = &model.unimodal[0];
        let direct =
            bidirectional_contextual_lstm(&br.fwd, &br.bwd, &b.modalities[0].features, &b.mask)
                .unwrap();
        let via = model
            .activations(&b, &BottleneckId::unimodal_canonical(&b.modalities[0].name))
            .unwrap();
        assert_eq!(direct, via);
    }
}
