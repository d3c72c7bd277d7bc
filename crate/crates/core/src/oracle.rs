//! Reference computations that share no code with the fast paths: f64
//! forward passes differentiated numerically, quadrature of the t density,
//! and a perceptron separability check. Used by the validation suite and
//! the tests.

use crate::error::{Error, Result};
use crate::net::{Activation, BcLstmModel, BottleneckId, Branch, Dense, Layer, Level};
use crate::tensor::Tensor;

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| f64::from(x)).collect()
}

/// Central differences of `f` at `x` for every coordinate.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest disagreement between two gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// A coordinate passes when the absolute error is at most `abs` or the
/// relative error is below `rel`. Returns the worst failing coordinate.
pub fn compare_gradients(
    analytic: &[f64],
    numeric: &[f64],
    rel: f64,
    abs: f64,
) -> Option<Mismatch> {
    let mut worst: Option<Mismatch> = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let rel_error = diff / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
        let ok = diff <= abs || rel_error < rel;
        if (!ok || !diff.is_finite()) && worst.is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(Mismatch {
                index: i,
                analytic: a,
                numeric: n,
                rel_error,
            });
        }
    }
    if analytic.len() != numeric.len() {
        return Some(Mismatch {
            index: analytic.len().min(numeric.len()),
            analytic: f64::NAN,
            numeric: f64::NAN,
            rel_error: f64::INFINITY,
        });
    }
    worst
}

pub fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM cell update with gate blocks (i, f, o, g) along the `4u` axis.
#[allow(clippy::too_many_arguments)]
pub fn lstm_step64(
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
    x: &[f64],
    h: &[f64],
    c: &[f64],
    b: usize,
    d: usize,
    u: usize,
) -> (Vec<f64>, Vec<f64>) {
    let zx = matmul64(x, w_ih, b, d, 4 * u);
    let zh = matmul64(h, w_hh, b, u, 4 * u);
    let mut h_out = vec![0.0; b * u];
    let mut c_out = vec![0.0; b * u];
    for r in 0..b {
        for j in 0..u {
            let z = |gate: usize| {
                zx[r * 4 * u + gate * u + j] + zh[r * 4 * u + gate * u + j] + bias[gate * u + j]
            };
            let (i, f, o, g) = (
                sigmoid64(z(0)),
                sigmoid64(z(1)),
                sigmoid64(z(2)),
                z(3).tanh(),
            );
            let cn = f * c[r * u + j] + i * g;
            c_out[r * u + j] = cn;
            h_out[r * u + j] = o * cn.tanh();
        }
    }
    (h_out, c_out)
}

fn branch_at<'a>(model: &'a BcLstmModel, l: &BottleneckId) -> Result<&'a Branch> {
    match &l.level {
        Level::Unimodal(m) => model
            .modality_index(m)
            .map(|i| &model.unimodal[i])
            .ok_or_else(|| Error::UnknownBottleneck(l.to_string())),
        Level::Multimodal => Ok(&model.fusion),
    }
}

fn affine64(layer: &Dense, x: &[f64]) -> Result<Vec<f64>> {
    let (fi, fo) = layer.weight.dims2()?;
    if x.len() != fi {
        return Err(Error::Dimension(format!(
            "{}-wide row for a {fi}-wide layer",
            x.len()
        )));
    }
    let z = matmul64(x, &to_f64(&layer.weight), 1, fi, fo);
    Ok(z.iter()
        .zip(layer.bias.data())
        .map(|(z, &b)| z + f64::from(b))
        .collect())
}

fn activate64(activation: Activation, z: f64) -> f64 {
    match activation {
        Activation::Tanh => z.tanh(),
        Activation::Linear => z,
    }
}

/// Pre-softmax logits of the layers above `l` applied to one activation row.
pub fn head_logits64(model: &BcLstmModel, l: &BottleneckId, act: &[f64]) -> Result<Vec<f64>> {
    let branch = branch_at(model, l)?;
    let dense_out = match l.layer {
        Layer::ContextualLstmOutput => affine64(&branch.dense, act)?
            .into_iter()
            .map(|z| activate64(branch.dense.activation, z))
            .collect(),
        Layer::DenseOutput => act.to_vec(),
    };
    let z = affine64(&branch.head, &dense_out)?;
    Ok(z.into_iter()
        .map(|z| activate64(branch.head.activation, z))
        .collect())
}

/// Closed-form `∂ logit_k / ∂ act` for one row: the head column, pulled back
/// through the dense layer's Jacobian when `l` sits below it.
pub fn head_gradient64(
    model: &BcLstmModel,
    l: &BottleneckId,
    act: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    let branch = branch_at(model, l)?;
    if branch.head.activation != Activation::Linear {
        return Err(Error::Contract(
            "closed-form head gradient needs a linear head".into(),
        ));
    }
    let (hi, ho) = branch.head.weight.dims2()?;
    if k >= ho {
        return Err(Error::Contract(format!(
            "class {k} out of range for {ho} classes"
        )));
    }
    let column: Vec<f64> = (0..hi)
        .map(|j| f64::from(branch.head.weight.data()[j * ho + k]))
        .collect();
    match l.layer {
        Layer::DenseOutput => {
            if act.len() != hi {
                return Err(Error::Dimension(format!(
                    "{}-wide row for a {hi}-wide head",
                    act.len()
                )));
            }
            Ok(column)
        }
        Layer::ContextualLstmOutput => {
            let z = affine64(&branch.dense, act)?;
            let local: Vec<f64> = z
                .iter()
                .zip(&column)
                .map(|(&z, &c)| match branch.dense.activation {
                    Activation::Tanh => (1.0 - z.tanh().powi(2)) * c,
                    Activation::Linear => c,
                })
                .collect();
            let (fi, fo) = branch.dense.weight.dims2()?;
            let w = branch.dense.weight.data();
            Ok((0..fi)
                .map(|i| (0..fo).map(|j| f64::from(w[i * fo + j]) * local[j]).sum())
                .collect())
        }
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Two-tailed tail mass of Student's t by quadrature of its density.
///
/// With `x = √ν tan θ` the unnormalized density `(1 + x²/ν)^{-(ν+1)/2} dx`
/// becomes `√ν cos^{ν-1} θ dθ`, so the tail ratio is a ratio of two smooth
/// integrals over `[0, π/2]` and needs no normalizing constant.
pub fn t_two_tailed_quadrature(t: f64, df: f64) -> f64 {
    let f = move |theta: f64| theta.cos().max(0.0).powf(df - 1.0);
    let half = std::f64::consts::FRAC_PI_2;
    let theta0 = (t.abs() / df.sqrt()).atan();
    let total = integrate(&f, 0.0, half, 1e-14);
    let tail = integrate(&f, theta0, half, 1e-14);
    (tail / total).clamp(0.0, 1.0)
}

/// Multi-class perceptron; `true` when it reaches zero training errors,
/// which certifies linear separability.
pub fn perceptron_separable(
    rows: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    max_epochs: usize,
) -> bool {
    let Some(d) = rows.first().map(Vec::len) else {
        return true;
    };
    let mut w = vec![vec![0.0f64; d + 1]; classes];
    let score = |w: &[f64], x: &[f64]| w[d] + w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..max_epochs {
        let mut errors = 0;
        for (x, &y) in rows.iter().zip(labels) {
            let pred = (0..classes)
                .max_by(|&a, &b| score(&w[a], x).total_cmp(&score(&w[b], x)))
                .expect("classes ≥ 1");
            if pred != y {
                errors += 1;
                for j in 0..d {
                    w[y][j] += x[j];
                    w[pred][j] -= x[j];
                }
                w[y][d] += 1.0;
                w[pred][d] -= 1.0;
            }
        }
        if errors == 0 {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_on_closed_forms() {
        // df = 1 is Cauchy: p = 1 − 2/π · atan|t|; df = 2: p = 1 − |t|/√(2 + t²).
        for &t in &[0.5, 1.0, 2.0, 3.0] {
            let cauchy = 1.0 - 2.0 / std::f64::consts::PI * f64::atan(t);
            assert!((t_two_tailed_quadrature(t, 1.0) - cauchy).abs() < 1e-10);
            let two = 1.0 - t / (2.0 + t * t).sqrt();
            assert!((t_two_tailed_quadrature(t, 2.0) - two).abs() < 1e-10);
        }
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!(compare_gradients(&g, &[4.0, 3.0], 1e-8, 1e-9).is_none());
    }

    #[test]
    fn closed_form_head_gradient_matches_differences() {
        use crate::net::ModelConfig;
        use crate::synth::{generate, PlantedSpec};
        let b = generate(&PlantedSpec::default_with_seed(3), 2, 3).unwrap();
        let mut cfg = ModelConfig::for_batch(&b);
        cfg.unimodal_hidden = 5;
        cfg.unimodal_dense = 4;
        cfg.fusion_hidden = 3;
        cfg.fusion_dense = 4;
        let model = BcLstmModel::new(cfg, 8).unwrap();
        for l in model.bottlenecks() {
            let w = model.bottleneck_width(&l).unwrap();
            let act: Vec<f64> = (0..w).map(|i| (i as f64 * 0.37).sin()).collect();
            let exact = head_gradient64(&model, &l, &act, 2).unwrap();
            let fd = numeric_gradient(|x| head_logits64(&model, &l, x).unwrap()[2], &act, 1e-6);
            assert!(compare_gradients(&exact, &fd, 1e-6, 1e-9).is_none(), "{l}");
        }
    }

    #[test]
    fn perceptron_detects_xor() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ];
        assert!(!perceptron_separable(&rows, &[0, 0, 1, 1], 2, 200));
        assert!(perceptron_separable(&rows, &[0, 1, 1, 1], 2, 200));
    }
}
