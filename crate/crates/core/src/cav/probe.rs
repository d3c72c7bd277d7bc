use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// L2-regularized logistic probe settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub l2: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    /// Minimum training rows per class after the held-out split.
    pub min_train_per_class: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-2,
            steps: 500,
            learning_rate: 0.1,
            holdout_fraction: 0.2,
            min_train_per_class: 10,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.steps == 0 || !(self.l2 >= 0.0) {
            return Err(Error::Config(
                "probe needs learning_rate > 0, steps ≥ 1, l2 ≥ 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// A fitted probe in the original activation space: `direction · x + bias`
/// is positive on the concept side.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub direction: Vec<f32>,
    pub bias: f32,
    pub heldout_accuracy: f64,
}

struct Split {
    train: Vec<usize>,
    hold: Vec<usize>,
}

fn split(m: usize, fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
        seed,
        &[m as u64],
    )));
    let n_hold = if fraction > 0.0 {
        ((m as f64 * fraction).round() as usize).max(1).min(m)
    } else {
        0
    };
    let hold = idx.split_off(m - n_hold);
    Split { train: idx, hold }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fits the probe by full-batch gradient descent from zero.
///
/// Training rows are centred and scaled to unit mean squared norm, which
/// keeps the step size stable for any width and makes the fit invariant to
/// rescaling of the activations. Classes are weighted inversely to their
/// frequency. The positive and negative sides are accumulated separately, so
/// exchanging the two sets negates the result exactly.
pub fn train_probe(pos: &Tensor, neg: &Tensor, seed: u64, cfg: &ProbeConfig) -> Result<Probe> {
    cfg.validate()?;
    let (mp, f) = pos.dims2()?;
    let (mn, fneg) = neg.dims2()?;
    if f != fneg || f == 0 {
        return Err(Error::Dimension(format!(
            "positive activations are {f}-wide, negative {fneg}-wide"
        )));
    }
    pos.validate_finite("positive activations")?;
    neg.validate_finite("negative activations")?;
    if mp == 0 || mn == 0 {
        return Err(Error::Data(format!(
            "probe got {mp} positive and {mn} negative rows"
        )));
    }
    let first = pos.row(0);
    if (0..mp).all(|i| pos.row(i) == first) && (0..mn).all(|i| neg.row(i) == first) {
        return Err(Error::Degenerate(
            "all concept activations are identical".into(),
        ));
    }
    let sp = split(mp, cfg.holdout_fraction, seed);
    let sn = split(mn, cfg.holdout_fraction, seed);
    if sp.train.len() < cfg.min_train_per_class || sn.train.len() < cfg.min_train_per_class {
        return Err(Error::Data(format!(
            "probe needs {} training rows per class, has {} positive and {} negative",
            cfg.min_train_per_class,
            sp.train.len(),
            sn.train.len()
        )));
    }
    let (np, nn) = (sp.train.len(), sn.train.len());
    let n = (np + nn) as f64;

    let sum_rows = |t: &Tensor, rows: &[usize]| {
        let mut acc = vec![0.0f64; f];
        for &i in rows {
            acc.iter_mut()
                .zip(t.row(i))
                .for_each(|(a, &x)| *a += f64::from(x));
        }
        acc
    };
    let (s_pos, s_neg) = (sum_rows(pos, &sp.train), sum_rows(neg, &sn.train));
    let mean: Vec<f64> = s_pos.iter().zip(&s_neg).map(|(a, b)| (a + b) / n).collect();
    let centred = |t: &Tensor, rows: &[usize]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&i| {
                t.row(i)
                    .iter()
                    .zip(&mean)
                    .map(|(&x, m)| f64::from(x) - m)
                    .collect()
            })
            .collect()
    };
    let mut zp = centred(pos, &sp.train);
    let mut zn = centred(neg, &sn.train);
    let sq = |rows: &[Vec<f64>]| {
        rows.iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
    };
    let scale = ((sq(&zp) + sq(&zn)) / n).sqrt();
    if !(scale > 0.0) {
        return Err(Error::Degenerate(
            "training activations have no spread".into(),
        ));
    }
    for r in zp.iter_mut().chain(zn.iter_mut()) {
        r.iter_mut().for_each(|x| *x /= scale);
    }

    let cp = n / (2.0 * np as f64);
    let cn = n / (2.0 * nn as f64);
    let mut w = vec![0.0f64; f];
    let mut b = 0.0f64;
    let mut gp = vec![0.0f64; f];
    let mut gn = vec![0.0f64; f];
    for _ in 0..cfg.steps {
        gp.fill(0.0);
        gn.fill(0.0);
        let mut bp = 0.0;
        let mut bn = 0.0;
        for r in &zp {
            let z = dot(r, &w) + b;
            let res = -cp * sigmoid(-z);
            bp += res;
            r.iter().zip(gp.iter_mut()).for_each(|(x, g)| *g += res * x);
        }
        for r in &zn {
            let z = dot(r, &w) + b;
            let res = cn * sigmoid(z);
            bn += res;
            r.iter().zip(gn.iter_mut()).for_each(|(x, g)| *g += res * x);
        }
        for j in 0..f {
            let g = (gp[j] + gn[j]) / n + cfg.l2 * w[j];
            w[j] -= cfg.learning_rate * g;
        }
        b -= cfg.learning_rate * (bp + bn) / n;
    }

    // Back to the original space: w·(x − μ)/s + b.
    let w_raw: Vec<f64> = w.iter().map(|x| x / scale).collect();
    let b_raw = b - dot(&w_raw, &mean);
    let norm = dot(&w_raw, &w_raw).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate("probe learned no direction".into()));
    }
    let mut dir: Vec<f64> = w_raw.iter().map(|x| x / norm).collect();
    let mut bias = b_raw / norm;
    // Orient towards the positive side on average over the training rows.
    let side =
        |rows: &[Vec<f64>]| rows.iter().map(|r| dot(r, &dir)).sum::<f64>() / rows.len() as f64;
    if side(&zp) < side(&zn) {
        dir.iter_mut().for_each(|x| *x = -*x);
        bias = -bias;
    }
    let direction: Vec<f32> = dir.iter().map(|&x| x as f32).collect();
    let bias = bias as f32;
    // With no held-out split the training rows stand in.
    let (eval_pos, eval_neg) = if sp.hold.len() + sn.hold.len() == 0 {
        (&sp.train, &sn.train)
    } else {
        (&sp.hold, &sn.hold)
    };
    let score = |x: &[f32]| dot32(x, &direction) + f64::from(bias);
    let hits = eval_pos
        .iter()
        .filter(|&&i| score(pos.row(i)) > 0.0)
        .count()
        + eval_neg
            .iter()
            .filter(|&&i| score(neg.row(i)) <= 0.0)
            .count();
    let heldout_accuracy = hits as f64 / (eval_pos.len() + eval_neg.len()) as f64;
    Ok(Probe {
        direction,
        bias,
        heldout_accuracy,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn cluster(rng: &mut ChaCha8Rng, center: &[f32], sigma: f32, m: usize) -> Tensor {
        let nd = Normal::new(0.0f32, sigma).unwrap();
        let rows: Vec<Vec<f32>> = (0..m)
            .map(|_| center.iter().map(|c| c + nd.sample(rng)).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn separable_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = cluster(&mut rng, &[0.3, 0.9], 0.05, 60);
        let b = cluster(&mut rng, &[-0.3, 0.1], 0.05, 60);
        let p = train_probe(&a, &b, 1, &ProbeConfig::default()).unwrap();
        assert_eq!(p.heldout_accuracy, 1.0);
        let d = [0.6f32, 0.8];
        let cos = f64::from(p.direction[0] * d[0] + p.direction[1] * d[1]);
        assert!(cos > 5f64.to_radians().cos(), "cos {cos}");
    }

    #[test]
    fn swapping_sets_negates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = cluster(&mut rng, &[0.1, 0.2, 0.0], 0.5, 40);
        let b = cluster(&mut rng, &[0.0, -0.1, 0.3], 0.5, 40);
        let cfg = ProbeConfig::default();
        let p = train_probe(&a, &b, 9, &cfg).unwrap();
        let q = train_probe(&b, &a, 9, &cfg).unwrap();
        let neg: Vec<f32> = q.direction.iter().map(|x| -x).collect();
        assert_eq!(p.direction, neg);
        assert_eq!(p.bias, -q.bias);
    }

    #[test]
    fn random_labels_near_chance() {
        let mut total = 0.0;
        for s in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
            let a = cluster(&mut rng, &[0.0; 8], 1.0, 50);
            let b = cluster(&mut rng, &[0.0; 8], 1.0, 50);
            total += train_probe(&a, &b, s, &ProbeConfig::default())
                .unwrap()
                .heldout_accuracy;
        }
        let mean = total / 30.0;
        assert!((mean - 0.5).abs() < 0.1, "{mean}");
    }

    #[test]
    fn identical_activations_degenerate() {
        let a = Tensor::full(&[20, 3], 0.4);
        assert!(matches!(
            train_probe(&a, &a, 0, &ProbeConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn too_few_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cluster(&mut rng, &[0.0, 1.0], 0.1, 11);
        let b = cluster(&mut rng, &[1.0, 0.0], 0.1, 40);
        assert!(matches!(
            train_probe(&a, &b, 0, &ProbeConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn scale_invariant_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = cluster(&mut rng, &[0.2, -0.1, 0.5, 0.0], 0.4, 40);
        let b = cluster(&mut rng, &[0.0, 0.1, 0.1, 0.3], 0.4, 40);
        let c: f32 = rng.random_range(2.0..9.0);
        let p = train_probe(&a, &b, 5, &ProbeConfig::default()).unwrap();
        let q = train_probe(
            &a.map(|x| x * c),
            &b.map(|x| x * c),
            5,
            &ProbeConfig::default(),
        )
        .unwrap();
        let cos: f32 = p
            .direction
            .iter()
            .zip(&q.direction)
            .map(|(x, y)| x * y)
            .sum();
        assert!(cos >= 0.999, "{cos}");
    }
}
