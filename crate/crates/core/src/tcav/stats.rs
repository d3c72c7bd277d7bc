use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-tailed.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn two_tailed_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::Contract(format!(
            "degrees of freedom must be positive, got {df}"
        )));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let x = df / (df + t * t);
    Ok(beta_reg(0.5 * df, 0.5, x).clamp(0.0, 1.0))
}

/// Unequal-variance two-sample t-test.
///
/// Two constant samples give `p = 1` when their values agree and `p = 0`
/// otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract(format!(
            "t-test needs at least 2 scores per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test sample".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        return Ok(if ma == mb {
            WelchTest { t: 0.0, df, p: 1.0 }
        } else {
            WelchTest {
                t: f64::INFINITY.copysign(ma - mb),
                df,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchTest {
        t,
        df,
        p: two_tailed_p(t, df)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let a = [0.2, 0.4, 0.5, 0.9];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn swap_negates_t() {
        let a = [0.2, 0.4, 0.5, 0.9, 0.3];
        let b = [0.6, 0.7, 0.65, 0.8];
        let x = welch_t_test(&a, &b).unwrap();
        let y = welch_t_test(&b, &a).unwrap();
        assert_eq!(x.t, -y.t);
        assert_eq!(x.p, y.p);
        assert_eq!(x.df, y.df);
    }

    #[test]
    fn known_value() {
        // t = 2, df = 10 from tables: 0.07338803...
        assert!((two_tailed_p(2.0, 10.0).unwrap() - 0.073_388_03).abs() < 1e-6);
    }

    #[test]
    fn zero_variance_cases() {
        let r = welch_t_test(&[0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(r.p, 1.0);
        let r = welch_t_test(&[0.5, 0.5], &[0.7, 0.7]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.t < 0.0);
    }

    #[test]
    fn too_small() {
        assert!(matches!(
            welch_t_test(&[0.5], &[0.1, 0.2]),
            Err(Error::Contract(_))
        ));
    }
}
