//! Directional derivatives, TCAV scores and the random-concept significance
//! gate.

mod report;
mod stats;

pub use report::{build_report, render_svg, report_csv, Protocol, ReportEntry, TcavReport, Triple};
pub use stats::{two_tailed_p, welch_t_test, WelchTest};

use serde::{Deserialize, Serialize};

use crate::cav::{gather_rows, Cav, CavEnsemble};
use crate::error::{Error, Result};
use crate::net::{BcLstmModel, BottleneckId};
use crate::synth::ConversationBatch;
use crate::tensor::Tensor;

/// Fraction of random distributions that must differ, rounded up.
pub const REJECTION_FRACTION: (usize, usize) = (4, 5);

/// `grad · v`, accumulated in f64.
pub fn directional_derivative(grad: &[f32], cav: &Cav) -> Result<f64> {
    if grad.len() != cav.direction.len() {
        return Err(Error::Dimension(format!(
            "gradient of length {} against a {}-d CAV",
            grad.len(),
            cav.direction.len()
        )));
    }
    Ok(grad
        .iter()
        .zip(&cav.direction)
        .map(|(&g, &v)| f64::from(g) * f64::from(v))
        .sum())
}

/// Fraction of strictly positive derivatives.
pub fn score_from_derivatives(derivatives: &[f64]) -> Result<f64> {
    if derivatives.is_empty() {
        return Err(Error::UndefinedScore("no utterances of the class".into()));
    }
    let positive = derivatives.iter().filter(|&&s| s > 0.0).count();
    Ok(positive as f64 / derivatives.len() as f64)
}

/// Score from per-utterance gradient rows (`m × f`).
pub fn score_from_gradients(grads: &Tensor, cav: &Cav) -> Result<f64> {
    let (m, _) = grads.dims2()?;
    let ds = (0..m)
        .map(|i| directional_derivative(grads.row(i), cav))
        .collect::<Result<Vec<_>>>()?;
    score_from_derivatives(&ds)
}

/// `∂ logit_k / ∂ a_l` at every valid utterance labelled `k`, as rows in
/// slot order.
pub fn class_gradients(
    model: &BcLstmModel,
    batch: &ConversationBatch,
    k: usize,
    l: &BottleneckId,
) -> Result<Tensor> {
    let acts = model.activations(batch, l)?;
    class_gradients_at(model, batch, &acts, k, l)
}

pub fn class_gradients_at(
    model: &BcLstmModel,
    batch: &ConversationBatch,
    acts: &Tensor,
    k: usize,
    l: &BottleneckId,
) -> Result<Tensor> {
    let slots = batch.slots_with_label(k);
    let g = model.logit_gradient_at(acts, &batch.mask, k, l)?;
    gather_rows(&g, &slots)
}

pub fn tcav_score(
    model: &BcLstmModel,
    batch: &ConversationBatch,
    k: usize,
    cav: &Cav,
    l: &BottleneckId,
) -> Result<f64> {
    check_bottleneck(cav, l)?;
    score_from_gradients(&class_gradients(model, batch, k, l)?, cav)
}

fn check_bottleneck(cav: &Cav, l: &BottleneckId) -> Result<()> {
    if &cav.bottleneck != l {
        return Err(Error::Contract(format!(
            "CAV for {} used at bottleneck {l}",
            cav.bottleneck
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub concept: String,
    pub class_id: usize,
    pub bottleneck: BottleneckId,
    /// One per ensemble member.
    pub scores: Vec<f64>,
}

impl ScoreDistribution {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    /// Sample standard deviation (0 for fewer than two scores).
    pub fn std(&self) -> f64 {
        let n = self.scores.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Scores every member against gradients computed once for class `k`.
pub fn score_distribution_from(
    class_grads: &Tensor,
    k: usize,
    ensemble: &CavEnsemble,
) -> Result<ScoreDistribution> {
    if ensemble.members.is_empty() {
        return Err(Error::Contract(format!(
            "ensemble for `{}` is empty",
            ensemble.concept
        )));
    }
    let scores = ensemble
        .members
        .iter()
        .map(|c| {
            check_bottleneck(c, &ensemble.bottleneck)?;
            score_from_gradients(class_grads, c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreDistribution {
        concept: ensemble.concept.clone(),
        class_id: k,
        bottleneck: ensemble.bottleneck.clone(),
        scores,
    })
}

pub fn score_distribution(
    model: &BcLstmModel,
    batch: &ConversationBatch,
    k: usize,
    ensemble: &CavEnsemble,
    l: &BottleneckId,
) -> Result<ScoreDistribution> {
    if &ensemble.bottleneck != l {
        return Err(Error::Contract(format!(
            "ensemble for {} used at bottleneck {l}",
            ensemble.bottleneck
        )));
    }
    score_distribution_from(&class_gradients(model, batch, k, l)?, k, ensemble)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceVerdict {
    pub concept: String,
    pub class_id: usize,
    pub bottleneck: BottleneckId,
    pub alpha: f64,
    /// One per random distribution.
    pub p_values: Vec<f64>,
    pub rejections: usize,
    pub required: usize,
    pub significant: bool,
    pub proposed_mean: f64,
    pub random_means: Vec<f64>,
}

/// `ceil(0.8 · n)`.
pub fn required_rejections(n: usize) -> usize {
    let (num, den) = REJECTION_FRACTION;
    (num * n).div_ceil(den)
}

/// Welch test of `proposed` against each random distribution; significant
/// when at least [`required_rejections`] reject at `alpha`.
pub fn significance(
    proposed: &ScoreDistribution,
    randoms: &[ScoreDistribution],
    alpha: f64,
) -> Result<SignificanceVerdict> {
    if randoms.is_empty() {
        return Err(Error::Contract(
            "significance needs at least one random distribution".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha {alpha} outside (0, 1)")));
    }
    let p_values = randoms
        .iter()
        .map(|r| welch_t_test(&proposed.scores, &r.scores).map(|w| w.p))
        .collect::<Result<Vec<_>>>()?;
    let rejections = p_values.iter().filter(|&&p| p < alpha).count();
    let required = required_rejections(randoms.len());
    Ok(SignificanceVerdict {
        concept: proposed.concept.clone(),
        class_id: proposed.class_id,
        bottleneck: proposed.bottleneck.clone(),
        alpha,
        p_values,
        rejections,
        required,
        significant: rejections >= required,
        proposed_mean: proposed.mean(),
        random_means: randoms.iter().map(ScoreDistribution::mean).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cav(direction: Vec<f32>) -> Cav {
        Cav {
            concept: "C".into(),
            bottleneck: BottleneckId::multimodal_canonical(),
            direction,
            bias: 0.0,
            heldout_accuracy: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn hand_dot_product() {
        let c = cav(vec![0.6, 0.8]);
        let d = directional_derivative(&[1.0, -2.0], &c).unwrap();
        assert!((d + 1.0).abs() < 1e-7);
        assert!(directional_derivative(&[0.8, -0.6], &c).unwrap().abs() < 1e-7);
        assert!(matches!(
            directional_derivative(&[1.0], &c),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn counting() {
        assert_eq!(
            score_from_derivatives(&[0.2, -0.1, 0.3, 0.5]).unwrap(),
            0.75
        );
        assert_eq!(score_from_derivatives(&[0.0; 5]).unwrap(), 0.0);
        assert!(matches!(
            score_from_derivatives(&[]),
            Err(Error::UndefinedScore(_))
        ));
    }

    fn dist(scores: Vec<f64>) -> ScoreDistribution {
        ScoreDistribution {
            concept: "C".into(),
            class_id: 0,
            bottleneck: BottleneckId::multimodal_canonical(),
            scores,
        }
    }

    #[test]
    fn gate_threshold() {
        assert_eq!(required_rejections(50), 40);
        assert_eq!(required_rejections(1), 1);
        assert_eq!(required_rejections(5), 4);
        let proposed = dist(vec![0.9, 0.91, 0.92, 0.93]);
        let far = dist(vec![0.1, 0.12, 0.11, 0.13]);
        let same = dist(vec![0.9, 0.91, 0.92, 0.93]);
        let mut randoms = vec![far.clone(); 39];
        randoms.extend(vec![same.clone(); 11]);
        let v = significance(&proposed, &randoms, 0.05).unwrap();
        assert_eq!(v.rejections, 39);
        assert!(!v.significant);
        let v = significance(&proposed, &vec![far; 50], 0.05).unwrap();
        assert_eq!(v.rejections, 50);
        assert!(v.significant);
        assert!(matches!(
            significance(&proposed, &[], 0.05),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ensemble_of_one_matches_single_score() {
        let grads = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.2, 0.2]]).unwrap();
        let c = cav(vec![0.6, 0.8]);
        let ens = CavEnsemble {
            concept: "C".into(),
            bottleneck: c.bottleneck.clone(),
            members: vec![c.clone(), c.clone()],
        };
        let d = score_distribution_from(&grads, 0, &ens).unwrap();
        let single = score_from_gradients(&grads, &c).unwrap();
        assert_eq!(d.scores, vec![single, single]);
    }
}
