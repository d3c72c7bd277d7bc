use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::stack_steps;
use super::model::{accuracy_of, argmax_valid, run_branch, BranchVars};
use super::{BcLstmModel, BottleneckId, Layer};
use crate::error::{Error, Result};
use crate::synth::ConversationBatch;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Videos per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::Config(
                "Adam needs β1, β2 in [0, 1) and ε > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKey {
    Unimodal(usize),
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub branch: String,
    /// 1-based.
    pub epoch: usize,
    /// Mean cross-entropy over valid training utterances.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn losses(&self, branch: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.branch == branch)
            .map(|r| r.loss)
            .collect()
    }

    pub fn last(&self, branch: &str) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.branch == branch)
    }
}

/// First and second moment estimates for a list of parameters.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam step, in place.
pub fn adam_update(
    state: &mut AdamState,
    cfg: &TrainConfig,
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} params but {} grads",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Dimension(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = f64::from(gj);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let step = cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.epsilon);
            *x = (f64::from(*x) - step) as f32;
        }
    }
    Ok(())
}

/// Trains every unimodal branch, freezes it, then trains the fusion branch.
pub fn train(
    model: &mut BcLstmModel,
    data: &ConversationBatch,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    let mut log = TrainingLog::default();
    for i in 0..model.unimodal.len() {
        if !model.unimodal[i].frozen {
            log.records
                .extend(train_branch(model, data, cfg, BranchKey::Unimodal(i))?);
            model.unimodal[i].frozen = true;
        }
    }
    log.records
        .extend(train_branch(model, data, cfg, BranchKey::Fusion)?);
    model.fusion.frozen = true;
    Ok(log)
}

fn branch_name(model: &BcLstmModel, key: BranchKey) -> String {
    match key {
        BranchKey::Unimodal(i) => model.config.modalities[i].name.clone(),
        BranchKey::Fusion => "fusion".into(),
    }
}

/// Trains one branch for `cfg.epochs`. Unimodal branches are independent;
/// the fusion branch requires every unimodal branch to be frozen and feeds on
/// their dense outputs as constants.
pub fn train_branch(
    model: &mut BcLstmModel,
    data: &ConversationBatch,
    cfg: &TrainConfig,
    key: BranchKey,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let name = branch_name(model, key);
    let inputs = model.batch_inputs(data)?;
    let (frozen, salt) = match key {
        BranchKey::Unimodal(i) => (model.unimodal[i].frozen, i as u64 + 1),
        BranchKey::Fusion => {
            if let Some(i) = model.unimodal.iter().position(|b| !b.frozen) {
                return Err(Error::Contract(format!(
                    "fusion training needs frozen unimodal branches; `{}` is not",
                    model.config.modalities[i].name
                )));
            }
            (model.fusion.frozen, 0)
        }
    };
    if frozen {
        return Err(Error::Contract(format!("branch `{name}` is frozen")));
    }
    // Fusion inputs: concatenated unimodal dense features, one tensor per step.
    let fused_inputs = match key {
        BranchKey::Fusion => {
            let ids: Vec<BottleneckId> = model
                .config
                .modalities
                .iter()
                .map(|m| BottleneckId::unimodal(&m.name, Layer::DenseOutput))
                .collect();
            let out = model.forward(data, &ids)?;
            Some(
                ids.iter()
                    .map(|l| out.captured[l].clone())
                    .collect::<Vec<_>>(),
            )
        }
        BranchKey::Unimodal(_) => None,
    };
    let gather = |t: &Tensor, step: usize, videos: &[usize]| -> Tensor {
        let f = t.shape()[2];
        let mut rows = Vec::with_capacity(videos.len() * f);
        for &v in videos {
            let slot = v * data.t_max + step;
            rows.extend_from_slice(&t.data()[slot * f..(slot + 1) * f]);
        }
        Tensor::new(vec![videos.len(), f], rows).expect("row gather")
    };

    let dropout = model.config.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..data.n_videos).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let t = data.t_max;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut preds = Vec::new();
        let mut valid = 0usize;
        for videos in order.chunks(cfg.batch_size) {
            let masks: Vec<Vec<f32>> = (0..t).map(|s| data.step_mask(s, videos)).collect();
            let count: f32 = masks.iter().flatten().sum();
            if count == 0.0 {
                continue;
            }
            let branch = match key {
                BranchKey::Unimodal(i) => &model.unimodal[i],
                BranchKey::Fusion => &model.fusion,
            };
            let mut g = Graph::new();
            let vars = BranchVars::insert(&mut g, branch, true);
            let xs: Vec<Var> = (0..t)
                .map(|s| {
                    let x = match (&fused_inputs, key) {
                        (Some(feats), _) => {
                            let parts: Vec<Tensor> =
                                feats.iter().map(|f| gather(f, s, videos)).collect();
                            concat_rows_wise(&parts)
                        }
                        (None, BranchKey::Unimodal(i)) => data.step_rows(inputs[i], s, videos),
                        (None, BranchKey::Fusion) => unreachable!("fusion inputs precomputed"),
                    };
                    g.constant(x)
                })
                .collect();
            let drop = (dropout > 0.0).then_some((dropout, &mut rng));
            let out = run_branch(&mut g, branch, &vars, &xs, &masks, drop)?;
            let mut total: Option<Var> = None;
            for (s, &z) in out.logits.iter().enumerate() {
                let targets: Vec<usize> = videos
                    .iter()
                    .map(|&v| usize::from(data.labels[v * t + s]).min(model.config.class_count))
                    .collect();
                let w: Vec<f32> = masks[s].iter().map(|&m| m / count).collect();
                let ce = g.softmax_cross_entropy(z, &targets, &w)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, ce)?,
                    None => ce,
                });
            }
            let total = total.expect("t_max ≥ 1");
            let loss = f64::from(g.value(total).data()[0]);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    branch: name,
                    epoch,
                });
            }
            loss_sum += loss * f64::from(count);
            valid += count as usize;
            let logits = stack_steps(&g, &out.logits, videos.len());
            let sub_mask: Vec<bool> = videos
                .iter()
                .flat_map(|&v| data.mask[v * t..(v + 1) * t].to_vec())
                .collect();
            for (local, p) in argmax_valid(&logits, &sub_mask) {
                let global = videos[local / t] * t + local % t;
                preds.push((global, p));
            }
            let grads = g.backward(total)?;
            let grads: Vec<&Tensor> = vars
                .all
                .iter()
                .map(|&v| grads.get(v))
                .collect::<Result<_>>()?;
            let branch = match key {
                BranchKey::Unimodal(i) => &mut model.unimodal[i],
                BranchKey::Fusion => &mut model.fusion,
            };
            let mut params = branch.tensors_mut();
            adam_update(&mut adam, cfg, &mut params, &grads)?;
            if params
                .iter()
                .any(|p| p.data().iter().any(|x| !x.is_finite()))
            {
                return Err(Error::Divergence {
                    branch: name,
                    epoch,
                });
            }
        }
        records.push(EpochRecord {
            branch: name.clone(),
            epoch,
            loss: loss_sum / valid.max(1) as f64,
            accuracy: accuracy_of(&preds, &data.labels),
        });
    }
    Ok(records)
}

/// Column-wise concatenation of equally tall matrices.
fn concat_rows_wise(parts: &[Tensor]) -> Tensor {
    let m = parts[0].shape()[0];
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![m, total], data).expect("concat")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::synth::{generate, PlantedSpec};

    #[test]
    fn adam_first_step_is_lr_sign() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::from_vec(vec![0.5, -2.0]);
        let g = Tensor::from_vec(vec![1.0, -3.0]);
        let mut st = AdamState::default();
        adam_update(&mut st, &cfg, &mut [&mut p], &[&g]).unwrap();
        assert!((f64::from(p.data()[0]) - (0.5 - 1e-4)).abs() < 1e-7);
        assert!((f64::from(p.data()[1]) - (-2.0 + 1e-4)).abs() < 1e-7);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    fn tiny() -> (BcLstmModel, ConversationBatch) {
        let b = generate(&PlantedSpec::default_with_seed(3), 6, 4).unwrap();
        let mut c = ModelConfig::for_batch(&b);
        c.unimodal_hidden = 4;
        c.unimodal_dense = 4;
        c.fusion_hidden = 4;
        c.fusion_dense = 4;
        (BcLstmModel::new(c, 7).unwrap(), b)
    }

    #[test]
    fn fusion_requires_frozen_unimodal() {
        let (mut m, b) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_branch(&mut m, &b, &cfg, BranchKey::Fusion),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn freezing_and_determinism() {
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (mut a, b) = tiny();
        let (mut c, _) = tiny();
        for i in 0..a.unimodal.len() {
            train_branch(&mut a, &b, &cfg, BranchKey::Unimodal(i)).unwrap();
            a.unimodal[i].frozen = true;
        }
        let snapshot = a.unimodal.clone();
        train_branch(&mut a, &b, &cfg, BranchKey::Fusion).unwrap();
        assert_eq!(a.unimodal, snapshot);
        let log = train(&mut c, &b, &cfg).unwrap();
        assert_eq!(a.fusion.tensors(), c.fusion.tensors());
        assert_eq!(log.records.len(), 4 * 3);
        assert!(log.records.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn divergence_names_epoch() {
        let (mut m, b) = tiny();
        m.unimodal[0].head.bias.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        match train_branch(&mut m, &b, &cfg, BranchKey::Unimodal(0)) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("{other:?}"),
        }
    }
}
