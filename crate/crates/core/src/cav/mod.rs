//! Concept activation vectors: utterance-level reshaping of bottleneck
//! activations, linear concept probes, repeated ensembles and random
//! baselines.

mod probe;

pub use probe::{train_probe, Probe, ProbeConfig};

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptRule, ConceptSet};
use crate::error::{Error, Result};
use crate::net::{BcLstmModel, BottleneckId};
use crate::seed;
use crate::synth::ConversationBatch;
use crate::tensor::Tensor;

/// Utterances required before random bipartitions are drawn.
pub const MIN_RANDOM_UTTERANCES: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub concept: String,
    pub bottleneck: BottleneckId,
    /// Unit normal of the probe, pointing towards the concept.
    pub direction: Vec<f32>,
    pub bias: f32,
    #[serde(rename = "accuracy")]
    pub heldout_accuracy: f64,
    pub seed: u64,
}

impl Cav {
    pub fn norm(&self) -> f64 {
        self.direction
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavEnsemble {
    pub concept: String,
    pub bottleneck: BottleneckId,
    pub members: Vec<Cav>,
}

impl CavEnsemble {
    pub fn repetitions(&self) -> usize {
        self.members.len()
    }

    pub fn accuracy_mean(&self) -> f64 {
        if self.members.is_empty() {
            return f64::NAN;
        }
        self.members.iter().map(|c| c.heldout_accuracy).sum::<f64>() / self.members.len() as f64
    }

    /// Sample standard deviation of member accuracies.
    pub fn accuracy_std(&self) -> f64 {
        let n = self.members.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.accuracy_mean();
        let ss: f64 = self
            .members
            .iter()
            .map(|c| (c.heldout_accuracy - mean).powi(2))
            .sum();
        (ss / (n - 1) as f64).sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Drops padded rows: `n × t × f` becomes `m × f` in slot order.
pub fn video_to_utterance(acts: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let (n, t, f) = acts.dims3()?;
    if mask.len() != n * t {
        return Err(Error::Dimension(format!(
            "mask of {} entries for activations {:?}",
            mask.len(),
            acts.shape()
        )));
    }
    let mut data = Vec::with_capacity(mask.iter().filter(|&&m| m).count() * f);
    for (slot, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        data.extend_from_slice(&acts.data()[slot * f..(slot + 1) * f]);
    }
    let m = data.len() / f.max(1);
    Tensor::new(vec![m, f], data)
}

/// Inverse of [`video_to_utterance`]; padded slots are zero.
pub fn utterance_to_video(rows: &Tensor, mask: &[bool], n: usize, t: usize) -> Result<Tensor> {
    let (m, f) = rows.dims2()?;
    if mask.len() != n * t || mask.iter().filter(|&&v| v).count() != m {
        return Err(Error::Dimension(format!(
            "{m} rows do not match a mask with {} valid of {} slots",
            mask.iter().filter(|&&v| v).count(),
            mask.len()
        )));
    }
    let mut data = vec![0.0f32; n * t * f];
    for (r, (slot, _)) in mask.iter().enumerate().filter(|(_, &v)| v).enumerate() {
        data[slot * f..(slot + 1) * f].copy_from_slice(rows.row(r));
    }
    Tensor::new(vec![n, t, f], data)
}

/// Activation rows of the given slots of an `n × t × f` tensor.
pub fn gather_rows(acts: &Tensor, slots: &[usize]) -> Result<Tensor> {
    let (n, t, f) = acts.dims3()?;
    let mut data = Vec::with_capacity(slots.len() * f);
    for &s in slots {
        if s >= n * t {
            return Err(Error::Contract(format!(
                "slot {s} outside {n}x{t} activations"
            )));
        }
        data.extend_from_slice(&acts.data()[s * f..(s + 1) * f]);
    }
    Tensor::new(vec![slots.len(), f], data)
}

pub fn train_cav(
    concept: &str,
    bottleneck: &BottleneckId,
    pos: &Tensor,
    neg: &Tensor,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<Cav> {
    let p = train_probe(pos, neg, seed, cfg)?;
    Ok(Cav {
        concept: concept.to_string(),
        bottleneck: bottleneck.clone(),
        direction: p.direction,
        bias: p.bias,
        heldout_accuracy: p.heldout_accuracy,
        seed,
    })
}

/// Seed of repetition `r` of `concept` at `bottleneck`.
pub fn member_seed(base: u64, concept: &str, bottleneck: &BottleneckId, r: usize) -> u64 {
    seed::derive(
        base,
        &[
            seed::name_hash(concept),
            seed::name_hash(&bottleneck.to_string()),
            r as u64,
        ],
    )
}

/// Runs `f` on a pool of `jobs` threads; results keep their input order.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// `repetitions` probes on the concept's activations at `l`, differing in
/// the held-out split. `acts` is `n × t × f` for the batch the concept was
/// labelled on.
pub fn train_ensemble_on(
    acts: &Tensor,
    concept: &ConceptSet,
    l: &BottleneckId,
    repetitions: usize,
    base_seed: u64,
    cfg: &ProbeConfig,
) -> Result<CavEnsemble> {
    concept.ensure_trainable()?;
    let pos = gather_rows(acts, &concept.positive_ids)?;
    let neg = gather_rows(acts, &concept.negative_ids)?;
    let members = (0..repetitions)
        .into_par_iter()
        .map(|r| {
            let s = member_seed(base_seed, &concept.name, l, r);
            train_cav(&concept.name, l, &pos, &neg, s, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CavEnsemble {
        concept: concept.name.clone(),
        bottleneck: l.clone(),
        members,
    })
}

pub fn train_ensemble(
    model: &BcLstmModel,
    batch: &ConversationBatch,
    concept: &ConceptSet,
    l: &BottleneckId,
    repetitions: usize,
    base_seed: u64,
    cfg: &ProbeConfig,
) -> Result<CavEnsemble> {
    let acts = model.activations(batch, l)?;
    train_ensemble_on(&acts, concept, l, repetitions, base_seed, cfg)
}

/// `count` random concepts over the valid slots of `mask`. Each draws
/// `set_size` utterances (all of them if fewer) and splits them in half at
/// random.
pub fn random_concepts(
    mask: &[bool],
    count: usize,
    set_size: usize,
    base_seed: u64,
) -> Result<Vec<ConceptSet>> {
    let valid: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(s, _)| s)
        .collect();
    if valid.len() < MIN_RANDOM_UTTERANCES {
        return Err(Error::Data(format!(
            "random concepts need at least {MIN_RANDOM_UTTERANCES} utterances, batch has {}",
            valid.len()
        )));
    }
    let size = set_size.min(valid.len());
    if size < 2 {
        return Err(Error::Config(format!(
            "random set size {set_size} is too small"
        )));
    }
    Ok((0..count)
        .map(|i| {
            let s = seed::derive(base_seed, &[seed::name_hash("random"), i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut chosen: Vec<usize> = index::sample(&mut rng, valid.len(), size)
                .into_iter()
                .map(|j| valid[j])
                .collect();
            chosen.shuffle(&mut rng);
            let mut negative_ids = chosen.split_off(size / 2);
            let mut positive_ids = chosen;
            positive_ids.sort_unstable();
            negative_ids.sort_unstable();
            ConceptSet {
                name: random_name(i),
                rule: ConceptRule::RandomBipartition { draw: i, seed: s },
                positive_ids,
                negative_ids,
            }
        })
        .collect())
}

pub fn random_name(i: usize) -> String {
    format!("random_{i:03}")
}

/// One ensemble of `repetitions` probes per random concept, all at `l`.
pub fn random_cavs_on(
    acts: &Tensor,
    randoms: &[ConceptSet],
    l: &BottleneckId,
    repetitions: usize,
    base_seed: u64,
    cfg: &ProbeConfig,
) -> Result<Vec<CavEnsemble>> {
    randoms
        .iter()
        .map(|c| train_ensemble_on(acts, c, l, repetitions, base_seed, cfg))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn random_cavs(
    model: &BcLstmModel,
    batch: &ConversationBatch,
    l: &BottleneckId,
    count: usize,
    set_size: usize,
    repetitions: usize,
    base_seed: u64,
    cfg: &ProbeConfig,
) -> Result<Vec<CavEnsemble>> {
    let randoms = random_concepts(&batch.mask, count, set_size, base_seed)?;
    let acts = model.activations(batch, l)?;
    random_cavs_on(&acts, &randoms, l, repetitions, base_seed, cfg)
}
