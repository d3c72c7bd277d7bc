//! Conversation batches, the planted synthetic generator and the feature
//! archive format.

mod archive;
mod generate;

pub(crate) use archive::Reader;
pub use archive::{export_features, import_features, read_features, write_features};
pub(crate) use generate::orthonormal_directions;
pub use generate::{generate, ModalityPlan, PlantedSpec};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Emotion labels in dataset order.
pub const CLASS_NAMES: [&str; 6] = ["happy", "sad", "neutral", "angry", "excited", "frustrated"];

pub const CLASS_COUNT: usize = CLASS_NAMES.len();

/// Label stored at padded slots.
pub const PAD_LABEL: u8 = 255;

pub fn class_name(k: usize) -> &'static str {
    CLASS_NAMES.get(k).copied().unwrap_or("unknown")
}

/// Mono 16-bit PCM audio attached to an utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Waveform {
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn to_f32(&self) -> Vec<f32> {
        self.samples
            .iter()
            .map(|&s| f32::from(s) / 32768.0)
            .collect()
    }
}

/// Utterance features for one modality, shaped `n × t × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    pub name: String,
    pub features: Tensor,
}

impl ModalityFeatures {
    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Padded conversations: `n` videos of up to `t` utterances each.
///
/// Slots are addressed row-major, `slot = video * t + utterance`. Valid
/// utterances of a video form a prefix of its row.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversationBatch {
    pub modalities: Vec<ModalityFeatures>,
    pub mask: Vec<bool>,
    pub labels: Vec<u8>,
    pub n_videos: usize,
    pub t_max: usize,
    pub waveforms: Option<Vec<Option<Waveform>>>,
    pub transcripts: Option<Vec<Option<Vec<String>>>>,
}

impl ConversationBatch {
    /// Checks every structural invariant of the batch.
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let slots = self.n_videos * self.t_max;
        if self.mask.len() != slots || self.labels.len() != slots {
            return Err(Error::Format(format!(
                "mask/labels hold {}/{} entries, expected {}",
                self.mask.len(),
                self.labels.len(),
                slots
            )));
        }
        for m in &self.modalities {
            let (n, t, d) = m.features.dims3()?;
            if n != self.n_videos || t != self.t_max {
                return Err(Error::Format(format!(
                    "modality `{}` is {}x{}x{}, expected {}x{}",
                    m.name, n, t, d, self.n_videos, self.t_max
                )));
            }
            for slot in 0..slots {
                if !self.mask[slot] {
                    let row = &m.features.data()[slot * d..(slot + 1) * d];
                    if row.iter().any(|&x| x != 0.0) {
                        return Err(Error::Format(format!(
                            "modality `{}` has non-zero features at padded slot {slot}",
                            m.name
                        )));
                    }
                }
            }
            m.features.validate_finite(&m.name)?;
        }
        let mut seen = BTreeSet::new();
        for m in &self.modalities {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::Format(format!("duplicate modality `{}`", m.name)));
            }
        }
        for v in 0..self.n_videos {
            let row = &self.mask[v * self.t_max..(v + 1) * self.t_max];
            let len = row.iter().take_while(|&&m| m).count();
            if row[len..].iter().any(|&m| m) {
                return Err(Error::Format(format!(
                    "video {v}: valid utterances must precede padding"
                )));
            }
        }
        for (slot, (&m, &l)) in self.mask.iter().zip(&self.labels).enumerate() {
            if m && usize::from(l) >= class_count {
                return Err(Error::Format(format!(
                    "unknown label id {l} at slot {slot} ({class_count} classes)"
                )));
            }
            if !m && l != PAD_LABEL {
                return Err(Error::Format(format!(
                    "padded slot {slot} carries label {l}, expected {PAD_LABEL}"
                )));
            }
        }
        if let Some(w) = &self.waveforms {
            if w.len() != slots {
                return Err(Error::Format("waveform sidecar length mismatch".into()));
            }
        }
        if let Some(t) = &self.transcripts {
            if t.len() != slots {
                return Err(Error::Format("transcript sidecar length mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.n_videos * self.t_max
    }

    pub fn modality(&self, name: &str) -> Result<&ModalityFeatures> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Format(format!("batch has no modality `{name}`")))
    }

    /// Errors naming the first expected modality the batch lacks.
    pub fn require_modalities<S: AsRef<str>>(&self, names: &[S]) -> Result<()> {
        for name in names {
            self.modality(name.as_ref())
                .map_err(|_| Error::Format(format!("missing modality `{}`", name.as_ref())))?;
        }
        Ok(())
    }

    /// Number of valid utterances per video.
    pub fn lengths(&self) -> Vec<usize> {
        (0..self.n_videos)
            .map(|v| {
                self.mask[v * self.t_max..(v + 1) * self.t_max]
                    .iter()
                    .filter(|&&m| m)
                    .count()
            })
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Slot ids of all valid utterances, in row-major order.
    pub fn valid_slots(&self) -> Vec<usize> {
        (0..self.slots()).filter(|&s| self.mask[s]).collect()
    }

    /// Slot ids of valid utterances carrying label `k`.
    pub fn slots_with_label(&self, k: usize) -> Vec<usize> {
        (0..self.slots())
            .filter(|&s| self.mask[s] && usize::from(self.labels[s]) == k)
            .collect()
    }

    /// Features of `videos` at utterance position `step`, as a `b × d` matrix.
    pub fn step_rows(&self, modality: usize, step: usize, videos: &[usize]) -> Tensor {
        let feats = &self.modalities[modality].features;
        let d = feats.shape()[2];
        let mut data = Vec::with_capacity(videos.len() * d);
        for &v in videos {
            let slot = v * self.t_max + step;
            data.extend_from_slice(&feats.data()[slot * d..(slot + 1) * d]);
        }
        Tensor::new(vec![videos.len(), d], data).expect("row gather")
    }

    pub fn step_mask(&self, step: usize, videos: &[usize]) -> Vec<f32> {
        videos
            .iter()
            .map(|&v| {
                if self.mask[v * self.t_max + step] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// New batch holding the given videos in the given order.
    pub fn select_videos(&self, videos: &[usize]) -> Result<ConversationBatch> {
        if let Some(&bad) = videos.iter().find(|&&v| v >= self.n_videos) {
            return Err(Error::Contract(format!("video {bad} out of range")));
        }
        let t = self.t_max;
        let gather_slots = |v: usize| v * t..(v + 1) * t;
        let modalities = self
            .modalities
            .iter()
            .map(|m| {
                let d = m.dim();
                let mut data = Vec::with_capacity(videos.len() * t * d);
                for &v in videos {
                    data.extend_from_slice(&m.features.data()[v * t * d..(v + 1) * t * d]);
                }
                ModalityFeatures {
                    name: m.name.clone(),
                    features: Tensor::new(vec![videos.len(), t, d], data).expect("gather"),
                }
            })
            .collect();
        let pick = |src: &[bool]| {
            videos
                .iter()
                .flat_map(|&v| src[gather_slots(v)].to_vec())
                .collect()
        };
        let labels = videos
            .iter()
            .flat_map(|&v| self.labels[gather_slots(v)].to_vec())
            .collect();
        Ok(ConversationBatch {
            modalities,
            mask: pick(&self.mask),
            labels,
            n_videos: videos.len(),
            t_max: t,
            waveforms: self.waveforms.as_ref().map(|w| {
                videos
                    .iter()
                    .flat_map(|&v| w[gather_slots(v)].to_vec())
                    .collect()
            }),
            transcripts: self.transcripts.as_ref().map(|w| {
                videos
                    .iter()
                    .flat_map(|&v| w[gather_slots(v)].to_vec())
                    .collect()
            }),
        })
    }

    /// Video-level split: a seeded shuffle, the first `train_fraction` of
    /// videos become the training batch.
    pub fn split_videos(
        &self,
        train_fraction: f64,
        seed: u64,
    ) -> Result<(ConversationBatch, ConversationBatch)> {
        if !(0.0..1.0).contains(&train_fraction) || self.n_videos < 2 {
            return Err(Error::Config(format!(
                "cannot split {} videos with train fraction {train_fraction}",
                self.n_videos
            )));
        }
        let mut order: Vec<usize> = (0..self.n_videos).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train =
            ((self.n_videos as f64 * train_fraction).round() as usize).clamp(1, self.n_videos - 1);
        let (train, test) = order.split_at(n_train);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.select_videos(&train)?, self.select_videos(&test)?))
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two videos with lengths {3, 2}, t = 3, one 2-d modality.
    pub fn two_video_batch() -> ConversationBatch {
        let feats = vec![
            1.0, 0.0, 0.0, 1.0, 1.0, 1.0, //
            2.0, 0.0, 0.0, 2.0, 0.0, 0.0,
        ];
        ConversationBatch {
            modalities: vec![ModalityFeatures {
                name: "audio".into(),
                features: Tensor::new(vec![2, 3, 2], feats).unwrap(),
            }],
            mask: vec![true, true, true, true, true, false],
            labels: vec![0, 4, 2, 5, 1, PAD_LABEL],
            n_videos: 2,
            t_max: 3,
            waveforms: None,
            transcripts: None,
        }
    }
}
