use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ConversationBatch, ModalityFeatures, Waveform, CLASS_COUNT, PAD_LABEL};
use crate::concepts::Lexicon;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ground-truth class directions for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityPlan {
    pub name: String,
    /// One direction of length `dim` per class.
    pub class_directions: Vec<Vec<f32>>,
}

impl ModalityPlan {
    pub fn dim(&self) -> usize {
        self.class_directions.first().map_or(0, Vec::len)
    }
}

/// Parameters of the planted generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub modalities: Vec<ModalityPlan>,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f32,
    pub pitch_means_hz: Vec<f64>,
    pub pitch_jitter_hz: f64,
    /// Expected transcript polarity per class, in [-1, 1].
    pub polarity_means: Vec<f64>,
    pub sample_rate_hz: u32,
    pub tone_seconds: f64,
    /// Shortest conversation as a fraction of `t_max`.
    pub min_length_fraction: f64,
    pub seed: u64,
}

const FILLER: &[&str] = &[
    "the", "i", "you", "it", "was", "we", "and", "that", "so", "then",
];

impl PlantedSpec {
    /// Three 20-d modalities with orthonormal class directions.
    pub fn default_with_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d12e);
        let modalities = ["audio", "video", "text"]
            .iter()
            .map(|name| ModalityPlan {
                name: name.to_string(),
                class_directions: orthonormal_directions(&mut rng, CLASS_COUNT, 20),
            })
            .collect();
        PlantedSpec {
            modalities,
            noise: 0.3,
            // happy, sad, neutral, angry, excited, frustrated
            pitch_means_hz: vec![240.0, 160.0, 180.0, 320.0, 290.0, 270.0],
            pitch_jitter_hz: 20.0,
            polarity_means: vec![0.6, -0.5, 0.2, -0.6, 0.7, -0.4],
            sample_rate_hz: 16_000,
            tone_seconds: 0.1,
            min_length_fraction: 0.75,
            seed,
        }
    }

    pub fn class_count(&self) -> usize {
        self.pitch_means_hz.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_count();
        if k == 0 || self.polarity_means.len() != k {
            return Err(Error::Validation(
                "pitch and polarity profiles must cover every class".into(),
            ));
        }
        if self.modalities.is_empty() {
            return Err(Error::Validation("spec has no modalities".into()));
        }
        for m in &self.modalities {
            if m.class_directions.len() != k {
                return Err(Error::Validation(format!(
                    "modality `{}` has {} directions for {k} classes",
                    m.name,
                    m.class_directions.len()
                )));
            }
            let d = m.dim();
            if d == 0 || m.class_directions.iter().any(|v| v.len() != d) {
                return Err(Error::Validation(format!(
                    "modality `{}` directions have inconsistent length",
                    m.name
                )));
            }
            for a in 0..k {
                for b in a + 1..k {
                    let (u, v) = (&m.class_directions[a], &m.class_directions[b]);
                    let identical = u == v;
                    if identical && self.noise == 0.0 {
                        return Err(Error::Validation(format!(
                            "modality `{}`: classes {a} and {b} share a direction with zero noise",
                            m.name
                        )));
                    }
                    if identical || collinear(u, v) {
                        return Err(Error::Validation(format!(
                            "modality `{}`: directions of classes {a} and {b} are collinear",
                            m.name
                        )));
                    }
                }
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Validation(format!(
                "noise {} must be >= 0",
                self.noise
            )));
        }
        if self.pitch_means_hz.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Validation("pitch means must be positive".into()));
        }
        if self
            .polarity_means
            .iter()
            .any(|p| !(-1.0..=1.0).contains(p))
        {
            return Err(Error::Validation(
                "polarity means must lie in [-1, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_length_fraction) {
            return Err(Error::Validation(
                "min_length_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn collinear(u: &[f32], v: &[f32]) -> bool {
    let dot: f64 = u
        .iter()
        .zip(v)
        .map(|(a, b)| f64::from(*a) * f64::from(*b))
        .sum();
    let nu: f64 = u.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return true;
    }
    (dot / (nu * nv)).abs() > 1.0 - 1e-9
}

/// `count` unit vectors in `dim` dimensions, orthonormal when `count <= dim`.
pub(crate) fn orthonormal_directions(
    rng: &mut impl Rng,
    count: usize,
    dim: usize,
) -> Vec<Vec<f32>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if basis.len() < dim {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect()
}

/// Draws `n_videos` conversations of at most `t_max` utterances.
///
/// Each utterance feature is its class direction plus isotropic Gaussian
/// noise; labels are balanced across classes. Waveform sidecars are pure
/// tones at the class pitch mean plus Gaussian jitter, and transcripts are
/// drawn from the built-in lexicon with class-dependent polarity.
pub fn generate(spec: &PlantedSpec, n_videos: usize, t_max: usize) -> Result<ConversationBatch> {
    if n_videos == 0 || t_max == 0 {
        return Err(Error::Validation(format!(
            "need at least one video and one utterance, got {n_videos}x{t_max}"
        )));
    }
    spec.validate()?;
    let k = spec.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let min_len = ((t_max as f64 * spec.min_length_fraction).ceil() as usize).clamp(1, t_max);
    let mut lengths: Vec<usize> = (0..n_videos)
        .map(|_| rng.random_range(min_len..=t_max))
        .collect();
    if !lengths.contains(&t_max) {
        let v = rng.random_range(0..n_videos);
        lengths[v] = t_max;
    }
    let total: usize = lengths.iter().sum();
    let mut pool: Vec<u8> = (0..total).map(|i| (i % k) as u8).collect();
    pool.shuffle(&mut rng);

    let slots = n_videos * t_max;
    let mut mask = vec![false; slots];
    let mut labels = vec![PAD_LABEL; slots];
    let mut next = pool.into_iter();
    for (v, &len) in lengths.iter().enumerate() {
        for u in 0..len {
            mask[v * t_max + u] = true;
            labels[v * t_max + u] = next.next().expect("label pool sized to total");
        }
    }

    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0f32, spec.noise).expect("noise sd"));
    let modalities = spec
        .modalities
        .iter()
        .map(|plan| {
            let d = plan.dim();
            let mut data = vec![0.0f32; slots * d];
            for slot in (0..slots).filter(|&s| mask[s]) {
                let dir = &plan.class_directions[usize::from(labels[slot])];
                let row = &mut data[slot * d..(slot + 1) * d];
                row.copy_from_slice(dir);
                if let Some(n) = &noise {
                    row.iter_mut().for_each(|x| *x += n.sample(&mut rng));
                }
            }
            ModalityFeatures {
                name: plan.name.clone(),
                features: Tensor::new(vec![n_videos, t_max, d], data).expect("sized buffer"),
            }
        })
        .collect();

    let n_samples = (spec.tone_seconds * f64::from(spec.sample_rate_hz)).round() as usize;
    let jitter = (spec.pitch_jitter_hz > 0.0)
        .then(|| Normal::new(0.0, spec.pitch_jitter_hz).expect("jitter sd"));
    let waveforms = (0..slots)
        .map(|slot| {
            if !mask[slot] {
                return None;
            }
            let mean = spec.pitch_means_hz[usize::from(labels[slot])];
            let hz =
                (mean + jitter.as_ref().map_or(0.0, |j| j.sample(&mut rng))).clamp(60.0, 480.0);
            let amplitude = rng.random_range(0.3..0.9);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let sr = f64::from(spec.sample_rate_hz);
            let samples = (0..n_samples)
                .map(|i| {
                    let x = amplitude * (std::f64::consts::TAU * hz * i as f64 / sr + phase).sin();
                    (x * 32767.0).round() as i16
                })
                .collect();
            Some(Waveform {
                samples,
                sample_rate_hz: spec.sample_rate_hz,
            })
        })
        .collect();

    let lexicon = Lexicon::builtin();
    let positive = lexicon.words_with_sign(true);
    let negative = lexicon.words_with_sign(false);
    let transcripts = (0..slots)
        .map(|slot| {
            if !mask[slot] {
                return None;
            }
            let p_pos = (1.0 + spec.polarity_means[usize::from(labels[slot])]) / 2.0;
            let len = rng.random_range(4..=8);
            let tokens = (0..len)
                .map(|_| {
                    let pick = if rng.random_bool(0.25) {
                        FILLER
                    } else if rng.random_bool(p_pos) {
                        &positive[..]
                    } else {
                        &negative[..]
                    };
                    pick.choose(&mut rng)
                        .expect("non-empty word list")
                        .to_string()
                })
                .collect();
            Some(tokens)
        })
        .collect();

    let batch = ConversationBatch {
        modalities,
        mask,
        labels,
        n_videos,
        t_max,
        waveforms: Some(waveforms),
        transcripts: Some(transcripts),
    };
    batch.validate(k)?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_reproduces_directions() {
        let mut spec = PlantedSpec::default_with_seed(4);
        spec.noise = 0.0;
        let b = generate(&spec, 5, 6).unwrap();
        for (m, plan) in b.modalities.iter().zip(&spec.modalities) {
            let d = plan.dim();
            for slot in b.valid_slots() {
                let row = &m.features.data()[slot * d..(slot + 1) * d];
                assert_eq!(row, &plan.class_directions[usize::from(b.labels[slot])][..]);
            }
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let spec = PlantedSpec::default_with_seed(11);
        assert_eq!(
            generate(&spec, 4, 5).unwrap(),
            generate(&spec, 4, 5).unwrap()
        );
        let other = PlantedSpec::default_with_seed(12);
        assert_ne!(
            generate(&spec, 4, 5).unwrap(),
            generate(&other, 4, 5).unwrap()
        );
    }

    #[test]
    fn degenerate_spec_rejected() {
        let mut spec = PlantedSpec::default_with_seed(1);
        spec.noise = 0.0;
        let d = spec.modalities[0].class_directions[0].clone();
        spec.modalities[0].class_directions[1] = d;
        assert!(matches!(generate(&spec, 2, 2), Err(Error::Validation(_))));
        assert!(matches!(
            generate(&PlantedSpec::default_with_seed(1), 0, 3),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn labels_balanced_and_longest_is_t_max() {
        let spec = PlantedSpec::default_with_seed(2);
        let b = generate(&spec, 40, 20).unwrap();
        assert_eq!(b.lengths().into_iter().max(), Some(20));
        let n = b.valid_count();
        assert!(n >= 600);
        let expected = n as f64 / 6.0;
        for k in 0..6 {
            let c = b.slots_with_label(k).len() as f64;
            assert!((c - expected).abs() <= 0.1 * expected, "class {k}: {c}");
        }
    }

    #[test]
    fn directions_are_orthonormal() {
        let spec = PlantedSpec::default_with_seed(3);
        let dirs = &spec.modalities[1].class_directions;
        for a in 0..dirs.len() {
            for b in 0..dirs.len() {
                let dot: f32 = dirs[a].iter().zip(&dirs[b]).map(|(x, y)| x * y).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-5);
            }
        }
    }
}
