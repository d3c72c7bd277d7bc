//! Concept example sets built from emotion labels, voice pitch or transcript
//! polarity.

mod pitch;
mod polarity;

pub use pitch::{estimate_pitch, tone, FRAME_SECONDS, MAX_HZ, MIN_HZ, VOICING_THRESHOLD};
pub use polarity::{polarity, Lexicon, Polarity, NEGATOR_MARK};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::ConversationBatch;

/// How a concept's positive and negative examples are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConceptRule {
    LabelSets {
        positive: Vec<u8>,
        negative: Vec<u8>,
    },
    /// Utterances whose pitch exceeds `hz` are positive, the rest negative.
    /// When `candidates` is given only utterances with those labels are
    /// considered at all.
    PitchThreshold {
        hz: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        candidates: Option<Vec<u8>>,
    },
    /// Sign of the transcript polarity; zero-polarity utterances are excluded.
    PolaritySign {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lexicon: Option<PathBuf>,
    },
    /// Random bipartition of utterances, the null baseline for significance.
    RandomBipartition { draw: usize, seed: u64 },
    /// Example sets chosen by hand, e.g. validation fixtures.
    Fixture { description: String },
}

impl ConceptRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            ConceptRule::LabelSets { positive, negative } => {
                let p: BTreeSet<_> = positive.iter().collect();
                if let Some(l) = negative.iter().find(|l| p.contains(l)) {
                    return Err(Error::Config(format!(
                        "label {l} is in both the positive and negative set"
                    )));
                }
                if positive.is_empty() || negative.is_empty() {
                    return Err(Error::Config("label sets must be non-empty".into()));
                }
                Ok(())
            }
            ConceptRule::PitchThreshold { hz, .. } if !(*hz > 0.0) => Err(Error::Config(format!(
                "pitch threshold must be positive, got {hz}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Positive and negative example utterances of a named concept, identified
/// by batch slot (`video * t_max + utterance`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub name: String,
    pub rule: ConceptRule,
    pub positive_ids: Vec<usize>,
    pub negative_ids: Vec<usize>,
}

impl ConceptSet {
    /// Both sides must be non-empty before a probe can be fitted.
    pub fn ensure_trainable(&self) -> Result<()> {
        if self.positive_ids.is_empty() || self.negative_ids.is_empty() {
            return Err(Error::Data(format!(
                "concept `{}` has {} positive and {} negative examples",
                self.name,
                self.positive_ids.len(),
                self.negative_ids.len()
            )));
        }
        Ok(())
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

pub fn label_by_emotion(
    batch: &ConversationBatch,
    name: &str,
    positive: &[u8],
    negative: &[u8],
) -> Result<ConceptSet> {
    let rule = ConceptRule::LabelSets {
        positive: positive.to_vec(),
        negative: negative.to_vec(),
    };
    rule.validate()?;
    let mut set = empty(name, rule);
    for slot in batch.valid_slots() {
        let l = batch.labels[slot];
        if positive.contains(&l) {
            set.positive_ids.push(slot);
        } else if negative.contains(&l) {
            set.negative_ids.push(slot);
        }
    }
    Ok(set)
}

pub fn label_by_pitch(
    batch: &ConversationBatch,
    name: &str,
    threshold_hz: f64,
    candidates: Option<&[u8]>,
) -> Result<ConceptSet> {
    let rule = ConceptRule::PitchThreshold {
        hz: threshold_hz,
        candidates: candidates.map(<[u8]>::to_vec),
    };
    rule.validate()?;
    let waves = batch
        .waveforms
        .as_ref()
        .ok_or_else(|| Error::Data("batch has no waveform sidecars".into()))?;
    let mut set = empty(name, rule);
    for slot in batch.valid_slots() {
        if candidates.is_some_and(|c| !c.contains(&batch.labels[slot])) {
            continue;
        }
        let wave = waves[slot]
            .as_ref()
            .ok_or_else(|| Error::Data(format!("slot {slot} has no waveform")))?;
        match estimate_pitch(&wave.to_f32(), wave.sample_rate_hz) {
            Ok(hz) if hz > threshold_hz => set.positive_ids.push(slot),
            Ok(_) => set.negative_ids.push(slot),
            Err(Error::NoPitch(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(set)
}

pub fn label_by_polarity(
    batch: &ConversationBatch,
    name: &str,
    lexicon: &Lexicon,
    lexicon_path: Option<PathBuf>,
) -> Result<ConceptSet> {
    let transcripts = batch
        .transcripts
        .as_ref()
        .ok_or_else(|| Error::Data("batch has no transcript sidecars".into()))?;
    let mut set = empty(
        name,
        ConceptRule::PolaritySign {
            lexicon: lexicon_path,
        },
    );
    for slot in batch.valid_slots() {
        let tokens = transcripts[slot]
            .as_ref()
            .ok_or_else(|| Error::Data(format!("slot {slot} has no transcript")))?;
        let p = polarity(tokens, lexicon);
        if p.score > 0.0 {
            set.positive_ids.push(slot);
        } else if p.score < 0.0 {
            set.negative_ids.push(slot);
        }
    }
    Ok(set)
}

/// Applies `rule` to `batch`. A polarity rule without a lexicon path uses
/// [`Lexicon::builtin`].
pub fn build_concept(
    batch: &ConversationBatch,
    name: &str,
    rule: &ConceptRule,
) -> Result<ConceptSet> {
    match rule {
        ConceptRule::LabelSets { positive, negative } => {
            label_by_emotion(batch, name, positive, negative)
        }
        ConceptRule::PitchThreshold { hz, candidates } => {
            label_by_pitch(batch, name, *hz, candidates.as_deref())
        }
        ConceptRule::PolaritySign { lexicon } => {
            let lex = match lexicon {
                Some(p) => Lexicon::load(p)?,
                None => Lexicon::builtin(),
            };
            label_by_polarity(batch, name, &lex, lexicon.clone())
        }
        ConceptRule::RandomBipartition { .. } => Err(Error::Contract(
            "random concepts are drawn by the CAV trainer, not labelled".into(),
        )),
        ConceptRule::Fixture { .. } => Err(Error::Contract(
            "fixture concepts carry their own example sets".into(),
        )),
    }
}

fn empty(name: &str, rule: ConceptRule) -> ConceptSet {
    ConceptSet {
        name: name.to_string(),
        rule,
        positive_ids: Vec::new(),
        negative_ids: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::fixtures::two_video_batch;
    use crate::synth::{Waveform, PAD_LABEL};

    fn with_tones(freqs: &[Option<f64>]) -> ConversationBatch {
        let mut b = two_video_batch();
        b.waveforms = Some(
            freqs
                .iter()
                .map(|f| {
                    f.map(|hz| Waveform {
                        samples: tone(hz, 0.5, 0.0, 16_000, 1600)
                            .iter()
                            .map(|x| (x * 32767.0).round() as i16)
                            .collect(),
                        sample_rate_hz: 16_000,
                    })
                })
                .collect(),
        );
        b
    }

    #[test]
    fn emotion_sets_from_table() {
        // labels: [0, 4, 2, 5, 1, pad]
        let b = two_video_batch();
        let set = label_by_emotion(&b, "VP", &[0, 4, 5], &[2]).unwrap();
        assert_eq!(set.positive_ids, vec![0, 1, 3]);
        assert_eq!(set.negative_ids, vec![2]);
        // label 1 (slot 4) is in neither
        assert!(!set.positive_ids.contains(&4) && !set.negative_ids.contains(&4));
    }

    #[test]
    fn overlapping_label_sets_rejected() {
        let b = two_video_batch();
        assert!(matches!(
            label_by_emotion(&b, "bad", &[0, 2], &[2]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pitch_threshold_is_strict() {
        let b = with_tones(&[
            Some(300.0),
            Some(250.0),
            Some(200.0),
            Some(420.0),
            Some(120.0),
            None,
        ]);
        let set = label_by_pitch(&b, "PT", 250.0, None).unwrap();
        assert_eq!(set.positive_ids, vec![0, 3]);
        assert_eq!(set.negative_ids, vec![1, 2, 4]);
        // 250 Hz estimates within a fraction of a Hz; place the threshold
        // exactly on the estimate to check "exceeds" is strict.
        let w = b.waveforms.as_ref().unwrap()[1].as_ref().unwrap();
        let est = estimate_pitch(&w.to_f32(), 16_000).unwrap();
        let set = label_by_pitch(&b, "PT", est, None).unwrap();
        assert!(set.negative_ids.contains(&1));
    }

    #[test]
    fn pitch_candidates_prefilter() {
        let b = with_tones(&[
            Some(300.0),
            Some(300.0),
            Some(200.0),
            Some(300.0),
            Some(300.0),
            None,
        ]);
        let set = label_by_pitch(&b, "PT", 250.0, Some(&[0, 4, 5, 2])).unwrap();
        assert_eq!(set.positive_ids, vec![0, 1, 3]);
        assert_eq!(set.negative_ids, vec![2]);
    }

    #[test]
    fn unvoiced_utterances_are_excluded() {
        let mut b = with_tones(&[
            Some(300.0),
            Some(200.0),
            Some(200.0),
            Some(200.0),
            Some(200.0),
            None,
        ]);
        b.waveforms.as_mut().unwrap()[0] = Some(Waveform {
            samples: vec![0; 1600],
            sample_rate_hz: 16_000,
        });
        let set = label_by_pitch(&b, "PT", 250.0, None).unwrap();
        assert!(!set.positive_ids.contains(&0) && !set.negative_ids.contains(&0));
    }

    #[test]
    fn missing_sidecars_are_data_errors() {
        let b = two_video_batch();
        assert!(matches!(
            label_by_pitch(&b, "PT", 250.0, None),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            label_by_polarity(&b, "UP", &Lexicon::builtin(), None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn polarity_sign_excludes_zero() {
        let mut b = two_video_batch();
        let t = |s: &str| Some(s.split(' ').map(String::from).collect::<Vec<_>>());
        b.transcripts = Some(vec![
            t("good day"),
            t("not good"),
            t("the table"),
            t("bad bad good"),
            t("good bad"),
            None,
        ]);
        let set = label_by_polarity(&b, "UP", &Lexicon::builtin(), None).unwrap();
        assert_eq!(set.positive_ids, vec![0]);
        assert_eq!(set.negative_ids, vec![1, 3]);
    }

    #[test]
    fn exclusion_is_total() {
        let b = two_video_batch();
        let set = label_by_emotion(&b, "VP", &[0, 4, 5], &[2]).unwrap();
        for slot in b.valid_slots() {
            let n = set.positive_ids.contains(&slot) as u8 + set.negative_ids.contains(&slot) as u8;
            assert!(n <= 1);
        }
        assert!(b.labels.iter().filter(|&&l| l == PAD_LABEL).count() == 1);
    }

    #[test]
    fn json_shape() {
        let b = two_video_batch();
        let set = label_by_emotion(&b, "VP", &[0, 4, 5], &[2]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&set).unwrap();
        for key in ["name", "rule", "positive_ids", "negative_ids"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: ConceptSet = serde_json::from_value(v).unwrap();
        assert_eq!(back, set);
    }
}
