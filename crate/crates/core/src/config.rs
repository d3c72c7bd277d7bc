//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cav::ProbeConfig;
use crate::concepts::ConceptRule;
use crate::error::{Error, Result};
use crate::net::{BottleneckId, Layer, Level, ModelConfig, TrainConfig};
use crate::synth::ConversationBatch;
use crate::tcav::required_rejections;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Archive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Feature archive to import when `source = "archive"`.
    pub archive: Option<PathBuf>,
    pub n_videos: usize,
    pub t_max: usize,
    pub noise: f32,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            archive: None,
            n_videos: 60,
            t_max: 20,
            noise: 0.3,
            train_fraction: 0.7,
        }
    }
}

/// Layer widths; modality names and input sizes come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub unimodal_hidden: usize,
    pub unimodal_dense: usize,
    pub fusion_hidden: usize,
    pub fusion_dense: usize,
    pub dropout: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(Vec::new());
        ModelSection {
            unimodal_hidden: m.unimodal_hidden,
            unimodal_dense: m.unimodal_dense,
            fusion_hidden: m.fusion_hidden,
            fusion_dense: m.fusion_dense,
            dropout: m.dropout,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, batch: &ConversationBatch) -> ModelConfig {
        ModelConfig {
            unimodal_hidden: self.unimodal_hidden,
            unimodal_dense: self.unimodal_dense,
            fusion_hidden: self.fusion_hidden,
            fusion_dense: self.fusion_dense,
            dropout: self.dropout,
            ..ModelConfig::for_batch(batch)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    /// Home modality: the unimodal bottleneck a concept is probed at.
    pub modality: String,
    pub rule: ConceptRule,
}

/// A bottleneck layer named without its modality, e.g.
/// `unimodal/contextual_lstm_output`; the unimodal level resolves to each
/// concept's home modality.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct BottleneckSpec {
    pub level: LevelSpec,
    pub layer: Layer,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LevelSpec {
    /// The concept's home modality.
    Home,
    Modality(String),
    Multimodal,
}

impl BottleneckSpec {
    pub fn resolve(&self, home: &str) -> BottleneckId {
        let level = match &self.level {
            LevelSpec::Home => Level::Unimodal(home.to_string()),
            LevelSpec::Modality(m) => Level::Unimodal(m.clone()),
            LevelSpec::Multimodal => Level::Multimodal,
        };
        BottleneckId {
            level,
            layer: self.layer,
        }
    }
}

impl std::fmt::Display for BottleneckSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.level {
            LevelSpec::Home => write!(f, "unimodal/{}", self.layer.as_str()),
            LevelSpec::Modality(m) => write!(f, "unimodal:{m}/{}", self.layer.as_str()),
            LevelSpec::Multimodal => write!(f, "multimodal/{}", self.layer.as_str()),
        }
    }
}

impl std::str::FromStr for BottleneckSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(layer) = s.strip_prefix("unimodal/") {
            let id: BottleneckId = format!("unimodal:_/{layer}")
                .parse()
                .map_err(|_| Error::UnknownBottleneck(s.into()))?;
            return Ok(BottleneckSpec {
                level: LevelSpec::Home,
                layer: id.layer,
            });
        }
        let id: BottleneckId = s.parse()?;
        let level = match id.level {
            Level::Unimodal(m) => LevelSpec::Modality(m),
            Level::Multimodal => LevelSpec::Multimodal,
        };
        Ok(BottleneckSpec {
            level,
            layer: id.layer,
        })
    }
}

impl Serialize for BottleneckSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BottleneckSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// CAVs trained per concept and bottleneck.
    pub repetitions: usize,
    pub random_concepts: usize,
    /// Utterances drawn per random concept, split evenly.
    pub random_set_size: usize,
    pub alpha: f64,
    pub bottlenecks: Vec<BottleneckSpec>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            repetitions: 30,
            random_concepts: 50,
            random_set_size: 100,
            alpha: 0.05,
            bottlenecks: vec![
                BottleneckSpec {
                    level: LevelSpec::Home,
                    layer: Layer::ContextualLstmOutput,
                },
                BottleneckSpec {
                    level: LevelSpec::Multimodal,
                    layer: Layer::DenseOutput,
                },
            ],
        }
    }
}

impl ProtocolConfig {
    pub fn protocol(&self) -> crate::tcav::Protocol {
        crate::tcav::Protocol {
            repetitions: self.repetitions,
            random_concepts: self.random_concepts,
            random_set_size: self.random_set_size,
            alpha: self.alpha,
            required_rejections: required_rejections(self.random_concepts),
            strict_positive: true,
            bottlenecks: self.bottlenecks.iter().map(ToString::to_string).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for CAV training and scoring.
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    /// `train.seed` is folded into the run seed.
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub protocol: ProtocolConfig,
    pub concepts: Vec<ConceptSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            protocol: ProtocolConfig::default(),
            concepts: default_concepts(),
        }
    }
}

/// VP on video (labels 0, 4, 5 against 2), PT on audio (pitch above 250 Hz
/// among labels 0, 4, 5, 2) and UP on text (polarity sign).
pub fn default_concepts() -> Vec<ConceptSpec> {
    vec![
        ConceptSpec {
            name: "VP".into(),
            modality: "video".into(),
            rule: ConceptRule::LabelSets {
                positive: vec![0, 4, 5],
                negative: vec![2],
            },
        },
        ConceptSpec {
            name: "PT".into(),
            modality: "audio".into(),
            rule: ConceptRule::PitchThreshold {
                hz: 250.0,
                candidates: Some(vec![0, 4, 5, 2]),
            },
        },
        ConceptSpec {
            name: "UP".into(),
            modality: "text".into(),
            rule: ConceptRule::PolaritySign { lexicon: None },
        },
    ]
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.probe.validate()?;
        let p = &self.protocol;
        if p.repetitions < 2 {
            return Err(Error::Config(format!(
                "repetitions must be at least 2, got {}",
                p.repetitions
            )));
        }
        if p.random_concepts < 1 {
            return Err(Error::Config("random_concepts must be at least 1".into()));
        }
        if !(p.alpha > 0.0 && p.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", p.alpha)));
        }
        if p.bottlenecks.is_empty() {
            return Err(Error::Config("no bottlenecks listed".into()));
        }
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0, 1)",
                d.train_fraction
            )));
        }
        match d.source {
            DataSource::Archive => match &d.archive {
                Some(path) => require_path(path)?,
                None => {
                    return Err(Error::Config(
                        "source = \"archive\" needs data.archive".into(),
                    ))
                }
            },
            DataSource::Synthetic => {
                if d.n_videos < 2 || d.t_max < 1 || !(d.noise >= 0.0) {
                    return Err(Error::Config(
                        "synthetic data needs n_videos ≥ 2, t_max ≥ 1, noise ≥ 0".into(),
                    ));
                }
            }
        }
        if self.concepts.is_empty() {
            return Err(Error::Config("no concepts listed".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.concepts {
            let safe = !c.name.is_empty()
                && c.name
                    .chars()
                    .all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-')
                && !c.name.starts_with("random_");
            if !safe {
                return Err(Error::Config(format!(
                    "concept name `{}` must be [A-Za-z0-9_-]+ and not start with `random_`",
                    c.name
                )));
            }
            if !names.insert(&c.name) {
                return Err(Error::Config(format!("concept `{}` listed twice", c.name)));
            }
            c.rule.validate()?;
            match &c.rule {
                ConceptRule::PolaritySign {
                    lexicon: Some(path),
                } => require_path(path)?,
                ConceptRule::RandomBipartition { .. } | ConceptRule::Fixture { .. } => {
                    return Err(Error::Config(format!(
                        "concept `{}` needs a labelling rule",
                        c.name
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of everything that affects results; `jobs` and
    /// `out_dir` are left out.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.jobs = 1;
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }

    /// Bottlenecks of one concept, in protocol order.
    pub fn bottlenecks_for(&self, concept: &ConceptSpec) -> Vec<BottleneckId> {
        self.protocol
            .bottlenecks
            .iter()
            .map(|b| b.resolve(&concept.modality))
            .collect()
    }

    /// Every distinct bottleneck any concept is probed at, sorted.
    pub fn all_bottlenecks(&self) -> Vec<BottleneckId> {
        let set: std::collections::BTreeSet<String> = self
            .concepts
            .iter()
            .flat_map(|c| self.bottlenecks_for(c))
            .map(|b| b.to_string())
            .collect();
        set.into_iter()
            .map(|s| s.parse().expect("round-trips"))
            .collect()
    }
}

fn require_path(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::parse("seed = 9\n[protocol]\nrepetitions = 5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.protocol.repetitions, 5);
        assert_eq!(c.protocol.random_concepts, 50);
        assert_eq!(c.concepts.len(), 3);
    }

    #[test]
    fn hash_ignores_jobs_and_out_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.jobs = 4;
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn invalid_configs() {
        let mut c = RunConfig::default();
        c.protocol.repetitions = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.data.source = DataSource::Archive;
        c.data.archive = Some("/nonexistent/features.mmer".into());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.concepts[1].name = "VP".into();
        assert!(c.validate().is_err());
        assert!(RunConfig::parse("sed = 1").is_err());
    }

    #[test]
    fn bottleneck_specs() {
        let b: BottleneckSpec = "unimodal/contextual_lstm_output".parse().unwrap();
        assert_eq!(
            b.resolve("audio").to_string(),
            "unimodal:audio/contextual_lstm_output"
        );
        let m: BottleneckSpec = "multimodal/dense_output".parse().unwrap();
        assert_eq!(m.resolve("audio"), BottleneckId::multimodal_canonical());
        let x: BottleneckSpec = "unimodal:text/dense_output".parse().unwrap();
        assert_eq!(x.to_string(), "unimodal:text/dense_output");
        assert!("unimodal/softmax".parse::<BottleneckSpec>().is_err());
        let c = RunConfig::default();
        assert_eq!(c.all_bottlenecks().len(), 4);
    }
}
