//! Bidirectional contextual LSTM classifier with per-modality branches and a
//! fusion branch, plus its training loop, checkpoints and the activation and
//! gradient hooks used by concept probes.

mod checkpoint;
mod layers;
mod model;
mod train;

pub use checkpoint::{
    load_checkpoint, load_state, read_checkpoint, read_state, save_checkpoint, write_checkpoint,
};
pub use layers::{
    bidirectional, bidirectional_contextual_lstm, lstm_step, Activation, Dense, LstmParams,
    LstmVars,
};
pub use model::{BcLstmModel, Branch, ForwardOutput, ModalitySpec, ModelConfig};
pub use train::{
    adam_update, train, train_branch, AdamState, BranchKey, EpochRecord, TrainConfig, TrainingLog,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Unimodal(String),
    Multimodal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    ContextualLstmOutput,
    DenseOutput,
}

impl Layer {
    pub fn as_str(self) -> &'static str {
        match self {
            Layer::ContextualLstmOutput => "contextual_lstm_output",
            Layer::DenseOutput => "dense_output",
        }
    }
}

/// A layer whose activations can be captured. Written as
/// `unimodal:<modality>/<layer>` or `multimodal/<layer>`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BottleneckId {
    pub level: Level,
    pub layer: Layer,
}

impl BottleneckId {
    pub fn unimodal(modality: &str, layer: Layer) -> Self {
        BottleneckId {
            level: Level::Unimodal(modality.to_string()),
            layer,
        }
    }

    pub fn multimodal(layer: Layer) -> Self {
        BottleneckId {
            level: Level::Multimodal,
            layer,
        }
    }

    /// Contextual LSTM output of a unimodal branch.
    pub fn unimodal_canonical(modality: &str) -> Self {
        Self::unimodal(modality, Layer::ContextualLstmOutput)
    }

    /// Dense output of the fusion branch.
    pub fn multimodal_canonical() -> Self {
        Self::multimodal(Layer::DenseOutput)
    }

    /// File-name friendly form, e.g. `unimodal-audio-contextual_lstm_output`.
    pub fn slug(&self) -> String {
        match &self.level {
            Level::Unimodal(m) => format!("unimodal-{m}-{}", self.layer.as_str()),
            Level::Multimodal => format!("multimodal-{}", self.layer.as_str()),
        }
    }
}

impl fmt::Display for BottleneckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.level {
            Level::Unimodal(m) => write!(f, "unimodal:{m}/{}", self.layer.as_str()),
            Level::Multimodal => write!(f, "multimodal/{}", self.layer.as_str()),
        }
    }
}

impl FromStr for BottleneckId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::UnknownBottleneck(s.to_string());
        let (level, layer) = s.split_once('/').ok_or_else(bad)?;
        let layer = match layer {
            "contextual_lstm_output" => Layer::ContextualLstmOutput,
            "dense_output" => Layer::DenseOutput,
            _ => return Err(bad()),
        };
        let level = match level.split_once(':') {
            Some(("unimodal", m)) if !m.is_empty() => Level::Unimodal(m.to_string()),
            None if level == "multimodal" => Level::Multimodal,
            _ => return Err(bad()),
        };
        Ok(BottleneckId { level, layer })
    }
}

impl Serialize for BottleneckId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BottleneckId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_text_roundtrip() {
        for id in [
            BottleneckId::unimodal_canonical("audio"),
            BottleneckId::unimodal("text", Layer::DenseOutput),
            BottleneckId::multimodal_canonical(),
            BottleneckId::multimodal(Layer::ContextualLstmOutput),
        ] {
            assert_eq!(id.to_string().parse::<BottleneckId>().unwrap(), id);
            let json = serde_json::to_string(&id).unwrap();
            assert_eq!(serde_json::from_str::<BottleneckId>(&json).unwrap(), id);
        }
        assert_eq!(
            BottleneckId::multimodal_canonical().to_string(),
            "multimodal/dense_output"
        );
    }

    #[test]
    fn bad_bottleneck_names() {
        for s in [
            "",
            "multimodal",
            "unimodal:/dense_output",
            "fusion/dense_output",
            "multimodal/attention",
        ] {
            assert!(
                matches!(s.parse::<BottleneckId>(), Err(Error::UnknownBottleneck(_))),
                "{s}"
            );
        }
    }
}
