use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

/// Marker used in lexicon files for tokens that flip the next token's score.
pub const NEGATOR_MARK: &str = "NEG";

/// Token polarity table loaded from `token<TAB>score` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    scores: BTreeMap<String, f32>,
    negators: BTreeSet<String>,
}

const BUILTIN: &[(&str, f32)] = &[
    ("good", 0.7),
    ("great", 0.8),
    ("happy", 0.8),
    ("love", 0.5),
    ("nice", 0.6),
    ("wonderful", 1.0),
    ("glad", 0.5),
    ("fun", 0.3),
    ("fine", 0.4),
    ("amazing", 0.6),
    ("bad", -0.7),
    ("terrible", -1.0),
    ("sad", -0.5),
    ("hate", -0.8),
    ("awful", -1.0),
    ("angry", -0.5),
    ("wrong", -0.5),
    ("annoying", -0.8),
    ("sorry", -0.5),
    ("worse", -0.4),
];

const BUILTIN_NEGATORS: &[&str] = &["not", "no", "never"];

impl Lexicon {
    pub fn new(scores: BTreeMap<String, f32>, negators: BTreeSet<String>) -> Result<Self> {
        if let Some((tok, s)) = scores.iter().find(|(_, s)| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!(
                "lexicon score for `{tok}` is {s}, outside [-1, 1]"
            )));
        }
        Ok(Lexicon { scores, negators })
    }

    /// Small general-purpose English table.
    pub fn builtin() -> Self {
        Lexicon {
            scores: BUILTIN.iter().map(|&(t, s)| (t.to_string(), s)).collect(),
            negators: BUILTIN_NEGATORS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut scores = BTreeMap::new();
        let mut negators = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (token, value) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!(
                    "lexicon line {}: expected token<TAB>score",
                    lineno + 1
                ))
            })?;
            let token = token.trim().to_lowercase();
            if value.trim() == NEGATOR_MARK {
                negators.insert(token);
                continue;
            }
            let score: f32 = value.trim().parse().map_err(|_| {
                Error::Config(format!("lexicon line {}: bad score `{value}`", lineno + 1))
            })?;
            scores.insert(token, score);
        }
        Lexicon::new(scores, negators)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::parse(&text)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (t, s) in &self.scores {
            out.push_str(&format!("{t}\t{s}\n"));
        }
        for t in &self.negators {
            out.push_str(&format!("{t}\t{NEGATOR_MARK}\n"));
        }
        out
    }

    pub fn score(&self, token: &str) -> Option<f32> {
        self.scores.get(token).copied()
    }

    pub fn is_negator(&self, token: &str) -> bool {
        self.negators.contains(token)
    }

    /// Tokens with strictly positive (`true`) or negative (`false`) scores.
    pub fn words_with_sign(&self, positive: bool) -> Vec<&str> {
        self.scores
            .iter()
            .filter(|(_, &s)| if positive { s > 0.0 } else { s < 0.0 })
            .map(|(t, _)| t.as_str())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Polarity {
    pub score: f64,
    /// No token matched the lexicon; the score defaulted to 0.
    pub neutral_default: bool,
}

/// Mean lexicon score over matched tokens. A negator flips the score of the
/// token that immediately follows it.
pub fn polarity<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Polarity {
    let mut sum = 0.0f64;
    let mut matched = 0usize;
    let mut flip = false;
    for tok in tokens {
        let tok = tok.as_ref().to_lowercase();
        if lexicon.is_negator(&tok) {
            flip = true;
            continue;
        }
        if let Some(s) = lexicon.score(&tok) {
            let s = f64::from(s);
            sum += if flip { -s } else { s };
            matched += 1;
        }
        flip = false;
    }
    if matched == 0 {
        return Polarity {
            score: 0.0,
            neutral_default: true,
        };
    }
    Polarity {
        score: sum / matched as f64,
        neutral_default: false,
    }
}
