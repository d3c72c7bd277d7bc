use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ScoreDistribution, SignificanceVerdict};
use crate::cav::CavEnsemble;
use crate::error::{Error, Result};
use crate::net::{BottleneckId, Level};
use crate::synth::class_name;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub concept: String,
    pub class_id: usize,
    pub bottleneck: BottleneckId,
}

/// Protocol constants the report was produced under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub repetitions: usize,
    pub random_concepts: usize,
    pub random_set_size: usize,
    pub alpha: f64,
    pub required_rejections: usize,
    /// Scores count only strictly positive derivatives.
    pub strict_positive: bool,
    pub bottlenecks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub concept: String,
    pub class_id: usize,
    pub class_name: String,
    pub bottleneck: BottleneckId,
    pub scores: Vec<f32>,
    pub mean: f64,
    pub std: f64,
    pub probe_accuracy_mean: f64,
    pub p_values: Vec<f32>,
    pub rejections: usize,
    pub significant: bool,
    /// Marks insignificant entries in charts.
    pub star: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcavReport {
    pub run_id: String,
    pub config_hash: String,
    pub protocol: Protocol,
    pub entries: Vec<ReportEntry>,
}

impl TcavReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn entry(
        &self,
        concept: &str,
        class_id: usize,
        bottleneck: &BottleneckId,
    ) -> Option<&ReportEntry> {
        self.entries
            .iter()
            .find(|e| e.concept == concept && e.class_id == class_id && &e.bottleneck == bottleneck)
    }
}

/// Assembles one entry per requested triple, in request order.
pub fn build_report(
    requested: &[Triple],
    distributions: &[ScoreDistribution],
    verdicts: &[SignificanceVerdict],
    ensembles: &[CavEnsemble],
    protocol: Protocol,
    config_hash: &str,
) -> Result<TcavReport> {
    let key = |c: &str, k: usize, l: &BottleneckId| Triple {
        concept: c.to_string(),
        class_id: k,
        bottleneck: l.clone(),
    };
    let mut seen = BTreeSet::new();
    for t in requested {
        if !seen.insert(t) {
            return Err(Error::Completeness(format!(
                "triple ({}, {}, {}) requested twice",
                t.concept, t.class_id, t.bottleneck
            )));
        }
    }
    let dists: BTreeMap<Triple, &ScoreDistribution> = distributions
        .iter()
        .map(|d| (key(&d.concept, d.class_id, &d.bottleneck), d))
        .collect();
    let verdict_map: BTreeMap<Triple, &SignificanceVerdict> = verdicts
        .iter()
        .map(|v| (key(&v.concept, v.class_id, &v.bottleneck), v))
        .collect();
    let ens: BTreeMap<(&str, &BottleneckId), &CavEnsemble> = ensembles
        .iter()
        .map(|e| ((e.concept.as_str(), &e.bottleneck), e))
        .collect();
    let missing = |what: &str, t: &Triple| {
        Error::Completeness(format!(
            "no {what} for ({}, {}, {})",
            t.concept, t.class_id, t.bottleneck
        ))
    };
    let mut entries = Vec::with_capacity(requested.len());
    for t in requested {
        let d = dists
            .get(t)
            .ok_or_else(|| missing("score distribution", t))?;
        let v = verdict_map
            .get(t)
            .ok_or_else(|| missing("significance verdict", t))?;
        let e = ens
            .get(&(t.concept.as_str(), &t.bottleneck))
            .ok_or_else(|| missing("CAV ensemble", t))?;
        entries.push(ReportEntry {
            concept: t.concept.clone(),
            class_id: t.class_id,
            class_name: class_name(t.class_id).to_string(),
            bottleneck: t.bottleneck.clone(),
            scores: d.scores.iter().map(|&s| s as f32).collect(),
            mean: d.mean(),
            std: d.std(),
            probe_accuracy_mean: e.accuracy_mean(),
            p_values: v.p_values.iter().map(|&p| p as f32).collect(),
            rejections: v.rejections,
            significant: v.significant,
            star: !v.significant,
        });
    }
    Ok(TcavReport {
        run_id: run_id(config_hash),
        config_hash: config_hash.to_string(),
        protocol,
        entries,
    })
}

/// Stable identifier derived from the configuration fingerprint.
pub fn run_id(config_hash: &str) -> String {
    let digest = Sha256::digest(format!("run:{config_hash}").as_bytes());
    hex::encode(&digest[..8])
}

/// One row per entry; score and p-value lists are `;`-joined.
pub fn report_csv(report: &TcavReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("CSV: {e}"));
    w.write_record([
        "concept",
        "class_id",
        "class_name",
        "bottleneck",
        "mean",
        "std",
        "probe_accuracy_mean",
        "rejections",
        "significant",
        "star",
        "scores",
        "p_values",
    ])
    .map_err(csv_err)?;
    let join = |v: &[f32]| v.iter().map(f32::to_string).collect::<Vec<_>>().join(";");
    for e in &report.entries {
        w.write_record([
            e.concept.clone(),
            e.class_id.to_string(),
            e.class_name.clone(),
            e.bottleneck.to_string(),
            e.mean.to_string(),
            e.std.to_string(),
            e.probe_accuracy_mean.to_string(),
            e.rejections.to_string(),
            e.significant.to_string(),
            e.star.to_string(),
            join(&e.scores),
            join(&e.p_values),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("CSV: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("CSV: {e}")))
}

const PALETTE: [&str; 6] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1",
];

/// Bar charts of mean score per class and concept, one per bottleneck
/// level (`unimodal`, `multimodal`). Error bars show one standard
/// deviation; insignificant bars carry a star. Returns `(level, svg)`.
pub fn render_svg(report: &TcavReport) -> Vec<(String, String)> {
    let level = |l: &BottleneckId| match l.level {
        Level::Unimodal(_) => "unimodal",
        Level::Multimodal => "multimodal",
    };
    let mut groups: BTreeMap<&str, Vec<&ReportEntry>> = BTreeMap::new();
    for e in &report.entries {
        groups.entry(level(&e.bottleneck)).or_default().push(e);
    }
    groups
        .into_iter()
        .map(|(name, entries)| (name.to_string(), chart(name, &entries)))
        .collect()
}

fn chart(title: &str, entries: &[&ReportEntry]) -> String {
    let mut concepts: Vec<&str> = Vec::new();
    let mut classes: Vec<usize> = Vec::new();
    for e in entries {
        if !concepts.contains(&e.concept.as_str()) {
            concepts.push(&e.concept);
        }
        if !classes.contains(&e.class_id) {
            classes.push(e.class_id);
        }
    }
    classes.sort_unstable();
    let (w, h) = (760.0, 380.0);
    let (left, right, top, bottom) = (50.0, 140.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let group_w = plot_w / classes.len().max(1) as f64;
    let bar_w = group_w * 0.8 / concepts.len().max(1) as f64;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">TCAV scores, {title} bottleneck</text>"#,
        left + plot_w / 2.0
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{v:.1}</text>"##,
            y(v),
            left + plot_w,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (gi, &k) in classes.iter().enumerate() {
        let gx = left + gi as f64 * group_w + group_w * 0.1;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            top + plot_h + 18.0,
            class_name(k)
        );
        for (ci, c) in concepts.iter().enumerate() {
            let Some(e) = entries.iter().find(|e| e.class_id == k && e.concept == *c) else {
                continue;
            };
            let x = gx + ci as f64 * bar_w;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                y(e.mean),
                bar_w * 0.9,
                top + plot_h - y(e.mean),
                PALETTE[ci % PALETTE.len()]
            );
            let cx = x + bar_w * 0.45;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                y(e.mean - e.std),
                y(e.mean + e.std)
            );
            if e.star {
                let _ = writeln!(
                    s,
                    r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="16">*</text>"#,
                    y(e.mean + e.std) - 4.0
                );
            }
        }
    }
    for (ci, c) in concepts.iter().enumerate() {
        let ly = top + 16.0 * ci as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{ly:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{c}</text>"#,
            left + plot_w + 16.0,
            PALETTE[ci % PALETTE.len()],
            left + plot_w + 34.0,
            ly + 10.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}">* not significant</text>"#,
        left + plot_w + 16.0,
        top + 16.0 * concepts.len() as f64 + 14.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cav::Cav;
    use crate::tcav::significance;

    fn fixture() -> (
        Vec<Triple>,
        Vec<ScoreDistribution>,
        Vec<SignificanceVerdict>,
        Vec<CavEnsemble>,
    ) {
        let l = BottleneckId::multimodal_canonical();
        let d = ScoreDistribution {
            concept: "PT".into(),
            class_id: 3,
            bottleneck: l.clone(),
            scores: vec![0.8, 0.9, 0.85],
        };
        let r = ScoreDistribution {
            concept: "random_000".into(),
            scores: vec![0.4, 0.5, 0.45],
            ..d.clone()
        };
        let v = significance(&d, &[r], 0.05).unwrap();
        let cav = Cav {
            concept: "PT".into(),
            bottleneck: l.clone(),
            direction: vec![1.0],
            bias: 0.0,
            heldout_accuracy: 0.9,
            seed: 1,
        };
        let e = CavEnsemble {
            concept: "PT".into(),
            bottleneck: l.clone(),
            members: vec![
                cav.clone(),
                Cav {
                    heldout_accuracy: 0.8,
                    ..cav
                },
            ],
        };
        let t = Triple {
            concept: "PT".into(),
            class_id: 3,
            bottleneck: l,
        };
        (vec![t], vec![d], vec![v], vec![e])
    }

    fn protocol() -> Protocol {
        Protocol {
            repetitions: 3,
            random_concepts: 1,
            random_set_size: 100,
            alpha: 0.05,
            required_rejections: 1,
            strict_positive: true,
            bottlenecks: vec!["multimodal/dense_output".into()],
        }
    }

    #[test]
    fn one_entry_report() {
        let (t, d, v, e) = fixture();
        let r = build_report(&t, &d, &v, &e, protocol(), "abc").unwrap();
        assert_eq!(r.entries.len(), 1);
        let entry = &r.entries[0];
        assert!((entry.mean - d[0].mean()).abs() < 1e-7);
        assert_eq!(entry.class_name, "angry");
        assert!((entry.probe_accuracy_mean - 0.85).abs() < 1e-12);
        let again = build_report(&t, &d, &v, &e, protocol(), "abc").unwrap();
        assert_eq!(r.to_json().unwrap(), again.to_json().unwrap());
        assert_eq!(TcavReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn missing_triple_is_completeness_error() {
        let (mut t, d, v, e) = fixture();
        t.push(Triple {
            class_id: 4,
            ..t[0].clone()
        });
        assert!(matches!(
            build_report(&t, &d, &v, &e, protocol(), "abc"),
            Err(Error::Completeness(_))
        ));
        let dup = vec![t[0].clone(), t[0].clone()];
        assert!(matches!(
            build_report(&dup, &d, &v, &e, protocol(), "abc"),
            Err(Error::Completeness(_))
        ));
    }

    #[test]
    fn csv_and_svg() {
        let (t, d, v, e) = fixture();
        let mut r = build_report(&t, &d, &v, &e, protocol(), "abc").unwrap();
        let csv = report_csv(&r).unwrap();
        assert_eq!(csv.lines().count(), 2);
        r.entries[0].star = true;
        let svgs = render_svg(&r);
        assert_eq!(svgs.len(), 1);
        assert!(svgs[0].1.contains(">*</text>"));
    }
}
