//! Stage-by-stage run driver. Every stage reads its inputs from and writes
//! its outputs to one directory:
//!
//! | stage          | reads                               | writes                                  |
//! |----------------|-------------------------------------|-----------------------------------------|
//! | generate       | config                              | `train.mmer`, `test.mmer`               |
//! | train          | `train.mmer`, `test.mmer`           | `model.bclc`, `train_log.json`          |
//! | build-concepts | `train.mmer`                        | `concepts/<name>.json`                  |
//! | train-cavs     | model, `train.mmer`, concepts       | `cavs/*.json`                           |
//! | score          | model, `test.mmer`, CAVs            | `scores.json`                           |
//! | significance   | `scores.json`                       | `verdicts.json`                         |
//! | report         | scores, verdicts, CAVs              | `report.json`, `report.csv`, `report_*.svg` |
//!
//! `manifest.json` records the config hash and a SHA-256 of each artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cav::{random_cavs_on, random_concepts, train_ensemble_on, with_jobs, CavEnsemble};
use crate::concepts::{build_concept, ConceptSet};
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::net::{self, BcLstmModel, BottleneckId, EpochRecord};
use crate::seed::{derive, name_hash};
use crate::synth::{self, ConversationBatch, PlantedSpec, CLASS_COUNT};
use crate::tcav::{
    build_report, class_gradients_at, render_svg, report_csv, score_distribution_from,
    significance, ScoreDistribution, SignificanceVerdict, TcavReport, Triple,
};

pub const TRAIN_ARCHIVE: &str = "train.mmer";
pub const TEST_ARCHIVE: &str = "test.mmer";
pub const CHECKPOINT: &str = "model.bclc";
pub const TRAIN_LOG: &str = "train_log.json";
pub const CONCEPT_DIR: &str = "concepts";
pub const CAV_DIR: &str = "cavs";
pub const RANDOM_CONCEPTS: &str = "cavs/random_concepts.json";
pub const SCORES: &str = "scores.json";
pub const VERDICTS: &str = "verdicts.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub records: Vec<EpochRecord>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub config_hash: String,
    pub proposed: Vec<ScoreDistribution>,
    pub random: Vec<ScoreDistribution>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictsFile {
    pub config_hash: String,
    pub verdicts: Vec<SignificanceVerdict>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: String,
    pub config_hash: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub out: PathBuf,
    /// Allows `train` to replace an existing checkpoint.
    pub force: bool,
    hash: String,
}

impl Pipeline {
    /// Validates `config`; artifacts go to `config.out_dir`.
    pub fn new(config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let hash = config.hash()?;
        Ok(Pipeline {
            out: config.out_dir.clone(),
            config,
            force,
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        derive(self.config.seed, &[name_hash(stage)])
    }

    fn ensure_dir(&self, rel: &str) -> Result<()> {
        let dir = self.path(rel);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir, e))
    }

    fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                hint: format!("run `emotcav {producer}` first"),
            })
        }
    }

    fn write(&self, stage: &str, rel: &str, bytes: &[u8], manifest: &mut Manifest) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        manifest.artifacts.insert(
            rel.to_string(),
            ArtifactRecord {
                stage: stage.to_string(),
                config_hash: self.hash.clone(),
                sha256: hex::encode(Sha256::digest(bytes)),
            },
        );
        Ok(())
    }

    fn write_json<T: Serialize>(
        &self,
        stage: &str,
        rel: &str,
        value: &T,
        manifest: &mut Manifest,
    ) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(stage, rel, text.as_bytes(), manifest)
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str, producer: &str) -> Result<T> {
        let p = self.require(rel, producer)?;
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn manifest(&self) -> Result<Manifest> {
        let p = self.path(MANIFEST);
        if !p.is_file() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save_manifest(&self, manifest: &Manifest) -> Result<()> {
        let p = self.path(MANIFEST);
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    }

    fn stage<T>(&self, f: impl FnOnce(&mut Manifest) -> Result<T>) -> Result<T> {
        self.ensure_dir("")?;
        let mut manifest = self.manifest()?;
        let out = f(&mut manifest)?;
        self.save_manifest(&manifest)?;
        Ok(out)
    }

    fn load_batch(&self, rel: &str) -> Result<ConversationBatch> {
        synth::import_features(&self.require(rel, "generate")?)
    }

    fn load_model(&self) -> Result<BcLstmModel> {
        net::load_checkpoint(&self.require(CHECKPOINT, "train")?)
    }

    /// Synthesizes or imports the data and splits it by video.
    pub fn generate(&self) -> Result<(ConversationBatch, ConversationBatch)> {
        let d = &self.config.data;
        let full = match d.source {
            DataSource::Synthetic => {
                let mut spec = PlantedSpec::default_with_seed(self.stage_seed("data"));
                spec.noise = d.noise;
                synth::generate(&spec, d.n_videos, d.t_max)?
            }
            DataSource::Archive => {
                let path = d
                    .archive
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.archive is not set".into()))?;
                synth::import_features(path)?
            }
        };
        let (train, test) = full.split_videos(d.train_fraction, self.stage_seed("split"))?;
        self.stage(|m| {
            self.write(
                "generate",
                TRAIN_ARCHIVE,
                &synth::write_features(&train)?,
                m,
            )?;
            self.write("generate", TEST_ARCHIVE, &synth::write_features(&test)?, m)
        })?;
        Ok((train, test))
    }

    /// Trains unimodal branches, then fusion. Refuses to replace an existing
    /// checkpoint unless forced.
    pub fn train(&self) -> Result<TrainSummary> {
        let ckpt = self.path(CHECKPOINT);
        if ckpt.exists() && !self.force {
            return Err(Error::Overwrite(ckpt));
        }
        let train = self.load_batch(TRAIN_ARCHIVE)?;
        let test = self.load_batch(TEST_ARCHIVE)?;
        let mut model = BcLstmModel::new(
            self.config.model.model_config(&train),
            self.stage_seed("model"),
        )?;
        let mut cfg = self.config.train.clone();
        cfg.seed = derive(self.config.seed, &[name_hash("train"), cfg.seed]);
        let log = net::train(&mut model, &train, &cfg)?;
        let summary = TrainSummary {
            config_hash: self.hash.clone(),
            records: log.records,
            train_accuracy: model.accuracy(&train)?,
            test_accuracy: model.accuracy(&test)?,
        };
        self.stage(|m| {
            self.write("train", CHECKPOINT, &net::write_checkpoint(&model)?, m)?;
            self.write_json("train", TRAIN_LOG, &summary, m)
        })?;
        Ok(summary)
    }

    fn concept_rel(name: &str) -> String {
        format!("{CONCEPT_DIR}/{name}.json")
    }

    fn cav_rel(concept: &str, l: &BottleneckId) -> String {
        format!("{CAV_DIR}/{concept}__{}.json", l.slug())
    }

    fn random_cav_rel(l: &BottleneckId) -> String {
        format!("{CAV_DIR}/random__{}.json", l.slug())
    }

    /// Labels every configured concept on the training split.
    pub fn build_concepts(&self) -> Result<Vec<ConceptSet>> {
        let train = self.load_batch(TRAIN_ARCHIVE)?;
        let sets = self
            .config
            .concepts
            .iter()
            .map(|c| {
                train.modality(&c.modality)?;
                let set = build_concept(&train, &c.name, &c.rule)?;
                set.ensure_trainable()?;
                Ok(set)
            })
            .collect::<Result<Vec<_>>>()?;
        self.stage(|m| {
            for s in &sets {
                self.write_json("build-concepts", &Self::concept_rel(&s.name), s, m)?;
            }
            Ok(())
        })?;
        Ok(sets)
    }

    fn load_concepts(&self) -> Result<Vec<ConceptSet>> {
        self.config
            .concepts
            .iter()
            .map(|c| self.read_json(&Self::concept_rel(&c.name), "build-concepts"))
            .collect()
    }

    /// Proposed ensembles for every (concept, bottleneck) pair and random
    /// ensembles for every bottleneck in use, all on training activations.
    pub fn train_cavs(&self) -> Result<(Vec<CavEnsemble>, Vec<CavEnsemble>)> {
        let model = self.load_model()?;
        let train = self.load_batch(TRAIN_ARCHIVE)?;
        let concepts = self.load_concepts()?;
        let p = &self.config.protocol;
        let seed = self.stage_seed("cavs");
        let randoms = random_concepts(
            &train.mask,
            p.random_concepts,
            p.random_set_size,
            self.stage_seed("random"),
        )?;
        let (proposed, random) = with_jobs(self.config.jobs, || -> Result<_> {
            let mut proposed = Vec::new();
            let mut random = Vec::new();
            for l in self.config.all_bottlenecks() {
                let acts = model.activations(&train, &l)?;
                for (spec, set) in self.config.concepts.iter().zip(&concepts) {
                    if self.config.bottlenecks_for(spec).contains(&l) {
                        proposed.push(train_ensemble_on(
                            &acts,
                            set,
                            &l,
                            p.repetitions,
                            seed,
                            &self.config.probe,
                        )?);
                    }
                }
                random.push(random_cavs_on(
                    &acts,
                    &randoms,
                    &l,
                    p.repetitions,
                    seed,
                    &self.config.probe,
                )?);
            }
            Ok((proposed, random))
        })??;
        self.stage(|m| {
            self.write_json("train-cavs", RANDOM_CONCEPTS, &randoms, m)?;
            for e in &proposed {
                self.write_json(
                    "train-cavs",
                    &Self::cav_rel(&e.concept, &e.bottleneck),
                    e,
                    m,
                )?;
            }
            for set in &random {
                let l = &set[0].bottleneck;
                self.write_json("train-cavs", &Self::random_cav_rel(l), set, m)?;
            }
            Ok(())
        })?;
        Ok((proposed, random.into_iter().flatten().collect()))
    }

    fn load_proposed(&self) -> Result<Vec<CavEnsemble>> {
        let mut out = Vec::new();
        for c in &self.config.concepts {
            for l in self.config.bottlenecks_for(c) {
                out.push(self.read_json(&Self::cav_rel(&c.name, &l), "train-cavs")?);
            }
        }
        Ok(out)
    }

    /// Score distributions of every ensemble for every class on the test
    /// split.
    pub fn score(&self) -> Result<ScoresFile> {
        let model = self.load_model()?;
        let test = self.load_batch(TEST_ARCHIVE)?;
        let proposed_ens = self.load_proposed()?;
        let mut proposed = Vec::new();
        let mut random = Vec::new();
        with_jobs(self.config.jobs, || -> Result<()> {
            for l in self.config.all_bottlenecks() {
                let randoms: Vec<CavEnsemble> =
                    self.read_json(&Self::random_cav_rel(&l), "train-cavs")?;
                let acts = model.activations(&test, &l)?;
                for k in 0..CLASS_COUNT.min(model.class_count()) {
                    let grads = class_gradients_at(&model, &test, &acts, k, &l)?;
                    for e in proposed_ens.iter().filter(|e| e.bottleneck == l) {
                        proposed.push(score_distribution_from(&grads, k, e)?);
                    }
                    for e in &randoms {
                        random.push(score_distribution_from(&grads, k, e)?);
                    }
                }
            }
            Ok(())
        })??;
        let scores = ScoresFile {
            config_hash: self.hash.clone(),
            proposed,
            random,
        };
        self.stage(|m| self.write_json("tcav", SCORES, &scores, m))?;
        Ok(scores)
    }

    /// Tests each proposed distribution against the random distributions of
    /// the same class and bottleneck.
    pub fn significance(&self) -> Result<VerdictsFile> {
        let scores: ScoresFile = self.read_json(SCORES, "tcav")?;
        let mut by_key: BTreeMap<(usize, &BottleneckId), Vec<ScoreDistribution>> = BTreeMap::new();
        for r in &scores.random {
            by_key
                .entry((r.class_id, &r.bottleneck))
                .or_default()
                .push(r.clone());
        }
        let verdicts = scores
            .proposed
            .iter()
            .map(|d| {
                let randoms = by_key
                    .get(&(d.class_id, &d.bottleneck))
                    .map_or(&[][..], Vec::as_slice);
                significance(d, randoms, self.config.protocol.alpha)
            })
            .collect::<Result<Vec<_>>>()?;
        let file = VerdictsFile {
            config_hash: self.hash.clone(),
            verdicts,
        };
        self.stage(|m| self.write_json("significance", VERDICTS, &file, m))?;
        Ok(file)
    }

    /// One entry per (concept, bottleneck, class) in config order.
    pub fn report(&self) -> Result<TcavReport> {
        let scores: ScoresFile = self.read_json(SCORES, "tcav")?;
        let verdicts: VerdictsFile = self.read_json(VERDICTS, "significance")?;
        let ensembles = self.load_proposed()?;
        let requested: Vec<Triple> = self
            .config
            .concepts
            .iter()
            .flat_map(|c| {
                self.config
                    .bottlenecks_for(c)
                    .into_iter()
                    .flat_map(move |l| {
                        (0..CLASS_COUNT).map(move |k| Triple {
                            concept: c.name.clone(),
                            class_id: k,
                            bottleneck: l.clone(),
                        })
                    })
            })
            .collect();
        let report = build_report(
            &requested,
            &scores.proposed,
            &verdicts.verdicts,
            &ensembles,
            self.config.protocol.protocol(),
            &self.hash,
        )?;
        self.stage(|m| {
            self.write("report", REPORT_JSON, report.to_json()?.as_bytes(), m)?;
            self.write("report", REPORT_CSV, report_csv(&report)?.as_bytes(), m)?;
            for (level, svg) in render_svg(&report) {
                self.write("report", &format!("report_{level}.svg"), svg.as_bytes(), m)?;
            }
            Ok(())
        })?;
        Ok(report)
    }

    /// Everything downstream of the checkpoint.
    pub fn tcav(&self) -> Result<TcavReport> {
        self.build_concepts()?;
        self.train_cavs()?;
        self.score()?;
        self.significance()?;
        self.report()
    }

    pub fn run_all(&self) -> Result<TcavReport> {
        self.generate()?;
        self.train()?;
        self.tcav()
    }
}

/// Loads the artifact manifest of an output directory.
pub fn read_manifest(out: &Path) -> Result<Manifest> {
    let p = out.join(MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(out: &Path) -> RunConfig {
        let mut c = RunConfig {
            out_dir: out.to_path_buf(),
            ..RunConfig::default()
        };
        c.data.n_videos = 12;
        c.data.t_max = 12;
        c.train.epochs = 2;
        c.protocol.repetitions = 2;
        c.protocol.random_concepts = 2;
        c.protocol.random_set_size = 40;
        c.probe.steps = 20;
        c.probe.min_train_per_class = 2;
        c
    }

    #[test]
    fn stages_demand_their_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small(dir.path()), false).unwrap();
        assert!(matches!(p.train(), Err(Error::MissingArtifact { .. })));
        assert!(matches!(p.score(), Err(Error::MissingArtifact { .. })));
        assert!(matches!(
            p.significance(),
            Err(Error::MissingArtifact { .. })
        ));
    }

    #[test]
    fn small_run_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small(dir.path()), false).unwrap();
        let report = p.run_all().unwrap();
        assert_eq!(report.entries.len(), 36);
        assert!(matches!(p.train(), Err(Error::Overwrite(_))));
        let manifest = read_manifest(dir.path()).unwrap();
        assert!(manifest.artifacts.contains_key(REPORT_JSON));
        assert!(manifest
            .artifacts
            .values()
            .all(|a| a.config_hash == p.config_hash()));
        let again = p.significance().unwrap();
        assert_eq!(again.verdicts.len(), 36);
    }
}
