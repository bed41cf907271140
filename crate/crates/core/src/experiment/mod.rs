//! Batch experiments: generate truth and observations, train the error
//! estimators, run assimilation campaigns and score them. The four stages
//! share one artifact directory.

mod assimilate;
mod config;
mod evaluate;
mod generate;
mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::l96::StateVector;
use crate::observation::{ObservationOperator, ObservationRecord};
use crate::rng::stream_rng;

pub use assimilate::{cmd_assimilate, AssimilateSummary, ForecastRecord, MethodCampaign};
pub use config::{
    parse_methods, AssimilationConfig, B1EnsembleConfig, CaseStudy, DensityConfig, EvaluationConfig, ExperimentConfig,
    Method, ObsConfig, Seeds, TrainingConfig, SCHEMA_VERSION,
};
pub use evaluate::{cmd_evaluate, skill_by_run, EvaluateSummary, LeadScore, SkillRow};
pub use generate::{cmd_generate, GenerateSummary};
pub use train::{cmd_train, MethodTraining, TrainSummary};

/// File names inside an artifact directory.
pub mod files {
    use super::Method;

    pub const CONFIG: &str = "config.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const TRUTH_TRAINING: &str = "truth_training.csv";
    pub const OBS_TRAINING: &str = "observations_training.csv";
    pub const TRUTH_ASSIMILATION: &str = "truth_assimilation.csv";
    pub const OBS_ASSIMILATION: &str = "observations_assimilation.csv";
    pub const TRUTH_CLIMATOLOGY: &str = "truth_climatology.csv";
    pub const ERRORS_TRUTH: &str = "errors_truth.csv";
    pub const INCREMENT_STATS_B1: &str = "increment_stats_b1.json";
    pub const B1_TUNING: &str = "b1_tuning.csv";
    pub const KLD: &str = "kld.csv";
    pub const LEAD_SCORES: &str = "lead_scores.csv";
    pub const SKILL_SCORES: &str = "skill_scores.csv";
    pub const CLIMATOLOGY_KS: &str = "climatology_ks.csv";

    pub fn errors(m: Method) -> String {
        format!("errors_{m}.csv")
    }

    pub fn windows(m: Method) -> String {
        format!("windows_{m}.csv")
    }

    pub fn density(m: Method) -> String {
        format!("density_{m}.json")
    }

    pub fn density_curves(m: Method) -> String {
        format!("density_curves_{m}.csv")
    }

    pub fn filter(m: Method) -> String {
        format!("filter_{m}.csv")
    }

    pub fn forecasts(m: Method) -> String {
        format!("forecasts_{m}.csv")
    }

    pub fn scores(m: Method) -> String {
        format!("scores_{m}.csv")
    }

    pub fn spread_error(m: Method, lead: usize) -> String {
        format!("spread_error_{m}_lead{lead}.csv")
    }

    pub fn climatology_acf(name: &str) -> String {
        format!("climatology_{name}_acf.csv")
    }

    pub fn climatology_pdf(name: &str) -> String {
        format!("climatology_{name}_pdf.csv")
    }
}

/// Named random streams. Every role has its own seed; stream numbers keep
/// uses within a role apart.
pub(crate) mod streams {
    pub const TRUTH_INIT: u64 = 0;
    pub const OBS_TRAINING: u64 = 0;
    pub const OBS_ASSIMILATION: u64 = 1;
    pub const ENSEMBLE_B1: u64 = 0;
    pub const SAMPLER_B1_TUNING: u64 = 0;
    pub const SAMPLER_B1_DRAWS: u64 = 1;
    pub const SAMPLER_CLIMATOLOGY: u64 = 2;
    pub const SAMPLER_FILTER_BASE: u64 = 10_000;
    pub const SAMPLER_FORECAST_BASE: u64 = 20_000;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    stream_rng(seed, stream)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub ok: bool,
    pub message: Option<String>,
    pub outputs: Vec<String>,
}

impl Outcome {
    pub fn ok(outputs: Vec<String>) -> Self {
        Self {
            ok: true,
            message: None,
            outputs,
        }
    }

    pub fn failed(message: String, outputs: Vec<String>) -> Self {
        Self {
            ok: false,
            message: Some(message),
            outputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_sha256: String,
    /// Hash of the settings that determine the generated data.
    pub data_key: String,
    pub outcomes: BTreeMap<String, Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    /// Config of the most recent stage.
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub stages: BTreeMap<String, StageRecord>,
    pub files: BTreeMap<String, FileRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn data_key(cfg: &ExperimentConfig) -> Result<String> {
    let key = serde_json::json!({
        "l96": cfg.l96,
        "dt": cfg.dt,
        "obs": cfg.obs,
        "training_length_mtu": cfg.training.length_mtu,
        "transient_mtu": cfg.training.transient_mtu,
        "truth_seed": cfg.seeds.truth,
        "obs_seed": cfg.seeds.obs,
    });
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&key)?)))
}

/// An artifact directory plus the manifest being updated by one stage.
pub(crate) struct ArtifactDir {
    root: PathBuf,
    manifest: Option<Manifest>,
}

impl ArtifactDir {
    pub(crate) fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mpath = root.join(files::MANIFEST);
        let manifest = if mpath.exists() { Some(Manifest::read(&mpath)?) } else { None };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub(crate) fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an input that an earlier stage must have written.
    pub(crate) fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingInput(format!("{} (run `{producer}` first)", p.display())))
        }
    }

    /// Fails if the data in this directory came from different settings.
    pub(crate) fn check_data_key(&self, cfg: &ExperimentConfig) -> Result<()> {
        let gen = self
            .manifest
            .as_ref()
            .and_then(|m| m.stages.get("generate"))
            .ok_or_else(|| Error::MissingInput(format!("{} has no generate stage (run `generate` first)", self.root.display())))?;
        if gen.data_key != data_key(cfg)? {
            return Err(Error::Config(format!(
                "{} was generated with different model, observation, training-length or seed settings; re-run generate",
                self.root.display()
            )));
        }
        Ok(())
    }

    /// Records the stage, hashes every file in the directory and writes the
    /// config echo and the manifest.
    pub(crate) fn finish(
        &mut self,
        cfg: &ExperimentConfig,
        stage: &str,
        outcomes: BTreeMap<String, Outcome>,
    ) -> Result<Manifest> {
        let cfg_hash = cfg.sha256()?;
        let cpath = self.path(files::CONFIG);
        std::fs::write(&cpath, cfg.to_json()?).map_err(|e| Error::io(&cpath, e))?;
        let mut stages = self.manifest.take().map(|m| m.stages).unwrap_or_default();
        let record = match stages.remove(stage) {
            Some(mut old) if old.config_sha256 == cfg_hash => {
                old.outcomes.extend(outcomes);
                old
            }
            _ => StageRecord {
                config_sha256: cfg_hash.clone(),
                data_key: data_key(cfg)?,
                outcomes,
            },
        };
        stages.insert(stage.to_string(), record);

        let mut names: Vec<String> = std::fs::read_dir(&self.root)
            .map_err(|e| Error::io(&self.root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n != files::MANIFEST)
            .collect();
        names.sort();
        let mut file_records = BTreeMap::new();
        for n in names {
            let p = self.path(&n);
            let bytes = std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
            file_records.insert(
                n,
                FileRecord {
                    sha256: sha256_file(&p)?,
                    bytes,
                },
            );
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg_hash,
            config: cfg.clone(),
            seeds: cfg.seeds,
            stages,
            files: file_records,
        };
        crate::io::write_json(&self.path(files::MANIFEST), &manifest)?;
        self.manifest = Some(manifest.clone());
        Ok(manifest)
    }
}

/// Writes `time_index, x_1..x_n` rows, the first with `first_index`.
pub fn write_states(path: &Path, states: &[StateVector], first_index: usize) -> Result<()> {
    let n = states.first().map_or(0, |s| s.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time_index".to_string()];
    header.extend((1..=n).map(|k| format!("x_{k}")));
    w.write_record(&header)?;
    for (j, s) in states.iter().enumerate() {
        let mut row = vec![(first_index + j).to_string()];
        row.extend(s.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, field: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("{}: bad number {field:?}", path.display())))
}

fn parse_usize(path: &Path, field: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("{}: bad index {field:?}", path.display())))
}

/// Reads a state file; returns the first time index and the states.
pub fn read_states(path: &Path) -> Result<(usize, Vec<StateVector>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    let mut rd = csv::Reader::from_path(path)?;
    let mut first = None;
    let mut out = Vec::new();
    for (j, rec) in rd.records().enumerate() {
        let rec = rec?;
        let idx = parse_usize(path, &rec[0])?;
        let start = *first.get_or_insert(idx);
        if idx != start + j {
            return Err(Error::Config(format!("{}: time indices are not consecutive", path.display())));
        }
        let v = rec.iter().skip(1).map(|f| parse_f64(path, f)).collect::<Result<Vec<_>>>()?;
        out.push(DVector::from_vec(v));
    }
    Ok((first.unwrap_or(0), out))
}

/// Writes `time_index, y_<k>...` rows with `k` the 1-based observed index.
pub fn write_observations(path: &Path, obs: &[ObservationRecord], h: &ObservationOperator) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time_index".to_string()];
    header.extend(h.one_based().iter().map(|k| format!("y_{k}")));
    w.write_record(&header)?;
    for o in obs {
        let mut row = vec![o.time_index.to_string()];
        row.extend(o.y.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_observations(path: &Path) -> Result<Vec<ObservationRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    let mut rd = csv::Reader::from_path(path)?;
    rd.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ObservationRecord {
                time_index: parse_usize(path, &rec[0])?,
                y: rec.iter().skip(1).map(|f| parse_f64(path, f)).collect::<Result<Vec<_>>>()?,
            })
        })
        .collect()
}
