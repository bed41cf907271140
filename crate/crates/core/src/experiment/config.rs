use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::density::{BandwidthRule, Covariate};
use crate::error::{Error, Result};
use crate::estimation::{B1Config, BinCovariates, BinSpec};
use crate::l96::{steps_for, L96Params, DEFAULT_DT, DEFAULT_TRANSIENT_MTU};
use crate::lm::LmOptions;
use crate::observation::ObservationOperator;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStudy {
    Case1,
    Case2,
    /// Case 1 defaults with every field open to override.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    B1,
    B2,
    Sumsq,
    /// No error model: the bare single-scale forecast.
    None,
}

impl Method {
    pub const TRAINABLE: [Method; 4] = [Method::Proposed, Method::B2, Method::Sumsq, Method::B1];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::B1 => "b1",
            Method::B2 => "b2",
            Method::Sumsq => "sumsq",
            Method::None => "none",
        }
    }

    /// Methods whose error sets feed a conditional density.
    pub fn uses_kde(self) -> bool {
        matches!(self, Method::Proposed | Method::B2 | Method::Sumsq)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "proposed" => Ok(Method::Proposed),
            "b1" => Ok(Method::B1),
            "b2" => Ok(Method::B2),
            "sumsq" => Ok(Method::Sumsq),
            "none" => Ok(Method::None),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected proposed, b1, b2, sumsq or none"
            ))),
        }
    }
}

/// Parses a comma-separated method list, dropping duplicates.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Method = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty method list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsConfig {
    pub interval_mtu: f64,
    /// 1-based grid indices.
    pub observed_indices: Vec<usize>,
    pub r_diag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct B1EnsembleConfig {
    pub size: usize,
    /// Std of the initial perturbations around the first truth state.
    pub initial_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub length_mtu: f64,
    pub transient_mtu: f64,
    pub tau: usize,
    pub n_bins: usize,
    pub bin_covariates: BinCovariates,
    pub lm: LmOptions,
    /// Methods run by `train` when none are given on the command line.
    pub methods: Vec<Method>,
    /// Model-error covariance for B2; the true-error sample covariance when
    /// absent.
    pub q_override: Option<Vec<Vec<f64>>>,
    pub b1: B1Config,
    pub b1_ensemble: B1EnsembleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub thin_interval_mtu: f64,
    pub bandwidth_rule: BandwidthRule,
    pub outlier_quantile: f64,
    pub covariate_set: Vec<Covariate>,
    pub kld_points_per_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssimilationConfig {
    pub n_runs: usize,
    pub run_length_obs_intervals: usize,
    pub ensemble_size: usize,
    pub initial_condition_spacing_mtu: f64,
    pub method: Method,
    pub lead_times_obs_intervals: Vec<usize>,
    /// Free forecasts are launched from every this-many-th analysis.
    pub forecast_every_obs_intervals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub climatology_obs_intervals: usize,
    pub max_lag_obs_intervals: usize,
    pub pdf_points: usize,
    pub spread_error_bins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub truth: u64,
    pub obs: u64,
    pub ensemble: u64,
    pub sampler: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub case_study: CaseStudy,
    pub l96: L96Params,
    pub dt: f64,
    pub obs: ObsConfig,
    pub training: TrainingConfig,
    pub density: DensityConfig,
    pub assimilation: AssimilationConfig,
    pub evaluation: EvaluationConfig,
    pub seeds: Seeds,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    pub fn defaults(case: CaseStudy) -> Self {
        let case2 = case == CaseStudy::Case2;
        let (l96, interval, observed, tau, n_bins, bin_cov, covs, outliers) = if case2 {
            (
                L96Params::case2(),
                0.04,
                vec![1, 2, 5, 6],
                50,
                5,
                BinCovariates::XPrevPair,
                vec![Covariate::XPrevK, Covariate::XPrevKm1, Covariate::EtaPrevK],
                0.005,
            )
        } else {
            (
                L96Params::case1(),
                0.02,
                vec![3, 4, 8, 9],
                25,
                8,
                BinCovariates::XPrev,
                vec![Covariate::XPrevK],
                0.0,
            )
        };
        Self {
            schema_version: SCHEMA_VERSION,
            case_study: case,
            l96,
            dt: DEFAULT_DT,
            obs: ObsConfig {
                interval_mtu: interval,
                r_diag: vec![1e-6; observed.len()],
                observed_indices: observed,
            },
            training: TrainingConfig {
                length_mtu: 820.0,
                transient_mtu: DEFAULT_TRANSIENT_MTU,
                tau,
                n_bins,
                bin_covariates: bin_cov,
                lm: LmOptions::default(),
                methods: vec![Method::Proposed, Method::B2, Method::B1],
                q_override: None,
                b1: B1Config::default(),
                b1_ensemble: B1EnsembleConfig {
                    size: 100,
                    initial_spread: 0.1,
                },
            },
            density: DensityConfig {
                thin_interval_mtu: if case2 { 0.32 } else { 0.3 },
                bandwidth_rule: BandwidthRule::NormalReference,
                outlier_quantile: outliers,
                covariate_set: covs,
                kld_points_per_dim: 60,
            },
            assimilation: AssimilationConfig {
                n_runs: 30,
                run_length_obs_intervals: 100,
                ensemble_size: 1000,
                initial_condition_spacing_mtu: 10.0,
                method: Method::Proposed,
                lead_times_obs_intervals: vec![1, 5, 15, 30],
                forecast_every_obs_intervals: 5,
            },
            evaluation: EvaluationConfig {
                climatology_obs_intervals: 100_000,
                max_lag_obs_intervals: 250,
                pdf_points: 200,
                spread_error_bins: 10,
            },
            seeds: Seeds {
                truth: 1,
                obs: 2,
                ensemble: 3,
                sampler: 4,
            },
        }
    }

    /// Parses a config file body: the case defaults overlaid with whatever
    /// the file sets.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)?;
        let Value::Object(map) = &user else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        match map.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "unsupported schema_version {v}; this build reads version {SCHEMA_VERSION}"
                )))
            }
            None => return Err(Error::Config("config needs an integer schema_version".into())),
        }
        let case: CaseStudy = match map.get("case_study") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Config("config needs case_study".into())),
        };
        let mut base = serde_json::to_value(Self::defaults(case))?;
        merge(&mut base, user);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies `role=value` to the seeds.
    pub fn apply_seed_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("seed override {spec:?} is not key=value")))?;
        let v: u64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("seed override {spec:?} needs an unsigned integer")))?;
        match k.trim() {
            "truth" => self.seeds.truth = v,
            "obs" => self.seeds.obs = v,
            "ensemble" => self.seeds.ensemble = v,
            "sampler" => self.seeds.sampler = v,
            other => {
                return Err(Error::Config(format!(
                    "unknown seed role {other:?}; expected truth, obs, ensemble or sampler"
                )))
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    fn intervals(&self, mtu: f64, what: &str) -> Result<usize> {
        let n = mtu / self.obs.interval_mtu;
        let r = n.round();
        if !(mtu >= 0.0) || (n - r).abs() > 1e-6 * r.max(1.0) {
            return Err(Error::Config(format!(
                "{what} = {mtu} MTU is not a multiple of the observation interval {}",
                self.obs.interval_mtu
            )));
        }
        Ok(r as usize)
    }

    pub fn steps_per_interval(&self) -> Result<usize> {
        steps_for(self.obs.interval_mtu, self.dt)
    }

    pub fn transient_steps(&self) -> Result<usize> {
        steps_for(self.training.transient_mtu, self.dt)
    }

    /// Observation intervals in the training period.
    pub fn training_intervals(&self) -> Result<usize> {
        self.intervals(self.training.length_mtu, "training.length_mtu")
    }

    pub fn spacing_intervals(&self) -> Result<usize> {
        self.intervals(self.assimilation.initial_condition_spacing_mtu, "assimilation.initial_condition_spacing_mtu")
    }

    pub fn thin_intervals(&self) -> Result<usize> {
        self.intervals(self.density.thin_interval_mtu, "density.thin_interval_mtu")
    }

    pub fn max_lead(&self) -> usize {
        self.assimilation.lead_times_obs_intervals.iter().copied().max().unwrap_or(0)
    }

    /// Truth records needed by the assimilation campaign.
    pub fn assimilation_records(&self) -> Result<usize> {
        let a = &self.assimilation;
        Ok((a.n_runs - 1) * self.spacing_intervals()? + a.run_length_obs_intervals + self.max_lead() + 1)
    }

    pub fn observation_operator(&self) -> Result<ObservationOperator> {
        ObservationOperator::from_one_based(&self.obs.observed_indices, self.l96.n_x)
    }

    pub fn bin_spec(&self) -> BinSpec {
        BinSpec {
            covariates: self.training.bin_covariates,
            n_bins: self.training.n_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        self.l96.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        self.steps_per_interval()?;
        self.transient_steps()?;
        if self.obs.observed_indices.windows(2).any(|w| w[0] >= w[1]) {
            return bad("obs.observed_indices must be strictly increasing".into());
        }
        let h = self.observation_operator()?;
        if self.obs.r_diag.len() != h.n_y() {
            return bad(format!(
                "obs.r_diag has {} entries for {} observed indices",
                self.obs.r_diag.len(),
                h.n_y()
            ));
        }
        if let Some(r) = self.obs.r_diag.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return bad(format!("obs.r_diag entries must be positive, got {r}"));
        }

        let t = &self.training;
        let n_train = self.training_intervals()?;
        if t.tau == 0 || t.tau >= n_train {
            return bad(format!(
                "training.tau = {} must be positive and below the {n_train} training intervals",
                t.tau
            ));
        }
        self.bin_spec().validate()?;
        t.lm.validate()?;
        t.b1.validate()?;
        if t.b1_ensemble.size < 2 || !(t.b1_ensemble.initial_spread >= 0.0) {
            return bad("training.b1_ensemble needs size >= 2 and a non-negative spread".into());
        }
        if t.methods.contains(&Method::None) {
            return bad("training.methods cannot include none".into());
        }
        if let Some(q) = &t.q_override {
            if q.len() != self.l96.n_x || q.iter().any(|row| row.len() != self.l96.n_x) {
                return bad(format!("training.q_override must be {0} x {0}", self.l96.n_x));
            }
        }

        let d = &self.density;
        if self.thin_intervals()? == 0 {
            return bad("density.thin_interval_mtu must be positive".into());
        }
        if !(0.0..0.5).contains(&d.outlier_quantile) {
            return bad(format!("density.outlier_quantile must be in [0, 0.5), got {}", d.outlier_quantile));
        }
        if d.covariate_set.is_empty() {
            return bad("density.covariate_set must be non-empty".into());
        }
        for (i, c) in d.covariate_set.iter().enumerate() {
            if d.covariate_set[..i].contains(c) {
                return bad(format!("density.covariate_set repeats {}", c.name()));
            }
        }
        if d.kld_points_per_dim < 2 {
            return bad("density.kld_points_per_dim must be at least 2".into());
        }

        let a = &self.assimilation;
        if a.n_runs == 0 || a.run_length_obs_intervals == 0 {
            return bad("assimilation needs at least one run of at least one cycle".into());
        }
        if a.ensemble_size < 2 {
            return bad("assimilation.ensemble_size must be at least 2".into());
        }
        if a.lead_times_obs_intervals.is_empty() || a.lead_times_obs_intervals.contains(&0) {
            return bad("assimilation.lead_times_obs_intervals must be non-empty and positive".into());
        }
        if a.forecast_every_obs_intervals == 0 {
            return bad("assimilation.forecast_every_obs_intervals must be positive".into());
        }
        self.spacing_intervals()?;

        let e = &self.evaluation;
        if e.climatology_obs_intervals < 1000 {
            return bad("evaluation.climatology_obs_intervals must be at least 1000".into());
        }
        if e.max_lag_obs_intervals >= e.climatology_obs_intervals {
            return bad("evaluation.max_lag_obs_intervals must be below the climatology length".into());
        }
        if e.pdf_points < 2 || e.spread_error_bins == 0 {
            return bad("evaluation needs pdf_points >= 2 and spread_error_bins >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_defaults_resolve() {
        let c1 = ExperimentConfig::from_json_str(r#"{"schema_version": 1, "case_study": "case1"}"#).unwrap();
        assert_eq!(c1.l96, L96Params::case1());
        assert_eq!(c1.obs.observed_indices, vec![3, 4, 8, 9]);
        assert_eq!(c1.training.tau, 25);
        assert_eq!(c1.density.covariate_set, vec![Covariate::XPrevK]);
        assert_eq!(c1.steps_per_interval().unwrap(), 25);

        let c2 = ExperimentConfig::from_json_str(r#"{"schema_version": 1, "case_study": "case2"}"#).unwrap();
        assert_eq!(c2.l96, L96Params::case2());
        assert_eq!(c2.obs.interval_mtu, 0.04);
        assert_eq!(c2.obs.observed_indices, vec![1, 2, 5, 6]);
        assert_eq!(c2.training.tau, 50);
        assert_eq!(c2.training.bin_covariates, BinCovariates::XPrevPair);
        assert_eq!(c2.density.covariate_set.len(), 3);
    }

    #[test]
    fn overrides_merge_into_defaults() {
        let text = r#"{"schema_version": 1, "case_study": "case1",
            "training": {"length_mtu": 5.0, "lm": {"max_iterations": 7}},
            "l96": {"h_x": 0.0}}"#;
        let c = ExperimentConfig::from_json_str(text).unwrap();
        assert_eq!(c.training.length_mtu, 5.0);
        assert_eq!(c.training.lm.max_iterations, 7);
        assert_eq!(c.training.lm.initial_damping, 1e-3);
        assert_eq!(c.training.tau, 25);
        assert_eq!(c.l96.h_x, 0.0);
        assert_eq!(c.l96.n_z, 128);
        assert_eq!(c.training_intervals().unwrap(), 250);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let cases = [
            r#"{"schema_version": 2, "case_study": "case1"}"#,
            r#"{"case_study": "case1"}"#,
            r#"{"schema_version": 1, "case_study": "case1", "training": {"length_mtu": 0.5}}"#,
            r#"{"schema_version": 1, "case_study": "case1", "obs": {"observed_indices": [3, 10], "r_diag": [1e-6, 1e-6]}}"#,
            r#"{"schema_version": 1, "case_study": "case1", "obs": {"r_diag": [1e-6, 0.0, 1e-6, 1e-6]}}"#,
            r#"{"schema_version": 1, "case_study": "case1", "obs": {"r_diag": [1e-6]}}"#,
            r#"{"schema_version": 1, "case_study": "case1", "bogus": 1}"#,
            r#"{"schema_version": 1, "case_study": "case1", "density": {"thin_interval_mtu": 0.31}}"#,
        ];
        for text in cases {
            assert!(ExperimentConfig::from_json_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn seed_overrides() {
        let mut c = ExperimentConfig::defaults(CaseStudy::Case1);
        let before = c.sha256().unwrap();
        c.apply_seed_override("truth=99").unwrap();
        assert_eq!(c.seeds.truth, 99);
        assert_ne!(before, c.sha256().unwrap());
        assert!(c.apply_seed_override("noise=1").is_err());
        assert!(c.apply_seed_override("obs=-1").is_err());
        assert!(c.apply_seed_override("obs").is_err());
    }

    #[test]
    fn method_lists() {
        assert_eq!(parse_methods("proposed,b1,b2,b1").unwrap(), vec![Method::Proposed, Method::B1, Method::B2]);
        assert!(parse_methods("proposed,b3").is_err());
        assert!(parse_methods("").is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::defaults(CaseStudy::Case2);
        let back = ExperimentConfig::from_json_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, back);
    }
}
