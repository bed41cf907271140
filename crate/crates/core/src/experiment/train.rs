use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::density::{quantile_sorted, remove_covariate_outliers, thin_decorrelated, ConditionalKde, DensitySamples};
use crate::error::{Error, Result};
use crate::estimation::{
    estimate_errors, estimate_increment_stats_b1, sample_covariance, ErrorTrainingSet, WindowMethod,
};
use crate::etkf::{Ensemble, ErrorSampler};
use crate::io::{read_csv, write_csv};
use crate::l96::{SingleScaleModel, StateVector};
use crate::observation::{ObservationOperator, ObservationRecord};
use crate::verification::{kld, KldGrid};

use super::{files, read_observations, read_states, rng_for, streams, ArtifactDir, ExperimentConfig, Manifest, Method, Outcome};

#[derive(Debug, Clone, PartialEq)]
pub struct MethodTraining {
    pub method: Method,
    pub ok: bool,
    pub message: Option<String>,
    pub records: usize,
    pub max_abs_eta: f64,
    pub failed_windows: usize,
    /// Divergence of the method's joint error-state density from the true
    /// one.
    pub kld: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub methods: Vec<MethodTraining>,
    pub manifest: Manifest,
}

impl TrainSummary {
    pub fn get(&self, m: Method) -> Option<&MethodTraining> {
        self.methods.iter().find(|t| t.method == m)
    }
}

#[derive(Serialize, Deserialize)]
struct KldRow {
    method: Method,
    kld: f64,
    samples: usize,
}

#[derive(Serialize)]
struct TuningRow {
    parameter: &'static str,
    value: f64,
    score: Option<f64>,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a ArtifactDir,
    model: SingleScaleModel,
    h: ObservationOperator,
    truth: Vec<StateVector>,
    obs: Vec<ObservationRecord>,
    truth_set: ErrorTrainingSet,
    /// Thinned true-error samples before outlier removal.
    reference_raw: DensitySamples,
    reference: DensitySamples,
}

struct Trained {
    set: ErrorTrainingSet,
    samples: DensitySamples,
    outputs: Vec<String>,
}

/// Response plus at most the first two covariates, so that the joint
/// density stays within the KLD grid's dimension limit.
fn kld_points(s: &DensitySamples) -> (Vec<f64>, usize) {
    let keep = s.d.min(2);
    let mut out = Vec::with_capacity(s.len() * (keep + 1));
    for i in 0..s.len() {
        out.push(s.responses[i]);
        out.extend_from_slice(&s.covariate(i)[..keep]);
    }
    (out, keep + 1)
}

fn thin(cfg: &ExperimentConfig, set: &ErrorTrainingSet) -> Result<DensitySamples> {
    thin_decorrelated(set, cfg.density.thin_interval_mtu, cfg.obs.interval_mtu, &cfg.density.covariate_set)
}

impl Context<'_> {
    fn divergence(&self, samples: &DensitySamples) -> Result<f64> {
        let (p, dim) = kld_points(&self.reference);
        let (q, _) = kld_points(samples);
        let grid = KldGrid {
            points_per_dim: self.cfg.density.kld_points_per_dim,
            ..KldGrid::default()
        };
        kld(&p, &q, dim, &grid)
    }

    fn window_method(&self, m: Method) -> Result<WindowMethod> {
        Ok(match m {
            Method::Proposed => WindowMethod::ConditionalVariance(self.cfg.bin_spec()),
            Method::Sumsq => WindowMethod::SumSquares,
            Method::B2 => {
                let n = self.cfg.l96.n_x;
                let q = match &self.cfg.training.q_override {
                    Some(rows) => DMatrix::from_fn(n, n, |i, j| rows[i][j]),
                    None => {
                        let errs: Vec<DVector<f64>> =
                            self.truth_set.records.iter().map(|r| DVector::from_column_slice(&r.eta)).collect();
                        sample_covariance(&errs)?.1
                    }
                };
                WindowMethod::FourDVar {
                    q,
                    r_diag: self.cfg.obs.r_diag.clone(),
                }
            }
            Method::B1 | Method::None => unreachable!("not a window method"),
        })
    }

    fn train_window(&self, m: Method) -> Result<Trained> {
        let cfg = self.cfg;
        let method = self.window_method(m)?;
        let set = estimate_errors(
            &method,
            &self.obs,
            &self.truth[0],
            &self.model,
            &self.h,
            cfg.training.tau,
            &cfg.training.lm,
        )?;
        let mut outputs = vec![files::errors(m), files::windows(m)];
        set.write_csv(&self.dir.path(&files::errors(m)))?;
        write_csv(&self.dir.path(&files::windows(m)), &set.reports)?;

        let samples = remove_covariate_outliers(&thin(cfg, &set)?, cfg.density.outlier_quantile)?;
        let kde = ConditionalKde::fit(samples.clone(), cfg.density.bandwidth_rule)?
            .with_covariate_set(cfg.density.covariate_set.clone())?;
        kde.write_json(&self.dir.path(&files::density(m)))?;
        outputs.push(files::density(m));
        write_curves(&kde, &self.dir.path(&files::density_curves(m)))?;
        outputs.push(files::density_curves(m));
        Ok(Trained { set, samples, outputs })
    }

    fn train_b1(&self) -> Result<Trained> {
        let cfg = self.cfg;
        let t = &cfg.training;
        let e0 = Ensemble::around(
            &self.truth[0],
            t.b1_ensemble.size,
            t.b1_ensemble.initial_spread,
            &mut rng_for(cfg.seeds.ensemble, streams::ENSEMBLE_B1),
        )?;
        let est = estimate_increment_stats_b1(
            &self.obs,
            &self.model,
            &self.h,
            &cfg.obs.r_diag,
            &e0,
            &t.b1,
            &rng_for(cfg.seeds.sampler, streams::SAMPLER_B1_TUNING),
        )?;
        est.stats.write_json(&self.dir.path(files::INCREMENT_STATS_B1))?;
        est.training.write_csv(&self.dir.path(&files::errors(Method::B1)))?;
        let rows: Vec<TuningRow> = est
            .lambda_scores
            .iter()
            .map(|&(value, score)| TuningRow {
                parameter: "lambda",
                value,
                score,
            })
            .chain(est.alpha_scores.iter().map(|&(value, score)| TuningRow {
                parameter: "alpha",
                value,
                score,
            }))
            .collect();
        write_csv(&self.dir.path(files::B1_TUNING), &rows)?;

        // B1 ignores the state: its joint density is the Gaussian error
        // model paired with the true covariates.
        let sampler = est.stats.sampler()?;
        let n = cfg.l96.n_x;
        let raw = &self.reference_raw;
        let mut rng = rng_for(cfg.seeds.sampler, streams::SAMPLER_B1_DRAWS);
        let zeros = vec![0.0; n];
        let mut responses = Vec::with_capacity(raw.len());
        for _ in 0..raw.len() / n {
            let eta = sampler.sample(&zeros, &zeros, &mut rng)?;
            responses.extend(eta.iter());
        }
        let draws = DensitySamples::new(responses, raw.covariates.clone(), raw.d)?;
        let samples = remove_covariate_outliers(&draws, cfg.density.outlier_quantile)?;
        Ok(Trained {
            set: est.training,
            samples,
            outputs: vec![
                files::INCREMENT_STATS_B1.to_string(),
                files::errors(Method::B1),
                files::B1_TUNING.to_string(),
            ],
        })
    }
}

/// Conditional densities at the 10/50/90% points of the first covariate,
/// other covariates at their medians.
fn write_curves(kde: &ConditionalKde, path: &Path) -> Result<()> {
    let s = kde.samples();
    let d = s.d;
    let col = |j: usize| {
        let mut v: Vec<f64> = (0..s.len()).map(|i| s.covariates[i * d + j]).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let medians: Vec<f64> = (0..d).map(|j| quantile_sorted(&col(j), 0.5)).collect();
    let first = col(0);
    let points: Vec<Vec<f64>> = [0.1, 0.5, 0.9]
        .iter()
        .map(|&q| {
            let mut p = medians.clone();
            p[0] = quantile_sorted(&first, q);
            p
        })
        .collect();
    let lo = s.responses.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * kde.bandwidth_response();
    let hi = s.responses.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * kde.bandwidth_response();
    let grid: Vec<f64> = (0..200).map(|i| lo + (hi - lo) * i as f64 / 199.0).collect();
    kde.write_density_curves(path, &points, &grid)
}

/// Runs the requested estimators on the training observations, fits their
/// densities and scores each against the true errors. A failing method is
/// recorded in the manifest and does not stop the others.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, methods: Option<&[Method]>) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut dir = ArtifactDir::open(out)?;
    dir.check_data_key(cfg)?;
    let methods: Vec<Method> = methods.map_or_else(|| cfg.training.methods.clone(), <[Method]>::to_vec);
    if let Some(m) = methods.iter().find(|m| **m == Method::None) {
        return Err(Error::Config(format!("method {m} has nothing to train")));
    }
    let (_, truth) = read_states(&dir.require(files::TRUTH_TRAINING, "generate")?)?;
    let obs = read_observations(&dir.require(files::OBS_TRAINING, "generate")?)?;
    let model = SingleScaleModel::new(cfg.l96.n_x, cfg.l96.forcing, cfg.dt, cfg.steps_per_interval()?);
    let h = cfg.observation_operator()?;
    if truth.len() != obs.len() + 1 || truth.first().is_none_or(|x| x.len() != cfg.l96.n_x) {
        return Err(Error::Config("training truth and observations do not match the config".into()));
    }

    let truth_set = ErrorTrainingSet::from_truth(&truth, &model, 1)?;
    truth_set.write_csv(&dir.path(files::ERRORS_TRUTH))?;
    let reference_raw = thin(cfg, &truth_set)?;
    let reference = remove_covariate_outliers(&reference_raw, cfg.density.outlier_quantile)?;

    let ctx = Context {
        cfg,
        dir: &dir,
        model,
        h,
        truth,
        obs,
        truth_set,
        reference_raw,
        reference,
    };
    let mut summaries = Vec::new();
    let mut outcomes = BTreeMap::new();
    let mut kld_rows = Vec::new();
    for &m in &methods {
        let trained = if m == Method::B1 { ctx.train_b1() } else { ctx.train_window(m) };
        match trained {
            Ok(t) => {
                let (kld, message) = match ctx.divergence(&t.samples) {
                    Ok(k) => {
                        kld_rows.push(KldRow {
                            method: m,
                            kld: k,
                            samples: t.samples.len(),
                        });
                        (Some(k), None)
                    }
                    Err(e) => (None, Some(format!("divergence not computed: {e}"))),
                };
                summaries.push(MethodTraining {
                    method: m,
                    ok: true,
                    message: message.clone(),
                    records: t.set.len(),
                    max_abs_eta: t.set.max_abs_eta(),
                    failed_windows: t.set.failed_windows(),
                    kld,
                });
                outcomes.insert(
                    m.to_string(),
                    Outcome {
                        message,
                        ..Outcome::ok(t.outputs)
                    },
                );
            }
            Err(e) => {
                summaries.push(MethodTraining {
                    method: m,
                    ok: false,
                    message: Some(e.to_string()),
                    records: 0,
                    max_abs_eta: f64::NAN,
                    failed_windows: 0,
                    kld: None,
                });
                outcomes.insert(m.to_string(), Outcome::failed(e.to_string(), Vec::new()));
            }
        }
    }
    let kpath = dir.path(files::KLD);
    if kpath.exists() {
        let old: Vec<KldRow> = read_csv(&kpath)?;
        kld_rows.extend(old.into_iter().filter(|r| !methods.contains(&r.method)));
    }
    kld_rows.sort_by_key(|r| r.method);
    write_csv(&kpath, &kld_rows)?;
    outcomes.insert(
        "reference".to_string(),
        Outcome::ok(vec![files::ERRORS_TRUTH.to_string(), files::KLD.to_string()]),
    );
    let manifest = dir.finish(cfg, "train", outcomes)?;
    Ok(TrainSummary {
        methods: summaries,
        manifest,
    })
}
