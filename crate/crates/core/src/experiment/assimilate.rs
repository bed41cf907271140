use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{ConditionalKde, KdeSampler};
use crate::error::{Error, Result};
use crate::estimation::IncrementStats;
use crate::etkf::{forecast_step, run_filter_with, CycleDiagnostics, Ensemble, ErrorSampler, FilterOptions, ZeroSampler};
use crate::io::write_csv;
use crate::l96::{SingleScaleModel, StateVector};
use crate::observation::{ObservationOperator, ObservationRecord};
use crate::verification::{crps, log_score, ScoreRow, DEFAULT_LOG_SCORE_CAP};

use super::{files, read_observations, read_states, rng_for, streams, ArtifactDir, ExperimentConfig, Manifest, Method, Outcome};

/// Score of one free forecast at one lead time and grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub run_id: usize,
    /// Cycle whose analysis launched the forecast.
    pub cycle: usize,
    pub lead_obs_intervals: usize,
    pub lead_mtu: f64,
    pub variable_k: usize,
    pub crps: f64,
    pub log_score: f64,
    pub sq_error: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct FilterRow {
    run_id: usize,
    cycle: usize,
    forecast_rmse: f64,
    analysis_rmse: f64,
    mean_spread: f64,
    innovation_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodCampaign {
    pub method: Method,
    pub ok: bool,
    pub message: Option<String>,
    pub completed_runs: usize,
    /// `(run, error)` for runs that diverged or failed.
    pub failed_runs: Vec<(usize, String)>,
    pub mean_analysis_rmse: f64,
    /// Smallest forecast spread over all cycles of all completed runs.
    pub min_forecast_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssimilateSummary {
    pub methods: Vec<MethodCampaign>,
    pub manifest: Manifest,
}

impl AssimilateSummary {
    pub fn get(&self, m: Method) -> Option<&MethodCampaign> {
        self.methods.iter().find(|c| c.method == m)
    }
}

/// Loads the error sampler a method trained into `dir`.
pub(crate) fn load_sampler(dir: &ArtifactDir, m: Method) -> Result<Box<dyn ErrorSampler>> {
    Ok(match m {
        Method::None => Box::new(ZeroSampler),
        Method::B1 => {
            let stats = IncrementStats::read_json(&dir.require(files::INCREMENT_STATS_B1, "train --methods b1")?)?;
            Box::new(stats.sampler()?)
        }
        _ => {
            let path = dir.require(&files::density(m), &format!("train --methods {m}"))?;
            Box::new(KdeSampler::new(ConditionalKde::read_json(&path)?)?)
        }
    })
}

struct Campaign<'a> {
    cfg: &'a ExperimentConfig,
    model: SingleScaleModel,
    h: ObservationOperator,
    truth: &'a [StateVector],
    obs: &'a [ObservationRecord],
    spacing: usize,
}

struct RunOutput {
    diags: Vec<CycleDiagnostics>,
    forecasts: Vec<ForecastRecord>,
}

impl Campaign<'_> {
    fn run(&self, sampler: &dyn ErrorSampler, run_id: usize) -> Result<RunOutput> {
        let cfg = self.cfg;
        let a = &cfg.assimilation;
        let start = run_id * self.spacing;
        let len = a.run_length_obs_intervals;
        let x0 = &self.truth[start];
        let e0 = Ensemble::new(DMatrix::from_fn(x0.len(), a.ensemble_size, |i, _| x0[i]))?;
        let max_lead = cfg.max_lead();
        let mut rng = rng_for(cfg.seeds.sampler, streams::SAMPLER_FILTER_BASE + run_id as u64);
        let mut frng = rng_for(cfg.seeds.sampler, streams::SAMPLER_FORECAST_BASE + run_id as u64);
        let mut forecasts = Vec::new();
        let diags = run_filter_with(
            &self.model,
            sampler,
            &self.obs[start + 1..=start + len],
            &self.h,
            &cfg.obs.r_diag,
            e0,
            &FilterOptions::default(),
            Some(&self.truth[start + 1..=start + len]),
            &mut rng,
            |cycle, _, state| {
                if cycle % a.forecast_every_obs_intervals != 0 {
                    return Ok(());
                }
                let mut fs = state.clone();
                for lead in 1..=max_lead {
                    fs = forecast_step(&self.model, sampler, &fs, &mut frng)?;
                    if !a.lead_times_obs_intervals.contains(&lead) {
                        continue;
                    }
                    let t = &self.truth[start + cycle + lead];
                    let mean = fs.ensemble.mean();
                    let var = fs.ensemble.variances();
                    for k in 0..t.len() {
                        let row = fs.ensemble.row(k);
                        forecasts.push(ForecastRecord {
                            run_id,
                            cycle,
                            lead_obs_intervals: lead,
                            lead_mtu: lead as f64 * cfg.obs.interval_mtu,
                            variable_k: k + 1,
                            crps: crps(&row, t[k]),
                            log_score: log_score(&row, t[k], DEFAULT_LOG_SCORE_CAP),
                            sq_error: (mean[k] - t[k]).powi(2),
                            variance: var[k],
                        });
                    }
                }
                Ok(())
            },
        )?;
        Ok(RunOutput { diags, forecasts })
    }
}

/// Per-(run, lead, variable) averages over launch times.
pub(crate) fn score_table(records: &[ForecastRecord]) -> Vec<ScoreRow> {
    let mut acc: BTreeMap<(usize, usize, usize), (f64, f64, f64, usize, f64)> = BTreeMap::new();
    for r in records {
        let e = acc
            .entry((r.run_id, r.lead_obs_intervals, r.variable_k))
            .or_insert((0.0, 0.0, 0.0, 0, r.lead_mtu));
        e.0 += r.crps;
        e.1 += r.log_score;
        e.2 += r.sq_error;
        e.3 += 1;
    }
    acc.into_iter()
        .map(|((run_id, _, variable_k), (c, l, s, n, lead_mtu))| {
            let n = n as f64;
            ScoreRow {
                run_id,
                lead_mtu,
                variable_k,
                crps: c / n,
                log_score: l / n,
                rmse: (s / n).sqrt(),
            }
        })
        .collect()
}

/// Runs an ETKF campaign per method: independent runs start on the truth
/// every `initial_condition_spacing_mtu`, with all members equal to the
/// true state. A run that fails is recorded and the others continue.
pub fn cmd_assimilate(cfg: &ExperimentConfig, out: &Path, methods: Option<&[Method]>) -> Result<AssimilateSummary> {
    cfg.validate()?;
    let mut dir = ArtifactDir::open(out)?;
    dir.check_data_key(cfg)?;
    let methods: Vec<Method> = methods.map_or_else(|| vec![cfg.assimilation.method], <[Method]>::to_vec);
    let (_, truth) = read_states(&dir.require(files::TRUTH_ASSIMILATION, "generate")?)?;
    let obs = read_observations(&dir.require(files::OBS_ASSIMILATION, "generate")?)?;
    let needed = cfg.assimilation_records()?;
    if truth.len() < needed || obs.len() < needed {
        return Err(Error::Config(format!(
            "the campaign needs {needed} truth records but {} were generated; re-run generate with this config",
            truth.len()
        )));
    }
    let campaign = Campaign {
        cfg,
        model: SingleScaleModel::new(cfg.l96.n_x, cfg.l96.forcing, cfg.dt, cfg.steps_per_interval()?),
        h: cfg.observation_operator()?,
        truth: &truth,
        obs: &obs,
        spacing: cfg.spacing_intervals()?,
    };

    let mut summaries = Vec::new();
    let mut outcomes = BTreeMap::new();
    for &m in &methods {
        let sampler = match load_sampler(&dir, m) {
            Ok(s) => s,
            Err(e) => {
                outcomes.insert(m.to_string(), Outcome::failed(e.to_string(), Vec::new()));
                summaries.push(MethodCampaign {
                    method: m,
                    ok: false,
                    message: Some(e.to_string()),
                    completed_runs: 0,
                    failed_runs: Vec::new(),
                    mean_analysis_rmse: f64::NAN,
                    min_forecast_spread: f64::NAN,
                });
                continue;
            }
        };
        let results: Vec<Result<RunOutput>> = (0..cfg.assimilation.n_runs)
            .into_par_iter()
            .map(|r| campaign.run(sampler.as_ref(), r))
            .collect();

        let mut filter_rows = Vec::new();
        let mut forecasts = Vec::new();
        let mut failed = Vec::new();
        for (r, res) in results.into_iter().enumerate() {
            match res {
                Ok(out) => {
                    filter_rows.extend(out.diags.iter().map(|d| FilterRow {
                        run_id: r,
                        cycle: d.cycle,
                        forecast_rmse: d.forecast_rmse,
                        analysis_rmse: d.analysis_rmse,
                        mean_spread: d.mean_spread,
                        innovation_norm: d.innovation_norm,
                    }));
                    forecasts.extend(out.forecasts);
                }
                Err(e) => failed.push((r, e.to_string())),
            }
        }
        write_csv(&dir.path(&files::filter(m)), &filter_rows)?;
        write_csv(&dir.path(&files::forecasts(m)), &forecasts)?;
        write_csv(&dir.path(&files::scores(m)), &score_table(&forecasts))?;
        let outputs = vec![files::filter(m), files::forecasts(m), files::scores(m)];
        let completed = cfg.assimilation.n_runs - failed.len();
        let n_rows = filter_rows.len().max(1) as f64;
        let summary = MethodCampaign {
            method: m,
            ok: completed > 0,
            message: (!failed.is_empty()).then(|| {
                failed
                    .iter()
                    .map(|(r, e)| format!("run {r}: {e}"))
                    .collect::<Vec<_>>()
                    .join("; ")
            }),
            completed_runs: completed,
            mean_analysis_rmse: filter_rows.iter().map(|f| f.analysis_rmse).sum::<f64>() / n_rows,
            min_forecast_spread: filter_rows.iter().map(|f| f.mean_spread).fold(f64::INFINITY, f64::min),
            failed_runs: failed,
        };
        let outcome = match &summary.message {
            None => Outcome::ok(outputs),
            Some(msg) => Outcome::failed(msg.clone(), outputs),
        };
        outcomes.insert(m.to_string(), outcome);
        summaries.push(summary);
    }
    let manifest = dir.finish(cfg, "assimilate", outcomes)?;
    Ok(AssimilateSummary {
        methods: summaries,
        manifest,
    })
}
