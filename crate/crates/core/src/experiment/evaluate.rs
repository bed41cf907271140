use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etkf::ErrorSampler;
use crate::io::{read_csv, write_csv};
use crate::l96::{SingleScaleModel, StateVector};
use crate::model::ForecastModel;
use crate::verification::{climatology, ks_distance, skill_score, spread_error_bins};

use super::assimilate::load_sampler;
use super::{files, read_states, rng_for, streams, ArtifactDir, ExperimentConfig, ForecastRecord, Manifest, Method, Outcome};

/// Space-and-time averaged scores of one method at one lead time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadScore {
    pub method: Method,
    pub lead_mtu: f64,
    pub crps: f64,
    pub log_score: f64,
    pub rmse: f64,
}

/// Across-run mean and standard deviation of the skill of `method` over
/// `benchmark`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillRow {
    pub method: Method,
    pub benchmark: Method,
    pub lead_mtu: f64,
    pub metric: String,
    pub fss_mean: Option<f64>,
    pub fss_sd: Option<f64>,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpreadErrorRow {
    bin: usize,
    rms_spread: f64,
    rms_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KsRow {
    model: String,
    ks_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub lead_scores: Vec<LeadScore>,
    pub skills: Vec<SkillRow>,
    /// `(method, lead in intervals, max relative spread/error mismatch)`.
    pub spread_error: Vec<(Method, usize, f64)>,
    /// KS distance of each model's marginal from the full model's;
    /// `"none"` is the unparameterized model.
    pub climatology_ks: Vec<(String, f64)>,
    pub manifest: Manifest,
}

impl EvaluateSummary {
    pub fn skill(&self, method: Method, benchmark: Method, metric: &str, lead_mtu: f64) -> Option<&SkillRow> {
        self.skills.iter().find(|s| {
            s.method == method && s.benchmark == benchmark && s.metric == metric && (s.lead_mtu - lead_mtu).abs() < 1e-9
        })
    }

    pub fn mismatch(&self, method: Method, lead: usize) -> Option<f64> {
        self.spread_error.iter().find(|s| s.0 == method && s.1 == lead).map(|s| s.2)
    }

    pub fn ks(&self, model: &str) -> Option<f64> {
        self.climatology_ks.iter().find(|k| k.0 == model).map(|k| k.1)
    }
}

fn lead_scores(m: Method, records: &[ForecastRecord]) -> Vec<LeadScore> {
    let mut acc: BTreeMap<usize, (f64, f64, f64, usize, f64)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.lead_obs_intervals).or_insert((0.0, 0.0, 0.0, 0, r.lead_mtu));
        e.0 += r.crps;
        e.1 += r.log_score;
        e.2 += r.sq_error;
        e.3 += 1;
    }
    acc.into_values()
        .map(|(c, l, s, n, lead_mtu)| {
            let n = n as f64;
            LeadScore {
                method: m,
                lead_mtu,
                crps: c / n,
                log_score: l / n,
                rmse: (s / n).sqrt(),
            }
        })
        .collect()
}

/// Per-run score at one lead: mean CRPS or RMSE over launches and grid
/// points.
fn run_scores(records: &[ForecastRecord], metric: &str, lead: usize) -> Result<BTreeMap<usize, f64>> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.lead_obs_intervals == lead) {
        let v = match metric {
            "crps" => r.crps,
            "rmse" => r.sq_error,
            other => return Err(Error::Config(format!("no skill score for metric {other:?}"))),
        };
        let e = acc.entry(r.run_id).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(run, (s, n))| {
            let mean = s / n as f64;
            (run, if metric == "rmse" { mean.sqrt() } else { mean })
        })
        .collect())
}

/// Skill of `method` over `benchmark` in each run both completed. CRPS and
/// RMSE have a perfect score of zero.
pub fn skill_by_run(
    method: &[ForecastRecord],
    benchmark: &[ForecastRecord],
    metric: &str,
    lead: usize,
) -> Result<Vec<Option<f64>>> {
    let a = run_scores(method, metric, lead)?;
    let b = run_scores(benchmark, metric, lead)?;
    Ok(a.iter()
        .filter_map(|(run, &sa)| b.get(run).map(|&sb| skill_score(sa, sb, 0.0)))
        .collect())
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(sd))
}

/// Free run of the single-scale model with sampled errors.
pub fn free_run(
    model: &dyn ForecastModel,
    sampler: &dyn ErrorSampler,
    x0: &StateVector,
    n_records: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<StateVector>> {
    let mut out = Vec::with_capacity(n_records);
    let mut x = x0.clone();
    let mut prev_err = DVector::zeros(x0.len());
    out.push(x.clone());
    for j in 1..n_records {
        let mut next = model.forecast(&x).map_err(|e| Error::Numerical(format!("free run step {j}: {e}")))?;
        let eta = sampler.sample(x.as_slice(), prev_err.as_slice(), rng)?;
        next += &eta;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("free run blew up at step {j}")));
        }
        prev_err = eta;
        x = next;
        out.push(x.clone());
    }
    Ok(out)
}

fn write_climatology(dir: &ArtifactDir, name: &str, series: &[StateVector], cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let e = &cfg.evaluation;
    let c = climatology(series, cfg.obs.interval_mtu, e.max_lag_obs_intervals, e.pdf_points)?;
    write_csv(&dir.path(&files::climatology_acf(name)), &c.correlations)?;
    write_csv(&dir.path(&files::climatology_pdf(name)), &c.marginal)?;
    Ok(vec![files::climatology_acf(name), files::climatology_pdf(name)])
}

fn pooled(series: &[StateVector]) -> Vec<f64> {
    series.iter().flat_map(|s| s.iter().copied()).collect()
}

/// Scores the assimilation outputs of `methods` (default: every method
/// with forecasts in `out`) and compares model climatologies.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, methods: Option<&[Method]>) -> Result<EvaluateSummary> {
    cfg.validate()?;
    let mut dir = ArtifactDir::open(out)?;
    dir.check_data_key(cfg)?;
    let methods: Vec<Method> = match methods {
        Some(m) => m.to_vec(),
        None => [Method::Proposed, Method::B1, Method::B2, Method::Sumsq, Method::None]
            .into_iter()
            .filter(|m| dir.path(&files::forecasts(*m)).exists())
            .collect(),
    };
    let mut records: BTreeMap<Method, Vec<ForecastRecord>> = BTreeMap::new();
    for &m in &methods {
        let path = dir.require(&files::forecasts(m), &format!("assimilate --methods {m}"))?;
        records.insert(m, read_csv(&path)?);
    }
    let mut leads = cfg.assimilation.lead_times_obs_intervals.clone();
    leads.sort_unstable();
    let mut outcomes = BTreeMap::new();

    let mut all_leads = Vec::new();
    for (&m, recs) in &records {
        all_leads.extend(lead_scores(m, recs));
    }
    write_csv(&dir.path(files::LEAD_SCORES), &all_leads)?;

    let mut skills = Vec::new();
    for (&m, a) in &records {
        for (&b, bench) in &records {
            if m == b {
                continue;
            }
            for &lead in &leads {
                for metric in ["crps", "rmse"] {
                    let per_run: Vec<f64> = skill_by_run(a, bench, metric, lead)?.into_iter().flatten().collect();
                    let (fss_mean, fss_sd) = mean_sd(&per_run);
                    skills.push(SkillRow {
                        method: m,
                        benchmark: b,
                        lead_mtu: lead as f64 * cfg.obs.interval_mtu,
                        metric: metric.to_string(),
                        fss_mean,
                        fss_sd,
                        n_runs: per_run.len(),
                    });
                }
            }
        }
    }
    write_csv(&dir.path(files::SKILL_SCORES), &skills)?;
    let mut score_outputs = vec![files::LEAD_SCORES.to_string(), files::SKILL_SCORES.to_string()];

    let mut spread_error = Vec::new();
    for (&m, recs) in &records {
        for &lead in &leads {
            let (var, sq): (Vec<f64>, Vec<f64>) = recs
                .iter()
                .filter(|r| r.lead_obs_intervals == lead)
                .map(|r| (r.variance, r.sq_error))
                .unzip();
            if var.len() < cfg.evaluation.spread_error_bins {
                continue;
            }
            let diag = spread_error_bins(&var, &sq, cfg.evaluation.spread_error_bins)?;
            let rows: Vec<SpreadErrorRow> = diag
                .bins
                .iter()
                .map(|b| SpreadErrorRow {
                    bin: b.bin,
                    rms_spread: b.rms_spread,
                    rms_error: b.rms_error,
                })
                .collect();
            write_csv(&dir.path(&files::spread_error(m, lead)), &rows)?;
            score_outputs.push(files::spread_error(m, lead));
            spread_error.push((m, lead, diag.max_relative_mismatch()));
        }
    }
    outcomes.insert("scores".to_string(), Outcome::ok(score_outputs));

    let (_, clim_truth) = read_states(&dir.require(files::TRUTH_CLIMATOLOGY, "generate")?)?;
    let truth_values = pooled(&clim_truth);
    let mut clim_outputs = write_climatology(&dir, "truth", &clim_truth, cfg)?;
    let model = SingleScaleModel::new(cfg.l96.n_x, cfg.l96.forcing, cfg.dt, cfg.steps_per_interval()?);
    let mut ks = Vec::new();
    let mut clim_models: Vec<Method> = methods.clone();
    if !clim_models.contains(&Method::None) {
        clim_models.push(Method::None);
    }
    for m in clim_models {
        let run = load_sampler(&dir, m).and_then(|s| {
            let mut rng = rng_for(cfg.seeds.sampler, streams::SAMPLER_CLIMATOLOGY);
            free_run(&model, s.as_ref(), &clim_truth[0], clim_truth.len(), &mut rng)
        });
        match run.and_then(|series| {
            let outs = write_climatology(&dir, m.name(), &series, cfg)?;
            Ok((series, outs))
        }) {
            Ok((series, outs)) => {
                ks.push((m.name().to_string(), ks_distance(&pooled(&series), &truth_values)));
                clim_outputs.extend(outs);
            }
            Err(e) => {
                outcomes.insert(format!("climatology_{m}"), Outcome::failed(e.to_string(), Vec::new()));
            }
        }
    }
    let ks_rows: Vec<KsRow> = ks
        .iter()
        .map(|(model, d)| KsRow {
            model: model.clone(),
            ks_distance: *d,
        })
        .collect();
    write_csv(&dir.path(files::CLIMATOLOGY_KS), &ks_rows)?;
    clim_outputs.push(files::CLIMATOLOGY_KS.to_string());
    outcomes.insert("climatology".to_string(), Outcome::ok(clim_outputs));

    let manifest = dir.finish(cfg, "evaluate", outcomes)?;
    Ok(EvaluateSummary {
        lead_scores: all_leads,
        skills,
        spread_error,
        climatology_ks: ks,
        manifest,
    })
}
