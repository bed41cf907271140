use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::l96::{multiscale_slow_trajectory, FullState, L96Params};
use crate::observation::synthesize_observations;

use super::{files, rng_for, streams, write_observations, write_states, ArtifactDir, ExperimentConfig, Manifest, Outcome};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    /// Training observations (one per interval after the initial state).
    pub training_records: usize,
    pub assimilation_records: usize,
    pub climatology_records: usize,
    pub manifest: Manifest,
}

fn echo(p: &L96Params, dt: f64, e: Error) -> Error {
    Error::Numerical(format!(
        "truth integration failed ({e}) with xi={}, h_x={}, h_z={}, n_x={}, n_z={}, F={}, dt={dt}",
        p.xi, p.h_x, p.h_z, p.n_x, p.n_z, p.forcing
    ))
}

/// Integrates one continuous multi-scale truth run and writes three
/// consecutive segments (training, assimilation, climatology) with
/// synthetic observations for the first two.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateSummary> {
    cfg.validate()?;
    let mut dir = ArtifactDir::open(out)?;
    let p = &cfg.l96;
    let h = cfg.observation_operator()?;
    let spi = cfg.steps_per_interval()?;
    let n_train = cfg.training_intervals()?;
    let n_assim = cfg.assimilation_records()?;
    let n_clim = cfg.evaluation.climatology_obs_intervals;

    let s0 = FullState::random(p, &mut rng_for(cfg.seeds.truth, streams::TRUTH_INIT));
    let (train, last) = multiscale_slow_trajectory(p, &s0, cfg.dt, cfg.transient_steps()?, spi, n_train + 1)
        .map_err(|e| echo(p, cfg.dt, e))?;
    let (assim, last) =
        multiscale_slow_trajectory(p, &last, cfg.dt, spi, spi, n_assim).map_err(|e| echo(p, cfg.dt, e))?;
    let (clim, _) = multiscale_slow_trajectory(p, &last, cfg.dt, spi, spi, n_clim).map_err(|e| echo(p, cfg.dt, e))?;

    let obs_train = synthesize_observations(
        &train[1..],
        &h,
        &cfg.obs.r_diag,
        1,
        &mut rng_for(cfg.seeds.obs, streams::OBS_TRAINING),
    )?;
    let obs_assim = synthesize_observations(
        &assim,
        &h,
        &cfg.obs.r_diag,
        0,
        &mut rng_for(cfg.seeds.obs, streams::OBS_ASSIMILATION),
    )?;

    write_states(&dir.path(files::TRUTH_TRAINING), &train, 0)?;
    write_observations(&dir.path(files::OBS_TRAINING), &obs_train, &h)?;
    write_states(&dir.path(files::TRUTH_ASSIMILATION), &assim, 0)?;
    write_observations(&dir.path(files::OBS_ASSIMILATION), &obs_assim, &h)?;
    write_states(&dir.path(files::TRUTH_CLIMATOLOGY), &clim, 0)?;

    let outputs = [
        files::TRUTH_TRAINING,
        files::OBS_TRAINING,
        files::TRUTH_ASSIMILATION,
        files::OBS_ASSIMILATION,
        files::TRUTH_CLIMATOLOGY,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut outcomes = BTreeMap::new();
    outcomes.insert("truth".to_string(), Outcome::ok(outputs));
    let manifest = dir.finish(cfg, "generate", outcomes)?;
    Ok(GenerateSummary {
        training_records: obs_train.len(),
        assimilation_records: assim.len(),
        climatology_records: clim.len(),
        manifest,
    })
}
