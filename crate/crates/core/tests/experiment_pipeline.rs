use std::path::Path;

use subgrid_core::experiment::{
    cmd_assimilate, cmd_evaluate, cmd_generate, cmd_train, files, read_observations, read_states, CaseStudy,
    ExperimentConfig, Manifest, Method,
};
use subgrid_core::Error;

fn small(case: &str, training_mtu: f64) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "schema_version": 1,
        "case_study": "{case}",
        "training": {{
            "length_mtu": {training_mtu},
            "transient_mtu": 2.0,
            "lm": {{"max_iterations": 10}},
            "b1": {{"spinup_cycles": 10, "alpha_cycles": 60}},
            "b1_ensemble": {{"size": 20, "initial_spread": 0.1}}
        }},
        "density": {{"kld_points_per_dim": 20}},
        "assimilation": {{
            "n_runs": 2,
            "run_length_obs_intervals": 20,
            "ensemble_size": 20,
            "initial_condition_spacing_mtu": 1.0,
            "lead_times_obs_intervals": [1, 5],
            "forecast_every_obs_intervals": 5
        }},
        "evaluation": {{
            "climatology_obs_intervals": 1200,
            "max_lag_obs_intervals": 10,
            "pdf_points": 40,
            "spread_error_bins": 4
        }}
    }}"#
    );
    ExperimentConfig::from_json_str(&text).unwrap()
}

#[test]
fn generate_writes_one_observation_per_training_interval() {
    for (case, mtu, expected) in [("case1", 5.0, 250), ("case2", 4.0, 100)] {
        let cfg = small(case, mtu);
        let dir = tempfile::tempdir().unwrap();
        let s = cmd_generate(&cfg, dir.path()).unwrap();
        assert_eq!(s.training_records, expected, "{case}");
        let (first, truth) = read_states(&dir.path().join(files::TRUTH_TRAINING)).unwrap();
        assert_eq!((first, truth.len()), (0, expected + 1));
        let obs = read_observations(&dir.path().join(files::OBS_TRAINING)).unwrap();
        assert_eq!(obs.len(), expected);
        assert_eq!(obs[0].time_index, 1);
        assert_eq!(s.climatology_records, 1200);
        assert!(s.manifest.stages.contains_key("generate"));
    }
}

fn file_hashes(dir: &Path) -> Vec<(String, String)> {
    let m = Manifest::read(&dir.join(files::MANIFEST)).unwrap();
    m.files.into_iter().map(|(k, v)| (k, v.sha256)).collect()
}

#[test]
fn generate_is_reproducible_from_seeds() {
    let cfg = small("case1", 1.0);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_generate(&cfg, a.path()).unwrap();
    cmd_generate(&cfg, b.path()).unwrap();
    assert_eq!(file_hashes(a.path()), file_hashes(b.path()));

    let mut other = cfg.clone();
    other.apply_seed_override("obs=99").unwrap();
    let c = tempfile::tempdir().unwrap();
    cmd_generate(&other, c.path()).unwrap();
    let ha = file_hashes(a.path());
    let hc = file_hashes(c.path());
    let get = |h: &[(String, String)], k: &str| h.iter().find(|x| x.0 == k).unwrap().1.clone();
    assert_eq!(get(&ha, files::TRUTH_TRAINING), get(&hc, files::TRUTH_TRAINING));
    assert_ne!(get(&ha, files::OBS_TRAINING), get(&hc, files::OBS_TRAINING));
}

#[test]
fn downstream_commands_name_missing_inputs() {
    let cfg = small("case1", 1.0);
    let dir = tempfile::tempdir().unwrap();
    match cmd_train(&cfg, dir.path(), Some(&[Method::Proposed])) {
        Err(Error::MissingInput(msg)) => assert!(msg.contains("generate"), "{msg}"),
        other => panic!("expected MissingInput, got {other:?}"),
    }
    cmd_generate(&cfg, dir.path()).unwrap();
    match cmd_assimilate(&cfg, dir.path(), Some(&[Method::B2])) {
        Ok(s) => {
            let c = s.get(Method::B2).unwrap();
            assert!(!c.ok);
            assert!(c.message.as_ref().unwrap().contains(&files::density(Method::B2)));
        }
        Err(e) => panic!("{e}"),
    }
    match cmd_evaluate(&cfg, dir.path(), Some(&[Method::Proposed])) {
        Err(Error::MissingInput(msg)) => assert!(msg.contains(&files::forecasts(Method::Proposed)), "{msg}"),
        other => panic!("expected MissingInput, got {other:?}"),
    }
}

#[test]
fn changed_truth_settings_are_rejected_downstream() {
    let cfg = small("case1", 1.0);
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&cfg, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.apply_seed_override("truth=17").unwrap();
    assert!(matches!(
        cmd_train(&other, dir.path(), Some(&[Method::Proposed])),
        Err(Error::Config(_))
    ));
}

#[test]
fn perfect_model_training_finds_negligible_errors() {
    // With no coupling the slow variables follow the single-scale model
    // exactly, so the only error left is observation noise.
    let mut cfg = small("case1", 2.0);
    cfg.l96.h_x = 0.0;
    cfg.l96.h_z = 0.0;
    cfg.training.b1_ensemble.initial_spread = 1e-3;
    let dir = tempfile::tempdir().unwrap();
    cmd_generate(&cfg, dir.path()).unwrap();
    let methods = [Method::Proposed, Method::B2, Method::Sumsq, Method::B1];
    let s = cmd_train(&cfg, dir.path(), Some(&methods)).unwrap();
    for m in methods {
        let t = s.get(m).unwrap();
        assert!(t.ok, "{m}: {:?}", t.message);
        assert!(t.records > 0);
        assert!(t.max_abs_eta < 0.01, "{m}: max |eta| = {}", t.max_abs_eta);
    }
    assert_eq!(s.get(Method::Proposed).unwrap().records, 100);

    let a = cmd_assimilate(&cfg, dir.path(), Some(&[Method::None])).unwrap();
    let none = a.get(Method::None).unwrap();
    assert!(none.ok);
    assert!(none.mean_analysis_rmse <= 1e-3, "{}", none.mean_analysis_rmse);
}

#[test]
fn assimilation_is_reproducible_and_keeps_spread() {
    let cfg = small("case1", 2.0);
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        cmd_generate(&cfg, dir.path()).unwrap();
        cmd_train(&cfg, dir.path(), Some(&[Method::Proposed])).unwrap();
        let a = cmd_assimilate(&cfg, dir.path(), Some(&[Method::Proposed])).unwrap();
        let c = a.get(Method::Proposed).unwrap();
        assert!(c.ok, "{:?}", c.message);
        assert!(c.min_forecast_spread > 0.0);
        let h = file_hashes(dir.path());
        hashes.push(
            h.into_iter()
                .filter(|(k, _)| k.starts_with("filter_") || k.starts_with("forecasts_") || k.starts_with("density_"))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(hashes[0].len(), 4);
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let cfg = small("case1", 3.0);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    cmd_generate(&cfg, out).unwrap();

    let trained = cmd_train(&cfg, out, Some(&[Method::Proposed, Method::B2, Method::B1])).unwrap();
    for m in [Method::Proposed, Method::B2, Method::B1] {
        let t = trained.get(m).unwrap();
        assert!(t.ok, "{m}: {:?}", t.message);
        assert!(t.kld.is_some_and(|k| k.is_finite() && k >= 0.0), "{m}: {:?}", t.kld);
    }
    for f in [
        files::density(Method::Proposed),
        files::density(Method::B2),
        files::INCREMENT_STATS_B1.to_string(),
        files::KLD.to_string(),
        files::ERRORS_TRUTH.to_string(),
    ] {
        assert!(out.join(&f).exists(), "{f}");
    }

    let methods = [Method::Proposed, Method::B1, Method::None];
    let assim = cmd_assimilate(&cfg, out, Some(&methods)).unwrap();
    for m in methods {
        let c = assim.get(m).unwrap();
        assert!(c.ok, "{m}: {:?}", c.message);
        assert_eq!(c.completed_runs, 2);
        assert!(c.mean_analysis_rmse.is_finite());
    }

    let eval = cmd_evaluate(&cfg, out, None).unwrap();
    assert_eq!(eval.lead_scores.len(), 3 * 2);
    let s = eval.skill(Method::Proposed, Method::None, "crps", 0.1).unwrap();
    assert_eq!(s.n_runs, 2);
    assert!(s.fss_mean.is_some());
    assert!(eval.skill(Method::Proposed, Method::Proposed, "crps", 0.1).is_none());
    assert!(eval.ks("truth").is_none());
    for m in ["proposed", "b1", "none"] {
        let d = eval.ks(m).unwrap();
        assert!((0.0..=1.0).contains(&d), "{m}: {d}");
    }
    assert!(out.join(files::climatology_acf("truth")).exists());

    let manifest = Manifest::read(&out.join(files::MANIFEST)).unwrap();
    for stage in ["generate", "train", "assimilate", "evaluate"] {
        assert!(manifest.stages.contains_key(stage), "{stage}");
    }
    assert!(manifest.files.contains_key(files::SKILL_SCORES));
    assert_eq!(manifest.config.case_study, CaseStudy::Case1);
}
