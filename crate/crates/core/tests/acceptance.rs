//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4 9`.

use std::cell::OnceCell;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use subgrid_core::density::{BandwidthRule, ConditionalKde, DensitySamples};
use subgrid_core::estimation::{estimate_errors, sample_covariance, BinSpec, ErrorTrainingSet, WindowMethod};
use subgrid_core::etkf::{run_filter, Ensemble, FilterOptions, GaussianSampler};
use subgrid_core::experiment::{
    cmd_assimilate, cmd_evaluate, cmd_generate, cmd_train, AssimilateSummary, EvaluateSummary, ExperimentConfig,
    Method, TrainSummary,
};
use subgrid_core::l96::{multiscale_slow_trajectory, FullState, L96Params, SingleScaleModel, StateVector};
use subgrid_core::lm::{minimize_fn, LmOptions};
use subgrid_core::model::{ForecastModel, LinearModel};
use subgrid_core::observation::{synthesize_observations, ObservationOperator, ObservationRecord};
use subgrid_core::rk4::rk4_integrate;
use subgrid_core::verification::{crps, kld, KldGrid};

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// 1 ---------------------------------------------------------------------

fn etkf_matches_kalman_filter() -> Outcome {
    let n = 500;
    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.15, 0.95]);
    let b = DVector::from_vec(vec![1.0, 0.5]);
    let model = LinearModel::new(a.clone(), b.clone());
    let q = DMatrix::from_row_slice(2, 2, &[0.05, 0.01, 0.01, 0.03]);
    let r = [0.1f64, 0.2];
    let h = ObservationOperator::full(2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let noise = GaussianSampler::new(DVector::zeros(2), &q).map_err(err)?;
    let mut x = DVector::from_vec(vec![8.0, 3.0]);
    let mut obs = Vec::new();
    for j in 1..=50 {
        use subgrid_core::etkf::ErrorSampler;
        x = &a * &x + &b + noise.sample(x.as_slice(), &[0.0, 0.0], &mut rng).map_err(err)?;
        let y: Vec<f64> = (0..2)
            .map(|i| x[i] + r[i].sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        obs.push(ObservationRecord { time_index: j, y });
    }

    let e0 = Ensemble::around(&DVector::from_vec(vec![7.0, 4.0]), n, 1.0, &mut rng).map_err(err)?;
    let mut m = e0.mean();
    let mut p = e0.covariance();
    let results = run_filter(&model, &noise, &obs, &h, &r, e0, &FilterOptions::default(), &mut rng).map_err(err)?;

    let r_mat = DMatrix::from_diagonal(&DVector::from_column_slice(&r));
    let (mut worst_mean, mut worst_cov) = (0.0f64, 0.0f64);
    for (o, res) in obs.iter().zip(&results) {
        m = &a * &m + &b;
        p = &a * &p * a.transpose() + &q;
        let s = &p + &r_mat;
        let k = &p * s.try_inverse().ok_or("singular innovation covariance")?;
        m = &m + &k * (o.y_vector() - &m);
        p = (DMatrix::identity(2, 2) - &k) * &p;
        worst_mean = worst_mean.max((res.analysis.mean() - &m).norm() / m.norm());
        worst_cov = worst_cov.max((res.analysis.covariance() - &p).norm() / p.norm());
    }
    Ok((
        worst_mean <= 0.05 && worst_cov <= 0.10,
        format!("max relative error over 50 cycles: mean {worst_mean:.4}, covariance {worst_cov:.4}"),
    ))
}

// 2 ---------------------------------------------------------------------

/// Integral of `(F_ens(x) - 1{x >= y})^2`, which is piecewise constant
/// between the sorted members and the observation.
fn crps_by_integration(ens: &[f64], y: f64) -> f64 {
    let mut knots: Vec<f64> = ens.to_vec();
    knots.push(y);
    knots.sort_by(f64::total_cmp);
    let n = ens.len() as f64;
    let mut total = 0.0;
    for w in knots.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let f = ens.iter().filter(|&&e| e <= mid).count() as f64 / n;
        let step = if mid >= y { 1.0 } else { 0.0 };
        total += (f - step).powi(2) * (w[1] - w[0]);
    }
    total
}

fn crps_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let ens: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y = rng.random_range(-4.0..4.0);
        worst = worst.max((crps(&ens, y) - crps_by_integration(&ens, y)).abs());
    }
    Ok((worst <= 1e-6, format!("max abs difference {worst:.2e} over 100 ensembles")))
}

// 3 ---------------------------------------------------------------------

fn kld_accuracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let q: Vec<f64> = (0..5000).map(|_| 1.0 + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let grid = KldGrid::default();
    let same = kld(&p, &p, 1, &grid).map_err(err)?;
    let shifted = kld(&p, &q, 1, &grid).map_err(err)?;
    let rel = (shifted - 0.5).abs() / 0.5;
    Ok((
        same <= 0.02 && rel <= 0.25,
        format!("identical {same:.2e}; N(0,1) vs N(1,1) {shifted:.4} (relative error {rel:.3})"),
    ))
}

// 4 ---------------------------------------------------------------------

fn rk4_order() -> Outcome {
    let exact = (-1.0f64).exp();
    let error = |dt: f64| -> Result<f64, String> {
        let steps = (1.0 / dt).round() as usize;
        let traj = rk4_integrate(|x, out| out[0] = -x[0], &[1.0], dt, steps).map_err(err)?;
        Ok((traj.last().unwrap()[0] - exact).abs())
    };
    let coarse = error(0.1)?;
    let fine = error(0.05)?;
    let ratio = coarse / fine;
    Ok((ratio >= 12.0, format!("error ratio {ratio:.2} (errors {coarse:.2e}, {fine:.2e})")))
}

// 5 ---------------------------------------------------------------------

fn lm_solves_reference_problems() -> Outcome {
    let a = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.5, -1.0, 0.3, 2.0, 0.7, -0.4, 1.0, 2.0, 1.0, -1.5]);
    let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    let opts = LmOptions::default();
    let lin = minimize_fn(|x| Some(&a * x - &b), &DVector::zeros(3), &opts).map_err(err)?;
    let at_a = a.transpose() * &a;
    let exact = at_a.lu().solve(&(a.transpose() * &b)).ok_or("singular normal equations")?;
    let lin_err = (&lin.solution - &exact).amax();

    let rosen = minimize_fn(
        |x| Some(DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])),
        &DVector::from_vec(vec![-1.2, 1.0]),
        &opts,
    )
    .map_err(err)?;
    let rosen_err = (rosen.solution[0] - 1.0).abs().max((rosen.solution[1] - 1.0).abs());
    Ok((
        lin_err <= 1e-10 && rosen_err <= 1e-6,
        format!("linear error {lin_err:.2e}, Rosenbrock error {rosen_err:.2e}"),
    ))
}

// 6 ---------------------------------------------------------------------

fn case1_truth(intervals: usize, seed: u64) -> Result<(L96Params, Vec<StateVector>), String> {
    let p = L96Params::case1();
    let s0 = FullState::random(&p, &mut ChaCha8Rng::seed_from_u64(seed));
    let (truth, _) = multiscale_slow_trajectory(&p, &s0, 8e-4, 1250, 25, intervals + 1).map_err(err)?;
    Ok((p, truth))
}

fn observation_constraint() -> Outcome {
    let (p, truth) = case1_truth(150, 6)?;
    let model = SingleScaleModel::new(p.n_x, p.forcing, 8e-4, 25);
    let h = ObservationOperator::from_one_based(&[3, 4, 8, 9], p.n_x).map_err(err)?;
    let obs = synthesize_observations(&truth[1..], &h, &[1e-6; 4], 1, &mut ChaCha8Rng::seed_from_u64(7)).map_err(err)?;
    let lm = LmOptions {
        max_iterations: 10,
        ..LmOptions::default()
    };
    let set = estimate_errors(&WindowMethod::ConditionalVariance(BinSpec::one_dim(8)), &obs, &truth[0], &model, &h, 25, &lm)
        .map_err(err)?;
    let mut worst = 0.0f64;
    for (rec, o) in set.records.iter().zip(&obs) {
        if rec.time_index != o.time_index {
            return Err(format!("record {} is out of step with the observations", rec.time_index));
        }
        for (hx, y) in h.observe(&rec.state).iter().zip(&o.y) {
            worst = worst.max((hx - y).abs());
        }
    }
    Ok((
        worst <= 1e-12 && set.records.len() == obs.len(),
        format!("max |Hx - y| {worst:.2e} over {} committed steps", set.records.len()),
    ))
}

// 7 ---------------------------------------------------------------------

fn kde_normalization_and_sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 2000;
    let mut responses = Vec::with_capacity(n);
    let mut covariates = Vec::with_capacity(n);
    for _ in 0..n {
        let c: f64 = rng.random_range(-5.0..10.0);
        let noise: f64 = StandardNormal.sample(&mut rng);
        responses.push(0.02 * c + 0.05 * (1.0 + 0.1 * c.abs()) * noise);
        covariates.push(c);
    }
    let kde = ConditionalKde::fit(DensitySamples::new(responses, covariates, 1).map_err(err)?, BandwidthRule::NormalReference)
        .map_err(err)?;
    let lo = -1.5;
    let hi = 1.5;
    let m = 60_001;
    let dx = (hi - lo) / (m - 1) as f64;
    let grid: Vec<f64> = (0..m).map(|i| lo + dx * i as f64).collect();

    let mut worst_norm = 0.0f64;
    for c in [-4.0, 0.0, 2.5, 9.0] {
        let pdf: Vec<f64> = grid.iter().map(|&e| kde.conditional_pdf(e, &[c])).collect();
        let integral: f64 = pdf.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dx).sum();
        worst_norm = worst_norm.max((integral - 1.0).abs());
    }

    let c = 2.5;
    let pdf: Vec<f64> = grid.iter().map(|&e| kde.conditional_pdf(e, &[c])).collect();
    let mut cdf = vec![0.0; m];
    for i in 1..m {
        cdf[i] = cdf[i - 1] + 0.5 * (pdf[i - 1] + pdf[i]) * dx;
    }
    let cdf_at = |v: f64| -> f64 {
        if v <= lo {
            return 0.0;
        }
        if v >= hi {
            return cdf[m - 1];
        }
        let pos = (v - lo) / dx;
        let i = (pos.floor() as usize).min(m - 2);
        let t = pos - i as f64;
        cdf[i] * (1.0 - t) + cdf[i + 1] * t
    };
    let draws = 100_000;
    let mut samples: Vec<f64> = (0..draws).map(|_| kde.sample_conditional(&[c], &mut rng)).collect();
    samples.sort_by(f64::total_cmp);
    let mut ks = 0.0f64;
    for (i, &s) in samples.iter().enumerate() {
        let f = cdf_at(s);
        ks = ks.max((f - i as f64 / draws as f64).abs()).max(((i + 1) as f64 / draws as f64 - f).abs());
    }
    Ok((
        worst_norm <= 1e-4 && ks <= 0.01,
        format!("max |integral - 1| {worst_norm:.2e}; sampler vs pdf KS {ks:.4} ({draws} draws)"),
    ))
}

// 8 ---------------------------------------------------------------------

fn per_interval_norms(set: &ErrorTrainingSet) -> f64 {
    set.records
        .iter()
        .map(|r| r.eta.iter().map(|e| e * e).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn perfect_model_end_to_end() -> Outcome {
    let cfg = ExperimentConfig::load(&configs_dir().join("perfect_model.json")).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    cmd_generate(&cfg, dir.path()).map_err(err)?;
    let methods = [Method::Proposed, Method::B2, Method::B1];
    let summary = cmd_train(&cfg, dir.path(), Some(&methods)).map_err(err)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for m in methods {
        let t = summary.get(m).ok_or("method missing from summary")?;
        if !t.ok {
            return Ok((false, format!("{m} failed: {:?}", t.message)));
        }
        let set = ErrorTrainingSet::read_csv(&dir.path().join(format!("errors_{m}.csv"))).map_err(err)?;
        let worst = per_interval_norms(&set);
        ok &= worst <= 1e-6 && !set.is_empty();
        parts.push(format!("{m} {worst:.1e}"));
    }
    Ok((ok, format!("max per-interval |eta|: {}", parts.join(", "))))
}

// 9 ---------------------------------------------------------------------

/// Injected error: piecewise linear in the previous value of the same
/// variable, kept away from zero so relative bin errors are meaningful.
fn toy_f(x: f64) -> f64 {
    if x < 2.0 {
        0.1 + 0.006 * (x - 2.0)
    } else {
        0.1 - 0.004 * (x - 2.0)
    }
}

struct BinComparison {
    max_rel: f64,
    total_abs: f64,
    bins: usize,
}

/// Pooled over all variables, binned on the true previous state.
fn compare_bins(est: &ErrorTrainingSet, truth: &[StateVector], n_bins: usize, min_count: usize) -> BinComparison {
    let mut xs = Vec::new();
    let mut etas = Vec::new();
    for rec in est.records.iter().filter(|r| !r.tail) {
        let prev = &truth[rec.time_index - 1];
        for k in 0..prev.len() {
            xs.push(prev[k]);
            etas.push(rec.eta[k]);
        }
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut sums = vec![(0.0, 0.0, 0usize); n_bins];
    for (x, e) in xs.iter().zip(&etas) {
        let b = (((x - lo) / width) as usize).min(n_bins - 1);
        sums[b].0 += e;
        sums[b].1 += toy_f(*x);
        sums[b].2 += 1;
    }
    let mut out = BinComparison {
        max_rel: 0.0,
        total_abs: 0.0,
        bins: 0,
    };
    for (se, sf, n) in sums.into_iter().filter(|s| s.2 >= min_count) {
        let (me, mf) = (se / n as f64, sf / n as f64);
        out.max_rel = out.max_rel.max((me - mf).abs() / mf.abs());
        out.total_abs += (me - mf).abs();
        out.bins += 1;
    }
    out
}

fn toy_recovery() -> Outcome {
    let model = SingleScaleModel::new(4, 8.0, 0.01, 5);
    let mut x = DVector::from_vec(vec![1.0, 3.0, -2.0, 5.0]);
    for _ in 0..400 {
        x = model.forecast(&x).map_err(err)?;
    }
    let mut truth = vec![x.clone()];
    for _ in 0..500 {
        let mut next = model.forecast(&x).map_err(err)?;
        for k in 0..4 {
            next[k] += toy_f(x[k]);
        }
        truth.push(next.clone());
        x = next;
    }
    let h = ObservationOperator::from_one_based(&[1, 3], 4).map_err(err)?;
    let r = [1e-6, 1e-6];
    let obs = synthesize_observations(&truth[1..], &h, &r, 1, &mut ChaCha8Rng::seed_from_u64(9)).map_err(err)?;
    let lm = LmOptions {
        max_iterations: 20,
        ..LmOptions::default()
    };
    let tau = 20;
    let proposed = estimate_errors(&WindowMethod::ConditionalVariance(BinSpec::one_dim(8)), &obs, &truth[0], &model, &h, tau, &lm)
        .map_err(err)?;
    let true_errors = ErrorTrainingSet::from_truth(&truth, &model, 1).map_err(err)?;
    let etas: Vec<DVector<f64>> = true_errors.records.iter().map(|r| DVector::from_column_slice(&r.eta)).collect();
    let (_, q) = sample_covariance(&etas).map_err(err)?;
    let b2 = estimate_errors(
        &WindowMethod::FourDVar {
            q,
            r_diag: r.to_vec(),
        },
        &obs,
        &truth[0],
        &model,
        &h,
        tau,
        &lm,
    )
    .map_err(err)?;

    let p = compare_bins(&proposed, &truth, 8, 20);
    let b = compare_bins(&b2, &truth, 8, 20);
    Ok((
        p.bins > 0 && p.max_rel <= 0.10 && b.total_abs > p.total_abs,
        format!(
            "proposed max bin error {:.1}% over {} bins (sum {:.4}); B2 max {:.1}% (sum {:.4})",
            100.0 * p.max_rel,
            p.bins,
            p.total_abs,
            100.0 * b.max_rel,
            b.total_abs
        ),
    ))
}

// 10-13 ------------------------------------------------------------------

struct Reduced {
    cfg: ExperimentConfig,
    dir: tempfile::TempDir,
    train: OnceCell<Result<(TrainSummary, Duration), String>>,
    assim: OnceCell<Result<(AssimilateSummary, EvaluateSummary, Duration, Duration), String>>,
}

impl Reduced {
    fn new() -> Result<Self, String> {
        Ok(Self {
            cfg: ExperimentConfig::load(&configs_dir().join("case1_reduced.json")).map_err(err)?,
            dir: tempfile::tempdir().map_err(err)?,
            train: OnceCell::new(),
            assim: OnceCell::new(),
        })
    }

    fn trained(&self) -> Result<&(TrainSummary, Duration), String> {
        self.train
            .get_or_init(|| {
                let t = Instant::now();
                cmd_generate(&self.cfg, self.dir.path()).map_err(err)?;
                let s = cmd_train(&self.cfg, self.dir.path(), Some(&[Method::Proposed, Method::B2, Method::B1]))
                    .map_err(err)?;
                Ok((s, t.elapsed()))
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    fn campaign(&self) -> Result<&(AssimilateSummary, EvaluateSummary, Duration, Duration), String> {
        self.trained()?;
        self.assim
            .get_or_init(|| {
                let t = Instant::now();
                let methods = [Method::Proposed, Method::B1, Method::B2];
                let a = cmd_assimilate(&self.cfg, self.dir.path(), Some(&methods)).map_err(err)?;
                let assim_time = t.elapsed();
                let t = Instant::now();
                let e = cmd_evaluate(&self.cfg, self.dir.path(), Some(&methods)).map_err(err)?;
                Ok((a, e, assim_time, t.elapsed()))
            })
            .as_ref()
            .map_err(Clone::clone)
    }
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn kld_ordering(r: &Reduced) -> Outcome {
    let (s, time) = r.trained()?;
    let k = |m: Method| -> Result<f64, String> {
        let t = s.get(m).ok_or(format!("{m} missing"))?;
        t.kld.ok_or(format!("{m}: no KLD ({:?})", t.message))
    };
    let (p, b2, b1) = (k(Method::Proposed)?, k(Method::B2)?, k(Method::B1)?);
    Ok((
        2.0 * p <= b2 && 2.0 * b2 <= b1 && minutes(*time) <= 30.0,
        format!(
            "KLD proposed {p:.3}, B2 {b2:.3}, B1 {b1:.3} (ratios {:.2}, {:.2}); generate+train {:.1} min",
            b2 / p,
            b1 / b2,
            minutes(*time)
        ),
    ))
}

fn lead_06(r: &Reduced) -> usize {
    (0.6 / r.cfg.obs.interval_mtu).round() as usize
}

fn campaign_skill(r: &Reduced) -> Outcome {
    let (a, e, at, et) = r.campaign()?;
    for m in &a.methods {
        if !m.ok {
            return Ok((false, format!("{} campaign failed: {:?}", m.method, m.message)));
        }
    }
    let lead = lead_06(r) as f64 * r.cfg.obs.interval_mtu;
    let fss = |m: Method, b: Method, metric: &str| -> Result<f64, String> {
        e.skill(m, b, metric, lead)
            .and_then(|s| s.fss_mean)
            .ok_or(format!("no {metric} skill for {m} vs {b}"))
    };
    let crps_b1 = fss(Method::Proposed, Method::B1, "crps")?;
    let rmse_b1 = fss(Method::Proposed, Method::B1, "rmse")?;
    let rmse_b2 = fss(Method::Proposed, Method::B2, "rmse")?;
    let time = minutes(*at + *et);
    Ok((
        crps_b1 > 0.0 && rmse_b1 > 0.0 && rmse_b2 >= 0.0 && time <= 30.0,
        format!(
            "lead {lead:.2} MTU: FSS vs B1 crps {crps_b1:.3}, rmse {rmse_b1:.3}; FSS vs B2 rmse {rmse_b2:.3}; campaign {time:.1} min"
        ),
    ))
}

fn climatology_ks(r: &Reduced) -> Outcome {
    let (_, e, _, et) = r.campaign()?;
    let p = e.ks(Method::Proposed.name()).ok_or("no proposed climatology")?;
    let none = e.ks(Method::None.name()).ok_or("no unparameterized climatology")?;
    Ok((
        p < none && minutes(*et) <= 10.0,
        format!("KS distance to full model: proposed {p:.4}, unparameterized {none:.4}; evaluate {:.1} min", minutes(*et)),
    ))
}

fn spread_error(r: &Reduced) -> Outcome {
    let (_, e, _, _) = r.campaign()?;
    let lead = lead_06(r);
    let p = e.mismatch(Method::Proposed, lead).ok_or("no proposed spread-error table")?;
    let b1 = e.mismatch(Method::B1, lead).ok_or("no B1 spread-error table")?;
    Ok((p <= b1, format!("lead {lead} intervals: max relative mismatch proposed {p:.3}, B1 {b1:.3}")))
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: u32| selected.is_empty() || selected.contains(&i);
    let reduced = Reduced::new();

    let fast: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "ETKF matches the Kalman filter", etkf_matches_kalman_filter),
        (2, "CRPS closed form matches integration", crps_closed_form),
        (3, "KLD estimator accuracy", kld_accuracy),
        (4, "RK4 fourth-order convergence", rk4_order),
        (5, "Levenberg-Marquardt reference problems", lm_solves_reference_problems),
        (6, "observation constraint on committed steps", observation_constraint),
        (7, "conditional KDE normalization and sampling", kde_normalization_and_sampling),
        (8, "perfect-model estimates vanish", perfect_model_end_to_end),
        (9, "toy state-dependent error recovery", toy_recovery),
    ];
    let slow: [(u32, &str, fn(&Reduced) -> Outcome); 4] = [
        (10, "reduced Case 1 KLD ordering", kld_ordering),
        (11, "reduced campaign forecast skill", campaign_skill),
        (12, "parameterized climatology", climatology_ks),
        (13, "spread-error consistency", spread_error),
    ];

    let mut failures = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome, elapsed: Duration| {
        let (tag, detail) = match outcome {
            Ok((true, d)) => ("PASS", d),
            Ok((false, d)) => ("FAIL", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            failures += 1;
        }
        println!("{tag} {id:>2} {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    };

    let suite = Instant::now();
    for (id, name, f) in fast {
        if want(id) {
            let t = Instant::now();
            let outcome = f();
            report(id, name, outcome, t.elapsed());
        }
    }
    if fast.iter().any(|c| want(c.0)) {
        println!("criteria 1-9 took {:.1}s", suite.elapsed().as_secs_f64());
    }
    for (id, name, f) in slow {
        if want(id) {
            let t = Instant::now();
            let outcome = match &reduced {
                Ok(r) => f(r),
                Err(e) => Err(e.clone()),
            };
            report(id, name, outcome, t.elapsed());
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
