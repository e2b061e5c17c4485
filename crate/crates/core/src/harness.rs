//! Synthetic data, the end-to-end fit pipeline, repeated-trial experiments
//! and their reports.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{format_list, parse_list, parse_value, KeyValues};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gpr::{fit_hyper, std_dev};
use crate::inference::{semi_adam_fit, ConstraintSet, EstimationResult, FitConfig, Hyper, LmlGrad, Problem};
use crate::linearizer::{
    fixed_points_from_gpr, fixed_points_from_observations, mc_marginalize_fixed_points, FixedPointTable,
};
use crate::predictor::{gpr_baseline, mse, predict, rk4_reference, PosteriorCurve, Trajectory, RK4_STEPS};
use crate::system::{SystemKind, SystemModel};

/// Raw observations serve as fixed points when the noise is at most this
/// fraction of the data spread.
pub const RAW_FIXED_POINT_RATIO: f64 = 0.05;
/// Largest tolerated fraction of failed trials.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;
/// Dense grid size for curve MSEs.
pub const MSE_GRID: usize = 1001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedPointMode {
    /// Raw observations for small noise, GPR smoothing otherwise.
    Auto,
    Observed,
    Smoothed,
}

impl std::str::FromStr for FixedPointMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(Self::Auto),
            "observed" => Ok(Self::Observed),
            "smoothed" => Ok(Self::Smoothed),
            other => Err(Error::config(format!("fixed_points must be auto, observed or smoothed, got `{other}`"))),
        }
    }
}

/// Builds the fixed-point table a nonlinear system needs. `noise_hint` is
/// the known noise std, when there is one.
pub fn choose_fixed_points(
    kind: SystemKind,
    dataset: &Dataset,
    mode: FixedPointMode,
    noise_hint: Option<f64>,
) -> Result<Option<FixedPointTable>> {
    let Some(sources) = kind.fixed_point_sources() else {
        return Ok(None);
    };
    let smoothed = || fixed_points_from_gpr(dataset, &sources).map(|s| Some(s.table));
    match mode {
        FixedPointMode::Observed => fixed_points_from_observations(dataset, &sources).map(Some),
        FixedPointMode::Smoothed => smoothed(),
        FixedPointMode::Auto => {
            if sources.iter().any(|s| matches!(s, crate::linearizer::StateSource::DerivativeOf(_))) {
                return smoothed();
            }
            let mut small = true;
            for j in 0..dataset.dim() {
                let (t, y) = dataset.component(j);
                if y.is_empty() {
                    continue;
                }
                let sigma = match noise_hint {
                    Some(s) => s,
                    None => fit_hyper(&t, &y)?.hyper.noise,
                };
                small &= sigma <= RAW_FIXED_POINT_RATIO * std_dev(&y);
            }
            if small {
                fixed_points_from_observations(dataset, &sources).map(Some)
            } else {
                smoothed()
            }
        }
    }
}

/// Everything needed to rebuild the posterior of a finished fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub system: SystemKind,
    pub dataset: Dataset,
    pub fixed_points: Option<FixedPointTable>,
    pub config: FitConfig,
    pub result: EstimationResult,
}

impl FitArtifact {
    pub fn model(&self) -> Result<SystemModel> {
        let model = self.system.build(self.fixed_points.clone().map(Arc::new))?;
        match &self.config.theta_bounds {
            Some(b) => model.with_param_bounds(b.clone()),
            None => Ok(model),
        }
    }

    pub fn predict(&self, component: usize, order: usize, query: &[f64]) -> Result<PosteriorCurve> {
        let r = &self.result;
        predict(&self.model()?, &self.dataset, &r.constraints, &r.theta, &r.hyper, r.sigma_v, component, order, query)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Default starting box for a system: its reference parameters scaled by
/// `1 -/+ spread`.
pub fn init_box(truth: &[f64], spread: f64) -> Vec<(f64, f64)> {
    truth
        .iter()
        .map(|&v| {
            let (a, b) = (v * (1.0 - spread), v * (1.0 + spread));
            if a < b {
                (a, b)
            } else if a > b {
                (b, a)
            } else {
                (v - spread, v + spread)
            }
        })
        .collect()
}

/// Fixed points, model and Semi-Adam fit for one dataset.
pub fn fit_dataset(
    kind: SystemKind,
    dataset: &Dataset,
    config: &FitConfig,
    mode: FixedPointMode,
    noise_hint: Option<f64>,
) -> Result<FitArtifact> {
    let fixed_points = choose_fixed_points(kind, dataset, mode, noise_hint)?;
    let mut config = config.clone();
    if config.theta_init.is_none() && config.init_box.is_none() {
        config.init_box = Some(init_box(&kind.default_truth(), 0.5));
    }
    let artifact_model = kind.build(fixed_points.clone().map(Arc::new))?;
    let model = match &config.theta_bounds {
        Some(b) => artifact_model.with_param_bounds(b.clone())?,
        None => artifact_model,
    };
    let result = semi_adam_fit(&model, dataset, &config)?;
    Ok(FitArtifact { system: kind, dataset: dataset.clone(), fixed_points, config, result })
}

/// Log marginal likelihood and gradient averaged over fixed-point tables
/// drawn from the smoother posterior.
#[allow(clippy::too_many_arguments)]
pub fn marginal_objective(
    kind: SystemKind,
    dataset: &Dataset,
    table: &FixedPointTable,
    samples: usize,
    seed: u64,
    constraints: &ConstraintSet,
    theta: &[f64],
    hyper: &Hyper,
    sigma_v: f64,
) -> Result<(f64, Vec<f64>)> {
    mc_marginalize_fixed_points(table, samples, seed, |draw| {
        let model = kind.build(Some(Arc::new(draw.clone())))?;
        let g: LmlGrad = Problem::new(&model, dataset, sigma_v)?.objective_and_grad(&constraints.times, theta, hyper)?;
        Ok((g.value, g.grad_theta))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub system: SystemKind,
    pub n: usize,
    pub noise_sigma: f64,
    pub trials: usize,
    pub truth: Vec<f64>,
    pub initial_state: Vec<f64>,
    pub t_max: f64,
    pub seed: u64,
    /// Relative half-width of the box initial parameters are drawn from.
    pub init_spread: f64,
    pub fixed_points: FixedPointMode,
    /// Adds predictor, ODE-solver and GPR curve MSEs per trial.
    pub mse: bool,
    pub workers: usize,
    pub fit: FitConfig,
}

impl ExperimentSpec {
    pub fn new(system: SystemKind, n: usize, noise_sigma: f64, trials: usize) -> Self {
        Self {
            system,
            n,
            noise_sigma,
            trials,
            truth: system.default_truth(),
            initial_state: system.initial_state(),
            t_max: system.default_t_max(),
            seed: 0,
            init_spread: 0.5,
            fixed_points: FixedPointMode::Auto,
            mse: false,
            workers: 0,
            fit: FitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.n < 3 {
            return Err(Error::config("n must be at least 3"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return Err(Error::config("t_max must be positive"));
        }
        if self.truth.len() != self.system.param_names().len() {
            return Err(Error::config(format!(
                "truth needs {} values for {}",
                self.system.param_names().len(),
                self.system
            )));
        }
        if self.initial_state.len() != self.system.dim() {
            return Err(Error::config(format!("x0 needs {} values for {}", self.system.dim(), self.system)));
        }
        if !(self.init_spread.is_finite() && self.init_spread >= 0.0) {
            return Err(Error::config("init_spread must be non-negative"));
        }
        self.fit.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let system: SystemKind =
            kv.get("system").ok_or_else(|| Error::config("experiment spec needs `system`"))?.parse()?;
        let mut spec = Self::new(system, 100, 0.0, 1);
        for (k, v) in kv.iter() {
            match k {
                "system" => {}
                "n" => spec.n = parse_value(k, v)?,
                "noise_sigma" | "sigma" => spec.noise_sigma = parse_value(k, v)?,
                "trials" => spec.trials = parse_value(k, v)?,
                "truth" => spec.truth = parse_list(k, v)?,
                "x0" | "initial_state" => spec.initial_state = parse_list(k, v)?,
                "t_max" => spec.t_max = parse_value(k, v)?,
                "seed" => spec.seed = parse_value(k, v)?,
                "init_spread" => spec.init_spread = parse_value(k, v)?,
                "fixed_points" => spec.fixed_points = v.parse()?,
                "mse" => spec.mse = parse_value(k, v)?,
                "workers" => spec.workers = parse_value(k, v)?,
                "fit_seed" => spec.fit.seed = parse_value(k, v)?,
                _ => {
                    if !spec.fit.set(k, v)? {
                        return Err(Error::config(format!("unknown experiment setting `{k}`")));
                    }
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?)
    }

    /// Key-value form accepted by [`ExperimentSpec::parse`].
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "system = {}", self.system).unwrap();
        writeln!(out, "n = {}", self.n).unwrap();
        writeln!(out, "noise_sigma = {:?}", self.noise_sigma).unwrap();
        writeln!(out, "trials = {}", self.trials).unwrap();
        writeln!(out, "truth = {}", format_list(&self.truth)).unwrap();
        writeln!(out, "x0 = {}", format_list(&self.initial_state)).unwrap();
        writeln!(out, "t_max = {:?}", self.t_max).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        writeln!(out, "init_spread = {:?}", self.init_spread).unwrap();
        let fp = match self.fixed_points {
            FixedPointMode::Auto => "auto",
            FixedPointMode::Observed => "observed",
            FixedPointMode::Smoothed => "smoothed",
        };
        writeln!(out, "fixed_points = {fp}").unwrap();
        writeln!(out, "mse = {}", self.mse).unwrap();
        writeln!(out, "workers = {}", self.workers).unwrap();
        for line in self.fit.to_key_values().lines() {
            // the per-trial fit seed is derived, so the spec seed stands in
            if let Some(v) = line.strip_prefix("seed = ") {
                writeln!(out, "fit_seed = {v}").unwrap();
            } else {
                writeln!(out, "{line}").unwrap();
            }
        }
        out
    }

    pub fn time_grid(&self) -> Vec<f64> {
        linspace(self.t_max, self.n)
    }

    fn trial_rng(&self, trial: usize, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * trial as u64 + purpose);
        rng
    }
}

pub fn linspace(t_max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Noise-free trajectory of the spec's system on `grid`.
pub fn truth_trajectory(spec: &ExperimentSpec, grid: &[f64]) -> Result<Trajectory> {
    let field = spec.system.field();
    rk4_reference(field.as_ref(), &spec.truth, &spec.initial_state, grid, spec.t_max / RK4_STEPS)
}

/// Observations at `n` equally spaced times on `[0, t_max]` with iid
/// Gaussian noise on the observed components; trial `k` uses its own stream.
pub fn generate_dataset(spec: &ExperimentSpec, trial: usize) -> Result<Dataset> {
    spec.validate()?;
    let times = spec.time_grid();
    let traj = truth_trajectory(spec, &times)?;
    let mask = spec.system.observed_mask();
    let mut rng = spec.trial_rng(trial, 0);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let observations = traj
        .states
        .iter()
        .map(|x| {
            x.iter()
                .zip(&mask)
                .map(|(v, &m)| m.then(|| v + if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }))
                .collect()
        })
        .collect();
    Dataset::new(times, observations, spec.t_max)
}

/// MSEs of the latent component and its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveMse {
    pub proposed: [f64; 3],
    pub ode: [f64; 3],
    pub gpr: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub theta: Option<Vec<f64>>,
    pub iterations: usize,
    pub mse: Option<CurveMse>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub times: Vec<f64>,
    pub truth: Vec<Vec<f64>>,
    pub proposed: Vec<PosteriorCurve>,
    pub gpr: Vec<PosteriorCurve>,
    pub observations: (Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub spec: ExperimentSpec,
    pub param_names: Vec<String>,
    pub rows: Vec<TrialRow>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub single_trial: bool,
    pub failures: usize,
    pub mse_mean: Option<CurveMse>,
    /// Curves of the first successful trial, when MSEs were requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<CurveSet>,
}

fn sanitize(msg: &str) -> String {
    msg.replace([',', '\n', '\r'], ";")
}

fn trial_fit(spec: &ExperimentSpec, trial: usize) -> Result<(FitArtifact, Dataset)> {
    let data = generate_dataset(spec, trial)?;
    let mut cfg = spec.fit.clone();
    cfg.seed = spec.trial_rng(trial, 1).next_u64();
    if cfg.theta_init.is_none() && cfg.init_box.is_none() {
        cfg.init_box = Some(init_box(&spec.truth, spec.init_spread));
    }
    let hint = Some(spec.noise_sigma);
    let fit = fit_dataset(spec.system, &data, &cfg, spec.fixed_points, hint)?;
    Ok((fit, data))
}

fn curve_mse(spec: &ExperimentSpec, fit: &FitArtifact, data: &Dataset) -> Result<(CurveMse, CurveSet)> {
    let grid = linspace(spec.t_max, MSE_GRID);
    let truth = truth_trajectory(spec, &grid)?;
    let k = fit.model()?.latent_index();
    let ode = rk4_reference(
        spec.system.field().as_ref(),
        &fit.result.theta,
        &spec.initial_state,
        &grid,
        spec.t_max / RK4_STEPS,
    )?;
    let mut out = CurveMse { proposed: [0.0; 3], ode: [0.0; 3], gpr: [0.0; 3] };
    let mut proposed = Vec::new();
    let mut gpr = Vec::new();
    let mut truth_series = Vec::new();
    for order in 0..3 {
        let reference = truth.series(k, order);
        let p = fit.predict(k, order, &grid)?;
        let g = gpr_baseline(data, k, &grid, order)?;
        out.proposed[order] = p.mse(&reference);
        out.gpr[order] = g.mse(&reference);
        out.ode[order] = mse(&ode.series(k, order), &reference);
        proposed.push(p);
        gpr.push(g);
        truth_series.push(reference);
    }
    let observations = data.component(k);
    Ok((out, CurveSet { times: grid, truth: truth_series, proposed, gpr, observations }))
}

fn run_trial(spec: &ExperimentSpec, trial: usize) -> (TrialRow, Option<CurveSet>) {
    let outcome = trial_fit(spec, trial).and_then(|(fit, data)| {
        let extra = if spec.mse { Some(curve_mse(spec, &fit, &data)?) } else { None };
        Ok((fit, extra))
    });
    match outcome {
        Ok((fit, extra)) => {
            let (mse, curves) = match extra {
                Some((m, c)) => (Some(m), Some(c)),
                None => (None, None),
            };
            let row = TrialRow {
                trial,
                theta: Some(fit.result.theta.clone()),
                iterations: fit.result.diagnostics.iterations,
                mse,
                error: None,
            };
            (row, curves)
        }
        Err(e) => {
            log::warn!("trial {trial} failed: {e}");
            (TrialRow { trial, theta: None, iterations: 0, mse: None, error: Some(sanitize(&e.to_string())) }, None)
        }
    }
}

/// Mean and sample SD (ddof 1) of the successful rows; SD is 0 for a
/// single row.
pub fn aggregate(rows: &[TrialRow], p: usize) -> (Vec<f64>, Vec<f64>, Option<CurveMse>) {
    let thetas: Vec<&Vec<f64>> = rows.iter().filter_map(|r| r.theta.as_ref()).collect();
    let m = thetas.len();
    if m == 0 {
        return (vec![f64::NAN; p], vec![f64::NAN; p], None);
    }
    let mean: Vec<f64> = (0..p).map(|k| thetas.iter().map(|t| t[k]).sum::<f64>() / m as f64).collect();
    let sd = (0..p)
        .map(|k| {
            if m < 2 {
                0.0
            } else {
                (thetas.iter().map(|t| (t[k] - mean[k]).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
            }
        })
        .collect();
    let mses: Vec<&CurveMse> = rows.iter().filter_map(|r| r.mse.as_ref()).collect();
    let mse_mean = (!mses.is_empty()).then(|| {
        let avg = |f: &dyn Fn(&CurveMse) -> [f64; 3]| {
            let mut a = [0.0; 3];
            for c in &mses {
                let v = f(c);
                for i in 0..3 {
                    a[i] += v[i];
                }
            }
            a.map(|x| x / mses.len() as f64)
        };
        CurveMse { proposed: avg(&|c| c.proposed), ode: avg(&|c| c.ode), gpr: avg(&|c| c.gpr) }
    });
    (mean, sd, mse_mean)
}

/// Runs every trial, each on fresh data with its own optimizer seed.
/// Fails when more than a fifth of the trials fail.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<TrialReport> {
    spec.validate()?;
    let run = || -> Vec<(TrialRow, Option<CurveSet>)> {
        (0..spec.trials).into_par_iter().map(|k| run_trial(spec, k)).collect()
    };
    let results = if spec.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::config(e.to_string()))?
            .install(run)
    } else {
        run()
    };
    let curves = results.iter().find_map(|(_, c)| c.clone());
    let rows: Vec<TrialRow> = results.into_iter().map(|(r, _)| r).collect();
    let report = build_report(spec.clone(), rows, curves);
    if report.failures as f64 > MAX_FAILURE_FRACTION * spec.trials as f64 {
        let first = report.rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Error::Optimization(format!(
            "{} of {} trials failed (first error: {first})",
            report.failures, spec.trials
        )));
    }
    Ok(report)
}

fn build_report(spec: ExperimentSpec, rows: Vec<TrialRow>, curves: Option<CurveSet>) -> TrialReport {
    let param_names = spec.system.param_names();
    let (mean, sd, mse_mean) = aggregate(&rows, param_names.len());
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    let single_trial = rows.len() - failures == 1;
    TrialReport { spec, param_names, rows, mean, sd, single_trial, failures, mse_mean, curves }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "md" | "markdown" => Ok(Self::Markdown),
            "svg" => Ok(Self::Svg),
            other => Err(Error::config(format!("unknown report format `{other}`"))),
        }
    }
}

impl TrialReport {
    /// Spec as `# key = value` comment lines, then one row per trial.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for line in self.spec.to_key_values().lines() {
            writeln!(out, "# {line}").unwrap();
        }
        out.push_str("trial,status,iterations");
        for name in &self.param_names {
            write!(out, ",{name}").unwrap();
        }
        for group in ["proposed", "ode", "gpr"] {
            for order in 0..3 {
                write!(out, ",mse_{group}_d{order}").unwrap();
            }
        }
        out.push_str(",error\n");
        for r in &self.rows {
            let status = if r.error.is_some() { "failed" } else { "ok" };
            write!(out, "{},{status},{}", r.trial, r.iterations).unwrap();
            for k in 0..self.param_names.len() {
                match &r.theta {
                    Some(t) => write!(out, ",{:?}", t[k]).unwrap(),
                    None => out.push(','),
                }
            }
            for k in 0..9 {
                match &r.mse {
                    Some(m) => write!(out, ",{:?}", [m.proposed, m.ode, m.gpr][k / 3][k % 3]).unwrap(),
                    None => out.push(','),
                }
            }
            writeln!(out, ",{}", r.error.as_deref().unwrap_or("")).unwrap();
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut spec_text = String::new();
        let mut body = Vec::new();
        for line in text.lines() {
            match line.strip_prefix("# ") {
                Some(kv) => {
                    spec_text.push_str(kv);
                    spec_text.push('\n');
                }
                None if !line.trim().is_empty() => body.push(line),
                None => {}
            }
        }
        let spec = ExperimentSpec::parse(&spec_text)?;
        let p = spec.system.param_names().len();
        let expected_cols = 3 + p + 9 + 1;
        let mut rows = Vec::new();
        for line in body.iter().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != expected_cols {
                return Err(Error::parse(format!("report row has {} cells, expected {expected_cols}", cells.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(format!("bad number `{s}`")));
            let ok = cells[1] == "ok";
            let theta = if ok { Some(cells[3..3 + p].iter().map(|c| num(c)).collect::<Result<Vec<_>>>()?) } else { None };
            let mse_cells = &cells[3 + p..3 + p + 9];
            let mse = if mse_cells.iter().all(|c| !c.is_empty()) {
                let v = mse_cells.iter().map(|c| num(c)).collect::<Result<Vec<_>>>()?;
                Some(CurveMse {
                    proposed: [v[0], v[1], v[2]],
                    ode: [v[3], v[4], v[5]],
                    gpr: [v[6], v[7], v[8]],
                })
            } else {
                None
            };
            let err = cells[expected_cols - 1];
            rows.push(TrialRow {
                trial: parse_value("trial", cells[0])?,
                theta,
                iterations: parse_value("iterations", cells[2])?,
                mse,
                error: (!ok).then(|| err.to_string()),
            });
        }
        Ok(build_report(spec, rows, None))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn emit(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => Ok(self.to_csv_string()),
            ReportFormat::Json => self.to_json(),
            ReportFormat::Markdown => Ok(markdown_table(std::slice::from_ref(self))),
            ReportFormat::Svg => self
                .curves
                .as_ref()
                .map(curves_svg)
                .ok_or_else(|| Error::config("SVG output needs an experiment run with `mse = true`")),
        }
    }
}

pub fn emit_report(report: &TrialReport, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, report.emit(format)?)?;
    Ok(())
}

/// Mean and SD rows per sample size, one column group per noise level.
pub fn markdown_table(reports: &[TrialReport]) -> String {
    let mut sigmas: Vec<f64> = reports.iter().map(|r| r.spec.noise_sigma).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    let mut ns: Vec<usize> = reports.iter().map(|r| r.spec.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let names = reports.first().map(|r| r.param_names.clone()).unwrap_or_default();
    let mut out = String::from("| | ");
    for s in &sigmas {
        write!(out, "| sigma={s}").unwrap();
        for _ in 1..names.len() {
            out.push_str(" | ");
        }
        out.push(' ');
    }
    out.push_str("|\n| | ");
    for _ in &sigmas {
        for name in &names {
            write!(out, "| {name} ").unwrap();
        }
    }
    out.push_str("|\n|---|---");
    for _ in 0..sigmas.len() * names.len() {
        out.push_str("|---");
    }
    out.push_str("|\n");
    for n in &ns {
        for (label, pick) in [("Mean", 0), ("SD", 1)] {
            let first = if pick == 0 { format!("n={n}") } else { String::new() };
            write!(out, "| {first} | {label} ").unwrap();
            for s in &sigmas {
                let r = reports.iter().find(|r| r.spec.n == *n && r.spec.noise_sigma == *s);
                for k in 0..names.len() {
                    match r {
                        Some(r) => {
                            let v = if pick == 0 { r.mean[k] } else { r.sd[k] };
                            write!(out, "| {v:.4} ").unwrap();
                        }
                        None => out.push_str("| "),
                    }
                }
            }
            out.push_str("|\n");
        }
    }
    out
}

fn curves_svg(c: &CurveSet) -> String {
    // three stacked panels: state, first and second derivative
    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"1080\" viewBox=\"0 0 720 1080\">\n",
    );
    for (order, (p, truth)) in c.proposed.iter().zip(&c.truth).enumerate() {
        let obs = (order == 0).then_some((c.observations.0.as_slice(), c.observations.1.as_slice()));
        let panel = p.to_svg(obs, Some(truth));
        let inner = panel.lines().skip(1).filter(|l| *l != "</svg>").collect::<Vec<_>>().join("\n");
        writeln!(svg, "<g transform=\"translate(0,{})\">\n{inner}", 360 * order).unwrap();
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reference values for one experiment cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub label: &'static str,
    pub mean: Vec<f64>,
    pub mean_tol: f64,
    /// Reference SD with the accepted ratio band, or an absolute ceiling.
    pub sd: SdTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SdTarget {
    Ratio(Vec<f64>, f64),
    Max(f64),
    None,
}

/// Reference cell matching the spec's system, truth, sample size and noise.
pub fn reference_target(spec: &ExperimentSpec) -> Option<Target> {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let truth_is = |t: &[f64]| spec.truth.len() == t.len() && spec.truth.iter().zip(t).all(|(a, b)| close(*a, *b));
    let s = spec.noise_sigma;
    match spec.system {
        SystemKind::LinearChain if truth_is(&[1.0, 1.0]) => {
            let table: [(usize, f64, [f64; 2], [f64; 2]); 6] = [
                (50, 0.01, [0.970, 0.991], [0.013, 0.021]),
                (50, 0.05, [0.859, 0.851], [0.054, 0.062]),
                (50, 0.1, [0.768, 0.972], [0.150, 0.311]),
                (100, 0.01, [0.951, 1.027], [0.017, 0.020]),
                (100, 0.05, [0.890, 0.943], [0.040, 0.050]),
                (100, 0.1, [0.853, 0.918], [0.085, 0.100]),
            ];
            table.iter().find(|(n, sg, _, _)| *n == spec.n && close(*sg, s)).map(|(_, _, m, sd)| Target {
                label: "linear chain",
                mean: m.to_vec(),
                mean_tol: 0.10,
                sd: SdTarget::Ratio(sd.to_vec(), 2.0),
            })
        }
        SystemKind::VanDerPol if truth_is(&[0.5]) && close(s, 0.1) => {
            let mean = match spec.n {
                50 => 0.445,
                100 => 0.447,
                _ => return None,
            };
            Some(Target { label: "van der pol", mean: vec![mean], mean_tol: 0.06, sd: SdTarget::Max(0.12) })
        }
        SystemKind::FitzHughNagumo if truth_is(&[5.0, 1.0, 0.5]) && close(s, 0.1) => Some(Target {
            label: "fitzhugh-nagumo (5, 1, 0.5)",
            mean: vec![4.9987, 0.9997, 0.4781],
            mean_tol: 0.15,
            sd: SdTarget::None,
        }),
        SystemKind::FitzHughNagumo if truth_is(&[0.2, 0.2, 3.0]) && close(s, 0.3) => Some(Target {
            label: "fitzhugh-nagumo (0.2, 0.2, 3)",
            mean: vec![0.1998, 0.2511, 2.7465],
            mean_tol: 0.3,
            sd: SdTarget::None,
        }),
        _ => None,
    }
}

/// Reference curve MSEs of the constrained predictor for the Van der Pol
/// prediction protocol.
pub const CURVE_MSE_TARGET: [f64; 3] = [0.0008, 0.0023, 0.0130];
pub const CURVE_MSE_FACTOR: f64 = 3.0;
pub const GPR_SECOND_DERIVATIVE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Compares a report against the matching reference cell.
pub fn check_report(report: &TrialReport) -> Result<Vec<CheckOutcome>> {
    let target = reference_target(&report.spec)
        .ok_or_else(|| Error::config("no reference values for this experiment cell"))?;
    let mut out = Vec::new();
    for (k, name) in report.param_names.iter().enumerate() {
        let (m, t) = (report.mean[k], target.mean[k]);
        out.push(CheckOutcome {
            name: format!("{} mean {name}", target.label),
            passed: (m - t).abs() <= target.mean_tol,
            detail: format!("{m:.4} vs {t} +/- {}", target.mean_tol),
        });
        match &target.sd {
            SdTarget::Ratio(sd, f) => {
                let s = report.sd[k];
                out.push(CheckOutcome {
                    name: format!("{} sd {name}", target.label),
                    passed: s >= sd[k] / f && s <= sd[k] * f,
                    detail: format!("{s:.4} vs {} within x{f}", sd[k]),
                });
            }
            SdTarget::Max(max) => {
                let s = report.sd[k];
                out.push(CheckOutcome {
                    name: format!("{} sd {name}", target.label),
                    passed: s <= *max,
                    detail: format!("{s:.4} <= {max}"),
                });
            }
            SdTarget::None => {}
        }
    }
    if let (SystemKind::VanDerPol, Some(m)) = (report.spec.system, report.mse_mean) {
        for (order, (&got, &want)) in m.proposed.iter().zip(&CURVE_MSE_TARGET).enumerate() {
            out.push(CheckOutcome {
                name: format!("curve mse order {order}"),
                passed: got <= want * CURVE_MSE_FACTOR && got >= want / CURVE_MSE_FACTOR,
                detail: format!("{got:.5} vs {want} within x{CURVE_MSE_FACTOR}"),
            });
        }
        out.push(CheckOutcome {
            name: "gpr second-derivative mse ratio".into(),
            passed: m.gpr[2] >= GPR_SECOND_DERIVATIVE_FACTOR * m.proposed[2],
            detail: format!("{:.5} vs {:.5}", m.gpr[2], m.proposed[2]),
        });
    }
    Ok(out)
}

/// Uniform draw inside each `(lo, hi)`.
pub fn sample_box<R: Rng>(bounds: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    bounds.iter().map(|(lo, hi)| rng.gen_range(*lo..*hi)).collect()
}
