use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use megpr::config::{parse_list, parse_value, KeyValues};
use megpr::dataset::Dataset;
use megpr::harness::{
    check_report, fit_dataset, generate_dataset, run_experiment, ExperimentSpec, FitArtifact, FixedPointMode,
    ReportFormat,
};
use megpr::inference::FitConfig;
use megpr::system::SystemKind;
use megpr::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "megpr", version, about = "Parameter estimation for ODE systems with model-embedded Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit parameters and hyperparameters to a dataset.
    Fit {
        #[arg(long)]
        system: SystemKind,
        #[arg(long)]
        data: PathBuf,
        /// Key-value file with fit settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the fit JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-iteration trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a repeated-trial experiment.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        /// Compare against the reference values for this cell.
        #[arg(long)]
        check: bool,
        /// Writes <prefix>.csv, .json, .md and, with curves, .svg.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a noisy dataset.
    Generate {
        #[arg(long)]
        system: SystemKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        t_max: Option<f64>,
        /// Comma-separated parameter values.
        #[arg(long)]
        truth: Option<String>,
    },
    /// Posterior mean and variance of a component derivative.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        /// 1-based, matching the `y<i>` data columns.
        #[arg(long)]
        component: usize,
        #[arg(long, default_value_t = 0)]
        order: usize,
        /// `count` over [0, t_max] or `start:stop:count`.
        #[arg(long)]
        grid: String,
        /// `.csv` or `.svg`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_CONFIG })
        }
    }
}

fn run(command: Command) -> megpr::Result<ExitCode> {
    match command {
        Command::Fit { system, data, config, out, trace } => fit(system, &data, config.as_deref(), out, trace),
        Command::Experiment { spec, check, out } => experiment(&spec, check, out),
        Command::Generate { system, n, sigma, seed, out, t_max, truth } => {
            let mut spec = ExperimentSpec::new(system, n, sigma, 1);
            spec.seed = seed;
            if let Some(t) = t_max {
                spec.t_max = t;
            }
            if let Some(t) = truth {
                spec.truth = parse_list("truth", &t)?;
            }
            generate_dataset(&spec, 0)?.write_csv(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict { fit, component, order, grid, out } => predict(&fit, component, order, &grid, &out),
    }
}

fn fit(
    system: SystemKind,
    data: &Path,
    config: Option<&Path>,
    out: Option<PathBuf>,
    trace: Option<PathBuf>,
) -> megpr::Result<ExitCode> {
    let mut cfg = FitConfig::default();
    let mut mode = FixedPointMode::Auto;
    let mut t_max = None;
    let mut noise = None;
    if let Some(path) = config {
        for (k, v) in KeyValues::read(path)?.iter() {
            match k {
                "fixed_points" => mode = v.parse()?,
                "t_max" => t_max = Some(parse_value(k, v)?),
                "noise_sigma" => noise = Some(parse_value(k, v)?),
                _ => {
                    if !cfg.set(k, v)? {
                        return Err(Error::Config(format!("unknown fit setting `{k}`")));
                    }
                }
            }
        }
    }
    let t_max = t_max.unwrap_or(system.default_t_max());
    let dataset = Dataset::read_csv(data, Some(t_max))?;
    let artifact = fit_dataset(system, &dataset, &cfg, mode, noise)?;
    let r = &artifact.result;
    let d = &r.diagnostics;
    for (name, v) in r.param_names.iter().zip(&r.theta) {
        eprintln!("{name} = {v:.6}");
    }
    eprintln!(
        "iterations {} ({:?}), best at {}, smoothed objective {:.4} -> {:.4}",
        d.iterations, d.reason, d.best_iteration, d.initial_smoothed, d.best_smoothed
    );
    if let Some(path) = trace {
        std::fs::write(path, r.trace_csv())?;
    }
    let json = artifact.to_json()?;
    match out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn experiment(spec: &Path, check: bool, out: Option<PathBuf>) -> megpr::Result<ExitCode> {
    let spec = ExperimentSpec::read(spec)?;
    let report = run_experiment(&spec)?;
    if let Some(prefix) = out {
        let with_ext = |ext: &str| {
            let mut p = prefix.clone().into_os_string();
            p.push(ext);
            PathBuf::from(p)
        };
        std::fs::write(with_ext(".csv"), report.emit(ReportFormat::Csv)?)?;
        std::fs::write(with_ext(".json"), report.emit(ReportFormat::Json)?)?;
        std::fs::write(with_ext(".md"), report.emit(ReportFormat::Markdown)?)?;
        if report.curves.is_some() {
            std::fs::write(with_ext(".svg"), report.emit(ReportFormat::Svg)?)?;
        }
    }
    print!("{}", report.emit(ReportFormat::Markdown)?);
    if report.failures > 0 {
        eprintln!("{} of {} trials failed", report.failures, spec.trials);
    }
    if let Some(m) = &report.mse_mean {
        println!("curve mse proposed {:?}", m.proposed);
        println!("curve mse ode      {:?}", m.ode);
        println!("curve mse gpr      {:?}", m.gpr);
    }
    if !check {
        return Ok(ExitCode::SUCCESS);
    }
    let outcomes = check_report(&report)?;
    let mut ok = true;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        ok &= o.passed;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CHECK) })
}

fn parse_grid(spec: &str, t_max: f64) -> megpr::Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let (start, stop, count) = match parts.as_slice() {
        [n] => (0.0, t_max, parse_value::<usize>("grid", n)?),
        [a, b, n] => (parse_value("grid", a)?, parse_value("grid", b)?, parse_value::<usize>("grid", n)?),
        _ => return Err(Error::Config(format!("grid must be `count` or `start:stop:count`, got `{spec}`"))),
    };
    if count < 2 || !(start < stop) {
        return Err(Error::Config("grid needs at least 2 points and start < stop".into()));
    }
    Ok((0..count).map(|i| start + (stop - start) * i as f64 / (count - 1) as f64).collect())
}

fn predict(fit: &Path, component: usize, order: usize, grid: &str, out: &Path) -> megpr::Result<ExitCode> {
    let artifact = FitArtifact::read(fit)?;
    if component == 0 {
        return Err(Error::Config("components are numbered from 1".into()));
    }
    let query = parse_grid(grid, artifact.dataset.t_max)?;
    let curve = artifact.predict(component - 1, order, &query)?;
    let text = match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => curve.to_csv_string(),
        Some("svg") => {
            let (t, y) = artifact.dataset.component(component - 1);
            let obs = (order == 0 && !t.is_empty()).then_some((t.as_slice(), y.as_slice()));
            curve.to_svg(obs, None)
        }
        _ => return Err(Error::Config("--out must end in .csv or .svg".into())),
    };
    std::fs::write(out, text)?;
    Ok(ExitCode::SUCCESS)
}
