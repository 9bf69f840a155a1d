mod config;
mod output;

use clap::{Args, Parser, Subcommand};
use config::{ConfigError, LoadedConfig};
use obsfit::cedr::dimension_ranges;
use obsfit::experiment::{
    default_sizes, demo_nonident, run_convergence, run_experiment, run_kernel, ExperimentOutcome, SeedRecord,
};
use obsfit::model_selection::{state_ensembles, SweepResult};
use obsfit::state_model::{TimeGrid, TrajectoryEnsemble};
use output::{key_values, Format, OutputDir};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "obsfit", version, about = "Estimate observation functions from unlabeled ensemble data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (default: the configured one, else `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv, global = true)]
    format: Format,
    /// Also write per-cell wall-clock times (`timing.csv`).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate states and observations.
    Simulate,
    /// Run the estimator end to end and write the selected estimator.
    Estimate,
    /// Dimension ranges only.
    Cedr,
    /// Full (degree, dimension) sweep table.
    Sweep,
    /// Error against sample size over repeated runs.
    Converge,
    /// RKHS kernels and the spectrum of the integral operator.
    Kernel,
    /// Reflection-symmetric Brownian and stationary OU cases.
    DemoNonident {
        /// Independent state ensembles for the loss comparison.
        #[arg(long, default_value_t = 4)]
        loss_ensembles: usize,
    },
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Estimate => "estimate",
            Command::Cedr => "cedr",
            Command::Sweep => "sweep",
            Command::Converge => "converge",
            Command::Kernel => "kernel",
            Command::DemoNonident { .. } => "demo-nonident",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: &'a str,
    config: &'a obsfit::experiment::ExperimentConfig,
    seeds: SeedRecord,
    status: &'a str,
    error: Option<String>,
    files: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    notes: Vec<(String, String)>,
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(format!("i/o: {e}"))
    }
}

impl From<obsfit::Error> for Failure {
    fn from(e: obsfit::Error) -> Self {
        match e {
            obsfit::Error::Config { .. } => Failure::Config(e.to_string()),
            e => Failure::Numerical(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let loaded = config::load(cli.common.config.as_deref(), cli.common.seed)?;
    if let Some(w) = cli.common.workers {
        if w == 0 {
            return Err(Failure::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Failure::Numerical(format!("thread pool: {e}")))?;
    }
    let dir = cli
        .common
        .out
        .clone()
        .or_else(|| loaded.config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut out = OutputDir::create(&dir, cli.common.format, &loaded.hash, loaded.experiment.seed)?;
    let mut notes = vec![];
    let result = execute(cli.command, &loaded, &mut out, &mut notes, cli.common.timing);
    let (status, error) = match &result {
        Ok(()) => ("ok", None),
        Err(Failure::Config(m)) | Err(Failure::Numerical(m)) => ("error", Some(m.clone())),
    };
    if let Some(msg) = &error {
        out.json("error.json", &serde_json::json!({ "command": cli.command.name(), "error": msg }))?;
    }
    let manifest = Manifest {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: &loaded.hash,
        config: &loaded.config,
        seeds: loaded.experiment.seeds(),
        status,
        error,
        files: out.files.clone(),
        notes,
    };
    out.json("manifest.json", &manifest)?;
    log::info!("{} files written to {}", out.files.len(), out.dir.display());
    result
}

fn execute(
    command: Command,
    loaded: &LoadedConfig,
    out: &mut OutputDir,
    notes: &mut Vec<(String, String)>,
    timing: bool,
) -> Result<(), Failure> {
    let exp = &loaded.experiment;
    match command {
        Command::Simulate => {
            let data = exp.generate()?;
            out.table("states", &ensemble_csv(&data.states), &data.states)?;
            out.table("observations", &ensemble_csv(&data.observations), &data.observations)?;
            if let Some(snr) = data.snr {
                notes.push(("snr".into(), format!("{snr:e}")));
            }
        }
        Command::Estimate => {
            let outcome = run_experiment(exp)?;
            write_sweep(out, &outcome.sweep, timing)?;
            write_estimator(out, &outcome, exp.grid)?;
            if let Some(snr) = outcome.snr {
                notes.push(("snr".into(), format!("{snr:e}")));
            }
        }
        Command::Sweep => {
            let outcome = run_experiment(exp)?;
            write_sweep(out, &outcome.sweep, timing)?;
            let sel = outcome.sweep.selected;
            notes.push(("selected".into(), format!("degree {} n {}", sel.0, sel.1)));
        }
        Command::Cedr => {
            let data = exp.generate()?;
            let (xprime, _) = state_ensembles(&exp.model, &exp.init, &data.observations, &exp.sweep)?;
            let reports = dimension_ranges(&xprime, &data.observations, &exp.sweep.degrees, &exp.sweep.cedr)?;
            let csv: String = cedr_csv(&reports);
            out.table("cedr", &csv, &reports)?;
            let mut s = String::from("degree,n_selected,n_last_below,capped\n");
            for r in &reports {
                s.push_str(&format!("{},{},{},{}\n", r.degree, r.n_selected, r.n_last_below, r.capped));
            }
            out.table("cedr_ranges", &s, &reports.iter().map(|r| (r.degree, r.n_selected)).collect::<Vec<_>>())?;
        }
        Command::Converge => {
            let c = &loaded.config.convergence;
            let sizes = c.sizes.clone().unwrap_or_else(default_sizes);
            let space = match (c.degree, c.dim) {
                (Some(p), Some(n)) => Some((p, n)),
                (None, None) => None,
                _ => {
                    return Err(Failure::Config("convergence.degree and convergence.dim go together".into()));
                }
            };
            let study = run_convergence(exp, &sizes, c.repeats, space)?;
            out.table("convergence", &study.to_csv(), &study)?;
            let mut s = String::from("m,mean_error,std_error\n");
            for ((m, mean), sd) in study.sizes.iter().zip(&study.mean).zip(&study.std) {
                s.push_str(&format!("{m},{mean:e},{sd:e}\n"));
            }
            s.push_str(&format!("# rate={:e}\n", study.rate));
            out.table("convergence_summary", &s, &(&study.mean, &study.std, study.rate))?;
        }
        Command::Kernel => {
            let (kg, spectrum) = run_kernel(exp, &loaded.config.kernel)?;
            out.table("kernel", &kg.to_csv(), &kg)?;
            out.table("spectrum", &spectrum.to_csv(), &spectrum)?;
        }
        Command::DemoNonident { loss_ensembles } => {
            let report = demo_nonident(exp, loss_ensembles)?;
            let s = &report.symmetric;
            let o = &report.stationary;
            let rows = vec![
                ("symmetric.degree", s.selected.0.to_string()),
                ("symmetric.n", s.selected.1.to_string()),
                ("symmetric.error_estimate", format!("{:e}", s.error_estimate)),
                ("symmetric.error_reflected", format!("{:e}", s.error_reflected)),
                ("symmetric.w2_test", format!("{:e}", s.w2_test)),
                ("symmetric.loss_gap", format!("{:e}", s.loss_gap)),
                ("symmetric.mc_noise", format!("{:e}", s.mc_noise)),
                ("stationary.degree", o.selected.0.to_string()),
                ("stationary.n", o.selected.1.to_string()),
                ("stationary.error", format!("{:e}", o.error)),
                ("stationary.w2_test", format!("{:e}", o.w2_test)),
                (
                    "stationary.max_rank_a1",
                    o.rank_a1.iter().map(|r| r.1).max().unwrap_or(0).to_string(),
                ),
            ];
            out.table("nonident", &key_values(&rows), &report)?;
            let mut l = String::from("ensemble,loss_truth,loss_reflected\n");
            for (k, (a, b)) in s.loss_truth.iter().zip(&s.loss_reflected).enumerate() {
                l.push_str(&format!("{k},{a:e},{b:e}\n"));
            }
            out.table("nonident_losses", &l, &(&s.loss_truth, &s.loss_reflected))?;
        }
    }
    Ok(())
}

fn ensemble_csv(e: &TrajectoryEnsemble) -> String {
    let mut s = String::from("path");
    for l in 0..=e.steps() {
        s.push_str(&format!(",t{l}"));
    }
    s.push('\n');
    for (m, p) in e.paths().enumerate() {
        s.push_str(&m.to_string());
        for v in p {
            s.push_str(&format!(",{v:e}"));
        }
        s.push('\n');
    }
    s
}

fn cedr_csv(reports: &[obsfit::cedr::CedrReport]) -> String {
    let mut csv = String::new();
    for (k, r) in reports.iter().enumerate() {
        let t = r.to_csv();
        csv.push_str(if k == 0 { &t } else { t.split_once('\n').map_or("", |x| x.1) });
    }
    csv
}

fn write_sweep(out: &mut OutputDir, sweep: &SweepResult, timing: bool) -> Result<(), Failure> {
    out.table("sweep", &sweep.to_csv(), &sweep.cells)?;
    out.table("cedr", &cedr_csv(&sweep.cedr), &sweep.cedr)?;
    if timing {
        std::fs::write(out.dir.join("timing.csv"), sweep.timing_csv())?;
    }
    Ok(())
}

fn write_estimator(out: &mut OutputDir, o: &ExperimentOutcome, grid: TimeGrid) -> Result<(), Failure> {
    let est = &o.sweep.estimator;
    let (lo, hi) = est.space.basis.support();
    let mut c = format!("# degree={} n={} r_min={lo:e} r_max={hi:e}\nindex,coefficient\n", est.degree, est.n);
    for (k, v) in est.coefficients.iter().enumerate() {
        c.push_str(&format!("{k},{v:e}\n"));
    }
    out.table("coefficients", &c, est)?;
    let mut w = String::from("l,time,w2_train,w2_test\n");
    for (l, (a, b)) in est.w2_train.per_time.iter().zip(&est.w2_test.per_time).enumerate() {
        w.push_str(&format!("{},{:e},{a:e},{b:e}\n", l + 1, grid.time(l + 1)));
    }
    out.table("w2", &w, &(&est.w2_train, &est.w2_test))?;
    let rows = vec![
        ("degree", est.degree.to_string()),
        ("n", est.n.to_string()),
        ("loss", format!("{:e}", est.loss.total)),
        ("relative_error", format!("{:e}", o.relative_error)),
        ("w2_train", format!("{:e}", est.w2_train.score)),
        ("w2_test", format!("{:e}", est.w2_test.score)),
        ("converged", est.optimization.converged.to_string()),
        ("snr", o.snr.map_or("".into(), |s| format!("{s:e}"))),
    ];
    out.table("summary", &key_values(&rows), &rows)?;
    Ok(())
}
