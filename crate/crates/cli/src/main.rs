//! `rcas`: generate synthetic wakes, fit POD bases and ESNs, and run twin
//! experiments from the command line.
//!
//! Settings resolve as: command-line flag, then `--config` file, then the
//! `RCAS_SEED` environment variable (seed only), then built-in defaults.
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use rcas_core::container::{describe, read_snapshots, write_snapshots, Container};
use rcas_core::esn::{build_reservoir, default_search_grid, grid_search_hyperparams, ValidationSplit};
use rcas_core::field::{add_convolved_noise, generate_synthetic_wake, SnapshotSet};
use rcas_core::harness::{
    parse_key_values, run_twin_experiment, sweep, sweep_csv, write_run_dir, DataSource, ExperimentConfig, HarnessError,
};
use rcas_core::pod::{coefficients_csv, compute_pod};

#[derive(Parser, Debug)]
#[command(name = "rcas", version, about = "Online learning of POD-ESN models with an ensemble square-root Kalman filter")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root directory for every output path.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic wake snapshot file.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of snapshots.
        #[arg(long)]
        nt: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the noisy copy.
        #[arg(long)]
        noisy_out: Option<PathBuf>,
    },
    /// Fit a POD basis to the first `n_train` snapshots of a file.
    Pod {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Temporal coefficients as CSV.
        #[arg(long)]
        coeffs_csv: Option<PathBuf>,
    },
    /// Fit POD and train the ESN on its coefficients.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one twin experiment.
    Assimilate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Truth snapshots; synthetic data is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory name under --out-dir.
        #[arg(long, default_value = "run")]
        name: String,
    },
    /// Run the cross product of scenarios, ensemble sizes, intervals and
    /// observation settings.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        ms: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        deltas: Vec<usize>,
        /// Sensor counts, or `full` for full-field observations.
        #[arg(long, value_delimiter = ',')]
        observations: Vec<String>,
    },
    /// Describe a container file.
    Inspect { path: PathBuf },
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// key=value settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    base_period: Option<f64>,
    /// Comma-separated amplitude per harmonic pair.
    #[arg(long)]
    amplitudes: Option<String>,
    #[arg(long)]
    eps_std: Option<f64>,
    #[arg(long)]
    kernel_std: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    /// Use a training window of 2.1 base periods.
    #[arg(long)]
    partial: bool,
    #[arg(long)]
    n_modes: Option<usize>,
    #[arg(long)]
    n_reservoir: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sigma_in: Option<f64>,
    #[arg(long)]
    tikhonov: Option<f64>,
    #[arg(long)]
    washout: Option<usize>,
    #[arg(long)]
    grid_search: bool,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// physical, twofold or threefold.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    delta: Option<usize>,
    #[arg(long, conflicts_with = "full_field")]
    n_sensors: Option<usize>,
    #[arg(long)]
    full_field: bool,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    inflation: Option<f64>,
    #[arg(long)]
    background_lag: Option<usize>,
    #[arg(long)]
    spread_phi: Option<f64>,
    #[arg(long)]
    spread_r: Option<f64>,
    #[arg(long)]
    spread_alpha: Option<f64>,
    /// Write the per-member state log.
    #[arg(long)]
    record_log: bool,
}

enum Failure {
    Invalid(String),
    Runtime { stage: String, message: String },
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime { stage, message } => write!(f, "{stage} failed: {message}"),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Stage { stage, message } => Failure::Runtime {
                stage: stage.to_string(),
                message,
            },
            HarnessError::Config { key, message } => Failure::Invalid(format!("--{}: {message}", key.replace('_', "-"))),
            other => Failure::Runtime {
                stage: "assimilation".into(),
                message: other.to_string(),
            },
        }
    }
}

fn runtime(stage: &str) -> impl FnOnce(&dyn fmt::Display) -> Failure + '_ {
    move |e| Failure::Runtime {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::Invalid(_) => 1,
                Failure::Runtime { .. } => 2,
            })
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Invalid("--threads: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| runtime("threads")(&e))?;
    }
    let root = cli.out_dir;
    match cli.command {
        Command::Generate {
            common,
            nt,
            out,
            noisy_out,
        } => {
            let cfg = resolve(&common, None)?;
            let DataSource::Synthetic(mut spec) = cfg.data else {
                unreachable!("generate always uses synthetic data")
            };
            spec.nt = nt.unwrap_or(spec.nt);
            let truth = generate_synthetic_wake(&spec).map_err(|e| Failure::Invalid(e.to_string()))?;
            let path = output(&root, &out)?;
            write_snapshots(&truth, &path).map_err(|e| runtime("write")(&e))?;
            println!("wrote {} ({} snapshots, {}x{} grid)", path.display(), truth.nt(), spec.grid.nx, spec.grid.ny);
            if let Some(noisy_out) = noisy_out {
                let noisy = add_convolved_noise(&truth, &cfg.noise).map_err(|e| runtime("noise")(&e))?;
                let path = output(&root, &noisy_out)?;
                write_snapshots(&noisy, &path).map_err(|e| runtime("write")(&e))?;
                println!("wrote {}", path.display());
            }
        }
        Command::Pod {
            common,
            data,
            out,
            coeffs_csv,
        } => {
            let snaps = load(&data)?;
            let cfg = resolve(&common, Some(&snaps))?;
            let n_train = cfg.n_train.min(snaps.nt());
            let basis = compute_pod(&snaps.slice(0..n_train), cfg.n_modes).map_err(|e| runtime("pod")(&e))?;
            if let Some(csv) = coeffs_csv {
                let path = output(&root, &csv)?;
                fs::write(&path, coefficients_csv(&basis.temporal_coeffs, 0)).map_err(|e| runtime("write")(&e))?;
            }
            println!("modes: {}\nenergy: {:.6}", basis.n_modes(), basis.energy_fraction);
            let mut c = Container::empty(snaps.grid);
            c.pod = Some(basis);
            save(&c, &output(&root, &out)?)?;
        }
        Command::Train { common, data, out } => {
            let snaps = load(&data)?;
            let cfg = resolve(&common, Some(&snaps))?;
            let n_train = cfg.n_train.min(snaps.nt());
            let basis = compute_pod(&snaps.slice(0..n_train), cfg.n_modes).map_err(|e| runtime("pod")(&e))?;
            let series = &basis.temporal_coeffs;
            let mut reservoir = build_reservoir(&cfg.esn, cfg.n_modes).map_err(|e| runtime("esn")(&e))?;
            if cfg.grid_search {
                let valid_len = (n_train / 4).max(1);
                let split = ValidationSplit {
                    train_len: n_train - valid_len,
                    valid_len,
                };
                let (sigmas, rhos) = default_search_grid();
                let best = grid_search_hyperparams(&reservoir, series, &split, &sigmas, &rhos)
                    .map_err(|e| runtime("grid search")(&e))?;
                println!(
                    "grid search: sigma_in={} rho={} validation mse={:e}",
                    best.input_scaling, best.spectral_radius, best.validation_mse
                );
                reservoir = reservoir.with_hyperparams(best.input_scaling, best.spectral_radius);
            }
            let model = reservoir.train(series).map_err(|e| runtime("esn")(&e))?;
            let mut c = Container::empty(snaps.grid);
            c.pod = Some(basis);
            c.esn = Some(model);
            save(&c, &output(&root, &out)?)?;
        }
        Command::Assimilate {
            common,
            run,
            data,
            name,
        } => {
            let provided = data.as_deref().map(load).transpose()?;
            let mut cfg = resolve(&common, provided.as_ref())?;
            apply_run(&mut cfg, &run)?;
            let res = run_twin_experiment(&cfg)?;
            let dir = output(&root, Path::new(&name))?;
            write_run_dir(&dir, &cfg, &res).map_err(|e| runtime("write")(&e))?;
            println!(
                "{}: final mse {:e}, mean noisy mse {:e}, time to cross {}, collapsed {}, diverged members {}",
                cfg.label(),
                res.final_mse(),
                res.mean_baseline(),
                res.time_to_cross().map_or("never".into(), |t| t.to_string()),
                res.collapsed(),
                res.diverged_members
            );
            println!("wrote {}", dir.display());
        }
        Command::Sweep {
            common,
            run,
            scenarios,
            ms,
            deltas,
            observations,
        } => {
            let mut base = resolve(&common, None)?;
            apply_run(&mut base, &run)?;
            let pick = |v: Vec<String>, current: String| if v.is_empty() { vec![current] } else { v };
            let scenarios = pick(scenarios, base.scenario.name().to_string());
            let ms = if ms.is_empty() { vec![base.m] } else { ms };
            let deltas = if deltas.is_empty() { vec![base.delta] } else { deltas };
            let observations = pick(observations, observation_label(&base));
            let mut cfgs = Vec::new();
            for s in &scenarios {
                for &m in &ms {
                    for &delta in &deltas {
                        for o in &observations {
                            let mut cfg = base.clone();
                            cfg.set("scenario", s)?;
                            cfg.m = m;
                            cfg.delta = delta;
                            match o.as_str() {
                                "full" => cfg.set("full_field", "true")?,
                                n => cfg.set("n_sensors", n).map_err(|_| {
                                    Failure::Invalid(format!("--observations: expected a count or `full`, got {n:?}"))
                                })?,
                            }
                            cfg.validate()?;
                            cfgs.push(cfg);
                        }
                    }
                }
            }
            let (results, rows) = sweep(&cfgs)?;
            let sweep_dir = output(&root, Path::new("sweep"))?;
            fs::create_dir_all(&sweep_dir).map_err(|e| runtime("write")(&e))?;
            for (cfg, res) in cfgs.iter().zip(&results) {
                if let Ok(res) = res {
                    write_run_dir(&sweep_dir.join(cfg.label()), cfg, res).map_err(|e| runtime("write")(&e))?;
                }
            }
            let table = sweep_csv(&rows);
            fs::write(sweep_dir.join("sweep.csv"), &table).map_err(|e| runtime("write")(&e))?;
            print!("{table}");
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                return Err(Failure::Runtime {
                    stage: "sweep".into(),
                    message: format!("{failed} of {} runs failed", rows.len()),
                });
            }
        }
        Command::Inspect { path } => {
            let c = Container::read(&path).map_err(|e| runtime("inspect")(&e))?;
            print!("{}", describe(&c));
        }
    }
    Ok(())
}

fn observation_label(cfg: &ExperimentConfig) -> String {
    match cfg.observation {
        rcas_core::harness::ObservationMode::FullField => "full".into(),
        rcas_core::harness::ObservationMode::Sensors(n) => n.to_string(),
    }
}

fn output(root: &Path, path: &Path) -> Result<PathBuf, Failure> {
    let full = root.join(path);
    if let Some(parent) = full.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| runtime("write")(&e))?;
        }
    }
    Ok(full)
}

fn load(path: &Path) -> Result<SnapshotSet, Failure> {
    read_snapshots(path).map_err(|e| Failure::Runtime {
        stage: "data".into(),
        message: format!("{}: {e}", path.display()),
    })
}

fn save(c: &Container, path: &Path) -> Result<(), Failure> {
    c.write(path).map_err(|e| runtime("write")(&e))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Defaults, then `RCAS_SEED`, then the config file, then flags.
fn resolve(common: &CommonArgs, provided: Option<&SnapshotSet>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::default();
    if let Ok(seed) = std::env::var("RCAS_SEED") {
        cfg.set("seed", &seed)
            .map_err(|_| Failure::Invalid(format!("RCAS_SEED: cannot parse {seed:?}")))?;
    }
    if let Some(snaps) = provided {
        cfg.data = DataSource::Provided(Arc::new(snaps.clone()));
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Invalid(format!("--config: cannot read {}: {e}", path.display())))?;
        for (k, v) in parse_key_values(&text)? {
            if provided.is_some() && is_synthetic_key(&k) {
                continue;
            }
            cfg.set(&k, &v)?;
        }
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let mut put = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    put("seed", common.seed.map(|v| v.to_string()));
    put("nx", common.nx.map(|v| v.to_string()));
    put("ny", common.ny.map(|v| v.to_string()));
    put("n_pairs", common.n_pairs.map(|v| v.to_string()));
    put("base_period", common.base_period.map(|v| v.to_string()));
    put("amplitudes", common.amplitudes.clone());
    put("eps_std", common.eps_std.map(|v| v.to_string()));
    put("kernel_std", common.kernel_std.map(|v| v.to_string()));
    put("n_train", common.n_train.map(|v| v.to_string()));
    put("n_modes", common.n_modes.map(|v| v.to_string()));
    put("n_reservoir", common.n_reservoir.map(|v| v.to_string()));
    put("rho", common.rho.map(|v| v.to_string()));
    put("sigma_in", common.sigma_in.map(|v| v.to_string()));
    put("tikhonov", common.tikhonov.map(|v| v.to_string()));
    put("washout", common.washout.map(|v| v.to_string()));
    if common.grid_search {
        put("grid_search", Some("true".into()));
    }
    for (k, v) in flags {
        if provided.is_some() && is_synthetic_key(k) && k != "seed" {
            return Err(Failure::Invalid(format!("--{}: only applies to synthetic data", k.replace('_', "-"))));
        }
        cfg.set(k, &v)?;
    }
    if common.partial {
        if common.n_train.is_some() {
            return Err(Failure::Invalid("--partial: conflicts with --n-train".into()));
        }
        cfg = cfg.partially_trained();
    }
    Ok(cfg)
}

fn is_synthetic_key(k: &str) -> bool {
    matches!(
        k,
        "data" | "nx" | "ny" | "dx" | "dy" | "dt" | "n_pairs" | "base_period" | "amplitudes" | "free_stream" | "deficit" | "data_seed"
    )
}

fn apply_run(cfg: &mut ExperimentConfig, run: &RunArgs) -> Result<(), Failure> {
    let mut set = |k: &str, v: Option<String>| -> Result<(), Failure> {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
        Ok(())
    };
    set("scenario", run.scenario.clone())?;
    set("m", run.m.map(|v| v.to_string()))?;
    set("delta", run.delta.map(|v| v.to_string()))?;
    set("n_sensors", run.n_sensors.map(|v| v.to_string()))?;
    set("full_field", run.full_field.then(|| "true".to_string()))?;
    set("horizon", run.horizon.map(|v| v.to_string()))?;
    set("inflation", run.inflation.map(|v| v.to_string()))?;
    set("background_lag", run.background_lag.map(|v| v.to_string()))?;
    set("spread_phi", run.spread_phi.map(|v| v.to_string()))?;
    set("spread_r", run.spread_r.map(|v| v.to_string()))?;
    set("spread_alpha", run.spread_alpha.map(|v| v.to_string()))?;
    set("record_log", run.record_log.then(|| "true".to_string()))?;
    cfg.validate()?;
    Ok(())
}
