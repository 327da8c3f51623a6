//! `netid1d`: generate chain networks, simulate them, identify one subsystem
//! from local data and run the SNR / lambda sweeps.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a numerical
//! stage fails (the stage is named on standard error).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use netid1d::error::Error;
use netid1d::harness::{lambda_sweep, run_trial, snr_sweep, trial_seeds, white_input, SweepReport, TrialConfig};
use netid1d::network::{random_network, simulate};
use netid1d::oracle::{structural_suite, SuiteConfig};

const SEED_VAR: &str = "NETID1D_SEED";

#[derive(Parser)]
#[command(name = "netid1d", version, about = "Local identification in 1D chains of identical LTI systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Trial configuration (JSON); omitted keys take the full-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Signal-to-noise ratio in dB.
    #[arg(long)]
    snr: Option<f64>,
    /// Regularization weight of the rank surrogate.
    #[arg(long)]
    lambda: Option<f64>,
    /// Base seed; falls back to the config, then to NETID1D_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Subsystem order, used both for generation and as the known order.
    #[arg(long)]
    n: Option<usize>,
    /// Cluster radius.
    #[arg(long = "R")]
    radius: Option<usize>,
    /// Number of band moments plus one (even).
    #[arg(long)]
    s: Option<usize>,
}

#[derive(Args, Clone, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated grid of swept values.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Trials per grid point.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a random stable chain and write it as JSON.
    Generate(Common),
    /// Generate, simulate with white-noise input and write the trajectory CSV.
    Simulate(Common),
    /// Run one end-to-end identification trial.
    Identify {
        #[command(flatten)]
        common: Common,
        /// Write per-iteration estimator diagnostics.
        #[arg(long)]
        trace: bool,
        /// Write the factors W, E, O, C and the H-matrix as CSV.
        #[arg(long)]
        dump_factors: bool,
        /// Skip estimation and realize the true band.
        #[arg(long)]
        oracle_band: bool,
    },
    /// Mean fitting errors over a grid of SNR values.
    SnrSweep(SweepArgs),
    /// Mean fitting errors over a grid of lambda values.
    LambdaSweep(SweepArgs),
    /// Brute-force structural property checks on random systems.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Number of random systems.
        #[arg(long, default_value_t = 50)]
        systems: usize,
    },
}

enum Failure {
    Usage(String),
    Numerical(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical { .. } => Failure::Numerical(e),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn seed_from_env() -> Outcome<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure::Usage(format!("{SEED_VAR} must be an integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Effective configuration plus the raw keys present in the file.
struct Resolved {
    cfg: TrialConfig,
    file_keys: Value,
    base_seed: Option<u64>,
}

fn resolve(common: &Common) -> Outcome<Resolved> {
    let file_keys = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => json!({}),
    };
    let mut cfg: TrialConfig = serde_json::from_value(file_keys.clone()).map_err(|e| {
        let name = common.config.as_ref().map_or_else(|| "<defaults>".into(), |p| p.display().to_string());
        Failure::Usage(format!("invalid config {name}: {e}"))
    })?;
    if let Some(v) = common.snr {
        cfg.snr_db = Some(v);
    }
    if let Some(v) = common.lambda {
        cfg.estimator.lambda = v;
    }
    if let Some(n) = common.n {
        cfg.n = n;
        cfg.realizer.n = Some(n);
    }
    if let Some(r) = common.radius {
        cfg.radius = r;
    }
    if let Some(s) = common.s {
        cfg.s = s;
    }
    let base_seed = match common.seed {
        Some(s) => Some(s),
        None if file_keys.get("system_seed").is_none() => seed_from_env()?,
        None => None,
    };
    if let Some(base) = base_seed {
        let seeds = trial_seeds(base, 0);
        cfg.system_seed = seeds.system;
        cfg.input_seed = seeds.input;
        cfg.noise_seed = seeds.noise;
    }
    Ok(Resolved { cfg, file_keys, base_seed })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_manifest(out: &Path, command: &str, cfg: &TrialConfig, extra: Value) -> Outcome<()> {
    std::fs::create_dir_all(out)?;
    let body = json!({
        "toolkit": "netid1d",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
        "extra": extra,
    });
    write_json(&out.join("manifest.json"), &body)
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Outcome<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Usage(e.to_string()))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_generate(common: &Common) -> Outcome<()> {
    let r = resolve(common)?;
    let c = &r.cfg;
    write_manifest(&common.out, "generate", c, json!({}))?;
    let spec = random_network(c.n, c.m, c.p, c.num_subsystems, c.system_seed, c.stability_margin)?;
    write_json(&common.out.join("network.json"), &spec)?;
    println!(
        "generate: n={} m={} p={} N={} spectral radius {:.6} -> {}",
        c.n,
        c.m,
        c.p,
        c.num_subsystems,
        spec.global_spectral_radius(),
        common.out.join("network.json").display()
    );
    Ok(())
}

fn cmd_simulate(common: &Common) -> Outcome<()> {
    let r = resolve(common)?;
    let c = &r.cfg;
    c.validate()?;
    write_manifest(&common.out, "simulate", c, json!({}))?;
    let spec = random_network(c.n, c.m, c.p, c.num_subsystems, c.system_seed, c.stability_margin)?;
    let u = white_input(c.len, c.num_subsystems * c.m, c.input_seed);
    let mut traj = simulate(&spec, &u, &DVector::zeros(c.num_subsystems * c.n))?;
    if let Some(snr) = c.snr_db {
        traj = traj.with_noise(snr, c.noise_seed)?;
    }
    write_json(&common.out.join("network.json"), &spec)?;
    let path = common.out.join("trajectory.csv");
    traj.write_csv(std::fs::File::create(&path)?)?;
    println!("simulate: L={} N={} -> {}", c.len, c.num_subsystems, path.display());
    Ok(())
}

fn cmd_identify(common: &Common, trace: bool, dump_factors: bool, oracle_band: bool) -> Outcome<()> {
    let mut r = resolve(common)?;
    r.cfg.estimator.trace |= trace;
    r.cfg.oracle_band |= oracle_band;
    let c = r.cfg;
    write_manifest(&common.out, "identify", &c, json!({ "base_seed": r.base_seed }))?;
    let res = run_trial(&c)?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    let out = &common.out;
    let body = json!({
        "config": c,
        "fit": res.fit,
        "markov_err": res.markov_err,
        "warnings": res.warnings,
        "realization": res.realization,
        "truth": res.truth,
    });
    write_json(&out.join("result.json"), &body)?;
    match &res.estimate {
        Some(est) => write_json(&out.join("markov.json"), est)?,
        None => write_json(&out.join("markov.json"), &json!({ "band": res.band }))?,
    }

    let mut w = csv::Writer::from_path(out.join("impulse.csv")).map_err(|e| Failure::Usage(e.to_string()))?;
    w.write_record(["sequence", "lag", "truth_norm", "error_norm"]).map_err(|e| Failure::Usage(e.to_string()))?;
    let (est, truth) = (&res.realization.est, &res.truth.subsystem);
    for (name, ea, ta) in [("A", &est.a, &truth.a), ("Al", &est.a_left, &truth.a_left), ("Ar", &est.a_right, &truth.a_right)] {
        let (mut pe, mut pt) = (est.b.clone(), truth.b.clone());
        for lag in 0..=c.horizon {
            let t = &truth.c * &pt;
            let e = (&est.c * &pe - &t).norm();
            w.write_record([name.to_string(), lag.to_string(), t.norm().to_string(), e.to_string()])
                .map_err(|e| Failure::Usage(e.to_string()))?;
            pe = ea * pe;
            pt = ta * pt;
        }
    }
    w.flush()?;

    if c.estimator.trace {
        if let Some(est) = &res.estimate {
            let mut t = csv::Writer::from_path(out.join("estimator_trace.csv")).map_err(|e| Failure::Usage(e.to_string()))?;
            t.write_record(["outer", "iteration", "primal_residual", "relative_change"])
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let mut sp = csv::Writer::from_path(out.join("estimator_spectra.csv")).map_err(|e| Failure::Usage(e.to_string()))?;
            sp.write_record(["outer", "index", "singular_value"]).map_err(|e| Failure::Usage(e.to_string()))?;
            for h in &est.history {
                for &(it, pr, ch) in &h.steps {
                    t.write_record([h.outer.to_string(), it.to_string(), pr.to_string(), ch.to_string()])
                        .map_err(|e| Failure::Usage(e.to_string()))?;
                }
                for (i, v) in h.singular_values.iter().enumerate() {
                    sp.write_record([h.outer.to_string(), i.to_string(), v.to_string()])
                        .map_err(|e| Failure::Usage(e.to_string()))?;
                }
            }
            t.flush()?;
            sp.flush()?;
        }
    }
    if dump_factors {
        let f = &res.realization.factors;
        write_matrix_csv(&out.join("factor_W.csv"), &f.w_hat)?;
        write_matrix_csv(&out.join("factor_E.csv"), &f.e_hat)?;
        write_matrix_csv(&out.join("factor_O.csv"), &f.o_hat)?;
        write_matrix_csv(&out.join("factor_C.csv"), &f.c_hat)?;
        write_matrix_csv(&out.join("factor_H.csv"), &res.realization.h)?;
    }
    let t = &res.timings;
    println!(
        "identify: n={} fit_A={:.3e} fit_Al={:.3e} fit_Ar={:.3e} markov_err={:.3e} (estimation {:.1}s, realization {:.1}s)",
        res.realization.n_used, res.fit.fit_a, res.fit.fit_al, res.fit.fit_ar, res.markov_err, t.estimation, t.realization
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, lambda: bool) -> Outcome<()> {
    let mut r = resolve(&args.common)?;
    let (name, default_grid): (&str, Vec<f64>) = if lambda {
        ("lambda-sweep", vec![1e-4, 1e-3, 1e-2, 1e-1])
    } else {
        ("snr-sweep", vec![0.0, 20.0, 40.0, 60.0, 80.0])
    };
    if lambda && args.common.snr.is_none() && r.file_keys.get("snr_db").is_none() {
        r.cfg.snr_db = Some(40.0);
    }
    let grid = args.grid.clone().unwrap_or(default_grid);
    let base = r.base_seed.unwrap_or(0);
    write_manifest(
        &args.common.out,
        name,
        &r.cfg,
        json!({ "grid": grid, "trials": args.trials, "base_seed": base }),
    )?;
    let report: SweepReport = if lambda {
        lambda_sweep(&r.cfg, &grid, args.trials, base, args.jobs)?
    } else {
        snr_sweep(&r.cfg, &grid, args.trials, base, args.jobs)?
    };
    let stem = name.replace('-', "_");
    let paths = report.write_all(&args.common.out, &stem)?;
    let failures: usize = report.rows.iter().map(|r| r.failures).sum();
    let best = report
        .rows
        .iter()
        .filter(|r| r.fit_a_mean.is_finite())
        .min_by(|a, b| a.fit_a_mean.total_cmp(&b.fit_a_mean));
    println!(
        "{name}: {} points x {} trials, {failures} failures, lowest mean fit_A {} -> {}",
        report.rows.len(),
        args.trials,
        best.map_or("n/a".into(), |r| format!("{:.3e} at {}", r.fit_a_mean, r.value)),
        paths[0].display()
    );
    Ok(())
}

fn cmd_oracle(common: &Common, systems: usize) -> Outcome<()> {
    let r = resolve(common)?;
    write_manifest(&common.out, "oracle-check", &r.cfg, json!({ "systems": systems }))?;
    let suite = SuiteConfig { systems, seed: r.base_seed.unwrap_or(0), ..Default::default() };
    let outcomes = structural_suite(&suite)?;
    let path = common.out.join("oracle_check.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Usage(e.to_string()))?;
    w.write_record(["check", "instances", "max_error", "passed"]).map_err(|e| Failure::Usage(e.to_string()))?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for o in &outcomes {
        w.write_record([o.name.to_string(), o.instances.to_string(), o.max_error.to_string(), o.passed.to_string()])
            .map_err(|e| Failure::Usage(e.to_string()))?;
        writeln!(lock, "{:<4} {:<34} max error {:.3e} over {} systems", if o.passed { "PASS" } else { "FAIL" }, o.name, o.max_error, o.instances)?;
    }
    w.flush()?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(Failure::Numerical(Error::numerical(
            netid1d::error::Stage::Metrics,
            format!("{failed} structural check(s) failed"),
        )));
    }
    writeln!(lock, "oracle-check: {} checks passed -> {}", outcomes.len(), path.display())?;
    Ok(())
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
    let result = match &cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::Identify { common, trace, dump_factors, oracle_band } => {
            cmd_identify(common, *trace, *dump_factors, *oracle_band)
        }
        Command::SnrSweep(a) => cmd_sweep(a, false),
        Command::LambdaSweep(a) => cmd_sweep(a, true),
        Command::OracleCheck { common, systems } => cmd_oracle(common, *systems),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            let stage = e.stage().map_or_else(|| "unknown".to_string(), |s| s.to_string());
            eprintln!("error: stage {stage} failed: {e}");
            ExitCode::from(2)
        }
    }
}
