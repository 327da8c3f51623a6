//! End-to-end trials, impulse-response fitting errors and SNR / lambda sweeps.
//!
//! Sweeps draw one seed triple per trial index from the base seed, so every
//! grid point sees the same systems, inputs and noise directions and rows
//! differ only in the swept quantity. Reports contain no timings, which keeps
//! them byte-identical across runs with equal seeds.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::estimator::{check_dimension_conditions, estimate_markov, local_pe_order, pe_check, EstimatorOptions, MarkovEstimate};
use crate::network::{extract_cluster, random_network, simulate, NetworkSpec, SubsystemMatrices};
use crate::realizer::{realize, RealizationResult, RealizerOptions};
use crate::structure::{markov_band_of, MarkovBand};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "N")]
    pub num_subsystems: usize,
    pub stability_margin: f64,
    /// 1-based cluster center; `None` takes the middle subsystem.
    pub center: Option<usize>,
    #[serde(rename = "R")]
    pub radius: usize,
    #[serde(rename = "L")]
    pub len: usize,
    /// `None` keeps the outputs noise-free.
    pub snr_db: Option<f64>,
    pub system_seed: u64,
    pub input_seed: u64,
    pub noise_seed: u64,
    pub s: usize,
    pub estimator: EstimatorOptions,
    pub realizer: RealizerOptions,
    /// Feed the true band to the realizer instead of estimating it.
    pub oracle_band: bool,
    pub horizon: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n: 3,
            m: 2,
            p: 2,
            num_subsystems: 40,
            stability_margin: 0.95,
            center: None,
            radius: 5,
            len: 800,
            snr_db: Some(60.0),
            system_seed: 1,
            input_seed: 2,
            noise_seed: 3,
            s: 8,
            estimator: EstimatorOptions::default(),
            realizer: RealizerOptions::default(),
            oracle_band: false,
            horizon: 10,
        }
    }
}

impl TrialConfig {
    pub fn center_index(&self) -> usize {
        self.center.unwrap_or(self.num_subsystems / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.p == 0 {
            return Err(Error::invalid("n, m and p must be positive"));
        }
        if self.num_subsystems < 3 {
            return Err(Error::invalid("N must be at least 3"));
        }
        let c = self.center_index();
        if c < self.radius + 1 || c + self.radius > self.num_subsystems {
            return Err(Error::invalid(format!(
                "cluster {c} +- {} does not fit in a chain of {}",
                self.radius, self.num_subsystems
            )));
        }
        if self.s < 4 || self.s % 2 != 0 {
            return Err(Error::invalid("s must be an even integer of at least 4"));
        }
        if !(self.stability_margin > 0.0 && self.stability_margin < 1.0) {
            return Err(Error::invalid("stability_margin must lie in (0, 1)"));
        }
        if self.snr_db.is_some_and(|v| !v.is_finite()) {
            return Err(Error::invalid("snr_db must be finite"));
        }
        if self.len < self.s + 1 {
            return Err(Error::invalid("L is shorter than s"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        Ok(())
    }
}

/// Normalized fitting errors of the three impulse-response sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitErrors {
    pub fit_a: f64,
    pub fit_al: f64,
    pub fit_ar: f64,
}

impl FitErrors {
    pub fn max(&self) -> f64 {
        self.fit_a.max(self.fit_al).max(self.fit_ar)
    }
}

/// `sum_i |C A^i B - C' A'^i B'|_F / sum_i |C A^i B|_F` over `i = 0..=horizon`,
/// for `A`, `A_l` and `A_r`.
pub fn impulse_fit_error(est: &SubsystemMatrices, truth: &SubsystemMatrices, horizon: usize) -> Result<FitErrors> {
    if est.p() != truth.p() || est.m() != truth.m() {
        return Err(Error::dim("estimate and truth differ in input or output dimension"));
    }
    let one = |ea: &DMatrix<f64>, ta: &DMatrix<f64>| -> Result<f64> {
        let (mut pe, mut pt) = (est.b.clone(), truth.b.clone());
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..=horizon {
            let t = &truth.c * &pt;
            num += (&est.c * &pe - &t).norm();
            den += t.norm();
            pe = ea * pe;
            pt = ta * pt;
        }
        if den == 0.0 {
            return Err(Error::numerical(Stage::Metrics, "true impulse response is identically zero"));
        }
        Ok(num / den)
    };
    Ok(FitErrors {
        fit_a: one(&est.a, &truth.a)?,
        fit_al: one(&est.a_left, &truth.a_left)?,
        fit_ar: one(&est.a_right, &truth.a_right)?,
    })
}

/// `|F_hat - F| / |F|` over the stacked band.
pub fn band_error(est: &MarkovBand, truth: &MarkovBand) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((_, _, a), (_, _, b)) in est.iter().zip(truth.iter()) {
        num += (a - b).norm_squared();
        den += b.norm_squared();
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub generation: f64,
    pub simulation: f64,
    pub estimation: f64,
    pub realization: f64,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub fit: FitErrors,
    pub markov_err: f64,
    pub timings: StageTimings,
    pub warnings: Vec<String>,
    pub truth: NetworkSpec,
    pub band: MarkovBand,
    /// `None` in oracle-band mode.
    pub estimate: Option<MarkovEstimate>,
    pub realization: RealizationResult,
}

/// White Gaussian input of unit variance, `L x N m`.
pub fn white_input(len: usize, width: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(width, len, |_, _| StandardNormal.sample(&mut rng)).transpose()
}

/// Generation, simulation, estimation, realization and scoring.
pub fn run_trial(cfg: &TrialConfig) -> Result<TrialResult> {
    cfg.validate()?;
    let mut timings = StageTimings::default();
    let mut warnings = Vec::new();

    let clock = Instant::now();
    let spec = random_network(cfg.n, cfg.m, cfg.p, cfg.num_subsystems, cfg.system_seed, cfg.stability_margin)?;
    timings.generation = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let u = white_input(cfg.len, cfg.num_subsystems * cfg.m, cfg.input_seed);
    let mut traj = simulate(&spec, &u, &DVector::zeros(cfg.num_subsystems * cfg.n))?;
    if let Some(snr) = cfg.snr_db {
        traj = traj.with_noise(snr, cfg.noise_seed)?;
    }
    let cluster = extract_cluster(&traj, cfg.center_index(), cfg.radius)?;
    timings.simulation = clock.elapsed().as_secs_f64();

    let truth_band = markov_band_of(&spec.subsystem, cfg.s);
    let clock = Instant::now();
    let mut estimate = None;
    let band = if cfg.oracle_band {
        truth_band.clone()
    } else {
        let dims = check_dimension_conditions(cfg.n, cfg.p, cfg.m, cfg.radius, cfg.s, Some(&spec.subsystem));
        warnings.extend(dims.warnings);
        let order = local_pe_order(cfg.n, cfg.radius, cfg.s);
        let h = cluster.len().saturating_sub(order) + 1;
        let pe = pe_check(&cluster.u.columns(0, cfg.m).into_owned(), order, h)?;
        if !pe.exciting {
            warnings.push(format!("input is not persistently exciting of order {order}"));
        }
        let est = estimate_markov(&cluster, cfg.p, cfg.m, cfg.s, &cfg.estimator)?;
        let band = est.band.clone();
        estimate = Some(est);
        band
    };
    timings.estimation = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let realization = realize(&band, cfg.radius, cfg.s, &cfg.realizer)?;
    timings.realization = clock.elapsed().as_secs_f64();
    warnings.extend(realization.diagnostics.warnings.iter().cloned());

    let fit = impulse_fit_error(&realization.est, &spec.subsystem, cfg.horizon)?;
    Ok(TrialResult {
        fit,
        markov_err: band_error(&band, &truth_band),
        timings,
        warnings,
        truth: spec,
        band,
        estimate,
        realization,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Snr,
    Lambda,
}

impl SweepKind {
    fn column(self) -> &'static str {
        match self {
            SweepKind::Snr => "snr_db",
            SweepKind::Lambda => "lambda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub system: u64,
    pub input: u64,
    pub noise: u64,
}

/// Seeds of trial `index`, independent of the grid point and of scheduling.
pub fn trial_seeds(base_seed: u64, index: usize) -> TrialSeeds {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index as u64 + 1);
    use rand::Rng;
    TrialSeeds { system: rng.random(), input: rng.random(), noise: rng.random() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub value: f64,
    pub trial: usize,
    pub seeds: TrialSeeds,
    pub fit: Option<FitErrors>,
    pub markov_err: Option<f64>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub fit_a_mean: f64,
    pub fit_al_mean: f64,
    pub fit_ar_mean: f64,
    pub markov_err_mean: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepManifest {
    pub toolkit: &'static str,
    pub version: &'static str,
    pub kind: SweepKind,
    pub grid: Vec<f64>,
    pub trials: usize,
    pub base_seed: u64,
    pub config: TrialConfig,
    pub seeds: Vec<TrialSeeds>,
    /// Failed trials are excluded from the means and counted per row.
    pub failure_policy: &'static str,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub records: Vec<TrialRecord>,
    pub manifest: SweepManifest,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

fn sweep(
    kind: SweepKind,
    cfg: &TrialConfig,
    grid: &[f64],
    trials: usize,
    base_seed: u64,
    jobs: Option<usize>,
) -> Result<SweepReport> {
    if trials == 0 {
        return Err(Error::invalid("T must be at least 1"));
    }
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("sweep grid must be a non-empty list of finite values"));
    }
    if kind == SweepKind::Lambda && grid.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("lambda values must be positive"));
    }
    cfg.validate()?;
    let seeds: Vec<TrialSeeds> = (0..trials).map(|t| trial_seeds(base_seed, t)).collect();
    let tasks: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..trials).map(move |t| (g, t))).collect();
    let run = |&(g, t): &(usize, usize)| -> TrialRecord {
        let mut c = cfg.clone();
        match kind {
            SweepKind::Snr => c.snr_db = Some(grid[g]),
            SweepKind::Lambda => c.estimator.lambda = grid[g],
        }
        c.system_seed = seeds[t].system;
        c.input_seed = seeds[t].input;
        c.noise_seed = seeds[t].noise;
        let mut rec = TrialRecord {
            value: grid[g],
            trial: t,
            seeds: seeds[t],
            fit: None,
            markov_err: None,
            failed_stage: None,
            error: None,
        };
        match run_trial(&c) {
            Ok(r) => {
                rec.fit = Some(r.fit);
                rec.markov_err = Some(r.markov_err);
            }
            Err(e) => {
                rec.failed_stage = Some(e.stage().map_or_else(|| "input".to_string(), |s| s.to_string()));
                rec.error = Some(e.to_string());
            }
        }
        rec
    };
    let threads = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    let records: Vec<TrialRecord> = if threads == 1 {
        tasks.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(run).collect())
    };
    let rows = grid
        .iter()
        .enumerate()
        .map(|(g, &value)| {
            let slice = &records[g * trials..(g + 1) * trials];
            let ok = || slice.iter().filter_map(|r| r.fit.map(|f| (f, r.markov_err.unwrap_or(f64::NAN))));
            SweepRow {
                value,
                fit_a_mean: mean(ok().map(|(f, _)| f.fit_a)),
                fit_al_mean: mean(ok().map(|(f, _)| f.fit_al)),
                fit_ar_mean: mean(ok().map(|(f, _)| f.fit_ar)),
                markov_err_mean: mean(ok().map(|(_, e)| e)),
                failures: slice.iter().filter(|r| r.fit.is_none()).count(),
            }
        })
        .collect();
    Ok(SweepReport {
        rows,
        records,
        manifest: SweepManifest {
            toolkit: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            kind,
            grid: grid.to_vec(),
            trials,
            base_seed,
            config: cfg.clone(),
            seeds,
            failure_policy: "failed trials are excluded from means and counted in the failures column",
        },
    })
}

/// Mean errors over `trials` systems at each SNR of `grid`.
pub fn snr_sweep(cfg: &TrialConfig, grid: &[f64], trials: usize, base_seed: u64, jobs: Option<usize>) -> Result<SweepReport> {
    sweep(SweepKind::Snr, cfg, grid, trials, base_seed, jobs)
}

/// Mean errors over `trials` systems at each lambda of `grid`, SNR from `cfg`.
pub fn lambda_sweep(
    cfg: &TrialConfig,
    grid: &[f64],
    trials: usize,
    base_seed: u64,
    jobs: Option<usize>,
) -> Result<SweepReport> {
    sweep(SweepKind::Lambda, cfg, grid, trials, base_seed, jobs)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepReport {
    pub fn kind(&self) -> SweepKind {
        self.manifest.kind
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([self.kind().column(), "fit_A_mean", "fit_Al_mean", "fit_Ar_mean", "markov_err_mean", "failures"])?;
        for r in &self.rows {
            out.write_record([
                r.value.to_string(),
                r.fit_a_mean.to_string(),
                r.fit_al_mean.to_string(),
                r.fit_ar_mean.to_string(),
                r.markov_err_mean.to_string(),
                r.failures.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_trials_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            self.kind().column(),
            "trial",
            "system_seed",
            "input_seed",
            "noise_seed",
            "fit_A",
            "fit_Al",
            "fit_Ar",
            "markov_err",
            "failed_stage",
        ])?;
        for r in &self.records {
            out.write_record([
                r.value.to_string(),
                r.trial.to_string(),
                r.seeds.system.to_string(),
                r.seeds.input.to_string(),
                r.seeds.noise.to_string(),
                opt(r.fit.map(|f| f.fit_a)),
                opt(r.fit.map(|f| f.fit_al)),
                opt(r.fit.map(|f| f.fit_ar)),
                opt(r.markov_err),
                r.failed_stage.clone().unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv`, `<stem>_trials.csv` and `<stem>_manifest.json`
    /// into `dir` and returns their paths.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let summary = dir.join(format!("{stem}.csv"));
        let trials = dir.join(format!("{stem}_trials.csv"));
        let manifest = dir.join(format!("{stem}_manifest.json"));
        self.write_summary_csv(std::fs::File::create(&summary)?)?;
        self.write_trials_csv(std::fs::File::create(&trials)?)?;
        let body = serde_json::json!({ "manifest": self.manifest, "trials": self.records });
        std::fs::write(&manifest, serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(vec![summary, trials, manifest])
    }
}
