//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `NETID1D_ACCEPTANCE=1,3,4` restricts the run to the listed criteria.
//! Reference quantities (lifted moments, word sums, fitting errors, ranks) are
//! computed here from dense definitions rather than through the library.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use netid1d::estimator::{estimate_markov, nonuniqueness_witness, EstimatorOptions};
use netid1d::harness::{lambda_sweep, snr_sweep, white_input, SweepReport, TrialConfig};
use netid1d::network::{extract_cluster, lift_cluster, random_network, simulate, SubsystemMatrices};
use netid1d::realizer::{realize, RealizerOptions};
use netid1d::structure::{
    build_h, build_shift, markov_band_of, tv_controllability, tv_observability, ParamMap, TwoLayerToeplitz,
};

const SWEEP_SEED: u64 = 2024;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

// ---- dense reference constructions ----

/// Lifted cluster matrices built block by block: subsystem `i` sees
/// `A_l x_{i-1} + A x_i + A_r x_{i+1}`.
struct Dense {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

fn dense_cluster(sub: &SubsystemMatrices, radius: usize) -> Dense {
    let (n, m, p, w) = (sub.n(), sub.m(), sub.p(), 2 * radius + 1);
    let mut a = DMatrix::zeros(w * n, w * n);
    let mut b = DMatrix::zeros(w * n, w * m);
    let mut c = DMatrix::zeros(w * p, w * n);
    for i in 0..w {
        a.view_mut((i * n, i * n), (n, n)).copy_from(&sub.a);
        if i > 0 {
            a.view_mut((i * n, (i - 1) * n), (n, n)).copy_from(&sub.a_left);
        }
        if i + 1 < w {
            a.view_mut((i * n, (i + 1) * n), (n, n)).copy_from(&sub.a_right);
        }
        b.view_mut((i * n, i * m), (n, m)).copy_from(&sub.b);
        c.view_mut((i * p, i * n), (p, n)).copy_from(&sub.c);
    }
    Dense { a, b, c }
}

fn moments(dense: &Dense, count: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut ab = dense.b.clone();
    for _ in 0..count {
        out.push(&dense.c * &ab);
        ab = &dense.a * ab;
    }
    out
}

/// Sum of `C w B` over words `w` of length `j` in `{A_l, A, A_r}` with
/// `#A_r - #A_l = k`.
fn word_sum(sub: &SubsystemMatrices, j: usize, k: isize) -> DMatrix<f64> {
    fn walk(sub: &SubsystemMatrices, left: usize, k: isize, acc: DMatrix<f64>, out: &mut DMatrix<f64>) {
        if left == 0 {
            if k == 0 {
                *out += &sub.c * acc * &sub.b;
            }
            return;
        }
        if k.unsigned_abs() > left {
            return;
        }
        walk(sub, left - 1, k + 1, &acc * &sub.a_left, out);
        walk(sub, left - 1, k, &acc * &sub.a, out);
        walk(sub, left - 1, k - 1, &acc * &sub.a_right, out);
    }
    let mut out = DMatrix::zeros(sub.p(), sub.m());
    walk(sub, j, k, DMatrix::identity(sub.n(), sub.n()), &mut out);
    out
}

/// Whether block `(l, q)` of moment `j` is unaffected by the cluster edges.
fn interior(j: usize, l: usize, q: usize, radius: usize) -> bool {
    l.abs_diff(q) <= j && l + q + 1 >= j && l + q + j <= 4 * radius + 1
}

/// `sum_i |C A^i B - C' A'^i B'|_F / sum_i |C A^i B|_F`, `i = 0..=horizon`.
fn fit(est_a: &DMatrix<f64>, est: &SubsystemMatrices, true_a: &DMatrix<f64>, truth: &SubsystemMatrices, horizon: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    let (mut pe, mut pt) = (DMatrix::identity(est.n(), est.n()), DMatrix::identity(truth.n(), truth.n()));
    for _ in 0..=horizon {
        let t = &truth.c * &pt * &truth.b;
        num += (&est.c * &pe * &est.b - &t).norm();
        den += t.norm();
        pe = est_a * pe;
        pt = true_a * pt;
    }
    num / den
}

fn rank(m: &DMatrix<f64>, rel: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    sv.iter().filter(|&&v| v > rel * top).count()
}

/// `s x h` block Hankel matrix whose block `(a, t)` is row `a + t` of `seq`.
fn hankel(seq: &DMatrix<f64>, s: usize, h: usize) -> DMatrix<f64> {
    let w = seq.ncols();
    DMatrix::from_fn(s * w, h, |r, t| seq[(r / w + t, r % w)])
}

/// Block-lower-triangular Toeplitz matrix with block `(a, b) = M_{a-b-1}` for `a > b`.
fn toeplitz(moments: &[DMatrix<f64>], s: usize) -> DMatrix<f64> {
    let (r, c) = moments[0].shape();
    let mut t = DMatrix::zeros(s * r, s * c);
    for a in 0..s {
        for b in 0..a {
            t.view_mut((a * r, b * c), (r, c)).copy_from(&moments[a - b - 1]);
        }
    }
    t
}

fn unit_scaled_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1.0)
}

// ---- criteria ----

fn criterion_1() -> Verdict {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=3);
        let p = rng.random_range(1..=3);
        let s = 2 * rng.random_range(2..=3);
        let radius = rng.random_range(s / 2..=5);
        let sub = random_network(n, m, p, 2 * radius + 3, rng.random(), 0.9).unwrap().subsystem;
        let dense = dense_cluster(&sub, radius);
        let band = markov_band_of(&sub, s);
        let width = 2 * radius + 1;
        for (j, mom) in moments(&dense, s - 1).iter().enumerate() {
            for l in 0..width {
                for q in 0..width {
                    let blk = mom.view((l * p, q * m), (p, m)).into_owned();
                    if l.abs_diff(q) > j {
                        worst[0] = worst[0].max(blk.amax());
                    } else if interior(j, l, q, radius) {
                        let k = q as isize - l as isize;
                        worst[0] = worst[0].max(unit_scaled_gap(&blk, band.get(j, k)));
                        worst[1] = worst[1].max(unit_scaled_gap(band.get(j, k), &word_sum(&sub, j, k)));
                    }
                }
            }
        }
        let o = tv_observability(width, s / 2, &sub).unwrap();
        let c = tv_controllability(width, s / 2, &sub).unwrap();
        worst[2] = worst[2].max(unit_scaled_gap(&build_h(&band, radius, s).unwrap(), &(&o * &c)));
        let lower = tv_observability(width - 2, s / 2 - 1, &sub).unwrap();
        let skip = width * p;
        let upper = o.rows(skip, o.nrows() - skip).into_owned();
        worst[3] = worst[3].max(unit_scaled_gap(&(lower * build_shift(width - 2, &sub)), &upper));
    }
    let secs = clock.elapsed().as_secs_f64();
    let ok = worst.iter().all(|&e| e <= 1e-10) && secs < 30.0;
    verdict(
        ok,
        format!(
            "pattern {:.1e}, word expansion {:.1e}, H=OC {:.1e}, shift {:.1e}, {secs:.1}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn criterion_2() -> Verdict {
    let (n, m, p, count, radius, s, len) = (2, 1, 2, 15, 4, 4, 400);
    let spec = random_network(n, m, p, count, 17, 0.95).unwrap();
    let traj = simulate(&spec, &white_input(len, count * m, 18), &DVector::zeros(count * n)).unwrap();
    let cluster = extract_cluster(&traj, 8, radius).unwrap();
    let dense = dense_cluster(&spec.subsystem, radius);
    let t = toeplitz(&moments(&dense, s - 1), s);
    let h = len - s + 1;
    let (yh, uh) = (hankel(&cluster.y, s, h), hankel(&cluster.u, s, h));
    let base = &yh - &t * &uh;
    let r0 = rank(&base, 1e-9);

    let map = ParamMap::new(radius, s, p, m).unwrap();
    let lifted = lift_cluster(&spec.subsystem, radius);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut same, mut outside, mut nonzero) = (0, 0, 0);
    for _ in 0..5 {
        let g = DMatrix::from_fn(2 * n, (2 * radius + 1) * m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let delta = nonuniqueness_witness(&lifted, s, &g).unwrap();
        same += usize::from(rank(&(&base + &delta * &uh), 1e-9) == r0);
        outside += usize::from(!map.contains(&(&t - &delta), 1e-9));
        nonzero += usize::from(delta.amax() > 1e-6 * t.amax());
    }
    // Control: a generic perturbation inside the structured set does raise the rank.
    let phi: Vec<f64> = (0..map.num_scalars()).map(|_| 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let generic = TwoLayerToeplitz::from_scalars(map.clone(), &phi).unwrap().assemble();
    let r_generic = rank(&(&base - &generic * &uh), 1e-9);
    let ok = same == 5 && outside == 5 && nonzero == 5 && map.contains(&t, 1e-9) && r_generic > r0;
    verdict(
        ok,
        format!(
            "rank {r0} preserved {same}/5, outside second layer {outside}/5, generic structured perturbation gives rank {r_generic}"
        ),
    )
}

fn criterion_3() -> Verdict {
    let (n, m, p, count, radius, s, len) = (2, 1, 2, 15, 4, 4, 400);
    let spec = random_network(n, m, p, count, 5, 0.95).unwrap();
    let traj = simulate(&spec, &white_input(len, count * m, 6), &DVector::zeros(count * n)).unwrap();
    let cluster = extract_cluster(&traj, 8, radius).unwrap();
    let clock = Instant::now();
    let opts = EstimatorOptions { noise_free: true, ..Default::default() };
    let est = match estimate_markov(&cluster, p, m, s, &opts) {
        Ok(e) => e,
        Err(e) => return verdict(false, format!("estimation failed: {e}")),
    };
    let secs = clock.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for j in 0..s - 1 {
        for k in -(j as isize)..=j as isize {
            let truth = word_sum(&spec.subsystem, j, k);
            worst = worst.max((est.band.get(j, k) - &truth).norm() / truth.norm());
        }
    }
    verdict(worst < 1e-3 && secs < 120.0, format!("max relative error {worst:.2e} over all F_(j,k), {secs:.1}s"))
}

fn criterion_4() -> Verdict {
    let (radius, s) = (5, 6);
    let mut worst_fit: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    for seed in 0..20u64 {
        let sub = random_network(3, 2, 2, 2 * radius + 3, 100 + seed, 0.95).unwrap().subsystem;
        let band = markov_band_of(&sub, s);
        let r = match realize(&band, radius, s, &RealizerOptions::default()) {
            Ok(r) => r,
            Err(e) => return verdict(false, format!("system {seed}: {e}")),
        };
        let e = &r.est;
        worst_fit = worst_fit
            .max(fit(&e.a, e, &sub.a, &sub, 10))
            .max(fit(&e.a_left, e, &sub.a_left, &sub, 10))
            .max(fit(&e.a_right, e, &sub.a_right, &sub, 10));
        let h = build_h(&band, radius, s).unwrap();
        let f = &r.factors;
        let rel = (&h - &f.o_hat * &f.c_hat).norm() / h.norm();
        worst_res = worst_res.max(rel).max(f.relative_residual);
        if rank(&f.x_hat, 1e-10) > 3 {
            return verdict(false, format!("system {seed}: X_hat rank exceeds 3"));
        }
    }
    verdict(
        worst_fit < 1e-6 && worst_res <= 1e-8,
        format!("max fit error {worst_fit:.2e}, max relative residual {worst_res:.2e} over 20 systems"),
    )
}

fn full_config() -> TrialConfig {
    let mut cfg = TrialConfig::default();
    cfg.estimator.lambda = 1e-3;
    cfg.realizer.n = Some(cfg.n);
    cfg
}

fn out_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn mean_fit_a(report: &SweepReport) -> Vec<f64> {
    report.rows.iter().map(|r| r.fit_a_mean).collect()
}

fn fmt_series(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(" ")
}

fn snr_run() -> Result<(SweepReport, Vec<u8>, f64), String> {
    let clock = Instant::now();
    let report = snr_sweep(&full_config(), &[0.0, 20.0, 40.0, 60.0, 80.0], 10, SWEEP_SEED, None)
        .map_err(|e| e.to_string())?;
    let mut csv = Vec::new();
    report.write_summary_csv(&mut csv).map_err(|e| e.to_string())?;
    report.write_trials_csv(&mut csv).map_err(|e| e.to_string())?;
    Ok((report, csv, clock.elapsed().as_secs_f64()))
}

fn criterion_5(first: &Result<(SweepReport, Vec<u8>, f64), String>) -> Verdict {
    let (report, _, secs) = match first {
        Ok(v) => v,
        Err(e) => return verdict(false, format!("sweep failed: {e}")),
    };
    report.write_all(&out_dir("snr"), "snr_sweep").unwrap();
    let means = mean_fit_a(report);
    let violations = means.windows(2).filter(|w| !(w[1] <= w[0])).count();
    let high = report.rows.iter().filter(|r| r.value >= 60.0).all(|r| r.fit_a_mean <= 1e-2);
    let failures: usize = report.rows.iter().map(|r| r.failures).sum();
    verdict(
        violations <= 1 && high && *secs < 45.0 * 60.0,
        format!(
            "mean fit_A {} ({violations} violations, {failures} failed trials), {:.0}s",
            fmt_series(&means),
            secs
        ),
    )
}

fn criterion_6() -> Verdict {
    let cfg = TrialConfig { snr_db: Some(40.0), ..full_config() };
    let grid = [1e-4, 1e-3, 1e-2, 1e-1];
    let clock = Instant::now();
    let report = match lambda_sweep(&cfg, &grid, 10, SWEEP_SEED, None) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("sweep failed: {e}")),
    };
    report.write_all(&out_dir("lambda"), "lambda_sweep").unwrap();
    let means = mean_fit_a(&report);
    let best = means
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i);
    let ok = matches!(best, Some(i) if i > 0 && i + 1 < grid.len());
    verdict(
        ok,
        format!(
            "mean fit_A {} minimum at lambda={}, {:.0}s",
            fmt_series(&means),
            best.map_or("none".into(), |i| format!("{:e}", grid[i])),
            clock.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_7(first: &Result<(SweepReport, Vec<u8>, f64), String>) -> Verdict {
    let Ok((_, bytes, _)) = first else {
        return verdict(false, "first run failed");
    };
    match snr_run() {
        Ok((_, again, _)) => verdict(&again == bytes, format!("{} bytes compared", bytes.len())),
        Err(e) => verdict(false, format!("rerun failed: {e}")),
    }
}

fn main() {
    let selected: Vec<usize> = std::env::var("NETID1D_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_else(|| (1..=7).collect());
    let names = [
        "structural oracle suite",
        "non-uniqueness witness",
        "noise-free consistency at desk scale",
        "exact-band realization",
        "SNR trend at full scale",
        "lambda-sweep interior minimum",
        "determinism of the SNR sweep",
    ];
    let needs_snr = selected.iter().any(|&c| c == 5 || c == 7);
    let snr = if needs_snr { Some(snr_run()) } else { None };
    let mut failed = 0;
    for c in 1..=7 {
        if !selected.contains(&c) {
            continue;
        }
        let v = match c {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(snr.as_ref().unwrap()),
            6 => criterion_6(),
            _ => criterion_7(snr.as_ref().unwrap()),
        };
        failed += usize::from(!v.passed);
        println!("{} criterion {c} ({}): {}", if v.passed { "PASS" } else { "FAIL" }, names[c - 1], v.detail);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
