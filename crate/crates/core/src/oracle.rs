//! Brute-force structural checks on random systems.
//!
//! Each check compares structured code paths against direct dense products:
//! lifted-cluster powers, explicit enumeration of words in `{A_l, A, A_r}`,
//! products of time-varying observability and controllability matrices.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::network::{lift_cluster, random_network, SubsystemMatrices};
use crate::structure::{build_h, build_shift, markov_band_of, markov_oracle, tv_controllability, tv_observability};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub systems: usize,
    pub n_max: usize,
    pub io_max: usize,
    pub radius_max: usize,
    pub s_max: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { systems: 50, n_max: 4, io_max: 3, radius_max: 5, s_max: 6, seed: 0, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub passed: bool,
}

/// Sum over all words of length `j` in `{A_l, A, A_r}` with
/// `#A_r - #A_l = k` of `C w B`.
pub fn word_expansion(sub: &SubsystemMatrices, j: usize, k: isize) -> DMatrix<f64> {
    let mut total = DMatrix::zeros(sub.p(), sub.m());
    for code in 0..3usize.pow(j as u32) {
        let (mut c, mut shift, mut prod) = (code, 0isize, DMatrix::identity(sub.n(), sub.n()));
        for _ in 0..j {
            let (factor, delta) = match c % 3 {
                0 => (&sub.a_left, -1),
                1 => (&sub.a, 0),
                _ => (&sub.a_right, 1),
            };
            prod = prod * factor;
            shift += delta;
            c /= 3;
        }
        if shift == k {
            total += &sub.c * prod * &sub.b;
        }
    }
    total
}

/// Whether block `(l, q)` of the `j`-th cluster moment is free of boundary truncation.
pub fn in_region(j: usize, l: usize, q: usize, radius: usize) -> bool {
    l.abs_diff(q) <= j && l + q + 1 >= j && l + q + j <= 4 * radius + 1
}

/// Draws one `(subsystem, R, s)` instance within the configured bounds.
fn instance(rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Result<(SubsystemMatrices, usize, usize)> {
    let n = rng.random_range(1..=cfg.n_max);
    let m = rng.random_range(1..=cfg.io_max);
    let p = rng.random_range(1..=cfg.io_max);
    let s = 2 * rng.random_range(2..=(cfg.s_max / 2).max(2));
    let radius = rng.random_range((s / 2).max(1)..=cfg.radius_max.max(s / 2));
    let spec = random_network(n, m, p, 2 * radius + 3, rng.random(), 0.9)?;
    Ok((spec.subsystem, radius, s))
}

/// Runs the pattern, expansion, H-factorization and shift-identity checks.
pub fn structural_suite(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut errs = [0.0f64; 4];
    for _ in 0..cfg.systems {
        let (sub, radius, s) = instance(&mut rng, cfg)?;
        let (p, m) = (sub.p(), sub.m());
        let lifted = lift_cluster(&sub, radius);
        let band = markov_band_of(&sub, s);
        let width = 2 * radius + 1;
        for j in 0..s - 1 {
            let moment = markov_oracle(&lifted, j);
            for l in 0..width {
                for q in 0..width {
                    let blk = moment.view((l * p, q * m), (p, m));
                    if l.abs_diff(q) > j {
                        errs[0] = errs[0].max(blk.amax());
                    } else if in_region(j, l, q, radius) {
                        let k = q as isize - l as isize;
                        errs[0] = errs[0].max((blk - band.get(j, k)).amax());
                        errs[1] = errs[1].max((blk - word_expansion(&sub, j, k)).amax());
                    }
                }
            }
        }
        let layers = s / 2;
        let o = tv_observability(width, layers, &sub)?;
        let c = tv_controllability(width, layers, &sub)?;
        errs[2] = errs[2].max((build_h(&band, radius, s)? - &o * &c).amax());
        let lower = tv_observability(2 * radius - 1, layers - 1, &sub)?;
        let skip = width * p;
        let upper = o.rows(skip, o.nrows() - skip);
        errs[3] = errs[3].max((lower * build_shift(2 * radius - 1, &sub) - upper).amax());
    }
    let names = ["band pattern of lifted moments", "word expansion of band blocks", "H equals O times C", "shift identity"];
    Ok(names
        .iter()
        .zip(errs)
        .map(|(&name, e)| CheckOutcome { name, instances: cfg.systems, max_error: e, passed: e <= cfg.tolerance })
        .collect())
}
