//! Structured realization: from the band moments to `(A, A_l, A_r, B, C)` up to
//! one similarity transformation.
//!
//! The H-matrix is the product of an observability matrix of sequences
//! `W_{a,l}` and a controllability matrix of sequences `E_{b,l}`; it is an
//! affine image of `X = W E` (rank `n`). A rank-constrained fit of `X`, its
//! SVD split and a least-squares solve of the shift structure recover the
//! local matrices.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::linalg::{lstsq, singular_values};
use crate::network::SubsystemMatrices;
use crate::serde_mat;
use crate::structure::{affine_operator, build_h, place_controllability, place_observability, AffineOperator, MarkovBand};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealizerOptions {
    /// Fixed subsystem order; `None` selects it from the singular-value gap.
    pub n: Option<usize>,
    /// Smallest accepted singular-value ratio for automatic order selection.
    pub gap_threshold: f64,
    /// Iteration cap of the penalized difference-of-convex stage.
    pub dc_iters: usize,
    /// Iteration cap of each Levenberg-Marquardt polish.
    pub lm_iters: usize,
    /// Additional random starts tried while the fit is not exact.
    pub starts: usize,
    /// Seed of the random starts.
    pub seed: u64,
}

impl Default for RealizerOptions {
    fn default() -> Self {
        Self { n: None, gap_threshold: 10.0, dc_iters: 2000, lm_iters: 100, starts: 16, seed: 0x5eed }
    }
}

/// Relative residual below which a rank-`n` fit counts as exact.
const EXACT_FIT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEstimate {
    pub n: usize,
    /// `sigma_{(2R+1)n} / sigma_{(2R+1)n+1}` of H.
    pub gap: f64,
    pub singular_values: Vec<f64>,
}

/// Picks `n` maximizing `sigma_{(2R+1)k} / sigma_{(2R+1)k+1}` of H: the rank
/// of H is `(2R+1) n` because its observability factor has `2R+1` block
/// columns of width `n`. Ties go to the smaller `k`.
pub fn estimate_order(h: &DMatrix<f64>, op: &AffineOperator, gap_threshold: f64) -> Result<OrderEstimate> {
    let width = 2 * op.radius + 1;
    let sv = singular_values(h);
    let x_min = op.x_blocks * op.p.min(op.m);
    let mut best: Option<(usize, f64)> = None;
    let mut k = 1;
    while 2 * k < x_min.max(2) && width * k < sv.len() {
        let num = sv[width * k - 1];
        let den = sv[width * k].max(f64::MIN_POSITIVE);
        let ratio = num / den;
        if num > 0.0 && best.is_none_or(|(_, r)| ratio > r) {
            best = Some((k, ratio));
        }
        k += 1;
    }
    match best {
        Some((n, gap)) if gap >= gap_threshold => Ok(OrderEstimate { n, gap, singular_values: sv.as_slice().to_vec() }),
        Some((n, gap)) => Err(Error::numerical(
            Stage::OrderSelection,
            format!("order undetectable: largest gap {gap:.3e} at n = {n} is below {gap_threshold}; supply n explicitly"),
        )),
        None => Err(Error::numerical(Stage::OrderSelection, "order undetectable: H has no usable singular values")),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorizationResult {
    #[serde(with = "serde_mat")]
    pub x_hat: DMatrix<f64>,
    /// Stacked `W_{a,l}` blocks, `(s/2)^2 p x n`.
    #[serde(with = "serde_mat")]
    pub w_hat: DMatrix<f64>,
    /// Stacked `E_{b,l}` blocks, `n x (s/2)^2 m`.
    #[serde(with = "serde_mat")]
    pub e_hat: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub o_hat: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub c_hat: DMatrix<f64>,
    /// `|H - A(X_hat)|_F`.
    pub residual: f64,
    pub relative_residual: f64,
    pub sigma: Vec<f64>,
    pub dc_iterations: usize,
    pub starts_used: usize,
    /// False when no fit reached the exactness threshold; the best one is kept.
    pub exact: bool,
}

/// Group targets, weights (`sqrt` of output multiplicity) and target norm.
struct GroupData {
    targets: Vec<DMatrix<f64>>,
    weights: Vec<f64>,
    norm: f64,
}

impl GroupData {
    fn new(op: &AffineOperator, h: &DMatrix<f64>) -> Self {
        let targets = op.group_targets(h);
        let weights: Vec<f64> = op.groups.iter().map(|g| (g.outputs.len() as f64).sqrt()).collect();
        let norm = targets.iter().zip(&weights).map(|(t, w)| w * w * t.norm_squared()).sum::<f64>().sqrt();
        Self { targets, weights, norm }
    }

    /// `|H - A(X)|_F` for an H assembled from group values.
    fn residual(&self, op: &AffineOperator, x: &DMatrix<f64>) -> f64 {
        op.apply_groups(x)
            .iter()
            .zip(&self.targets)
            .zip(&self.weights)
            .map(|((s, t), w)| w * w * (s - t).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    fn relative(&self, op: &AffineOperator, x: &DMatrix<f64>) -> f64 {
        self.residual(op, x) / self.norm.max(f64::MIN_POSITIVE)
    }
}

fn truncate(x: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let svd = x.clone().svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let left = DMatrix::from_fn(x.nrows(), n, |r, c| u[(r, order[c])]);
    let right = DMatrix::from_fn(n, x.ncols(), |r, c| vt[(order[r], c)]);
    (left, right, sv)
}

/// Penalized difference-of-convex iteration on
/// `|H - A(X)|^2 + rho (|X|_* - <U_n V_n^T, X>)` with proximal gradient steps.
fn dc_stage(op: &AffineOperator, gd: &GroupData, x0: DMatrix<f64>, n: usize, iters: usize) -> (DMatrix<f64>, usize) {
    let lip = 2.0
        * op.groups.iter().zip(&gd.weights).map(|(g, w)| w * w * g.terms.len() as f64).fold(0.0, f64::max);
    let mut x = x0;
    let mut rho = 0.1 * singular_values(&x).get(0).copied().unwrap_or(0.0);
    if rho == 0.0 {
        return (x, 0);
    }
    let mut used = 0;
    for it in 0..iters {
        used = it + 1;
        let (u, vt, _) = truncate(&x, n);
        let fitted = op.apply_groups(&x);
        let grads: Vec<DMatrix<f64>> = fitted
            .iter()
            .zip(&gd.targets)
            .zip(&gd.weights)
            .map(|((s, t), w)| (s - t) * (2.0 * w * w))
            .collect();
        let grad = op.adjoint_groups(&grads) - (&u * &vt) * rho;
        let y = &x - grad / lip;
        let svd = y.svd(true, true);
        let shrunk = svd.singular_values.map(|v| (v - rho / lip).max(0.0));
        x = svd.u.expect("requested") * DMatrix::from_diagonal(&shrunk) * svd.v_t.expect("requested");
        if it % 20 == 19 {
            rho *= 2.0;
        }
        let sv = singular_values(&x);
        if it > 20 && sv.len() > n && sv[n] <= 1e-8 * sv[0] {
            break;
        }
    }
    (x, used)
}

/// Levenberg-Marquardt on the factored form `X = W E` of the weighted group residual.
fn lm_polish(op: &AffineOperator, gd: &GroupData, x: &DMatrix<f64>, n: usize, iters: usize) -> DMatrix<f64> {
    let (p, m, nb) = (op.p, op.m, op.x_blocks);
    let (u, vt, sv) = truncate(x, n);
    let scale: Vec<f64> = sv.iter().take(n).map(|v| v.sqrt()).collect();
    let mut w = DMatrix::from_fn(nb * p, n, |r, c| u[(r, c)] * scale[c]);
    let mut e = DMatrix::from_fn(n, nb * m, |r, c| vt[(r, c)] * scale[r]);
    let nw = nb * p * n;
    let nparams = nw + n * nb * m;
    let nres = op.groups.len() * p * m;

    let residual = |w: &DMatrix<f64>, e: &DMatrix<f64>| -> DVector<f64> {
        let mut r = DVector::zeros(nres);
        for (gi, ((g, t), wt)) in op.groups.iter().zip(&gd.targets).zip(&gd.weights).enumerate() {
            let mut acc = -t.clone();
            for &(i, j) in &g.terms {
                acc += w.rows(i * p, p) * e.columns(j * m, m);
            }
            for r_ in 0..p {
                for c in 0..m {
                    r[gi * p * m + r_ * m + c] = wt * acc[(r_, c)];
                }
            }
        }
        r
    };
    let jacobian = |w: &DMatrix<f64>, e: &DMatrix<f64>| -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(nres, nparams);
        for (gi, (g, wt)) in op.groups.iter().zip(&gd.weights).enumerate() {
            for &(i, j) in &g.terms {
                for r_ in 0..p {
                    for c in 0..m {
                        let row = gi * p * m + r_ * m + c;
                        for t in 0..n {
                            jac[(row, (i * p + r_) * n + t)] += wt * e[(t, j * m + c)];
                            jac[(row, nw + t * nb * m + j * m + c)] += wt * w[(i * p + r_, t)];
                        }
                    }
                }
            }
        }
        jac
    };

    let floor = 1e-28 * gd.norm * gd.norm;
    let mut r = residual(&w, &e);
    let mut cost = r.norm_squared();
    let mut damping = 1e-3;
    for _ in 0..iters {
        if cost <= floor {
            break;
        }
        let jac = jacobian(&w, &e);
        let jt = jac.transpose();
        let normal = &jt * &jac;
        let grad = &jt * &r;
        let mut accepted = false;
        while damping <= 1e12 {
            let mut sys = normal.clone();
            for k in 0..nparams {
                sys[(k, k)] += damping * (normal[(k, k)] + 1e-12);
            }
            let Some(chol) = sys.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = -chol.solve(&grad);
            let w2 = &w + DMatrix::from_row_slice(nb * p, n, &step.as_slice()[..nw]);
            let e2 = &e + DMatrix::from_row_slice(n, nb * m, &step.as_slice()[nw..]);
            let r2 = residual(&w2, &e2);
            let c2 = r2.norm_squared();
            if c2 < cost {
                let gain = cost - c2;
                w = w2;
                e = e2;
                r = r2;
                accepted = gain > 1e-14 * cost;
                cost = c2;
                damping = (damping / 10.0).max(1e-15);
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    w * e
}

/// Rank-`n` fit of `A(X) = H`: difference-of-convex initialization, a
/// Levenberg-Marquardt polish, then seeded random restarts while the fit is
/// not exact. Returns the best iterate found.
pub fn solve_rank_constrained(
    h: &DMatrix<f64>,
    op: &AffineOperator,
    n: usize,
    opts: &RealizerOptions,
) -> Result<FactorizationResult> {
    if n == 0 {
        return Err(Error::invalid("order must be at least 1"));
    }
    if h.shape() != op.h_shape() {
        return Err(Error::dim(format!("H is {:?}, operator expects {:?}", h.shape(), op.h_shape())));
    }
    let gd = GroupData::new(op, h);
    let x0 = op.min_norm_solution(h);
    let (xr, xc) = op.x_shape();
    if n >= xr.min(xc) {
        return factor_and_rebuild(op, h, x0, n.min(xr.min(xc)), 0, 0, true);
    }
    let (dc, dc_iterations) = dc_stage(op, &gd, x0.clone(), n, opts.dc_iters);
    let mut best = lm_polish(op, &gd, &dc, n, opts.lm_iters);
    let mut best_rel = gd.relative(op, &best);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x_norm = x0.norm().max(f64::MIN_POSITIVE);
    let mut starts_used = 0;
    while !(best_rel <= EXACT_FIT) && starts_used < opts.starts {
        starts_used += 1;
        let left = DMatrix::<f64>::from_fn(xr, n, |_, _| StandardNormal.sample(&mut rng));
        let right = DMatrix::<f64>::from_fn(n, xc, |_, _| StandardNormal.sample(&mut rng));
        let mut start = left * right;
        start *= x_norm / start.norm().max(f64::MIN_POSITIVE);
        let cand = lm_polish(op, &gd, &start, n, opts.lm_iters);
        let rel = gd.relative(op, &cand);
        if rel < best_rel {
            best = cand;
            best_rel = rel;
        }
    }
    if !best_rel.is_finite() {
        return Err(Error::numerical(Stage::RankConstrained, "rank-constrained fit diverged"));
    }
    factor_and_rebuild(op, h, best, n, dc_iterations, starts_used, best_rel <= EXACT_FIT)
}

/// SVD split `W = U_n`, `E = Sigma_n V_n^T` and structured reassembly.
pub fn factor_and_rebuild(
    op: &AffineOperator,
    h: &DMatrix<f64>,
    x_hat: DMatrix<f64>,
    n: usize,
    dc_iterations: usize,
    starts_used: usize,
    exact: bool,
) -> Result<FactorizationResult> {
    let (u, vt, sigma) = truncate(&x_hat, n);
    if sigma.is_empty() || sigma[n - 1] <= 1e-12 * sigma[0] {
        return Err(Error::numerical(Stage::Factorization, format!("X_hat has rank below {n}")));
    }
    let e_hat = DMatrix::from_fn(n, x_hat.ncols(), |r, c| vt[(r, c)] * sigma[r]);
    let layers = op.s / 2;
    let width = 2 * op.radius + 1;
    let o_hat = place_observability(&u, op.p, width, 0, layers);
    let c_hat = place_controllability(&e_hat, op.m, width, layers);
    let residual = (h - op.apply(&x_hat)).norm();
    let relative_residual = residual / h.norm().max(f64::MIN_POSITIVE);
    Ok(FactorizationResult {
        x_hat,
        w_hat: u,
        e_hat,
        o_hat,
        c_hat,
        residual,
        relative_residual,
        sigma,
        dc_iterations,
        starts_used,
        exact,
    })
}

/// Least-squares fit of `O_lower G(A_l, A, A_r) = O_upper`, where `O_lower`
/// has width `2R-1` and layers `0..s/2-1` and `O_upper` width `2R+1` and
/// layers `1..s/2`. Column block `q` of the product is
/// `O_lower[q] A_l + O_lower[q-1] A + O_lower[q-2] A_r`, so the structured
/// problem is an ordinary least squares in the stacked `[A_l; A; A_r]`.
/// Returns `(A_l, A, A_r, residual)`.
pub fn solve_shift_ls(
    w_hat: &DMatrix<f64>,
    p: usize,
    radius: usize,
    s: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64)> {
    let layers = s / 2;
    if layers < 2 || radius == 0 {
        return Err(Error::invalid("shift least squares needs s >= 4 and R >= 1"));
    }
    let n = w_hat.ncols();
    let lower = place_observability(w_hat, p, 2 * radius - 1, 0, layers - 1);
    let upper = place_observability(w_hat, p, 2 * radius + 1, 1, layers - 1);
    let sv = singular_values(&lower);
    let cond = sv[0] / sv[sv.len() - 1].max(f64::MIN_POSITIVE);
    if lower.nrows() < lower.ncols() || !(sv[sv.len() - 1] > 1e-8 * sv[0]) {
        return Err(Error::numerical(
            Stage::ShiftLeastSquares,
            format!("shifted observability matrix lacks full column rank (condition {cond:.3e})"),
        ));
    }
    let rows = lower.nrows();
    let width = 2 * radius + 1;
    let mut design = DMatrix::zeros(width * rows, 3 * n);
    let mut target = DMatrix::zeros(width * rows, n);
    for q in 0..width {
        for (slot, shift) in [0usize, 1, 2].into_iter().enumerate() {
            if q >= shift && q - shift < 2 * radius - 1 {
                design.view_mut((q * rows, slot * n), (rows, n)).copy_from(&lower.columns((q - shift) * n, n));
            }
        }
        target.view_mut((q * rows, 0), (rows, n)).copy_from(&upper.columns(q * n, n));
    }
    let dsv = singular_values(&design);
    if !(dsv[dsv.len() - 1] > 1e-12 * dsv[0]) {
        return Err(Error::numerical(
            Stage::ShiftLeastSquares,
            format!("shift design is rank deficient (condition {:.3e})", dsv[0] / dsv[dsv.len() - 1]),
        ));
    }
    let theta = lstsq(&design, &target, 1e-14)?;
    let residual = (&design * &theta - &target).norm_squared();
    Ok((theta.rows(0, n).into_owned(), theta.rows(n, n).into_owned(), theta.rows(2 * n, n).into_owned(), residual))
}

#[derive(Debug, Clone, Serialize)]
pub struct RealizationDiagnostics {
    pub order: Option<OrderEstimate>,
    pub residual: f64,
    pub relative_residual: f64,
    pub sigma: Vec<f64>,
    pub dc_iterations: usize,
    pub starts_used: usize,
    pub exact_fit: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RealizationResult {
    pub est: SubsystemMatrices,
    pub n_used: usize,
    pub shift_residual: f64,
    pub diagnostics: RealizationDiagnostics,
    #[serde(skip)]
    pub factors: FactorizationResult,
    #[serde(skip)]
    pub h: DMatrix<f64>,
}

/// Full realization pipeline from a band.
pub fn realize(band: &MarkovBand, radius: usize, s: usize, opts: &RealizerOptions) -> Result<RealizationResult> {
    if s < 4 || s % 2 != 0 {
        return Err(Error::invalid("s must be an even integer of at least 4"));
    }
    let mut warnings = Vec::new();
    if radius + 2 < s {
        warnings.push(format!("R = {radius} < s - 2 = {}; the similarity ambiguity may not be block diagonal", s - 2));
    }
    let op = affine_operator(radius, s, band.p, band.m)?;
    let h = build_h(band, radius, s)?;
    let (n, order) = match opts.n {
        Some(n) => (n, None),
        None => {
            let est = estimate_order(&h, &op, opts.gap_threshold)?;
            (est.n, Some(est))
        }
    };
    let factors = solve_rank_constrained(&h, &op, n, opts)?;
    if !factors.exact {
        warnings.push(format!("rank-{n} fit is inexact (relative residual {:.3e})", factors.relative_residual));
    }
    let (a_left, a, a_right, shift_residual) = solve_shift_ls(&factors.w_hat, band.p, radius, s)?;
    let c = factors.w_hat.rows(0, band.p).into_owned();
    let b = factors.e_hat.columns(0, band.m).into_owned();
    let est = SubsystemMatrices::new(a, a_left, a_right, b, c)
        .map_err(|e| Error::numerical(Stage::ShiftLeastSquares, e.to_string()))?;
    Ok(RealizationResult {
        est,
        n_used: n,
        shift_residual,
        diagnostics: RealizationDiagnostics {
            order,
            residual: factors.residual,
            relative_residual: factors.relative_residual,
            sigma: factors.sigma.clone(),
            dc_iterations: factors.dc_iterations,
            starts_used: factors.starts_used,
            exact_fit: factors.exact,
            warnings,
        },
        factors,
        h,
    })
}
