//! Structured low-rank estimation of the cluster's band moments.
//!
//! Decision variables are the output correction `d = y_hat - y` and the
//! parameter vector `phi` of the two-layer Toeplitz matrix `T(phi)`. With
//! `M = Y(y + d) - T(phi) U` the estimator minimizes
//! `|d|^2 / (2R+1) + lambda |W M|_*` for a sequence of reweighting matrices
//! `W = (M M^T + delta^2 I)^{-1/2}` built from the previous solution. Each
//! weighted problem is solved by ADMM on the split `Z = W M`; the joint
//! least-squares step in `(d, phi)` uses a banded Cholesky factor for `d` and
//! a dense Schur complement for `phi`, both formed once per reweighting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::linalg::{matrix_power, numerical_rank, singular_values, sorted_sym_eigen, sym_function, BandCholesky};
use crate::network::{ClusterData, LiftedModel, SubsystemMatrices};
use crate::structure::{block_hankel, tv_observability, MarkovBand, ParamKind, ParamMap, TwoLayerToeplitz};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorOptions {
    /// Weight of the rank surrogate.
    pub lambda: f64,
    /// Number of weighted problems solved (the first uses a scaled identity weight).
    pub reweight_iters: usize,
    /// Relative objective change between reweightings below which the outer loop stops.
    pub reweight_tol: f64,
    /// ADMM iteration cap per weighted problem.
    pub inner_iters: usize,
    /// Relative primal-residual and iterate-change tolerance of the ADMM loop.
    pub inner_tol: f64,
    /// Smoothing of the weight, relative to the largest singular value.
    pub delta_factor: f64,
    /// Initial ADMM penalty as a multiple of the rank weight. The penalty is
    /// then balanced between primal and dual residuals within four decades
    /// of this value and carried over between reweightings.
    pub penalty: f64,
    /// Hankel column count; `None` uses all data.
    pub h: Option<usize>,
    /// Keep `y_hat = y` and optimize only `phi`.
    pub noise_free: bool,
    /// Record per-iteration diagnostics.
    pub trace: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            reweight_iters: 5,
            reweight_tol: 1e-5,
            inner_iters: 500,
            inner_tol: 1e-7,
            delta_factor: 1e-1,
            penalty: 1.0,
            h: None,
            noise_free: false,
            trace: false,
        }
    }
}

/// Outcome of the rank-condition checks that precede estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub lhs: usize,
    pub rhs: usize,
    pub holds: bool,
    /// Observability index of the lifted cluster, when the subsystem is known.
    pub observability_index: Option<usize>,
    pub s_exceeds_observability_index: Option<bool>,
    pub radius_at_least_s_minus_one: bool,
    /// Full column rank of the `s - 1` layer time-varying observability matrix.
    pub tv_observability_full_rank: Option<bool>,
    pub warnings: Vec<String>,
}

/// Evaluates `(2R+1) s p > (2R+1) n + min{(s-1) s p, 2 (s-1) n}` and, given the
/// subsystem, the observability-related conditions. Never fails; violations
/// become warnings.
pub fn check_dimension_conditions(
    n: usize,
    p: usize,
    m: usize,
    radius: usize,
    s: usize,
    subsystem: Option<&SubsystemMatrices>,
) -> DimensionReport {
    let _ = m;
    let width = 2 * radius + 1;
    let lhs = width * s * p;
    let rhs = width * n + (s.saturating_sub(1) * s * p).min(2 * s.saturating_sub(1) * n);
    let holds = lhs > rhs;
    let mut warnings = Vec::new();
    if !holds {
        warnings.push(format!("rank condition fails: {lhs} <= {rhs}"));
    }
    let radius_ok = radius + 1 >= s;
    if !radius_ok {
        warnings.push(format!("R = {radius} < s - 1 = {}; uniqueness is not guaranteed", s.saturating_sub(1)));
    }
    let (mut index, mut exceeds, mut tv_full) = (None, None, None);
    if let Some(sub) = subsystem {
        let lifted = crate::network::lift_cluster(sub, radius);
        let order = lifted.a.nrows();
        let mut stacked = DMatrix::<f64>::zeros(0, order);
        let mut power = DMatrix::identity(order, order);
        for k in 1..=order {
            let row = &lifted.c * &power;
            let mut next = DMatrix::zeros(stacked.nrows() + row.nrows(), order);
            next.rows_mut(0, stacked.nrows()).copy_from(&stacked);
            next.rows_mut(stacked.nrows(), row.nrows()).copy_from(&row);
            stacked = next;
            if numerical_rank(&stacked) == order {
                index = Some(k);
                break;
            }
            power = &power * &lifted.a;
        }
        exceeds = index.map(|v| s > v);
        match exceeds {
            Some(false) => warnings.push(format!("s = {s} does not exceed the observability index")),
            None => warnings.push("lifted cluster is not observable".into()),
            _ => {}
        }
        if s >= 2 && width + 1 >= 2 * (s - 1) {
            let o = tv_observability(width, s - 1, sub).expect("layer count checked");
            let full = numerical_rank(&o) == o.ncols();
            tv_full = Some(full);
            if !full {
                warnings.push("time-varying observability matrix lacks full column rank".into());
            }
        }
    }
    DimensionReport {
        lhs,
        rhs,
        holds,
        observability_index: index,
        s_exceeds_observability_index: exceeds,
        radius_at_least_s_minus_one: radius_ok,
        tv_observability_full_rank: tv_full,
        warnings,
    }
}

/// Persistency-of-excitation test result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeReport {
    pub exciting: bool,
    pub rank: usize,
    pub rows: usize,
    /// `sigma_min / sigma_max` of the input Hankel matrix.
    pub margin: f64,
}

/// Full row rank of the `order`-block-row Hankel matrix of `u` with `h` columns.
pub fn pe_check(u: &DMatrix<f64>, order: usize, h: usize) -> Result<PeReport> {
    let hk = block_hankel(u, order, h, 0)?;
    let rows = hk.matrix.nrows();
    let rank = numerical_rank(&hk.matrix);
    let sv = singular_values(&hk.matrix);
    let margin = if sv.is_empty() || sv[0] == 0.0 { 0.0 } else { sv[sv.len() - 1] / sv[0] };
    Ok(PeReport { exciting: rank == rows && rows <= h, rank, rows, margin })
}

/// Practical local excitation order `s + (2R+1) n`.
pub fn local_pe_order(n: usize, radius: usize, s: usize) -> usize {
    s + (2 * radius + 1) * n
}

/// Per-reweighting diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer: usize,
    pub iterations: usize,
    pub converged: bool,
    /// `|d|^2 + (2R+1) lambda |W M|_*` in normalized output units at the end
    /// of the weighted solve.
    pub objective: f64,
    pub primal_residual: f64,
    /// Singular values of the unweighted residual matrix `M`.
    pub singular_values: Vec<f64>,
    /// `(iteration, relative primal residual, relative change)` when tracing.
    pub steps: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct MarkovEstimate {
    pub band: MarkovBand,
    /// All parameters, including the non-identifiable corner blocks.
    pub theta: TwoLayerToeplitz,
    /// Nuclear norm of the final unweighted residual matrix.
    pub residual_rank_surrogate: f64,
    /// `sum |y_hat - y|^2`.
    pub denoised_output_error: f64,
    /// Numerical rank of the residual matrix (`sigma_k / sigma_1 > 1e-8`).
    pub residual_rank: usize,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<OuterRecord>,
    pub dimension_report: DimensionReport,
    /// Denoised outputs, `L x (2R+1)p`.
    pub y_hat: DMatrix<f64>,
}

#[derive(Serialize)]
struct ThetaEntry {
    kind: &'static str,
    j: usize,
    k: Option<isize>,
    l: Option<usize>,
    q: Option<usize>,
    identifiable: bool,
    block: Vec<Vec<f64>>,
}

impl Serialize for MarkovEstimate {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let theta: Vec<ThetaEntry> = self
            .theta
            .map
            .kinds()
            .iter()
            .zip(&self.theta.blocks)
            .map(|(kind, blk)| {
                let block = crate::serde_mat::to_rows(blk);
                match *kind {
                    ParamKind::Band { j, k } => ThetaEntry {
                        kind: "band",
                        j,
                        k: Some(k),
                        l: None,
                        q: None,
                        identifiable: true,
                        block,
                    },
                    ParamKind::Corner { j, l, q } => ThetaEntry {
                        kind: "corner",
                        j,
                        k: None,
                        l: Some(l),
                        q: Some(q),
                        identifiable: false,
                        block,
                    },
                }
            })
            .collect();
        let mut st = ser.serialize_struct("MarkovEstimate", 9)?;
        st.serialize_field("band", &self.band)?;
        st.serialize_field("theta", &theta)?;
        st.serialize_field("residual_rank_surrogate", &self.residual_rank_surrogate)?;
        st.serialize_field("denoised_output_error", &self.denoised_output_error)?;
        st.serialize_field("residual_rank", &self.residual_rank)?;
        st.serialize_field("iterations", &self.iterations)?;
        st.serialize_field("converged", &self.converged)?;
        st.serialize_field("history", &self.history)?;
        st.serialize_field("dimension_report", &self.dimension_report)?;
        st.end()
    }
}

/// Problem data shared by all weighted solves. Data matrices are stored
/// transposed (`h x rows`) so that row operations of the Toeplitz product are
/// contiguous column operations.
struct Problem {
    s: usize,
    py: usize,
    len: usize,
    h: usize,
    y_t: DMatrix<f64>,
    u_t: DMatrix<f64>,
    /// Scalar parameter id and `(row, col)` in `T` for every nonzero position.
    positions: Vec<(usize, usize, usize)>,
    num_params: usize,
}

impl Problem {
    fn rows(&self) -> usize {
        self.s * self.py
    }

    /// Transposed residual `M^T = Y(y + d)^T - U^T T(phi)^T`.
    fn residual_t(&self, d: &[f64], phi: &[f64]) -> DMatrix<f64> {
        let mut m = self.y_t.clone();
        let py = self.py;
        for a in 0..self.s {
            for c in 0..self.h {
                let t = a + c;
                for i in 0..py {
                    m[(c, a * py + i)] += d[t * py + i];
                }
            }
        }
        for &(k, r, c) in &self.positions {
            let v = phi[k];
            if v != 0.0 {
                m.column_mut(r).axpy(-v, &self.u_t.column(c), 1.0);
            }
        }
        m
    }

    /// Adjoint of the Hankel map applied to a transposed `h x rows` matrix.
    fn hankel_adjoint_t(&self, x_t: &DMatrix<f64>) -> Vec<f64> {
        let py = self.py;
        let mut out = vec![0.0; self.len * py];
        for a in 0..self.s {
            for i in 0..py {
                let col = x_t.column(a * py + i);
                for (c, v) in col.iter().enumerate() {
                    out[(a + c) * py + i] += v;
                }
            }
        }
        out
    }

    /// `T^*(X U^T)` for a transposed `X`.
    fn toeplitz_adjoint_t(&self, x_t: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.num_params);
        for &(k, r, c) in &self.positions {
            out[k] += x_t.column(r).dot(&self.u_t.column(c));
        }
        out
    }
}

/// Penalty-independent parts of the `(d, phi)` normal equations for a fixed weight.
struct StepSystem {
    npp: DMatrix<f64>,
    /// `N_dphi^T`, `num_params x (L py)`; empty on the noise-free path.
    coupling_t: DMatrix<f64>,
    /// Prefix sums of `G` along its block diagonals, one per block offset.
    prefix: Vec<Vec<f64>>,
}

/// Factorized normal equations of the `(d, phi)` step.
struct StepFactor {
    band: Option<BandCholesky>,
    /// `(L^{-1} N_dphi)^T` with `L` the band Cholesky factor of `N_dd`.
    reduced_t: DMatrix<f64>,
    schur: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn step_system(pb: &Problem, g: &DMatrix<f64>, noise_free: bool) -> StepSystem {
    let (s, py) = (pb.s, pb.py);
    let np = pb.num_params;
    // N_phiphi[k, l] = sum over positions (a,b) of k and (c,e) of l of G[a,c] K[e,b].
    let kmat = gram(&pb.u_t);
    let mut npp = DMatrix::zeros(np, np);
    for &(k, a, b) in &pb.positions {
        for &(l, c, e) in &pb.positions {
            npp[(k, l)] += g[(a, c)] * kmat[(e, b)];
        }
    }
    if noise_free {
        return StepSystem { npp, coupling_t: DMatrix::zeros(0, 0), prefix: Vec::new() };
    }
    // Block (t, t') of H^* G H is sum_c G[t - c, t' - c]; prefix sums over the
    // block diagonal make each block O(py^2).
    let blk = |a: usize, b: usize, i: usize, j: usize| g[(a * py + i, b * py + j)];
    let mut prefix: Vec<Vec<f64>> = Vec::with_capacity(s);
    for delta in 0..s {
        let mut acc = vec![0.0; (s - delta + 1) * py * py];
        for a in 0..s - delta {
            for i in 0..py {
                for j in 0..py {
                    let idx = (a + 1) * py * py + i * py + j;
                    acc[idx] = acc[idx - py * py] + blk(a, a + delta, i, j);
                }
            }
        }
        prefix.push(acc);
    }

    // Row k of N_dphi^T is H^*(G T_k U): each position (k, r, c) adds the
    // column G[:, r] at every time offset, scaled by the input U^T[., c].
    let nd = pb.len * py;
    let rows = s * py;
    let mut coupling_t = DMatrix::zeros(np, nd);
    let mut colbuf = vec![0.0; nd];
    let mut current = usize::MAX;
    let mut sorted = pb.positions.clone();
    sorted.sort_unstable();
    let flush = |k: usize, buf: &mut Vec<f64>, out: &mut DMatrix<f64>| {
        if k != usize::MAX {
            for (idx, v) in buf.iter_mut().enumerate() {
                out[(k, idx)] = *v;
                *v = 0.0;
            }
        }
    };
    for &(k, r, c) in &sorted {
        if k != current {
            flush(current, &mut colbuf, &mut coupling_t);
            current = k;
        }
        let gcol = g.column(r);
        let gcol = gcol.as_slice();
        for (cc, &uv) in pb.u_t.column(c).iter().enumerate() {
            if uv == 0.0 {
                continue;
            }
            for (dst, gv) in colbuf[cc * py..cc * py + rows].iter_mut().zip(gcol) {
                *dst += gv * uv;
            }
        }
    }
    flush(current, &mut colbuf, &mut coupling_t);
    StepSystem { npp, coupling_t, prefix }
}

fn factor_step(pb: &Problem, sys: &StepSystem, mu: f64) -> Result<StepFactor> {
    let (s, py, len, h) = (pb.s, pb.py, pb.len, pb.h);
    let np = pb.num_params;
    if sys.prefix.is_empty() {
        let schur = nalgebra::Cholesky::new(sys.npp.clone())
            .ok_or_else(|| Error::numerical(Stage::Estimation, "parameter normal matrix is singular"))?;
        return Ok(StepFactor { band: None, reduced_t: DMatrix::zeros(0, 0), schur });
    }
    let nd = len * py;
    let bw = s * py - 1;
    let prefix = &sys.prefix;
    let entry = |row: usize, d: usize| -> f64 {
        let col = row - d;
        let (t2, j) = (row / py, row % py);
        let (t1, i) = (col / py, col % py);
        let delta = t2 - t1;
        if delta >= s {
            return 0.0;
        }
        let amin = t1.saturating_sub(h - 1);
        let amax = t1.min(s - 1 - delta);
        let mut v = if amax >= amin {
            let pre = &prefix[delta];
            pre[(amax + 1) * py * py + i * py + j] - pre[amin * py * py + i * py + j]
        } else {
            0.0
        };
        if d == 0 {
            v += 2.0 / mu;
        }
        v
    };
    let band = BandCholesky::factor(nd, bw, entry)?;

    // Row-major nd x np right-hand sides are the column-major np x nd matrix.
    let mut rhs: Vec<f64> = sys.coupling_t.as_slice().to_vec();
    band.forward_rows_in_place(&mut rhs, np);
    let reduced_t = DMatrix::from_vec(np, nd, rhs);
    let schur_m = &sys.npp - gram(&reduced_t.transpose());
    let schur = nalgebra::Cholesky::new(schur_m)
        .ok_or_else(|| Error::numerical(Stage::Estimation, "Schur complement is not positive definite"))?;
    Ok(StepFactor { band: Some(band), reduced_t, schur })
}

impl StepFactor {
    /// Solves the `(d, phi)` normal equations for the transposed right-hand
    /// side `R^T = (W V - G Y)^T`.
    fn solve(&self, pb: &Problem, r_t: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let rp = -pb.toeplitz_adjoint_t(r_t);
        match &self.band {
            None => {
                let phi = self.schur.solve(&rp);
                (vec![0.0; pb.len * pb.py], phi.as_slice().to_vec())
            }
            Some(band) => {
                let mut t = pb.hankel_adjoint_t(r_t);
                band.forward_in_place(&mut t);
                let tv = DVector::from_column_slice(&t);
                let phi = self.schur.solve(&(rp + &self.reduced_t * &tv));
                let mut d = tv + self.reduced_t.tr_mul(&phi);
                band.backward_in_place(d.as_mut_slice());
                (d.as_slice().to_vec(), phi.as_slice().to_vec())
            }
        }
    }
}

/// `X^T X` through the blocked product kernel.
fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose() * x
}

fn nuclear_norm_t(m_t: &DMatrix<f64>) -> f64 {
    let (vals, _) = sorted_sym_eigen(gram(m_t));
    vals.iter().map(|v| v.max(0.0).sqrt()).sum()
}

fn unweighted_spectrum(m_t: &DMatrix<f64>) -> Vec<f64> {
    let (vals, _) = sorted_sym_eigen(gram(m_t));
    vals.iter().map(|v| v.max(0.0).sqrt()).collect()
}

/// Estimates the band moments of the cluster from local data.
pub fn estimate_markov(
    cluster: &ClusterData,
    p: usize,
    m: usize,
    s: usize,
    opts: &EstimatorOptions,
) -> Result<MarkovEstimate> {
    let radius = cluster.radius;
    let width = 2 * radius + 1;
    let (py, mu_w) = (width * p, width * m);
    if cluster.y.ncols() != py || cluster.u.ncols() != mu_w {
        return Err(Error::dim("cluster data widths disagree with p, m and the radius"));
    }
    if !(opts.lambda > 0.0) && !opts.noise_free {
        return Err(Error::invalid("lambda must be positive"));
    }
    if !(opts.penalty > 0.0) {
        return Err(Error::invalid("penalty must be positive"));
    }
    let len = cluster.len();
    let h = opts.h.unwrap_or(len.saturating_sub(s) + 1);
    if h == 0 || len < s + h - 1 {
        return Err(Error::invalid(format!("L = {len} is too short for s = {s}, h = {h}")));
    }
    let map = ParamMap::new(radius, s, p, m)?;
    let positions: Vec<(usize, usize, usize)> = map
        .scalar_positions()
        .into_iter()
        .enumerate()
        .flat_map(|(k, list)| list.into_iter().map(move |(r, c)| (k, r, c)))
        .collect();
    // The data term is measured in units of the mean output power per
    // cluster subsystem so that lambda depends neither on the output scale
    // nor on the cluster size.
    let y_data = cluster.y.rows(0, s + h - 1).into_owned();
    let power = y_data.norm_squared() / y_data.len() as f64;
    let unit = if power > 0.0 { power.sqrt() } else { 1.0 };
    let y_data = y_data / unit;
    let pb = Problem {
        s,
        py,
        len: s + h - 1,
        h,
        y_t: block_hankel(&y_data, s, h, 0)?.matrix.transpose(),
        u_t: block_hankel(&cluster.u, s, h, 0)?.matrix.transpose(),
        num_params: map.num_scalars(),
        positions,
    };
    let dims = check_dimension_conditions(0, p, m, radius, s, None);
    let rows = pb.rows();
    // Scaled so that the data term carries unit weight: |d|^2 + lambda' |W M|_*.
    let lambda = if opts.noise_free { 1.0 } else { opts.lambda * width as f64 };
    let mu0 = opts.penalty * lambda;
    let mut mu = mu0;

    let mut d = vec![0.0; pb.len * py];
    // Least-squares warm start, min over phi of |Y - T(phi) U|_F; the first
    // weight is then built from its residual like every later one. Without
    // excitation the start is phi = 0 and any failure surfaces below.
    let ls_system = step_system(&pb, &DMatrix::identity(rows, rows), true);
    let mut phi = match factor_step(&pb, &ls_system, 1.0) {
        Ok(ls) => ls.schur.solve(&pb.toeplitz_adjoint_t(&pb.y_t)).as_slice().to_vec(),
        Err(_) => vec![0.0; pb.num_params],
    };
    let mut history: Vec<OuterRecord> = Vec::new();
    let mut dual_t = DMatrix::zeros(0, 0);
    let mut converged_all = true;
    let mut total_iters = 0;
    for outer in 0..opts.reweight_iters.max(1) {
        let m_t = pb.residual_t(&d, &phi);
        let (vals, vecs) = sorted_sym_eigen(gram(&m_t));
        let smax2 = vals[0].max(0.0);
        if smax2 == 0.0 {
            // Zero residual: the current iterate is exact.
            history.push(OuterRecord {
                outer,
                iterations: 0,
                converged: true,
                objective: d.iter().map(|v| v * v).sum(),
                primal_residual: 0.0,
                singular_values: vec![0.0; rows],
                steps: Vec::new(),
            });
            break;
        }
        let delta2 = opts.delta_factor * opts.delta_factor * smax2;
        let w = sym_function(&vals, &vecs, |v| 1.0 / (v.max(0.0) + delta2).sqrt());
        let g = &w * &w;
        let system = step_system(&pb, &g, opts.noise_free);
        let mut factor = factor_step(&pb, &system, mu)?;
        let yg_t = &pb.y_t * &g;

        let mut wm_t = &m_t * &w;
        // The dual carries over between weights as a warm start.
        if dual_t.nrows() == 0 {
            dual_t = DMatrix::zeros(pb.h, rows);
        }
        let mut z_prev: Option<DMatrix<f64>> = None;
        let mut steps = Vec::new();
        let mut converged = false;
        let mut iters = 0;
        let mut primal = f64::INFINITY;
        for it in 0..opts.inner_iters {
            iters = it + 1;
            let tau = lambda / mu;
            let a_t = &wm_t + &dual_t / mu;
            let (sv2, basis) = sorted_sym_eigen(gram(&a_t));
            let shrink = sym_function(&sv2, &basis, |v| {
                let sv = v.max(0.0).sqrt();
                if sv > tau { (sv - tau) / sv } else { 0.0 }
            });
            let z_t = &a_t * shrink;
            let v_t = &z_t - &dual_t / mu;
            let r_t = &v_t * &w - &yg_t;
            let (d_new, phi_new) = factor.solve(&pb, &r_t);
            let wm_new = pb.residual_t(&d_new, &phi_new) * &w;
            let resid = &wm_new - &z_t;
            let scale = wm_new.norm().max(f64::MIN_POSITIVE);
            primal = resid.norm() / scale;
            let change = (&wm_new - &wm_t).norm() / scale;
            dual_t += &resid * mu;
            // Residual balancing: the dual is stored unscaled, so only the
            // step factor depends on the penalty.
            if it % 10 == 9 && !opts.noise_free {
                if let Some(prev) = &z_prev {
                    let rel_primal = resid.norm() / scale.max(z_t.norm());
                    let rel_dual = mu * (&z_t - prev).norm() / dual_t.norm().max(f64::MIN_POSITIVE);
                    let next = if rel_primal > 10.0 * rel_dual {
                        mu * 2.0
                    } else if rel_dual > 10.0 * rel_primal {
                        mu / 2.0
                    } else {
                        mu
                    };
                    if next != mu && next <= mu0 * 1e4 && next >= mu0 * 1e-4 {
                        mu = next;
                        factor = factor_step(&pb, &system, mu)?;
                    }
                }
            }
            z_prev = Some(z_t);
            wm_t = wm_new;
            d = d_new;
            phi = phi_new;
            if !(primal.is_finite() && change.is_finite()) {
                return Err(Error::numerical(Stage::Estimation, "rank surrogate diverged"));
            }
            if opts.trace {
                steps.push((it, primal, change));
            }
            if it >= 5 && primal < opts.inner_tol && change < opts.inner_tol {
                converged = true;
                break;
            }
        }
        total_iters += iters;
        converged_all &= converged;
        let data_term: f64 = d.iter().map(|v| v * v).sum();
        let objective = if opts.noise_free { 0.0 } else { data_term } + lambda * nuclear_norm_t(&wm_t);
        if !objective.is_finite() {
            return Err(Error::numerical(Stage::Estimation, "rank surrogate diverged"));
        }
        let m_final = pb.residual_t(&d, &phi);
        let settled = history
            .last()
            .is_some_and(|prev| (prev.objective - objective).abs() <= opts.reweight_tol * objective.abs());
        history.push(OuterRecord {
            outer,
            iterations: iters,
            converged,
            objective,
            primal_residual: primal,
            singular_values: unweighted_spectrum(&m_final).into_iter().map(|v| v * unit).collect(),
            steps,
        });
        if settled {
            break;
        }
    }

    let m_final = pb.residual_t(&d, &phi) * unit;
    for v in d.iter_mut().chain(phi.iter_mut()) {
        *v *= unit;
    }
    let theta = TwoLayerToeplitz::from_scalars(map, &phi)?;
    let band = theta.markov_band()?;
    let spectrum = unweighted_spectrum(&m_final);
    let top = spectrum.first().copied().unwrap_or(0.0);
    let residual_rank = spectrum.iter().filter(|&&v| top > 0.0 && v / top > 1e-8).count();
    let mut y_hat = cluster.y.clone();
    for t in 0..pb.len {
        for i in 0..py {
            y_hat[(t, i)] += d[t * py + i];
        }
    }
    Ok(MarkovEstimate {
        band,
        theta,
        residual_rank_surrogate: spectrum.iter().sum(),
        denoised_output_error: d.iter().map(|v| v * v).sum(),
        residual_rank,
        iterations: total_iters,
        converged: converged_all,
        history,
        dimension_report: dims,
        y_hat,
    })
}

/// First-layer Toeplitz perturbation `Delta_s = T^{D_R}(I_s (x) G_R)` that
/// leaves the rank of the data residual unchanged on noise-free data.
/// `gain` is `2n x (2R+1)m`.
pub fn nonuniqueness_witness(lifted: &LiftedModel, s: usize, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n2 = lifted.d.ncols();
    let py = lifted.c.nrows();
    let mw = lifted.b.ncols();
    if gain.shape() != (n2, mw) {
        return Err(Error::dim(format!("gain must be {n2} x {mw}")));
    }
    let mut out = DMatrix::zeros(s * py, s * mw);
    for j in 0..s.saturating_sub(1) {
        let blk = &lifted.c * matrix_power(&lifted.a, j) * &lifted.d * gain;
        for beta in 0..s - 1 - j {
            let alpha = beta + j + 1;
            out.view_mut((alpha * py, beta * mw), (py, mw)).copy_from(&blk);
        }
    }
    Ok(out)
}
