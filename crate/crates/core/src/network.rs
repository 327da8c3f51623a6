//! The homogeneous chain, its lifted cluster model, simulation and measurement noise.
//!
//! Subsystem `i` (1-based, `1..=N`) evolves as
//! `x_i(k+1) = A x_i(k) + A_l x_{i-1}(k) + A_r x_{i+1}(k) + B u_i(k)`, `y_i(k) = C x_i(k)`,
//! with absent neighbours contributing zero. Time-indexed data are stored as
//! matrices with one row per time step and subsystems stacked along columns.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::linalg::{numerical_rank, spectral_radius};
use crate::serde_mat;

/// Local dynamics `(A, A_l, A_r, B, C)` shared by every subsystem of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SubsystemRepr", into = "SubsystemRepr")]
pub struct SubsystemMatrices {
    pub a: DMatrix<f64>,
    pub a_left: DMatrix<f64>,
    pub a_right: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct SubsystemRepr {
    n: usize,
    m: usize,
    p: usize,
    #[serde(with = "serde_mat")]
    a: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    a_left: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    a_right: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    b: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    c: DMatrix<f64>,
}

impl TryFrom<SubsystemRepr> for SubsystemMatrices {
    type Error = Error;
    fn try_from(r: SubsystemRepr) -> Result<Self> {
        let s = SubsystemMatrices::new(r.a, r.a_left, r.a_right, r.b, r.c)?;
        if (s.n(), s.m(), s.p()) != (r.n, r.m, r.p) {
            return Err(Error::dim("declared n, m, p disagree with matrix shapes"));
        }
        Ok(s)
    }
}

impl From<SubsystemMatrices> for SubsystemRepr {
    fn from(s: SubsystemMatrices) -> Self {
        SubsystemRepr { n: s.n(), m: s.m(), p: s.p(), a: s.a, a_left: s.a_left, a_right: s.a_right, b: s.b, c: s.c }
    }
}

impl SubsystemMatrices {
    pub fn new(
        a: DMatrix<f64>,
        a_left: DMatrix<f64>,
        a_right: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::dim("A must be square and non-empty"));
        }
        if a_left.shape() != (n, n) || a_right.shape() != (n, n) {
            return Err(Error::dim("A_l and A_r must match A"));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dim("B must have n rows and m >= 1 columns"));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::dim("C must have n columns and p >= 1 rows"));
        }
        Ok(Self { a, a_left, a_right, b, c })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Applies the state transformation `x -> Q^{-1} x`.
    pub fn transformed(&self, q: &DMatrix<f64>) -> Result<Self> {
        let qi = q
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::invalid("similarity matrix is singular"))?;
        Ok(Self {
            a: &qi * &self.a * q,
            a_left: &qi * &self.a_left * q,
            a_right: &qi * &self.a_right * q,
            b: &qi * &self.b,
            c: &self.c * q,
        })
    }

    /// Dense block-tridiagonal chain matrix for `count` subsystems.
    pub fn chain_matrix(&self, count: usize) -> DMatrix<f64> {
        let n = self.n();
        let mut g = DMatrix::zeros(count * n, count * n);
        for i in 0..count {
            g.view_mut((i * n, i * n), (n, n)).copy_from(&self.a);
            if i > 0 {
                g.view_mut((i * n, (i - 1) * n), (n, n)).copy_from(&self.a_left);
            }
            if i + 1 < count {
                g.view_mut((i * n, (i + 1) * n), (n, n)).copy_from(&self.a_right);
            }
        }
        g
    }
}

/// A generated chain of `N` identical subsystems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(flatten)]
    pub subsystem: SubsystemMatrices,
    #[serde(rename = "N")]
    pub num_subsystems: usize,
    pub seed: u64,
    pub stability_margin: f64,
}

impl NetworkSpec {
    /// Spectral radius of the global state matrix, formed densely on demand.
    pub fn global_spectral_radius(&self) -> f64 {
        spectral_radius(&self.subsystem.chain_matrix(self.num_subsystems))
    }
}

/// Cluster radius used for the generation-time minimality check.
pub fn default_check_radius(num_subsystems: usize) -> usize {
    5.min((num_subsystems - 1) / 2)
}

const GENERATION_RETRIES: usize = 100;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn controllability(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = b.shape();
    let mut out = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    out
}

/// Which generation invariant a candidate violates, if any.
fn violated_invariant(sub: &SubsystemMatrices, check_radius: usize) -> Option<&'static str> {
    let n = sub.n();
    let stack = |x: &DMatrix<f64>| {
        let mut m = DMatrix::zeros(n, n + sub.m());
        m.view_mut((0, 0), (n, n)).copy_from(x);
        m.view_mut((0, n), (n, sub.m())).copy_from(&sub.b);
        m
    };
    if numerical_rank(&stack(&sub.a_left)) < n {
        return Some("row rank of [A_l B]");
    }
    if numerical_rank(&stack(&sub.a_right)) < n {
        return Some("row rank of [A_r B]");
    }
    if numerical_rank(&controllability(&sub.a, &sub.b)) < n {
        return Some("controllability of (A, B)");
    }
    if numerical_rank(&controllability(&sub.a.transpose(), &sub.c.transpose())) < n {
        return Some("observability of (A, C)");
    }
    let lifted = lift_cluster(sub, check_radius);
    let order = lifted.a.nrows();
    if numerical_rank(&controllability(&lifted.a, &lifted.b)) < order {
        return Some("controllability of the lifted cluster");
    }
    if numerical_rank(&controllability(&lifted.a.transpose(), &lifted.c.transpose())) < order {
        return Some("observability of the lifted cluster");
    }
    None
}

/// Draws a stable chain with Gaussian entries, rescaled so the global
/// spectral radius equals `stability_margin`.
pub fn random_network(
    n: usize,
    m: usize,
    p: usize,
    num_subsystems: usize,
    seed: u64,
    stability_margin: f64,
) -> Result<NetworkSpec> {
    if n == 0 || m == 0 || p == 0 {
        return Err(Error::invalid("n, m, p must be positive"));
    }
    if num_subsystems < 3 {
        return Err(Error::invalid("a chain needs N >= 3"));
    }
    if !(stability_margin > 0.0 && stability_margin < 1.0) {
        return Err(Error::invalid("stability margin must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let check_radius = default_check_radius(num_subsystems);
    let mut last = "none";
    for _ in 0..GENERATION_RETRIES {
        let a = gaussian(&mut rng, n, n);
        let a_left = gaussian(&mut rng, n, n);
        let a_right = gaussian(&mut rng, n, n);
        let b = gaussian(&mut rng, n, m);
        let c = gaussian(&mut rng, p, n);
        let mut sub = SubsystemMatrices::new(a, a_left, a_right, b, c)?;
        let rho = spectral_radius(&sub.chain_matrix(num_subsystems));
        if !(rho > 1e-12) || !rho.is_finite() {
            last = "nonzero global spectral radius";
            continue;
        }
        let scale = stability_margin / rho;
        sub.a *= scale;
        sub.a_left *= scale;
        sub.a_right *= scale;
        match violated_invariant(&sub, check_radius) {
            None => {
                return Ok(NetworkSpec { subsystem: sub, num_subsystems, seed, stability_margin });
            }
            Some(what) => last = what,
        }
    }
    Err(Error::numerical(
        Stage::Generation,
        format!("no admissible system after {GENERATION_RETRIES} draws; last failing invariant: {last}"),
    ))
}

/// Simulated chain data; one row per time step.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `L x Nm` stacked inputs.
    pub u: DMatrix<f64>,
    /// `L x Np` noise-free outputs.
    pub y_clean: DMatrix<f64>,
    /// `L x Np` measured outputs, `y_clean + e`.
    pub y: DMatrix<f64>,
    pub e: DMatrix<f64>,
    /// `L x Nn` state sequence, kept for oracle checks.
    pub states: DMatrix<f64>,
    pub num_subsystems: usize,
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.nrows() == 0
    }

    /// Replaces the measurement noise with a fresh draw at `snr_db`.
    pub fn with_noise(mut self, snr_db: f64, seed: u64) -> Result<Self> {
        let (y, e) = add_noise_at_snr(&self.y_clean, self.p, snr_db, seed)?;
        self.y = y;
        self.e = e;
        Ok(self)
    }

    /// CSV with columns `k, subsystem, channel, u, y_clean, y`; a field is
    /// empty where the channel index exceeds that signal's width.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "subsystem", "channel", "u", "y_clean", "y"])?;
        let width = self.m.max(self.p);
        for k in 0..self.len() {
            for i in 0..self.num_subsystems {
                for ch in 0..width {
                    let u = if ch < self.m { self.u[(k, i * self.m + ch)].to_string() } else { String::new() };
                    let (yc, y) = if ch < self.p {
                        let col = i * self.p + ch;
                        (self.y_clean[(k, col)].to_string(), self.y[(k, col)].to_string())
                    } else {
                        (String::new(), String::new())
                    };
                    wr.write_record([k.to_string(), (i + 1).to_string(), ch.to_string(), u, yc, y])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Noise-free simulation exploiting the block-tridiagonal coupling;
/// `x(0) = x0`, `y(k) = C x(k)`.
pub fn simulate(spec: &NetworkSpec, u: &DMatrix<f64>, x0: &DVector<f64>) -> Result<Trajectory> {
    let sub = &spec.subsystem;
    let (n, m, p, count) = (sub.n(), sub.m(), sub.p(), spec.num_subsystems);
    if u.ncols() != count * m {
        return Err(Error::dim(format!("input has {} columns, expected {}", u.ncols(), count * m)));
    }
    if x0.len() != count * n {
        return Err(Error::dim(format!("x0 has length {}, expected {}", x0.len(), count * n)));
    }
    let len = u.nrows();
    let mut states = DMatrix::zeros(len, count * n);
    let mut y_clean = DMatrix::zeros(len, count * p);
    let mut x = x0.clone();
    let mut next = DVector::zeros(count * n);
    for k in 0..len {
        for i in 0..count {
            let xi = x.rows(i * n, n);
            states.view_mut((k, i * n), (1, n)).copy_from(&xi.transpose());
            let yi = &sub.c * xi;
            y_clean.view_mut((k, i * p), (1, p)).copy_from(&yi.transpose());
        }
        for i in 0..count {
            let ui = u.view((k, i * m), (1, m)).transpose();
            let mut xn = &sub.a * x.rows(i * n, n) + &sub.b * ui;
            if i > 0 {
                xn += &sub.a_left * x.rows((i - 1) * n, n);
            }
            if i + 1 < count {
                xn += &sub.a_right * x.rows((i + 1) * n, n);
            }
            next.rows_mut(i * n, n).copy_from(&xn);
        }
        std::mem::swap(&mut x, &mut next);
    }
    Ok(Trajectory {
        u: u.clone(),
        y: y_clean.clone(),
        e: DMatrix::zeros(len, count * p),
        y_clean,
        states,
        num_subsystems: count,
        n,
        m,
        p,
    })
}

fn population_variance<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let (sum, count) = values.clone().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    let mean = sum / count as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64
}

/// White Gaussian noise scaled per subsystem so that
/// `10 log10(var(y_clean_i) / var(e_i)) = snr_db` holds exactly, with the
/// variance pooled over the subsystem's channels and time.
pub fn add_noise_at_snr(
    y_clean: &DMatrix<f64>,
    p: usize,
    snr_db: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if p == 0 || y_clean.ncols() % p != 0 {
        return Err(Error::dim("output width is not a multiple of p"));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("SNR must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = DMatrix::from_fn(y_clean.nrows(), y_clean.ncols(), |_, _| StandardNormal.sample(&mut rng));
    for i in 0..y_clean.ncols() / p {
        let vy = population_variance(y_clean.columns(i * p, p).iter());
        if !(vy > 0.0) {
            return Err(Error::numerical(
                Stage::Noise,
                format!("subsystem {} has zero output variance; SNR undefined", i + 1),
            ));
        }
        let ve = population_variance(e.columns(i * p, p).iter());
        let scale = (vy * 10f64.powf(-snr_db / 10.0) / ve).sqrt();
        e.columns_mut(i * p, p).iter_mut().for_each(|v| *v *= scale);
    }
    Ok((y_clean + &e, e))
}

/// Empirical per-subsystem SNR in dB.
pub fn empirical_snr_db(y_clean: &DMatrix<f64>, e: &DMatrix<f64>, p: usize) -> Vec<f64> {
    (0..y_clean.ncols() / p)
        .map(|i| {
            let vy = population_variance(y_clean.columns(i * p, p).iter());
            let ve = population_variance(e.columns(i * p, p).iter());
            10.0 * (vy / ve).log10()
        })
        .collect()
}

/// Local input/output data of subsystems `center - radius ..= center + radius`.
#[derive(Debug, Clone)]
pub struct ClusterData {
    /// 1-based index of the cluster's central subsystem.
    pub center: usize,
    pub radius: usize,
    /// `L x (2R+1)m`.
    pub u: DMatrix<f64>,
    /// `L x (2R+1)p`.
    pub y: DMatrix<f64>,
    /// `L x 2n` states of the two outside neighbours (zero where a neighbour
    /// does not exist); only available when simulated states are known.
    pub boundary_states: Option<DMatrix<f64>>,
}

impl ClusterData {
    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.nrows() == 0
    }
}

pub fn extract_cluster(traj: &Trajectory, center: usize, radius: usize) -> Result<ClusterData> {
    if center <= radius || center + radius > traj.num_subsystems {
        return Err(Error::invalid(format!(
            "cluster {center} +/- {radius} is outside 1..={}",
            traj.num_subsystems
        )));
    }
    let first = center - radius - 1;
    let width = 2 * radius + 1;
    let (n, len) = (traj.n, traj.len());
    let mut boundary = DMatrix::zeros(len, 2 * n);
    if first > 0 {
        boundary.columns_mut(0, n).copy_from(&traj.states.columns((first - 1) * n, n));
    }
    if first + width < traj.num_subsystems {
        boundary.columns_mut(n, n).copy_from(&traj.states.columns((first + width) * n, n));
    }
    Ok(ClusterData {
        center,
        radius,
        u: traj.u.columns(first * traj.m, width * traj.m).into_owned(),
        y: traj.y.columns(first * traj.p, width * traj.p).into_owned(),
        boundary_states: Some(boundary),
    })
}

/// State-space model of a `2R+1` cluster driven by local inputs and the two
/// outside neighbour states: `x(k+1) = A_R x + B_R u + D_R v`, `y = C_R x`.
#[derive(Debug, Clone)]
pub struct LiftedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub radius: usize,
}

pub fn lift_cluster(sub: &SubsystemMatrices, radius: usize) -> LiftedModel {
    let width = 2 * radius + 1;
    let n = sub.n();
    let mut d = DMatrix::zeros(width * n, 2 * n);
    d.view_mut((0, 0), (n, n)).copy_from(&sub.a_left);
    d.view_mut(((width - 1) * n, n), (n, n)).copy_from(&sub.a_right);
    LiftedModel {
        a: sub.chain_matrix(width),
        b: crate::linalg::kron_identity(width, &sub.b),
        c: crate::linalg::kron_identity(width, &sub.c),
        d,
        radius,
    }
}

impl LiftedModel {
    /// Output sequence from zero initial state under inputs `u` (`L x (2R+1)m`)
    /// and neighbour states `v` (`L x 2n`).
    pub fn simulate(&self, u: &DMatrix<f64>, v: &DMatrix<f64>, x0: &DVector<f64>) -> DMatrix<f64> {
        let len = u.nrows();
        let mut y = DMatrix::zeros(len, self.c.nrows());
        let mut x = x0.clone();
        for k in 0..len {
            y.row_mut(k).copy_from(&(&self.c * &x).transpose());
            x = &self.a * &x + &self.b * u.row(k).transpose() + &self.d * v.row(k).transpose();
        }
        y
    }
}
