//! The H-matrix of stacked band moments and the affine map from the rank-`n`
//! product `X = W E` onto it.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use super::markov::MarkovBand;
use super::tv::{layer_rows, sequence_position};
use crate::error::{Error, Result};

fn check_shape(radius: usize, s: usize) -> Result<usize> {
    if s < 2 || s % 2 != 0 {
        return Err(Error::invalid("s must be even and at least 2"));
    }
    let layers = s / 2;
    if 2 * radius + 1 < 2 * layers - 1 {
        return Err(Error::invalid(format!("radius {radius} too small for s = {s}")));
    }
    Ok(layers)
}

/// `(layer, index within layer)` for every block row (or column) of H.
fn layer_slots(width: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers).flat_map(|a| (0..width - 2 * a).map(move |r| (a, r))).collect()
}

/// Block `(a, r; b, c)` equals `F_{a+b, c+b-r-a}` inside the band, zero outside.
pub fn build_h(band: &MarkovBand, radius: usize, s: usize) -> Result<DMatrix<f64>> {
    let layers = check_shape(radius, s)?;
    if band.s < s {
        return Err(Error::invalid(format!("band has moments up to {}, H needs {}", band.s - 2, s - 2)));
    }
    let (p, m, width) = (band.p, band.m, 2 * radius + 1);
    let slots = layer_slots(width, layers);
    let mut h = DMatrix::zeros(slots.len() * p, slots.len() * m);
    for (i, &(a, r)) in slots.iter().enumerate() {
        for (jx, &(b, c)) in slots.iter().enumerate() {
            let k = (c + b) as isize - (r + a) as isize;
            if k.unsigned_abs() <= a + b {
                h.view_mut((i * p, jx * m), (p, m)).copy_from(band.get(a + b, k));
            }
        }
    }
    Ok(h)
}

/// Output blocks sharing one incidence pattern of `X` blocks.
#[derive(Debug, Clone)]
pub struct OperatorGroup {
    /// Observability layer, controllability layer and band offset of the group.
    pub a: usize,
    pub b: usize,
    pub k: isize,
    /// `(row block, col block)` pairs of `X` summed into each output block.
    pub terms: Vec<(usize, usize)>,
    /// `(row block, col block)` positions in H.
    pub outputs: Vec<(usize, usize)>,
}

/// Linear map `X -> H` with 0/1 block coefficients.
#[derive(Debug, Clone)]
pub struct AffineOperator {
    pub radius: usize,
    pub s: usize,
    pub p: usize,
    pub m: usize,
    /// Block rows of `X` (`(s/2)^2`); equals the number of block columns.
    pub x_blocks: usize,
    pub h_row_blocks: usize,
    pub h_col_blocks: usize,
    pub groups: Vec<OperatorGroup>,
}

impl AffineOperator {
    /// Multiplies an observability matrix of symbolic `W_{a,l}` blocks with a
    /// controllability matrix of symbolic `E_{b,l}` blocks and records which
    /// products `W_{a,l} E_{b,l'}` (that is, which blocks of `X`) reach each
    /// output block.
    pub fn build(radius: usize, s: usize, p: usize, m: usize) -> Result<Self> {
        let layers = check_shape(radius, s)?;
        let width = 2 * radius + 1;
        let slots = layer_slots(width, layers);
        let mut by_pattern: BTreeMap<Vec<(usize, usize)>, usize> = BTreeMap::new();
        let mut groups: Vec<OperatorGroup> = Vec::new();
        for (i, &(a, r)) in slots.iter().enumerate() {
            for (jx, &(b, c)) in slots.iter().enumerate() {
                let mut terms = Vec::new();
                for q in 0..width {
                    let l = q as isize - (r + a) as isize;
                    let l2 = (c + b) as isize - q as isize;
                    if l.unsigned_abs() <= a && l2.unsigned_abs() <= b {
                        terms.push((sequence_position(a, l), sequence_position(b, l2)));
                    }
                }
                if terms.is_empty() {
                    continue;
                }
                terms.sort_unstable();
                let k = (c + b) as isize - (r + a) as isize;
                let g = *by_pattern.entry(terms.clone()).or_insert_with(|| {
                    groups.push(OperatorGroup { a, b, k, terms, outputs: Vec::new() });
                    groups.len() - 1
                });
                groups[g].outputs.push((i, jx));
            }
        }
        Ok(Self {
            radius,
            s,
            p,
            m,
            x_blocks: layers * layers,
            h_row_blocks: layer_rows(width, layers),
            h_col_blocks: layer_rows(width, layers),
            groups,
        })
    }

    pub fn x_shape(&self) -> (usize, usize) {
        (self.x_blocks * self.p, self.x_blocks * self.m)
    }

    pub fn h_shape(&self) -> (usize, usize) {
        (self.h_row_blocks * self.p, self.h_col_blocks * self.m)
    }

    /// Group sums `S_g(X)`.
    pub fn apply_groups(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let (p, m) = (self.p, self.m);
        self.groups
            .iter()
            .map(|g| {
                let mut acc = DMatrix::zeros(p, m);
                for &(i, j) in &g.terms {
                    acc += x.view((i * p, j * m), (p, m));
                }
                acc
            })
            .collect()
    }

    /// Expands group values into a dense H.
    pub fn scatter(&self, values: &[DMatrix<f64>]) -> DMatrix<f64> {
        let (p, m) = (self.p, self.m);
        let (hr, hc) = self.h_shape();
        let mut h = DMatrix::zeros(hr, hc);
        for (g, v) in self.groups.iter().zip(values) {
            for &(i, j) in &g.outputs {
                h.view_mut((i * p, j * m), (p, m)).copy_from(v);
            }
        }
        h
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.scatter(&self.apply_groups(x))
    }

    /// Adjoint of [`apply_groups`](Self::apply_groups).
    pub fn adjoint_groups(&self, values: &[DMatrix<f64>]) -> DMatrix<f64> {
        let (p, m) = (self.p, self.m);
        let (xr, xc) = self.x_shape();
        let mut x = DMatrix::zeros(xr, xc);
        for (g, v) in self.groups.iter().zip(values) {
            for &(i, j) in &g.terms {
                let mut blk = x.view_mut((i * p, j * m), (p, m));
                blk += v;
            }
        }
        x
    }

    /// Adjoint of [`apply`](Self::apply).
    pub fn adjoint(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let (p, m) = (self.p, self.m);
        let sums: Vec<DMatrix<f64>> = self
            .groups
            .iter()
            .map(|g| {
                let mut acc = DMatrix::zeros(p, m);
                for &(i, j) in &g.outputs {
                    acc += h.view((i * p, j * m), (p, m));
                }
                acc
            })
            .collect();
        self.adjoint_groups(&sums)
    }

    /// Per-group means of the matching H blocks; for an H assembled from a
    /// band these are the band blocks themselves.
    pub fn group_targets(&self, h: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let (p, m) = (self.p, self.m);
        self.groups
            .iter()
            .map(|g| {
                let mut acc = DMatrix::zeros(p, m);
                for &(i, j) in &g.outputs {
                    acc += h.view((i * p, j * m), (p, m));
                }
                acc / g.outputs.len() as f64
            })
            .collect()
    }

    /// Minimum-norm solution of `apply(X) = H` for consistent H: each group
    /// target is split evenly over the group's terms.
    pub fn min_norm_solution(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let shares: Vec<DMatrix<f64>> = self
            .group_targets(h)
            .into_iter()
            .zip(&self.groups)
            .map(|(t, g)| t / g.terms.len() as f64)
            .collect();
        self.adjoint_groups(&shares)
    }
}

type OperatorKey = (usize, usize, usize, usize);

/// Shared operator for `(radius, s, p, m)`, built on first use.
pub fn affine_operator(radius: usize, s: usize, p: usize, m: usize) -> Result<Arc<AffineOperator>> {
    static CACHE: OnceLock<Mutex<HashMap<OperatorKey, Arc<AffineOperator>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (radius, s, p, m);
    if let Some(op) = cache.lock().expect("operator cache poisoned").get(&key) {
        return Ok(op.clone());
    }
    let op = Arc::new(AffineOperator::build(radius, s, p, m)?);
    cache.lock().expect("operator cache poisoned").entry(key).or_insert(op.clone());
    Ok(op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::random_network;
    use crate::structure::markov::markov_band_of;
    use crate::structure::tv::{tv_controllability, tv_observability, BandSequences};

    #[test]
    fn two_block_rows_give_diagonal_h() {
        let sub = random_network(2, 1, 2, 10, 1, 0.9).unwrap().subsystem;
        let band = markov_band_of(&sub, 2);
        let h = build_h(&band, 3, 2).unwrap();
        assert_eq!(h, crate::linalg::kron_identity(7, &(&sub.c * &sub.b)));
        let op = AffineOperator::build(3, 2, 2, 1).unwrap();
        assert_eq!(op.groups.len(), 1);
        assert_eq!(op.groups[0].terms, vec![(0, 0)]);
        assert_eq!(op.groups[0].outputs.len(), 7);
    }

    #[test]
    fn smallest_two_layer_layout() {
        let sub = random_network(2, 1, 1, 10, 2, 0.9).unwrap().subsystem;
        let band = markov_band_of(&sub, 4);
        let h = build_h(&band, 1, 4).unwrap();
        assert_eq!(h.shape(), (4, 4));
        assert_eq!(h[(3, 3)], band.get(2, 0)[(0, 0)]);
        assert_eq!(h[(3, 0)], band.get(1, -1)[(0, 0)]);
        assert_eq!(h[(3, 1)], band.get(1, 0)[(0, 0)]);
        assert_eq!(h[(3, 2)], band.get(1, 1)[(0, 0)]);
        let op = AffineOperator::build(1, 4, 1, 1).unwrap();
        // Block (layer 1 row 0, layer 0 column 0) sums W_{1,-1} E_{0,0}.
        let g = op.groups.iter().find(|g| g.outputs.contains(&(3, 0))).unwrap();
        assert_eq!(g.terms, vec![(sequence_position(1, -1), 0)]);
        assert_eq!((g.a, g.b, g.k), (1, 0, -1));
    }

    #[test]
    fn h_equals_observability_times_controllability() {
        for seed in 0..4 {
            let sub = random_network(3, 2, 2, 20, seed, 0.9).unwrap().subsystem;
            for (radius, s) in [(1, 4), (3, 4), (2, 4), (5, 8), (5, 6)] {
                let band = markov_band_of(&sub, s);
                let h = build_h(&band, radius, s).unwrap();
                let width = 2 * radius + 1;
                let oc = tv_observability(width, s / 2, &sub).unwrap() * tv_controllability(width, s / 2, &sub).unwrap();
                assert!((&h - oc).amax() < 1e-12);
                let seqs = BandSequences::of(&sub, s).unwrap();
                let x = seqs.stacked_w() * seqs.stacked_e();
                let op = affine_operator(radius, s, 2, 2).unwrap();
                assert!((op.apply(&x) - &h).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_are_keyed_by_layers_and_offset() {
        let op = AffineOperator::build(5, 8, 2, 2).unwrap();
        let mut seen = std::collections::HashSet::new();
        for g in &op.groups {
            assert!(seen.insert((g.a, g.b, g.k)));
            assert!(g.k.unsigned_abs() <= g.a + g.b);
        }
        // Offsets are limited both by the band and by the cluster width.
        let expected: usize =
            (0..4usize).flat_map(|a| (0..4usize).map(move |b| 2 * (a + b).min(10 - a - b) + 1)).sum();
        assert_eq!(op.groups.len(), expected);
    }

    #[test]
    fn adjoint_is_consistent() {
        let op = AffineOperator::build(2, 6, 2, 3).unwrap();
        let (xr, xc) = op.x_shape();
        let (hr, hc) = op.h_shape();
        let x = DMatrix::from_fn(xr, xc, |i, j| ((i * 31 + j * 17) % 13) as f64 - 6.0);
        let h = DMatrix::from_fn(hr, hc, |i, j| ((i * 7 + j * 11) % 5) as f64 - 2.0);
        let lhs = op.apply(&x).dot(&h);
        let rhs = x.dot(&op.adjoint(&h));
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn min_norm_solution_fits_consistent_h() {
        let sub = random_network(3, 2, 2, 20, 9, 0.9).unwrap().subsystem;
        let band = markov_band_of(&sub, 6);
        let h = build_h(&band, 5, 6).unwrap();
        let op = affine_operator(5, 6, 2, 2).unwrap();
        let x0 = op.min_norm_solution(&h);
        assert!((op.apply(&x0) - h).amax() < 1e-12);
    }
}
