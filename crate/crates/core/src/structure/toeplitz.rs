//! Two-layer Toeplitz parameterization of the cluster's Toeplitz matrix.
//!
//! Moment `j` of the cluster is the `(2R+1) x (2R+1)` block matrix
//! `M_j = C_R A_R^j B_R`. Its block `(l, q)` (0-based) vanishes when
//! `|l - q| > j`. Inside the band, positions with `j - 1 <= l + q <= 4R + 1 - j`
//! are unaffected by the chain boundary and depend only on the offset
//! `k = q - l`; the remaining in-band positions are independent corner
//! parameters.

use nalgebra::DMatrix;

use super::markov::MarkovBand;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Shared block on diagonal offset `k = q - l` of moment `j`.
    Band { j: usize, k: isize },
    /// Boundary-affected block at `(l, q)` of moment `j`.
    Corner { j: usize, l: usize, q: usize },
}

impl ParamKind {
    pub fn moment(&self) -> usize {
        match *self {
            ParamKind::Band { j, .. } | ParamKind::Corner { j, .. } => j,
        }
    }
}

/// Index map from `(moment, block row, block col)` to parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    pub radius: usize,
    pub s: usize,
    pub p: usize,
    pub m: usize,
    kinds: Vec<ParamKind>,
    ids: Vec<Option<usize>>,
}

impl ParamMap {
    pub fn new(radius: usize, s: usize, p: usize, m: usize) -> Result<Self> {
        if s < 2 {
            return Err(Error::invalid("s must be at least 2"));
        }
        if p == 0 || m == 0 {
            return Err(Error::invalid("p and m must be positive"));
        }
        let w = 2 * radius + 1;
        let mut kinds = Vec::new();
        let mut ids = vec![None; (s - 1) * w * w];
        let mut band_ids = std::collections::HashMap::new();
        for j in 0..s - 1 {
            for l in 0..w {
                for q in 0..w {
                    if l.abs_diff(q) > j {
                        continue;
                    }
                    let sum = l + q;
                    let kind = if sum + 1 >= j && sum + j <= 4 * radius + 1 {
                        ParamKind::Band { j, k: q as isize - l as isize }
                    } else {
                        ParamKind::Corner { j, l, q }
                    };
                    let id = *band_ids.entry(kind).or_insert_with(|| {
                        kinds.push(kind);
                        kinds.len() - 1
                    });
                    ids[(j * w + l) * w + q] = Some(id);
                }
            }
        }
        Ok(Self { radius, s, p, m, kinds, ids })
    }

    pub fn width(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn num_blocks(&self) -> usize {
        self.kinds.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.kinds.len() * self.p * self.m
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    /// Parameter id of block `(l, q)` of moment `j`, or `None` for a structural zero.
    pub fn id(&self, j: usize, l: usize, q: usize) -> Option<usize> {
        let w = self.width();
        self.ids[(j * w + l) * w + q]
    }

    pub fn band_id(&self, j: usize, k: isize) -> Option<usize> {
        self.kinds.iter().position(|&kd| kd == ParamKind::Band { j, k })
    }

    pub fn blocks_in_moment(&self, j: usize) -> usize {
        self.kinds.iter().filter(|k| k.moment() == j).count()
    }

    /// For every scalar parameter `id * p * m + r * m + c`, the `(row, col)`
    /// positions it occupies in the assembled Toeplitz matrix.
    pub fn scalar_positions(&self) -> Vec<Vec<(usize, usize)>> {
        let (p, m, w) = (self.p, self.m, self.width());
        let mut pos = vec![Vec::new(); self.num_scalars()];
        for alpha in 1..self.s {
            for beta in 0..alpha {
                let j = alpha - beta - 1;
                for l in 0..w {
                    for q in 0..w {
                        let Some(id) = self.id(j, l, q) else { continue };
                        for r in 0..p {
                            for c in 0..m {
                                pos[(id * p + r) * m + c]
                                    .push(((alpha * w + l) * p + r, (beta * w + q) * m + c));
                            }
                        }
                    }
                }
            }
        }
        pos
    }

    /// Whether `t` lies in the parameterized set: zero outside the index map
    /// and equal blocks wherever the map repeats an id, to tolerance `tol`.
    pub fn contains(&self, t: &DMatrix<f64>, tol: f64) -> bool {
        let (p, m, w) = (self.p, self.m, self.width());
        if t.shape() != (self.s * w * p, self.s * w * m) {
            return false;
        }
        let mut seen: Vec<Option<DMatrix<f64>>> = vec![None; self.num_blocks()];
        for alpha in 0..self.s {
            for beta in 0..self.s {
                for l in 0..w {
                    for q in 0..w {
                        let blk = t.view(((alpha * w + l) * p, (beta * w + q) * m), (p, m));
                        let id = if alpha > beta { self.id(alpha - beta - 1, l, q) } else { None };
                        match id {
                            None => {
                                if blk.amax() > tol {
                                    return false;
                                }
                            }
                            Some(id) => match &seen[id] {
                                None => seen[id] = Some(blk.into_owned()),
                                Some(prev) => {
                                    if (prev - blk).amax() > tol {
                                        return false;
                                    }
                                }
                            },
                        }
                    }
                }
            }
        }
        true
    }
}

/// Parameter values on a [`ParamMap`]; one `p x m` block per id.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerToeplitz {
    pub map: ParamMap,
    pub blocks: Vec<DMatrix<f64>>,
}

impl TwoLayerToeplitz {
    pub fn zeros(map: ParamMap) -> Self {
        let blocks = vec![DMatrix::zeros(map.p, map.m); map.num_blocks()];
        Self { map, blocks }
    }

    /// Unpacks the scalar vector ordered as in [`ParamMap::scalar_positions`].
    pub fn from_scalars(map: ParamMap, phi: &[f64]) -> Result<Self> {
        if phi.len() != map.num_scalars() {
            return Err(Error::dim("parameter vector length mismatch"));
        }
        let (p, m) = (map.p, map.m);
        let blocks = phi.chunks(p * m).map(|c| DMatrix::from_row_slice(p, m, c)).collect();
        Ok(Self { map, blocks })
    }

    pub fn to_scalars(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.transpose().iter().copied().collect::<Vec<_>>()).collect()
    }

    /// Reads the parameters from the cluster moments `M_0..M_{s-2}`, taking
    /// each id from its first position.
    pub fn from_moments(map: ParamMap, moments: &[DMatrix<f64>]) -> Result<Self> {
        if moments.len() + 1 < map.s {
            return Err(Error::dim("not enough moments for the parameter map"));
        }
        let (p, m, w) = (map.p, map.m, map.width());
        let mut blocks: Vec<Option<DMatrix<f64>>> = vec![None; map.num_blocks()];
        for (j, mj) in moments.iter().enumerate().take(map.s - 1) {
            if mj.shape() != (w * p, w * m) {
                return Err(Error::dim("moment shape mismatch"));
            }
            for l in 0..w {
                for q in 0..w {
                    if let Some(id) = map.id(j, l, q) {
                        blocks[id].get_or_insert_with(|| mj.view((l * p, q * m), (p, m)).into_owned());
                    }
                }
            }
        }
        let blocks = blocks.into_iter().map(|b| b.expect("every id has a position")).collect();
        Ok(Self { map, blocks })
    }

    /// Reads the parameters from an assembled Toeplitz matrix.
    pub fn from_dense(map: ParamMap, t: &DMatrix<f64>) -> Result<Self> {
        let (p, m, w) = (map.p, map.m, map.width());
        if t.shape() != (map.s * w * p, map.s * w * m) {
            return Err(Error::dim("Toeplitz matrix shape mismatch"));
        }
        let moments: Vec<DMatrix<f64>> =
            (0..map.s - 1).map(|j| t.view(((j + 1) * w * p, 0), (w * p, w * m)).into_owned()).collect();
        Self::from_moments(map, &moments)
    }

    /// Moment `j` as a dense `(2R+1)p x (2R+1)m` block matrix.
    pub fn moment(&self, j: usize) -> DMatrix<f64> {
        let (p, m, w) = (self.map.p, self.map.m, self.map.width());
        let mut out = DMatrix::zeros(w * p, w * m);
        for l in 0..w {
            for q in 0..w {
                if let Some(id) = self.map.id(j, l, q) {
                    out.view_mut((l * p, q * m), (p, m)).copy_from(&self.blocks[id]);
                }
            }
        }
        out
    }

    /// Strictly lower block-triangular Toeplitz matrix with moment
    /// `alpha - beta - 1` at block `(alpha, beta)`.
    pub fn assemble(&self) -> DMatrix<f64> {
        let (p, m, w, s) = (self.map.p, self.map.m, self.map.width(), self.map.s);
        let mut t = DMatrix::zeros(s * w * p, s * w * m);
        let moments: Vec<DMatrix<f64>> = (0..s - 1).map(|j| self.moment(j)).collect();
        for alpha in 1..s {
            for beta in 0..alpha {
                t.view_mut((alpha * w * p, beta * w * m), (w * p, w * m)).copy_from(&moments[alpha - beta - 1]);
            }
        }
        t
    }

    /// Boundary-free blocks `F_{j,k}`, which are the band parameters.
    pub fn markov_band(&self) -> Result<MarkovBand> {
        let s = self.map.s;
        let mut band = MarkovBand::zeros(s, self.map.p, self.map.m);
        for j in 0..s - 1 {
            for k in -(j as isize)..=j as isize {
                let id = self.map.band_id(j, k).ok_or_else(|| {
                    Error::invalid(format!(
                        "offset {k} of moment {j} has no boundary-free position; R too small for s"
                    ))
                })?;
                band.set(j, k, self.blocks[id].clone());
            }
        }
        Ok(band)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cluster_has_eleven_parameters() {
        let map = ParamMap::new(2, 4, 1, 1).unwrap();
        assert_eq!(map.num_blocks(), 11);
        assert_eq!(map.blocks_in_moment(0), 1);
        assert_eq!(map.blocks_in_moment(1), 3);
        assert_eq!(map.blocks_in_moment(2), 7);
        assert!(matches!(map.kinds()[map.id(2, 0, 0).unwrap()], ParamKind::Corner { .. }));
        assert!(matches!(map.kinds()[map.id(2, 4, 4).unwrap()], ParamKind::Corner { .. }));
        assert_eq!(map.id(2, 1, 1), map.id(2, 2, 2));
        assert_eq!(map.id(2, 0, 3), None);
        assert_eq!(map.id(1, 0, 2), None);
    }

    #[test]
    fn two_block_rows_give_single_parameter() {
        for r in 1..4 {
            assert_eq!(ParamMap::new(r, 2, 2, 3).unwrap().num_blocks(), 1);
        }
    }

    #[test]
    fn corner_count_grows_quadratically() {
        let map = ParamMap::new(5, 8, 2, 2).unwrap();
        for j in 0..7 {
            assert_eq!(map.blocks_in_moment(j), 2 * j + 1 + j * j.saturating_sub(1));
        }
        assert_eq!(map.num_blocks(), 119);
        assert_eq!(map.num_scalars(), 476);
    }

    #[test]
    fn assembled_matrix_layout() {
        let map = ParamMap::new(1, 2, 1, 1).unwrap();
        let mut t = TwoLayerToeplitz::zeros(map);
        t.blocks[0] = DMatrix::from_element(1, 1, 3.0);
        let d = t.assemble();
        assert_eq!(d.shape(), (6, 6));
        assert_eq!(d.view((0, 0), (3, 6)).amax(), 0.0);
        assert_eq!(d.view((3, 0), (3, 3)), DMatrix::from_diagonal_element(3, 3, 3.0));
        assert_eq!(d.view((3, 3), (3, 3)).amax(), 0.0);
    }

    #[test]
    fn scalar_positions_match_assembly() {
        let map = ParamMap::new(2, 4, 2, 3).unwrap();
        let phi: Vec<f64> = (0..map.num_scalars()).map(|i| 1.0 + i as f64).collect();
        let t = TwoLayerToeplitz::from_scalars(map.clone(), &phi).unwrap();
        let dense = t.assemble();
        let mut rebuilt = DMatrix::zeros(dense.nrows(), dense.ncols());
        for (k, list) in map.scalar_positions().iter().enumerate() {
            for &(r, c) in list {
                rebuilt[(r, c)] = phi[k];
            }
        }
        assert_eq!(rebuilt, dense);
        assert_eq!(t.to_scalars(), phi);
        let back = TwoLayerToeplitz::from_dense(map.clone(), &dense).unwrap();
        assert_eq!(back, t);
        assert!(map.contains(&dense, 0.0));
        let mut broken = dense.clone();
        broken[(dense.nrows() - 1, 0)] += 1.0;
        assert!(!map.contains(&broken, 1e-12));
    }
}
