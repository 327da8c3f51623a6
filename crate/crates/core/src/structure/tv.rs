//! Time-varying observability and controllability matrices of the chain and
//! their band-sequence factorization.
//!
//! Observability layer `a` of width `j` has `j - 2a` block rows; row `r`
//! carries `W_{a,l}` at block column `r + a + l`. Controllability layer `b` has
//! `j - 2b` block columns; column `c` carries `E_{b,l}` at block row `c + b - l`.

use nalgebra::DMatrix;

use super::markov::{input_sequences, output_sequences};
use crate::error::{Error, Result};
use crate::linalg::kron_identity;
use crate::network::SubsystemMatrices;

/// `j x (j+2)` block matrix with `[A_l A A_r]` starting at column `r` of row `r`.
pub fn build_shift(j: usize, sub: &SubsystemMatrices) -> DMatrix<f64> {
    let n = sub.n();
    let mut g = DMatrix::zeros(j * n, (j + 2) * n);
    for r in 0..j {
        g.view_mut((r * n, r * n), (n, n)).copy_from(&sub.a_left);
        g.view_mut((r * n, (r + 1) * n), (n, n)).copy_from(&sub.a);
        g.view_mut((r * n, (r + 2) * n), (n, n)).copy_from(&sub.a_right);
    }
    g
}

/// `(j+2) x j` block matrix with `[A_r; A; A_l]` starting at row `c` of column `c`.
pub fn build_shift_dual(j: usize, sub: &SubsystemMatrices) -> DMatrix<f64> {
    let n = sub.n();
    let mut g = DMatrix::zeros((j + 2) * n, j * n);
    for c in 0..j {
        g.view_mut((c * n, c * n), (n, n)).copy_from(&sub.a_right);
        g.view_mut(((c + 1) * n, c * n), (n, n)).copy_from(&sub.a);
        g.view_mut(((c + 2) * n, c * n), (n, n)).copy_from(&sub.a_left);
    }
    g
}

fn check_layers(width: usize, layers: usize) -> Result<()> {
    if layers == 0 || width + 1 < 2 * layers {
        return Err(Error::invalid(format!("width {width} cannot hold {layers} layers")));
    }
    Ok(())
}

/// Number of block rows in observability layers `0..layers` of width `width`.
pub fn layer_rows(width: usize, layers: usize) -> usize {
    (0..layers).map(|a| width - 2 * a).sum()
}

/// Observability matrix with `layers` layers, built from products of shift matrices.
pub fn tv_observability(width: usize, layers: usize, sub: &SubsystemMatrices) -> Result<DMatrix<f64>> {
    check_layers(width, layers)?;
    let (n, p) = (sub.n(), sub.p());
    let mut out = DMatrix::zeros(layer_rows(width, layers) * p, width * n);
    let mut row = 0;
    for a in 0..layers {
        let rows = width - 2 * a;
        let mut layer = kron_identity(rows, &sub.c);
        for i in (0..a).rev() {
            layer = layer * build_shift(width - 2 * (i + 1), sub);
        }
        out.view_mut((row * p, 0), (rows * p, width * n)).copy_from(&layer);
        row += rows;
    }
    Ok(out)
}

/// Controllability matrix with `layers` layers, built from products of dual shift matrices.
pub fn tv_controllability(width: usize, layers: usize, sub: &SubsystemMatrices) -> Result<DMatrix<f64>> {
    check_layers(width, layers)?;
    let (n, m) = (sub.n(), sub.m());
    let mut out = DMatrix::zeros(width * n, layer_rows(width, layers) * m);
    let mut col = 0;
    for b in 0..layers {
        let cols = width - 2 * b;
        let mut layer = kron_identity(cols, &sub.b);
        for i in 0..b {
            layer = build_shift_dual(width - 2 * (b - i), sub) * layer;
        }
        out.view_mut((0, col * m), (width * n, cols * m)).copy_from(&layer);
        col += cols;
    }
    Ok(out)
}

/// Stacking order of band-sequence blocks: `(0,0), (1,-1), (1,0), (1,1), (2,-2), ...`.
pub fn sequence_index(layers: usize) -> Vec<(usize, isize)> {
    (0..layers).flat_map(|a| (-(a as isize)..=a as isize).map(move |l| (a, l))).collect()
}

#[inline]
pub fn sequence_position(a: usize, l: isize) -> usize {
    ((a * a + a) as isize + l) as usize
}

/// Band sequences `W_{a,l}` and `E_{a,l}` for `a < layers`, with their
/// stacked forms `W` (tall) and `E` (wide).
#[derive(Debug, Clone)]
pub struct BandSequences {
    pub layers: usize,
    /// `[a][l + a]`, each `p x n`.
    pub w: Vec<Vec<DMatrix<f64>>>,
    /// `[a][l + a]`, each `n x m`.
    pub e: Vec<Vec<DMatrix<f64>>>,
}

impl BandSequences {
    pub fn of(sub: &SubsystemMatrices, s: usize) -> Result<Self> {
        if s < 2 || s % 2 != 0 {
            return Err(Error::invalid("s must be even and at least 2"));
        }
        let layers = s / 2;
        Ok(Self { layers, w: output_sequences(sub, layers - 1), e: input_sequences(sub, layers - 1) })
    }

    pub fn stacked_w(&self) -> DMatrix<f64> {
        stack_rows(self.w.iter().flatten())
    }

    pub fn stacked_e(&self) -> DMatrix<f64> {
        stack_cols(self.e.iter().flatten())
    }
}

fn stack_rows<'a>(blocks: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> DMatrix<f64> {
    let list: Vec<&DMatrix<f64>> = blocks.collect();
    let (h, w) = list[0].shape();
    let mut out = DMatrix::zeros(list.len() * h, w);
    for (i, b) in list.iter().enumerate() {
        out.view_mut((i * h, 0), (h, w)).copy_from(b);
    }
    out
}

fn stack_cols<'a>(blocks: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> DMatrix<f64> {
    let list: Vec<&DMatrix<f64>> = blocks.collect();
    let (h, w) = list[0].shape();
    let mut out = DMatrix::zeros(h, list.len() * w);
    for (i, b) in list.iter().enumerate() {
        out.view_mut((0, i * w), (h, w)).copy_from(b);
    }
    out
}

/// Places stacked `W` blocks (`layers^2` blocks of `p x n`, in
/// [`sequence_index`] order) into an observability matrix of width `width`,
/// using layers `first..first + count`.
pub fn place_observability(
    stacked_w: &DMatrix<f64>,
    p: usize,
    width: usize,
    first: usize,
    count: usize,
) -> DMatrix<f64> {
    let n = stacked_w.ncols();
    let rows: usize = (first..first + count).map(|a| width - 2 * a).sum();
    let mut out = DMatrix::zeros(rows * p, width * n);
    let mut row = 0;
    for a in first..first + count {
        for r in 0..width - 2 * a {
            for l in -(a as isize)..=a as isize {
                let col = (r + a) as isize + l;
                let src = stacked_w.view((sequence_position(a, l) * p, 0), (p, n));
                out.view_mut((row * p, col as usize * n), (p, n)).copy_from(&src);
            }
            row += 1;
        }
    }
    out
}

/// Places stacked `E` blocks into a controllability matrix of width `width`
/// with layers `0..count`.
pub fn place_controllability(stacked_e: &DMatrix<f64>, m: usize, width: usize, count: usize) -> DMatrix<f64> {
    let n = stacked_e.nrows();
    let mut out = DMatrix::zeros(width * n, layer_rows(width, count) * m);
    let mut col = 0;
    for b in 0..count {
        for c in 0..width - 2 * b {
            for l in -(b as isize)..=b as isize {
                let row = (c + b) as isize - l;
                let src = stacked_e.view((0, sequence_position(b, l) * m), (n, m));
                out.view_mut((row as usize * n, col * m), (n, m)).copy_from(&src);
            }
            col += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::random_network;

    fn sub(seed: u64) -> SubsystemMatrices {
        random_network(3, 2, 2, 20, seed, 0.9).unwrap().subsystem
    }

    #[test]
    fn shift_matrices_of_width_one() {
        let s = sub(1);
        let g = build_shift(1, &s);
        assert_eq!(g.columns(0, 3), s.a_left);
        assert_eq!(g.columns(3, 3), s.a);
        assert_eq!(g.columns(6, 3), s.a_right);
        let d = build_shift_dual(1, &s);
        assert_eq!(d.rows(0, 3), s.a_right);
        assert_eq!(d.rows(3, 3), s.a);
        assert_eq!(d.rows(6, 3), s.a_left);
    }

    #[test]
    fn single_layer_is_block_diagonal() {
        let s = sub(2);
        assert_eq!(tv_observability(4, 1, &s).unwrap(), kron_identity(4, &s.c));
        assert_eq!(tv_controllability(4, 1, &s).unwrap(), kron_identity(4, &s.b));
        assert!(tv_observability(3, 3, &s).is_err());
    }

    #[test]
    fn placement_reproduces_products() {
        let s = sub(3);
        for (width, layers) in [(3, 2), (5, 3), (11, 4), (7, 2)] {
            let seqs = BandSequences::of(&s, 2 * layers).unwrap();
            let o = place_observability(&seqs.stacked_w(), 2, width, 0, layers);
            let c = place_controllability(&seqs.stacked_e(), 2, width, layers);
            assert!((o - tv_observability(width, layers, &s).unwrap()).amax() < 1e-12);
            assert!((c - tv_controllability(width, layers, &s).unwrap()).amax() < 1e-12);
        }
    }

    #[test]
    fn band_of_observability_layer_grows_by_one() {
        let s = sub(4);
        let o = tv_observability(5, 3, &s).unwrap();
        // Layer 2 occupies the last block row and reaches every column.
        let last = o.rows(o.nrows() - 2, 2);
        assert!((0..5).all(|q| last.columns(3 * q, 3).amax() > 0.0));
        // Layer 1, row 0 covers columns 0..=2 only.
        let row = o.rows(5 * 2, 2);
        assert!(row.columns(9, 6).amax() == 0.0 && row.columns(0, 9).amax() > 0.0);
    }

    #[test]
    fn stacked_sequences_have_rank_n() {
        for seed in 0..5 {
            let seqs = BandSequences::of(&sub(seed), 4).unwrap();
            assert_eq!(crate::linalg::numerical_rank(&seqs.stacked_w()), 3);
            assert_eq!(crate::linalg::numerical_rank(&seqs.stacked_e()), 3);
        }
    }

    #[test]
    fn shift_identity_holds() {
        for seed in 0..5 {
            let s = sub(seed);
            for (radius, layers) in [(2, 3), (5, 4), (3, 3)] {
                let seqs = BandSequences::of(&s, 2 * layers).unwrap();
                let w = seqs.stacked_w();
                let lower = place_observability(&w, 2, 2 * radius - 1, 0, layers - 1);
                let upper = place_observability(&w, 2, 2 * radius + 1, 1, layers - 1);
                let shifted = lower * build_shift(2 * radius - 1, &s);
                assert!((shifted - upper).amax() < 1e-12);
            }
        }
    }
}
