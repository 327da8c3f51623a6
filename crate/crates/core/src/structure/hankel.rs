use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Block Hankel matrix of a vector sequence: block `(a, b)` is the column
/// vector `seq(start + a + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockHankel {
    pub matrix: DMatrix<f64>,
    pub rows_per_block: usize,
    pub cols_per_block: usize,
    pub s: usize,
    pub h: usize,
}

/// Builds the `s x h` block Hankel matrix from `seq`, whose rows are time steps.
pub fn block_hankel(seq: &DMatrix<f64>, s: usize, h: usize, start: usize) -> Result<BlockHankel> {
    if s == 0 || h == 0 {
        return Err(Error::invalid("Hankel dimensions must be positive"));
    }
    let need = start + s + h - 1;
    if seq.nrows() < need {
        return Err(Error::dim(format!("sequence has {} samples, Hankel needs {need}", seq.nrows())));
    }
    let w = seq.ncols();
    let mut matrix = DMatrix::zeros(s * w, h);
    for a in 0..s {
        let src = seq.rows(start + a, h).transpose();
        matrix.view_mut((a * w, 0), (w, h)).copy_from(&src);
    }
    Ok(BlockHankel { matrix, rows_per_block: w, cols_per_block: 1, s, h })
}

impl BlockHankel {
    /// Checks that blocks on each anti-diagonal coincide.
    pub fn is_block_hankel(&self) -> bool {
        let w = self.rows_per_block;
        (1..self.s).all(|a| {
            (0..self.h - 1).all(|b| {
                self.matrix.view((a * w, b), (w, 1)) == self.matrix.view(((a - 1) * w, b + 1), (w, 1))
            })
        })
    }
}
