use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matrix_power;
use crate::network::{LiftedModel, SubsystemMatrices};
use crate::serde_mat;

/// Identifiable blocks `F_{j,k}`, `j = 0..=s-2`, `k = -j..=j`.
///
/// `F_{j,k}` is the coefficient of `z^k` in `C (A_l z^{-1} + A + A_r z)^j B`,
/// so `F_{1,-1} = C A_l B` and `F_{1,1} = C A_r B`. It is also block `(l, l + k)`
/// of the `j`-th cluster moment away from the chain boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovBand {
    pub s: usize,
    pub p: usize,
    pub m: usize,
    blocks: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BandEntry {
    j: usize,
    k: isize,
    #[serde(with = "serde_mat")]
    block: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct BandRepr {
    s: usize,
    p: usize,
    m: usize,
    entries: Vec<BandEntry>,
}

impl Serialize for MarkovBand {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let entries = self.iter().map(|(j, k, b)| BandEntry { j, k, block: b.clone() }).collect();
        BandRepr { s: self.s, p: self.p, m: self.m, entries }.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for MarkovBand {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = BandRepr::deserialize(de)?;
        if repr.s < 2 {
            return Err(D::Error::custom("s must be at least 2"));
        }
        let mut band = MarkovBand::zeros(repr.s, repr.p, repr.m);
        let mut filled = vec![false; band.blocks.len()];
        for e in repr.entries {
            if e.j + 2 > repr.s || e.k.unsigned_abs() > e.j || e.block.shape() != (repr.p, repr.m) {
                return Err(D::Error::custom(format!("invalid band entry ({}, {})", e.j, e.k)));
            }
            let idx = MarkovBand::index(e.j, e.k);
            filled[idx] = true;
            band.blocks[idx] = e.block;
        }
        if filled.iter().any(|f| !f) {
            return Err(D::Error::custom("band is missing entries"));
        }
        Ok(band)
    }
}

impl MarkovBand {
    pub fn zeros(s: usize, p: usize, m: usize) -> Self {
        let count = (s - 1) * (s - 1);
        Self { s, p, m, blocks: vec![DMatrix::zeros(p, m); count] }
    }

    #[inline]
    fn index(j: usize, k: isize) -> usize {
        ((j * j + j) as isize + k) as usize
    }

    pub fn num_moments(&self) -> usize {
        self.s - 1
    }

    pub fn get(&self, j: usize, k: isize) -> &DMatrix<f64> {
        assert!(j + 1 < self.s && k.unsigned_abs() <= j, "band index ({j}, {k}) out of range");
        &self.blocks[Self::index(j, k)]
    }

    pub fn set(&mut self, j: usize, k: isize, v: DMatrix<f64>) {
        assert!(j + 1 < self.s && k.unsigned_abs() <= j, "band index ({j}, {k}) out of range");
        assert_eq!(v.shape(), (self.p, self.m));
        self.blocks[Self::index(j, k)] = v;
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `(j, k, F_{j,k})` in order of increasing `j`, then `k`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, isize, &DMatrix<f64>)> {
        (0..self.s - 1).flat_map(move |j| {
            (-(j as isize)..=j as isize).map(move |k| (j, k, &self.blocks[Self::index(j, k)]))
        })
    }

    /// Largest blockwise relative Frobenius error against `truth`.
    pub fn max_relative_error(&self, truth: &MarkovBand) -> f64 {
        self.iter()
            .zip(truth.iter())
            .map(|((_, _, a), (_, _, b))| (a - b).norm() / b.norm().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    /// Mean blockwise relative Frobenius error against `truth`.
    pub fn mean_relative_error(&self, truth: &MarkovBand) -> f64 {
        let total: f64 = self
            .iter()
            .zip(truth.iter())
            .map(|((_, _, a), (_, _, b))| (a - b).norm() / b.norm().max(f64::MIN_POSITIVE))
            .sum();
        total / self.len() as f64
    }

    /// Restriction to the first `s' - 1` moments.
    pub fn truncated(&self, s: usize) -> Result<Self> {
        if s < 2 || s > self.s {
            return Err(Error::invalid("cannot truncate band to a larger s"));
        }
        let mut out = MarkovBand::zeros(s, self.p, self.m);
        out.blocks.clone_from_slice(&self.blocks[..(s - 1) * (s - 1)]);
        Ok(out)
    }
}

/// `C_R A_R^j B_R` by direct multiplication.
pub fn markov_oracle(lifted: &LiftedModel, j: usize) -> DMatrix<f64> {
    &lifted.c * matrix_power(&lifted.a, j) * &lifted.b
}

/// State-side coefficients `E_{j,l}` of `(A_l z^{-1} + A + A_r z)^j B` for
/// `j = 0..=jmax`, stored at `[j][l + j]`.
pub fn input_sequences(sub: &SubsystemMatrices, jmax: usize) -> Vec<Vec<DMatrix<f64>>> {
    let mut out = vec![vec![sub.b.clone()]];
    for j in 0..jmax {
        let prev = &out[j];
        let at = |l: isize| -> Option<&DMatrix<f64>> {
            (l.unsigned_abs() <= j).then(|| &prev[(l + j as isize) as usize])
        };
        let next = (-(j as isize + 1)..=j as isize + 1)
            .map(|l| {
                let mut v = DMatrix::zeros(sub.n(), sub.m());
                if let Some(e) = at(l + 1) {
                    v += &sub.a_left * e;
                }
                if let Some(e) = at(l) {
                    v += &sub.a * e;
                }
                if let Some(e) = at(l - 1) {
                    v += &sub.a_right * e;
                }
                v
            })
            .collect();
        out.push(next);
    }
    out
}

/// Output-side coefficients `W_{j,l}` of `C (A_l z^{-1} + A + A_r z)^j`,
/// stored at `[j][l + j]`.
pub fn output_sequences(sub: &SubsystemMatrices, jmax: usize) -> Vec<Vec<DMatrix<f64>>> {
    let mut out = vec![vec![sub.c.clone()]];
    for j in 0..jmax {
        let prev = &out[j];
        let at = |l: isize| -> Option<&DMatrix<f64>> {
            (l.unsigned_abs() <= j).then(|| &prev[(l + j as isize) as usize])
        };
        let next = (-(j as isize + 1)..=j as isize + 1)
            .map(|l| {
                let mut v = DMatrix::zeros(sub.p(), sub.n());
                if let Some(w) = at(l + 1) {
                    v += w * &sub.a_left;
                }
                if let Some(w) = at(l) {
                    v += w * &sub.a;
                }
                if let Some(w) = at(l - 1) {
                    v += w * &sub.a_right;
                }
                v
            })
            .collect();
        out.push(next);
    }
    out
}

/// True band of a subsystem through the trinomial recursion.
pub fn markov_band_of(sub: &SubsystemMatrices, s: usize) -> MarkovBand {
    let e = input_sequences(sub, s - 2);
    let mut band = MarkovBand::zeros(s, sub.p(), sub.m());
    for (j, ej) in e.iter().enumerate() {
        for (i, blk) in ej.iter().enumerate() {
            band.set(j, i as isize - j as isize, &sub.c * blk);
        }
    }
    band
}
