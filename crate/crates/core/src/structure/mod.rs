//! Structured-matrix machinery: block Hankel data matrices, the two-layer
//! Toeplitz parameterization, band moments, time-varying observability and
//! controllability matrices, and the H-matrix with its affine operator.

mod hankel;
mod hmatrix;
mod markov;
mod toeplitz;
mod tv;

pub use hankel::{block_hankel, BlockHankel};
pub use hmatrix::{affine_operator, build_h, AffineOperator, OperatorGroup};
pub use markov::{input_sequences, markov_band_of, markov_oracle, output_sequences, MarkovBand};
pub use toeplitz::{ParamKind, ParamMap, TwoLayerToeplitz};
pub use tv::{
    build_shift, build_shift_dual, layer_rows, place_controllability, place_observability, sequence_index,
    sequence_position, tv_controllability, tv_observability, BandSequences,
};
