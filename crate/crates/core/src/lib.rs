pub mod error;
pub mod estimator;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod oracle;
pub mod realizer;
mod serde_mat;
pub mod structure;
