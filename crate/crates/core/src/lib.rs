//! Scale-adaptive power flow analysis.
//!
//! The crate bundles a Newton-Raphson AC power flow used as ground truth,
//! local topology slicing for dataset augmentation, a small reverse-mode
//! tensor engine, a reference-free multi-task graph transformer surrogate
//! with physics-guided losses, breadth-first phase angle recovery, and an
//! extreme-error evaluation harness.

pub mod angle;
pub mod cases;
pub mod cli;
pub mod eval;
pub mod grid;
pub mod linalg;
pub mod loss;
pub mod lts;
pub mod pf;
pub mod rmgl;
pub mod tensor;
pub mod train;
