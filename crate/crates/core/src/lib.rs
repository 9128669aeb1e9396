//! Optimal numerical-homogenization bases for rough-coefficient elliptic
//! operators, obtained by conditioning the Gaussian solution of `L u = ξ`
//! on finitely many linear measurements.
//!
//! The pipeline is: build a [`mesh::Mesh`] and [`mesh::CoefficientField`],
//! assemble a [`operator::DiscreteOperator`], pick a [`measure::MeasurementSet`],
//! then condition through [`posterior`] or minimize through [`variational`].
//! [`analysis`] certifies accuracy and [`oracle`] checks everything by sampling.

pub mod analysis;
pub mod error;
pub mod linalg;
pub mod measure;
pub mod mesh;
pub mod operator;
pub mod oracle;
pub mod posterior;
pub mod variational;

pub use error::{Error, Result};
