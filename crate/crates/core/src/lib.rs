//! Estimating observation functions of stochastic dynamical systems from
//! unlabeled ensemble data.

pub mod bspline;
pub mod cedr;
pub mod density;
pub mod error;
pub mod experiment;
pub mod expr;
pub mod linalg;
pub mod loss;
pub mod model_selection;
pub mod moments;
pub mod observation;
pub mod optimizer;
pub mod rkhs;
pub mod rng;
pub mod special;
pub mod state_model;

pub use error::{Error, Result};
