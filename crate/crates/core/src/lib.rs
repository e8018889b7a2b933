//! Decoupling of multivariate functions.
//!
//! Starting from any evaluable function `f: R^m -> R^n` with an analytic
//! Jacobian, this crate recovers a structured equivalent
//! `f(p) ~ W g(V'p) + c` in which `g` is a short vector of univariate
//! branch functions. The route goes through a third-order tensor of
//! Jacobian evaluations at sampled operating points: factor the tensor,
//! keep the factors whose third component stays smooth along each branch
//! axis, then fit polynomials to the recovered branch samples and
//! re-estimate the constant terms that derivative data cannot see.
//!
//! Two smooth decompositions are provided next to a plain CPD baseline:
//! an implicit variant that requires the sample factor to satisfy several
//! derivative filters at once, and an explicit variant that penalizes
//! left/right derivative disagreement with a tunable weight.

pub mod casestudy;
pub mod cpd;
pub mod error;
pub mod filters;
pub mod fit;
pub mod ftd;
pub mod jacobian;
pub mod jsonfmt;
pub mod lm;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
