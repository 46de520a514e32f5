//! Marked genealogies of exchangeable (Ξ / Λ) coalescents with neutral
//! mutations.
//!
//! The crate covers the deterministic side (ψ, the speed function `v^n`,
//! the length functionals `ℓ(n)` and `ℓ_t(n)`), an exact event-driven
//! simulator of the `n`-genealogy with open/closed lineages, the family
//! statistics of the infinite-sites and infinite-alleles models, the exact
//! Ewens sampling formula, and a deterministic Monte Carlo harness.

pub mod cli;
pub mod error;
pub mod ewens;
pub mod experiments;
pub mod measures;
pub mod quadrature;
pub mod simulator;
pub mod statistics;
pub mod speed;
mod unionfind;

pub use error::{Error, Result};
pub use measures::{
    merger_rates, validate_measure, CoalescentMeasure, MeasureDescription, PsiEvaluator,
    PsiVariant,
};
