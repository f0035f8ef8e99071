//! Query-only model distances for adversarial surrogate selection.
//!
//! The crate computes LIME signatures of classifiers through a query oracle, compares
//! them with Zest distances, picks the closest surrogate from a stored portfolio, crafts
//! PGD adversarial examples on that surrogate and measures how well they transfer.
//!
//! Modules, bottom up:
//!
//! * [`nn`]: dense classifiers with exact input and parameter gradients
//! * [`oracle`]: query-only access (local, HTTP client, HTTP server) with query ledgers
//! * [`lime`]: perturbation plans, per-point ridge fits and signatures
//! * [`zest`]: signature distances, the on-disk signature store, surrogate selection
//! * [`attack`]: PGD, 8-bit quantization and transfer evaluation
//! * [`eval`]: correlation statistics, published-table replay and end-to-end campaigns

pub mod attack;
pub mod codec;
pub mod error;
pub mod eval;
pub mod lime;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod seed;
pub mod zest;

pub use error::{Error, Result};
