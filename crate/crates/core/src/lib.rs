//! Unbiased one-dollar exchange among `N` agents with a central bank that
//! lends up to a collective debt limit: agent-based simulation, the
//! two-phase mean-field master equation, its equilibrium and the
//! diagnostics used to study convergence.

// Negated comparisons below deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abm;
pub mod compare;
pub mod config;
pub mod equilibrium;
pub mod error;
pub mod experiment;
pub mod io;
pub mod meanfield;
pub mod params;
pub mod pmf;

pub use error::{Error, Result};
pub use params::ModelParams;
pub use pmf::{Lattice, RateVector, WealthPmf};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "EXCHANGE_KINETICS_THREADS";

/// Pool used for replica ensembles and parameter sweeps. Honors
/// [`THREADS_ENV`] when it holds a positive integer.
pub fn thread_pool() -> rayon::ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        builder = builder.num_threads(n);
    }
    builder.build().expect("failed to build worker pool")
}
