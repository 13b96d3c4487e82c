//! Independent oracles and the seeded property battery.

mod oracle;
mod suite;

pub use oracle::{naive_biased_causal, naive_causal, naive_farsight, oracle_forward, oracle_greedy, OracleKernel};
pub use suite::{
    relative_error, reports_to_csv, run_property_suite, Mutation, OracleReport, SuiteConfig, DEFAULT_SEED,
    DEFAULT_SIZES, FD_STEP, REPORT_CSV_HEADER, TOL_ALGEBRAIC, TOL_GRADIENT, TOL_LIMIT, TOL_ROPE_SHIFT,
};
