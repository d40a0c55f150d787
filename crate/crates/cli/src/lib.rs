//! Orchestration behind the `hicox` binary: CSV ingestion, fit
//! configuration, report emission and the simulation benchmark.

pub mod config;
pub mod io;
pub mod report;
pub mod run;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VALIDATION: i32 = 2;
    pub const CONVERGENCE: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

/// Maps an error chain to an exit code. Errors that do not originate in the
/// library (IO, CSV, JSON, argument problems) count as validation errors.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hicox::Error>() {
            return match e {
                hicox::Error::SolverStall { .. } => exit::CONVERGENCE,
                hicox::Error::Numerical(_) => exit::NUMERICAL,
                _ => exit::VALIDATION,
            };
        }
    }
    exit::VALIDATION
}
