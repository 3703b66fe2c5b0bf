//! Reference external trainer: serves the baseline learner over the JSON-lines protocol.
//!
//! Paused state goes to `SMALLDATA_TRAINER_STATE` (default: the temp directory).

use std::io::{stdin, stdout};
use std::process::ExitCode;

use smalldata_core::learner::external::{reference_state_dir, serve_reference};

fn main() -> ExitCode {
    match serve_reference(stdin().lock(), stdout().lock(), &reference_state_dir()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("smalldata-fake-trainer: {e}");
            ExitCode::from(1)
        }
    }
}
