//! Differential oracle: a scenario script is run against the real stack and
//! against a table-driven reference, and the two must agree step by step on
//! success, on who can read each secret, and on table growth.

pub mod diff;
pub mod ideal;
pub mod script;

pub use diff::{differential_run, run_script, DiffReport, Observation, Status, Verdict};
pub use ideal::{ideal_call, Bottom, IdealState, Party, Reply, Request};
pub use script::{Action, Behavior, RequestKind, Script, ScriptError, Step};
