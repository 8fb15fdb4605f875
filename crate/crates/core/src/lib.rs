//! Coverage-guided grey-box fuzzing with field-selective mutation and a
//! call-depth power schedule.
//!
//! The pipeline per candidate: a [`codec::LayoutSpec`] selects the fuzzable
//! fields of a fixed-size input, [`mutator`] edits only those bits, the
//! result is restored over the parent input and run through an
//! [`executor::Executor`]. [`scheduler`] decides how many havoc iterations a
//! seed gets, optionally doubling energy for seeds that reach deep call
//! chains. [`eval`] runs A/B experiments between schedules.

pub mod campaign;
pub mod cli;
pub mod codec;
pub mod coverage;
pub mod eval;
pub mod executor;
pub mod mutator;
pub mod scheduler;
pub mod targets;

pub use campaign::{Campaign, CampaignConfig, CampaignError, CampaignStats, Seed, StopCondition};
pub use codec::{extract, parse_spec, restore, LayoutSpec, MutationView};
pub use executor::{ExecResult, Executor, Harness, ProbeContext, RunStatus};
pub use scheduler::{EnergyConfig, Schedule};
pub use targets::{make_target, TargetKind};
