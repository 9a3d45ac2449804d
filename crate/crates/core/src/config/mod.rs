//! Experiment configuration: composition, instantiation, and the run,
//! search and population-based-training entry points.

pub mod compose;
pub mod instantiate;
pub mod node;
pub mod pbt;
pub mod runner;
pub mod search;

pub use compose::{compose, RunConfig};
pub use instantiate::{DataModule, Experiment, ModelSpec, Registry};
pub use node::Node;
pub use pbt::{run_pbt, PbtConfig, PopulationState};
pub use runner::{evaluate_run, run_config, run_multi, run_single, EvalReport, RunOutcome};
pub use search::{Sampler, SearchSpace};
