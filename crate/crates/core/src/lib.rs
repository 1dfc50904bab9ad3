//! Loop-nest autotuning for CPU tensor contractions.
//!
//! A contraction ([`ContractionSpec`]) is lowered to an untiled loop nest
//! ([`LoopIR`]). A cursor-driven action space ([`Action`]) reorders and tiles
//! loops while preserving semantics. Schedules are scored by an [`Evaluator`]
//! (wall-clock or analytic) and improved either by classic searches
//! ([`search`]) or by a Q-learning policy ([`dqn`]) acting in an episodic
//! environment ([`env`]).

pub mod dataset;
pub mod dqn;
pub mod dsl;
pub mod env;
pub mod eval;
pub mod features;
pub mod ir;
pub mod report;
pub mod search;
pub mod transform;

pub use dsl::{parse_spec, ParseError};
pub use eval::{BackendConfig, BackendKind, CostModel, EvalError, EvalResult, Evaluator, TimedBackend};
pub use features::{encode, Observation};
pub use ir::{lower, ContractionSpec, LoopIR, PostOp, MAX_LOOPS};
pub use search::{search, EvalCache, SearchConfig, SearchResult};
pub use transform::{apply, legal_actions, Action, ActionSet};
