//! Checklist rewards and multi-granularity group-relative advantage
//! estimation for multi-turn, multi-step tool-use agents.
//!
//! The crate is organized along the data flow of one training step:
//!
//! - [`trajectory`]: dialogue structure and its interchange format
//! - [`checklist`]: per-turn binary criteria with weights and dependencies
//! - [`judge`]: satisfaction labels for trajectory prefixes
//! - [`toolsim`]: replay-first tool execution with a fallback simulator
//! - [`reward`]: flip, backfilled, turn and trajectory rewards
//! - [`advantage`]: trajectory-, turn- and step-level group advantages
//! - [`rollout`]: the policy/environment loop with the strictness gate
//! - [`toyrl`]: a tabular softmax agent and trainer on synthetic tasks
//! - [`datapipe`]: rule-based corpus filtering, statistics and splits

pub mod advantage;
pub mod checklist;
pub mod datapipe;
pub mod endpoint;
pub mod fixtures;
pub mod judge;
pub mod reward;
pub mod rollout;
pub mod toolsim;
pub mod toyrl;
pub mod trajectory;
