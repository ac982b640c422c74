//! Polaris: governed workflow orchestration over typed agents.
//!
//! The engine treats back-office automation as typed plan synthesis and
//! validated execution. A planner enumerates structurally diverse,
//! type-checked DAGs of agent invocations; a rubric selector picks one
//! compliant plan and emits an auditable decision; a dependency-aware
//! executor runs it with completion-based readiness, bounded parallelism,
//! dynamic guard edges, and side-effect gating. Extraction runs behind a
//! bounded validator-gated repair loop; policy guardrails and robust
//! anomaly detection route findings through a deterministic playbook.
//! Every run produces a decision object and a replayable execution trace.
//!
//! The [`harness`] module generates the synthetic benchmark suites and the
//! metric tables used for acceptance.

pub mod backends;
pub mod config;
pub mod contracts;
pub mod executor;
pub mod extraction;
pub mod governance;
pub mod harness;
pub mod money;
pub mod pipeline;
pub mod planner;
pub mod selector;
pub mod task;
pub mod trace;

pub use backends::{standard_registry, DecisionKind, DecisionObject};
pub use config::EngineConfig;
pub use pipeline::{run_document, EngineEnv};
