//! Agent registry with typed I/O contracts.
//!
//! Every agent declares a capability card: typed input/output slots,
//! pre/postconditions drawn from a closed predicate set, policy tags
//! (side effects, segregation-of-duties group) and an eligibility rule
//! over the task record. Plans are type-checked against these contracts
//! before anything executes.
//!
//! Backends are pluggable. The engine ships deterministic rule-based
//! backends (see [`crate::backends`]); anything satisfying
//! [`AgentBackend`] can stand behind a spec.

use crate::config::EngineConfig;
use crate::extraction::SyntheticDocument;
use crate::governance::{AnomalyBaseline, PolicyStore};
use crate::task::{InputFormat, TaskRecord, TaskType};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

/// Slot values exchanged between agents are JSON documents tagged with a
/// semantic type name.
pub type ValueMap = BTreeMap<String, Value>;

// ---------------------------------------------------------------------------
// Semantic types
// ---------------------------------------------------------------------------

/// Well-known semantic type names used by the standard catalog.
pub mod types {
    pub const RAW_DOCUMENT: &str = "RawDocument";
    pub const TASK_RECORD: &str = "TaskRecord";
    pub const PARSED_INVOICE: &str = "ParsedInvoice";
    pub const VALIDATED_INVOICE: &str = "ValidatedInvoice";
    pub const REPAIR_TRACE: &str = "RepairTrace";
    pub const VALIDATOR_REPORT: &str = "ValidatorReport";
    pub const POLICY_LOOKUP: &str = "PolicyLookup";
    pub const VIOLATION_SET: &str = "ViolationSet";
    pub const ANOMALY_SET: &str = "AnomalySet";
    pub const RISK_ASSESSMENT: &str = "RiskAssessment";
    pub const MATCH_REPORT: &str = "MatchReport";
    pub const VERIFICATION_REPORT: &str = "VerificationReport";
    pub const SCHEDULE_RECEIPT: &str = "ScheduleReceipt";
    pub const API_RECEIPT: &str = "ApiReceipt";
    pub const DECISION: &str = "Decision";
    pub const REPORT: &str = "Report";
    pub const CANDIDATE_SET: &str = "CandidateSet";
    pub const SELECTION: &str = "Selection";
}

/// A named type with an optional declared supertype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticType {
    pub name: String,
    pub supertype: Option<String>,
}

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("unknown semantic type {0:?}")]
    Unknown(String),
    #[error("semantic type {0:?} already declared")]
    Duplicate(String),
}

/// The subtype graph. Compatibility is reflexive and follows declared
/// supertype edges transitively; disconnected types never unify.
///
/// Acyclic by construction: a type declares once, and its supertype must
/// already exist, so edges always point at earlier declarations.
#[derive(Debug, Clone, Default)]
pub struct TypeGraph {
    supertypes: BTreeMap<String, Option<String>>,
}

impl TypeGraph {
    pub fn declare(&mut self, name: &str, supertype: Option<&str>) -> Result<(), TypeError> {
        if self.supertypes.contains_key(name) {
            return Err(TypeError::Duplicate(name.to_string()));
        }
        if let Some(sup) = supertype {
            if !self.supertypes.contains_key(sup) {
                return Err(TypeError::Unknown(sup.to_string()));
            }
        }
        self.supertypes
            .insert(name.to_string(), supertype.map(str::to_string));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.supertypes.contains_key(name)
    }

    /// True iff `out_type` equals `in_type` or is a transitive subtype of it.
    pub fn compatible(&self, out_type: &str, in_type: &str) -> Result<bool, TypeError> {
        if !self.supertypes.contains_key(out_type) {
            return Err(TypeError::Unknown(out_type.to_string()));
        }
        if !self.supertypes.contains_key(in_type) {
            return Err(TypeError::Unknown(in_type.to_string()));
        }
        let mut cursor = Some(out_type.to_string());
        while let Some(t) = cursor {
            if t == in_type {
                return Ok(true);
            }
            cursor = self.supertypes.get(&t).cloned().flatten();
        }
        Ok(false)
    }

    /// The standard type graph for the shipped catalog.
    pub fn standard() -> Self {
        let mut g = TypeGraph::default();
        for name in [
            types::RAW_DOCUMENT,
            types::TASK_RECORD,
            types::PARSED_INVOICE,
            types::REPAIR_TRACE,
            types::VALIDATOR_REPORT,
            types::POLICY_LOOKUP,
            types::VIOLATION_SET,
            types::ANOMALY_SET,
            types::RISK_ASSESSMENT,
            types::MATCH_REPORT,
            types::VERIFICATION_REPORT,
            types::SCHEDULE_RECEIPT,
            types::API_RECEIPT,
            types::DECISION,
            types::REPORT,
            types::CANDIDATE_SET,
            types::SELECTION,
        ] {
            g.declare(name, None).expect("fresh graph");
        }
        // A validated invoice is usable anywhere a parsed invoice is.
        g.declare(types::VALIDATED_INVOICE, Some(types::PARSED_INVOICE))
            .expect("fresh graph");
        g
    }
}

// ---------------------------------------------------------------------------
// Agent specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Normalizer,
    Planning,
    Selection,
    Extractor,
    Processor,
    Reconciliation,
}

/// A typed slot on an agent contract. `required` matters only for inputs:
/// optional inputs may stay unbound in a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub type_name: String,
    #[serde(default = "default_true")]
    pub required: bool,
}

fn default_true() -> bool {
    true
}

impl Slot {
    pub fn required(name: &str, type_name: &str) -> Self {
        Slot {
            name: name.into(),
            type_name: type_name.into(),
            required: true,
        }
    }

    pub fn optional(name: &str, type_name: &str) -> Self {
        Slot {
            name: name.into(),
            type_name: type_name.into(),
            required: false,
        }
    }
}

/// Closed set of condition predicates referenced by name in agent specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateName {
    NonEmpty,
    ConfidenceBounded,
    CurrencyValid,
    DateValid,
    ValidatorPass,
}

/// A predicate applied to one named slot of a value map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub predicate: PredicateName,
    pub slot: String,
}

impl Condition {
    pub fn new(predicate: PredicateName, slot: &str) -> Self {
        Condition {
            predicate,
            slot: slot.into(),
        }
    }

    /// Evaluates against a value map. Predicates on absent optional slots
    /// hold vacuously; the slot-set check happens separately.
    pub fn holds(&self, values: &ValueMap) -> bool {
        let Some(v) = values.get(&self.slot) else {
            return true;
        };
        match self.predicate {
            PredicateName::NonEmpty => match v {
                Value::Null => false,
                Value::String(s) => !s.is_empty(),
                Value::Array(a) => !a.is_empty(),
                Value::Object(o) => !o.is_empty(),
                _ => true,
            },
            PredicateName::ConfidenceBounded => confidence_bounded(v),
            PredicateName::CurrencyValid => currency_field_valid(v),
            PredicateName::DateValid => date_fields_valid(v),
            PredicateName::ValidatorPass => {
                v.get("verdict").and_then(Value::as_str) == Some("pass")
            }
        }
    }
}

fn confidence_bounded(v: &Value) -> bool {
    match v.get("confidence") {
        Some(Value::Object(map)) => map
            .values()
            .all(|c| c.as_f64().is_some_and(|x| (0.0..=1.0).contains(&x))),
        _ => true,
    }
}

/// ISO-4217 codes the engine recognizes. Enough for the shipped suites;
/// policy files using other codes extend this at load time is a non-goal.
pub const KNOWN_CURRENCIES: &[&str] = &[
    "USD", "EUR", "GBP", "JPY", "CHF", "CAD", "AUD", "SEK", "NOK", "DKK", "INR", "CNY",
];

pub fn currency_code_valid(code: &str) -> bool {
    KNOWN_CURRENCIES.contains(&code)
}

fn currency_field_valid(v: &Value) -> bool {
    match v.get("currency") {
        Some(Value::String(c)) => currency_code_valid(c),
        Some(Value::Null) | None => true,
        _ => false,
    }
}

fn date_fields_valid(v: &Value) -> bool {
    ["issue_date", "due_date"].iter().all(|k| match v.get(*k) {
        Some(Value::String(s)) => NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok(),
        Some(Value::Null) | None => true,
        _ => false,
    })
}

/// Eligibility rules over the task record, referenced by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EligibilityRule {
    Always,
    /// The task must carry a document payload.
    RequiresFile,
    /// Month-end batches and triggered events only.
    MonthEndOrEvent,
}

impl EligibilityRule {
    pub fn eligible(&self, task: &TaskRecord) -> bool {
        match self {
            EligibilityRule::Always => true,
            EligibilityRule::RequiresFile => matches!(
                task.input_format,
                InputFormat::File | InputFormat::FilePlusInstruction
            ),
            EligibilityRule::MonthEndOrEvent => {
                task.is_month_end() || task.task_type == TaskType::EventTriggered
            }
        }
    }
}

/// Capability card for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    pub category: Category,
    pub inputs: Vec<Slot>,
    pub outputs: Vec<Slot>,
    #[serde(default)]
    pub preconditions: Vec<Condition>,
    #[serde(default)]
    pub postconditions: Vec<Condition>,
    #[serde(default)]
    pub side_effecting: bool,
    #[serde(default)]
    pub sod_group: String,
    pub eligibility: EligibilityRule,
}

impl AgentSpec {
    /// Slot names must be unique within inputs and within outputs, and the
    /// side-effect flag is reserved for the gateable categories.
    pub fn invariants_hold(&self) -> bool {
        let unique = |slots: &[Slot]| {
            let mut names: Vec<&str> = slots.iter().map(|s| s.name.as_str()).collect();
            names.sort_unstable();
            names.windows(2).all(|w| w[0] != w[1])
        };
        let side_effect_ok = !self.side_effecting
            || matches!(
                self.id.as_str(),
                agent_ids::API_ACCESS | agent_ids::APPROVAL | agent_ids::SCHEDULER
            );
        unique(&self.inputs) && unique(&self.outputs) && side_effect_ok
    }

    pub fn output_slot(&self, name: &str) -> Option<&Slot> {
        self.outputs.iter().find(|s| s.name == name)
    }

    pub fn input_slot(&self, name: &str) -> Option<&Slot> {
        self.inputs.iter().find(|s| s.name == name)
    }
}

/// Agent ids of the standard catalog.
pub mod agent_ids {
    pub const INPUT_NORMALIZER: &str = "InputNormalizer";
    pub const COA_PLANNER: &str = "CoAPlanner";
    pub const REASONING_AGENT: &str = "ReasoningAgent";
    pub const DOCUMENT_PARSER: &str = "DocumentParser";
    pub const DATA_VALIDATOR: &str = "DataValidator";
    pub const RECORD_MATCHER: &str = "RecordMatcher";
    pub const POLICY_RETRIEVAL: &str = "PolicyRetrieval";
    pub const ANOMALY_DETECTION: &str = "AnomalyDetection";
    pub const RISK_CONTROL: &str = "RiskControl";
    pub const API_ACCESS: &str = "APIAccess";
    pub const SCHEDULER: &str = "Scheduler";
    pub const APPROVAL: &str = "Approval";
    pub const REPORT_GENERATOR: &str = "ReportGenerator";
    /// Catalog extension: injected at runtime on high anomaly signals.
    pub const EXTRA_VERIFICATION: &str = "ExtraVerification";
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
#[error("backend {agent}: {message}")]
pub struct BackendError {
    pub agent: String,
    pub message: String,
}

impl BackendError {
    pub fn new(agent: &str, message: impl Into<String>) -> Self {
        BackendError {
            agent: agent.to_string(),
            message: message.into(),
        }
    }
}

/// Shared read-only state a backend may consult during a run. Run-local
/// mutation (history, baseline refreshes) happens after execution through
/// the governance ledger, never inside a backend, which keeps concurrent
/// waves deterministic.
pub struct ExecutionContext<'a> {
    pub registry: &'a Registry,
    pub config: &'a EngineConfig,
    pub policy: &'a PolicyStore,
    pub baselines: &'a AnomalyBaseline,
    pub task: &'a TaskRecord,
    /// The document under processing, when the task carries one.
    pub document: Option<&'a SyntheticDocument>,
    pub today: NaiveDate,
}

/// Invocation interface every agent implementation satisfies.
pub trait AgentBackend: Send + Sync {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError>;

    /// Deterministic backends produce identical outputs for identical
    /// inputs; the replay checker relies on this.
    fn deterministic(&self) -> bool {
        true
    }

    /// Non-reentrant backends are serialized by the executor.
    fn reentrant(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("agent id {0:?} already registered")]
    DuplicateAgent(String),
    #[error("agent {agent:?} references unknown type {type_name:?}")]
    UnknownSlotType { agent: String, type_name: String },
    #[error("agent spec {0:?} violates its invariants")]
    BadSpec(String),
}

struct RegisteredAgent {
    spec: AgentSpec,
    backend: Arc<dyn AgentBackend>,
}

/// Immutable after startup: built once, then shared read-only.
pub struct Registry {
    types: TypeGraph,
    agents: BTreeMap<String, RegisteredAgent>,
}

impl Registry {
    pub fn new(types: TypeGraph) -> Self {
        Registry {
            types,
            agents: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        spec: AgentSpec,
        backend: Arc<dyn AgentBackend>,
    ) -> Result<(), RegistryError> {
        if self.agents.contains_key(&spec.id) {
            return Err(RegistryError::DuplicateAgent(spec.id));
        }
        if !spec.invariants_hold() {
            return Err(RegistryError::BadSpec(spec.id));
        }
        for slot in spec.inputs.iter().chain(spec.outputs.iter()) {
            if !self.types.contains(&slot.type_name) {
                return Err(RegistryError::UnknownSlotType {
                    agent: spec.id.clone(),
                    type_name: slot.type_name.clone(),
                });
            }
        }
        self.agents
            .insert(spec.id.clone(), RegisteredAgent { spec, backend });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&AgentSpec> {
        self.agents.get(id).map(|a| &a.spec)
    }

    pub fn backend(&self, id: &str) -> Option<Arc<dyn AgentBackend>> {
        self.agents.get(id).map(|a| Arc::clone(&a.backend))
    }

    pub fn by_category(&self, category: Category) -> Vec<&AgentSpec> {
        self.agents
            .values()
            .filter(|a| a.spec.category == category)
            .map(|a| &a.spec)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn types(&self) -> &TypeGraph {
        &self.types
    }

    pub fn compatible(&self, out_type: &str, in_type: &str) -> Result<bool, TypeError> {
        self.types.compatible(out_type, in_type)
    }

    /// Loads agent specs from a declarative JSON file (array of spec
    /// documents), binding each to a backend from the factory.
    pub fn load_specs(
        &mut self,
        json: &str,
        mut backend_for: impl FnMut(&AgentSpec) -> Arc<dyn AgentBackend>,
    ) -> Result<usize, Box<dyn std::error::Error>> {
        let specs: Vec<AgentSpec> = serde_json::from_str(json)?;
        let n = specs.len();
        for spec in specs {
            let backend = backend_for(&spec);
            self.register(spec, backend)?;
        }
        Ok(n)
    }
}

/// Pairs of side-effecting agents that share a segregation-of-duties group
/// and therefore may not co-execute in one plan.
pub fn sod_conflicts<'a>(specs: &[&'a AgentSpec]) -> Vec<(&'a str, &'a str)> {
    let mut out = Vec::new();
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.side_effecting
                && b.side_effecting
                && !a.sod_group.is_empty()
                && a.sod_group == b.sod_group
                && a.id != b.id
            {
                out.push((a.id.as_str(), b.id.as_str()));
            }
        }
    }
    out
}
