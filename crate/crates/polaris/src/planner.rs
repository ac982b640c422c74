//! Candidate plan synthesis: typed, feasible, pairwise-distinct workflow
//! hypotheses biased by an exemplar bank.
//!
//! Generation is a deterministic enumeration instead of sampling: matching
//! exemplar chains seed base structures, structural mutations (middle-check
//! serialization, optional-stage insertion and removal, sink-preamble
//! variation) expand them in lexicographic order, infeasible shapes are
//! filtered, equivalent shapes are deduplicated, and the top-K by prior
//! score survive. The same inputs always produce the same candidate list.

use crate::config::EngineConfig;
use crate::contracts::{agent_ids, sod_conflicts, types, Registry};
use crate::task::{TaskRecord, TaskType};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

// ---------------------------------------------------------------------------
// Plan structure
// ---------------------------------------------------------------------------

/// Where a node's input slot takes its value from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum BindingSource {
    /// The normalized task record itself.
    Task,
    /// An upstream node's output slot.
    Node { node: String, slot: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: String,
    pub agent: String,
    pub bindings: BTreeMap<String, BindingSource>,
    /// Optional stages may be bypassed by runtime guards.
    #[serde(default)]
    pub optional: bool,
}

/// A typed DAG of agent invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub nodes: Vec<PlanNode>,
    pub edges: Vec<(String, String)>,
    pub prior_score: f64,
}

impl Plan {
    pub fn node(&self, id: &str) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_by_agent(&self, agent: &str) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.agent == agent)
    }

    pub fn contains_agent(&self, agent: &str) -> bool {
        self.node_by_agent(agent).is_some()
    }

    pub fn agents(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.agent.as_str()).collect()
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Kahn topological order, tie-broken by agent id then node id so the
    /// result is invariant under node relabeling. None when cyclic.
    pub fn canonical_topo(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (from, to) in &self.edges {
            let (f, t) = (self.index_of(from)?, self.index_of(to)?);
            indegree[t] += 1;
            succs[f].push(t);
        }
        let key = |i: usize| (self.nodes[i].agent.clone(), self.nodes[i].id.clone());
        let mut ready: BTreeSet<(String, String, usize)> = (0..n)
            .filter(|i| indegree[*i] == 0)
            .map(|i| {
                let (a, id) = key(i);
                (a, id, i)
            })
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(entry) = ready.iter().next().cloned() {
            ready.remove(&entry);
            let i = entry.2;
            order.push(i);
            for &s in &succs[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    let (a, id) = key(s);
                    ready.insert((a, id, s));
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Node indices reachable from `start` via one or more edges.
    pub fn descendants(&self, start: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![start.to_string()];
        while let Some(cur) = stack.pop() {
            for (from, to) in &self.edges {
                if *from == cur && out.insert(to.clone()) {
                    stack.push(to.clone());
                }
            }
        }
        out
    }

    pub fn reaches(&self, from: &str, to: &str) -> bool {
        self.descendants(from).contains(to)
    }
}

// ---------------------------------------------------------------------------
// Exemplar bank
// ---------------------------------------------------------------------------

/// Field matchers over the task record; all present constraints must hold.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSignature {
    pub task_type: Option<TaskType>,
    pub month_end: Option<bool>,
    pub has_file: Option<bool>,
}

impl TaskSignature {
    pub fn matches(&self, task: &TaskRecord) -> bool {
        self.task_type.is_none_or(|t| task.task_type == t)
            && self.month_end.is_none_or(|m| task.is_month_end() == m)
            && self.has_file.is_none_or(|h| !task.file_name.is_empty() == h)
    }
}

/// A labeled scenario: when the signature matches, the chain is a known-good
/// agent sequence with the given prior weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub signature: TaskSignature,
    pub chain: Vec<String>,
    pub rationale: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExemplarBank {
    pub exemplars: Vec<Exemplar>,
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("exemplar {index} references unknown agent {agent:?}")]
    UnknownAgent { index: usize, agent: String },
    #[error("exemplar {index} has non-positive weight {weight}")]
    BadWeight { index: usize, weight: f64 },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ExemplarBank {
    pub fn validate(&self, registry: &Registry) -> Result<(), BankError> {
        for (index, e) in self.exemplars.iter().enumerate() {
            if e.weight <= 0.0 {
                return Err(BankError::BadWeight {
                    index,
                    weight: e.weight,
                });
            }
            for agent in &e.chain {
                if registry.get(agent).is_none() {
                    return Err(BankError::UnknownAgent {
                        index,
                        agent: agent.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BankError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), BankError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The shipped scenario bank.
    pub fn standard() -> Self {
        let ex = |task_type, month_end, chain: &[&str], rationale: &str, weight| Exemplar {
            signature: TaskSignature {
                task_type: Some(task_type),
                month_end,
                has_file: None,
            },
            chain: chain.iter().map(|s| s.to_string()).collect(),
            rationale: rationale.to_string(),
            weight,
        };
        ExemplarBank {
            exemplars: vec![
                ex(
                    TaskType::DocumentParsing,
                    None,
                    &[
                        agent_ids::DOCUMENT_PARSER,
                        agent_ids::DATA_VALIDATOR,
                        agent_ids::POLICY_RETRIEVAL,
                        agent_ids::ANOMALY_DETECTION,
                        agent_ids::RISK_CONTROL,
                        agent_ids::APPROVAL,
                        agent_ids::REPORT_GENERATOR,
                    ],
                    "governed invoice flow: parse, validate, policy with outlier screen and risk, approve with report",
                    1.0,
                ),
                ex(
                    TaskType::DocumentParsing,
                    None,
                    &[
                        agent_ids::DOCUMENT_PARSER,
                        agent_ids::DATA_VALIDATOR,
                        agent_ids::POLICY_RETRIEVAL,
                        agent_ids::RECORD_MATCHER,
                        agent_ids::ANOMALY_DETECTION,
                        agent_ids::RISK_CONTROL,
                        agent_ids::APPROVAL,
                        agent_ids::REPORT_GENERATOR,
                    ],
                    "full reconciliation flow with ledger match and outlier screen",
                    0.9,
                ),
                ex(
                    TaskType::DocumentParsing,
                    Some(true),
                    &[
                        agent_ids::DOCUMENT_PARSER,
                        agent_ids::DATA_VALIDATOR,
                        agent_ids::POLICY_RETRIEVAL,
                        agent_ids::ANOMALY_DETECTION,
                        agent_ids::RISK_CONTROL,
                        agent_ids::SCHEDULER,
                        agent_ids::APPROVAL,
                        agent_ids::REPORT_GENERATOR,
                    ],
                    "month-end batch: stage the scheduler before report emission",
                    1.0,
                ),
                ex(
                    TaskType::EventTriggered,
                    None,
                    &[agent_ids::SCHEDULER, agent_ids::REPORT_GENERATOR],
                    "triggered batch window: schedule then summarize",
                    1.0,
                ),
                ex(
                    TaskType::UserCommand,
                    None,
                    &[agent_ids::POLICY_RETRIEVAL, agent_ids::REPORT_GENERATOR],
                    "ad-hoc vendor inquiry: fetch policy context and report",
                    0.8,
                ),
            ],
        }
    }
}

// ---------------------------------------------------------------------------
// Feasibility
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanViolation {
    UnknownAgent { node: String, agent: String },
    DuplicateNodeId { id: String },
    DanglingEdge { from: String, to: String },
    Cycle,
    TypeIncompatibleEdge {
        node: String,
        slot: String,
        expected: String,
        actual: String,
    },
    BindingWithoutEdge { node: String, slot: String },
    UnboundRequiredInput { node: String, slot: String },
    ComplianceOrder { rule: String, detail: String },
    Eligibility { node: String, agent: String },
    SodConflict { a: String, b: String },
    PolicyInvariant { rule: String, detail: String },
}

/// Outcome of static plan checking: zero violations means feasible.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub violations: Vec<PlanViolation>,
    /// Informational notes, e.g. the widest parallel layer for scheduling.
    pub annotations: Vec<String>,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// The four mutually-independent middle-stage checks.
pub const MIDDLE_CHECKS: [&str; 4] = [
    agent_ids::POLICY_RETRIEVAL,
    agent_ids::RECORD_MATCHER,
    agent_ids::ANOMALY_DETECTION,
    agent_ids::RISK_CONTROL,
];

/// Mandatory pipeline stages used for the equivalence core chain.
pub const CORE_STAGES: [&str; 6] = [
    agent_ids::DOCUMENT_PARSER,
    agent_ids::DATA_VALIDATOR,
    agent_ids::RISK_CONTROL,
    agent_ids::SCHEDULER,
    agent_ids::APPROVAL,
    agent_ids::REPORT_GENERATOR,
];

fn invoice_typed(registry: &Registry, type_name: &str) -> bool {
    registry
        .compatible(type_name, types::PARSED_INVOICE)
        .unwrap_or(false)
}

/// Static checks: structure, typing, compliance ordering, eligibility, and
/// segregation of duties. Report-based; an empty violation list is the pass.
pub fn type_check(plan: &Plan, registry: &Registry, task: &TaskRecord) -> FeasibilityReport {
    let mut report = FeasibilityReport::default();
    let v = &mut report.violations;

    // Resolution and structural sanity first; later checks assume them.
    let mut seen = BTreeSet::new();
    for node in &plan.nodes {
        if !seen.insert(node.id.clone()) {
            v.push(PlanViolation::DuplicateNodeId { id: node.id.clone() });
        }
        if registry.get(&node.agent).is_none() {
            v.push(PlanViolation::UnknownAgent {
                node: node.id.clone(),
                agent: node.agent.clone(),
            });
        }
    }
    for (from, to) in &plan.edges {
        if plan.node(from).is_none() || plan.node(to).is_none() {
            v.push(PlanViolation::DanglingEdge {
                from: from.clone(),
                to: to.clone(),
            });
        }
    }
    if !v.is_empty() {
        return report;
    }
    if plan.canonical_topo().is_none() {
        v.push(PlanViolation::Cycle);
        return report;
    }

    // Bindings: required slots bound, sources typed compatibly, and every
    // data flow backed by a dependency edge.
    for node in &plan.nodes {
        let spec = registry.get(&node.agent).expect("resolved above");
        for slot in &spec.inputs {
            match node.bindings.get(&slot.name) {
                None => {
                    if slot.required {
                        v.push(PlanViolation::UnboundRequiredInput {
                            node: node.id.clone(),
                            slot: slot.name.clone(),
                        });
                    }
                }
                Some(BindingSource::Task) => {
                    if !registry
                        .compatible(types::TASK_RECORD, &slot.type_name)
                        .unwrap_or(false)
                    {
                        v.push(PlanViolation::TypeIncompatibleEdge {
                            node: node.id.clone(),
                            slot: slot.name.clone(),
                            expected: slot.type_name.clone(),
                            actual: types::TASK_RECORD.to_string(),
                        });
                    }
                }
                Some(BindingSource::Node { node: src, slot: src_slot }) => {
                    let Some(src_node) = plan.node(src) else {
                        v.push(PlanViolation::BindingWithoutEdge {
                            node: node.id.clone(),
                            slot: slot.name.clone(),
                        });
                        continue;
                    };
                    let src_spec = registry.get(&src_node.agent).expect("resolved above");
                    match src_spec.output_slot(src_slot) {
                        None => v.push(PlanViolation::TypeIncompatibleEdge {
                            node: node.id.clone(),
                            slot: slot.name.clone(),
                            expected: slot.type_name.clone(),
                            actual: format!("missing output {src_slot:?} on {}", src_node.agent),
                        }),
                        Some(out) => {
                            if !registry
                                .compatible(&out.type_name, &slot.type_name)
                                .unwrap_or(false)
                            {
                                v.push(PlanViolation::TypeIncompatibleEdge {
                                    node: node.id.clone(),
                                    slot: slot.name.clone(),
                                    expected: slot.type_name.clone(),
                                    actual: out.type_name.clone(),
                                });
                            }
                        }
                    }
                    if !plan.edges.iter().any(|(f, t)| f == src && t == &node.id) {
                        v.push(PlanViolation::BindingWithoutEdge {
                            node: node.id.clone(),
                            slot: slot.name.clone(),
                        });
                    }
                }
            }
        }
    }

    // Compliance ordering.
    let parser = plan.node_by_agent(agent_ids::DOCUMENT_PARSER);
    let parser_reach: BTreeSet<String> =
        parser.map(|p| plan.descendants(&p.id)).unwrap_or_default();
    for node in &plan.nodes {
        let spec = registry.get(&node.agent).expect("resolved above");
        let consumes_extraction = spec.inputs.iter().any(|slot| {
            node.bindings.contains_key(&slot.name) && invoice_typed(registry, &slot.type_name)
        });
        if consumes_extraction && node.agent != agent_ids::DOCUMENT_PARSER {
            let ok = parser.is_some_and(|_| parser_reach.contains(&node.id));
            if !ok {
                v.push(PlanViolation::ComplianceOrder {
                    rule: "parser_first".into(),
                    detail: format!("{} consumes extracted fields without an upstream parser", node.agent),
                });
            }
        }
    }
    let validator = plan.node_by_agent(agent_ids::DATA_VALIDATOR);
    let validator_reach: BTreeSet<String> =
        validator.map(|n| plan.descendants(&n.id)).unwrap_or_default();
    for gated in [agent_ids::RISK_CONTROL, agent_ids::APPROVAL] {
        if let Some(node) = plan.node_by_agent(gated) {
            let ok = validator.is_some() && validator_reach.contains(&node.id);
            if !ok {
                v.push(PlanViolation::ComplianceOrder {
                    rule: "validate_before_risk_and_approval".into(),
                    detail: format!("{gated} must run downstream of {}", agent_ids::DATA_VALIDATOR),
                });
            }
        }
    }
    if let Some(approval) = plan.node_by_agent(agent_ids::APPROVAL) {
        for check in MIDDLE_CHECKS {
            if let Some(check_node) = plan.node_by_agent(check) {
                if check != agent_ids::APPROVAL && !plan.reaches(&check_node.id, &approval.id) {
                    v.push(PlanViolation::ComplianceOrder {
                        rule: "approval_after_all_checks".into(),
                        detail: format!("{} does not precede {}", check, agent_ids::APPROVAL),
                    });
                }
            }
        }
    }

    // Eligibility.
    for node in &plan.nodes {
        let spec = registry.get(&node.agent).expect("resolved above");
        if !spec.eligibility.eligible(task) {
            v.push(PlanViolation::Eligibility {
                node: node.id.clone(),
                agent: node.agent.clone(),
            });
        }
    }

    // Segregation of duties.
    let specs: Vec<_> = plan
        .nodes
        .iter()
        .map(|n| registry.get(&n.agent).expect("resolved above"))
        .collect();
    for (a, b) in sod_conflicts(&specs) {
        v.push(PlanViolation::SodConflict {
            a: a.to_string(),
            b: b.to_string(),
        });
    }

    // Concurrency annotation: widest dispatchable layer under completion
    // semantics.
    report
        .annotations
        .push(format!("max_parallel_width={}", max_parallel_width(plan)));
    report
}

fn max_parallel_width(plan: &Plan) -> usize {
    let mut remaining: BTreeSet<&str> = plan.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut done: BTreeSet<&str> = BTreeSet::new();
    let mut width = 0;
    while !remaining.is_empty() {
        let layer: Vec<&str> = remaining
            .iter()
            .filter(|id| {
                plan.edges
                    .iter()
                    .filter(|(_, to)| to == *id)
                    .all(|(from, _)| done.contains(from.as_str()))
            })
            .copied()
            .collect();
        if layer.is_empty() {
            break; // cyclic; reported elsewhere
        }
        width = width.max(layer.len());
        for id in layer {
            remaining.remove(id);
            done.insert(id);
        }
    }
    width
}

/// Task-dependent policy invariants, checked beyond static typing.
pub fn policy_invariants(plan: &Plan, task: &TaskRecord) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    if task.task_type == TaskType::DocumentParsing {
        // Vendor-bearing documents must retrieve policy context before any
        // irreversible action.
        match plan.node_by_agent(agent_ids::POLICY_RETRIEVAL) {
            None => {
                if plan.nodes.iter().any(|n| side_effecting(plan, n)) {
                    out.push(PlanViolation::PolicyInvariant {
                        rule: "policy_before_side_effects".into(),
                        detail: "side-effecting stages without policy retrieval".into(),
                    });
                }
            }
            Some(policy_node) => {
                let reach = plan.descendants(&policy_node.id);
                for node in &plan.nodes {
                    if side_effecting(plan, node) && !reach.contains(&node.id) {
                        out.push(PlanViolation::PolicyInvariant {
                            rule: "policy_before_side_effects".into(),
                            detail: format!("{} is not downstream of policy retrieval", node.agent),
                        });
                    }
                }
            }
        }
    }
    if task.is_month_end() {
        let scheduler = plan.node_by_agent(agent_ids::SCHEDULER);
        let report = plan.node_by_agent(agent_ids::REPORT_GENERATOR);
        match (scheduler, report) {
            (Some(s), Some(r)) => {
                if !plan.reaches(&s.id, &r.id) {
                    out.push(PlanViolation::PolicyInvariant {
                        rule: "schedule_before_report".into(),
                        detail: "scheduler does not precede report emission".into(),
                    });
                }
            }
            _ => out.push(PlanViolation::PolicyInvariant {
                rule: "schedule_before_report".into(),
                detail: "month-end workflows must stage scheduling and report emission".into(),
            }),
        }
    }
    out
}

fn side_effecting(_plan: &Plan, node: &PlanNode) -> bool {
    matches!(
        node.agent.as_str(),
        agent_ids::API_ACCESS | agent_ids::APPROVAL | agent_ids::SCHEDULER
    )
}

// ---------------------------------------------------------------------------
// Equivalence
// ---------------------------------------------------------------------------

/// Canonical identity of a plan's structure: the ordered core chain plus the
/// sorted agent-level edge set. Node ids do not participate, so relabeling
/// cannot split an equivalence class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EquivalenceKey {
    pub core_chain: Vec<String>,
    pub edge_set: Vec<(String, String)>,
}

pub fn equivalence_key(plan: &Plan) -> EquivalenceKey {
    let order = plan.canonical_topo().expect("equivalence requires acyclic plans");
    let core_chain = order
        .iter()
        .map(|&i| plan.nodes[i].agent.clone())
        .filter(|a| CORE_STAGES.contains(&a.as_str()))
        .collect();
    let mut edge_set: Vec<(String, String)> = plan
        .edges
        .iter()
        .map(|(f, t)| {
            (
                plan.node(f).expect("edge endpoints exist").agent.clone(),
                plan.node(t).expect("edge endpoints exist").agent.clone(),
            )
        })
        .collect();
    edge_set.sort();
    edge_set.dedup();
    EquivalenceKey {
        core_chain,
        edge_set,
    }
}

// ---------------------------------------------------------------------------
// Candidate generation
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("no feasible plan: {candidates_tried} enumerated candidates all failed checks")]
    NoFeasiblePlan { candidates_tried: usize },
    #[error("exemplar bank is empty or matches no exemplar for this task")]
    NoMatchingExemplar,
}

/// Optional stages subject to insertion/removal mutations.
pub const OPTIONAL_AGENTS: [&str; 3] = [
    agent_ids::RECORD_MATCHER,
    agent_ids::ANOMALY_DETECTION,
    agent_ids::API_ACCESS,
];

/// Canonical precedence among serialized middle checks; inverting an
/// adjacent pair is legal but scored as risky by the selector.
pub const MIDDLE_PRECEDENCE: [&str; 4] = [
    agent_ids::POLICY_RETRIEVAL,
    agent_ids::RECORD_MATCHER,
    agent_ids::ANOMALY_DETECTION,
    agent_ids::RISK_CONTROL,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arrangement {
    Parallel,
    /// Serialize middles in canonical precedence order.
    SerialCanonical,
    /// Serialize with one adjacent transposition at the given position.
    SerialSwapped(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SinkPreamble {
    /// Approval and report are sibling sinks.
    Sibling,
    /// Report trails the approval decision.
    Chained,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum OptionalDelta {
    Keep,
    Drop(&'static str),
    Add(&'static str),
}

/// Agents required for the task; anything beyond this count is an "extra"
/// node for brevity/parsimony purposes. Document tasks require the full
/// governance spine: parse, validate, policy, outlier screen, risk,
/// approval, report.
pub fn required_agents(task: &TaskRecord) -> BTreeSet<&'static str> {
    let mut set: BTreeSet<&'static str> = BTreeSet::new();
    match task.task_type {
        TaskType::DocumentParsing => {
            set.extend([
                agent_ids::DOCUMENT_PARSER,
                agent_ids::DATA_VALIDATOR,
                agent_ids::POLICY_RETRIEVAL,
                agent_ids::ANOMALY_DETECTION,
                agent_ids::RISK_CONTROL,
                agent_ids::APPROVAL,
                agent_ids::REPORT_GENERATOR,
            ]);
            if task.is_month_end() {
                set.insert(agent_ids::SCHEDULER);
            }
        }
        TaskType::EventTriggered => {
            set.extend([agent_ids::SCHEDULER, agent_ids::REPORT_GENERATOR]);
        }
        TaskType::UserCommand => {
            set.extend([agent_ids::POLICY_RETRIEVAL, agent_ids::REPORT_GENERATOR]);
        }
    }
    set
}

pub fn extra_node_count(plan: &Plan, task: &TaskRecord) -> u32 {
    let required = required_agents(task);
    plan.nodes.len().saturating_sub(required.len()) as u32
}

/// Builds a concrete DAG from an agent multiset and structural choices,
/// wiring data bindings from the nearest type-compatible upstream provider.
fn build_plan(
    agents: &[String],
    arrangement: Arrangement,
    preamble: SinkPreamble,
    registry: &Registry,
) -> Option<Plan> {
    let has = |a: &str| agents.iter().any(|x| x == a);

    // Stage partition.
    let mut prefix: Vec<&str> = Vec::new();
    for a in [agent_ids::DOCUMENT_PARSER, agent_ids::DATA_VALIDATOR] {
        if has(a) {
            prefix.push(a);
        }
    }
    let mut middles: Vec<&str> = MIDDLE_PRECEDENCE
        .iter()
        .filter(|a| has(a) && (!prefix.is_empty() || **a == agent_ids::POLICY_RETRIEVAL))
        .copied()
        .collect();
    match arrangement {
        Arrangement::Parallel | Arrangement::SerialCanonical => {}
        Arrangement::SerialSwapped(pos) => {
            if pos + 1 >= middles.len() {
                return None;
            }
            middles.swap(pos, pos + 1);
        }
    }
    let effector = has(agent_ids::API_ACCESS).then_some(agent_ids::API_ACCESS);
    let scheduler = has(agent_ids::SCHEDULER).then_some(agent_ids::SCHEDULER);
    let approval = has(agent_ids::APPROVAL).then_some(agent_ids::APPROVAL);
    let report = has(agent_ids::REPORT_GENERATOR).then_some(agent_ids::REPORT_GENERATOR);

    let mut nodes: Vec<PlanNode> = Vec::new();
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut id_of: BTreeMap<&str, String> = BTreeMap::new();
    let add_node = |agent: &'static str, nodes: &mut Vec<PlanNode>, id_of: &mut BTreeMap<&str, String>| {
        let id = format!("n{}", nodes.len());
        nodes.push(PlanNode {
            id: id.clone(),
            agent: agent.to_string(),
            bindings: BTreeMap::new(),
            optional: OPTIONAL_AGENTS.contains(&agent),
        });
        id_of.insert(agent, id);
    };

    for a in &prefix {
        add_node(a, &mut nodes, &mut id_of);
    }
    for a in &middles {
        add_node(a, &mut nodes, &mut id_of);
    }
    if let Some(a) = effector {
        add_node(a, &mut nodes, &mut id_of);
    }
    if let Some(a) = scheduler {
        add_node(a, &mut nodes, &mut id_of);
    }
    if let Some(a) = approval {
        add_node(a, &mut nodes, &mut id_of);
    }
    if let Some(a) = report {
        add_node(a, &mut nodes, &mut id_of);
    }
    if nodes.len() != agents.len() {
        return None; // an agent outside the recognized stage roles
    }

    let connect = |from: &str, to: &str, edges: &mut Vec<(String, String)>, id_of: &BTreeMap<&str, String>| {
        let f = id_of[from].clone();
        let t = id_of[to].clone();
        if !edges.contains(&(f.clone(), t.clone())) {
            edges.push((f, t));
        }
    };

    // Prefix chain.
    for w in prefix.windows(2) {
        connect(w[0], w[1], &mut edges, &id_of);
    }
    let prefix_last = prefix.last().copied();

    // Middles.
    match arrangement {
        Arrangement::Parallel => {
            if let Some(p) = prefix_last {
                for m in &middles {
                    connect(p, m, &mut edges, &id_of);
                }
            }
        }
        _ => {
            let mut prev = prefix_last;
            for m in &middles {
                if let Some(p) = prev {
                    connect(p, m, &mut edges, &id_of);
                }
                prev = Some(m);
            }
        }
    }
    let middle_tails: Vec<&str> = match arrangement {
        Arrangement::Parallel => middles.clone(),
        _ => middles.last().map(|m| vec![*m]).unwrap_or_default(),
    };

    // External effector rides behind policy context.
    if let Some(api) = effector {
        if middles.contains(&agent_ids::POLICY_RETRIEVAL) {
            connect(agent_ids::POLICY_RETRIEVAL, api, &mut edges, &id_of);
        } else if let Some(p) = prefix_last {
            connect(p, api, &mut edges, &id_of);
        }
    }

    // Scheduler sits after every check, before the report sink.
    if let Some(s) = scheduler {
        if middle_tails.is_empty() {
            if let Some(p) = prefix_last {
                connect(p, s, &mut edges, &id_of);
            }
        } else {
            for m in &middle_tails {
                connect(m, s, &mut edges, &id_of);
            }
        }
    }

    // Sinks aggregate all checks (and the effector, so audit order holds).
    let mut sink_preds: Vec<&str> = middle_tails.clone();
    if let Some(api) = effector {
        sink_preds.push(api);
    }
    if sink_preds.is_empty() {
        if let Some(p) = prefix_last {
            sink_preds.push(p);
        }
    }
    if let Some(a) = approval {
        for pred in &sink_preds {
            connect(pred, a, &mut edges, &id_of);
        }
    }
    if let Some(r) = report {
        match (preamble, approval) {
            (SinkPreamble::Chained, Some(a)) => connect(a, r, &mut edges, &id_of),
            _ => {
                for pred in &sink_preds {
                    connect(pred, r, &mut edges, &id_of);
                }
            }
        }
        if let Some(s) = scheduler {
            connect(s, r, &mut edges, &id_of);
        }
    }
    if nodes.len() >= 2 && edges.is_empty() {
        return None;
    }

    // Data bindings: nearest upstream provider wins; the task record feeds
    // task-typed slots directly.
    let mut plan = Plan {
        nodes,
        edges,
        prior_score: 0.0,
    };
    let order = plan.canonical_topo()?;
    let position: BTreeMap<String, usize> = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| (plan.nodes[i].id.clone(), rank))
        .collect();
    let snapshot = plan.clone();
    for node in &mut plan.nodes {
        let spec = registry.get(&node.agent)?;
        // Ancestors of this node, nearest (highest topo rank) first.
        let mut ancestors: Vec<&PlanNode> = snapshot
            .nodes
            .iter()
            .filter(|cand| snapshot.reaches(&cand.id, &node.id))
            .collect();
        ancestors.sort_by_key(|cand| std::cmp::Reverse(position[&cand.id]));
        for slot in &spec.inputs {
            if registry
                .compatible(types::TASK_RECORD, &slot.type_name)
                .unwrap_or(false)
            {
                node.bindings.insert(slot.name.clone(), BindingSource::Task);
                continue;
            }
            let provider = ancestors.iter().find_map(|cand| {
                let cand_spec = registry.get(&cand.agent)?;
                let out = cand_spec.outputs.iter().find(|out| {
                    registry
                        .compatible(&out.type_name, &slot.type_name)
                        .unwrap_or(false)
                })?;
                Some(BindingSource::Node {
                    node: cand.id.clone(),
                    slot: out.name.clone(),
                })
            });
            match provider {
                Some(src) => {
                    node.bindings.insert(slot.name.clone(), src);
                }
                None if slot.required => return None,
                None => {}
            }
        }
    }

    // Make every data flow an explicit dependency edge.
    let mut extra_edges = Vec::new();
    for node in &plan.nodes {
        for src in node.bindings.values() {
            if let BindingSource::Node { node: from, .. } = src {
                if !plan.edges.iter().any(|(f, t)| f == from && t == &node.id) {
                    extra_edges.push((from.clone(), node.id.clone()));
                }
            }
        }
    }
    plan.edges.extend(extra_edges);
    Some(plan)
}

/// Similarity component of the prior: the best weight among matching
/// exemplars whose chain is a subsequence of the plan's canonical agent
/// sequence.
fn exemplar_similarity(plan: &Plan, task: &TaskRecord, bank: &ExemplarBank) -> f64 {
    let order = match plan.canonical_topo() {
        Some(o) => o,
        None => return 0.0,
    };
    let sequence: Vec<&str> = order.iter().map(|&i| plan.nodes[i].agent.as_str()).collect();
    bank.exemplars
        .iter()
        .filter(|e| e.signature.matches(task))
        .filter(|e| is_subsequence(&e.chain, &sequence))
        .map(|e| e.weight)
        .fold(0.0, f64::max)
}

fn is_subsequence(needle: &[String], haystack: &[&str]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Planner-internal plausibility: exemplar similarity plus a brevity prior,
/// clamped to [0, 1].
pub fn prior_score(plan: &Plan, task: &TaskRecord, bank: &ExemplarBank, cfg: &EngineConfig) -> f64 {
    let sim = exemplar_similarity(plan, task, bank);
    let extra = extra_node_count(plan, task).min(cfg.max_extra_nodes);
    let brevity = 1.0 - f64::from(extra) / f64::from(cfg.max_extra_nodes.max(1));
    (cfg.similarity_weight * sim + cfg.brevity_weight * brevity).clamp(0.0, 1.0)
}

/// Enumerates, filters, deduplicates, and ranks candidate plans.
pub fn generate_candidates(
    task: &TaskRecord,
    bank: &ExemplarBank,
    registry: &Registry,
    k: usize,
) -> Result<Vec<Plan>, PlannerError> {
    assert!(k >= 1, "candidate count must be at least 1");
    let cfg = EngineConfig::default();
    generate_candidates_with(task, bank, registry, k, &cfg)
}

pub fn generate_candidates_with(
    task: &TaskRecord,
    bank: &ExemplarBank,
    registry: &Registry,
    k: usize,
    cfg: &EngineConfig,
) -> Result<Vec<Plan>, PlannerError> {
    assert!(k >= 1, "candidate count must be at least 1");
    let seeds: Vec<&Exemplar> = bank
        .exemplars
        .iter()
        .filter(|e| e.signature.matches(task))
        .collect();
    if seeds.is_empty() {
        return Err(PlannerError::NoMatchingExemplar);
    }

    let mut tried = 0usize;
    let mut seen: BTreeSet<EquivalenceKey> = BTreeSet::new();
    let mut ranked: Vec<(Plan, usize)> = Vec::new();

    for seed in seeds {
        // Optional-stage deltas in fixed order: unchanged, then drops, then
        // additions.
        let mut deltas: Vec<OptionalDelta> = vec![OptionalDelta::Keep];
        for opt in OPTIONAL_AGENTS {
            if seed.chain.iter().any(|a| a == opt) {
                deltas.push(OptionalDelta::Drop(opt));
            } else {
                deltas.push(OptionalDelta::Add(opt));
            }
        }
        for delta in &deltas {
            let mut agents: Vec<String> = seed.chain.clone();
            match delta {
                OptionalDelta::Keep => {}
                OptionalDelta::Drop(a) => agents.retain(|x| x != a),
                OptionalDelta::Add(a) => {
                    // No optional stages without prior extraction.
                    if !agents.iter().any(|x| x == agent_ids::DATA_VALIDATOR) {
                        continue;
                    }
                    agents.push((*a).to_string());
                }
            }
            let middle_count = MIDDLE_PRECEDENCE
                .iter()
                .filter(|m| agents.iter().any(|a| a == *m))
                .count();
            let mut arrangements = vec![Arrangement::Parallel, Arrangement::SerialCanonical];
            for pos in 0..middle_count.saturating_sub(1) {
                arrangements.push(Arrangement::SerialSwapped(pos));
            }
            for arrangement in arrangements {
                for preamble in [SinkPreamble::Sibling, SinkPreamble::Chained] {
                    tried += 1;
                    let Some(mut plan) = build_plan(&agents, arrangement, preamble, registry) else {
                        continue;
                    };
                    if !type_check(&plan, registry, task).feasible() {
                        continue;
                    }
                    if !policy_invariants(&plan, task).is_empty() {
                        continue;
                    }
                    let key = equivalence_key(&plan);
                    if !seen.insert(key) {
                        continue;
                    }
                    plan.prior_score = prior_score(&plan, task, bank, cfg);
                    ranked.push((plan, ranked.len()));
                }
            }
        }
    }

    if ranked.is_empty() {
        return Err(PlannerError::NoFeasiblePlan {
            candidates_tried: tried,
        });
    }
    ranked.sort_by(|(pa, ia), (pb, ib)| {
        pb.prior_score
            .partial_cmp(&pa.prior_score)
            .expect("prior scores are finite")
            .then(ia.cmp(ib))
    });
    Ok(ranked.into_iter().take(k).map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::standard_registry;
    use crate::task::{FileType, InputFormat};
    use proptest::prelude::*;

    pub(crate) fn invoice_task() -> TaskRecord {
        TaskRecord {
            task_type: TaskType::DocumentParsing,
            input_format: InputFormat::File,
            file_name: "inv_001.txt".into(),
            file_type: FileType::Txt,
            timestamp: "2026-03-02T09:00:00Z".into(),
            origin: "upload".into(),
            instruction: String::new(),
            meta: Default::default(),
        }
    }

    fn month_end_task() -> TaskRecord {
        TaskRecord {
            timestamp: "2026-03-30T09:00:00Z".into(),
            ..invoice_task()
        }
    }

    fn event_task() -> TaskRecord {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("event".to_string(), "month_end_day30".to_string());
        TaskRecord {
            task_type: TaskType::EventTriggered,
            input_format: InputFormat::Event,
            file_name: String::new(),
            file_type: FileType::None,
            timestamp: "2026-03-30T00:00:00Z".into(),
            origin: "scheduler".into(),
            instruction: String::new(),
            meta,
        }
    }

    #[test]
    fn standard_chain_is_feasible() {
        let registry = standard_registry();
        let bank = ExemplarBank::standard();
        bank.validate(&registry).unwrap();
        let plans = generate_candidates(&invoice_task(), &bank, &registry, 1).unwrap();
        let report = type_check(&plans[0], &registry, &invoice_task());
        assert!(report.feasible(), "{:?}", report.violations);
    }

    #[test]
    fn generates_k_distinct_feasible_candidates() {
        let registry = standard_registry();
        let bank = ExemplarBank::standard();
        let task = invoice_task();
        let plans = generate_candidates(&task, &bank, &registry, 5).unwrap();
        assert_eq!(plans.len(), 5);
        let mut keys = BTreeSet::new();
        for p in &plans {
            assert!(type_check(p, &registry, &task).feasible());
            assert!(policy_invariants(p, &task).is_empty());
            assert!(keys.insert(equivalence_key(p)), "duplicate equivalence class");
        }
        // Sorted descending by prior.
        for w in plans.windows(2) {
            assert!(w[0].prior_score >= w[1].prior_score);
        }
    }

    #[test]
    fn month_end_candidates_stage_scheduler_before_report() {
        let registry = standard_registry();
        let bank = ExemplarBank::standard();
        for task in [month_end_task(), event_task()] {
            let plans = generate_candidates(&task, &bank, &registry, 5).unwrap();
            assert!(!plans.is_empty());
            for p in &plans {
                let s = p.node_by_agent(agent_ids::SCHEDULER).expect("scheduler staged");
                let r = p.node_by_agent(agent_ids::REPORT_GENERATOR).expect("report staged");
                assert!(p.reaches(&s.id, &r.id), "scheduler must precede report");
            }
        }
    }

    #[test]
    fn document_candidates_place_policy_before_side_effects() {
        let registry = standard_registry();
        let bank = ExemplarBank::standard();
        let task = invoice_task();
        for p in generate_candidates(&task, &bank, &registry, 5).unwrap() {
            let policy = p.node_by_agent(agent_ids::POLICY_RETRIEVAL).expect("policy staged");
            let reach = p.descendants(&policy.id);
            for node in &p.nodes {
                if matches!(
                    node.agent.as_str(),
                    agent_ids::API_ACCESS | agent_ids::APPROVAL | agent_ids::SCHEDULER
                ) {
                    assert!(reach.contains(&node.id), "{} outside policy reach", node.agent);
                }
            }
        }
    }

    #[test]
    fn document_candidates_keep_parse_before_validate() {
        let registry = standard_registry();
        let bank = ExemplarBank::standard();
        let task = invoice_task();
        for p in generate_candidates(&task, &bank, &registry, 5).unwrap() {
            let parser = p.node_by_agent(agent_ids::DOCUMENT_PARSER).unwrap();
            let validator = p.node_by_agent(agent_ids::DATA_VALIDATOR).unwrap();
            assert!(p.reaches(&parser.id, &validator.id));
        }
    }

    #[test]
    fn approval_before_validator_is_a_compliance_breach() {
        let registry = standard_registry();
        let bank = ExemplarBank::standard();
        let task = invoice_task();
        let mut plan = generate_candidates(&task, &bank, &registry, 1).unwrap().remove(0);
        // Cut every edge into the approval node: it no longer trails
        // validation.
        let approval_id = plan.node_by_agent(agent_ids::APPROVAL).unwrap().id.clone();
        plan.edges.retain(|(_, to)| *to != approval_id);
        plan.nodes
            .iter_mut()
            .find(|n| n.id == approval_id)
            .unwrap()
            .bindings
            .clear();
        let report = type_check(&plan, &registry, &task);
        assert!(report.violations.iter().any(|v| matches!(
            v,
            PlanViolation::ComplianceOrder { rule, .. } if rule == "validate_before_risk_and_approval"
        )));
    }

    #[test]
    fn type_incompatible_binding_is_reported() {
        let registry = standard_registry();
        let bank = ExemplarBank::standard();
        let task = invoice_task();
        let mut plan = generate_candidates(&task, &bank, &registry, 1).unwrap().remove(0);
        // Rebind the validator's invoice input to the report output type.
        let parser_id = plan.node_by_agent(agent_ids::DOCUMENT_PARSER).unwrap().id.clone();
        let validator = plan
            .nodes
            .iter_mut()
            .find(|n| n.agent == agent_ids::DATA_VALIDATOR)
            .unwrap();
        validator.bindings.insert(
            "invoice".into(),
            BindingSource::Node {
                node: parser_id,
                slot: "repair_trace".into(),
            },
        );
        let report = type_check(&plan, &registry, &task);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, PlanViolation::TypeIncompatibleEdge { .. })));
    }

    #[test]
    fn equivalence_ignores_node_relabeling() {
        let registry = standard_registry();
        let bank = ExemplarBank::standard();
        let task = invoice_task();
        let plan = generate_candidates(&task, &bank, &registry, 1).unwrap().remove(0);
        let mut relabeled = plan.clone();
        let rename = |id: &str| format!("x_{id}");
        for n in &mut relabeled.nodes {
            n.id = rename(&n.id);
            for src in n.bindings.values_mut() {
                if let BindingSource::Node { node, .. } = src {
                    *node = rename(node);
                }
            }
        }
        for (f, t) in &mut relabeled.edges {
            *f = rename(f);
            *t = rename(t);
        }
        relabeled.nodes.reverse();
        assert_eq!(equivalence_key(&plan), equivalence_key(&relabeled));
    }

    #[test]
    fn middle_order_distinguishes_equivalence_classes() {
        let registry = standard_registry();
        // Serialized chains that only differ in the relative order of two
        // middle checks have different edge sets.
        let chain: Vec<String> = [
            agent_ids::DOCUMENT_PARSER,
            agent_ids::DATA_VALIDATOR,
            agent_ids::POLICY_RETRIEVAL,
            agent_ids::RECORD_MATCHER,
            agent_ids::RISK_CONTROL,
            agent_ids::APPROVAL,
            agent_ids::REPORT_GENERATOR,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let a = build_plan(&chain, Arrangement::SerialCanonical, SinkPreamble::Sibling, &registry).unwrap();
        let b = build_plan(&chain, Arrangement::SerialSwapped(1), SinkPreamble::Sibling, &registry).unwrap();
        let (ka, kb) = (equivalence_key(&a), equivalence_key(&b));
        assert_ne!(ka, kb);
        // Hand-derived expectation: the swapped variant carries the
        // record-matcher edge pointing the other way.
        assert!(ka.edge_set.contains(&(
            agent_ids::RECORD_MATCHER.to_string(),
            agent_ids::RISK_CONTROL.to_string()
        )));
        assert!(kb
            .edge_set
            .contains(&(agent_ids::RISK_CONTROL.to_string(), agent_ids::RECORD_MATCHER.to_string())));
    }

    #[test]
    fn prior_rewards_exact_exemplar_match() {
        let registry = standard_registry();
        let bank = ExemplarBank::standard();
        let cfg = EngineConfig::default();
        let task = invoice_task();
        let plans = generate_candidates(&task, &bank, &registry, 5).unwrap();
        // The first exemplar chain with no extras scores w_sim * 1.0 + w_brev.
        let exact = plans
            .iter()
            .find(|p| p.nodes.len() == 7)
            .expect("minimal candidate present");
        let score = prior_score(exact, &task, &bank, &cfg);
        assert!((score - (0.7 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn brevity_term_decreases_linearly_with_extras() {
        let cfg = EngineConfig::default();
        // extra = 1 vs extra = 3 with max_extra = 4: brevity 0.75 vs 0.25.
        let b = |extra: u32| 1.0 - f64::from(extra.min(cfg.max_extra_nodes)) / f64::from(cfg.max_extra_nodes);
        assert_eq!(b(1), 0.75);
        assert_eq!(b(3), 0.25);
    }

    #[test]
    fn no_matching_exemplar_is_an_error() {
        let registry = standard_registry();
        let bank = ExemplarBank {
            exemplars: vec![Exemplar {
                signature: TaskSignature {
                    task_type: Some(TaskType::EventTriggered),
                    ..TaskSignature::default()
                },
                chain: vec![agent_ids::SCHEDULER.into(), agent_ids::REPORT_GENERATOR.into()],
                rationale: String::new(),
                weight: 1.0,
            }],
        };
        let err = generate_candidates(&invoice_task(), &bank, &registry, 3).unwrap_err();
        assert!(matches!(err, PlannerError::NoMatchingExemplar));
    }

    #[test]
    fn dropping_an_exemplar_never_adds_candidates() {
        let registry = standard_registry();
        let task = invoice_task();
        let full = ExemplarBank::standard();
        let mut reduced = full.clone();
        reduced.exemplars.remove(1);
        let full_keys: BTreeSet<EquivalenceKey> = generate_candidates(&task, &full, &registry, 50)
            .unwrap()
            .iter()
            .map(equivalence_key)
            .collect();
        let reduced_keys: BTreeSet<EquivalenceKey> =
            generate_candidates(&task, &reduced, &registry, 50)
                .unwrap()
                .iter()
                .map(equivalence_key)
                .collect();
        assert!(reduced_keys.is_subset(&full_keys));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn candidates_always_feasible_and_distinct(
            day in 1u32..=28,
            k in 1usize..=8,
            keep_second in proptest::bool::ANY,
            weight_a in 0.1f64..1.0,
            weight_b in 0.1f64..1.0,
        ) {
            let registry = standard_registry();
            let mut bank = ExemplarBank::standard();
            bank.exemplars[0].weight = weight_a;
            bank.exemplars[1].weight = weight_b;
            if !keep_second {
                bank.exemplars.remove(1);
            }
            let task = TaskRecord {
                timestamp: format!("2026-03-{day:02}T09:00:00Z"),
                ..invoice_task()
            };
            let plans = generate_candidates(&task, &bank, &registry, k).unwrap();
            prop_assert!(!plans.is_empty());
            prop_assert!(plans.len() <= k);
            let mut keys = BTreeSet::new();
            for p in &plans {
                prop_assert!(type_check(p, &registry, &task).feasible());
                prop_assert!(policy_invariants(p, &task).is_empty());
                prop_assert!(keys.insert(equivalence_key(p)));
                // Parse-before-validate dependency invariant.
                let parser = p.node_by_agent(agent_ids::DOCUMENT_PARSER).unwrap();
                let validator = p.node_by_agent(agent_ids::DATA_VALIDATOR).unwrap();
                prop_assert!(p.reaches(&parser.id, &validator.id));
                // Equal keys imply equal agent multisets: check against self
                // under relabeling is covered elsewhere; here assert the key
                // determines the agent set.
                let mut agents: Vec<&str> = p.agents();
                agents.sort_unstable();
                prop_assert!(!agents.windows(2).any(|w| w[0] == w[1]));
            }
        }
    }
}
