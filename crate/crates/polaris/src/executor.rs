//! Dependency-graph execution with completion-based readiness semantics,
//! bounded parallelism, dynamic guard edges, and side-effect gating.
//!
//! Scheduling is wave-based: every wave dispatches ready nodes up to the
//! concurrency limit, joins them, then commits results in deterministic
//! node order. Guard signals are evaluated only at completion boundaries
//! and only affect nodes that cannot yet have dispatched, so the concurrent
//! schedule and the single-threaded replay reach the identical final state.

use crate::contracts::{
    agent_ids, AgentSpec, Category, ExecutionContext, Registry, ValueMap,
};
use crate::governance::{RiskTier, Violation};
use crate::planner::{Plan, MIDDLE_CHECKS};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

// ---------------------------------------------------------------------------
// Compilation
// ---------------------------------------------------------------------------

pub use crate::planner::BindingSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledNode {
    pub id: String,
    pub agent: String,
    pub bindings: BTreeMap<String, BindingSource>,
    pub optional: bool,
}

/// A validated, executable form of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutableGraph {
    pub nodes: Vec<CompiledNode>,
    pub edges: Vec<(String, String)>,
}

impl ExecutableGraph {
    pub fn in_degree(&self, node: &str) -> usize {
        self.edges.iter().filter(|(_, to)| to == node).count()
    }
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("unknown agent {agent:?} at node {node:?}")]
    UnknownAgent { node: String, agent: String },
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("edge references missing node: {from:?} -> {to:?}")]
    DanglingEdge { from: String, to: String },
    #[error("plan contains a cycle")]
    Cycle,
    #[error("{consumer:?} consumes extracted fields but does not trail the parser")]
    ParserFirst { consumer: String },
    #[error("sink {sink:?} does not depend on upstream check {check:?}")]
    SinksLast { sink: String, check: String },
}

/// Validates the dependency rules and freezes the plan for execution:
/// the parser precedes every consumer of extracted fields, middle checks
/// stay mutually independent (the compiler adds no edges between them),
/// and reconciliation sinks trail every upstream check.
pub fn compile(plan: &Plan, registry: &Registry) -> Result<ExecutableGraph, CompileError> {
    let mut seen = BTreeSet::new();
    for node in &plan.nodes {
        if !seen.insert(node.id.as_str()) {
            return Err(CompileError::DuplicateNode(node.id.clone()));
        }
        if registry.get(&node.agent).is_none() {
            return Err(CompileError::UnknownAgent {
                node: node.id.clone(),
                agent: node.agent.clone(),
            });
        }
    }
    for (from, to) in &plan.edges {
        if plan.node(from).is_none() || plan.node(to).is_none() {
            return Err(CompileError::DanglingEdge {
                from: from.clone(),
                to: to.clone(),
            });
        }
    }
    if plan.canonical_topo().is_none() {
        return Err(CompileError::Cycle);
    }

    let parser = plan.node_by_agent(agent_ids::DOCUMENT_PARSER);
    let parser_reach = parser.map(|p| plan.descendants(&p.id)).unwrap_or_default();
    for node in &plan.nodes {
        if node.agent == agent_ids::DOCUMENT_PARSER {
            continue;
        }
        let spec = registry.get(&node.agent).expect("checked above");
        let consumes = spec.inputs.iter().any(|slot| {
            node.bindings.contains_key(&slot.name)
                && registry
                    .compatible(&slot.type_name, crate::contracts::types::PARSED_INVOICE)
                    .unwrap_or(false)
        });
        if consumes && !parser_reach.contains(&node.id) {
            return Err(CompileError::ParserFirst {
                consumer: node.agent.clone(),
            });
        }
    }

    for sink in plan
        .nodes
        .iter()
        .filter(|n| registry.get(&n.agent).is_some_and(|s| s.category == Category::Reconciliation))
    {
        for check in MIDDLE_CHECKS {
            if let Some(check_node) = plan.node_by_agent(check) {
                if !plan.reaches(&check_node.id, &sink.id) {
                    return Err(CompileError::SinksLast {
                        sink: sink.agent.clone(),
                        check: check.to_string(),
                    });
                }
            }
        }
    }

    Ok(ExecutableGraph {
        nodes: plan
            .nodes
            .iter()
            .map(|n| CompiledNode {
                id: n.id.clone(),
                agent: n.agent.clone(),
                bindings: n.bindings.clone(),
                optional: n.optional,
            })
            .collect(),
        edges: plan.edges.clone(),
    })
}

// ---------------------------------------------------------------------------
// Execution state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// A predecessor failed or was itself failure-skipped.
    UpstreamFailure,
    /// A low-risk signal bypassed this optional stage.
    GuardBypass,
    /// A blocking violation was present when this side-effecting node would
    /// have dispatched.
    GateBlocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum NodeStatus {
    Pending,
    Ready,
    Running,
    Done,
    Failed,
    Skipped(SkipReason),
}

impl NodeStatus {
    /// A predecessor in this status no longer blocks its dependents.
    fn satisfies_readiness(self) -> bool {
        matches!(
            self,
            NodeStatus::Done
                | NodeStatus::Skipped(SkipReason::GuardBypass)
                | NodeStatus::Skipped(SkipReason::GateBlocked)
        )
    }

    fn dispatched(self) -> bool {
        matches!(self, NodeStatus::Running | NodeStatus::Done | NodeStatus::Failed)
    }

    fn terminal(self) -> bool {
        matches!(self, NodeStatus::Done | NodeStatus::Failed | NodeStatus::Skipped(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedEdge {
    pub from: String,
    pub to: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardEvent {
    pub signal: String,
    pub source: String,
    pub detail: String,
}

/// Live scheduling state: statuses, the value store (outputs of done nodes
/// only), and any runtime-injected structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionState {
    pub nodes: Vec<CompiledNode>,
    pub edges: Vec<(String, String)>,
    pub statuses: BTreeMap<String, NodeStatus>,
    pub value_store: BTreeMap<String, ValueMap>,
    pub injected_edges: Vec<InjectedEdge>,
    pub guard_events: Vec<GuardEvent>,
    pub limit: usize,
}

impl ExecutionState {
    pub fn new(graph: &ExecutableGraph, limit: usize) -> Self {
        ExecutionState {
            nodes: graph.nodes.clone(),
            edges: graph.edges.clone(),
            statuses: graph
                .nodes
                .iter()
                .map(|n| (n.id.clone(), NodeStatus::Pending))
                .collect(),
            value_store: BTreeMap::new(),
            injected_edges: Vec::new(),
            guard_events: Vec::new(),
            limit,
        }
    }

    pub fn node(&self, id: &str) -> Option<&CompiledNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn status(&self, id: &str) -> NodeStatus {
        self.statuses.get(id).copied().unwrap_or(NodeStatus::Pending)
    }

    fn predecessors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a str> {
        self.edges
            .iter()
            .filter(move |(_, to)| to == id)
            .map(|(from, _)| from.as_str())
    }

    fn ready_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| self.status(&n.id) == NodeStatus::Pending)
            .filter(|n| {
                self.predecessors(&n.id)
                    .all(|p| self.status(p).satisfies_readiness())
            })
            .map(|n| n.id.clone())
            .collect()
    }

    /// Marks dependents of failed nodes skipped, transitively.
    fn propagate_failures(&mut self) {
        loop {
            let mut changed = false;
            for node in &self.nodes.clone() {
                if self.status(&node.id) != NodeStatus::Pending {
                    continue;
                }
                let doomed = self.predecessors(&node.id).any(|p| {
                    matches!(
                        self.status(p),
                        NodeStatus::Failed | NodeStatus::Skipped(SkipReason::UpstreamFailure)
                    )
                });
                if doomed {
                    self.statuses
                        .insert(node.id.clone(), NodeStatus::Skipped(SkipReason::UpstreamFailure));
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }

    /// Any blocking violation anywhere in the value store gates all
    /// side-effecting dispatches.
    pub fn blocking_violation_present(&self) -> bool {
        self.value_store.values().any(|slots| {
            slots.values().any(|v| match v {
                Value::Array(items) => items
                    .iter()
                    .any(|item| item.get("blocking").and_then(Value::as_bool) == Some(true)),
                _ => false,
            })
        })
    }

    /// Downstream closure over current (static + injected) edges.
    fn descendants(&self, start: &str) -> BTreeSet<String> {
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

    pub fn all_terminal(&self) -> bool {
        self.statuses.values().all(|s| s.terminal())
    }
}

// ---------------------------------------------------------------------------
// Dynamic guards
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "signal", rename_all = "snake_case")]
pub enum GuardSignal {
    /// A robust anomaly score cleared the guard threshold: stage extra
    /// verification ahead of every not-yet-dispatched sink.
    AnomalyHigh { source: String },
    /// Risk scored in the auto-approve tier: optional stages downstream of
    /// the signal source may be bypassed.
    RiskLow { source: String },
}

#[derive(Debug, Error)]
#[error("guard signal arrived after target {target:?} dispatched")]
pub struct InjectionRaceError {
    pub target: String,
}

/// Applies a runtime guard signal to the schedule. Signals must be
/// evaluated at completion boundaries; a target that already dispatched is
/// a race and an error.
pub fn inject_guard(
    state: &mut ExecutionState,
    signal: &GuardSignal,
    registry: &Registry,
) -> Result<(), InjectionRaceError> {
    match signal {
        GuardSignal::AnomalyHigh { source } => {
            if state.nodes.iter().any(|n| n.agent == agent_ids::EXTRA_VERIFICATION) {
                return Ok(()); // already staged
            }
            let sinks: Vec<String> = state
                .nodes
                .iter()
                .filter(|n| {
                    registry
                        .get(&n.agent)
                        .is_some_and(|s| s.category == Category::Reconciliation)
                })
                .map(|n| n.id.clone())
                .collect();
            for sink in &sinks {
                if state.status(sink).dispatched() {
                    return Err(InjectionRaceError {
                        target: sink.clone(),
                    });
                }
            }
            let invoice_provider = state
                .nodes
                .iter()
                .find(|n| n.agent == agent_ids::DATA_VALIDATOR)
                .map(|n| (n.id.clone(), "validated".to_string()))
                .or_else(|| {
                    state
                        .nodes
                        .iter()
                        .find(|n| n.agent == agent_ids::DOCUMENT_PARSER)
                        .map(|n| (n.id.clone(), "invoice".to_string()))
                });
            let id = format!("xv{}", state.nodes.len());
            let mut bindings = BTreeMap::new();
            let mut incoming = Vec::new();
            if let Some((provider, slot)) = invoice_provider {
                bindings.insert(
                    "invoice".to_string(),
                    BindingSource::Node {
                        node: provider.clone(),
                        slot,
                    },
                );
                incoming.push(provider);
            }
            bindings.insert(
                "anomalies".to_string(),
                BindingSource::Node {
                    node: source.clone(),
                    slot: "anomalies".to_string(),
                },
            );
            incoming.push(source.clone());
            state.nodes.push(CompiledNode {
                id: id.clone(),
                agent: agent_ids::EXTRA_VERIFICATION.to_string(),
                bindings,
                optional: false,
            });
            state.statuses.insert(id.clone(), NodeStatus::Pending);
            for from in incoming {
                state.edges.push((from.clone(), id.clone()));
                state.injected_edges.push(InjectedEdge {
                    from,
                    to: id.clone(),
                    reason: "anomaly_high".to_string(),
                });
            }
            for sink in sinks {
                state.edges.push((id.clone(), sink.clone()));
                // Feed the verification report into sinks that declare the
                // optional slot for it.
                if let Some(sink_node) = state.nodes.iter_mut().find(|n| n.id == sink) {
                    let takes_verification = registry
                        .get(&sink_node.agent)
                        .and_then(|s| s.input_slot("verification").cloned())
                        .is_some();
                    if takes_verification && !sink_node.bindings.contains_key("verification") {
                        sink_node.bindings.insert(
                            "verification".to_string(),
                            BindingSource::Node {
                                node: id.clone(),
                                slot: "verification".to_string(),
                            },
                        );
                    }
                }
                state.injected_edges.push(InjectedEdge {
                    from: id.clone(),
                    to: sink,
                    reason: "anomaly_high".to_string(),
                });
            }
            state.guard_events.push(GuardEvent {
                signal: "anomaly_high".to_string(),
                source: source.clone(),
                detail: "staged extra verification ahead of reconciliation sinks".to_string(),
            });
            Ok(())
        }
        GuardSignal::RiskLow { source } => {
            let downstream = state.descendants(source);
            let targets: Vec<String> = state
                .nodes
                .iter()
                .filter(|n| n.optional && downstream.contains(&n.id))
                .map(|n| n.id.clone())
                .collect();
            for target in &targets {
                match state.status(target) {
                    NodeStatus::Running => {
                        return Err(InjectionRaceError {
                            target: target.clone(),
                        })
                    }
                    NodeStatus::Pending | NodeStatus::Ready => {
                        state
                            .statuses
                            .insert(target.clone(), NodeStatus::Skipped(SkipReason::GuardBypass));
                        state.guard_events.push(GuardEvent {
                            signal: "risk_low".to_string(),
                            source: source.clone(),
                            detail: format!("bypassed optional stage {target}"),
                        });
                    }
                    _ => {}
                }
            }
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Node events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventPhase {
    Dispatched,
    Completed,
    Failed,
}

/// One audit record per node phase, with wall-clock timing and full I/O
/// snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEvent {
    pub node: String,
    pub agent: String,
    pub phase: EventPhase,
    pub started_ms: u128,
    pub ended_ms: u128,
    pub inputs: ValueMap,
    pub outputs: ValueMap,
    pub detail: String,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Executor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Waves run ready nodes in parallel up to the limit.
    Concurrent,
    /// Reference mode: one node at a time in deterministic order.
    Serialized,
}

pub struct Executor {
    pub mode: ExecutionMode,
    pub limit: usize,
}

impl Executor {
    pub fn new(mode: ExecutionMode, limit: usize) -> Self {
        Executor {
            mode,
            limit: limit.max(1),
        }
    }

    /// Runs the graph to a terminal state. Node failures are recorded,
    /// never thrown; failed branches skip their dependents.
    pub fn run(
        &self,
        graph: &ExecutableGraph,
        ctx: &ExecutionContext<'_>,
    ) -> (ExecutionState, Vec<NodeEvent>) {
        let mut state = ExecutionState::new(graph, self.limit);
        let mut events = Vec::new();
        let width = match self.mode {
            ExecutionMode::Concurrent => self.limit,
            ExecutionMode::Serialized => 1,
        };

        loop {
            state.propagate_failures();
            let ready = state.ready_ids();
            if ready.is_empty() {
                break;
            }
            let blocking = state.blocking_violation_present();
            let mut wave: Vec<CompiledNode> = Vec::new();
            let mut gated = false;
            for id in ready {
                if wave.len() >= width {
                    break;
                }
                let node = state.node(&id).expect("ready node exists").clone();
                let spec = ctx.registry.get(&node.agent).expect("compiled agents resolve");
                if spec.side_effecting && blocking {
                    state
                        .statuses
                        .insert(id.clone(), NodeStatus::Skipped(SkipReason::GateBlocked));
                    state.guard_events.push(GuardEvent {
                        signal: "side_effect_gate".to_string(),
                        source: id,
                        detail: "blocking violation present at dispatch time".to_string(),
                    });
                    gated = true;
                    continue;
                }
                wave.push(node);
            }
            if wave.is_empty() {
                if gated {
                    continue; // statuses changed; recompute readiness
                }
                break;
            }

            // Dispatch: readiness soundness is asserted here.
            let mut units: Vec<(CompiledNode, ValueMap)> = Vec::new();
            for node in wave {
                assert!(
                    state
                        .predecessors(&node.id)
                        .all(|p| state.status(p).satisfies_readiness()),
                    "dispatched node {} with unfinished predecessors",
                    node.id
                );
                let inputs = assemble_inputs(&state, &node, ctx);
                state.statuses.insert(node.id.clone(), NodeStatus::Running);
                events.push(NodeEvent {
                    node: node.id.clone(),
                    agent: node.agent.clone(),
                    phase: EventPhase::Dispatched,
                    started_ms: now_ms(),
                    ended_ms: 0,
                    inputs: inputs.clone(),
                    outputs: ValueMap::new(),
                    detail: String::new(),
                });
                units.push((node, inputs));
            }

            let results = self.execute_wave(&units, ctx);

            // Commit in wave order, then evaluate guard signals at this
            // completion boundary.
            for ((node, inputs), outcome) in units.into_iter().zip(results) {
                let (result, started_ms, ended_ms) = outcome;
                let spec = ctx.registry.get(&node.agent).expect("resolved");
                match result.and_then(|outputs| check_outputs(spec, outputs)) {
                    Ok(outputs) => {
                        state.value_store.insert(node.id.clone(), outputs.clone());
                        state.statuses.insert(node.id.clone(), NodeStatus::Done);
                        events.push(NodeEvent {
                            node: node.id.clone(),
                            agent: node.agent.clone(),
                            phase: EventPhase::Completed,
                            started_ms,
                            ended_ms,
                            inputs,
                            outputs: outputs.clone(),
                            detail: String::new(),
                        });
                        for signal in signals_from(&node, &outputs, ctx) {
                            inject_guard(&mut state, &signal, ctx.registry)
                                .expect("completion-boundary signals cannot race");
                        }
                    }
                    Err(reason) => {
                        state.statuses.insert(node.id.clone(), NodeStatus::Failed);
                        events.push(NodeEvent {
                            node: node.id.clone(),
                            agent: node.agent.clone(),
                            phase: EventPhase::Failed,
                            started_ms,
                            ended_ms,
                            inputs,
                            outputs: ValueMap::new(),
                            detail: reason,
                        });
                    }
                }
            }
        }

        debug_assert!(state.all_terminal());
        (state, events)
    }

    #[allow(clippy::type_complexity)]
    fn execute_wave(
        &self,
        units: &[(CompiledNode, ValueMap)],
        ctx: &ExecutionContext<'_>,
    ) -> Vec<(Result<ValueMap, String>, u128, u128)> {
        let run_one = |node: &CompiledNode, inputs: &ValueMap| {
            let started = now_ms();
            let spec = ctx.registry.get(&node.agent).expect("resolved");
            let backend = ctx.registry.backend(&node.agent).expect("resolved");
            let result = backend
                .invoke(spec, inputs, ctx)
                .map_err(|e| e.to_string());
            (result, started, now_ms())
        };
        match self.mode {
            ExecutionMode::Serialized => units.iter().map(|(n, i)| run_one(n, i)).collect(),
            ExecutionMode::Concurrent => {
                // Reentrant backends fan out on scoped threads; the rest run
                // serially after the join.
                let reentrant: Vec<bool> = units
                    .iter()
                    .map(|(n, _)| ctx.registry.backend(&n.agent).is_some_and(|b| b.reentrant()))
                    .collect();
                let mut results: Vec<Option<(Result<ValueMap, String>, u128, u128)>> =
                    (0..units.len()).map(|_| None).collect();
                std::thread::scope(|scope| {
                    let mut handles = Vec::new();
                    for (i, (node, inputs)) in units.iter().enumerate() {
                        if reentrant[i] {
                            handles.push((i, scope.spawn(move || run_one(node, inputs))));
                        }
                    }
                    for (i, handle) in handles {
                        results[i] = Some(handle.join().expect("backend panicked"));
                    }
                });
                for (i, (node, inputs)) in units.iter().enumerate() {
                    if !reentrant[i] {
                        results[i] = Some(run_one(node, inputs));
                    }
                }
                results.into_iter().map(|r| r.expect("filled")).collect()
            }
        }
    }
}

fn assemble_inputs(state: &ExecutionState, node: &CompiledNode, ctx: &ExecutionContext<'_>) -> ValueMap {
    let mut inputs = ValueMap::new();
    for (slot, source) in &node.bindings {
        match source {
            BindingSource::Task => {
                inputs.insert(
                    slot.clone(),
                    serde_json::to_value(ctx.task).expect("task record serializes"),
                );
            }
            BindingSource::Node { node: src, slot: src_slot } => {
                if let Some(v) = state.value_store.get(src).and_then(|m| m.get(src_slot)) {
                    inputs.insert(slot.clone(), v.clone());
                }
            }
        }
    }
    inputs
}

/// Output contract enforcement: exactly the declared slots, values of the
/// declared semantic types, and every postcondition holding. Anything else
/// is a node failure, never a silent coercion.
fn check_outputs(spec: &AgentSpec, outputs: ValueMap) -> Result<ValueMap, String> {
    let declared: BTreeSet<&str> = spec.outputs.iter().map(|s| s.name.as_str()).collect();
    let produced: BTreeSet<&str> = outputs.keys().map(String::as_str).collect();
    if declared != produced {
        return Err(format!(
            "output slots {produced:?} do not match declared {declared:?}"
        ));
    }
    for slot in &spec.outputs {
        let v = &outputs[&slot.name];
        if !value_conforms(&slot.type_name, v) {
            return Err(format!(
                "output {slot:?} does not conform to {type_name}",
                slot = slot.name,
                type_name = slot.type_name
            ));
        }
    }
    for cond in &spec.postconditions {
        if !cond.holds(&outputs) {
            return Err(format!(
                "postcondition {:?} on slot {:?} failed",
                cond.predicate, cond.slot
            ));
        }
    }
    Ok(outputs)
}

/// Shallow structural conformance of a value to a semantic type.
pub fn value_conforms(type_name: &str, v: &Value) -> bool {
    use crate::contracts::types as t;
    match type_name {
        t::TASK_RECORD => v.get("task_type").is_some() && v.get("input_format").is_some(),
        t::PARSED_INVOICE | t::VALIDATED_INVOICE => v.get("confidence").is_some(),
        t::REPAIR_TRACE => v.get("iterations").is_some(),
        t::VALIDATOR_REPORT | t::VERIFICATION_REPORT => v.get("verdict").is_some(),
        t::POLICY_LOOKUP => v.get("exists").is_some(),
        t::VIOLATION_SET | t::ANOMALY_SET | t::CANDIDATE_SET => v.is_array(),
        t::RISK_ASSESSMENT => v.get("score").is_some() && v.get("tier").is_some(),
        t::DECISION => v.get("decision").is_some(),
        t::SELECTION => v.get("chosen_index").is_some(),
        t::RAW_DOCUMENT => v.is_string() || v.is_object(),
        t::MATCH_REPORT | t::SCHEDULE_RECEIPT | t::API_RECEIPT | t::REPORT => v.is_object(),
        _ => true,
    }
}

/// Guard signals derived from a completed node's outputs.
fn signals_from(node: &CompiledNode, outputs: &ValueMap, ctx: &ExecutionContext<'_>) -> Vec<GuardSignal> {
    let mut signals = Vec::new();
    if node.agent == agent_ids::ANOMALY_DETECTION {
        if let Some(Value::Array(flags)) = outputs.get("anomalies") {
            let high = flags.iter().any(|f| {
                f.get("kind").and_then(Value::as_str) == Some("amount")
                    && f.get("score").and_then(Value::as_f64).is_some_and(|z| z > ctx.config.k_mad)
            });
            if high {
                signals.push(GuardSignal::AnomalyHigh {
                    source: node.id.clone(),
                });
            }
        }
    }
    if node.agent == agent_ids::RISK_CONTROL {
        let auto = outputs
            .get("risk")
            .and_then(|r| r.get("tier"))
            .and_then(Value::as_str)
            == Some("auto_approve");
        if auto {
            signals.push(GuardSignal::RiskLow {
                source: node.id.clone(),
            });
        }
    }
    signals
}

/// Extracts all blocking violations currently in the store, for decision
/// synthesis and audits.
pub fn violations_in_store(state: &ExecutionState) -> Vec<Violation> {
    let mut out = Vec::new();
    for slots in state.value_store.values() {
        for v in slots.values() {
            if let Value::Array(items) = v {
                for item in items {
                    if item.get("kind").is_some() && item.get("blocking").is_some() {
                        if let Ok(violation) = serde_json::from_value::<Violation>(item.clone()) {
                            out.push(violation);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Risk tier parsed from a risk assessment output, if present.
pub fn tier_from(value: &Value) -> Option<RiskTier> {
    serde_json::from_value::<RiskTier>(value.get("tier")?.clone()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EngineConfig;
    use crate::contracts::{
        types, AgentBackend, BackendError, EligibilityRule, Slot, TypeGraph,
    };
    use crate::governance::{AnomalyBaseline, PolicyStore};
    use crate::planner::PlanNode;
    use crate::task::{FileType, InputFormat, TaskRecord, TaskType};
    use std::sync::Arc;

    struct EchoBackend {
        payload: Value,
    }

    impl AgentBackend for EchoBackend {
        fn invoke(
            &self,
            spec: &AgentSpec,
            inputs: &ValueMap,
            _ctx: &ExecutionContext<'_>,
        ) -> Result<ValueMap, BackendError> {
            let mut out = ValueMap::new();
            let mut body = serde_json::Map::new();
            body.insert("from".into(), Value::String(spec.id.clone()));
            body.insert("payload".into(), self.payload.clone());
            body.insert(
                "seen".into(),
                Value::Array(inputs.keys().map(|k| Value::String(k.clone())).collect()),
            );
            out.insert(
                spec.outputs[0].name.clone(),
                Value::Object(body),
            );
            Ok(out)
        }
    }

    struct FailingBackend;
    impl AgentBackend for FailingBackend {
        fn invoke(
            &self,
            spec: &AgentSpec,
            _inputs: &ValueMap,
            _ctx: &ExecutionContext<'_>,
        ) -> Result<ValueMap, BackendError> {
            Err(BackendError::new(&spec.id, "induced failure"))
        }
    }

    fn test_spec(id: &str, inputs: Vec<Slot>, side_effecting: bool) -> AgentSpec {
        AgentSpec {
            id: id.into(),
            category: Category::Processor,
            inputs,
            outputs: vec![Slot::required("out", types::REPORT)],
            preconditions: vec![],
            postconditions: vec![],
            side_effecting,
            sod_group: String::new(),
            eligibility: EligibilityRule::Always,
        }
    }

    fn test_registry(fail_agent: Option<&str>) -> Registry {
        let mut reg = Registry::new(TypeGraph::standard());
        let mk = |v: i64| -> Arc<dyn AgentBackend> {
            Arc::new(EchoBackend {
                payload: Value::from(v),
            })
        };
        for (i, id) in ["A", "B", "C", "D"].iter().enumerate() {
            let inputs = if *id == "A" {
                vec![]
            } else {
                vec![Slot::optional("inp", types::REPORT), Slot::optional("inp2", types::REPORT)]
            };
            let backend: Arc<dyn AgentBackend> = if Some(*id) == fail_agent {
                Arc::new(FailingBackend)
            } else {
                mk(i as i64)
            };
            reg.register(test_spec(id, inputs, false), backend).unwrap();
        }
        // A side-effecting agent named like the gateable catalog entry.
        let mut api = test_spec(agent_ids::API_ACCESS, vec![Slot::optional("inp", types::REPORT)], true);
        api.sod_group = "external".into();
        reg.register(api, mk(9)).unwrap();
        reg
    }

    fn diamond_plan() -> Plan {
        let node = |id: &str, agent: &str, binding: Option<(&str, &str, &str)>| {
            let mut bindings = BTreeMap::new();
            if let Some((slot, src, src_slot)) = binding {
                bindings.insert(
                    slot.to_string(),
                    BindingSource::Node {
                        node: src.into(),
                        slot: src_slot.into(),
                    },
                );
            }
            PlanNode {
                id: id.into(),
                agent: agent.into(),
                bindings,
                optional: false,
            }
        };
        let mut d = node("d", "D", Some(("inp", "b", "out")));
        d.bindings.insert(
            "inp2".into(),
            BindingSource::Node {
                node: "c".into(),
                slot: "out".into(),
            },
        );
        Plan {
            nodes: vec![
                node("a", "A", None),
                node("b", "B", Some(("inp", "a", "out"))),
                node("c", "C", Some(("inp", "a", "out"))),
                d,
            ],
            edges: vec![
                ("a".into(), "b".into()),
                ("a".into(), "c".into()),
                ("b".into(), "d".into()),
                ("c".into(), "d".into()),
            ],
            prior_score: 1.0,
        }
    }

    fn test_task() -> TaskRecord {
        TaskRecord {
            task_type: TaskType::UserCommand,
            input_format: InputFormat::Text,
            file_name: String::new(),
            file_type: FileType::None,
            timestamp: "2026-03-02T09:00:00Z".into(),
            origin: "chat".into(),
            instruction: "run".into(),
            meta: Default::default(),
        }
    }

    fn with_ctx<R>(registry: &Registry, f: impl FnOnce(&ExecutionContext<'_>) -> R) -> R {
        let config = EngineConfig::default();
        let policy = PolicyStore::default();
        let baselines = AnomalyBaseline::default();
        let task = test_task();
        let ctx = ExecutionContext {
            registry,
            config: &config,
            policy: &policy,
            baselines: &baselines,
            task: &task,
            document: None,
            today: chrono::NaiveDate::from_ymd_opt(2026, 3, 2).unwrap(),
        };
        f(&ctx)
    }

    #[test]
    fn diamond_runs_sink_last_with_both_inputs() {
        let registry = test_registry(None);
        let graph = compile(&diamond_plan(), &registry).unwrap();
        with_ctx(&registry, |ctx| {
            let (state, events) = Executor::new(ExecutionMode::Concurrent, 4).run(&graph, ctx);
            assert_eq!(state.status("d"), NodeStatus::Done);
            let d_inputs = events
                .iter()
                .find(|e| e.node == "d" && e.phase == EventPhase::Completed)
                .unwrap();
            assert!(d_inputs.inputs.contains_key("inp") && d_inputs.inputs.contains_key("inp2"));
            // The sink dispatched after both middles completed.
            let pos = |node: &str, phase| {
                events
                    .iter()
                    .position(|e| e.node == node && e.phase == phase)
                    .unwrap()
            };
            assert!(pos("d", EventPhase::Dispatched) > pos("b", EventPhase::Completed));
            assert!(pos("d", EventPhase::Dispatched) > pos("c", EventPhase::Completed));
        });
    }

    #[test]
    fn failed_middle_skips_the_sink() {
        let registry = test_registry(Some("B"));
        let graph = compile(&diamond_plan(), &registry).unwrap();
        with_ctx(&registry, |ctx| {
            let (state, events) = Executor::new(ExecutionMode::Concurrent, 4).run(&graph, ctx);
            assert_eq!(state.status("b"), NodeStatus::Failed);
            assert_eq!(state.status("d"), NodeStatus::Skipped(SkipReason::UpstreamFailure));
            assert!(events.iter().any(|e| e.node == "b" && e.phase == EventPhase::Failed));
            // Failed nodes leave nothing in the store.
            assert!(!state.value_store.contains_key("b"));
            assert!(!state.value_store.contains_key("d"));
        });
    }

    #[test]
    fn serialized_replay_matches_concurrent_store() {
        let registry = test_registry(None);
        let graph = compile(&diamond_plan(), &registry).unwrap();
        with_ctx(&registry, |ctx| {
            let (concurrent, _) = Executor::new(ExecutionMode::Concurrent, 4).run(&graph, ctx);
            let (serial, _) = Executor::new(ExecutionMode::Serialized, 1).run(&graph, ctx);
            let a = serde_json::to_string(&concurrent.value_store).unwrap();
            let b = serde_json::to_string(&serial.value_store).unwrap();
            assert_eq!(a, b);
            assert_eq!(concurrent.statuses, serial.statuses);
        });
    }

    #[test]
    fn side_effecting_node_gated_by_blocking_violation() {
        // A -> APIAccess, with A's output carrying a blocking violation.
        struct ViolationBackend;
        impl AgentBackend for ViolationBackend {
            fn invoke(
                &self,
                _spec: &AgentSpec,
                _inputs: &ValueMap,
                _ctx: &ExecutionContext<'_>,
            ) -> Result<ValueMap, BackendError> {
                let mut out = ValueMap::new();
                out.insert(
                    "out".into(),
                    serde_json::json!([{ "kind": "unknown_vendor", "evidence": {}, "blocking": true }]),
                );
                Ok(out)
            }
        }
        let mut reg = Registry::new(TypeGraph::standard());
        let mut src = test_spec("A", vec![], false);
        src.outputs = vec![Slot::required("out", types::VIOLATION_SET)];
        reg.register(src, Arc::new(ViolationBackend)).unwrap();
        let api = test_spec(agent_ids::API_ACCESS, vec![Slot::optional("inp", types::REPORT)], true);
        reg.register(api, Arc::new(EchoBackend { payload: Value::from(1) })).unwrap();

        let plan = Plan {
            nodes: vec![
                PlanNode {
                    id: "a".into(),
                    agent: "A".into(),
                    bindings: BTreeMap::new(),
                    optional: false,
                },
                PlanNode {
                    id: "api".into(),
                    agent: agent_ids::API_ACCESS.into(),
                    bindings: BTreeMap::new(),
                    optional: false,
                },
            ],
            edges: vec![("a".into(), "api".into())],
            prior_score: 1.0,
        };
        let graph = compile(&plan, &reg).unwrap();
        with_ctx(&reg, |ctx| {
            let (state, _) = Executor::new(ExecutionMode::Concurrent, 4).run(&graph, ctx);
            assert_eq!(state.status("a"), NodeStatus::Done);
            assert_eq!(state.status("api"), NodeStatus::Skipped(SkipReason::GateBlocked));
        });
    }

    #[test]
    fn no_signals_means_no_injected_edges() {
        let registry = test_registry(None);
        let graph = compile(&diamond_plan(), &registry).unwrap();
        with_ctx(&registry, |ctx| {
            let (state, _) = Executor::new(ExecutionMode::Concurrent, 4).run(&graph, ctx);
            assert!(state.injected_edges.is_empty());
        });
    }

    #[test]
    fn risk_low_bypasses_downstream_optional_stage() {
        let registry = test_registry(None);
        let mut plan = diamond_plan();
        plan.nodes.iter_mut().find(|n| n.id == "c").unwrap().optional = true;
        // Serialize: b precedes c, so the signal from b can bypass c.
        plan.edges = vec![
            ("a".into(), "b".into()),
            ("b".into(), "c".into()),
            ("c".into(), "d".into()),
            ("b".into(), "d".into()),
        ];
        plan.nodes.iter_mut().find(|n| n.id == "c").unwrap().bindings = {
            let mut b = BTreeMap::new();
            b.insert(
                "inp".into(),
                BindingSource::Node {
                    node: "b".into(),
                    slot: "out".into(),
                },
            );
            b
        };
        let graph = compile(&plan, &registry).unwrap();
        let mut state = ExecutionState::new(&graph, 4);
        state.statuses.insert("a".into(), NodeStatus::Done);
        state.statuses.insert("b".into(), NodeStatus::Done);
        inject_guard(
            &mut state,
            &GuardSignal::RiskLow { source: "b".into() },
            &registry,
        )
        .unwrap();
        assert_eq!(state.status("c"), NodeStatus::Skipped(SkipReason::GuardBypass));
        // The sink still becomes ready: a bypass satisfies readiness.
        assert!(state.ready_ids().contains(&"d".to_string()));
    }

    #[test]
    fn risk_low_ignores_parallel_optional_stage() {
        let registry = test_registry(None);
        let mut plan = diamond_plan();
        plan.nodes.iter_mut().find(|n| n.id == "c").unwrap().optional = true;
        let graph = compile(&plan, &registry).unwrap();
        let mut state = ExecutionState::new(&graph, 4);
        state.statuses.insert("a".into(), NodeStatus::Done);
        state.statuses.insert("b".into(), NodeStatus::Done);
        // c is parallel to b, not downstream: the signal must not touch it.
        inject_guard(
            &mut state,
            &GuardSignal::RiskLow { source: "b".into() },
            &registry,
        )
        .unwrap();
        assert_eq!(state.status("c"), NodeStatus::Pending);
    }

    #[test]
    fn risk_low_races_when_target_is_running() {
        let registry = test_registry(None);
        let mut plan = diamond_plan();
        plan.nodes.iter_mut().find(|n| n.id == "c").unwrap().optional = true;
        plan.edges.push(("b".into(), "c".into()));
        let graph = compile(&plan, &registry).unwrap();
        let mut state = ExecutionState::new(&graph, 4);
        state.statuses.insert("c".into(), NodeStatus::Running);
        let err = inject_guard(
            &mut state,
            &GuardSignal::RiskLow { source: "b".into() },
            &registry,
        )
        .unwrap_err();
        assert_eq!(err.target, "c");
    }

    #[test]
    fn compile_rejects_cyclic_plans() {
        let registry = test_registry(None);
        let mut plan = diamond_plan();
        plan.edges.push(("d".into(), "a".into()));
        assert!(matches!(compile(&plan, &registry), Err(CompileError::Cycle)));
    }

    #[test]
    fn linear_chain_compiles_unchanged() {
        let registry = test_registry(None);
        let plan = Plan {
            nodes: vec![
                PlanNode { id: "a".into(), agent: "A".into(), bindings: BTreeMap::new(), optional: false },
                PlanNode { id: "b".into(), agent: "B".into(), bindings: BTreeMap::new(), optional: false },
                PlanNode { id: "c".into(), agent: "C".into(), bindings: BTreeMap::new(), optional: false },
            ],
            edges: vec![("a".into(), "b".into()), ("b".into(), "c".into())],
            prior_score: 0.5,
        };
        let graph = compile(&plan, &registry).unwrap();
        assert_eq!(graph.edges, plan.edges);
        assert_eq!(graph.nodes.len(), 3);
    }
}
