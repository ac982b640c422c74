//! Self-contained execution traces and deterministic replay.
//!
//! A trace embeds everything a run consumed: the raw input, the policy
//! snapshot, baselines, the exemplar bank, and the engine configuration.
//! Replay rebuilds the environment from the trace alone, re-executes in
//! serialized mode, and compares the decision and final value store
//! byte-for-byte (timing fields live only in node events, which are not
//! part of the comparison).

use crate::backends::DecisionObject;
use crate::config::EngineConfig;
use crate::executor::{ExecutionMode, GuardEvent, InjectedEdge, NodeEvent, NodeStatus};
use crate::governance::{
    AnomalyBaseline, AnomalyFlag, PolicyStore, RiskAssessment, RoutingDisposition, RunLedger,
    Violation,
};
use crate::pipeline::{run_document, EngineEnv, PipelineError, PipelineResult, RepairSummary};
use crate::planner::{ExemplarBank, Plan};
use crate::selector::SelectionDecision;
use crate::task::{RawInput, TaskRecord};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config: EngineConfig,
    pub today: NaiveDate,
    pub scenario: Option<String>,
    pub seed: Option<u64>,
}

/// The inputs the run consumed, embedded so replay is self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceInputs {
    pub raw: RawInput,
    pub policy: PolicyStore,
    pub baselines: AnomalyBaseline,
    pub bank: ExemplarBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub trace_id: String,
    pub header: TraceHeader,
    pub inputs: TraceInputs,
    pub task: TaskRecord,
    pub candidates: Vec<Plan>,
    pub selection: SelectionDecision,
    pub graph_nodes: Vec<crate::executor::CompiledNode>,
    pub static_edges: Vec<(String, String)>,
    pub injected_edges: Vec<InjectedEdge>,
    pub guard_events: Vec<GuardEvent>,
    pub events: Vec<NodeEvent>,
    pub statuses: BTreeMap<String, NodeStatus>,
    pub final_store: BTreeMap<String, crate::contracts::ValueMap>,
    pub repair: Option<RepairSummary>,
    pub violations: Vec<Violation>,
    pub anomalies: Vec<AnomalyFlag>,
    pub risk: RiskAssessment,
    pub disposition: RoutingDisposition,
    pub decision: DecisionObject,
    pub started_ms: u128,
    pub ended_ms: u128,
}

impl ExecutionTrace {
    pub fn from_result(
        result: &PipelineResult,
        raw: &RawInput,
        env: &EngineEnv,
        trace_id: &str,
        scenario: Option<String>,
        seed: Option<u64>,
        started_ms: u128,
        ended_ms: u128,
    ) -> Self {
        ExecutionTrace {
            trace_id: trace_id.to_string(),
            header: TraceHeader {
                config: env.config.clone(),
                today: env.today,
                scenario,
                seed,
            },
            inputs: TraceInputs {
                raw: raw.clone(),
                policy: env.policy.clone(),
                baselines: env.baselines.clone(),
                bank: env.bank.clone(),
            },
            task: result.task.clone(),
            candidates: result.candidates.clone(),
            selection: result.selection.clone(),
            graph_nodes: result.state.nodes.clone(),
            static_edges: result.chosen.edges.clone(),
            injected_edges: result.state.injected_edges.clone(),
            guard_events: result.state.guard_events.clone(),
            events: result.events.clone(),
            statuses: result.state.statuses.clone(),
            final_store: result.state.value_store.clone(),
            repair: result.repair.clone(),
            violations: result.violations.clone(),
            anomalies: result.anomalies.clone(),
            risk: result.risk.clone(),
            disposition: result.disposition.clone(),
            decision: result.decision.clone(),
            started_ms,
            ended_ms,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("trace serializes"))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, Box<dyn std::error::Error>> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub trace_id: String,
    pub decision_match: bool,
    pub store_match: bool,
    pub replayed_decision: DecisionObject,
    pub mismatch_detail: Option<String>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.decision_match && self.store_match
    }
}

/// Re-executes the trace's inputs in serialized mode and checks that the
/// decision object and final value store come out identical.
pub fn replay(trace: &ExecutionTrace) -> Result<ReplayReport, PipelineError> {
    let env = EngineEnv {
        registry: crate::backends::standard_registry_with_bank(std::sync::Arc::new(
            trace.inputs.bank.clone(),
        )),
        config: trace.header.config.clone(),
        bank: trace.inputs.bank.clone(),
        policy: trace.inputs.policy.clone(),
        baselines: trace.inputs.baselines.clone(),
        today: trace.header.today,
    };
    let mut ledger = RunLedger::default();
    let result = run_document(
        &trace.inputs.raw,
        &env,
        &mut ledger,
        &trace.trace_id,
        ExecutionMode::Serialized,
    )?;

    let decision_a = serde_json::to_string(&trace.decision).expect("decision serializes");
    let decision_b = serde_json::to_string(&result.decision).expect("decision serializes");
    let store_a = serde_json::to_string(&trace.final_store).expect("store serializes");
    let store_b = serde_json::to_string(&result.state.value_store).expect("store serializes");

    let decision_match = decision_a == decision_b;
    let store_match = store_a == store_b;
    let mismatch_detail = if !decision_match {
        Some(format!("decision differs: {decision_a} vs {decision_b}"))
    } else if !store_match {
        Some(first_store_diff(&trace.final_store, &result.state.value_store))
    } else {
        None
    };
    Ok(ReplayReport {
        trace_id: trace.trace_id.clone(),
        decision_match,
        store_match,
        replayed_decision: result.decision,
        mismatch_detail,
    })
}

fn first_store_diff(
    a: &BTreeMap<String, crate::contracts::ValueMap>,
    b: &BTreeMap<String, crate::contracts::ValueMap>,
) -> String {
    for (node, slots) in a {
        match b.get(node) {
            None => return format!("node {node} missing from replayed store"),
            Some(other) => {
                for (slot, v) in slots {
                    let w = other.get(slot).cloned().unwrap_or(Value::Null);
                    if *v != w {
                        return format!("node {node} slot {slot} differs");
                    }
                }
            }
        }
    }
    for node in b.keys() {
        if !a.contains_key(node) {
            return format!("replayed store has extra node {node}");
        }
    }
    "stores differ in ordering only".to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::governance::PolicyRecord;
    use crate::money::Amount;
    use crate::task::InputKind;

    fn env() -> EngineEnv {
        let mut env = EngineEnv::standard(NaiveDate::from_ymd_opt(2026, 3, 2).unwrap());
        env.policy
            .insert(PolicyRecord {
                vendor: "Acme Corp".into(),
                sector: "manufacturing".into(),
                currency: "USD".into(),
                threshold: Amount::from_cents(1_000_000),
                terms: "net30".into(),
            })
            .unwrap();
        env
    }

    fn raw() -> RawInput {
        RawInput {
            kind: InputKind::File,
            payload: [
                "INVOICE NUMBER: INV-2026-0042",
                "ISSUE DATE: 2026-02-10",
                "DUE DATE: 2026-02-28",
                "VENDOR: Acme Corp",
                "CURRENCY: USD",
                "TOTAL: 1234.56",
                "ITEM: Widgets | 1000.00",
                "ITEM: Freight | 234.56",
            ]
            .join("\n"),
            filename: Some("inv_001.txt".into()),
            channel: "upload".into(),
            received_at: "2026-03-02T09:00:00Z".into(),
            instruction: None,
        }
    }

    #[test]
    fn trace_round_trips_and_replays_identically() {
        let env = env();
        let mut ledger = RunLedger::default();
        let raw = raw();
        let result = run_document(&raw, &env, &mut ledger, "trace-1", ExecutionMode::Concurrent).unwrap();
        let trace = ExecutionTrace::from_result(&result, &raw, &env, "trace-1", None, Some(7), 0, 1);

        let json = serde_json::to_string(&trace).unwrap();
        let loaded: ExecutionTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(loaded, trace);

        let report = replay(&loaded).unwrap();
        assert!(report.matches(), "{:?}", report.mismatch_detail);
        assert_eq!(report.replayed_decision, trace.decision);
    }
}
