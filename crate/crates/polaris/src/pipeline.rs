//! The end-to-end flow for one input: normalize, synthesize candidates,
//! select, compile, execute under guards, route findings, decide.

use crate::backends::{decide, DecisionKind, DecisionObject, RationaleItem};
use crate::config::EngineConfig;
use crate::contracts::{agent_ids, ExecutionContext, Registry};
use crate::executor::{
    compile, CompileError, ExecutionMode, ExecutionState, Executor, NodeEvent, NodeStatus,
};
use crate::extraction::{ExtractedInvoice, SyntheticDocument};
use crate::governance::{
    risk_assess, route, AnomalyBaseline, AnomalyFlag, PolicyStore, RiskAssessment, RoutingContext,
    RoutingDisposition, RunLedger, Violation,
};
use crate::planner::{generate_candidates_with, ExemplarBank, Plan, PlannerError};
use crate::selector::{select, AllCandidatesRejectedError, RubricWeights, SelectionDecision};
use crate::task::{normalize, CategorizationTable, NormalizationError, RawInput, TaskRecord, TaskType};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Everything a run needs, built once and shared read-only.
pub struct EngineEnv {
    pub registry: Registry,
    pub config: EngineConfig,
    pub bank: ExemplarBank,
    pub policy: PolicyStore,
    pub baselines: AnomalyBaseline,
    pub today: NaiveDate,
}

impl EngineEnv {
    pub fn standard(today: NaiveDate) -> Self {
        EngineEnv {
            registry: crate::backends::standard_registry(),
            config: EngineConfig::default(),
            bank: ExemplarBank::standard(),
            policy: PolicyStore::default(),
            baselines: AnomalyBaseline::default(),
            today,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("normalization: {0}")]
    Normalization(#[from] NormalizationError),
    #[error("planning: {0}")]
    Planning(#[from] PlannerError),
    #[error("selection: {0}")]
    Selection(#[from] AllCandidatesRejectedError),
    #[error("compile: {0}")]
    Compile(#[from] CompileError),
}

/// Summary of the parser's repair loop, lifted from the execution store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairSummary {
    pub verdict: String,
    pub iterations: usize,
    pub parser_calls: u32,
    pub validator_calls: u32,
    pub trace: Value,
}

impl RepairSummary {
    pub fn passed(&self) -> bool {
        self.verdict == "pass"
    }
}

#[derive(Debug)]
pub struct PipelineResult {
    pub task: TaskRecord,
    pub candidates: Vec<Plan>,
    pub selection: SelectionDecision,
    pub chosen: Plan,
    pub state: ExecutionState,
    pub events: Vec<NodeEvent>,
    pub invoice: ExtractedInvoice,
    pub repair: Option<RepairSummary>,
    pub violations: Vec<Violation>,
    pub anomalies: Vec<AnomalyFlag>,
    pub risk: RiskAssessment,
    pub disposition: RoutingDisposition,
    pub decision: DecisionObject,
}

fn node_output<'a>(state: &'a ExecutionState, agent: &str, slot: &str) -> Option<&'a Value> {
    let node = state.nodes.iter().find(|n| n.agent == agent)?;
    state.value_store.get(&node.id)?.get(slot)
}

fn parse_output<T: serde::de::DeserializeOwned>(
    state: &ExecutionState,
    agent: &str,
    slot: &str,
) -> Option<T> {
    node_output(state, agent, slot).and_then(|v| serde_json::from_value(v.clone()).ok())
}

/// Processes one raw input end to end. Node failures inside the DAG never
/// surface as errors here; they resolve into hold/reject decisions.
pub fn run_document(
    raw: &RawInput,
    env: &EngineEnv,
    ledger: &mut RunLedger,
    trace_id: &str,
    mode: ExecutionMode,
) -> Result<PipelineResult, PipelineError> {
    let task = normalize(raw, &CategorizationTable::default())?;
    let document = (task.task_type == TaskType::DocumentParsing)
        .then(|| SyntheticDocument::from_text(&raw.payload));

    let candidates = generate_candidates_with(
        &task,
        &env.bank,
        &env.registry,
        env.config.candidate_count,
        &env.config,
    )?;
    let selection = select(
        &candidates,
        &task,
        &RubricWeights::from(&env.config),
        &env.registry,
        &env.config,
    )?;
    let chosen = candidates[selection.chosen_index].clone();
    let graph = compile(&chosen, &env.registry)?;

    let ctx = ExecutionContext {
        registry: &env.registry,
        config: &env.config,
        policy: &env.policy,
        baselines: &env.baselines,
        task: &task,
        document: document.as_ref(),
        today: env.today,
    };
    let executor = Executor::new(mode, env.config.concurrency_limit);
    let (state, events) = executor.run(&graph, &ctx);

    // Findings and artifacts out of the value store.
    let violations: Vec<Violation> =
        parse_output(&state, agent_ids::POLICY_RETRIEVAL, "violations").unwrap_or_default();
    let anomalies: Vec<AnomalyFlag> =
        parse_output(&state, agent_ids::ANOMALY_DETECTION, "anomalies").unwrap_or_default();
    let invoice: ExtractedInvoice = parse_output(&state, agent_ids::DATA_VALIDATOR, "validated")
        .or_else(|| parse_output(&state, agent_ids::DOCUMENT_PARSER, "invoice"))
        .unwrap_or_default();
    let repair = node_output(&state, agent_ids::DOCUMENT_PARSER, "repair_trace").map(|v| {
        RepairSummary {
            verdict: v
                .get("verdict")
                .and_then(Value::as_str)
                .unwrap_or("fallback")
                .to_string(),
            iterations: v
                .get("iterations")
                .and_then(Value::as_array)
                .map_or(0, Vec::len),
            parser_calls: v.get("parser_calls").and_then(Value::as_u64).unwrap_or(0) as u32,
            validator_calls: v.get("validator_calls").and_then(Value::as_u64).unwrap_or(0) as u32,
            trace: v.clone(),
        }
    });
    let risk = risk_assess(
        &violations,
        &anomalies,
        &env.config.risk_weights,
        env.config.risk_tiers,
    );

    // Routing playbook over the findings.
    let policy_record = parse_output::<crate::governance::PolicyLookup>(
        &state,
        agent_ids::POLICY_RETRIEVAL,
        "lookup",
    )
    .and_then(|l| l.record);
    let disposition = route(
        &violations,
        &anomalies,
        &invoice,
        &RoutingContext {
            policy: policy_record.as_ref(),
            weights: &env.config.risk_weights,
            tiers: env.config.risk_tiers,
        },
        ledger,
    );

    // The decision: the approval agent's word when it ran, otherwise the
    // engine synthesizes the safe disposition from the same rule.
    let repair_passed = repair.as_ref().is_none_or(RepairSummary::passed);
    let approval_ran = state
        .nodes
        .iter()
        .find(|n| n.agent == agent_ids::APPROVAL)
        .map(|n| state.status(&n.id));
    let decision = match approval_ran {
        Some(NodeStatus::Done) => {
            let value = node_output(&state, agent_ids::APPROVAL, "decision")
                .cloned()
                .unwrap_or(Value::Null);
            let kind: DecisionKind = value
                .get("decision")
                .and_then(|d| serde_json::from_value(d.clone()).ok())
                .unwrap_or(DecisionKind::Hold);
            let rationale: Vec<RationaleItem> = value
                .get("rationale")
                .and_then(|r| serde_json::from_value(r.clone()).ok())
                .unwrap_or_default();
            DecisionObject {
                decision: kind,
                rationale,
                trace_id: trace_id.to_string(),
            }
        }
        _ => {
            let (kind, mut rationale) = decide(&violations, &anomalies, repair_passed, &env.config);
            // Approve is unreachable without the approval agent's sign-off.
            let kind = if kind == DecisionKind::Approve && approval_ran.is_some() {
                rationale.push(RationaleItem {
                    kind: "engine".into(),
                    reference: "approval_unavailable".into(),
                    detail: "approval stage did not complete; holding".into(),
                });
                DecisionKind::Hold
            } else {
                kind
            };
            DecisionObject {
                decision: kind,
                rationale,
                trace_id: trace_id.to_string(),
            }
        }
    };

    // Commit this document to the run ledger for future duplicate checks.
    if let (Some(vendor), Some(number)) = (&invoice.vendor, &invoice.invoice_number) {
        ledger.history_appends.push(crate::governance::HistoryEntry {
            vendor: vendor.clone(),
            invoice_number: number.clone(),
            date: invoice.issue_date.unwrap_or(env.today),
        });
    }

    Ok(PipelineResult {
        task,
        candidates,
        selection,
        chosen,
        state,
        events,
        invoice,
        repair,
        violations,
        anomalies,
        risk,
        disposition,
        decision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::Field;
    use crate::governance::{PolicyRecord, ViolationKind};
    use crate::money::Amount;
    use crate::task::InputKind;

    fn clean_doc_text() -> String {
        [
            "INVOICE NUMBER: INV-2026-0042",
            "ISSUE DATE: 2026-02-10",
            "DUE DATE: 2026-02-28",
            "VENDOR: Acme Corp",
            "CURRENCY: USD",
            "TOTAL: 1234.56",
            "ITEM: Widgets | 1000.00",
            "ITEM: Freight | 234.56",
        ]
        .join("\n")
    }

    fn env_with_acme() -> EngineEnv {
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
        env.baselines.n_min = 5;
        env.baselines.vendors.insert(
            "acme corp".into(),
            vec![120_000, 125_000, 118_000, 130_000, 122_000]
                .into_iter()
                .map(Amount::from_cents)
                .collect(),
        );
        env
    }

    fn raw_invoice(payload: String) -> RawInput {
        RawInput {
            kind: InputKind::File,
            payload,
            filename: Some("inv_001.txt".into()),
            channel: "upload".into(),
            received_at: "2026-03-02T09:00:00Z".into(),
            instruction: None,
        }
    }

    #[test]
    fn clean_known_vendor_invoice_approves() {
        let env = env_with_acme();
        let mut ledger = RunLedger::default();
        let result = run_document(
            &raw_invoice(clean_doc_text()),
            &env,
            &mut ledger,
            "t-0",
            ExecutionMode::Concurrent,
        )
        .unwrap();
        assert_eq!(result.decision.decision, DecisionKind::Approve, "{:?}", result.decision);
        assert!(result.violations.is_empty());
        assert!(result.anomalies.is_empty());
        assert!(result.repair.as_ref().unwrap().passed());
        assert_eq!(result.invoice.total, Some(Amount::from_cents(123456)));
        // History committed for future duplicate detection.
        assert_eq!(ledger.history_appends.len(), 1);
    }

    #[test]
    fn unknown_vendor_rejects_and_gates_approval() {
        let mut env = env_with_acme();
        env.policy.records.clear();
        let mut ledger = RunLedger::default();
        let result = run_document(
            &raw_invoice(clean_doc_text()),
            &env,
            &mut ledger,
            "t-1",
            ExecutionMode::Concurrent,
        )
        .unwrap();
        assert_eq!(result.decision.decision, DecisionKind::Reject);
        assert!(result
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::UnknownVendor && v.blocking));
        assert!(result
            .decision
            .rationale
            .iter()
            .any(|r| r.reference == "unknown_vendor"));
        // The side-effect gate kept approval from dispatching.
        let approval = result
            .state
            .nodes
            .iter()
            .find(|n| n.agent == agent_ids::APPROVAL)
            .unwrap();
        assert!(matches!(
            result.state.status(&approval.id),
            NodeStatus::Skipped(crate::executor::SkipReason::GateBlocked)
        ));
    }

    #[test]
    fn destroyed_vendor_falls_back_and_holds() {
        let env = env_with_acme();
        let mut ledger = RunLedger::default();
        let mut lines: Vec<String> = clean_doc_text().lines().map(String::from).collect();
        lines[3] = String::new();
        let result = run_document(
            &raw_invoice(lines.join("\n")),
            &env,
            &mut ledger,
            "t-2",
            ExecutionMode::Concurrent,
        )
        .unwrap();
        assert_eq!(result.decision.decision, DecisionKind::Hold);
        let repair = result.repair.as_ref().unwrap();
        assert!(!repair.passed());
        assert!(repair.validator_calls <= env.config.repair_budget + 1);
        assert!(result
            .decision
            .rationale
            .iter()
            .any(|r| r.kind == "repair" && r.reference == "fallback"));
    }

    #[test]
    fn injected_outlier_stages_extra_verification_and_holds() {
        let env = env_with_acme();
        let mut ledger = RunLedger::default();
        let mut lines: Vec<String> = clean_doc_text().lines().map(String::from).collect();
        // Far outside the vendor baseline (z >> 3.5) yet under the policy
        // threshold, so the anomaly path is isolated.
        lines[5] = "TOTAL: 5000.00".into();
        lines[6] = "ITEM: Widgets | 5000.00".into();
        lines.remove(7);
        let result = run_document(
            &raw_invoice(lines.join("\n")),
            &env,
            &mut ledger,
            "t-3",
            ExecutionMode::Concurrent,
        )
        .unwrap();
        assert_eq!(result.anomalies.len(), 1);
        assert!(result.anomalies[0].score > env.config.k_mad);
        assert_eq!(result.decision.decision, DecisionKind::Hold);
        // The guard staged extra verification ahead of the sinks.
        assert!(result
            .state
            .nodes
            .iter()
            .any(|n| n.agent == agent_ids::EXTRA_VERIFICATION));
        assert!(!result.state.injected_edges.is_empty());
        let xv = result
            .state
            .nodes
            .iter()
            .find(|n| n.agent == agent_ids::EXTRA_VERIFICATION)
            .unwrap();
        let approval = result
            .state
            .nodes
            .iter()
            .find(|n| n.agent == agent_ids::APPROVAL)
            .unwrap();
        assert!(result
            .state
            .injected_edges
            .iter()
            .any(|e| e.from == xv.id && e.to == approval.id));
        assert_eq!(result.state.status(&xv.id), NodeStatus::Done);
    }

    #[test]
    fn month_end_batch_schedules_before_reporting() {
        let env = env_with_acme();
        let mut ledger = RunLedger::default();
        let mut raw = raw_invoice(clean_doc_text());
        raw.received_at = "2026-03-30T09:00:00Z".into();
        let result = run_document(&raw, &env, &mut ledger, "t-4", ExecutionMode::Concurrent).unwrap();
        let scheduler = result
            .state
            .nodes
            .iter()
            .find(|n| n.agent == agent_ids::SCHEDULER)
            .expect("month-end plan stages the scheduler");
        assert_eq!(result.state.status(&scheduler.id), NodeStatus::Done);
        let sched_done = result
            .events
            .iter()
            .position(|e| e.node == scheduler.id && e.phase == crate::executor::EventPhase::Completed)
            .unwrap();
        let report_node = result
            .state
            .nodes
            .iter()
            .find(|n| n.agent == agent_ids::REPORT_GENERATOR)
            .unwrap();
        let report_dispatch = result
            .events
            .iter()
            .position(|e| e.node == report_node.id && e.phase == crate::executor::EventPhase::Dispatched)
            .unwrap();
        assert!(sched_done < report_dispatch);
    }

    #[test]
    fn serialized_and_concurrent_modes_agree() {
        let env = env_with_acme();
        for payload in [clean_doc_text(), {
            let mut lines: Vec<String> = clean_doc_text().lines().map(String::from).collect();
            lines[5] = "TOTAL: 1.234,56".into();
            lines.join("\n")
        }] {
            let mut ledger_a = RunLedger::default();
            let mut ledger_b = RunLedger::default();
            let a = run_document(
                &raw_invoice(payload.clone()),
                &env,
                &mut ledger_a,
                "t-5",
                ExecutionMode::Concurrent,
            )
            .unwrap();
            let b = run_document(
                &raw_invoice(payload),
                &env,
                &mut ledger_b,
                "t-5",
                ExecutionMode::Serialized,
            )
            .unwrap();
            assert_eq!(
                serde_json::to_string(&a.state.value_store).unwrap(),
                serde_json::to_string(&b.state.value_store).unwrap()
            );
            assert_eq!(
                serde_json::to_string(&a.decision).unwrap(),
                serde_json::to_string(&b.decision).unwrap()
            );
        }
    }

    #[test]
    fn repaired_decimal_swap_still_approves() {
        let env = env_with_acme();
        let mut ledger = RunLedger::default();
        let mut lines: Vec<String> = clean_doc_text().lines().map(String::from).collect();
        lines[5] = "TOTAL: 1.234,56".into();
        let result = run_document(
            &raw_invoice(lines.join("\n")),
            &env,
            &mut ledger,
            "t-6",
            ExecutionMode::Concurrent,
        )
        .unwrap();
        let repair = result.repair.as_ref().unwrap();
        assert!(repair.passed());
        assert_eq!(repair.iterations, 1);
        assert_eq!(result.invoice.total, Some(Amount::from_cents(123456)));
        assert_eq!(result.invoice.confidence[&Field::Total], 0.85);
        assert_eq!(result.decision.decision, DecisionKind::Approve);
    }
}
