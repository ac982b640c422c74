//! Deterministic rule-based backends for the standard agent catalog, and
//! the registry builder that wires them up.
//!
//! Every backend is a pure function of its inputs and the shared run
//! context, so runs replay bit-for-bit. Swapping any of these for a model-
//! backed implementation only requires satisfying the same spec contract.

use crate::contracts::{
    agent_ids, types, AgentBackend, AgentSpec, BackendError, Category, Condition, EligibilityRule,
    ExecutionContext, PredicateName, Registry, Slot, TypeGraph, ValueMap,
};
use crate::extraction::{repair_loop, validate, ExtractedInvoice, RepairOutcome};
use crate::governance::{
    canonical_vendor, check_violations, detect_anomalies, retrieve_policy, risk_assess,
    AnomalyFlag, RiskTier, Violation,
};
use crate::planner::ExemplarBank;
use crate::selector::{select, RubricWeights};
use crate::task::{normalize, CategorizationTable, RawInput, TaskRecord};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Decisions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Approve,
    Hold,
    Reject,
}

/// One structured rationale entry tied to a policy clause, anomaly
/// evidence, repair outcome, or risk tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleItem {
    pub kind: String,
    pub reference: String,
    pub detail: String,
}

/// The decision-grade artifact for one processed input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionObject {
    pub decision: DecisionKind,
    pub rationale: Vec<RationaleItem>,
    pub trace_id: String,
}

/// The single decision rule used by the approval agent and by the engine's
/// fallback synthesis. Approve requires a passed extraction, zero blocking
/// violations, and an auto-approve risk tier; anything blocking rejects;
/// everything else holds for review.
pub fn decide(
    violations: &[Violation],
    anomalies: &[AnomalyFlag],
    repair_passed: bool,
    cfg: &crate::config::EngineConfig,
) -> (DecisionKind, Vec<RationaleItem>) {
    let mut rationale = Vec::new();
    for v in violations {
        rationale.push(RationaleItem {
            kind: "policy_clause".into(),
            reference: v.kind.rule_id().into(),
            detail: serde_json::to_string(&v.evidence).unwrap_or_default(),
        });
    }
    for a in anomalies {
        rationale.push(RationaleItem {
            kind: "anomaly_evidence".into(),
            reference: a.kind.rule_id().into(),
            detail: format!("field {:?} score {:.4}", a.field, a.score),
        });
    }
    let assessment = risk_assess(violations, anomalies, &cfg.risk_weights, cfg.risk_tiers);
    rationale.push(RationaleItem {
        kind: "risk_tier".into(),
        reference: format!("{:?}", assessment.tier),
        detail: format!("score {:.2}", assessment.score),
    });
    if !repair_passed {
        rationale.push(RationaleItem {
            kind: "repair".into(),
            reference: "fallback".into(),
            detail: "extraction never passed validation; safe lower-coverage path".into(),
        });
    }

    let blocking = violations.iter().any(|v| v.blocking);
    let decision = if blocking || assessment.tier == RiskTier::Block {
        DecisionKind::Reject
    } else if !repair_passed {
        DecisionKind::Hold
    } else if assessment.tier == RiskTier::Review
        || !violations.is_empty()
        || !anomalies.is_empty()
    {
        DecisionKind::Hold
    } else {
        DecisionKind::Approve
    };
    (decision, rationale)
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn parse_slot<T: serde::de::DeserializeOwned>(inputs: &ValueMap, slot: &str) -> Option<T> {
    inputs
        .get(slot)
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}

fn require_invoice(agent: &str, inputs: &ValueMap) -> Result<ExtractedInvoice, BackendError> {
    parse_slot(inputs, "invoice")
        .ok_or_else(|| BackendError::new(agent, "missing or malformed invoice input"))
}

fn to_value<T: Serialize>(agent: &str, v: &T) -> Result<Value, BackendError> {
    serde_json::to_value(v).map_err(|e| BackendError::new(agent, e.to_string()))
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Runs the bounded repair loop over the task's document.
pub struct DocumentParserBackend;

impl AgentBackend for DocumentParserBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        _inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let doc = ctx
            .document
            .ok_or_else(|| BackendError::new(&spec.id, "task carries no document"))?;
        let outcome = repair_loop(doc, ctx.config.confidence_threshold, ctx.config.repair_budget);
        let (invoice, trace, verdict) = match &outcome {
            RepairOutcome::Pass { invoice, trace } => (invoice, trace, "pass"),
            RepairOutcome::Fallback(f) => (&f.best_effort, &f.trace, "fallback"),
        };
        let mut trace_value = to_value(&spec.id, trace)?;
        trace_value["verdict"] = Value::String(verdict.to_string());
        let mut out = ValueMap::new();
        out.insert("invoice".into(), to_value(&spec.id, invoice)?);
        out.insert("repair_trace".into(), trace_value);
        Ok(out)
    }
}

/// Final validation gate: passes the record through as a validated invoice
/// or fails the node via its postcondition.
pub struct DataValidatorBackend;

impl AgentBackend for DataValidatorBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let invoice = require_invoice(&spec.id, inputs)?;
        let report = validate(&invoice, ctx.config.confidence_threshold);
        let mut out = ValueMap::new();
        out.insert("validated".into(), to_value(&spec.id, &invoice)?);
        out.insert("report".into(), to_value(&spec.id, &report)?);
        Ok(out)
    }
}

/// Policy store lookup plus the compiled violation predicates.
pub struct PolicyRetrievalBackend;

impl AgentBackend for PolicyRetrievalBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let invoice: ExtractedInvoice = match parse_slot(inputs, "invoice") {
            Some(inv) => inv,
            None => {
                // Ad-hoc query path: treat the instruction as the vendor.
                let query = ctx
                    .task
                    .instruction
                    .strip_prefix("vendor ")
                    .unwrap_or(&ctx.task.instruction)
                    .trim()
                    .to_string();
                ExtractedInvoice {
                    vendor: (!query.is_empty()).then_some(query),
                    ..ExtractedInvoice::default()
                }
            }
        };
        let lookup = retrieve_policy(invoice.vendor.as_deref().unwrap_or(""), ctx.policy);
        let violations = check_violations(
            &invoice,
            &lookup,
            ctx.policy,
            ctx.today,
            &ctx.config.policy_check(),
        );
        let mut out = ValueMap::new();
        out.insert("lookup".into(), to_value(&spec.id, &lookup)?);
        out.insert("violations".into(), to_value(&spec.id, &violations)?);
        Ok(out)
    }
}

/// Robust amount scoring with cohort/global fallback, plus date sanity.
pub struct AnomalyDetectionBackend;

impl AgentBackend for AnomalyDetectionBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let invoice = require_invoice(&spec.id, inputs)?;
        let sector = invoice
            .vendor
            .as_deref()
            .map(|v| retrieve_policy(v, ctx.policy))
            .and_then(|l| l.record.map(|r| r.sector));
        let flags = detect_anomalies(
            &invoice,
            ctx.baselines,
            sector.as_deref(),
            ctx.config.k_mad,
            ctx.today,
        );
        let mut out = ValueMap::new();
        out.insert("anomalies".into(), to_value(&spec.id, &flags)?);
        Ok(out)
    }
}

/// Matches the invoice against prior processed records.
pub struct RecordMatcherBackend;

impl AgentBackend for RecordMatcherBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let invoice = require_invoice(&spec.id, inputs)?;
        let vendor_key = invoice
            .vendor
            .as_deref()
            .map(canonical_vendor)
            .unwrap_or_default();
        let entries: Vec<&crate::governance::HistoryEntry> = ctx
            .policy
            .history
            .iter()
            .filter(|h| canonical_vendor(&h.vendor) == vendor_key)
            .collect();
        let exact = invoice.invoice_number.as_ref().and_then(|n| {
            entries.iter().find(|h| &h.invoice_number == n)
        });
        let report = json!({
            "reference_found": !entries.is_empty(),
            "reference_count": entries.len(),
            "exact_match": exact.map(|h| h.invoice_number.clone()),
            "discrepancies": Vec::<String>::new(),
        });
        let mut out = ValueMap::new();
        out.insert("match_report".into(), report);
        Ok(out)
    }
}

/// Graded risk scoring over whatever findings the plan routed here.
pub struct RiskControlBackend;

impl AgentBackend for RiskControlBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let violations: Vec<Violation> = parse_slot(inputs, "violations").unwrap_or_default();
        let anomalies: Vec<AnomalyFlag> = parse_slot(inputs, "anomalies").unwrap_or_default();
        let assessment = risk_assess(
            &violations,
            &anomalies,
            &ctx.config.risk_weights,
            ctx.config.risk_tiers,
        );
        let mut out = ValueMap::new();
        out.insert("risk".into(), to_value(&spec.id, &assessment)?);
        Ok(out)
    }
}

/// Stub connector: records the call it would have made.
pub struct ApiAccessBackend;

impl AgentBackend for ApiAccessBackend {
    fn invoke(
        &self,
        _spec: &AgentSpec,
        inputs: &ValueMap,
        _ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let invoice: Option<ExtractedInvoice> = parse_slot(inputs, "invoice");
        let receipt = json!({
            "system": "erp",
            "action": "record_invoice",
            "invoice_number": invoice.and_then(|i| i.invoice_number),
            "status": "recorded",
        });
        let mut out = ValueMap::new();
        out.insert("receipt".into(), receipt);
        Ok(out)
    }
}

/// Emits the batch window receipt for month-end and event-triggered work.
pub struct SchedulerBackend;

impl AgentBackend for SchedulerBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        _inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let receipt = json!({
            "window": ctx.task.timestamp,
            "batch": if ctx.task.is_month_end() { "month_end" } else { "triggered" },
            "triggered": true,
        });
        let mut out = ValueMap::new();
        out.insert("schedule".into(), to_value(&spec.id, &receipt)?);
        Ok(out)
    }
}

/// Aggregates upstream evidence into a reasoned approve/hold/reject.
pub struct ApprovalBackend;

impl AgentBackend for ApprovalBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let violations: Vec<Violation> = parse_slot(inputs, "violations").unwrap_or_default();
        let anomalies: Vec<AnomalyFlag> = parse_slot(inputs, "anomalies").unwrap_or_default();
        // Reaching this node means the validation gate passed.
        let (decision, rationale) = decide(&violations, &anomalies, true, ctx.config);
        let value = json!({
            "decision": decision,
            "rationale": rationale,
        });
        let mut out = ValueMap::new();
        out.insert("decision".into(), to_value(&spec.id, &value)?);
        Ok(out)
    }
}

/// Human- and machine-readable run summary.
pub struct ReportGeneratorBackend;

impl AgentBackend for ReportGeneratorBackend {
    fn invoke(
        &self,
        _spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let violations: Vec<Violation> = parse_slot(inputs, "violations").unwrap_or_default();
        let anomalies: Vec<AnomalyFlag> = parse_slot(inputs, "anomalies").unwrap_or_default();
        let decision: Option<Value> = inputs.get("decision").cloned();
        let report = json!({
            "task_type": ctx.task.task_type,
            "origin": ctx.task.origin,
            "violation_count": violations.len(),
            "anomaly_count": anomalies.len(),
            "decision": decision,
            "schedule": inputs.get("schedule").cloned(),
        });
        let mut out = ValueMap::new();
        out.insert("report".into(), report);
        Ok(out)
    }
}

/// Re-runs validator rules and the record match when an anomaly guard
/// staged extra verification.
pub struct ExtraVerificationBackend;

impl AgentBackend for ExtraVerificationBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let invoice = require_invoice(&spec.id, inputs)?;
        let report = validate(&invoice, ctx.config.confidence_threshold);
        let anomalies: Vec<AnomalyFlag> = parse_slot(inputs, "anomalies").unwrap_or_default();
        let vendor_known = invoice
            .vendor
            .as_deref()
            .is_some_and(|v| retrieve_policy(v, ctx.policy).exists);
        let verification = json!({
            "verdict": report.verdict,
            "revalidated_rules": report.failed_rules.len(),
            "anomalies_reviewed": anomalies.len(),
            "vendor_on_record": vendor_known,
        });
        let mut out = ValueMap::new();
        out.insert("verification".into(), to_value(&spec.id, &verification)?);
        Ok(out)
    }
}

/// Canonical input normalization behind the agent interface.
pub struct InputNormalizerBackend;

impl AgentBackend for InputNormalizerBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        _ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let raw: RawInput = parse_slot(inputs, "raw")
            .ok_or_else(|| BackendError::new(&spec.id, "missing raw input"))?;
        let task = normalize(&raw, &CategorizationTable::default())
            .map_err(|e| BackendError::new(&spec.id, e.to_string()))?;
        let mut out = ValueMap::new();
        out.insert("task".into(), to_value(&spec.id, &task)?);
        Ok(out)
    }
}

/// Candidate synthesis behind the agent interface.
pub struct CoAPlannerBackend {
    pub bank: Arc<ExemplarBank>,
}

impl AgentBackend for CoAPlannerBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let task: TaskRecord = parse_slot(inputs, "task")
            .ok_or_else(|| BackendError::new(&spec.id, "missing task input"))?;
        let candidates = crate::planner::generate_candidates_with(
            &task,
            &self.bank,
            ctx.registry,
            ctx.config.candidate_count,
            ctx.config,
        )
        .map_err(|e| BackendError::new(&spec.id, e.to_string()))?;
        let mut out = ValueMap::new();
        out.insert("candidates".into(), to_value(&spec.id, &candidates)?);
        Ok(out)
    }
}

/// Rubric selection behind the agent interface.
pub struct ReasoningAgentBackend;

impl AgentBackend for ReasoningAgentBackend {
    fn invoke(
        &self,
        spec: &AgentSpec,
        inputs: &ValueMap,
        ctx: &ExecutionContext<'_>,
    ) -> Result<ValueMap, BackendError> {
        let task: TaskRecord = parse_slot(inputs, "task")
            .ok_or_else(|| BackendError::new(&spec.id, "missing task input"))?;
        let candidates: Vec<crate::planner::Plan> = parse_slot(inputs, "candidates")
            .ok_or_else(|| BackendError::new(&spec.id, "missing candidates input"))?;
        let decision = select(
            &candidates,
            &task,
            &RubricWeights::from(ctx.config),
            ctx.registry,
            ctx.config,
        )
        .map_err(|e| BackendError::new(&spec.id, e.to_string()))?;
        let mut out = ValueMap::new();
        out.insert("selection".into(), to_value(&spec.id, &decision)?);
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

/// Specs for the thirteen catalog agents.
pub fn core_agent_specs() -> Vec<AgentSpec> {
    let spec = |id: &str,
                category: Category,
                inputs: Vec<Slot>,
                outputs: Vec<Slot>,
                postconditions: Vec<Condition>,
                side_effecting: bool,
                sod_group: &str,
                eligibility: EligibilityRule| AgentSpec {
        id: id.into(),
        category,
        inputs,
        outputs,
        preconditions: vec![],
        postconditions,
        side_effecting,
        sod_group: sod_group.into(),
        eligibility,
    };
    vec![
        spec(
            agent_ids::INPUT_NORMALIZER,
            Category::Normalizer,
            vec![Slot::required("raw", types::RAW_DOCUMENT)],
            vec![Slot::required("task", types::TASK_RECORD)],
            vec![Condition::new(PredicateName::NonEmpty, "task")],
            false,
            "",
            EligibilityRule::Always,
        ),
        spec(
            agent_ids::COA_PLANNER,
            Category::Planning,
            vec![Slot::required("task", types::TASK_RECORD)],
            vec![Slot::required("candidates", types::CANDIDATE_SET)],
            vec![Condition::new(PredicateName::NonEmpty, "candidates")],
            false,
            "",
            EligibilityRule::Always,
        ),
        spec(
            agent_ids::REASONING_AGENT,
            Category::Selection,
            vec![
                Slot::required("task", types::TASK_RECORD),
                Slot::required("candidates", types::CANDIDATE_SET),
            ],
            vec![Slot::required("selection", types::SELECTION)],
            vec![],
            false,
            "",
            EligibilityRule::Always,
        ),
        spec(
            agent_ids::DOCUMENT_PARSER,
            Category::Extractor,
            vec![Slot::required("task", types::TASK_RECORD)],
            vec![
                Slot::required("invoice", types::PARSED_INVOICE),
                Slot::required("repair_trace", types::REPAIR_TRACE),
            ],
            vec![
                Condition::new(PredicateName::NonEmpty, "invoice"),
                Condition::new(PredicateName::ConfidenceBounded, "invoice"),
            ],
            false,
            "",
            EligibilityRule::RequiresFile,
        ),
        spec(
            agent_ids::DATA_VALIDATOR,
            Category::Extractor,
            vec![Slot::required("invoice", types::PARSED_INVOICE)],
            vec![
                Slot::required("validated", types::VALIDATED_INVOICE),
                Slot::required("report", types::VALIDATOR_REPORT),
            ],
            vec![
                Condition::new(PredicateName::ValidatorPass, "report"),
                Condition::new(PredicateName::ConfidenceBounded, "validated"),
                Condition::new(PredicateName::DateValid, "validated"),
                Condition::new(PredicateName::CurrencyValid, "validated"),
            ],
            false,
            "",
            EligibilityRule::RequiresFile,
        ),
        spec(
            agent_ids::RECORD_MATCHER,
            Category::Processor,
            vec![Slot::required("invoice", types::VALIDATED_INVOICE)],
            vec![Slot::required("match_report", types::MATCH_REPORT)],
            vec![],
            false,
            "",
            EligibilityRule::Always,
        ),
        spec(
            agent_ids::POLICY_RETRIEVAL,
            Category::Processor,
            vec![
                Slot::optional("invoice", types::VALIDATED_INVOICE),
                Slot::optional("task", types::TASK_RECORD),
            ],
            vec![
                Slot::required("lookup", types::POLICY_LOOKUP),
                Slot::required("violations", types::VIOLATION_SET),
            ],
            vec![Condition::new(PredicateName::NonEmpty, "lookup")],
            false,
            "",
            EligibilityRule::Always,
        ),
        spec(
            agent_ids::ANOMALY_DETECTION,
            Category::Processor,
            vec![Slot::required("invoice", types::VALIDATED_INVOICE)],
            vec![Slot::required("anomalies", types::ANOMALY_SET)],
            vec![],
            false,
            "",
            EligibilityRule::Always,
        ),
        spec(
            agent_ids::RISK_CONTROL,
            Category::Processor,
            vec![
                Slot::optional("violations", types::VIOLATION_SET),
                Slot::optional("anomalies", types::ANOMALY_SET),
                Slot::optional("match_report", types::MATCH_REPORT),
            ],
            vec![Slot::required("risk", types::RISK_ASSESSMENT)],
            vec![Condition::new(PredicateName::NonEmpty, "risk")],
            false,
            "",
            EligibilityRule::Always,
        ),
        spec(
            agent_ids::API_ACCESS,
            Category::Processor,
            vec![
                Slot::required("invoice", types::VALIDATED_INVOICE),
                Slot::optional("lookup", types::POLICY_LOOKUP),
            ],
            vec![Slot::required("receipt", types::API_RECEIPT)],
            vec![Condition::new(PredicateName::NonEmpty, "receipt")],
            true,
            "external_disbursement",
            EligibilityRule::Always,
        ),
        spec(
            agent_ids::SCHEDULER,
            Category::Processor,
            vec![Slot::required("task", types::TASK_RECORD)],
            vec![Slot::required("schedule", types::SCHEDULE_RECEIPT)],
            vec![Condition::new(PredicateName::NonEmpty, "schedule")],
            true,
            "batch_scheduling",
            EligibilityRule::MonthEndOrEvent,
        ),
        spec(
            agent_ids::APPROVAL,
            Category::Reconciliation,
            vec![
                Slot::required("invoice", types::PARSED_INVOICE),
                Slot::optional("violations", types::VIOLATION_SET),
                Slot::optional("anomalies", types::ANOMALY_SET),
                Slot::optional("risk", types::RISK_ASSESSMENT),
                Slot::optional("verification", types::VERIFICATION_REPORT),
            ],
            vec![Slot::required("decision", types::DECISION)],
            vec![Condition::new(PredicateName::NonEmpty, "decision")],
            true,
            "approval_authority",
            EligibilityRule::Always,
        ),
        spec(
            agent_ids::REPORT_GENERATOR,
            Category::Reconciliation,
            vec![
                Slot::optional("task", types::TASK_RECORD),
                Slot::optional("invoice", types::PARSED_INVOICE),
                Slot::optional("violations", types::VIOLATION_SET),
                Slot::optional("anomalies", types::ANOMALY_SET),
                Slot::optional("risk", types::RISK_ASSESSMENT),
                Slot::optional("decision", types::DECISION),
                Slot::optional("schedule", types::SCHEDULE_RECEIPT),
                Slot::optional("verification", types::VERIFICATION_REPORT),
            ],
            vec![Slot::required("report", types::REPORT)],
            vec![Condition::new(PredicateName::NonEmpty, "report")],
            false,
            "",
            EligibilityRule::Always,
        ),
    ]
}

/// Catalog-extension agents, injectable at runtime.
pub fn extension_agent_specs() -> Vec<AgentSpec> {
    vec![AgentSpec {
        id: agent_ids::EXTRA_VERIFICATION.into(),
        category: Category::Processor,
        inputs: vec![
            Slot::required("invoice", types::PARSED_INVOICE),
            Slot::optional("anomalies", types::ANOMALY_SET),
        ],
        outputs: vec![Slot::required("verification", types::VERIFICATION_REPORT)],
        preconditions: vec![],
        postconditions: vec![Condition::new(PredicateName::NonEmpty, "verification")],
        side_effecting: false,
        sod_group: String::new(),
        eligibility: EligibilityRule::Always,
    }]
}

/// Backend for one catalog agent id.
pub fn backend_for(id: &str, bank: Arc<ExemplarBank>) -> Arc<dyn AgentBackend> {
    match id {
        agent_ids::INPUT_NORMALIZER => Arc::new(InputNormalizerBackend),
        agent_ids::COA_PLANNER => Arc::new(CoAPlannerBackend { bank }),
        agent_ids::REASONING_AGENT => Arc::new(ReasoningAgentBackend),
        agent_ids::DOCUMENT_PARSER => Arc::new(DocumentParserBackend),
        agent_ids::DATA_VALIDATOR => Arc::new(DataValidatorBackend),
        agent_ids::RECORD_MATCHER => Arc::new(RecordMatcherBackend),
        agent_ids::POLICY_RETRIEVAL => Arc::new(PolicyRetrievalBackend),
        agent_ids::ANOMALY_DETECTION => Arc::new(AnomalyDetectionBackend),
        agent_ids::RISK_CONTROL => Arc::new(RiskControlBackend),
        agent_ids::API_ACCESS => Arc::new(ApiAccessBackend),
        agent_ids::SCHEDULER => Arc::new(SchedulerBackend),
        agent_ids::APPROVAL => Arc::new(ApprovalBackend),
        agent_ids::REPORT_GENERATOR => Arc::new(ReportGeneratorBackend),
        agent_ids::EXTRA_VERIFICATION => Arc::new(ExtraVerificationBackend),
        other => panic!("no standard backend for agent {other:?}"),
    }
}

/// The standard registry: thirteen catalog agents plus the injectable
/// verification extension, all on deterministic backends.
pub fn standard_registry() -> Registry {
    standard_registry_with_bank(Arc::new(ExemplarBank::standard()))
}

pub fn standard_registry_with_bank(bank: Arc<ExemplarBank>) -> Registry {
    let mut registry = Registry::new(TypeGraph::standard());
    for spec in core_agent_specs().into_iter().chain(extension_agent_specs()) {
        let backend = backend_for(&spec.id, Arc::clone(&bank));
        registry.register(spec, backend).expect("standard catalog is consistent");
    }
    registry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EngineConfig;
    use crate::governance::{AnomalyBaseline, PolicyStore};
    use crate::task::{FileType, InputFormat, TaskType};

    #[test]
    fn thirteen_catalog_agents_register() {
        let mut registry = Registry::new(TypeGraph::standard());
        let bank = Arc::new(ExemplarBank::standard());
        for spec in core_agent_specs() {
            registry
                .register(spec.clone(), backend_for(&spec.id, Arc::clone(&bank)))
                .unwrap();
        }
        assert_eq!(registry.len(), 13);
        for id in [
            agent_ids::INPUT_NORMALIZER,
            agent_ids::COA_PLANNER,
            agent_ids::REASONING_AGENT,
            agent_ids::DOCUMENT_PARSER,
            agent_ids::DATA_VALIDATOR,
            agent_ids::RECORD_MATCHER,
            agent_ids::POLICY_RETRIEVAL,
            agent_ids::ANOMALY_DETECTION,
            agent_ids::RISK_CONTROL,
            agent_ids::API_ACCESS,
            agent_ids::SCHEDULER,
            agent_ids::APPROVAL,
            agent_ids::REPORT_GENERATOR,
        ] {
            assert!(registry.get(id).is_some(), "{id} missing");
        }
    }

    #[test]
    fn catalog_specs_satisfy_their_invariants() {
        for spec in core_agent_specs().into_iter().chain(extension_agent_specs()) {
            assert!(spec.invariants_hold(), "{} breaks invariants", spec.id);
        }
    }

    #[test]
    fn decide_is_clean_approve_only() {
        let cfg = EngineConfig::default();
        let (d, _) = decide(&[], &[], true, &cfg);
        assert_eq!(d, DecisionKind::Approve);
        let (d, _) = decide(&[], &[], false, &cfg);
        assert_eq!(d, DecisionKind::Hold);
    }

    #[test]
    fn decide_rejects_blocking_violations() {
        let cfg = EngineConfig::default();
        let v = Violation {
            kind: crate::governance::ViolationKind::UnknownVendor,
            evidence: Default::default(),
            blocking: true,
        };
        let (d, rationale) = decide(&[v], &[], true, &cfg);
        assert_eq!(d, DecisionKind::Reject);
        assert!(rationale.iter().any(|r| r.reference == "unknown_vendor"));
    }

    #[test]
    fn decide_holds_on_anomaly() {
        let cfg = EngineConfig::default();
        let a = AnomalyFlag {
            kind: crate::governance::AnomalyKind::Amount,
            field: crate::extraction::Field::Total,
            score: 9.0,
            source: Some(crate::governance::BaselineSource::Vendor),
            severity: crate::governance::Severity::Medium,
            evidence: Default::default(),
        };
        let (d, _) = decide(&[], &[a], true, &cfg);
        assert_eq!(d, DecisionKind::Hold);
    }

    #[test]
    fn normalizer_backend_round_trips_raw_input() {
        let registry = standard_registry();
        let config = EngineConfig::default();
        let policy = PolicyStore::default();
        let baselines = AnomalyBaseline::default();
        let task = TaskRecord {
            task_type: TaskType::UserCommand,
            input_format: InputFormat::Text,
            file_name: String::new(),
            file_type: FileType::None,
            timestamp: "2026-03-02T09:00:00Z".into(),
            origin: "chat".into(),
            instruction: "x".into(),
            meta: Default::default(),
        };
        let ctx = ExecutionContext {
            registry: &registry,
            config: &config,
            policy: &policy,
            baselines: &baselines,
            task: &task,
            document: None,
            today: chrono::NaiveDate::from_ymd_opt(2026, 3, 2).unwrap(),
        };
        let raw = RawInput {
            kind: crate::task::InputKind::File,
            payload: "body".into(),
            filename: Some("inv.pdf".into()),
            channel: "upload".into(),
            received_at: "2026-03-02T09:00:00Z".into(),
            instruction: None,
        };
        let mut inputs = ValueMap::new();
        inputs.insert("raw".into(), serde_json::to_value(&raw).unwrap());
        let spec = registry.get(agent_ids::INPUT_NORMALIZER).unwrap();
        let backend = registry.backend(agent_ids::INPUT_NORMALIZER).unwrap();
        let out = backend.invoke(spec, &inputs, &ctx).unwrap();
        let normalized: TaskRecord = serde_json::from_value(out["task"].clone()).unwrap();
        assert_eq!(normalized.task_type, TaskType::DocumentParsing);
        assert_eq!(normalized.file_type, FileType::Pdf);
    }
}
