//! Rubric-based plan selection: hard-filter, score, argmax, and emit one
//! strict JSON decision object.
//!
//! Hard constraints (typing, compliance ordering, policy invariants) discard
//! candidates before scoring. The four soft rubric terms are each in [0, 1]:
//! compliance over a documented soft-check table, sequencing with a fixed
//! penalty per legal-but-risky inversion, parsimony over extra stages, and
//! the planner prior. Ties resolve to the higher prior, then the lower
//! candidate index.

use crate::config::EngineConfig;
use crate::contracts::{agent_ids, Registry};
use crate::planner::{
    extra_node_count, policy_invariants, type_check, Plan, MIDDLE_PRECEDENCE,
};
use crate::task::{TaskRecord, TaskType};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

impl RubricWeights {
    pub fn valid(&self) -> bool {
        let ws = [self.w1, self.w2, self.w3, self.w4];
        ws.iter().all(|w| *w >= 0.0) && ws.iter().any(|w| *w > 0.0)
    }
}

impl From<&EngineConfig> for RubricWeights {
    fn from(cfg: &EngineConfig) -> Self {
        RubricWeights {
            w1: cfg.rubric.compliance,
            w2: cfg.rubric.sequencing,
            w3: cfg.rubric.parsimony,
            w4: cfg.rubric.prior,
        }
    }
}

/// Per-candidate rubric terms, each in [0, 1], plus the weighted utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub compliance: f64,
    pub sequencing: f64,
    pub parsimony: f64,
    pub prior: f64,
    #[serde(rename = "U")]
    pub utility: f64,
}

/// The selection decision as an auditable artifact. Serializes with exactly
/// `chosen_index` and `reason` at top level plus the scores annex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub chosen_index: usize,
    pub reason: String,
    pub scores: Vec<CandidateScore>,
}

#[derive(Debug, Error)]
#[error("all {candidate_count} candidates failed hard constraints")]
pub struct AllCandidatesRejectedError {
    pub candidate_count: usize,
}

/// Drops candidates that fail any hard constraint (typing or policy),
/// preserving order and original indices.
pub fn hard_filter<'a>(
    candidates: &'a [Plan],
    task: &TaskRecord,
    registry: &Registry,
) -> Result<Vec<(usize, &'a Plan)>, AllCandidatesRejectedError> {
    assert!(!candidates.is_empty(), "hard_filter requires candidates");
    let survivors: Vec<(usize, &Plan)> = candidates
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            type_check(p, registry, task).feasible() && policy_invariants(p, task).is_empty()
        })
        .collect();
    if survivors.is_empty() {
        return Err(AllCandidatesRejectedError {
            candidate_count: candidates.len(),
        });
    }
    Ok(survivors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTerms {
    pub compliance: f64,
    pub sequencing: f64,
    pub parsimony: f64,
    pub prior: f64,
}

/// Soft compliance checks. Each entry is (applicable, satisfied); the term
/// is the satisfied fraction of applicable checks.
///
/// SC1: document tasks carry a risk-control stage.
/// SC2: document tasks carry the anomaly screen.
/// SC3: every plan emits an audit report.
/// SC4: an external effector, when present, runs after risk control.
/// SC5: month-end tasks carry the scheduler stage.
fn compliance_term(plan: &Plan, task: &TaskRecord) -> f64 {
    let mut applicable = 0u32;
    let mut satisfied = 0u32;
    let mut check = |applies: bool, ok: bool| {
        if applies {
            applicable += 1;
            satisfied += u32::from(ok);
        }
    };
    let document = task.task_type == TaskType::DocumentParsing;
    check(document, plan.contains_agent(agent_ids::RISK_CONTROL));
    check(document, plan.contains_agent(agent_ids::ANOMALY_DETECTION));
    check(true, plan.contains_agent(agent_ids::REPORT_GENERATOR));
    if let Some(api) = plan.node_by_agent(agent_ids::API_ACCESS) {
        let after_risk = plan
            .node_by_agent(agent_ids::RISK_CONTROL)
            .is_some_and(|rc| plan.reaches(&rc.id, &api.id));
        check(true, after_risk);
    }
    check(task.is_month_end(), plan.contains_agent(agent_ids::SCHEDULER));
    if applicable == 0 {
        1.0
    } else {
        f64::from(satisfied) / f64::from(applicable)
    }
}

/// Counts serialized middle-check pairs that invert the canonical
/// precedence (policy, match, anomaly, risk). Parallel checks never invert.
fn risky_inversions(plan: &Plan) -> u32 {
    let rank = |agent: &str| MIDDLE_PRECEDENCE.iter().position(|m| *m == agent);
    let mut inversions = 0;
    for a in &plan.nodes {
        let Some(ra) = rank(&a.agent) else { continue };
        for b in &plan.nodes {
            let Some(rb) = rank(&b.agent) else { continue };
            if ra > rb && plan.reaches(&a.id, &b.id) {
                inversions += 1;
            }
        }
    }
    inversions
}

/// The four rubric terms for one hard-filtered candidate.
pub fn score_terms(plan: &Plan, task: &TaskRecord, cfg: &EngineConfig) -> ScoreTerms {
    let sequencing =
        (1.0 - cfg.sequencing_penalty * f64::from(risky_inversions(plan))).max(0.0);
    let extra = extra_node_count(plan, task).min(cfg.max_extra_nodes);
    let parsimony = 1.0 - f64::from(extra) / f64::from(cfg.max_extra_nodes.max(1));
    ScoreTerms {
        compliance: compliance_term(plan, task),
        sequencing,
        parsimony,
        prior: plan.prior_score.clamp(0.0, 1.0),
    }
}

fn utility(terms: &ScoreTerms, w: &RubricWeights) -> f64 {
    w.w1 * terms.compliance + w.w2 * terms.sequencing + w.w3 * terms.parsimony + w.w4 * terms.prior
}

fn dominant_term(terms: &ScoreTerms, w: &RubricWeights) -> (&'static str, f64) {
    let contributions = [
        ("compliance", w.w1 * terms.compliance, terms.compliance),
        ("sequencing", w.w2 * terms.sequencing, terms.sequencing),
        ("parsimony", w.w3 * terms.parsimony, terms.parsimony),
        ("prior", w.w4 * terms.prior, terms.prior),
    ];
    let best = contributions
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite contributions"))
        .expect("non-empty");
    (best.0, best.2)
}

/// Chooses the argmax-utility candidate among hard-filter survivors and
/// emits the templated decision.
pub fn select(
    candidates: &[Plan],
    task: &TaskRecord,
    weights: &RubricWeights,
    registry: &Registry,
    cfg: &EngineConfig,
) -> Result<SelectionDecision, AllCandidatesRejectedError> {
    assert!(weights.valid(), "at least one rubric weight must be positive");
    let survivors = hard_filter(candidates, task, registry)?;
    let scored: Vec<(usize, ScoreTerms, f64)> = survivors
        .iter()
        .map(|(idx, plan)| {
            let terms = score_terms(plan, task, cfg);
            let u = utility(&terms, weights);
            (*idx, terms, u)
        })
        .collect();
    let best = scored
        .iter()
        .max_by(|(ia, ta, ua), (ib, tb, ub)| {
            ua.partial_cmp(ub)
                .expect("finite utilities")
                .then(ta.prior.partial_cmp(&tb.prior).expect("finite priors"))
                .then(ib.cmp(ia)) // lower index wins the remaining ties
        })
        .expect("survivors are non-empty");
    let (chosen_index, terms, u) = (best.0, best.1, best.2);
    let (dom_name, dom_value) = dominant_term(&terms, weights);
    let reason = format!(
        "candidate {chosen_index} maximizes rubric utility {u:.4}; dominant term {dom_name} = {dom_value:.4} under weights ({}, {}, {}, {})",
        weights.w1, weights.w2, weights.w3, weights.w4
    );
    Ok(SelectionDecision {
        chosen_index,
        reason,
        scores: scored
            .into_iter()
            .map(|(index, t, u)| CandidateScore {
                index,
                compliance: t.compliance,
                sequencing: t.sequencing,
                parsimony: t.parsimony,
                prior: t.prior,
                utility: u,
            })
            .collect(),
    })
}
