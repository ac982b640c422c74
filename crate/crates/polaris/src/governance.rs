//! Policy store, compiled violation predicates, robust anomaly detection,
//! graded risk scoring, and the routing playbook.
//!
//! Violation predicates are pure functions of the extraction, the policy
//! lookup, attached artifacts, history, and the run date: evaluating twice
//! yields identical findings. Anomaly scoring uses the robust z-score
//! `|x - median| / (1.4826 * MAD)` against vendor baselines, falling back
//! to cohort and then global statistics when vendor data are sparse.

use crate::extraction::{ArtifactKind, ExtractedInvoice, Field};
use crate::money::Amount;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Canonical vendor key: lowercased with whitespace runs collapsed.
pub fn canonical_vendor(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

// ---------------------------------------------------------------------------
// Policy store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRecord {
    /// Display form of the vendor identity.
    pub vendor: String,
    pub sector: String,
    pub currency: String,
    pub threshold: Amount,
    pub terms: String,
}

impl PolicyRecord {
    pub fn invariants_hold(&self) -> bool {
        self.threshold.cents() > 0 && crate::contracts::currency_code_valid(&self.currency)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub vendor: String,
    pub invoice_number: String,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyStore {
    /// Keyed by canonical vendor.
    pub records: BTreeMap<String, PolicyRecord>,
    pub blacklist: BTreeSet<String>,
    pub whitelist: BTreeSet<String>,
    /// Prior processed invoices for duplicate detection.
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad record for vendor {vendor:?}: {reason}")]
    BadRecord { vendor: String, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("blacklist and whitelist overlap on {0:?}")]
    ListOverlap(String),
}

impl PolicyStore {
    pub fn insert(&mut self, record: PolicyRecord) -> Result<(), StoreError> {
        if !record.invariants_hold() {
            return Err(StoreError::BadRecord {
                vendor: record.vendor.clone(),
                reason: "threshold must be positive and currency a known code".into(),
            });
        }
        self.records.insert(canonical_vendor(&record.vendor), record);
        Ok(())
    }

    pub fn invariants_hold(&self) -> bool {
        self.blacklist.is_disjoint(&self.whitelist)
    }

    pub fn is_blacklisted(&self, vendor: &str) -> bool {
        self.blacklist.contains(&canonical_vendor(vendor))
    }

    /// Loads `records.csv`, `blacklist.txt`, `whitelist.txt` and
    /// `history.json` from a directory. Missing list/history files mean
    /// empty.
    pub fn load_dir(dir: &Path) -> Result<Self, StoreError> {
        let mut store = PolicyStore::default();
        let mut reader = csv::Reader::from_path(dir.join("records.csv"))?;
        for row in reader.deserialize() {
            let raw: CsvPolicyRow = row?;
            let threshold = Amount::parse_strict(&raw.threshold).ok_or_else(|| {
                StoreError::BadRecord {
                    vendor: raw.vendor.clone(),
                    reason: format!("unparseable threshold {:?}", raw.threshold),
                }
            })?;
            store.insert(PolicyRecord {
                vendor: raw.vendor,
                sector: raw.sector,
                currency: raw.currency,
                threshold,
                terms: raw.terms,
            })?;
        }
        for (file, set) in [("blacklist.txt", &mut store.blacklist), ("whitelist.txt", &mut store.whitelist)] {
            let path = dir.join(file);
            if path.exists() {
                for line in std::fs::read_to_string(&path)?.lines() {
                    let line = line.trim();
                    if !line.is_empty() {
                        set.insert(canonical_vendor(line));
                    }
                }
            }
        }
        let history_path = dir.join("history.json");
        if history_path.exists() {
            store.history = serde_json::from_str(&std::fs::read_to_string(&history_path)?)?;
        }
        if let Some(v) = store.blacklist.intersection(&store.whitelist).next() {
            return Err(StoreError::ListOverlap(v.clone()));
        }
        Ok(store)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir)?;
        let mut writer = csv::Writer::from_path(dir.join("records.csv"))?;
        for record in self.records.values() {
            writer.serialize(CsvPolicyRow {
                vendor: record.vendor.clone(),
                sector: record.sector.clone(),
                currency: record.currency.clone(),
                threshold: record.threshold.to_string(),
                terms: record.terms.clone(),
            })?;
        }
        writer.flush()?;
        for (file, set) in [("blacklist.txt", &self.blacklist), ("whitelist.txt", &self.whitelist)] {
            let mut f = std::fs::File::create(dir.join(file))?;
            for v in set {
                writeln!(f, "{v}")?;
            }
        }
        std::fs::write(
            dir.join("history.json"),
            serde_json::to_string_pretty(&self.history)?,
        )?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvPolicyRow {
    vendor: String,
    sector: String,
    currency: String,
    threshold: String,
    terms: String,
}

/// Result of a policy lookup: existence flag, matched identity, record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLookup {
    pub exists: bool,
    pub matched_vendor: Option<String>,
    pub record: Option<PolicyRecord>,
    pub evidence: BTreeMap<String, String>,
}

/// Exact canonical match after case/whitespace normalization. No fuzzy
/// matching: near misses are unknown vendors by design.
pub fn retrieve_policy(vendor_name: &str, store: &PolicyStore) -> PolicyLookup {
    let mut evidence = BTreeMap::new();
    evidence.insert("query".to_string(), vendor_name.to_string());
    if vendor_name.trim().is_empty() {
        evidence.insert("empty_query".to_string(), "true".to_string());
        return PolicyLookup {
            exists: false,
            matched_vendor: None,
            record: None,
            evidence,
        };
    }
    match store.records.get(&canonical_vendor(vendor_name)) {
        Some(record) => PolicyLookup {
            exists: true,
            matched_vendor: Some(record.vendor.clone()),
            record: Some(record.clone()),
            evidence,
        },
        None => PolicyLookup {
            exists: false,
            matched_vendor: None,
            record: None,
            evidence,
        },
    }
}

// ---------------------------------------------------------------------------
// Violations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownVendor,
    ThresholdBreach,
    CurrencyMismatch,
    Duplicate,
    Blacklisted,
    MissingProvenance,
}

impl ViolationKind {
    pub fn rule_id(self) -> &'static str {
        match self {
            ViolationKind::UnknownVendor => "unknown_vendor",
            ViolationKind::ThresholdBreach => "threshold_breach",
            ViolationKind::CurrencyMismatch => "currency_mismatch",
            ViolationKind::Duplicate => "duplicate",
            ViolationKind::Blacklisted => "blacklisted",
            ViolationKind::MissingProvenance => "missing_provenance",
        }
    }

    pub fn blocking(self) -> bool {
        matches!(
            self,
            ViolationKind::UnknownVendor | ViolationKind::ThresholdBreach | ViolationKind::Blacklisted
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub evidence: BTreeMap<String, String>,
    pub blocking: bool,
}

impl Violation {
    fn new(kind: ViolationKind, evidence: BTreeMap<String, String>) -> Self {
        Violation {
            kind,
            blocking: kind.blocking(),
            evidence,
        }
    }
}

/// Per-run knobs for the violation predicates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PolicyCheckConfig {
    pub provenance_enforced: bool,
    /// Duplicate lookback window in days.
    pub lookback_days: i64,
}

impl Default for PolicyCheckConfig {
    fn default() -> Self {
        PolicyCheckConfig {
            provenance_enforced: false,
            lookback_days: 90,
        }
    }
}

/// Evaluates every violation predicate against one extraction.
pub fn check_violations(
    inv: &ExtractedInvoice,
    lookup: &PolicyLookup,
    store: &PolicyStore,
    today: NaiveDate,
    cfg: &PolicyCheckConfig,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let vendor_display = inv.vendor.clone().unwrap_or_default();

    if !lookup.exists {
        let mut ev = lookup.evidence.clone();
        ev.insert("vendor".to_string(), vendor_display.clone());
        out.push(Violation::new(ViolationKind::UnknownVendor, ev));
    }

    if !vendor_display.is_empty() && store.is_blacklisted(&vendor_display) {
        let mut ev = BTreeMap::new();
        ev.insert("vendor".to_string(), vendor_display.clone());
        out.push(Violation::new(ViolationKind::Blacklisted, ev));
    }

    if let (true, Some(record), Some(total)) = (lookup.exists, &lookup.record, inv.total) {
        if total > record.threshold && !inv.has_artifact(ArtifactKind::Approval) {
            let mut ev = BTreeMap::new();
            ev.insert("amount".to_string(), total.to_string());
            ev.insert("threshold".to_string(), record.threshold.to_string());
            ev.insert("approval_artifact".to_string(), "absent".to_string());
            out.push(Violation::new(ViolationKind::ThresholdBreach, ev));
        }
    }

    if let (true, Some(record), Some(currency)) = (lookup.exists, &lookup.record, &inv.currency) {
        if currency != &record.currency {
            let mut ev = BTreeMap::new();
            ev.insert("invoice_currency".to_string(), currency.clone());
            ev.insert("policy_currency".to_string(), record.currency.clone());
            out.push(Violation::new(ViolationKind::CurrencyMismatch, ev));
        }
    }

    if let Some(number) = &inv.invoice_number {
        let reference = inv.issue_date.unwrap_or(today);
        let key = canonical_vendor(&vendor_display);
        let hit = store.history.iter().find(|h| {
            canonical_vendor(&h.vendor) == key
                && &h.invoice_number == number
                && (reference - h.date).num_days().abs() <= cfg.lookback_days
        });
        if let Some(prior) = hit {
            let mut ev = BTreeMap::new();
            ev.insert("invoice_number".to_string(), number.clone());
            ev.insert("prior_date".to_string(), prior.date.to_string());
            ev.insert("window_days".to_string(), cfg.lookback_days.to_string());
            out.push(Violation::new(ViolationKind::Duplicate, ev));
        }
    }

    if cfg.provenance_enforced {
        let missing: Vec<&str> = [
            (ArtifactKind::Po, "po"),
            (ArtifactKind::Receiving, "receiving"),
            (ArtifactKind::Approval, "approval"),
        ]
        .iter()
        .filter(|(k, _)| !inv.has_artifact(*k))
        .map(|(_, name)| *name)
        .collect();
        if !missing.is_empty() {
            let mut ev = BTreeMap::new();
            ev.insert("missing_artifacts".to_string(), missing.join(","));
            out.push(Violation::new(ViolationKind::MissingProvenance, ev));
        }
    }

    out
}

// ---------------------------------------------------------------------------
// Robust anomaly score
// ---------------------------------------------------------------------------

/// Consistency factor relating the MAD to the standard deviation of a
/// normal distribution.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ZScore {
    Defined(f64),
    /// The scale collapsed (MAD = 0); the caller must fall back to a wider
    /// baseline.
    Undefined,
}

#[derive(Debug, Error)]
#[error("cannot score against an empty history")]
pub struct EmptyHistoryError;

/// Median with the even-count convention of averaging the two middles.
fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite amounts"));
    Some(median_of_sorted(&sorted))
}

/// Median absolute deviation around the median (unscaled).
pub fn mad(values: &[f64]) -> Option<f64> {
    let med = median(values)?;
    let deviations: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&deviations)
}

/// Robust z-score of `x` against `history`.
pub fn z_mad(x: f64, history: &[f64]) -> Result<ZScore, EmptyHistoryError> {
    if history.is_empty() {
        return Err(EmptyHistoryError);
    }
    let med = median(history).expect("non-empty");
    let scale = mad(history).expect("non-empty");
    if scale == 0.0 {
        return Ok(ZScore::Undefined);
    }
    Ok(ZScore::Defined((x - med).abs() / (MAD_SCALE * scale)))
}

// ---------------------------------------------------------------------------
// Baselines and detection
// ---------------------------------------------------------------------------

pub fn cohort_key(sector: &str, currency: &str) -> String {
    format!("{sector}/{currency}")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnomalyBaseline {
    /// Canonical vendor -> amount history.
    pub vendors: BTreeMap<String, Vec<Amount>>,
    /// "sector/currency" -> amount history.
    pub cohorts: BTreeMap<String, Vec<Amount>>,
    pub global: Vec<Amount>,
    /// Minimum sample count for a vendor or cohort baseline to be used.
    pub n_min: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSource {
    Vendor,
    Cohort,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Amount,
    FutureDate,
}

impl AnomalyKind {
    pub fn rule_id(self) -> &'static str {
        match self {
            AnomalyKind::Amount => "amount_anomaly",
            AnomalyKind::FutureDate => "date_anomaly",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyFlag {
    pub kind: AnomalyKind,
    pub field: Field,
    pub score: f64,
    pub source: Option<BaselineSource>,
    pub severity: Severity,
    pub evidence: BTreeMap<String, String>,
}

fn amounts_to_f64(values: &[Amount]) -> Vec<f64> {
    values.iter().map(|a| a.as_f64()).collect()
}

impl AnomalyBaseline {
    /// Selects the baseline for one vendor: vendor history when it has at
    /// least `n_min` points and non-zero spread, else the sector/currency
    /// cohort under the same test, else global.
    pub fn select(
        &self,
        vendor: Option<&str>,
        sector: Option<&str>,
        currency: Option<&str>,
    ) -> Option<(BaselineSource, Vec<f64>)> {
        let usable = |vals: &[Amount], min: usize| {
            if vals.len() < min {
                return None;
            }
            let xs = amounts_to_f64(vals);
            (mad(&xs) != Some(0.0)).then_some(xs)
        };
        if let Some(v) = vendor {
            if let Some(hist) = self.vendors.get(&canonical_vendor(v)) {
                if let Some(xs) = usable(hist, self.n_min) {
                    return Some((BaselineSource::Vendor, xs));
                }
            }
        }
        if let (Some(sector), Some(currency)) = (sector, currency) {
            if let Some(hist) = self.cohorts.get(&cohort_key(sector, currency)) {
                if let Some(xs) = usable(hist, self.n_min) {
                    return Some((BaselineSource::Cohort, xs));
                }
            }
        }
        usable(&self.global, 1).map(|xs| (BaselineSource::Global, xs))
    }
}

/// Flags amount outliers against the selected baseline and any date
/// strictly after `today`.
pub fn detect_anomalies(
    inv: &ExtractedInvoice,
    baseline: &AnomalyBaseline,
    sector: Option<&str>,
    k_mad: f64,
    today: NaiveDate,
) -> Vec<AnomalyFlag> {
    assert!(k_mad > 0.0, "k_mad must be positive");
    let mut flags = Vec::new();

    if let Some(total) = inv.total {
        if let Some((source, history)) = baseline.select(
            inv.vendor.as_deref(),
            sector,
            inv.currency.as_deref(),
        ) {
            if let Ok(ZScore::Defined(z)) = z_mad(total.as_f64(), &history) {
                if z > k_mad {
                    let mut evidence = BTreeMap::new();
                    evidence.insert("amount".to_string(), total.to_string());
                    evidence.insert("z_mad".to_string(), format!("{z:.4}"));
                    evidence.insert("k_mad".to_string(), format!("{k_mad}"));
                    evidence.insert("baseline_n".to_string(), history.len().to_string());
                    flags.push(AnomalyFlag {
                        kind: AnomalyKind::Amount,
                        field: Field::Total,
                        score: z,
                        source: Some(source),
                        severity: Severity::Medium,
                        evidence,
                    });
                }
            }
        }
    }

    for (field, date) in [(Field::IssueDate, inv.issue_date), (Field::DueDate, inv.due_date)] {
        if let Some(d) = date {
            if d > today {
                let days = (d - today).num_days();
                let mut evidence = BTreeMap::new();
                evidence.insert("date".to_string(), d.to_string());
                evidence.insert("today".to_string(), today.to_string());
                flags.push(AnomalyFlag {
                    kind: AnomalyKind::FutureDate,
                    field,
                    score: days as f64,
                    source: None,
                    severity: Severity::Low,
                    evidence,
                });
            }
        }
    }

    flags
}

// ---------------------------------------------------------------------------
// Risk scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskTier {
    AutoApprove,
    Review,
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAssessment {
    pub score: f64,
    pub fired_rules: Vec<String>,
    pub tier: RiskTier,
}

/// Graded scoring: one weight per distinct fired rule, tiered routing with
/// left-closed boundaries (a score exactly at a boundary takes the higher
/// tier).
pub fn risk_assess(
    violations: &[Violation],
    anomalies: &[AnomalyFlag],
    weights: &BTreeMap<String, f64>,
    tiers: (f64, f64),
) -> RiskAssessment {
    let (t_review, t_block) = tiers;
    assert!(t_review < t_block, "review boundary must sit below block");
    let mut fired: BTreeSet<String> = BTreeSet::new();
    for v in violations {
        fired.insert(v.kind.rule_id().to_string());
    }
    for a in anomalies {
        fired.insert(a.kind.rule_id().to_string());
    }
    let score: f64 = fired
        .iter()
        .map(|rule| weights.get(rule).copied().unwrap_or(0.0))
        .sum();
    let tier = if score < t_review {
        RiskTier::AutoApprove
    } else if score < t_block {
        RiskTier::Review
    } else {
        RiskTier::Block
    };
    RiskAssessment {
        score,
        fired_rules: fired.into_iter().collect(),
        tier,
    }
}

// ---------------------------------------------------------------------------
// Routing playbook
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteTarget {
    /// Blocking tier: freeze downstream side effects.
    Hold,
    /// Review tier: human queue.
    Ticket,
    /// Clean or auto-approvable.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    NotifyVendor,
    RequestArtifacts,
    OpenTicket,
    ScheduleRecheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub action: ActionKind,
    pub subject: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispositionOutcome {
    ClosedClean,
    AutoApproved,
    Ticketed,
    Held,
}

/// Structured close-out of the enrich/classify/route/act/close playbook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDisposition {
    pub outcome: DispositionOutcome,
    pub severity: Option<Severity>,
    pub route: RouteTarget,
    pub actions: Vec<ActionRecord>,
    pub policy_context: Option<String>,
    pub prior_incidents: usize,
    pub assessment: RiskAssessment,
}

/// Run-local append log. History and baseline refreshes funnel through this
/// single writer and are folded into shared state only between runs, so
/// in-flight detection stays deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunLedger {
    pub dispositions: Vec<RoutingDisposition>,
    pub history_appends: Vec<HistoryEntry>,
    pub baseline_deltas: BTreeMap<String, Vec<Amount>>,
}

impl RunLedger {
    /// Baselines as they would look after folding in this run's outcomes.
    pub fn refreshed(&self, base: &AnomalyBaseline) -> AnomalyBaseline {
        let mut out = base.clone();
        for (vendor, amounts) in &self.baseline_deltas {
            let hist = out.vendors.entry(vendor.clone()).or_default();
            hist.extend(amounts.iter().copied());
            out.global.extend(amounts.iter().copied());
        }
        out
    }
}

pub struct RoutingContext<'a> {
    pub policy: Option<&'a PolicyRecord>,
    pub weights: &'a BTreeMap<String, f64>,
    pub tiers: (f64, f64),
}

/// Executes the five-stage playbook as a deterministic state machine and
/// appends the outcome to the run ledger.
pub fn route(
    violations: &[Violation],
    anomalies: &[AnomalyFlag],
    inv: &ExtractedInvoice,
    ctx: &RoutingContext<'_>,
    ledger: &mut RunLedger,
) -> RoutingDisposition {
    // Enrich: attach policy context and prior incidents from the run log.
    let policy_context = ctx.policy.map(|p| format!("{} ({}, {})", p.vendor, p.sector, p.currency));
    let prior_incidents = ledger.dispositions.len();

    // Classify severity: the worst finding wins.
    let severity = violations
        .iter()
        .map(|v| if v.blocking { Severity::High } else { Severity::Medium })
        .chain(anomalies.iter().map(|a| a.severity))
        .max();

    // Route by tier.
    let assessment = risk_assess(violations, anomalies, ctx.weights, ctx.tiers);
    let route = match assessment.tier {
        RiskTier::Block => RouteTarget::Hold,
        RiskTier::Review => RouteTarget::Ticket,
        RiskTier::AutoApprove => RouteTarget::Auto,
    };

    // Act.
    let subject = inv.vendor.clone().unwrap_or_else(|| "unidentified vendor".into());
    let actions = match route {
        RouteTarget::Hold => vec![
            ActionRecord {
                action: ActionKind::NotifyVendor,
                subject: subject.clone(),
            },
            ActionRecord {
                action: ActionKind::RequestArtifacts,
                subject: subject.clone(),
            },
        ],
        RouteTarget::Ticket => vec![
            ActionRecord {
                action: ActionKind::OpenTicket,
                subject: subject.clone(),
            },
            ActionRecord {
                action: ActionKind::ScheduleRecheck,
                subject: subject.clone(),
            },
        ],
        RouteTarget::Auto => Vec::new(),
    };

    // Close with a structured disposition; outcomes refresh baselines.
    let outcome = if violations.is_empty() && anomalies.is_empty() {
        DispositionOutcome::ClosedClean
    } else {
        match route {
            RouteTarget::Hold => DispositionOutcome::Held,
            RouteTarget::Ticket => DispositionOutcome::Ticketed,
            RouteTarget::Auto => DispositionOutcome::AutoApproved,
        }
    };
    let disposition = RoutingDisposition {
        outcome,
        severity,
        route,
        actions,
        policy_context,
        prior_incidents,
        assessment,
    };
    if let (Some(vendor), Some(total)) = (&inv.vendor, inv.total) {
        ledger
            .baseline_deltas
            .entry(canonical_vendor(vendor))
            .or_default()
            .push(total);
    }
    ledger.dispositions.push(disposition.clone());
    disposition
}

// ---------------------------------------------------------------------------
// Confusion metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u32,
    pub false_pos: u32,
    pub false_neg: u32,
    pub true_neg: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    /// None renders as an em-dash: undefined where no positives exist.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ConfusionCounts {
    pub fn from_labels(predicted: &[bool], truth: &[bool]) -> Self {
        assert_eq!(predicted.len(), truth.len(), "label sets must index the same population");
        let mut c = ConfusionCounts::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        c
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    pub fn total(&self) -> u32 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Precision/recall/F1 with the undefined-cell convention: a metric is
    /// undefined when its denominator has no positive cases.
    pub fn metrics(&self) -> ConfusionMetrics {
        let precision = (self.true_pos + self.false_pos > 0)
            .then(|| f64::from(self.true_pos) / f64::from(self.true_pos + self.false_pos));
        let recall = (self.true_pos + self.false_neg > 0)
            .then(|| f64::from(self.true_pos) / f64::from(self.true_pos + self.false_neg));
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => None,
            _ => None,
        };
        ConfusionMetrics { precision, recall, f1 }
    }
}

/// Confusion summary from per-item label sets.
pub fn score_confusion(predicted: &[bool], truth: &[bool]) -> (ConfusionCounts, ConfusionMetrics) {
    let counts = ConfusionCounts::from_labels(predicted, truth);
    (counts, counts.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_acme() -> PolicyStore {
        let mut store = PolicyStore::default();
        store
            .insert(PolicyRecord {
                vendor: "Acme Corp".into(),
                sector: "manufacturing".into(),
                currency: "USD".into(),
                threshold: Amount::from_cents(100_000),
                terms: "net30".into(),
            })
            .unwrap();
        store
    }

    fn invoice(vendor: &str, total_cents: i64, currency: &str) -> ExtractedInvoice {
        let mut inv = ExtractedInvoice {
            invoice_number: Some("INV-2026-0001".into()),
            issue_date: NaiveDate::from_ymd_opt(2026, 1, 25),
            due_date: NaiveDate::from_ymd_opt(2026, 2, 24),
            vendor: Some(vendor.to_string()),
            currency: Some(currency.to_string()),
            total: Some(Amount::from_cents(total_cents)),
            line_items: vec![],
            artifacts: vec![],
            confidence: BTreeMap::new(),
        };
        for f in [Field::InvoiceNumber, Field::IssueDate, Field::DueDate, Field::Vendor, Field::Currency, Field::Total] {
            inv.confidence.insert(f, 1.0);
        }
        inv
    }

    fn today() -> NaiveDate {
        NaiveDate::from_ymd_opt(2026, 3, 1).unwrap()
    }

    #[test]
    fn retrieve_policy_normalizes_case_and_whitespace() {
        let store = store_with_acme();
        let lookup = retrieve_policy("  acme   CORP ", &store);
        assert!(lookup.exists);
        assert_eq!(lookup.matched_vendor.as_deref(), Some("Acme Corp"));
    }

    #[test]
    fn absent_vendor_not_found() {
        let lookup = retrieve_policy("Globex", &store_with_acme());
        assert!(!lookup.exists);
        assert!(lookup.record.is_none());
    }

    #[test]
    fn empty_query_carries_evidence() {
        let lookup = retrieve_policy("", &store_with_acme());
        assert!(!lookup.exists);
        assert_eq!(lookup.evidence.get("empty_query").map(String::as_str), Some("true"));
    }

    #[test]
    fn unknown_vendor_is_blocking() {
        let store = store_with_acme();
        let inv = invoice("Globex", 5000, "USD");
        let lookup = retrieve_policy("Globex", &store);
        let violations = check_violations(&inv, &lookup, &store, today(), &PolicyCheckConfig::default());
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].kind, ViolationKind::UnknownVendor);
        assert!(violations[0].blocking);
    }

    #[test]
    fn threshold_breach_requires_missing_approval_artifact() {
        let store = store_with_acme();
        let mut inv = invoice("Acme Corp", 500_000, "USD");
        let lookup = retrieve_policy("Acme Corp", &store);
        let cfg = PolicyCheckConfig::default();
        let violations = check_violations(&inv, &lookup, &store, today(), &cfg);
        assert!(violations.iter().any(|v| v.kind == ViolationKind::ThresholdBreach && v.blocking));
        let breach = violations.iter().find(|v| v.kind == ViolationKind::ThresholdBreach).unwrap();
        assert_eq!(breach.evidence.get("approval_artifact").map(String::as_str), Some("absent"));
        assert!(breach.evidence.contains_key("amount") && breach.evidence.contains_key("threshold"));

        inv.artifacts.push(ArtifactKind::Approval);
        let violations = check_violations(&inv, &lookup, &store, today(), &cfg);
        assert!(!violations.iter().any(|v| v.kind == ViolationKind::ThresholdBreach));
    }

    #[test]
    fn currency_mismatch_detected() {
        let store = store_with_acme();
        let inv = invoice("Acme Corp", 5000, "EUR");
        let lookup = retrieve_policy("Acme Corp", &store);
        let violations = check_violations(&inv, &lookup, &store, today(), &PolicyCheckConfig::default());
        assert!(violations.iter().any(|v| v.kind == ViolationKind::CurrencyMismatch && !v.blocking));
    }

    #[test]
    fn duplicate_fires_only_inside_lookback() {
        let mut store = store_with_acme();
        store.history.push(HistoryEntry {
            vendor: "Acme Corp".into(),
            invoice_number: "INV-2026-0001".into(),
            date: NaiveDate::from_ymd_opt(2026, 1, 20).unwrap(),
        });
        let inv = invoice("Acme Corp", 5000, "USD");
        let lookup = retrieve_policy("Acme Corp", &store);
        let cfg = PolicyCheckConfig::default();
        let violations = check_violations(&inv, &lookup, &store, today(), &cfg);
        assert!(violations.iter().any(|v| v.kind == ViolationKind::Duplicate));

        // Same pair far outside the window.
        store.history[0].date = NaiveDate::from_ymd_opt(2025, 1, 20).unwrap();
        let violations = check_violations(&inv, &lookup, &store, today(), &cfg);
        assert!(!violations.iter().any(|v| v.kind == ViolationKind::Duplicate));
    }

    #[test]
    fn provenance_enforcement_registers_missing_artifacts() {
        let store = store_with_acme();
        let inv = invoice("Acme Corp", 5000, "USD");
        let lookup = retrieve_policy("Acme Corp", &store);
        let cfg = PolicyCheckConfig {
            provenance_enforced: true,
            lookback_days: 90,
        };
        let violations = check_violations(&inv, &lookup, &store, today(), &cfg);
        let v = violations.iter().find(|v| v.kind == ViolationKind::MissingProvenance).unwrap();
        assert_eq!(v.evidence.get("missing_artifacts").map(String::as_str), Some("po,receiving,approval"));
    }

    #[test]
    fn z_mad_matches_hand_computed_example() {
        // history [100,102,98,101,99]: median 100, MAD 1.
        let history = [100.0, 102.0, 98.0, 101.0, 99.0];
        match z_mad(200.0, &history).unwrap() {
            ZScore::Defined(z) => {
                assert!((z - 100.0 / MAD_SCALE).abs() < 1e-12);
                assert!((z - 67.4491).abs() < 1e-3);
            }
            ZScore::Undefined => panic!("defined history"),
        }
    }

    #[test]
    fn z_mad_zero_at_median_and_undefined_at_zero_mad() {
        let history = [100.0, 102.0, 98.0, 101.0, 99.0];
        assert_eq!(z_mad(100.0, &history).unwrap(), ZScore::Defined(0.0));
        assert_eq!(z_mad(60.0, &[50.0, 50.0, 50.0]).unwrap(), ZScore::Undefined);
        assert!(z_mad(1.0, &[]).is_err());
    }

    #[test]
    fn baseline_falls_back_when_vendor_sparse_or_flat() {
        let mut baseline = AnomalyBaseline {
            n_min: 5,
            ..AnomalyBaseline::default()
        };
        baseline
            .vendors
            .insert("acme corp".into(), vec![Amount::from_cents(100)].repeat(3));
        baseline.cohorts.insert(
            cohort_key("manufacturing", "USD"),
            vec![10_000, 10_100, 9_900, 10_050, 9_950]
                .into_iter()
                .map(Amount::from_cents)
                .collect(),
        );
        baseline.global = vec![Amount::from_cents(1), Amount::from_cents(2)];
        // Vendor has 3 < n_min points: cohort takes over.
        let (source, _) = baseline
            .select(Some("Acme Corp"), Some("manufacturing"), Some("USD"))
            .unwrap();
        assert_eq!(source, BaselineSource::Cohort);
        // No sector: global.
        let (source, _) = baseline.select(Some("Acme Corp"), None, None).unwrap();
        assert_eq!(source, BaselineSource::Global);
    }

    #[test]
    fn detect_flags_injected_outlier_with_vendor_source() {
        let mut baseline = AnomalyBaseline {
            n_min: 5,
            ..AnomalyBaseline::default()
        };
        baseline.vendors.insert(
            "acme corp".into(),
            vec![10_000, 10_200, 9_800, 10_100, 9_900]
                .into_iter()
                .map(Amount::from_cents)
                .collect(),
        );
        let inv = invoice("Acme Corp", 20_000, "USD");
        let flags = detect_anomalies(&inv, &baseline, Some("manufacturing"), 3.5, today());
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].kind, AnomalyKind::Amount);
        assert_eq!(flags[0].source, Some(BaselineSource::Vendor));
        assert!(flags[0].score > 3.5);
    }

    #[test]
    fn median_amount_raises_no_flag() {
        let mut baseline = AnomalyBaseline {
            n_min: 5,
            ..AnomalyBaseline::default()
        };
        baseline.vendors.insert(
            "acme corp".into(),
            vec![10_000, 10_200, 9_800, 10_100, 9_900]
                .into_iter()
                .map(Amount::from_cents)
                .collect(),
        );
        let inv = invoice("Acme Corp", 10_000, "USD");
        let flags = detect_anomalies(&inv, &baseline, None, 3.5, today());
        assert!(flags.is_empty());
    }

    #[test]
    fn tomorrow_is_a_date_anomaly() {
        let baseline = AnomalyBaseline::default();
        let mut inv = invoice("Acme Corp", 10_000, "USD");
        inv.issue_date = Some(today() + chrono::Days::new(1));
        inv.due_date = None;
        let flags = detect_anomalies(&inv, &baseline, None, 3.5, today());
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].kind, AnomalyKind::FutureDate);
        assert_eq!(flags[0].score, 1.0);
    }

    fn default_weights() -> BTreeMap<String, f64> {
        [
            ("unknown_vendor", 0.6),
            ("blacklisted", 0.9),
            ("threshold_breach", 0.5),
            ("currency_mismatch", 0.3),
            ("duplicate", 0.4),
            ("missing_provenance", 0.3),
            ("amount_anomaly", 0.4),
            ("date_anomaly", 0.2),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    #[test]
    fn risk_tiers_use_left_closed_boundaries() {
        let weights = default_weights();
        let clean = risk_assess(&[], &[], &weights, (0.3, 0.8));
        assert_eq!(clean.score, 0.0);
        assert_eq!(clean.tier, RiskTier::AutoApprove);

        // One duplicate + currency mismatch lands exactly on a boundary when
        // tiers are (0.7, 0.9): 0.4 + 0.3 = 0.7 -> review.
        let violations = vec![
            Violation::new(ViolationKind::Duplicate, BTreeMap::new()),
            Violation::new(ViolationKind::CurrencyMismatch, BTreeMap::new()),
        ];
        let at_boundary = risk_assess(&violations, &[], &weights, (0.7, 0.9));
        assert!((at_boundary.score - 0.7).abs() < 1e-12);
        assert_eq!(at_boundary.tier, RiskTier::Review);
    }

    #[test]
    fn unknown_vendor_plus_mismatch_blocks() {
        let weights = default_weights();
        let violations = vec![
            Violation::new(ViolationKind::UnknownVendor, BTreeMap::new()),
            Violation::new(ViolationKind::CurrencyMismatch, BTreeMap::new()),
        ];
        let assess = risk_assess(&violations, &[], &weights, (0.3, 0.8));
        assert!((assess.score - 0.9).abs() < 1e-12);
        assert_eq!(assess.tier, RiskTier::Block);
    }

    #[test]
    fn route_clean_closes_clean_without_actions() {
        let weights = default_weights();
        let mut ledger = RunLedger::default();
        let inv = invoice("Acme Corp", 10_000, "USD");
        let ctx = RoutingContext {
            policy: None,
            weights: &weights,
            tiers: (0.3, 0.8),
        };
        let d = route(&[], &[], &inv, &ctx, &mut ledger);
        assert_eq!(d.outcome, DispositionOutcome::ClosedClean);
        assert!(d.actions.is_empty());
        assert_eq!(d.severity, None);
    }

    #[test]
    fn route_blocking_violation_holds_and_requests_artifacts() {
        let weights = default_weights();
        let mut ledger = RunLedger::default();
        let inv = invoice("Globex", 10_000, "USD");
        let violations = vec![
            Violation::new(ViolationKind::UnknownVendor, BTreeMap::new()),
            Violation::new(ViolationKind::CurrencyMismatch, BTreeMap::new()),
        ];
        let ctx = RoutingContext {
            policy: None,
            weights: &weights,
            tiers: (0.3, 0.8),
        };
        let d = route(&violations, &[], &inv, &ctx, &mut ledger);
        assert_eq!(d.route, RouteTarget::Hold);
        assert_eq!(d.outcome, DispositionOutcome::Held);
        assert!(d.actions.iter().any(|a| a.action == ActionKind::RequestArtifacts));
        assert_eq!(d.severity, Some(Severity::High));
    }

    #[test]
    fn review_case_updates_baseline_after_close() {
        let weights = default_weights();
        let mut ledger = RunLedger::default();
        let inv = invoice("Acme Corp", 50_000, "USD");
        let anomaly = AnomalyFlag {
            kind: AnomalyKind::Amount,
            field: Field::Total,
            score: 9.0,
            source: Some(BaselineSource::Vendor),
            severity: Severity::Medium,
            evidence: BTreeMap::new(),
        };
        let ctx = RoutingContext {
            policy: None,
            weights: &weights,
            tiers: (0.3, 0.8),
        };
        let base = AnomalyBaseline {
            n_min: 5,
            ..AnomalyBaseline::default()
        };
        let before = base.vendors.get("acme corp").map_or(0, Vec::len);
        let d = route(&[], &[anomaly], &inv, &ctx, &mut ledger);
        assert_eq!(d.route, RouteTarget::Ticket);
        let refreshed = ledger.refreshed(&base);
        assert_eq!(refreshed.vendors["acme corp"].len(), before + 1);
        assert_eq!(ledger.dispositions.len(), 1);
    }

    #[test]
    fn score_confusion_matches_published_total_row() {
        let counts = ConfusionCounts {
            true_pos: 9,
            false_pos: 2,
            false_neg: 2,
            true_neg: 15,
        };
        let m = counts.metrics();
        assert!((m.precision.unwrap() - 0.8182).abs() < 1e-4);
        assert!((m.recall.unwrap() - 0.8182).abs() < 1e-4);
        assert!((m.f1.unwrap() - 0.8182).abs() < 1e-4);
    }

    #[test]
    fn no_positives_means_undefined_metrics() {
        let (counts, m) = score_confusion(&[false, false], &[false, false]);
        assert_eq!(counts.true_neg, 2);
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(m.f1, None);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let (_, m) = score_confusion(&[true, true, true], &[true, true, true]);
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
    }

    #[test]
    fn self_prediction_has_no_false_counts() {
        for labels in [vec![true, false, true], vec![false; 4], vec![true; 3]] {
            let (c, _) = score_confusion(&labels, &labels);
            assert_eq!(c.false_pos, 0);
            assert_eq!(c.false_neg, 0);
        }
    }

    #[test]
    fn store_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = store_with_acme();
        store.blacklist.insert("shady ltd".into());
        store.history.push(HistoryEntry {
            vendor: "Acme Corp".into(),
            invoice_number: "INV-1".into(),
            date: NaiveDate::from_ymd_opt(2026, 1, 1).unwrap(),
        });
        store.save_dir(dir.path()).unwrap();
        let loaded = PolicyStore::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.records, store.records);
        assert_eq!(loaded.blacklist, store.blacklist);
        assert_eq!(loaded.history, store.history);
    }
}
