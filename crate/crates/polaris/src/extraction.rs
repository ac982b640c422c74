//! Deterministic document parsing with a noise-aware confidence model, the
//! validator rule set, and the bounded validator-gated repair loop.
//!
//! The first parse pass is conservative: each field is searched by its exact
//! label inside an expected layout zone and the value must fit the field's
//! strict shape. Repair passes are targeted: only fields implicated by
//! failed validator rules are re-extracted, with a widened region of
//! interest, tolerant label matching, value normalizers, and finally a
//! label-independent shape search. Every relaxation that was needed to
//! recover a value costs confidence.

use crate::money::Amount;
use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;
use thiserror::Error;

/// The extractable invoice fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    InvoiceNumber,
    IssueDate,
    DueDate,
    Vendor,
    Currency,
    Total,
}

impl Field {
    pub const ALL: [Field; 6] = [
        Field::InvoiceNumber,
        Field::IssueDate,
        Field::DueDate,
        Field::Vendor,
        Field::Currency,
        Field::Total,
    ];

    /// Fields the schema-completeness rule requires.
    pub const REQUIRED: [Field; 4] = [
        Field::InvoiceNumber,
        Field::IssueDate,
        Field::Vendor,
        Field::Total,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Field::InvoiceNumber => "INVOICE NUMBER",
            Field::IssueDate => "ISSUE DATE",
            Field::DueDate => "DUE DATE",
            Field::Vendor => "VENDOR",
            Field::Currency => "CURRENCY",
            Field::Total => "TOTAL",
        }
    }

    /// Expected layout zone (inclusive line range) for the first pass.
    fn zone(self) -> (usize, usize) {
        match self {
            Field::InvoiceNumber => (0, 2),
            Field::IssueDate => (0, 3),
            Field::DueDate => (1, 4),
            Field::Vendor => (1, 5),
            Field::Currency => (2, 6),
            Field::Total => (2, 7),
        }
    }

    fn normalizer(self) -> Option<NormalizerClass> {
        match self {
            Field::IssueDate | Field::DueDate => Some(NormalizerClass::Date),
            Field::Total => Some(NormalizerClass::Amount),
            Field::Currency => Some(NormalizerClass::Currency),
            Field::InvoiceNumber | Field::Vendor => None,
        }
    }
}

pub const ITEM_LABEL: &str = "ITEM";
pub const ARTIFACT_LABELS: [&str; 3] = ["PO-ARTIFACT", "RECEIVING-ARTIFACT", "APPROVAL-ARTIFACT"];

// ---------------------------------------------------------------------------
// Synthetic documents and the noise model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionClass {
    /// Characters replaced inside a label (reversible) or a value destroyed
    /// outright (irreversible).
    CharSubstitution,
    /// Two field labels exchanged in place; values stay put.
    LabelSwap,
    /// A field line moved out of its expected layout zone.
    LineShift,
    /// European decimal notation in an amount.
    DecimalSeparatorSwap,
    /// A plausible but future-dated value; parses cleanly, trips date sanity.
    FutureDateInjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerClass {
    Date,
    Amount,
    Currency,
    RelaxedLabel,
    Roi,
}

/// Ground-truth record of one applied corruption. Lives beside the document
/// for labeling; the parser never reads it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub class: CorruptionClass,
    pub field: Field,
    pub reversible: bool,
    pub normalizer: Option<NormalizerClass>,
}

/// A labeled-line text document plus generation-side ground truth.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SyntheticDocument {
    pub lines: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_items: Option<Vec<(String, Amount)>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise_meta: Vec<NoiseRecord>,
}

impl SyntheticDocument {
    pub fn from_text(text: &str) -> Self {
        SyntheticDocument {
            lines: text.lines().map(str::to_string).collect(),
            line_items: None,
            noise_meta: Vec::new(),
        }
    }

    /// The parser-visible serialization: lines only, no side channel.
    pub fn to_text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    /// Every corruption marked reversible must name its normalizer.
    pub fn invariants_hold(&self) -> bool {
        self.noise_meta
            .iter()
            .all(|n| !n.reversible || n.normalizer.is_some())
    }
}

// ---------------------------------------------------------------------------
// Extraction result
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineItem {
    pub description: String,
    pub amount: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Po,
    Receiving,
    Approval,
}

/// Parsed invoice fields with per-field confidence.
///
/// A field is either present with a confidence entry or wholly absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractedInvoice {
    pub invoice_number: Option<String>,
    pub issue_date: Option<NaiveDate>,
    pub due_date: Option<NaiveDate>,
    pub vendor: Option<String>,
    pub currency: Option<String>,
    pub total: Option<Amount>,
    #[serde(default)]
    pub line_items: Vec<LineItem>,
    #[serde(default)]
    pub artifacts: Vec<ArtifactKind>,
    pub confidence: BTreeMap<Field, f64>,
}

impl ExtractedInvoice {
    pub fn present(&self, f: Field) -> bool {
        match f {
            Field::InvoiceNumber => self.invoice_number.is_some(),
            Field::IssueDate => self.issue_date.is_some(),
            Field::DueDate => self.due_date.is_some(),
            Field::Vendor => self.vendor.is_some(),
            Field::Currency => self.currency.is_some(),
            Field::Total => self.total.is_some(),
        }
    }

    fn clear(&mut self, f: Field) {
        match f {
            Field::InvoiceNumber => self.invoice_number = None,
            Field::IssueDate => self.issue_date = None,
            Field::DueDate => self.due_date = None,
            Field::Vendor => self.vendor = None,
            Field::Currency => self.currency = None,
            Field::Total => self.total = None,
        }
        self.confidence.remove(&f);
    }

    fn copy_field(&mut self, from: &ExtractedInvoice, f: Field) {
        match f {
            Field::InvoiceNumber => self.invoice_number = from.invoice_number.clone(),
            Field::IssueDate => self.issue_date = from.issue_date,
            Field::DueDate => self.due_date = from.due_date,
            Field::Vendor => self.vendor = from.vendor.clone(),
            Field::Currency => self.currency = from.currency.clone(),
            Field::Total => self.total = from.total,
        }
        match from.confidence.get(&f) {
            Some(c) => {
                self.confidence.insert(f, *c);
            }
            None => {
                self.confidence.remove(&f);
            }
        }
    }

    pub fn invariants_hold(&self) -> bool {
        Field::ALL
            .iter()
            .all(|f| self.present(*f) == self.confidence.contains_key(f))
            && self.total.is_none_or(|t| t.cents() >= 0)
    }

    /// Minimum confidence across present fields; 1.0 when nothing is present
    /// (schema completeness reports that case separately).
    pub fn min_confidence(&self) -> f64 {
        self.confidence
            .values()
            .copied()
            .fold(1.0, f64::min)
    }

    pub fn has_artifact(&self, kind: ArtifactKind) -> bool {
        self.artifacts.contains(&kind)
    }
}

// ---------------------------------------------------------------------------
// Validator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleId {
    /// Schema completeness over the required fields.
    R1Schema,
    /// Line-item amounts must sum to the total within epsilon.
    R2Arithmetic,
    /// Issue date must not trail the due date.
    R3DateLogic,
    /// Currency must normalize to a known ISO-4217 code.
    R4Currency,
    /// Every present field confidence must clear the threshold.
    R5Confidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFailure {
    pub rule: RuleId,
    pub fields: Vec<Field>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatorReport {
    pub verdict: Verdict,
    pub failed_rules: Vec<RuleFailure>,
    pub min_confidence: f64,
}

impl ValidatorReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn implicated_fields(&self) -> BTreeSet<Field> {
        self.failed_rules
            .iter()
            .flat_map(|f| f.fields.iter().copied())
            .collect()
    }
}

/// Arithmetic tolerance for the cross-field total check, in cents.
pub const ARITHMETIC_EPSILON_CENTS: i64 = 1;

/// Applies rules R1-R5 to an extraction.
pub fn validate(z: &ExtractedInvoice, tau_c: f64) -> ValidatorReport {
    assert!(tau_c > 0.0 && tau_c <= 1.0, "tau_c must be in (0,1]");
    let mut failed = Vec::new();

    let missing: Vec<Field> = Field::REQUIRED
        .iter()
        .copied()
        .filter(|f| !z.present(*f))
        .collect();
    if !missing.is_empty() {
        failed.push(RuleFailure {
            rule: RuleId::R1Schema,
            fields: missing.clone(),
            message: format!("required fields missing: {missing:?}"),
        });
    }

    if let Some(total) = z.total {
        if !z.line_items.is_empty() {
            let sum = z
                .line_items
                .iter()
                .try_fold(Amount::from_cents(0), |acc, it| acc.checked_add(it.amount));
            match sum {
                Some(sum) if sum.abs_diff(total) <= ARITHMETIC_EPSILON_CENTS => {}
                _ => {
                    failed.push(RuleFailure {
                        rule: RuleId::R2Arithmetic,
                        fields: vec![Field::Total],
                        message: format!(
                            "line items sum {} but total is {total}",
                            sum.map_or_else(|| "overflowed".to_string(), |s| s.to_string())
                        ),
                    });
                }
            }
        }
    }

    if let (Some(issue), Some(due)) = (z.issue_date, z.due_date) {
        if issue > due {
            failed.push(RuleFailure {
                rule: RuleId::R3DateLogic,
                fields: vec![Field::IssueDate, Field::DueDate],
                message: format!("issue date {issue} after due date {due}"),
            });
        }
    }

    if let Some(c) = &z.currency {
        if !crate::contracts::currency_code_valid(c) {
            failed.push(RuleFailure {
                rule: RuleId::R4Currency,
                fields: vec![Field::Currency],
                message: format!("currency {c:?} is not a known ISO-4217 code"),
            });
        }
    }

    let low: Vec<Field> = Field::ALL
        .iter()
        .copied()
        .filter(|f| z.confidence.get(f).is_some_and(|c| *c < tau_c))
        .collect();
    if !low.is_empty() {
        failed.push(RuleFailure {
            rule: RuleId::R5Confidence,
            fields: low,
            message: format!("field confidence below threshold {tau_c}"),
        });
    }

    let min_confidence = z.min_confidence();
    ValidatorReport {
        verdict: if failed.is_empty() { Verdict::Pass } else { Verdict::Fail },
        failed_rules: failed,
        min_confidence,
    }
}

// ---------------------------------------------------------------------------
// Repair hints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldHint {
    /// Inclusive line range to search; None keeps the field's layout zone.
    pub roi: Option<(usize, usize)>,
    pub relaxed: bool,
    pub normalizer: Option<NormalizerClass>,
    pub schema_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RepairHints {
    pub fields: BTreeMap<Field, FieldHint>,
}

impl RepairHints {
    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

pub const SCHEMA_PROMPT_INVOICE_CORE: &str = "invoice_core_v1";

/// Maps failed rules to field-targeted repair directives. Hints reference
/// only fields implicated by the report.
pub fn explain(report: &ValidatorReport, doc_len: usize) -> RepairHints {
    debug_assert!(!report.passed(), "explain is only called on failures");
    let full = (0usize, doc_len.saturating_sub(1));
    let mut hints = RepairHints::default();
    for failure in &report.failed_rules {
        for field in &failure.fields {
            let h = hints.fields.entry(*field).or_default();
            match failure.rule {
                RuleId::R1Schema => {
                    h.roi = Some(full);
                    h.relaxed = true;
                    h.normalizer = h.normalizer.or(field.normalizer());
                    h.schema_prompt = Some(SCHEMA_PROMPT_INVOICE_CORE.to_string());
                }
                RuleId::R2Arithmetic => {
                    h.roi = h.roi.or(Some(full));
                    h.normalizer = Some(NormalizerClass::Amount);
                }
                RuleId::R3DateLogic => {
                    h.roi = h.roi.or(Some(full));
                    h.normalizer = Some(NormalizerClass::Date);
                }
                RuleId::R4Currency => {
                    h.roi = h.roi.or(Some(full));
                    h.normalizer = Some(NormalizerClass::Currency);
                }
                RuleId::R5Confidence => {
                    h.roi = Some(full);
                    h.relaxed = true;
                }
            }
        }
    }
    hints
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

static INVOICE_NUMBER_STRICT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Z]{2,5}-\d{2,6}(-\d{1,8})?$").expect("valid regex"));
static INVOICE_NUMBER_RELAXED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?i)[a-z0-9][a-z0-9/-]{3,24}$").expect("valid regex"));
static CURRENCY_STRICT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Z]{3}$").expect("valid regex"));
static ALPHA_RUN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[A-Za-z]{2,}").expect("valid regex"));

const DATE_FORMATS: [&str; 5] = ["%Y-%m-%d", "%d/%m/%Y", "%m/%d/%Y", "%Y/%m/%d", "%d.%m.%Y"];

fn normalize_date(s: &str) -> Option<NaiveDate> {
    DATE_FORMATS
        .iter()
        .find_map(|fmt| NaiveDate::parse_from_str(s.trim(), fmt).ok())
}

fn normalize_currency(s: &str) -> Option<String> {
    let t = s.trim();
    let mapped = match t {
        "$" => "USD",
        "\u{20ac}" => "EUR",
        "\u{a3}" => "GBP",
        other => other,
    };
    let upper = mapped.to_ascii_uppercase();
    CURRENCY_STRICT.is_match(&upper).then_some(upper)
}

/// A value parsed at some relaxation level, with the count of relaxations
/// that were needed to get it.
#[derive(Debug, Clone, PartialEq)]
enum FieldValue {
    Text(String),
    Date(NaiveDate),
    Money(Amount),
    Code(String),
}

/// One confidence step per irregularity observed while recovering a value.
/// Computed in integer percent so threshold comparisons are exact.
pub fn confidence_for(irregularities: u32) -> f64 {
    let pct = 100i64 - 15 * i64::from(irregularities);
    (pct.max(10)) as f64 / 100.0
}

fn vendor_shaped(s: &str) -> bool {
    let t = s.trim();
    !t.is_empty()
        && ALPHA_RUN.is_match(t)
        && normalize_date(t).is_none()
        && Amount::parse_relaxed(t).is_none()
        && normalize_currency(t).map_or(true, |c| c != t)
}

/// Parses `raw` as a value for `field`. Returns the value and the number of
/// relaxations applied (0 = strict shape).
fn parse_value(field: Field, raw: &str, hint: Option<&FieldHint>) -> Option<(FieldValue, u32)> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    let relaxed = hint.is_some_and(|h| h.relaxed);
    let normalizer = hint.and_then(|h| h.normalizer);
    match field {
        Field::InvoiceNumber => {
            if INVOICE_NUMBER_STRICT.is_match(raw) {
                Some((FieldValue::Text(raw.to_string()), 0))
            } else if relaxed
                && INVOICE_NUMBER_RELAXED.is_match(raw)
                && raw.bytes().any(|b| b.is_ascii_digit())
            {
                Some((FieldValue::Text(raw.to_ascii_uppercase()), 1))
            } else {
                None
            }
        }
        Field::IssueDate | Field::DueDate => {
            if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
                Some((FieldValue::Date(d), 0))
            } else if relaxed || normalizer == Some(NormalizerClass::Date) {
                normalize_date(raw).map(|d| (FieldValue::Date(d), 1))
            } else {
                None
            }
        }
        Field::Vendor => vendor_shaped(raw).then(|| (FieldValue::Text(raw.to_string()), 0)),
        Field::Currency => {
            if CURRENCY_STRICT.is_match(raw) {
                Some((FieldValue::Code(raw.to_string()), 0))
            } else if relaxed || normalizer == Some(NormalizerClass::Currency) {
                normalize_currency(raw).map(|c| (FieldValue::Code(c), 1))
            } else {
                None
            }
        }
        Field::Total => {
            if let Some(a) = Amount::parse_strict(raw) {
                Some((FieldValue::Money(a), 0))
            } else if relaxed || normalizer == Some(NormalizerClass::Amount) {
                Amount::parse_relaxed(raw).map(|a| (FieldValue::Money(a), 1))
            } else {
                None
            }
        }
    }
}

fn split_line(line: &str) -> (Option<&str>, &str) {
    match line.split_once(':') {
        Some((label, value)) => (Some(label.trim()), value.trim()),
        None => (None, line.trim()),
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn fuzzy_label_match(candidate: &str, expected: &str) -> bool {
    let c = candidate.to_ascii_lowercase();
    let e = expected.to_ascii_lowercase();
    c != e && levenshtein(&c, &e) <= 2
}

/// True when a line may donate its value to another field's shape search:
/// either it has no recognized label, or its own labeled shape rejects the
/// value (a mislabeled line).
fn line_free_for_shape_search(line: &str) -> bool {
    let (label, value) = split_line(line);
    let Some(label) = label else {
        return !value.is_empty();
    };
    if let Some(field) = Field::ALL.iter().find(|f| f.label() == label) {
        let hint = FieldHint {
            relaxed: true,
            normalizer: field.normalizer(),
            ..FieldHint::default()
        };
        return parse_value(*field, value, Some(&hint)).is_none();
    }
    if label == ITEM_LABEL {
        return parse_item(value).is_none();
    }
    if ARTIFACT_LABELS.contains(&label) {
        return value.is_empty();
    }
    // Unrecognized label: the line is fair game.
    true
}

fn parse_item(value: &str) -> Option<LineItem> {
    let (desc, amount) = value.split_once('|')?;
    let desc = desc.trim();
    let amount = Amount::parse_strict(amount.trim()).or_else(|| Amount::parse_relaxed(amount.trim()))?;
    (!desc.is_empty()).then(|| LineItem {
        description: desc.to_string(),
        amount,
    })
}

struct FieldExtraction {
    value: FieldValue,
    irregularities: u32,
}

/// Searches one field in the given line range at the given relaxation level.
fn extract_field(
    doc: &SyntheticDocument,
    field: Field,
    range: (usize, usize),
    hint: Option<&FieldHint>,
) -> Option<FieldExtraction> {
    let (zlo, zhi) = field.zone();
    let (lo, hi) = range;
    let hi = hi.min(doc.lines.len().saturating_sub(1));
    let in_range = |i: usize| i >= lo && i <= hi;

    // Pass 1: exact label.
    for (i, line) in doc.lines.iter().enumerate() {
        if !in_range(i) {
            continue;
        }
        let (label, value) = split_line(line);
        if label == Some(field.label()) {
            if let Some((v, relaxations)) = parse_value(field, value, hint) {
                let outside_zone = u32::from(i < zlo || i > zhi);
                return Some(FieldExtraction {
                    value: v,
                    irregularities: relaxations + outside_zone,
                });
            }
        }
    }
    let relaxed = hint.is_some_and(|h| h.relaxed);
    if !relaxed {
        return None;
    }
    // Pass 2: tolerant label match (scanner noise in the label text).
    for (i, line) in doc.lines.iter().enumerate() {
        if !in_range(i) {
            continue;
        }
        let (label, value) = split_line(line);
        if let Some(label) = label {
            if fuzzy_label_match(label, field.label()) {
                if let Some((v, relaxations)) = parse_value(field, value, hint) {
                    let outside_zone = u32::from(i < zlo || i > zhi);
                    return Some(FieldExtraction {
                        value: v,
                        irregularities: 1 + relaxations + outside_zone,
                    });
                }
            }
        }
    }
    // Pass 3: label-independent shape search over donatable lines.
    for (i, line) in doc.lines.iter().enumerate() {
        if !in_range(i) || !line_free_for_shape_search(line) {
            continue;
        }
        let (_, value) = split_line(line);
        if let Some((v, relaxations)) = parse_value(field, value, hint) {
            return Some(FieldExtraction {
                value: v,
                irregularities: 2 + relaxations,
            });
        }
    }
    None
}

fn apply_extraction(inv: &mut ExtractedInvoice, field: Field, ext: FieldExtraction) {
    let conf = confidence_for(ext.irregularities);
    match (field, ext.value) {
        (Field::InvoiceNumber, FieldValue::Text(s)) => inv.invoice_number = Some(s),
        (Field::IssueDate, FieldValue::Date(d)) => inv.issue_date = Some(d),
        (Field::DueDate, FieldValue::Date(d)) => inv.due_date = Some(d),
        (Field::Vendor, FieldValue::Text(s)) => inv.vendor = Some(s),
        (Field::Currency, FieldValue::Code(c)) => inv.currency = Some(c),
        (Field::Total, FieldValue::Money(a)) => inv.total = Some(a),
        _ => unreachable!("parse_value returns the shape of its field"),
    }
    inv.confidence.insert(field, conf);
}

/// Full-document labeled-pattern extraction, or a targeted re-extraction of
/// hinted fields only.
pub fn parse(doc: &SyntheticDocument, hints: Option<&RepairHints>) -> ExtractedInvoice {
    let mut inv = ExtractedInvoice::default();
    match hints {
        None => {
            for field in Field::ALL {
                if let Some(ext) = extract_field(doc, field, field.zone(), None) {
                    apply_extraction(&mut inv, field, ext);
                }
            }
            // Items and artifacts are whole-document scans on exact labels.
            for line in &doc.lines {
                let (label, value) = split_line(line);
                match label {
                    Some(l) if l == ITEM_LABEL => {
                        if let Some(item) = parse_item(value) {
                            inv.line_items.push(item);
                        }
                    }
                    Some("PO-ARTIFACT") if !value.is_empty() => inv.artifacts.push(ArtifactKind::Po),
                    Some("RECEIVING-ARTIFACT") if !value.is_empty() => {
                        inv.artifacts.push(ArtifactKind::Receiving)
                    }
                    Some("APPROVAL-ARTIFACT") if !value.is_empty() => {
                        inv.artifacts.push(ArtifactKind::Approval)
                    }
                    _ => {}
                }
            }
        }
        Some(hints) => {
            for (field, hint) in &hints.fields {
                let range = hint.roi.unwrap_or(field.zone());
                if let Some(ext) = extract_field(doc, *field, range, Some(hint)) {
                    apply_extraction(&mut inv, *field, ext);
                }
            }
        }
    }
    debug_assert!(inv.invariants_hold());
    inv
}

// ---------------------------------------------------------------------------
// Merge
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
#[error("patch touches {field:?} which is not implicated by the failed rules")]
pub struct MergeScopeError {
    pub field: Field,
}

/// Overwrites exactly the implicated fields of `base` with the patch values
/// (including absence). Confidences follow values.
pub fn merge(
    base: &ExtractedInvoice,
    patch: &ExtractedInvoice,
    implicated: &BTreeSet<Field>,
) -> Result<ExtractedInvoice, MergeScopeError> {
    for field in Field::ALL {
        if patch.present(field) && !implicated.contains(&field) {
            return Err(MergeScopeError { field });
        }
    }
    let mut out = base.clone();
    for field in implicated {
        if patch.present(*field) {
            out.copy_field(patch, *field);
        } else {
            out.clear(*field);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Repair loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairIteration {
    pub report: ValidatorReport,
    pub hints: RepairHints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairTrace {
    pub iterations: Vec<RepairIteration>,
    pub final_report: ValidatorReport,
    pub parser_calls: u32,
    pub validator_calls: u32,
}

/// Terminal state for extraction that never passed validation: the best
/// effort record rides along for audit, but no approval may follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackResult {
    pub best_effort: ExtractedInvoice,
    pub trace: RepairTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RepairOutcome {
    Pass {
        invoice: ExtractedInvoice,
        trace: RepairTrace,
    },
    Fallback(FallbackResult),
}

impl RepairOutcome {
    pub fn invoice(&self) -> &ExtractedInvoice {
        match self {
            RepairOutcome::Pass { invoice, .. } => invoice,
            RepairOutcome::Fallback(f) => &f.best_effort,
        }
    }

    pub fn trace(&self) -> &RepairTrace {
        match self {
            RepairOutcome::Pass { trace, .. } => trace,
            RepairOutcome::Fallback(f) => &f.trace,
        }
    }

    pub fn passed(&self) -> bool {
        matches!(self, RepairOutcome::Pass { .. })
    }
}

/// The bounded validator-gated repair loop.
///
/// Initial parse, then up to `l_max` iterations of validate, explain,
/// targeted re-parse, merge, breaking as soon as validation passes. A final
/// validation decides between seeding downstream agents and the fallback
/// path. Repairs are additive: only implicated fields are re-requested.
pub fn repair_loop(doc: &SyntheticDocument, tau_c: f64, l_max: u32) -> RepairOutcome {
    let mut z = parse(doc, None);
    let mut parser_calls = 1u32;
    let mut validator_calls = 0u32;
    let mut iterations = Vec::new();

    for _ in 0..l_max {
        let report = validate(&z, tau_c);
        validator_calls += 1;
        if report.passed() {
            break;
        }
        let hints = explain(&report, doc.lines.len());
        let implicated = report.implicated_fields();
        iterations.push(RepairIteration {
            report,
            hints: hints.clone(),
        });
        let patch = parse(doc, Some(&hints));
        parser_calls += 1;
        z = merge(&z, &patch, &implicated).expect("hints cover exactly the implicated fields");
    }

    let final_report = validate(&z, tau_c);
    validator_calls += 1;
    let trace = RepairTrace {
        iterations,
        final_report: final_report.clone(),
        parser_calls,
        validator_calls,
    };
    if final_report.passed() {
        RepairOutcome::Pass { invoice: z, trace }
    } else {
        RepairOutcome::Fallback(FallbackResult {
            best_effort: z,
            trace,
        })
    }
}
