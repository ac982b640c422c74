//! Synthetic benchmark suites, end-to-end scenario runs, and metric tables.
//!
//! Four scenarios exercise the engine: a clean compliant set (CC), a
//! day-30 month-end batch (CM), unknown vendors (VU), and layout drift
//! with noise plus injected amount outliers (VL). Ground truth is computed
//! at generation time with the same robust statistics the detector uses,
//! so labels and detections share one oracle. Everything is a pure
//! function of (seed, config).

use crate::backends::{standard_registry_with_bank, DecisionKind, DecisionObject};
use crate::config::EngineConfig;
use crate::executor::ExecutionMode;
use crate::extraction::{
    CorruptionClass, ExtractedInvoice, Field, NoiseRecord, NormalizerClass, SyntheticDocument,
};
use crate::governance::{
    canonical_vendor, cohort_key, mad, median, z_mad, AnomalyBaseline, AnomalyKind, ConfusionCounts,
    ConfusionMetrics, PolicyRecord, PolicyStore, RunLedger, ViolationKind, ZScore, MAD_SCALE,
};
use crate::money::Amount;
use crate::pipeline::{run_document, EngineEnv};
use crate::planner::{ExemplarBank, TaskSignature};
use crate::task::{InputKind, RawInput, TaskType};
use crate::trace::ExecutionTrace;
use chrono::{Days, NaiveDate};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

// ---------------------------------------------------------------------------
// Suite configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "CM")]
    Cm,
    #[serde(rename = "VU")]
    Vu,
    #[serde(rename = "VL")]
    Vl,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Cc, Scenario::Cm, Scenario::Vu, Scenario::Vl];

    pub fn code(self) -> &'static str {
        match self {
            Scenario::Cc => "CC",
            Scenario::Cm => "CM",
            Scenario::Vu => "VU",
            Scenario::Vl => "VL",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        match s.to_ascii_uppercase().as_str() {
            "CC" => Some(Scenario::Cc),
            "CM" => Some(Scenario::Cm),
            "VU" => Some(Scenario::Vu),
            "VL" => Some(Scenario::Vl),
            _ => None,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Per-class corruption probabilities (VL only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseLevels {
    pub char_sub_label: f64,
    pub label_swap: f64,
    pub line_shift: f64,
    pub decimal_swap: f64,
    pub future_date: f64,
    pub destroy_field: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            char_sub_label: 0.3,
            label_swap: 0.2,
            line_shift: 0.3,
            decimal_swap: 0.4,
            future_date: 0.15,
            destroy_field: 0.1,
        }
    }
}

impl NoiseLevels {
    pub fn zero() -> Self {
        NoiseLevels {
            char_sub_label: 0.0,
            label_swap: 0.0,
            line_shift: 0.0,
            decimal_swap: 0.0,
            future_date: 0.0,
            destroy_field: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        [
            self.char_sub_label,
            self.label_swap,
            self.line_shift,
            self.decimal_swap,
            self.future_date,
            self.destroy_field,
        ]
        .iter()
        .all(|p| *p == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInjections {
    pub count: usize,
    /// Target robust z range for injected outliers.
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub scenario: Scenario,
    pub invoices_per_scenario: usize,
    pub seed: u64,
    pub noise: NoiseLevels,
    pub anomaly_injections: AnomalyInjections,
    pub run_date: NaiveDate,
}

impl SuiteConfig {
    pub fn for_scenario(scenario: Scenario, seed: u64) -> Self {
        let mid_month = NaiveDate::from_ymd_opt(2026, 3, 2).expect("valid date");
        let day_30 = NaiveDate::from_ymd_opt(2026, 3, 30).expect("valid date");
        match scenario {
            Scenario::Cc => SuiteConfig {
                scenario,
                invoices_per_scenario: 10,
                seed,
                noise: NoiseLevels::zero(),
                anomaly_injections: AnomalyInjections { count: 0, z_min: 8.0, z_max: 40.0 },
                run_date: mid_month,
            },
            Scenario::Cm => SuiteConfig {
                scenario,
                invoices_per_scenario: 10,
                seed,
                noise: NoiseLevels::zero(),
                anomaly_injections: AnomalyInjections { count: 2, z_min: 8.0, z_max: 40.0 },
                run_date: day_30,
            },
            Scenario::Vu => SuiteConfig {
                scenario,
                invoices_per_scenario: 10,
                seed,
                noise: NoiseLevels::zero(),
                anomaly_injections: AnomalyInjections { count: 0, z_min: 8.0, z_max: 40.0 },
                run_date: mid_month,
            },
            Scenario::Vl => SuiteConfig {
                scenario,
                invoices_per_scenario: 10,
                seed,
                noise: NoiseLevels::default(),
                anomaly_injections: AnomalyInjections { count: 2, z_min: 8.0, z_max: 40.0 },
                run_date: mid_month,
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{scenario} must have zero corruption probability")]
    NoiseOnCleanScenario { scenario: Scenario },
    #[error("month-end scenario requires a day-30 run date, got {0}")]
    NotDay30(NaiveDate),
    #[error("injection count {count} exceeds invoice count {invoices}")]
    TooManyInjections { count: usize, invoices: usize },
    #[error("unknown-vendor scenario requires {vendor:?} absent from the policy store")]
    VendorLeak { vendor: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("store: {0}")]
    Store(#[from] crate::governance::StoreError),
}

// ---------------------------------------------------------------------------
// Vendors, store, baselines
// ---------------------------------------------------------------------------

const KNOWN_VENDORS: [(&str, &str, &str); 8] = [
    ("Acme Corp", "manufacturing", "USD"),
    ("Globex Industrial", "manufacturing", "USD"),
    ("Initech Solutions", "software", "USD"),
    ("Umbrella Supply", "logistics", "EUR"),
    ("Stark Components", "manufacturing", "USD"),
    ("Wayne Logistics", "logistics", "EUR"),
    ("Tyrell Materials", "materials", "USD"),
    ("Aperture Labs", "software", "EUR"),
];

const UNKNOWN_VENDORS: [&str; 10] = [
    "Phantom Trading",
    "Nimbus Shell Co",
    "Vaporware Ltd",
    "Mirage Holdings",
    "Specter Imports",
    "Hollow Vendors",
    "Ghost Freight",
    "Null Entity",
    "Obscura Group",
    "Shade Services",
];

fn vendor_center_cents(index: usize) -> i64 {
    80_000 + 15_000 * index as i64
}

/// The policy store every shipped suite runs against.
pub fn standard_policy_store() -> PolicyStore {
    let mut store = PolicyStore::default();
    for (vendor, sector, currency) in KNOWN_VENDORS {
        store
            .insert(PolicyRecord {
                vendor: vendor.to_string(),
                sector: sector.to_string(),
                currency: currency.to_string(),
                threshold: Amount::from_cents(2_500_000),
                terms: "net30".to_string(),
            })
            .expect("standard records are valid");
    }
    store
}

/// Seeded vendor baselines with pooled cohort and global histories.
pub fn standard_baselines(seed: u64, n_min: usize) -> AnomalyBaseline {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xBA5E_11E5);
    let mut baselines = AnomalyBaseline {
        n_min,
        ..AnomalyBaseline::default()
    };
    for (idx, (vendor, sector, currency)) in KNOWN_VENDORS.iter().enumerate() {
        let center = vendor_center_cents(idx);
        let spread = center * 8 / 100;
        let history: Vec<Amount> = (0..8)
            .map(|_| Amount::from_cents(center + rng.gen_range(-spread..=spread)))
            .collect();
        baselines
            .cohorts
            .entry(cohort_key(sector, currency))
            .or_default()
            .extend(history.iter().copied());
        baselines.global.extend(history.iter().copied());
        baselines.vendors.insert(canonical_vendor(vendor), history);
    }
    baselines
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvoiceTruth {
    pub invoice_number: String,
    pub issue_date: NaiveDate,
    pub due_date: NaiveDate,
    pub vendor: String,
    pub currency: String,
    pub total: Amount,
    pub violation_labels: Vec<ViolationKind>,
    pub anomaly_labels: Vec<AnomalyKind>,
    /// Robust z of the total against the oracle-selected baseline.
    pub oracle_z: Option<f64>,
    pub noise: Vec<NoiseRecord>,
}

impl InvoiceTruth {
    pub fn has_violation(&self) -> bool {
        !self.violation_labels.is_empty()
    }

    pub fn has_anomaly(&self) -> bool {
        !self.anomaly_labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: Scenario,
    pub seed: u64,
    pub run_date: NaiveDate,
    pub invoices: Vec<InvoiceTruth>,
}

/// A generated suite: documents, labels, and the stores they run against.
#[derive(Debug, Clone)]
pub struct SuiteBundle {
    pub config: SuiteConfig,
    pub documents: Vec<SyntheticDocument>,
    pub truth: GroundTruth,
    pub policy: PolicyStore,
    pub baselines: AnomalyBaseline,
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn format_european(a: Amount) -> String {
    let cents = a.cents();
    let whole = cents / 100;
    let frac = cents % 100;
    let mut digits = whole.to_string();
    let mut grouped = String::new();
    while digits.len() > 3 {
        let tail = digits.split_off(digits.len() - 3);
        grouped = if grouped.is_empty() {
            tail
        } else {
            format!("{tail}.{grouped}")
        };
    }
    let head = digits;
    let int_part = if grouped.is_empty() {
        head
    } else {
        format!("{head}.{grouped}")
    };
    format!("{int_part},{frac:02}")
}

struct CorruptionDraw {
    char_sub_label: bool,
    label_swap: bool,
    line_shift: bool,
    decimal_swap: bool,
    future_date: bool,
    destroy_field: bool,
}

/// Generates the documents and oracle-labeled ground truth for one scenario.
pub fn generate_suite(
    cfg: &SuiteConfig,
    store: &PolicyStore,
    baselines: &AnomalyBaseline,
) -> Result<(Vec<SyntheticDocument>, GroundTruth), ConfigError> {
    match cfg.scenario {
        Scenario::Cc | Scenario::Cm | Scenario::Vu => {
            if !cfg.noise.is_zero() {
                return Err(ConfigError::NoiseOnCleanScenario {
                    scenario: cfg.scenario,
                });
            }
        }
        Scenario::Vl => {}
    }
    if cfg.scenario == Scenario::Cm && cfg.run_date.format("%d").to_string() != "30" {
        return Err(ConfigError::NotDay30(cfg.run_date));
    }
    if cfg.anomaly_injections.count > cfg.invoices_per_scenario {
        return Err(ConfigError::TooManyInjections {
            count: cfg.anomaly_injections.count,
            invoices: cfg.invoices_per_scenario,
        });
    }
    if cfg.scenario == Scenario::Vu {
        if let Some(leaked) = UNKNOWN_VENDORS
            .iter()
            .find(|v| store.records.contains_key(&canonical_vendor(v)))
        {
            return Err(ConfigError::VendorLeak {
                vendor: leaked.to_string(),
            });
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ ((cfg.scenario as u64 + 1) << 32));
    let n = cfg.invoices_per_scenario;

    // Which invoices carry injected amount outliers.
    let injected: BTreeSet<usize> = {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        indices.into_iter().take(cfg.anomaly_injections.count).collect()
    };

    let number_base = 1000 * (cfg.scenario as u64 + 1);
    let global_median_cents = median(
        &baselines
            .global
            .iter()
            .map(|a| a.as_f64())
            .collect::<Vec<f64>>(),
    )
    .map(|m| (m * 100.0).round() as i64)
    .unwrap_or(100_000);

    let mut documents = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);

    for i in 0..n {
        let (vendor, sector, currency): (&str, Option<&str>, &str) = match cfg.scenario {
            Scenario::Vu => (UNKNOWN_VENDORS[i % UNKNOWN_VENDORS.len()], None, "USD"),
            _ => {
                let (v, s, c) = KNOWN_VENDORS[i % KNOWN_VENDORS.len()];
                (v, Some(s), c)
            }
        };
        let invoice_number = format!("INV-2026-{}", number_base + i as u64);
        let issue_date = cfg.run_date - Days::new(35 + (i as u64 % 14));
        let due_date = issue_date + Days::new(30);

        // The oracle baseline is selected exactly the way the detector
        // selects it at run time.
        let selected = baselines.select(Some(vendor), sector, Some(currency));
        let total = draw_amount(
            &mut rng,
            cfg,
            i,
            injected.contains(&i),
            selected.as_ref().map(|(_, h)| h.as_slice()),
            global_median_cents,
        );
        let oracle_z = selected.as_ref().and_then(|(_, history)| {
            match z_mad(total.as_f64(), history) {
                Ok(ZScore::Defined(z)) => Some(z),
                _ => None,
            }
        });

        // Corruption plan (VL only), sanitized so that every invoice
        // carrying an anomaly label stays recoverable by the repair loop.
        let mut draw = CorruptionDraw {
            char_sub_label: rng.gen_bool(cfg.noise.char_sub_label),
            label_swap: rng.gen_bool(cfg.noise.label_swap),
            line_shift: rng.gen_bool(cfg.noise.line_shift),
            decimal_swap: rng.gen_bool(cfg.noise.decimal_swap),
            future_date: rng.gen_bool(cfg.noise.future_date),
            destroy_field: rng.gen_bool(cfg.noise.destroy_field),
        };
        let anomalous = injected.contains(&i) || draw.future_date;
        if anomalous {
            draw.label_swap = false;
            draw.line_shift = false;
            draw.destroy_field = false;
        }
        if draw.destroy_field {
            draw.label_swap = false;
            draw.line_shift = false;
        }

        let due_date = if draw.future_date {
            cfg.run_date + Days::new(30 + (i as u64 % 30))
        } else {
            due_date
        };

        // Document lines in canonical layout.
        let item_a = Amount::from_cents(total.cents() * 3 / 5);
        let item_b = Amount::from_cents(total.cents() - item_a.cents());
        let mut lines = vec![
            format!("INVOICE NUMBER: {invoice_number}"),
            format!("ISSUE DATE: {issue_date}"),
            format!("DUE DATE: {due_date}"),
            format!("VENDOR: {vendor}"),
            format!("CURRENCY: {currency}"),
            format!("TOTAL: {total}"),
            format!("ITEM: Services rendered | {item_a}"),
            format!("ITEM: Handling | {item_b}"),
        ];
        let mut noise = Vec::new();

        if draw.char_sub_label {
            lines[0] = lines[0].replacen("INVOICE", "INV0ICE", 1);
            noise.push(NoiseRecord {
                class: CorruptionClass::CharSubstitution,
                field: Field::InvoiceNumber,
                reversible: true,
                normalizer: Some(NormalizerClass::RelaxedLabel),
            });
        }
        if draw.label_swap {
            lines[1] = format!("VENDOR: {issue_date}");
            lines[3] = format!("ISSUE DATE: {vendor}");
            for field in [Field::IssueDate, Field::Vendor] {
                noise.push(NoiseRecord {
                    class: CorruptionClass::LabelSwap,
                    field,
                    reversible: true,
                    normalizer: Some(NormalizerClass::Roi),
                });
            }
        }
        if draw.decimal_swap {
            lines[5] = format!("TOTAL: {}", format_european(total));
            noise.push(NoiseRecord {
                class: CorruptionClass::DecimalSeparatorSwap,
                field: Field::Total,
                reversible: true,
                normalizer: Some(NormalizerClass::Amount),
            });
        }
        if draw.future_date {
            noise.push(NoiseRecord {
                class: CorruptionClass::FutureDateInjection,
                field: Field::DueDate,
                reversible: false,
                normalizer: None,
            });
        }
        if draw.line_shift {
            let vendor_pos = lines
                .iter()
                .position(|l| l.starts_with("VENDOR:"))
                .expect("vendor line present");
            let line = lines.remove(vendor_pos);
            lines.push(String::new());
            lines.push(line);
            noise.push(NoiseRecord {
                class: CorruptionClass::LineShift,
                field: Field::Vendor,
                reversible: true,
                normalizer: Some(NormalizerClass::Roi),
            });
        }
        if draw.destroy_field {
            let vendor_pos = lines
                .iter()
                .position(|l| l.starts_with("VENDOR:"))
                .expect("vendor line present");
            lines[vendor_pos] = "VENDOR:".to_string();
            noise.push(NoiseRecord {
                class: CorruptionClass::CharSubstitution,
                field: Field::Vendor,
                reversible: false,
                normalizer: None,
            });
        }

        // Oracle labels.
        let mut violation_labels = Vec::new();
        if cfg.scenario == Scenario::Vu {
            violation_labels.push(ViolationKind::UnknownVendor);
        }
        let mut anomaly_labels = Vec::new();
        if oracle_z.is_some_and(|z| z > 3.5) {
            anomaly_labels.push(AnomalyKind::Amount);
        }
        if issue_date > cfg.run_date || due_date > cfg.run_date {
            anomaly_labels.push(AnomalyKind::FutureDate);
        }

        let document = SyntheticDocument {
            lines,
            line_items: Some(vec![
                ("Services rendered".to_string(), item_a),
                ("Handling".to_string(), item_b),
            ]),
            noise_meta: noise.clone(),
        };
        debug_assert!(document.invariants_hold());
        documents.push(document);
        truths.push(InvoiceTruth {
            invoice_number,
            issue_date,
            due_date,
            vendor: vendor.to_string(),
            currency: currency.to_string(),
            total,
            violation_labels,
            anomaly_labels,
            oracle_z,
            noise,
        });
    }

    Ok((
        documents,
        GroundTruth {
            scenario: cfg.scenario,
            seed: cfg.seed,
            run_date: cfg.run_date,
            invoices: truths,
        },
    ))
}

fn draw_amount(
    rng: &mut ChaCha20Rng,
    cfg: &SuiteConfig,
    index: usize,
    inject: bool,
    history: Option<&[f64]>,
    global_median_cents: i64,
) -> Amount {
    match history {
        Some(history) if inject => {
            let med = median(history).expect("non-empty baseline");
            let spread = mad(history).expect("non-empty baseline").max(0.01);
            let z_target = rng.gen_range(cfg.anomaly_injections.z_min..cfg.anomaly_injections.z_max);
            let mut amount = med + MAD_SCALE * spread * z_target;
            // Certify the label with the oracle itself.
            for _ in 0..24 {
                match z_mad(amount, history) {
                    Ok(ZScore::Defined(z)) if z > 3.5 => break,
                    _ => amount *= 1.5,
                }
            }
            Amount::from_cents((amount * 100.0).round() as i64)
        }
        Some(history) => {
            let med = median(history).expect("non-empty baseline");
            let med_cents = (med * 100.0).round() as i64;
            let spread = med_cents / 12;
            for _ in 0..8 {
                let cents = med_cents + rng.gen_range(-spread..=spread);
                let candidate = Amount::from_cents(cents);
                match z_mad(candidate.as_f64(), history) {
                    Ok(ZScore::Defined(z)) if z <= 2.5 => return candidate,
                    Ok(ZScore::Undefined) => return candidate,
                    _ => continue,
                }
            }
            Amount::from_cents(med_cents)
        }
        None => {
            let spread = global_median_cents / 20;
            let offset = rng.gen_range(-spread..=spread);
            let _ = index;
            Amount::from_cents(global_median_cents + offset)
        }
    }
}

/// Generates the full bundle for one scenario: store, baselines, documents,
/// truth.
pub fn generate_bundle(cfg: &SuiteConfig) -> Result<SuiteBundle, ConfigError> {
    let policy = standard_policy_store();
    let baselines = standard_baselines(cfg.seed, EngineConfig::default().n_min);
    let (documents, truth) = generate_suite(cfg, &policy, &baselines)?;
    Ok(SuiteBundle {
        config: cfg.clone(),
        documents,
        truth,
        policy,
        baselines,
    })
}

// ---------------------------------------------------------------------------
// Suite directory I/O
// ---------------------------------------------------------------------------

pub fn save_suite(bundle: &SuiteBundle, dir: &Path) -> Result<(), ConfigError> {
    std::fs::create_dir_all(dir.join("documents"))?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&bundle.config)?,
    )?;
    std::fs::write(
        dir.join("truth.json"),
        serde_json::to_string_pretty(&bundle.truth)?,
    )?;
    for (i, doc) in bundle.documents.iter().enumerate() {
        std::fs::write(dir.join(format!("documents/inv_{i:03}.txt")), doc.to_text())?;
    }
    bundle.policy.save_dir(&dir.join("policy"))?;
    std::fs::write(
        dir.join("baselines.json"),
        serde_json::to_string_pretty(&bundle.baselines)?,
    )?;
    Ok(())
}

pub fn load_suite(dir: &Path) -> Result<SuiteBundle, ConfigError> {
    let config: SuiteConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
    let truth: GroundTruth =
        serde_json::from_str(&std::fs::read_to_string(dir.join("truth.json"))?)?;
    let mut documents = Vec::new();
    for i in 0..truth.invoices.len() {
        let text = std::fs::read_to_string(dir.join(format!("documents/inv_{i:03}.txt")))?;
        documents.push(SyntheticDocument::from_text(&text));
    }
    let policy = PolicyStore::load_dir(&dir.join("policy"))?;
    let baselines: AnomalyBaseline =
        serde_json::from_str(&std::fs::read_to_string(dir.join("baselines.json"))?)?;
    Ok(SuiteBundle {
        config,
        documents,
        truth,
        policy,
        baselines,
    })
}

// ---------------------------------------------------------------------------
// Scenario runs
// ---------------------------------------------------------------------------

/// Run product for one document, with everything scoring needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub trace_id: String,
    pub decision: DecisionObject,
    pub extraction: ExtractedInvoice,
    pub violation_kinds: Vec<ViolationKind>,
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub fallback: bool,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub outcomes: Vec<OutcomeSummary>,
    pub traces: Vec<Option<ExecutionTrace>>,
    pub ledger: RunLedger,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Runs every document of a suite through the plan-select-act loop.
/// Documents are processed in index order so shared history stays
/// deterministic; parallelism lives inside each document's DAG.
pub fn run_scenario(bundle: &SuiteBundle, config: &EngineConfig, mode: ExecutionMode) -> ScenarioRun {
    let bank = ExemplarBank::standard();
    let env = EngineEnv {
        registry: standard_registry_with_bank(Arc::new(bank.clone())),
        config: config.clone(),
        bank,
        policy: bundle.policy.clone(),
        baselines: bundle.baselines.clone(),
        today: bundle.config.run_date,
    };
    let mut ledger = RunLedger::default();
    let mut outcomes = Vec::new();
    let mut traces = Vec::new();

    let channel = match bundle.config.scenario {
        Scenario::Cm => "scheduler_batch",
        _ => "upload",
    };
    for (i, doc) in bundle.documents.iter().enumerate() {
        let trace_id = format!("{}-{}-{i:03}", bundle.config.scenario, bundle.config.seed);
        let raw = RawInput {
            kind: InputKind::File,
            payload: doc.to_text(),
            filename: Some(format!("inv_{i:03}.txt")),
            channel: channel.to_string(),
            received_at: format!("{}T09:00:00Z", bundle.config.run_date),
            instruction: None,
        };
        let started = now_ms();
        match run_document(&raw, &env, &mut ledger, &trace_id, mode) {
            Ok(result) => {
                let ended = now_ms();
                let trace = ExecutionTrace::from_result(
                    &result,
                    &raw,
                    &env,
                    &trace_id,
                    Some(bundle.config.scenario.code().to_string()),
                    Some(bundle.config.seed),
                    started,
                    ended,
                );
                outcomes.push(OutcomeSummary {
                    trace_id,
                    decision: result.decision.clone(),
                    extraction: result.invoice.clone(),
                    violation_kinds: result.violations.iter().map(|v| v.kind).collect(),
                    anomaly_kinds: result.anomalies.iter().map(|a| a.kind).collect(),
                    fallback: result.repair.as_ref().is_some_and(|r| !r.passed()),
                    error: None,
                });
                traces.push(Some(trace));
            }
            Err(e) => {
                // Per-document failures hold; the batch continues.
                outcomes.push(OutcomeSummary {
                    trace_id: trace_id.clone(),
                    decision: DecisionObject {
                        decision: DecisionKind::Hold,
                        rationale: vec![crate::backends::RationaleItem {
                            kind: "engine".into(),
                            reference: "pipeline_error".into(),
                            detail: e.to_string(),
                        }],
                        trace_id,
                    },
                    extraction: ExtractedInvoice::default(),
                    violation_kinds: Vec::new(),
                    anomaly_kinds: Vec::new(),
                    fallback: true,
                    error: Some(e.to_string()),
                });
                traces.push(None);
            }
        }
    }
    ScenarioRun {
        scenario: bundle.config.scenario,
        outcomes,
        traces,
        ledger,
    }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

fn field_matches(field: Field, extraction: &ExtractedInvoice, truth: &InvoiceTruth) -> Option<bool> {
    match field {
        Field::InvoiceNumber => extraction
            .invoice_number
            .as_deref()
            .map(|v| v.eq_ignore_ascii_case(truth.invoice_number.trim())),
        Field::IssueDate => extraction.issue_date.map(|d| d == truth.issue_date),
        Field::Vendor => extraction
            .vendor
            .as_deref()
            .map(|v| canonical_vendor(v) == canonical_vendor(&truth.vendor)),
        Field::Total => extraction.total.map(|t| t == truth.total),
        Field::DueDate => extraction.due_date.map(|d| d == truth.due_date),
        Field::Currency => extraction
            .currency
            .as_deref()
            .map(|c| c == truth.currency),
    }
}

/// Field-level extraction counts over the four required fields.
/// Extracted-and-equal is a true positive, extracted-but-wrong a false
/// positive, missed a false negative; a true negative needs an absent
/// truth, which the generator never produces for required fields.
pub fn score_extraction(outcomes: &[OutcomeSummary], truth: &GroundTruth) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for (outcome, inv_truth) in outcomes.iter().zip(&truth.invoices) {
        for field in Field::REQUIRED {
            match field_matches(field, &outcome.extraction, inv_truth) {
                Some(true) => counts.true_pos += 1,
                Some(false) => counts.false_pos += 1,
                None => counts.false_neg += 1,
            }
        }
    }
    counts
}

/// Per-invoice binary violation detection counts.
pub fn score_policy(outcomes: &[OutcomeSummary], truth: &GroundTruth) -> ConfusionCounts {
    let predicted: Vec<bool> = outcomes.iter().map(|o| !o.violation_kinds.is_empty()).collect();
    let labels: Vec<bool> = truth.invoices.iter().map(InvoiceTruth::has_violation).collect();
    ConfusionCounts::from_labels(&predicted, &labels)
}

/// Per-invoice binary anomaly detection counts.
pub fn score_anomaly(outcomes: &[OutcomeSummary], truth: &GroundTruth) -> ConfusionCounts {
    let predicted: Vec<bool> = outcomes.iter().map(|o| !o.anomaly_kinds.is_empty()).collect();
    let labels: Vec<bool> = truth.invoices.iter().map(InvoiceTruth::has_anomaly).collect();
    ConfusionCounts::from_labels(&predicted, &labels)
}

// ---------------------------------------------------------------------------
// Metric tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub counts: ConfusionCounts,
    pub metrics: ConfusionMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub extraction: Vec<MetricRow>,
    pub policy: Vec<MetricRow>,
    pub anomaly: Vec<MetricRow>,
}

fn rows_with_total(mut rows: Vec<MetricRow>) -> Vec<MetricRow> {
    let mut total = ConfusionCounts::default();
    for row in &rows {
        total.add(&row.counts);
    }
    rows.push(MetricRow {
        scenario: "TOTAL".to_string(),
        counts: total,
        metrics: total.metrics(),
    });
    rows
}

/// Builds the three tables (extraction, policy, anomaly) over any number of
/// scenario runs, each with a TOTAL row.
pub fn build_report(runs: &[(&ScenarioRun, &GroundTruth)]) -> MetricsReport {
    let mut extraction = Vec::new();
    let mut policy = Vec::new();
    let mut anomaly = Vec::new();
    for (run, truth) in runs {
        let code = run.scenario.code().to_string();
        let ex = score_extraction(&run.outcomes, truth);
        extraction.push(MetricRow {
            scenario: code.clone(),
            counts: ex,
            metrics: ex.metrics(),
        });
        let po = score_policy(&run.outcomes, truth);
        policy.push(MetricRow {
            scenario: code.clone(),
            counts: po,
            metrics: po.metrics(),
        });
        let an = score_anomaly(&run.outcomes, truth);
        anomaly.push(MetricRow {
            scenario: code,
            counts: an,
            metrics: an.metrics(),
        });
    }
    MetricsReport {
        extraction: rows_with_total(extraction),
        policy: rows_with_total(policy),
        anomaly: rows_with_total(anomaly),
    }
}

fn fmt_metric(m: Option<f64>) -> String {
    match m {
        Some(v) => format!("{v:.4}"),
        None => "\u{2014}".to_string(),
    }
}

fn render_table(title: &str, positive_label: &str, rows: &[MetricRow]) -> String {
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    let (tp, fp, fnn, tn) = match positive_label {
        "V" => ("TPV", "FPV", "FNV", "TNV"),
        _ => ("TP", "FP", "FN", "TN"),
    };
    out.push_str(&format!(
        "{:<10} {:>6} {:>5} {:>5} {:>5} {:>5} {:>10} {:>10} {:>10}\n",
        "Scenario", "total", tp, fp, fnn, tn, "precision", "recall", "f1"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<10} {:>6} {:>5} {:>5} {:>5} {:>5} {:>10} {:>10} {:>10}\n",
            row.scenario,
            row.counts.total(),
            row.counts.true_pos,
            row.counts.false_pos,
            row.counts.false_neg,
            row.counts.true_neg,
            fmt_metric(row.metrics.precision),
            fmt_metric(row.metrics.recall),
            fmt_metric(row.metrics.f1),
        ));
    }
    out
}

pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&render_table(
        "Extraction by scenario (required fields: invoice number, date, vendor, total)",
        "E",
        &report.extraction,
    ));
    out.push('\n');
    out.push_str(&render_table("Policy (violation detection)", "V", &report.policy));
    out.push('\n');
    out.push_str(&render_table("Anomaly (robust score and date checks)", "A", &report.anomaly));
    out
}

// ---------------------------------------------------------------------------
// Run outputs
// ---------------------------------------------------------------------------

fn field_type_name(field: Field) -> &'static str {
    match field {
        Field::InvoiceNumber | Field::Vendor => "Text",
        Field::IssueDate | Field::DueDate => "Date",
        Field::Currency => "CurrencyCode",
        Field::Total => "Money",
    }
}

/// The validated record artifact: fields with values, confidences, and type
/// signatures.
pub fn validated_record_json(extraction: &ExtractedInvoice, fallback: bool) -> serde_json::Value {
    let mut fields = serde_json::Map::new();
    for field in Field::ALL {
        let value = match field {
            Field::InvoiceNumber => extraction.invoice_number.clone().map(serde_json::Value::from),
            Field::IssueDate => extraction.issue_date.map(|d| serde_json::Value::from(d.to_string())),
            Field::DueDate => extraction.due_date.map(|d| serde_json::Value::from(d.to_string())),
            Field::Vendor => extraction.vendor.clone().map(serde_json::Value::from),
            Field::Currency => extraction.currency.clone().map(serde_json::Value::from),
            Field::Total => extraction.total.map(|t| serde_json::Value::from(t.to_string())),
        };
        let key = serde_json::to_value(field)
            .expect("field serializes")
            .as_str()
            .expect("field is a string")
            .to_string();
        fields.insert(
            key,
            serde_json::json!({
                "value": value,
                "confidence": extraction.confidence.get(&field),
                "type": field_type_name(field),
            }),
        );
    }
    serde_json::json!({
        "fields": fields,
        "line_items": extraction.line_items,
        "artifacts": extraction.artifacts,
        "verdict": if fallback { "fallback" } else { "pass" },
    })
}

/// Writes records, decisions, traces, metrics, and the exemplar feedback
/// file for one scenario run.
pub fn emit_outputs(
    run: &ScenarioRun,
    truth: &GroundTruth,
    dir: &Path,
) -> Result<(), ConfigError> {
    for sub in ["records", "decisions", "traces"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    for (i, outcome) in run.outcomes.iter().enumerate() {
        std::fs::write(
            dir.join(format!("records/record_{i:03}.json")),
            serde_json::to_string_pretty(&validated_record_json(&outcome.extraction, outcome.fallback))?,
        )?;
        std::fs::write(
            dir.join(format!("decisions/decision_{i:03}.json")),
            serde_json::to_string_pretty(&outcome.decision)?,
        )?;
        if let Some(trace) = &run.traces[i] {
            trace.save(&dir.join(format!("traces/trace_{i:03}.json")))?;
        }
    }
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&run.outcomes)?,
    )?;

    let report = build_report(&[(run, truth)]);
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(dir.join("metrics.txt"), render_report(&report))?;

    // Approved runs feed their core chains back into the exemplar file.
    let mut feedback = std::fs::File::create(dir.join("feedback.jsonl"))?;
    for (outcome, trace) in run.outcomes.iter().zip(&run.traces) {
        if outcome.decision.decision != DecisionKind::Approve {
            continue;
        }
        let Some(trace) = trace else { continue };
        let chosen = &trace.candidates[trace.selection.chosen_index];
        let key = crate::planner::equivalence_key(chosen);
        let line = serde_json::json!({
            "signature": TaskSignature {
                task_type: Some(TaskType::DocumentParsing),
                month_end: Some(trace.task.is_month_end()),
                has_file: None,
            },
            "chain": key.core_chain,
            "rationale": format!("approved run {}", outcome.trace_id),
            "weight": 0.5,
        });
        writeln!(feedback, "{line}")?;
    }
    Ok(())
}

/// Recomputes metrics from a run directory and compares them with the
/// metrics the run emitted. Used by evaluation to catch drift.
pub fn recheck_run_dir(run_dir: &Path, truth: &GroundTruth) -> Result<(MetricsReport, bool), ConfigError> {
    let outcomes: Vec<OutcomeSummary> =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json"))?)?;
    let emitted: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json"))?)?;
    let scenario = truth.scenario;
    let run = ScenarioRun {
        scenario,
        traces: outcomes.iter().map(|_| None).collect(),
        outcomes,
        ledger: RunLedger::default(),
    };
    let recomputed = build_report(&[(&run, truth)]);
    let matches = recomputed == emitted;
    Ok((recomputed, matches))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SuiteConfig::for_scenario(Scenario::Vl, 42);
        let a = generate_bundle(&cfg).unwrap();
        let b = generate_bundle(&cfg).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(
            a.documents.iter().map(SyntheticDocument::to_text).collect::<Vec<_>>(),
            b.documents.iter().map(SyntheticDocument::to_text).collect::<Vec<_>>()
        );
    }

    #[test]
    fn cc_suite_has_no_labels() {
        let bundle = generate_bundle(&SuiteConfig::for_scenario(Scenario::Cc, 42)).unwrap();
        assert_eq!(bundle.documents.len(), 10);
        assert!(bundle.truth.invoices.iter().all(|t| !t.has_violation()));
        assert!(bundle.truth.invoices.iter().all(|t| !t.has_anomaly()));
        assert!(bundle.truth.invoices.iter().all(|t| t.noise.is_empty()));
    }

    #[test]
    fn vu_suite_labels_every_invoice_unknown_vendor() {
        let bundle = generate_bundle(&SuiteConfig::for_scenario(Scenario::Vu, 42)).unwrap();
        assert_eq!(bundle.truth.invoices.len(), 10);
        for t in &bundle.truth.invoices {
            assert_eq!(t.violation_labels, vec![ViolationKind::UnknownVendor]);
            assert!(
                !bundle.policy.records.contains_key(&canonical_vendor(&t.vendor)),
                "{} leaked into the store",
                t.vendor
            );
        }
    }

    #[test]
    fn vl_suite_injects_exactly_the_configured_outliers() {
        let cfg = SuiteConfig::for_scenario(Scenario::Vl, 42);
        let bundle = generate_bundle(&cfg).unwrap();
        let amount_labels = bundle
            .truth
            .invoices
            .iter()
            .filter(|t| t.anomaly_labels.contains(&AnomalyKind::Amount))
            .count();
        assert_eq!(amount_labels, cfg.anomaly_injections.count);
        for t in &bundle.truth.invoices {
            if t.anomaly_labels.contains(&AnomalyKind::Amount) {
                assert!(t.oracle_z.unwrap() > 3.5);
            }
        }
    }

    #[test]
    fn clean_scenarios_reject_noise() {
        let mut cfg = SuiteConfig::for_scenario(Scenario::Cc, 1);
        cfg.noise.decimal_swap = 0.5;
        assert!(matches!(
            generate_bundle(&cfg),
            Err(ConfigError::NoiseOnCleanScenario { .. })
        ));
    }

    #[test]
    fn suite_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = generate_bundle(&SuiteConfig::for_scenario(Scenario::Vl, 7)).unwrap();
        save_suite(&bundle, dir.path()).unwrap();
        let loaded = load_suite(dir.path()).unwrap();
        assert_eq!(loaded.config, bundle.config);
        assert_eq!(loaded.truth, bundle.truth);
        assert_eq!(
            loaded.documents.iter().map(SyntheticDocument::to_text).collect::<Vec<_>>(),
            bundle.documents.iter().map(SyntheticDocument::to_text).collect::<Vec<_>>()
        );
        // The loaded documents carry no ground-truth side channel.
        assert!(loaded.documents.iter().all(|d| d.noise_meta.is_empty()));
    }

    #[test]
    fn cc_run_approves_everything() {
        let bundle = generate_bundle(&SuiteConfig::for_scenario(Scenario::Cc, 42)).unwrap();
        let run = run_scenario(&bundle, &EngineConfig::default(), ExecutionMode::Concurrent);
        assert_eq!(run.outcomes.len(), 10);
        for o in &run.outcomes {
            assert_eq!(o.decision.decision, DecisionKind::Approve, "{:?}", o);
        }
        let report = build_report(&[(&run, &bundle.truth)]);
        let ex = &report.extraction[0];
        assert_eq!(ex.counts.true_pos, 40);
        assert_eq!(ex.metrics.precision, Some(1.0));
        assert_eq!(ex.metrics.recall, Some(1.0));
    }

    #[test]
    fn metric_rendering_uses_em_dash_for_undefined() {
        let row = MetricRow {
            scenario: "CC".into(),
            counts: ConfusionCounts {
                true_pos: 0,
                false_pos: 0,
                false_neg: 0,
                true_neg: 10,
            },
            metrics: ConfusionCounts {
                true_pos: 0,
                false_pos: 0,
                false_neg: 0,
                true_neg: 10,
            }
            .metrics(),
        };
        let text = render_table("Anomaly", "A", &[row]);
        assert!(text.contains('\u{2014}'));
    }
}
