//! Engine configuration. Every constant named by the pipeline lives here,
//! is overridable from a JSON file, and is echoed into trace headers so a
//! run records exactly what it ran with.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricWeightsConfig {
    pub compliance: f64,
    pub sequencing: f64,
    pub parsimony: f64,
    pub prior: f64,
}

impl Default for RubricWeightsConfig {
    fn default() -> Self {
        RubricWeightsConfig {
            compliance: 0.4,
            sequencing: 0.3,
            parsimony: 0.2,
            prior: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Number of diversified candidate plans requested per task.
    pub candidate_count: usize,
    /// Repair-loop iteration budget.
    pub repair_budget: u32,
    /// Minimum per-field extraction confidence.
    pub confidence_threshold: f64,
    /// Robust z-score cut for amount anomalies.
    pub k_mad: f64,
    /// Minimum baseline sample count before vendor/cohort statistics apply.
    pub n_min: usize,
    pub rubric: RubricWeightsConfig,
    /// Penalty per legal-but-risky ordering inversion.
    pub sequencing_penalty: f64,
    /// Exemplar-similarity weight in the planner prior.
    pub similarity_weight: f64,
    /// Brevity weight in the planner prior.
    pub brevity_weight: f64,
    /// Extra-node count at which the brevity/parsimony term bottoms out.
    pub max_extra_nodes: u32,
    /// Rule id -> weight for graded risk scoring.
    pub risk_weights: BTreeMap<String, f64>,
    /// (review, block) score boundaries, left-closed.
    pub risk_tiers: (f64, f64),
    /// Duplicate-detection lookback window in days.
    pub lookback_days: i64,
    pub provenance_enforced: bool,
    /// Executor dispatch width.
    pub concurrency_limit: usize,
}

pub fn default_risk_weights() -> BTreeMap<String, f64> {
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

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            candidate_count: 5,
            repair_budget: 3,
            confidence_threshold: 0.7,
            k_mad: 3.5,
            n_min: 5,
            rubric: RubricWeightsConfig::default(),
            sequencing_penalty: 0.25,
            similarity_weight: 0.7,
            brevity_weight: 0.3,
            max_extra_nodes: 4,
            risk_weights: default_risk_weights(),
            risk_tiers: (0.3, 0.8),
            lookback_days: 90,
            provenance_enforced: false,
            concurrency_limit: 4,
        }
    }
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, Box<dyn std::error::Error>> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), Box<dyn std::error::Error>> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn policy_check(&self) -> crate::governance::PolicyCheckConfig {
        crate::governance::PolicyCheckConfig {
            provenance_enforced: self.provenance_enforced,
            lookback_days: self.lookback_days,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = EngineConfig::default();
        assert_eq!(c.candidate_count, 5);
        assert_eq!(c.repair_budget, 3);
        assert_eq!(c.confidence_threshold, 0.7);
        assert_eq!(c.k_mad, 3.5);
        assert_eq!(c.n_min, 5);
        assert_eq!(c.risk_tiers, (0.3, 0.8));
        assert_eq!(c.risk_weights["unknown_vendor"], 0.6);
    }

    #[test]
    fn partial_file_overrides_merge_with_defaults() {
        let parsed: EngineConfig = serde_json::from_str(r#"{"candidate_count": 7}"#).unwrap();
        assert_eq!(parsed.candidate_count, 7);
        assert_eq!(parsed.repair_budget, 3);
    }
}
