//! Run configuration: one JSON document with fixed sections, rejected on
//! unknown keys, hashed for provenance, and round-tripping losslessly.

use crate::cost::CandidateSet;
use crate::dp::Budget;
use crate::error::{Error, Result};
use crate::model::ToyDiTConfig;
use crate::selector::SelectorWeights;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Environment variable that overrides the training seed (CI hook).
pub const SEED_ENV_VAR: &str = "SPARSE_SCHED_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateSection {
    /// retention-fraction grid spacing; must divide 1
    pub interval: f64,
}

impl Default for CandidateSection {
    fn default() -> Self {
        CandidateSection { interval: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    /// target fraction of slot-units served from cache (R)
    pub cache_ratio: f64,
    /// spend the budget exactly rather than at most
    pub equality_mode: bool,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            cache_ratio: 0.5,
            equality_mode: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// checkpoint stem; `.json` and `.bin` are appended
    pub checkpoint: String,
    pub schedule: String,
    pub report_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            checkpoint: "out/costs".into(),
            schedule: "out/schedule.json".into(),
            report_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ToyDiTConfig,
    pub candidate: CandidateSection,
    pub budget: BudgetSection,
    pub selector: SelectorWeights,
    pub train: TrainConfig,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        CandidateSet::new(self.candidate.interval)?;
        if !(0.0..=1.0).contains(&self.budget.cache_ratio) {
            return Err(Error::Config(format!(
                "cache_ratio {} outside [0, 1]",
                self.budget.cache_ratio
            )));
        }
        self.selector.validate(self.model.token_count)?;
        self.train.validate()?;
        Ok(())
    }

    pub fn candidate_set(&self) -> Result<CandidateSet> {
        CandidateSet::new(self.candidate.interval)
    }

    pub fn budget(&self) -> Result<Budget> {
        let set = self.candidate_set()?;
        let slots = self.model.schedulable_steps() * self.model.sub_layer_count();
        Budget::new(self.budget.cache_ratio, slots, set.units_per_slot())
    }

    /// SHA-256 over the canonical (compact) JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replace the training seed from `SPARSE_SCHED_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV_VAR) {
            let seed: u64 = raw
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}={raw} is not a u64")))?;
            self.train.seed = seed;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_losslessly() {
        let a = RunConfig::default();
        let b = RunConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn empty_document_yields_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"model": {"bogus": 1}}"#,
            r#"{"budget": {"cache_ratio": 0.5, "bogus": 1}}"#,
            r#"{"selector": {"bogus": 1}}"#,
            r#"{"train": {"bogus": 1}}"#,
        ] {
            let err = RunConfig::from_json(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"candidate": {"interval": 0.3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"budget": {"cache_ratio": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"num_heads": 3}}"#).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        assert_eq!(a.hash(), a.hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.train.seed = 99;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn env_seed_overrides_train_seed() {
        let mut cfg = RunConfig::default();
        std::env::set_var(SEED_ENV_VAR, "4242");
        let res = cfg.apply_env_seed();
        std::env::remove_var(SEED_ENV_VAR);
        res.unwrap();
        assert_eq!(cfg.train.seed, 4242);

        std::env::set_var(SEED_ENV_VAR, "not-a-number");
        let res = cfg.apply_env_seed();
        std::env::remove_var(SEED_ENV_VAR);
        assert!(res.is_err());
    }

    #[test]
    fn budget_matches_manual_formula() {
        let cfg = RunConfig::default();
        let budget = cfg.budget().unwrap();
        let slots = cfg.model.schedulable_steps() * cfg.model.sub_layer_count();
        let expected = ((1.0 - cfg.budget.cache_ratio) * (slots * 4) as f64).round_ties_even();
        assert_eq!(budget.total_units, expected as usize);
    }
}
