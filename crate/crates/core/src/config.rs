//! Run configuration: one JSON document validated before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Direction, LanguageSet, MAX_LANGS, PIVOT};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::StageConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic languages besides the pivot.
    pub n_languages: usize,
    /// Language pairs, each generated in both directions. Defaults to every
    /// synthetic language paired with the pivot.
    pub pairs: Option<Vec<(String, String)>>,
    pub mono_per_language: usize,
    pub parallel_per_direction: usize,
    pub test_per_direction: usize,
    pub mono_eval_per_language: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_languages: 7,
            pairs: None,
            mono_per_language: 2000,
            parallel_per_direction: 1000,
            test_per_direction: 20,
            mono_eval_per_language: 50,
        }
    }
}

impl DataConfig {
    pub fn resolved_pairs(&self, set: &LanguageSet) -> Vec<(String, String)> {
        match &self.pairs {
            Some(p) => p.clone(),
            None => set.languages()[1..]
                .iter()
                .map(|l| (l.id.clone(), PIVOT.to_string()))
                .collect(),
        }
    }

    pub fn directions(&self, set: &LanguageSet) -> Vec<Direction> {
        self.resolved_pairs(set)
            .iter()
            .flat_map(|(a, b)| [Direction::new(a, b), Direction::new(b, a)])
            .collect()
    }
}

/// Dense training that produces the base model the pipeline starts from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    /// Share of pretraining examples drawn from the parallel training set.
    pub parallel_fraction: f64,
    /// Score only the target side of parallel pairs instead of the whole sequence.
    pub target_only: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 64,
            warmup_ratio: 0.03,
            parallel_fraction: 1.0,
            target_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cap on held-out translation pairs decoded per direction.
    pub bleu_per_direction: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { bleu_per_direction: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Step overrides applied to every ablation setting.
    pub pretrain_steps: Option<u64>,
    pub stage1_steps: Option<u64>,
    pub stage2_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "StageConfig::stage1")]
    pub stage1: StageConfig,
    #[serde(default = "StageConfig::stage2")]
    pub stage2: StageConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Defaults everywhere, with component seeds derived from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        };
        cfg.derive_seeds();
        cfg
    }

    fn derive_seeds(&mut self) {
        self.model.seed = self.seed;
        self.stage1.seed = self.seed.wrapping_add(1);
        self.stage2.seed = self.seed.wrapping_add(2);
        self.stage1.stage = 1;
        self.stage2.stage = 2;
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| schema("$", e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        for section in ["model", "stage1", "stage2"] {
            for key in ["seed", "stage"] {
                if value.get(section).and_then(|s| s.get(key)).is_some() {
                    return Err(schema(
                        format!("$.{section}.{key}"),
                        "set by the run (seeds derive from the top-level seed)",
                    ));
                }
            }
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            schema(format!("$.{path}").trim_end_matches('.'), e.into_inner().to_string())
        })?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn languages(&self) -> Result<LanguageSet> {
        LanguageSet::standard(self.data.n_languages, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |path: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => schema(path, m),
                other => other,
            })
        };
        wrap("$.model", self.model.validate())?;
        wrap("$.stage1", self.stage1.validate())?;
        wrap("$.stage2", self.stage2.validate())?;
        let d = &self.data;
        if d.n_languages == 0 || d.n_languages >= MAX_LANGS {
            return Err(schema("$.data.n_languages", format!("must lie in 1..={}", MAX_LANGS - 1)));
        }
        for (key, v) in [
            ("mono_per_language", d.mono_per_language),
            ("parallel_per_direction", d.parallel_per_direction),
            ("test_per_direction", d.test_per_direction),
            ("mono_eval_per_language", d.mono_eval_per_language),
        ] {
            if v == 0 {
                return Err(schema(format!("$.data.{key}"), "must be positive"));
            }
        }
        let set = self.languages()?;
        if let Some(pairs) = &d.pairs {
            if pairs.is_empty() {
                return Err(schema("$.data.pairs", "must name at least one pair"));
            }
            for (i, (a, b)) in pairs.iter().enumerate() {
                for (j, id) in [a, b].into_iter().enumerate() {
                    if set.get(id).is_err() {
                        return Err(schema(format!("$.data.pairs[{i}][{j}]"), format!("unknown language {id}")));
                    }
                }
                if a == b {
                    return Err(schema(format!("$.data.pairs[{i}]"), "source and target are the same language"));
                }
            }
        }
        let p = &self.pretrain;
        if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
            return Err(schema("$.pretrain.learning_rate", "must be positive"));
        }
        if p.batch_size == 0 {
            return Err(schema("$.pretrain.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&p.parallel_fraction) {
            return Err(schema("$.pretrain.parallel_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&p.warmup_ratio) {
            return Err(schema("$.pretrain.warmup_ratio", "must lie in [0, 1]"));
        }
        if self.eval.bleu_per_direction == 0 {
            return Err(schema("$.eval.bleu_per_direction", "must be positive"));
        }
        if self.model.vocab_size != crate::data::VOCAB_SIZE {
            return Err(schema(
                "$.model.vocab_size",
                format!("must equal the corpus vocabulary ({})", crate::data::VOCAB_SIZE),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document() {
        let cfg = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg, RunConfig::with_seed(7));
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.stage1.learning_rate, 2e-4);
        assert_eq!(cfg.stage2.batch_size, 32);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(RunConfig::from_json("{}"), Err(Error::Schema { .. })));
    }

    #[test]
    fn unknown_keys_carry_their_path() {
        let Err(Error::Schema { path, .. }) = RunConfig::from_json(r#"{"seed": 1, "model": {"d_modle": 8}}"#) else {
            panic!("expected schema error");
        };
        assert_eq!(path, "$.model.d_modle");
        let Err(Error::Schema { path, .. }) = RunConfig::from_json(r#"{"seed": 1, "extra": 1}"#) else {
            panic!("expected schema error");
        };
        assert_eq!(path, "$.extra");
    }

    #[test]
    fn type_errors_carry_their_path() {
        let Err(Error::Schema { path, .. }) = RunConfig::from_json(r#"{"seed": 1, "stage1": {"steps": "many"}}"#) else {
            panic!("expected schema error");
        };
        assert_eq!(path, "$.stage1.steps");
    }

    #[test]
    fn bad_language_pair() {
        let Err(Error::Schema { path, message }) =
            RunConfig::from_json(r#"{"seed": 1, "data": {"pairs": [["xa", "en"], ["en", "qq"]]}}"#)
        else {
            panic!("expected schema error");
        };
        assert_eq!(path, "$.data.pairs[1][1]");
        assert!(message.contains("qq"));
    }

    #[test]
    fn semantic_violations() {
        let Err(Error::Schema { path, .. }) = RunConfig::from_json(r#"{"seed": 1, "model": {"d_model": 48}}"#) else {
            panic!("expected schema error");
        };
        assert_eq!(path, "$.model");
        assert!(RunConfig::from_json(r#"{"seed": 1, "model": {"seed": 3}}"#).is_err());
    }
}
