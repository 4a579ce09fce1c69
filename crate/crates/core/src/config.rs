//! Run configuration: one TOML document with sections `corpus`, `encoder`,
//! `agm`, `tem`, `objectives`, `train` and `eval`. Every field has a default,
//! unknown keys are rejected, and `section.field=value` overrides are
//! applied on top of the file before validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agm::AgmConfig;
use crate::corpus::CorpusOptions;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::ObjectivesConfig;
use crate::tem::TemConfig;

/// Which tokens the MLM objective hides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// No MLM at all (and therefore no enrichment).
    Baseline,
    Random,
    Picked,
    Agm,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::Baseline,
        MaskStrategy::Picked,
        MaskStrategy::Random,
        MaskStrategy::Agm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::Baseline => "baseline",
            MaskStrategy::Random => "random",
            MaskStrategy::Picked => "picked",
            MaskStrategy::Agm => "agm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub num_identities: usize,
    pub pairs_per_identity: usize,
    pub vacuous_fraction: f64,
    pub noise_rate: f64,
    pub patch_noise: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let o = CorpusOptions::default();
        Self {
            num_identities: o.num_identities,
            pairs_per_identity: o.pairs_per_identity,
            vacuous_fraction: o.vacuous_fraction,
            noise_rate: o.noise_rate,
            patch_noise: o.patch_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Root seed; every random stream (corpus, init, mask, tem, shuffle, ...)
    /// is derived from it.
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub strategy: MaskStrategy,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            lr: 1e-3,
            weight_decay: 0.02,
            strategy: MaskStrategy::Agm,
            warmup_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// The highest-numbered identities are held out; each contributes one
    /// gallery image, and all of its sentences are queries.
    pub test_identities: usize,
    /// Re-rank the top candidates of each query with the matching head.
    pub rerank: bool,
    pub rerank_top_k: usize,
    /// Training seeds per strategy in the ablation harness.
    pub ablation_seeds: usize,
    pub ablation_strategies: Vec<MaskStrategy>,
    /// Extra mask passes over the training split after each ablation run,
    /// pooled with the final epoch's masks when computing Ratio_v.
    pub mask_dump_passes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            test_identities: 100,
            rerank: false,
            rerank_top_k: 10,
            ablation_seeds: 3,
            ablation_strategies: MaskStrategy::ALL.to_vec(),
            mask_dump_passes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub encoder: EncoderConfig,
    pub agm: AgmConfig,
    pub tem: TemConfig,
    pub objectives: ObjectivesConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            path: "<file>".into(),
            message: e.message().to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let mut path = e.path().to_string();
            let message = e.inner().message().to_string();
            if let Some(field) = message
                .strip_prefix("unknown field `")
                .and_then(|s| s.split('`').next())
            {
                if path == "." {
                    path = field.to_string();
                } else if path != field && !path.ends_with(&format!(".{field}")) {
                    path = format!("{path}.{field}");
                }
            }
            Error::Config { path, message }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.agm.validate()?;
        self.tem.validate()?;
        self.objectives.validate()?;
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if self.train.lr.is_nan() || self.train.lr <= 0.0 {
            return bad("train.lr", format!("{} must be positive", self.train.lr));
        }
        if self.train.weight_decay.is_nan() || self.train.weight_decay < 0.0 {
            return bad("train.weight_decay", format!("{} must be non-negative", self.train.weight_decay));
        }
        if self.eval.test_identities == 0 || self.eval.test_identities >= self.corpus.num_identities {
            return bad(
                "eval.test_identities",
                format!(
                    "{} must lie in [1, {})",
                    self.eval.test_identities, self.corpus.num_identities
                ),
            );
        }
        if self.eval.ablation_seeds == 0 {
            return bad("eval.ablation_seeds", "must be positive".into());
        }
        Ok(())
    }

    pub fn corpus_options(&self) -> CorpusOptions {
        CorpusOptions {
            num_identities: self.corpus.num_identities,
            pairs_per_identity: self.corpus.pairs_per_identity,
            vacuous_fraction: self.corpus.vacuous_fraction,
            noise_rate: self.corpus.noise_rate,
            patch_noise: self.corpus.patch_noise,
            patch_side: self.encoder.patch_side,
            patch_dim: self.encoder.patch_dim,
            seed: self.train.seed,
        }
    }
}

/// `a.b.c=value`; the value is read as a TOML literal and falls back to a
/// bare string (so `train.strategy=random` works unquoted).
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        path: spec.into(),
        message: "override must look like section.field=value".into(),
    })?;
    let key = key.trim();
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config {
            path: parts[..=i].join("."),
            message: "not a section".into(),
        })?;
    }
    Ok(())
}
