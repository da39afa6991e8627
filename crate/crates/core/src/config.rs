//! Run configuration (TOML) and the model, prompt and corpus sources it
//! describes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::draft::{DraftConfig, JakiroDraft};
use crate::error::{Error, Result};
use crate::session::{synthetic_prompts, DecodeSettings, Method};
use crate::target::{TargetConfig, TargetModel, TokenId};
use crate::train::{generate_distillation_corpus, load_corpus, TrainBatch, TrainConfig};
use crate::tree::GrowConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Synthetic,
    /// Leading tokens of corpus sequences.
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSource {
    pub source: PromptKind,
    pub count: usize,
    pub length: usize,
    pub seed: u64,
    pub path: Option<PathBuf>,
}

impl Default for PromptSource {
    fn default() -> Self {
        Self {
            source: PromptKind::Synthetic,
            count: 16,
            length: 8,
            seed: 1234,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Checkpoints {
    pub target: Option<PathBuf>,
    pub draft: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
}

/// Draft settings other than the expert counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DraftOptions {
    pub heads: usize,
    pub expert_hidden: usize,
    pub normalize: bool,
    pub beta_init: f64,
    pub alpha_init: f64,
    pub seed: u64,
}

impl Default for DraftOptions {
    fn default() -> Self {
        let d = DraftConfig::default();
        Self {
            heads: d.heads,
            expert_hidden: d.expert_hidden,
            normalize: d.normalize,
            beta_init: d.beta_init,
            alpha_init: d.alpha_init,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusOptions {
    pub sequences: usize,
    pub seq_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            sequences: 512,
            seq_len: 32,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    pub temperature: f64,
    pub gamma: usize,
    pub top_k: usize,
    pub beam: usize,
    pub node_budget: usize,
    pub weight_expert_score: bool,
    pub n_experts: usize,
    pub k_active: usize,
    pub max_new: usize,
    pub seed: u64,
    pub prompts: PromptSource,
    pub checkpoints: Checkpoints,
    pub model: TargetConfig,
    pub draft: DraftOptions,
    pub corpus: CorpusOptions,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GrowConfig::default();
        Self {
            method: Method::JakiroFull,
            temperature: 0.0,
            gamma: g.gamma,
            top_k: g.top_k,
            beam: g.beam,
            node_budget: g.node_budget,
            weight_expert_score: g.weight_expert_score,
            n_experts: 2,
            k_active: 2,
            max_new: 32,
            seed: 0,
            prompts: PromptSource::default(),
            checkpoints: Checkpoints::default(),
            model: TargetConfig::default(),
            draft: DraftOptions::default(),
            corpus: CorpusOptions::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Checks the schema constraints; returns warnings for settings that
    /// are accepted but have no effect.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |m: String| Err(Error::Config(m));
        let mut warnings = Vec::new();
        for (name, v) in [
            ("gamma", self.gamma),
            ("top_k", self.top_k),
            ("beam", self.beam),
            ("node_budget", self.node_budget),
            ("n_experts", self.n_experts),
            ("k_active", self.k_active),
            ("prompts.count", self.prompts.count),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            ));
        }
        if self.method.uses_experts() {
            if self.k_active < 2 {
                return bad(format!("method {} needs k_active >= 2", self.method));
            }
            if self.k_active > self.n_experts {
                return bad(format!(
                    "k_active ({}) exceeds n_experts ({})",
                    self.k_active, self.n_experts
                ));
            }
        } else if self.k_active > self.n_experts {
            warnings.push(format!(
                "k_active = {} has no effect on method {}; using {}",
                self.k_active, self.method, self.n_experts
            ));
        }
        if self.method == Method::JakiroFull && self.gamma < 2 {
            return bad("method jakiro_full needs gamma >= 2".into());
        }
        if self.method != Method::Vanilla && self.prompts.length < 2 {
            return bad("prompts.length must be at least 2 for speculative methods".into());
        }
        if self.prompts.length == 0 {
            return bad("prompts.length must be at least 1".into());
        }
        if self.prompts.source == PromptKind::Corpus
            && self.prompts.path.is_none()
            && self.checkpoints.corpus.is_none()
        {
            return bad("prompts.source = \"corpus\" needs prompts.path or checkpoints.corpus".into());
        }
        if self.model.vocab < 2 || self.model.dim == 0 || self.model.layers == 0 {
            return bad("model needs vocab >= 2, dim >= 1 and layers >= 1".into());
        }
        if self.model.heads == 0 || !self.model.dim.is_multiple_of(self.model.heads) {
            return bad("model.heads must divide model.dim".into());
        }
        if self.draft.heads == 0 || !self.model.dim.is_multiple_of(self.draft.heads) {
            return bad("draft.heads must divide model.dim".into());
        }
        if self.corpus.seq_len < 2 {
            return bad("corpus.seq_len must be at least 2".into());
        }
        self.train.validate()?;
        Ok(warnings)
    }

    pub fn draft_config(&self) -> DraftConfig {
        let o = &self.draft;
        DraftConfig {
            experts: self.n_experts,
            active: self.k_active.min(self.n_experts),
            heads: o.heads,
            expert_hidden: o.expert_hidden,
            normalize: o.normalize,
            beta_init: o.beta_init,
            alpha_init: o.alpha_init,
            seed: o.seed,
        }
    }

    pub fn decode_settings(&self, method: Method) -> DecodeSettings {
        DecodeSettings {
            method,
            temperature: self.temperature,
            gamma: self.gamma,
            top_k: self.top_k,
            beam: self.beam,
            node_budget: self.node_budget,
            weight_expert_score: self.weight_expert_score,
            max_new: self.max_new,
        }
    }

    /// The checkpointed target, or a fresh one from `[model]`.
    pub fn target_model(&self) -> Result<TargetModel> {
        match &self.checkpoints.target {
            Some(p) => {
                let mut t = TargetModel::load(p)?;
                t.set_eos(self.model.eos);
                Ok(t)
            }
            None => TargetModel::new(&self.model),
        }
    }

    /// The checkpointed draft, or an untrained one.
    pub fn draft_model(&self, target: &TargetModel) -> Result<JakiroDraft> {
        match &self.checkpoints.draft {
            Some(p) => JakiroDraft::load(p, target),
            None => JakiroDraft::new(target, &self.draft_config()),
        }
    }

    /// The corpus file if one is configured, otherwise a freshly sampled one.
    pub fn corpus_batches(&self, target: &TargetModel) -> Result<Vec<TrainBatch>> {
        match &self.checkpoints.corpus {
            Some(p) if p.exists() => load_corpus(p, target),
            _ => generate_distillation_corpus(
                target,
                self.corpus.sequences,
                self.corpus.seq_len,
                self.corpus.temperature,
                self.corpus.seed,
            ),
        }
    }

    pub fn prompt_set(&self, target: &TargetModel) -> Result<Vec<Vec<TokenId>>> {
        let p = &self.prompts;
        match p.source {
            PromptKind::Synthetic => Ok(synthetic_prompts(target.vocab(), p.count, p.length, p.seed)),
            PromptKind::Corpus => {
                let path = p
                    .path
                    .as_ref()
                    .or(self.checkpoints.corpus.as_ref())
                    .ok_or_else(|| Error::Config("no corpus path for prompts".into()))?;
                let corpus = load_corpus(path, target)?;
                if corpus.len() < p.count || corpus[..p.count].iter().any(|b| b.valid_len < p.length) {
                    return Err(Error::Config(format!(
                        "corpus {} is too small for {} prompts of length {}",
                        path.display(),
                        p.count,
                        p.length
                    )));
                }
                Ok(corpus[..p.count]
                    .iter()
                    .map(|b| b.tokens[..p.length].to_vec())
                    .collect())
            }
        }
    }
}

/// Parses and validates a TOML document.
pub fn parse_config(text: &str) -> Result<(RunConfig, Vec<String>)> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let warnings = cfg.validate()?;
    Ok((cfg, warnings))
}

pub fn load_config_with_warnings(path: &Path) -> Result<(RunConfig, Vec<String>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let (cfg, warnings) = load_config_with_warnings(path)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let (cfg, w) = parse_config("method = \"chain\"\n").unwrap();
        assert!(w.is_empty());
        assert_eq!(
            cfg,
            RunConfig {
                method: Method::Chain,
                ..RunConfig::default()
            }
        );
        assert_eq!((cfg.n_experts, cfg.k_active), (2, 2));
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = parse_config("method = \"chain\"\nbogus = 1\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("bogus")), "{e}");
        let e = parse_config("[model]\nwidth = 3\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("width")), "{e}");
    }

    #[test]
    fn k_irrelevant_for_chain() {
        let (cfg, w) = parse_config("method = \"chain\"\nk_active = 3\n").unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(cfg.draft_config().active, 2);
        assert!(parse_config("method = \"moe_tree\"\nk_active = 3\n").is_err());
        assert!(parse_config("method = \"moe_tree\"\nk_active = 1\n").is_err());
    }

    #[test]
    fn schema_violations() {
        for bad in [
            "gamma = 0",
            "temperature = -1.0",
            "method = \"warp\"",
            "method = \"jakiro_full\"\ngamma = 1",
            "gamma = \"five\"",
            "[train]\nw_cls_moe = -0.1",
            "[prompts]\nsource = \"corpus\"",
        ] {
            assert!(matches!(parse_config(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn missing_file_is_config_error() {
        let e = load_config(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }
}
