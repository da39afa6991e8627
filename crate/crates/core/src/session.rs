//! End-to-end decoding with vanilla or speculative methods and exact
//! accounting of forward passes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::draft::Drafter;
use crate::error::{Error, Result};
use crate::numkernel::{argmax, softmax};
use crate::sampling::RngChooser;
use crate::target::{TargetModel, TokenId};
use crate::tree::{grow_tree, DraftCursor, GrowConfig, TreeShape};
use crate::verify::{verify_tree_greedy, verify_tree_sampling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Chain,
    StaticTree,
    MoeTree,
    JakiroFull,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Vanilla,
        Method::Chain,
        Method::StaticTree,
        Method::MoeTree,
        Method::JakiroFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Chain => "chain",
            Method::StaticTree => "static_tree",
            Method::MoeTree => "moe_tree",
            Method::JakiroFull => "jakiro_full",
        }
    }

    pub fn tree_shape(self) -> Option<TreeShape> {
        match self {
            Method::Vanilla => None,
            Method::Chain => Some(TreeShape::Chain),
            Method::StaticTree => Some(TreeShape::Static),
            Method::MoeTree => Some(TreeShape::Moe),
            Method::JakiroFull => Some(TreeShape::Parallel),
        }
    }

    /// Needs two active experts in the draft.
    pub fn uses_experts(self) -> bool {
        matches!(self, Method::MoeTree | Method::JakiroFull)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown method {s:?}; expected one of vanilla, chain, static_tree, moe_tree, jakiro_full"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSettings {
    pub method: Method,
    pub temperature: f64,
    pub gamma: usize,
    pub top_k: usize,
    pub beam: usize,
    pub node_budget: usize,
    pub weight_expert_score: bool,
    pub max_new: usize,
}

impl Default for DecodeSettings {
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
            max_new: 32,
        }
    }
}

impl DecodeSettings {
    fn grow_config(&self, shape: TreeShape) -> GrowConfig {
        GrowConfig {
            shape,
            gamma: self.gamma,
            top_k: self.top_k,
            beam: self.beam,
            node_budget: self.node_budget,
            temperature: self.temperature,
            weight_expert_score: self.weight_expert_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMetrics {
    pub prompt: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub tokens_emitted: usize,
    pub target_forwards: usize,
    pub draft_forwards: usize,
    pub rounds: usize,
    /// Draft forwards of each speculative round.
    pub draft_forwards_per_round: Vec<usize>,
}

impl PromptMetrics {
    pub fn tau(&self) -> f64 {
        ratio(self.tokens_emitted, self.target_forwards)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: Method,
    pub tau: f64,
    pub target_forwards: usize,
    pub draft_forwards: usize,
    pub tokens_emitted: usize,
    pub rounds: usize,
    pub max_new: usize,
    pub wall_ms: f64,
    pub per_prompt: Vec<PromptMetrics>,
}

impl Metrics {
    pub fn from_prompts(
        method: Method,
        max_new: usize,
        per_prompt: Vec<PromptMetrics>,
        wall_ms: f64,
    ) -> Self {
        let sum = |f: fn(&PromptMetrics) -> usize| per_prompt.iter().map(f).sum::<usize>();
        let target_forwards = sum(|p| p.target_forwards);
        let tokens_emitted = sum(|p| p.tokens_emitted);
        Self {
            method,
            tau: ratio(tokens_emitted, target_forwards),
            target_forwards,
            draft_forwards: sum(|p| p.draft_forwards),
            tokens_emitted,
            rounds: sum(|p| p.rounds),
            max_new,
            wall_ms,
            per_prompt,
        }
    }

    /// Checks the accounting identities.
    pub fn check(&self, gamma: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(m));
        if self.per_prompt.is_empty() {
            return fail("metrics cover no prompts".into());
        }
        if (self.tau - ratio(self.tokens_emitted, self.target_forwards)).abs() > 0.0 {
            return fail("tau differs from tokens_emitted / target_forwards".into());
        }
        let hi = if self.method == Method::Vanilla {
            1.0
        } else {
            gamma as f64 + 1.0
        };
        if self.target_forwards > 0 && !(self.tau >= 1.0 && self.tau <= hi) {
            return fail(format!("tau {} outside [1, {hi}]", self.tau));
        }
        for p in &self.per_prompt {
            if p.output.len() != p.tokens_emitted || p.target_forwards != p.rounds {
                return fail("per-prompt counters disagree".into());
            }
        }
        Ok(())
    }
}

/// Per-prompt ChaCha stream of a session.
pub fn prompt_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Decodes one prompt. The prompt prefill is not counted; every round
/// afterwards costs exactly one target forward.
pub fn decode_prompt<D: Drafter>(
    target: &TargetModel,
    draft: &D,
    prompt: &[TokenId],
    settings: &DecodeSettings,
    rng: &mut ChaCha8Rng,
) -> Result<PromptMetrics> {
    if !(settings.temperature >= 0.0 && settings.temperature.is_finite()) {
        return Err(Error::InvalidArgument("temperature must be non-negative".into()));
    }
    for &t in prompt {
        target.check_token(t)?;
    }
    match settings.method.tree_shape() {
        None => decode_vanilla(target, prompt, settings, rng),
        Some(shape) => decode_speculative(target, draft, prompt, settings, shape, rng),
    }
}

fn decode_vanilla(
    target: &TargetModel,
    prompt: &[TokenId],
    settings: &DecodeSettings,
    rng: &mut ChaCha8Rng,
) -> Result<PromptMetrics> {
    let (last, head) = prompt.split_last().ok_or(Error::EmptyInput)?;
    let mut cache = target.new_cache();
    for &t in head {
        target.forward_cached(&mut cache, t)?;
    }
    let mut m = empty_metrics(prompt);
    let mut cur = *last;
    while m.output.len() < settings.max_new {
        let step = target.forward_cached(&mut cache, cur)?;
        m.target_forwards += 1;
        m.rounds += 1;
        cur = if settings.temperature == 0.0 {
            argmax(&step.logits) as TokenId
        } else {
            softmax(&step.logits, settings.temperature)?.sample_with(rng.random()) as TokenId
        };
        m.output.push(cur);
        if target.eos() == Some(cur) {
            break;
        }
    }
    m.tokens_emitted = m.output.len();
    Ok(m)
}

fn empty_metrics(prompt: &[TokenId]) -> PromptMetrics {
    PromptMetrics {
        prompt: prompt.to_vec(),
        output: Vec::new(),
        tokens_emitted: 0,
        target_forwards: 0,
        draft_forwards: 0,
        rounds: 0,
        draft_forwards_per_round: Vec::new(),
    }
}

fn decode_speculative<D: Drafter>(
    target: &TargetModel,
    draft: &D,
    prompt: &[TokenId],
    settings: &DecodeSettings,
    shape: TreeShape,
    rng: &mut ChaCha8Rng,
) -> Result<PromptMetrics> {
    if prompt.len() < 2 {
        return Err(Error::SequenceTooShort(prompt.len()));
    }
    if draft.vocab() != target.vocab() {
        return Err(Error::DimensionMismatch {
            context: "draft vocabulary",
            expected: target.vocab(),
            actual: draft.vocab(),
        });
    }
    let mut cache = target.new_cache();
    let mut cursor = DraftCursor::new(draft.init_state());
    draft.start(&mut cursor.state, prompt[0])?;
    for i in 0..prompt.len() - 1 {
        let out = target.forward_cached(&mut cache, prompt[i])?;
        cursor.pending.push((out.feature, prompt[i + 1]));
    }
    let grow = settings.grow_config(shape);
    let greedy = settings.temperature == 0.0;
    let mut m = empty_metrics(prompt);
    'rounds: while m.output.len() < settings.max_new {
        let mut chooser = RngChooser::new(rng);
        let tree = grow_tree(draft, &mut cursor, cache.len(), &grow, &mut chooser)?;
        let outcome = if greedy {
            verify_tree_greedy(&tree, target, &mut cache)?
        } else {
            verify_tree_sampling(&tree, target, &mut cache, settings.temperature, &mut chooser)?
        };
        m.rounds += 1;
        m.target_forwards += outcome.target_forward_passes;
        m.draft_forwards += outcome.draft_forward_passes;
        m.draft_forwards_per_round.push(outcome.draft_forward_passes);
        let mut inputs = outcome.accepted.clone();
        inputs.push(outcome.final_token);
        for (f, &t) in outcome.features.iter().zip(&inputs) {
            cursor.pending.push((f.clone(), t));
        }
        for t in outcome.emitted() {
            if m.output.len() == settings.max_new {
                break 'rounds;
            }
            m.output.push(t);
            if target.eos() == Some(t) {
                break 'rounds;
            }
        }
    }
    m.tokens_emitted = m.output.len();
    Ok(m)
}

/// Decodes every prompt (in parallel, aggregated in prompt order).
pub fn run_session<D: Drafter>(
    target: &TargetModel,
    draft: &D,
    prompts: &[Vec<TokenId>],
    settings: &DecodeSettings,
    seed: u64,
) -> Result<Metrics> {
    if settings.method.uses_experts() && draft.active_experts() < 2 {
        return Err(Error::ContrastNeedsTwoExperts);
    }
    let start = Instant::now();
    let per_prompt = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| decode_prompt(target, draft, p, settings, &mut prompt_rng(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Metrics::from_prompts(
        settings.method,
        settings.max_new,
        per_prompt,
        wall_ms,
    ))
}

/// `(baseline.target_forwards / candidate.target_forwards,
///   baseline.wall_ms / candidate.wall_ms)`.
pub fn compute_speedup(baseline: &Metrics, candidate: &Metrics) -> Result<(f64, f64)> {
    let prompts = |m: &Metrics| m.per_prompt.iter().map(|p| p.prompt.clone()).collect::<Vec<_>>();
    if prompts(baseline) != prompts(candidate) || baseline.max_new != candidate.max_new {
        return Err(Error::InvalidArgument(
            "speedup needs the same prompts and max_new".into(),
        ));
    }
    if candidate.target_forwards == 0 {
        return Err(Error::InvalidArgument("candidate ran no target forwards".into()));
    }
    let forward = baseline.target_forwards as f64 / candidate.target_forwards as f64;
    let wall = if baseline.wall_ms == candidate.wall_ms {
        1.0
    } else {
        baseline.wall_ms / candidate.wall_ms.max(1e-9)
    };
    Ok((forward, wall))
}

/// Seeded uniform prompts.
pub fn synthetic_prompts(vocab: usize, count: usize, len: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab) as TokenId).collect())
        .collect()
}
