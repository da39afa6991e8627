//! MoE draft network: reduction over `[embedding; previous feature]`, one
//! attention layer, a top-k routed expert layer and the target's LM head.
//!
//! Besides the gated mixture, every step exposes the two highest-scoring
//! experts as separate branches. Tree growth uses them as decoupled
//! candidate sources, and the contrastive head combines them to look one
//! position further ahead.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ByteReader, ByteWriter, DRAFT_MAGIC, FORMAT_VERSION};
use crate::error::{ensure_dim, Error, Result};
use crate::numkernel::{rms_norm, silu, softmax, top_k_indices, vecmat, Matrix, ProbVec};
use crate::target::{FeatureVec, KvCache, TargetModel, TokenId, NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DraftConfig {
    /// Candidate experts (N).
    pub experts: usize,
    /// Active experts per token (K).
    pub active: usize,
    pub heads: usize,
    /// Hidden width of each expert MLP; 0 means `2 * dim`.
    pub expert_hidden: usize,
    /// Pre-attention and pre-MoE RMS normalisation.
    pub normalize: bool,
    pub beta_init: f64,
    pub alpha_init: f64,
    pub seed: u64,
}

impl Default for DraftConfig {
    fn default() -> Self {
        Self {
            experts: 2,
            active: 2,
            heads: 2,
            expert_hidden: 0,
            normalize: true,
            beta_init: 1.0,
            alpha_init: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl Expert {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = vecmat(z, &self.w_up).into_iter().map(silu).collect();
        vecmat(&h, &self.w_down)
    }
}

/// Router centroids plus the expert MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub active: usize,
    pub experts: Vec<Expert>,
    /// One centroid per row, `N x d`.
    pub centroids: Matrix,
}

impl MoeParams {
    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.experts.len();
        if self.active == 0 || self.active > n {
            return Err(Error::Config(format!(
                "need 1 <= K <= N, got K={} N={n}",
                self.active
            )));
        }
        ensure_dim("router centroids", n, self.centroids.rows())
    }
}

/// Router softmax over all experts and the selected top-K, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertScores {
    pub scores: ProbVec,
    pub top: Vec<usize>,
}

impl ExpertScores {
    pub fn score_of_rank(&self, rank: usize) -> f64 {
        self.scores.get(self.top[rank])
    }
}

/// Sparse gates: the router score for selected experts, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector(pub Vec<f64>);

impl GateVector {
    pub fn nonzero(&self) -> usize {
        self.0.iter().filter(|g| **g != 0.0).count()
    }
}

pub fn route_experts(u: &[f64], moe: &MoeParams) -> Result<(ExpertScores, GateVector)> {
    ensure_dim("router input", moe.centroids.cols(), u.len())?;
    let logits: Vec<f64> = (0..moe.centroids.rows())
        .map(|j| crate::numkernel::dot(u, moe.centroids.row(j)))
        .collect();
    let scores = softmax(&logits, 1.0)?;
    let top = top_k_indices(scores.as_slice(), moe.active);
    let mut gates = vec![0.0; logits.len()];
    for &j in &top {
        gates[j] = scores.get(j);
    }
    Ok((ExpertScores { scores, top }, GateVector(gates)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastParams {
    pub beta: f64,
    pub alpha: f64,
}

impl Default for ContrastParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftStepOutput {
    /// Gated mixture plus residual; the regressed next feature.
    pub feature_moe: FeatureVec,
    pub feature_top1: FeatureVec,
    pub feature_top2: FeatureVec,
    /// Head of the higher-scoring expert branch.
    pub logits_left: Vec<f64>,
    pub logits_right: Vec<f64>,
    pub scores: ExpertScores,
}

impl DraftStepOutput {
    pub fn score_left(&self) -> f64 {
        self.scores.score_of_rank(0)
    }

    pub fn score_right(&self) -> f64 {
        self.scores.score_of_rank(self.scores.top.len().min(2) - 1)
    }
}

/// What tree growth needs from one draft step.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftProposal {
    /// Feature fed to the next step along this path.
    pub feature: FeatureVec,
    pub logits_moe: Vec<f64>,
    pub logits_left: Vec<f64>,
    pub logits_right: Vec<f64>,
    pub score_left: f64,
    pub score_right: f64,
    /// Two-ahead logits for the parallel final step, when available.
    pub logits_const: Option<Vec<f64>>,
}

/// A network that can propose next-token distributions along a path.
pub trait Drafter: Sync {
    type State: Clone + Send;

    fn vocab(&self) -> usize;
    fn active_experts(&self) -> usize;
    fn init_state(&self) -> Self::State;
    /// Sees the first prompt token, which has no preceding feature.
    fn start(&self, _state: &mut Self::State, _token: TokenId) -> Result<()> {
        Ok(())
    }
    fn step(&self, state: &mut Self::State, prev_feature: &[f64], token: TokenId) -> Result<DraftProposal>;
}

/// The MoE draft model. Embedding and LM head are copies of the target's.
#[derive(Debug, Clone, PartialEq)]
pub struct JakiroDraft {
    pub(crate) vocab: usize,
    pub(crate) dim: usize,
    pub(crate) heads: usize,
    pub(crate) normalize: bool,
    pub(crate) embedding: Matrix,
    pub(crate) lm_head: Matrix,
    pub reduction: Matrix,
    pub norm_attn: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm_moe: Vec<f64>,
    pub moe: MoeParams,
    pub contrast: ContrastParams,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

impl JakiroDraft {
    pub fn new(target: &TargetModel, config: &DraftConfig) -> Result<Self> {
        let d = target.dim();
        let heads = config.heads;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("draft heads {heads} must divide {d}")));
        }
        let hidden = if config.expert_hidden == 0 {
            2 * d
        } else {
            config.expert_hidden
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = 1.0 / (d as f64).sqrt();
        let reduction = normal(&mut rng, 2 * d, d, 1.0 / (2.0 * d as f64).sqrt());
        let wq = normal(&mut rng, d, d, s);
        let wk = normal(&mut rng, d, d, s);
        let wv = normal(&mut rng, d, d, s);
        let wo = normal(&mut rng, d, d, s);
        let centroids = normal(&mut rng, config.experts, d, s);
        let experts = (0..config.experts)
            .map(|_| Expert {
                w_up: normal(&mut rng, d, hidden, s),
                w_down: normal(&mut rng, hidden, d, 1.0 / (hidden as f64).sqrt()),
            })
            .collect();
        let moe = MoeParams {
            active: config.active,
            experts,
            centroids,
        };
        moe.validate()?;
        Ok(Self {
            vocab: target.vocab(),
            dim: d,
            heads,
            normalize: config.normalize,
            embedding: target.embedding().clone(),
            lm_head: target.lm_head().clone(),
            reduction,
            norm_attn: vec![1.0; d],
            wq,
            wk,
            wv,
            wo,
            norm_moe: vec![1.0; d],
            moe,
            contrast: ContrastParams {
                beta: config.beta_init,
                alpha: config.alpha_init,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn expert_hidden(&self) -> usize {
        self.moe.experts[0].w_up.cols()
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn lm_head(&self) -> &Matrix {
        &self.lm_head
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(1, self.dim)
    }

    pub fn head(&self, f: &[f64]) -> Vec<f64> {
        vecmat(f, &self.lm_head)
    }

    fn norm(&self, x: &[f64], gain: &[f64]) -> Vec<f64> {
        if self.normalize {
            rms_norm(x, gain, NORM_EPS)
        } else {
            x.to_vec()
        }
    }

    /// One draft step: consumes `(prev_feature, token)`, appends to `cache`.
    pub fn draft_forward(
        &self,
        prev_feature: &[f64],
        token: TokenId,
        cache: &mut KvCache,
    ) -> Result<DraftStepOutput> {
        let d = self.dim;
        ensure_dim("draft prev feature", d, prev_feature.len())?;
        ensure_dim("draft cache width", 1, cache.layer_count())?;
        if token as usize >= self.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab,
            });
        }
        let mut x = self.embedding.row(token as usize).to_vec();
        x.extend_from_slice(prev_feature);
        let h = vecmat(&x, &self.reduction);
        let n1 = self.norm(&h, &self.norm_attn);
        let q = vecmat(&n1, &self.wq);
        let k = vecmat(&n1, &self.wk);
        let v = vecmat(&n1, &self.wv);
        let mut att = vec![0.0; d];
        cache.attend(0, self.heads, &q, &[(&k, &v)], None, &mut att);
        cache.push(&[(k, v)]);
        let o = vecmat(&att, &self.wo);
        let u: Vec<f64> = h.iter().zip(&o).map(|(a, b)| a + b).collect();
        let z = self.norm(&u, &self.norm_moe);
        let (scores, gates) = route_experts(&z, &self.moe)?;
        let expert_out: Vec<Option<Vec<f64>>> = (0..self.moe.expert_count())
            .map(|j| (gates.0[j] != 0.0).then(|| self.moe.experts[j].apply(&z)))
            .collect();
        let mut mix = vec![0.0; d];
        for (j, e) in expert_out.iter().enumerate() {
            if let Some(e) = e {
                let g = gates.0[j];
                mix.iter_mut().zip(e).for_each(|(m, v)| *m += g * v);
            }
        }
        let feature_moe: Vec<f64> = mix.iter().zip(&u).map(|(m, r)| m + r).collect();
        let branch = |rank: usize| -> Vec<f64> {
            let j = scores.top[rank.min(scores.top.len() - 1)];
            let e = expert_out[j].as_ref().expect("selected expert evaluated");
            e.iter().zip(&u).map(|(a, b)| a + b).collect()
        };
        let feature_top1 = branch(0);
        let feature_top2 = branch(1);
        let s1 = scores.score_of_rank(0);
        let s2 = scores.score_of_rank(scores.top.len().min(2) - 1);
        let scaled = |f: &[f64], s: f64| -> Vec<f64> { f.iter().map(|v| v * s).collect() };
        let logits_left = self.head(&scaled(&feature_top1, s1));
        let logits_right = self.head(&scaled(&feature_top2, s2));
        Ok(DraftStepOutput {
            feature_moe,
            feature_top1,
            feature_top2,
            logits_left,
            logits_right,
            scores,
        })
    }

    /// `(Head(f_moe), Head(beta * f_top1 - alpha * f_top2))`.
    pub fn contrastive_heads(
        &self,
        step: &DraftStepOutput,
        cparams: &ContrastParams,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.moe.active < 2 || step.scores.top.len() < 2 {
            return Err(Error::ContrastNeedsTwoExperts);
        }
        let f_const: Vec<f64> = step
            .feature_top1
            .iter()
            .zip(&step.feature_top2)
            .map(|(a, b)| cparams.beta * a - cparams.alpha * b)
            .collect();
        Ok((self.head(&step.feature_moe), self.head(&f_const)))
    }

    /// Both distributions emitted by the step at depth `gamma - 1`: the
    /// mixture head for that depth and the contrastive head for depth `gamma`.
    pub fn parallel_final_step(
        &self,
        step: &DraftStepOutput,
        cparams: &ContrastParams,
        depth: usize,
        gamma: usize,
        temperature: f64,
    ) -> Result<(ProbVec, ProbVec)> {
        if gamma < 2 || depth + 1 != gamma {
            return Err(Error::ParallelStepDepth {
                depth,
                expected: gamma.saturating_sub(1),
            });
        }
        let (moe, cst) = self.contrastive_heads(step, cparams)?;
        let t = if temperature > 0.0 { temperature } else { 1.0 };
        Ok((softmax(&moe, t)?, softmax(&cst, t)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(DRAFT_MAGIC);
        w.u32(FORMAT_VERSION)
            .u32(self.vocab as u32)
            .u32(self.dim as u32)
            .u32(1)
            .u32(self.heads as u32)
            .u32(self.moe.expert_count() as u32)
            .u32(self.moe.active as u32)
            .u32(self.expert_hidden() as u32)
            .u32(u32::from(self.normalize));
        w.matrix(&self.reduction)
            .f64s(&self.norm_attn)
            .matrix(&self.wq)
            .matrix(&self.wk)
            .matrix(&self.wv)
            .matrix(&self.wo)
            .f64s(&self.norm_moe)
            .matrix(&self.moe.centroids);
        for e in &self.moe.experts {
            w.matrix(&e.w_up).matrix(&e.w_down);
        }
        w.f64(self.contrast.beta).f64(self.contrast.alpha);
        w.finish()
    }

    /// Loads draft-owned weights; embedding and head come from `target`.
    pub fn from_bytes(bytes: &[u8], target: &TargetModel) -> Result<Self> {
        let mut r = ByteReader::new(bytes, DRAFT_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let vocab = r.u32()? as usize;
        let d = r.u32()? as usize;
        let layers = r.u32()?;
        let heads = r.u32()? as usize;
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let flags = r.u32()?;
        if vocab != target.vocab() || d != target.dim() {
            return Err(Error::Format(format!(
                "draft V={vocab} d={d} does not match target V={} d={}",
                target.vocab(),
                target.dim()
            )));
        }
        if layers != 1 || heads == 0 || !d.is_multiple_of(heads) || n == 0 || k == 0 || k > n || hidden == 0 {
            return Err(Error::Format("invalid draft header".into()));
        }
        let count = 2 * d * d + d + 4 * d * d + d + n * d + n * 2 * d * hidden + 2;
        r.expect_remaining(8 * count)?;
        let reduction = r.matrix(2 * d, d)?;
        let norm_attn = r.f64s(d)?;
        let wq = r.matrix(d, d)?;
        let wk = r.matrix(d, d)?;
        let wv = r.matrix(d, d)?;
        let wo = r.matrix(d, d)?;
        let norm_moe = r.f64s(d)?;
        let centroids = r.matrix(n, d)?;
        let experts = (0..n)
            .map(|_| {
                Ok(Expert {
                    w_up: r.matrix(d, hidden)?,
                    w_down: r.matrix(hidden, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let contrast = ContrastParams {
            beta: r.f64()?,
            alpha: r.f64()?,
        };
        r.finish()?;
        Ok(Self {
            vocab,
            dim: d,
            heads,
            normalize: flags & 1 == 1,
            embedding: target.embedding().clone(),
            lm_head: target.lm_head().clone(),
            reduction,
            norm_attn,
            wq,
            wk,
            wv,
            wo,
            norm_moe,
            moe: MoeParams {
                active: k,
                experts,
                centroids,
            },
            contrast,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, target: &TargetModel) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, target)
    }
}

impl Drafter for JakiroDraft {
    type State = KvCache;

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn active_experts(&self) -> usize {
        self.moe.active
    }

    fn init_state(&self) -> KvCache {
        self.new_cache()
    }

    fn step(&self, state: &mut KvCache, prev_feature: &[f64], token: TokenId) -> Result<DraftProposal> {
        let out = self.draft_forward(prev_feature, token, state)?;
        let logits_const = if self.moe.active >= 2 {
            Some(self.contrastive_heads(&out, &self.contrast)?.1)
        } else {
            None
        };
        Ok(DraftProposal {
            logits_moe: self.head(&out.feature_moe),
            score_left: out.score_left(),
            score_right: out.score_right(),
            feature: out.feature_moe,
            logits_left: out.logits_left,
            logits_right: out.logits_right,
            logits_const,
        })
    }
}

/// Reference drafter that runs the target itself. Its greedy proposals always
/// match, which bounds acceptance from above; the two-ahead head follows the
/// target's own argmax.
#[derive(Debug, Clone, Copy)]
pub struct TargetDrafter<'a>(pub &'a TargetModel);

impl Drafter for TargetDrafter<'_> {
    type State = KvCache;

    fn vocab(&self) -> usize {
        self.0.vocab()
    }

    fn active_experts(&self) -> usize {
        2
    }

    fn init_state(&self) -> KvCache {
        self.0.new_cache()
    }

    fn start(&self, state: &mut KvCache, token: TokenId) -> Result<()> {
        self.0.forward_cached(state, token).map(|_| ())
    }

    fn step(&self, state: &mut KvCache, _prev: &[f64], token: TokenId) -> Result<DraftProposal> {
        let out = self.0.forward_cached(state, token)?;
        let next = crate::numkernel::argmax(&out.logits) as TokenId;
        let mut ahead = state.clone();
        let two = self.0.forward_cached(&mut ahead, next)?;
        Ok(DraftProposal {
            feature: out.feature,
            logits_moe: out.logits.clone(),
            logits_left: out.logits.clone(),
            logits_right: out.logits,
            score_left: 1.0,
            score_right: 1.0,
            logits_const: Some(two.logits),
        })
    }
}

/// Drafter with flat logits everywhere.
#[derive(Debug, Clone, Copy)]
pub struct UniformDrafter {
    pub vocab: usize,
    pub dim: usize,
}

impl Drafter for UniformDrafter {
    type State = ();

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn active_experts(&self) -> usize {
        2
    }

    fn init_state(&self) {}

    fn step(&self, _: &mut (), _: &[f64], _: TokenId) -> Result<DraftProposal> {
        let z = vec![0.0; self.vocab];
        Ok(DraftProposal {
            feature: vec![0.0; self.dim],
            logits_moe: z.clone(),
            logits_left: z.clone(),
            logits_right: z.clone(),
            score_left: 0.5,
            score_right: 0.5,
            logits_const: Some(z),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::dot;
    use crate::target::TargetConfig;
    use proptest::prelude::*;

    fn target() -> TargetModel {
        TargetModel::new(&TargetConfig::default()).unwrap()
    }

    fn moe_with_centroids(c: Matrix, k: usize) -> MoeParams {
        let d = c.cols();
        MoeParams {
            active: k,
            experts: (0..c.rows())
                .map(|_| Expert {
                    w_up: Matrix::zeros(d, 2),
                    w_down: Matrix::zeros(2, d),
                })
                .collect(),
            centroids: c,
        }
    }

    #[test]
    fn dense_routing_when_k_equals_n() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (s, g) = route_experts(&[0.3, -0.2], &moe_with_centroids(c, 2)).unwrap();
        assert_eq!(g.nonzero(), 2);
        assert_eq!(g.0, s.scores.as_slice());
        assert!((g.0.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn routing_with_solved_centroids() {
        // u = e_0 and centroid j = ln(target_j) * e_0 gives softmax = target
        let want = [0.4, 0.3, 0.2, 0.1];
        let c = Matrix::from_rows(
            &want
                .iter()
                .map(|p: &f64| vec![p.ln(), 0.0, 0.0])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let (s, g) = route_experts(&[1.0, 0.0, 0.0], &moe_with_centroids(c, 2)).unwrap();
        for (a, b) in s.scores.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.top, vec![0, 1]);
        let expect = [0.4, 0.3, 0.0, 0.0];
        for (a, b) in g.0.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_centroids_tie_break_low_index() {
        let c = Matrix::from_rows(&vec![vec![0.5, 0.5]; 4]).unwrap();
        let (s, _) = route_experts(&[1.0, 2.0], &moe_with_centroids(c, 2)).unwrap();
        assert_eq!(s.top, vec![0, 1]);
        for &v in s.scores.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_expert_degenerates() {
        let t = target();
        let cfg = DraftConfig {
            experts: 1,
            active: 1,
            ..DraftConfig::default()
        };
        let d = JakiroDraft::new(&t, &cfg).unwrap();
        let mut c = d.new_cache();
        let out = d.draft_forward(&vec![0.1; 32], 3, &mut c).unwrap();
        assert_eq!(out.logits_left, out.logits_right);
        assert_eq!(out.feature_moe, out.feature_top1);
        assert!(matches!(
            d.contrastive_heads(&out, &d.contrast),
            Err(Error::ContrastNeedsTwoExperts)
        ));
    }

    /// Rebuilds one step from public parameters, independent of draft_forward.
    fn compose(d: &JakiroDraft, prev: &[f64], tok: TokenId) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut x = d.embedding.row(tok as usize).to_vec();
        x.extend_from_slice(prev);
        let h = vecmat(&x, &d.reduction);
        let n1 = rms_norm(&h, &d.norm_attn, NORM_EPS);
        // single position: attention returns its own value
        let v = vecmat(&n1, &d.wv);
        let u: Vec<f64> = h.iter().zip(vecmat(&v, &d.wo)).map(|(a, b)| a + b).collect();
        let z = rms_norm(&u, &d.norm_moe, NORM_EPS);
        let raw: Vec<f64> = (0..d.moe.expert_count())
            .map(|j| dot(&z, d.moe.centroids.row(j)).exp())
            .collect();
        let tot: f64 = raw.iter().sum();
        let s: Vec<f64> = raw.iter().map(|r| r / tot).collect();
        let (i1, i2) = if s[1] > s[0] { (1, 0) } else { (0, 1) };
        let e1 = d.moe.experts[i1].apply(&z);
        let e2 = d.moe.experts[i2].apply(&z);
        let f: Vec<f64> = (0..u.len())
            .map(|c| s[i1] * e1[c] + s[i2] * e2[c] + u[c])
            .collect();
        let f1 = (0..u.len()).map(|c| e1[c] + u[c]).collect();
        let f2 = (0..u.len()).map(|c| e2[c] + u[c]).collect();
        (f, f1, f2)
    }

    #[test]
    fn step_matches_hand_composition() {
        let t = target();
        let d = JakiroDraft::new(&t, &DraftConfig::default()).unwrap();
        let prev: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut c = d.new_cache();
        let out = d.draft_forward(&prev, 9, &mut c).unwrap();
        let (f, f1, f2) = compose(&d, &prev, 9);
        for (a, b) in out.feature_moe.iter().zip(&f) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.feature_top1.len(), 32);
        for (a, b) in out
            .feature_top1
            .iter()
            .zip(&f1)
            .chain(out.feature_top2.iter().zip(&f2))
        {
            assert!((a - b).abs() < 1e-12);
        }
        let mut c2 = d.new_cache();
        assert_eq!(d.draft_forward(&prev, 9, &mut c2).unwrap(), out);
        assert!(out.score_left() >= out.score_right());
    }

    #[test]
    fn contrastive_head_cases() {
        let t = target();
        let d = JakiroDraft::new(&t, &DraftConfig::default()).unwrap();
        let mut c = d.new_cache();
        let out = d.draft_forward(&vec![0.2; 32], 4, &mut c).unwrap();
        let off = ContrastParams {
            beta: 1.0,
            alpha: 0.0,
        };
        let (_, cst) = d.contrastive_heads(&out, &off).unwrap();
        assert_eq!(cst, d.head(&out.feature_top1));

        let mut same = out.clone();
        same.feature_top2 = same.feature_top1.clone();
        let eq = ContrastParams {
            beta: 0.7,
            alpha: 0.7,
        };
        let (_, cst) = d.contrastive_heads(&same, &eq).unwrap();
        assert!(cst.iter().all(|v| v.abs() < 1e-12));

        let cp = ContrastParams {
            beta: 1.3,
            alpha: 0.4,
        };
        let (_, cst) = d.contrastive_heads(&out, &cp).unwrap();
        let a = d.head(&out.feature_top1);
        let b = d.head(&out.feature_top2);
        for i in 0..cst.len() {
            assert!((cst[i] - (1.3 * a[i] - 0.4 * b[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn parallel_step_depth_check() {
        let t = target();
        let d = JakiroDraft::new(&t, &DraftConfig::default()).unwrap();
        let mut c = d.new_cache();
        let out = d.draft_forward(&vec![0.0; 32], 1, &mut c).unwrap();
        let (a, b) = d.parallel_final_step(&out, &d.contrast, 1, 2, 1.0).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(b.len(), 64);
        assert!(matches!(
            d.parallel_final_step(&out, &d.contrast, 2, 2, 1.0),
            Err(Error::ParallelStepDepth { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = target();
        let d = JakiroDraft::new(
            &t,
            &DraftConfig {
                experts: 3,
                ..DraftConfig::default()
            },
        )
        .unwrap();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"SDFD");
        assert_eq!(JakiroDraft::from_bytes(&bytes, &t).unwrap(), d);
        assert!(JakiroDraft::from_bytes(&bytes[..bytes.len() - 1], &t).is_err());
    }

    proptest! {
        #[test]
        fn gates_exactly_k(seed in 0u64..500, n in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = normal(&mut rng, n, 8, 1.0);
            let u: Vec<f64> = (0..8).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
            let (s, g) = route_experts(&u, &moe_with_centroids(c, 2)).unwrap();
            prop_assert_eq!(g.nonzero(), 2);
            for &j in &s.top {
                prop_assert_eq!(g.0[j], s.scores.get(j));
            }
            prop_assert!(s.score_of_rank(0) >= s.score_of_rank(1));
            prop_assert!((s.scores.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
