//! Distillation of the MoE draft from a frozen target.
//!
//! The draft is run teacher-forced over whole sequences at once: row `i`
//! consumes `(f_i, t_{i+1})` and is scored against `f_{i+1}`, `p_{i+1}`
//! (mixture head) and `f_{i+2}`, `p_{i+2}` (contrastive head), where
//! `p_j = softmax(Head(f_j))`. Rows of different sequences never attend to
//! each other.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{ByteReader, ByteWriter, CORPUS_MAGIC};
use crate::draft::JakiroDraft;
use crate::error::{Error, Result};
use crate::numkernel::{softmax, top_k_indices, BoolMatrix, Matrix};
use crate::target::{TargetModel, TokenId};

/// One teacher sequence: tokens with the target's features and
/// next-token distributions at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub tokens: Vec<TokenId>,
    /// `S x d`, row `j` is the target's pre-head state after `tokens[..=j]`.
    pub features: Matrix,
    /// `S x V`, row `j` is `softmax(Head(features[j]))`.
    pub probs: Matrix,
    /// Positions at and beyond this are padding.
    pub valid_len: usize,
}

impl TrainBatch {
    pub fn from_features(target: &TargetModel, tokens: Vec<TokenId>, features: Matrix) -> Result<Self> {
        crate::error::ensure_dim("feature rows", tokens.len(), features.rows())?;
        crate::error::ensure_dim("feature width", target.dim(), features.cols())?;
        let mut probs = Matrix::zeros(tokens.len(), target.vocab());
        for (j, &t) in tokens.iter().enumerate() {
            target.check_token(t)?;
            let p = softmax(&target.head(features.row(j)), 1.0)?;
            probs.row_mut(j).copy_from_slice(p.as_slice());
        }
        Ok(Self {
            valid_len: tokens.len(),
            tokens,
            features,
            probs,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Samples `n` sequences from the target. Sequence `i` uses its own ChaCha
/// stream, so the corpus only depends on `seed`.
pub fn generate_distillation_corpus(
    target: &TargetModel,
    n_sequences: usize,
    seq_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TrainBatch>> {
    if seq_len == 0 && n_sequences > 0 {
        return Err(Error::SequenceTooShort(0));
    }
    (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut cache = target.new_cache();
            let mut tok = rng.random_range(0..target.vocab()) as TokenId;
            let mut tokens = Vec::with_capacity(seq_len);
            let mut feats = Matrix::zeros(seq_len, target.dim());
            for j in 0..seq_len {
                tokens.push(tok);
                let out = target.forward_cached(&mut cache, tok)?;
                feats.row_mut(j).copy_from_slice(&out.feature);
                tok = target.choose(&out.logits, temperature, &mut rng)? as TokenId;
            }
            TrainBatch::from_features(target, tokens, feats)
        })
        .collect()
}

pub fn write_corpus(corpus: &[TrainBatch], target: &TargetModel) -> Result<Vec<u8>> {
    let seq_len = corpus.first().map_or(0, TrainBatch::len);
    if corpus
        .iter()
        .any(|b| b.len() != seq_len || b.valid_len != seq_len)
    {
        return Err(Error::InvalidArgument(
            "corpus sequences must share one length".into(),
        ));
    }
    let mut w = ByteWriter::new(CORPUS_MAGIC);
    w.u32(corpus.len() as u32)
        .u32(seq_len as u32)
        .u32(target.vocab() as u32)
        .u32(target.dim() as u32);
    for b in corpus {
        for &t in &b.tokens {
            w.u32(t);
        }
        w.matrix(&b.features);
    }
    Ok(w.finish())
}

pub fn read_corpus(bytes: &[u8], target: &TargetModel) -> Result<Vec<TrainBatch>> {
    let mut r = ByteReader::new(bytes, CORPUS_MAGIC)?;
    let count = r.u32()? as usize;
    let seq_len = r.u32()? as usize;
    let (vocab, dim) = (r.u32()? as usize, r.u32()? as usize);
    if vocab != target.vocab() || dim != target.dim() {
        return Err(Error::Format(format!(
            "corpus was built for V={vocab}, d={dim}; target has V={}, d={}",
            target.vocab(),
            target.dim()
        )));
    }
    r.expect_remaining(count * seq_len * (4 + 8 * dim))?;
    (0..count)
        .map(|_| {
            let tokens = (0..seq_len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let feats = r.matrix(seq_len, dim)?;
            TrainBatch::from_features(target, tokens, feats)
        })
        .collect()
}

pub fn save_corpus(corpus: &[TrainBatch], target: &TargetModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_corpus(corpus, target)?)?;
    Ok(())
}

pub fn load_corpus(path: &Path, target: &TargetModel) -> Result<Vec<TrainBatch>> {
    read_corpus(&std::fs::read(path)?, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub w_cls_moe: f64,
    pub w_cls_const: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub smooth_l1_beta: f64,
    /// Std-dev of Gaussian noise added to input features.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w_cls_moe: 0.1,
            w_cls_const: 0.05,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 0.5,
            weight_decay: 0.0,
            warmup_steps: 0,
            steps: 2000,
            batch_size: 8,
            smooth_l1_beta: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.w_cls_moe >= 0.0 && self.w_cls_const >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0) || !(self.smooth_l1_beta > 0.0) {
            return bad("grad_clip and smooth_l1_beta must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("noise_sigma and weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reg_moe: f64,
    pub cls_moe: f64,
    pub reg_const: f64,
    pub cls_const: f64,
}

/// One trainable tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub group: &'static str,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn tensors(d: &JakiroDraft) -> Vec<(&'static str, String, Matrix)> {
    let row = |v: &[f64]| Matrix::from_fn(1, v.len(), |_, c| v[c]);
    let mut t = vec![
        ("reduction", "reduction".to_string(), d.reduction.clone()),
        ("norm_attn", "norm_attn".to_string(), row(&d.norm_attn)),
        ("wq", "wq".to_string(), d.wq.clone()),
        ("wk", "wk".to_string(), d.wk.clone()),
        ("wv", "wv".to_string(), d.wv.clone()),
        ("wo", "wo".to_string(), d.wo.clone()),
        ("norm_moe", "norm_moe".to_string(), row(&d.norm_moe)),
        ("centroids", "centroids".to_string(), d.moe.centroids.clone()),
    ];
    for (j, e) in d.moe.experts.iter().enumerate() {
        t.push(("experts", format!("expert{j}.w_up"), e.w_up.clone()));
        t.push(("experts", format!("expert{j}.w_down"), e.w_down.clone()));
    }
    t.push(("beta", "beta".to_string(), row(&[d.contrast.beta])));
    t.push(("alpha", "alpha".to_string(), row(&[d.contrast.alpha])));
    t
}

pub fn param_layout(draft: &JakiroDraft) -> Vec<ParamSlot> {
    let mut offset = 0;
    tensors(draft)
        .into_iter()
        .map(|(group, name, m)| {
            let s = ParamSlot {
                group,
                name,
                rows: m.rows(),
                cols: m.cols(),
                offset,
            };
            offset += s.len();
            s
        })
        .collect()
}

pub fn flatten_params(draft: &JakiroDraft) -> Vec<f64> {
    tensors(draft)
        .into_iter()
        .flat_map(|(_, _, m)| m.into_data())
        .collect()
}

pub fn set_params(draft: &mut JakiroDraft, flat: &[f64]) -> Result<()> {
    let layout = param_layout(draft);
    let total = layout.last().map_or(0, |s| s.offset + s.len());
    crate::error::ensure_dim("parameter vector", total, flat.len())?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters"));
    }
    let take = |s: &ParamSlot| flat[s.offset..s.offset + s.len()].to_vec();
    let mat = |s: &ParamSlot| Matrix::from_vec(s.rows, s.cols, take(s));
    let n = draft.moe.experts.len();
    draft.reduction = mat(&layout[0])?;
    draft.norm_attn = take(&layout[1]);
    draft.wq = mat(&layout[2])?;
    draft.wk = mat(&layout[3])?;
    draft.wv = mat(&layout[4])?;
    draft.wo = mat(&layout[5])?;
    draft.norm_moe = take(&layout[6]);
    draft.moe.centroids = mat(&layout[7])?;
    for j in 0..n {
        draft.moe.experts[j].w_up = mat(&layout[8 + 2 * j])?;
        draft.moe.experts[j].w_down = mat(&layout[9 + 2 * j])?;
    }
    draft.contrast.beta = take(&layout[8 + 2 * n])[0];
    draft.contrast.alpha = take(&layout[9 + 2 * n])[0];
    Ok(())
}

pub(crate) struct Graph {
    pub tape: Tape,
    pub leaves: Vec<Var>,
    #[cfg(test)]
    pub f_moe: Var,
    pub total: Var,
    pub terms: [Var; 4],
}

fn const_leaf(tape: &mut Tape, rows: usize, f: impl Fn(usize) -> f64) -> Var {
    tape.leaf(Matrix::from_fn(rows, 1, |r, _| f(r)))
}

/// Differentiable teacher-forced forward over `batches` and the combined
/// objective.
pub(crate) fn build_graph(
    draft: &JakiroDraft,
    batches: &[TrainBatch],
    cfg: &TrainConfig,
    noise: Option<&mut ChaCha8Rng>,
) -> Result<Graph> {
    let d = draft.dim;
    let v = draft.vocab;
    let k_active = draft.moe.active;
    let mut spans = Vec::new();
    let mut rows = 0;
    for b in batches {
        if b.valid_len > b.len() {
            return Err(Error::InvalidArgument("valid_len exceeds sequence length".into()));
        }
        if b.valid_len < 2 {
            return Err(Error::SequenceTooShort(b.valid_len));
        }
        crate::error::ensure_dim("batch feature width", d, b.features.cols())?;
        crate::error::ensure_dim("batch vocab", v, b.probs.cols())?;
        spans.push((rows, b.valid_len - 1));
        rows += b.valid_len - 1;
    }
    if rows == 0 {
        return Err(Error::EmptyInput);
    }
    let mut x = Matrix::zeros(rows, 2 * d);
    let mut f_next = Matrix::zeros(rows, d);
    let mut p_next = Matrix::zeros(rows, v);
    let mut f_next2 = Matrix::zeros(rows, d);
    let mut p_next2 = Matrix::zeros(rows, v);
    let mut w_const = vec![0.0; rows];
    let mut seq_of = vec![0; rows];
    let normal = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut noise = noise.filter(|_| cfg.noise_sigma > 0.0);
    for (bi, (b, &(start, n))) in batches.iter().zip(&spans).enumerate() {
        for i in 0..n {
            let r = start + i;
            seq_of[r] = bi;
            let t = b.tokens[i + 1];
            if t as usize >= v {
                return Err(Error::TokenOutOfRange { token: t, vocab: v });
            }
            let xr = x.row_mut(r);
            xr[..d].copy_from_slice(draft.embedding.row(t as usize));
            xr[d..].copy_from_slice(b.features.row(i));
            if let Some(rng) = noise.as_deref_mut() {
                for val in &mut xr[d..] {
                    *val += normal.sample(rng);
                }
            }
            f_next.row_mut(r).copy_from_slice(b.features.row(i + 1));
            p_next.row_mut(r).copy_from_slice(b.probs.row(i + 1));
            if i + 2 < b.valid_len && k_active >= 2 {
                w_const[r] = 1.0;
                f_next2.row_mut(r).copy_from_slice(b.features.row(i + 2));
                p_next2.row_mut(r).copy_from_slice(b.probs.row(i + 2));
            }
        }
    }
    let mask = BoolMatrix::from_fn(rows, rows, |i, j| j <= i && seq_of[i] == seq_of[j]);

    let mut tape = Tape::new();
    let leaves: Vec<Var> = tensors(draft).into_iter().map(|(_, _, m)| tape.leaf(m)).collect();
    let n_exp = draft.moe.experts.len();
    let [reduction, g1, wq, wk, wv, wo, g2, centroids] = leaves[..8] else {
        unreachable!("layout starts with eight fixed tensors")
    };
    let beta = leaves[8 + 2 * n_exp];
    let alpha = leaves[9 + 2 * n_exp];

    let xv = tape.leaf(x);
    let head = tape.leaf(draft.lm_head.clone());
    let h = tape.matmul(xv, reduction);
    let n1 = if draft.normalize { tape.rms_norm(h, g1) } else { h };
    let q = tape.matmul(n1, wq);
    let k = tape.matmul(n1, wk);
    let vv = tape.matmul(n1, wv);
    let att = tape.attention(q, k, vv, draft.heads, &mask);
    let o = tape.matmul(att, wo);
    let u = tape.add(h, o);
    let z = if draft.normalize { tape.rms_norm(u, g2) } else { u };
    let ct = tape.transpose(centroids);
    let router = tape.matmul(z, ct);
    let scores = tape.softmax_rows(router);
    let tops: Vec<Vec<usize>> = (0..rows)
        .map(|r| top_k_indices(tape.value(scores).row(r), k_active))
        .collect();

    let mut mix: Option<Var> = None;
    let mut top1: Option<Var> = None;
    let mut top2: Option<Var> = None;
    let add_into = |tape: &mut Tape, acc: &mut Option<Var>, term: Var| {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    };
    for j in 0..n_exp {
        let up = leaves[8 + 2 * j];
        let down = leaves[9 + 2 * j];
        let a = tape.matmul(z, up);
        let a = tape.silu(a);
        let e = tape.matmul(a, down);
        let sel = const_leaf(&mut tape, rows, |r| f64::from(u8::from(tops[r].contains(&j))));
        let col = tape.column(scores, j);
        let gate = tape.mul(col, sel);
        let term = tape.row_scale(e, gate);
        add_into(&mut tape, &mut mix, term);
        let s1 = const_leaf(&mut tape, rows, |r| f64::from(u8::from(tops[r][0] == j)));
        let t1 = tape.row_scale(e, s1);
        add_into(&mut tape, &mut top1, t1);
        let s2 = const_leaf(&mut tape, rows, |r| {
            f64::from(u8::from(tops[r][1.min(tops[r].len() - 1)] == j))
        });
        let t2 = tape.row_scale(e, s2);
        add_into(&mut tape, &mut top2, t2);
    }
    let f_moe = tape.add(mix.expect("at least one expert"), u);
    let logits_moe = tape.matmul(f_moe, head);
    let ones = Rc::new(vec![1.0; rows]);
    let reg_moe = tape.smooth_l1(f_moe, Rc::new(f_next), ones.clone(), cfg.smooth_l1_beta);
    let cls_moe = tape.cross_entropy(logits_moe, Rc::new(p_next), ones);
    let (reg_const, cls_const) = if w_const.iter().any(|&w| w != 0.0) {
        let f1 = tape.add(top1.expect("expert"), u);
        let f2 = tape.add(top2.expect("expert"), u);
        let b1 = tape.scale_by(f1, beta);
        let a2 = tape.scale_by(f2, alpha);
        let f_const = tape.sub(b1, a2);
        let logits_const = tape.matmul(f_const, head);
        let wc = Rc::new(w_const);
        (
            tape.smooth_l1(f_const, Rc::new(f_next2), wc.clone(), cfg.smooth_l1_beta),
            tape.cross_entropy(logits_const, Rc::new(p_next2), wc),
        )
    } else {
        let zero = tape.leaf(Matrix::zeros(1, 1));
        (zero, zero)
    };
    let total = tape.lin(&[
        (reg_moe, 1.0),
        (cls_moe, cfg.w_cls_moe),
        (reg_const, 1.0),
        (cls_const, cfg.w_cls_const),
    ]);
    Ok(Graph {
        tape,
        leaves,
        #[cfg(test)]
        f_moe,
        total,
        terms: [reg_moe, cls_moe, reg_const, cls_const],
    })
}

fn breakdown(g: &Graph) -> LossBreakdown {
    let s = |v| g.tape.scalar(v);
    LossBreakdown {
        total: s(g.total),
        reg_moe: s(g.terms[0]),
        cls_moe: s(g.terms[1]),
        reg_const: s(g.terms[2]),
        cls_const: s(g.terms[3]),
    }
}

fn flat_grad(g: &Graph, layout: &[ParamSlot]) -> Vec<f64> {
    let grads = g.tape.backward(g.total);
    let mut out = Vec::with_capacity(layout.last().map_or(0, |s| s.offset + s.len()));
    for (slot, &leaf) in layout.iter().zip(&g.leaves) {
        match grads.get(leaf) {
            Some(m) => out.extend_from_slice(m.data()),
            None => out.extend(std::iter::repeat_n(0.0, slot.len())),
        }
    }
    out
}

/// The combined objective on `batches`, without noise.
pub fn jakiro_loss(draft: &JakiroDraft, batches: &[TrainBatch], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let g = build_graph(draft, batches, cfg, None)?;
    let b = breakdown(&g);
    if !b.total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(b)
}

/// Loss and its gradient in [`param_layout`] order.
pub fn loss_and_grad(
    draft: &JakiroDraft,
    batches: &[TrainBatch],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let g = build_graph(draft, batches, cfg, None)?;
    let b = breakdown(&g);
    if !b.total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((b, flat_grad(&g, &param_layout(draft))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(draft: &JakiroDraft) -> Self {
        let n = flatten_params(draft).len();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One clipped Adam update. The returned loss is measured before the
/// update; on a non-finite loss nothing is changed.
pub fn train_step(
    draft: &mut JakiroDraft,
    batches: &[TrainBatch],
    state: &mut AdamState,
    cfg: &TrainConfig,
    noise: Option<&mut ChaCha8Rng>,
) -> Result<LossBreakdown> {
    let g = build_graph(draft, batches, cfg, noise)?;
    let loss = breakdown(&g);
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let layout = param_layout(draft);
    let mut grad = flat_grad(&g, &layout);
    crate::error::ensure_dim("optimizer state", grad.len(), state.m.len())?;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let norm = grad.iter().fold(0.0, |a, v| a + v * v).sqrt();
    if norm > cfg.grad_clip {
        let s = cfg.grad_clip / norm;
        grad.iter_mut().for_each(|v| *v *= s);
    }
    state.step += 1;
    let t = state.step as f64;
    let lr = if cfg.warmup_steps > 0 {
        cfg.lr * (t / cfg.warmup_steps as f64).min(1.0)
    } else {
        cfg.lr
    };
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let mut params = flatten_params(draft);
    for i in 0..params.len() {
        let gi = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= lr * (mh / (vh.sqrt() + cfg.adam_eps) + cfg.weight_decay * params[i]);
    }
    set_params(draft, &params)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub losses: Vec<LossBreakdown>,
}

/// `cfg.steps` updates on shuffled minibatches of `corpus`.
pub fn train(draft: &mut JakiroDraft, corpus: &[TrainBatch], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let mut state = AdamState::new(draft);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        let loss = train_step(draft, &batch, &mut state, cfg, Some(&mut noise_rng))?;
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.6}", loss.total);
        }
        log.losses.push(loss);
    }
    Ok(log)
}

/// Central-difference comparison at sampled coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(group, flat index, analytic, numeric, relative error)`.
    pub coords: Vec<(&'static str, usize, f64, f64, f64)>,
}

/// Relative error with an absolute floor of 1e-8.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `grad` with central differences of `f` at `coords`.
pub fn finite_diff(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    grad: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<Vec<(usize, f64, f64, f64)>> {
    let mut buf = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            buf[i] = x[i] + h;
            let up = f(&buf)?;
            buf[i] = x[i] - h;
            let down = f(&buf)?;
            buf[i] = x[i];
            let num = (up - down) / (2.0 * h);
            Ok((i, grad[i], num, relative_error(grad[i], num)))
        })
        .collect()
}

/// Audits the analytic gradient of the full objective at `n_coords`
/// coordinates. One coordinate of every parameter group is always included.
pub fn finite_diff_check(
    draft: &JakiroDraft,
    batches: &[TrainBatch],
    cfg: &TrainConfig,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheck> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let layout = param_layout(draft);
    let x = flatten_params(draft);
    let (_, grad) = loss_and_grad(draft, batches, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = Vec::new();
    let mut groups: Vec<&'static str> = layout.iter().map(|s| s.group).collect();
    groups.dedup();
    for g in &groups {
        let slots: Vec<&ParamSlot> = layout.iter().filter(|s| s.group == *g).collect();
        let s = slots[rng.random_range(0..slots.len())];
        coords.push(s.offset + rng.random_range(0..s.len()));
    }
    while coords.len() < n_coords {
        let i = rng.random_range(0..x.len());
        if !coords.contains(&i) {
            coords.push(i);
        }
    }
    coords.truncate(n_coords.max(groups.len()));
    let mut probe = draft.clone();
    let eval = |p: &[f64]| -> Result<f64> {
        let mut d = probe.clone();
        set_params(&mut d, p)?;
        Ok(jakiro_loss(&d, batches, cfg)?.total)
    };
    let rows = finite_diff(eval, &x, &grad, &coords, h)?;
    set_params(&mut probe, &x)?;
    let group_of = |i: usize| {
        layout
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len())
            .map_or("?", |s| s.group)
    };
    let coords: Vec<_> = rows
        .into_iter()
        .map(|(i, a, n, e)| (group_of(i), i, a, n, e))
        .collect();
    let max_rel_error = coords.iter().fold(0.0, |m: f64, c| m.max(c.4));
    Ok(GradCheck {
        max_rel_error,
        coords,
    })
}
