//! Speculative verification of a draft tree against the target.
//!
//! Greedy mode follows the target argmax. Sampling mode tries children in
//! tree order; each rejection replaces `p` with `norm(max(0, p - q_c))`, so
//! the emitted tokens are distributed exactly as the target's.

use crate::error::{ensure_dim, Error, Result};
use crate::numkernel::{argmax, softmax, ProbVec};
use crate::sampling::Chooser;
use crate::target::{FeatureVec, KvCache, TargetModel, TokenId};
use crate::tree::{flatten_for_verification, DraftTree};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub accepted: Vec<TokenId>,
    /// Node indices of `accepted`.
    pub path: Vec<usize>,
    pub final_token: TokenId,
    pub target_forward_passes: usize,
    pub draft_forward_passes: usize,
    pub accepted_count: usize,
    /// Target features of the root followed by each accepted node.
    pub features: Vec<FeatureVec>,
}

impl VerifyOutcome {
    /// Tokens this round appends to the output.
    pub fn emitted(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.accepted
            .iter()
            .copied()
            .chain(std::iter::once(self.final_token))
    }
}

fn check_pair(p: &ProbVec, q: &ProbVec) -> Result<()> {
    ensure_dim("proposal length", p.len(), q.len())
}

/// `u < min(1, p(token) / q(token))`.
pub fn accept_token(p: &ProbVec, q: &ProbVec, token: TokenId, u: f64) -> Result<bool> {
    check_pair(p, q)?;
    let t = token as usize;
    if t >= p.len() {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: p.len(),
        });
    }
    let qt = q.get(t);
    if qt <= 0.0 {
        return Err(Error::TokenNotProposed);
    }
    Ok(u < (p.get(t) / qt).min(1.0))
}

/// `norm(max(0, p - q))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDist(pub ProbVec);

pub fn residual_distribution(p: &ProbVec, q: &ProbVec) -> Result<ResidualDist> {
    check_pair(p, q)?;
    let w: Vec<f64> = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    if w.iter().fold(0.0, |s, v| s + v) <= 0.0 {
        return Err(Error::EmptyResidual);
    }
    Ok(ResidualDist(ProbVec::from_weights(w)?))
}

pub fn resample_residual(p: &ProbVec, q: &ProbVec, u: f64) -> Result<TokenId> {
    Ok(residual_distribution(p, q)?.0.sample_with(u) as TokenId)
}

/// Greedy walk. `logits[0]` belongs to the root, `logits[i + 1]` to node `i`.
pub fn walk_greedy(tree: &DraftTree, logits: &[Vec<f64>]) -> Result<(Vec<usize>, TokenId)> {
    ensure_dim("verification rows", tree.len() + 1, logits.len())?;
    let kids = tree.child_table();
    let mut path = Vec::new();
    let mut slot = 0;
    loop {
        let best = argmax(&logits[slot]) as TokenId;
        match kids[slot].iter().find(|&&c| tree.nodes[c].token == best) {
            Some(&c) => {
                path.push(c);
                slot = c + 1;
            }
            None => return Ok((path, best)),
        }
    }
}

/// Sampling walk over target distributions laid out like [`walk_greedy`].
/// Decisions are drawn from `chooser` in this order: one acceptance test per
/// tried child, then one draw for the residual or bonus token.
pub fn walk_sampling(
    tree: &DraftTree,
    target: &[ProbVec],
    chooser: &mut dyn Chooser,
) -> Result<(Vec<usize>, TokenId)> {
    ensure_dim("verification rows", tree.len() + 1, target.len())?;
    let kids = tree.child_table();
    let mut path = Vec::new();
    let mut slot = 0;
    'walk: loop {
        let mut p = target[slot].clone();
        for &c in &kids[slot] {
            let node = &tree.nodes[c];
            let q = tree
                .dists
                .get(node.dist)
                .ok_or_else(|| Error::MalformedTree(format!("node {c} has no proposal")))?;
            if chooser.accept(&p, q, node.token)? {
                path.push(c);
                slot = c + 1;
                continue 'walk;
            }
            p = residual_distribution(&p, q)?.0;
        }
        return Ok((path, chooser.draw(&p)?));
    }
}

struct Verified {
    logits: Vec<Vec<f64>>,
    features: Vec<FeatureVec>,
    forward: crate::target::TreeForward,
}

fn forward(tree: &DraftTree, target: &TargetModel, cache: &KvCache) -> Result<Verified> {
    tree.validate()?;
    if tree.context_len != cache.len() {
        return Err(Error::MalformedTree(format!(
            "tree expects {} cached positions, cache holds {}",
            tree.context_len,
            cache.len()
        )));
    }
    let flat = flatten_for_verification(tree)?;
    let fwd = target.forward_tree(cache, &flat.tokens, &flat.mask, &flat.positions)?;
    let (logits, features) = fwd
        .outputs
        .iter()
        .map(|o| (o.logits.clone(), o.feature.clone()))
        .unzip();
    Ok(Verified {
        logits,
        features,
        forward: fwd,
    })
}

fn finish(
    tree: &DraftTree,
    v: Verified,
    cache: &mut KvCache,
    path: Vec<usize>,
    final_token: TokenId,
) -> Result<VerifyOutcome> {
    let rows: Vec<usize> = std::iter::once(0).chain(path.iter().map(|c| c + 1)).collect();
    v.forward.commit(cache, &rows)?;
    let features = rows.iter().map(|&r| v.features[r].clone()).collect();
    let accepted: Vec<TokenId> = path.iter().map(|&c| tree.nodes[c].token).collect();
    Ok(VerifyOutcome {
        accepted_count: accepted.len(),
        accepted,
        path,
        final_token,
        target_forward_passes: 1,
        draft_forward_passes: tree.draft_forwards,
        features,
    })
}

/// One target forward over the tree, greedy walk, and commit of the root
/// plus the accepted path into `cache`.
pub fn verify_tree_greedy(
    tree: &DraftTree,
    target: &TargetModel,
    cache: &mut KvCache,
) -> Result<VerifyOutcome> {
    let v = forward(tree, target, cache)?;
    let (path, fin) = walk_greedy(tree, &v.logits)?;
    finish(tree, v, cache, path, fin)
}

/// Sampling counterpart of [`verify_tree_greedy`]; proposals stored in the
/// tree must already be at `temperature`.
pub fn verify_tree_sampling(
    tree: &DraftTree,
    target: &TargetModel,
    cache: &mut KvCache,
    temperature: f64,
    chooser: &mut dyn Chooser,
) -> Result<VerifyOutcome> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sampling verification needs a positive temperature, got {temperature}"
        )));
    }
    let v = forward(tree, target, cache)?;
    let dists = v
        .logits
        .iter()
        .map(|l| softmax(l, temperature))
        .collect::<Result<Vec<_>>>()?;
    let (path, fin) = walk_sampling(tree, &dists, chooser)?;
    finish(tree, v, cache, path, fin)
}
