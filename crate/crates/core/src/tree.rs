//! Candidate trees: growth from a draft model, attention masks and the
//! flattened layout verified by one target forward.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::draft::{DraftProposal, Drafter};
use crate::error::{Error, Result};
use crate::numkernel::{softmax, top_k_indices, BoolMatrix, ProbVec};
use crate::sampling::{Chooser, NoChooser};
use crate::target::{FeatureVec, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Left,
    Right,
    None,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Left => "left",
            Branch::Right => "right",
            Branch::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    pub token: TokenId,
    /// `None` for children of the root.
    pub parent: Option<usize>,
    pub depth: usize,
    /// Proposal probability of `token` under `dists[dist]`.
    pub q_prob: f64,
    /// Log-domain path score.
    pub cum_score: f64,
    pub branch: Branch,
    pub expert_score: f64,
    pub dist: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    pub nodes: Vec<DraftNode>,
    /// Proposal distributions referenced by `DraftNode::dist`.
    pub dists: Vec<ProbVec>,
    /// Last committed token; the tree hangs below it.
    pub root_token: TokenId,
    /// Target positions already cached when the tree is verified.
    pub context_len: usize,
    pub draft_forwards: usize,
}

impl DraftTree {
    pub fn empty(root_token: TokenId, context_len: usize) -> Self {
        Self {
            nodes: Vec::new(),
            dists: Vec::new(),
            root_token,
            context_len,
            draft_forwards: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Children of `parent` in tree order.
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent == parent)
            .collect()
    }

    /// Child lists for the root (slot 0) and every node (slot `i + 1`).
    pub fn child_table(&self) -> Vec<Vec<usize>> {
        let mut t = vec![Vec::new(); self.nodes.len() + 1];
        for (i, n) in self.nodes.iter().enumerate() {
            t[n.parent.map_or(0, |p| p + 1)].push(i);
        }
        t
    }

    /// Node indices from the root's child down to `i`.
    pub fn path_to(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = self.nodes[i].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    /// Checks topological order, depths, probabilities and references.
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            let expected_depth = match n.parent {
                None => 1,
                Some(p) if p < i => self.nodes[p].depth + 1,
                Some(p) => {
                    return Err(Error::MalformedTree(format!(
                        "node {i} references parent {p} that does not precede it"
                    )))
                }
            };
            if n.depth != expected_depth {
                return Err(Error::MalformedTree(format!(
                    "node {i} has depth {} but its parent implies {expected_depth}",
                    n.depth
                )));
            }
            if !(n.q_prob > 0.0 && n.q_prob <= 1.0) {
                return Err(Error::MalformedTree(format!("node {i} has q_prob {}", n.q_prob)));
            }
            if n.dist >= self.dists.len() && !self.dists.is_empty() {
                return Err(Error::MalformedTree(format!(
                    "node {i} references a missing distribution"
                )));
            }
        }
        Ok(())
    }

    /// One line per node: `idx parent depth token branch q cum`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
            writeln!(
                s,
                "{i} {parent} {} {} {} {:.6} {:.6}",
                n.depth,
                n.token,
                n.branch.as_str(),
                n.q_prob,
                n.cum_score
            )
            .expect("write to string");
        }
        s
    }
}

/// Square ancestor-or-self mask over tree nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeMask(BoolMatrix);

impl TreeMask {
    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j)
    }

    pub fn as_matrix(&self) -> &BoolMatrix {
        &self.0
    }
}

pub fn build_mask(tree: &DraftTree) -> Result<TreeMask> {
    let n = tree.len();
    let mut m = BoolMatrix::new(n, n);
    for i in 0..n {
        if let Some(p) = tree.nodes[i].parent {
            if p >= i {
                return Err(Error::MalformedTree(format!(
                    "node {i} references parent {p} that does not precede it"
                )));
            }
            for j in 0..p {
                if m.get(p, j) {
                    m.set(i, j, true);
                }
            }
            m.set(i, p, true);
        }
        m.set(i, i, true);
    }
    Ok(TreeMask(m))
}

/// Layout for a single target forward: row 0 is the root token at offset 0,
/// row `i + 1` is node `i` at offset `depth`. The mask spans the cached
/// prefix (all true) followed by the rows themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flattened {
    pub tokens: Vec<TokenId>,
    pub mask: BoolMatrix,
    pub positions: Vec<usize>,
}

pub fn flatten_for_verification(tree: &DraftTree) -> Result<Flattened> {
    let tm = build_mask(tree)?;
    let n = tree.len() + 1;
    let ctx = tree.context_len;
    let mask = BoolMatrix::from_fn(n, ctx + n, |r, c| {
        if c <= ctx {
            true
        } else if r == 0 {
            false
        } else {
            let j = c - ctx - 1;
            j < tree.len() && tm.get(r - 1, j)
        }
    });
    let mut tokens = vec![tree.root_token];
    tokens.extend(tree.nodes.iter().map(|n| n.token));
    let mut positions = vec![0];
    positions.extend(tree.nodes.iter().map(|n| n.depth));
    Ok(Flattened {
        tokens,
        mask,
        positions,
    })
}

/// Recovers node parents from a flattened layout.
pub fn unflatten_parents(flat: &Flattened, context_len: usize) -> Result<Vec<Option<usize>>> {
    let n = flat.tokens.len();
    if n == 0 || flat.mask.cols() != context_len + n {
        return Err(Error::MalformedTree("layout does not match context".into()));
    }
    (1..n)
        .map(|r| {
            let anc: Vec<usize> = (1..r).filter(|&j| flat.mask.get(r, context_len + j)).collect();
            if anc.len() + 1 != flat.positions[r] {
                return Err(Error::MalformedTree(format!(
                    "row {r} depth inconsistent with mask"
                )));
            }
            Ok(anc.last().map(|&j| j - 1))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeShape {
    Chain,
    Static,
    Moe,
    /// Static mixture tree whose last level comes from the contrastive head
    /// of the step one level up.
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowConfig {
    pub shape: TreeShape,
    pub gamma: usize,
    /// Children per expanded node (per branch for the MoE tree).
    pub top_k: usize,
    /// Nodes kept per layer.
    pub beam: usize,
    pub node_budget: usize,
    /// `<= 0` grows deterministically.
    pub temperature: f64,
    /// Adds the emitting expert's log-score to MoE path scores.
    pub weight_expert_score: bool,
}

impl Default for GrowConfig {
    fn default() -> Self {
        Self {
            shape: TreeShape::Static,
            gamma: 5,
            top_k: 10,
            beam: 10,
            node_budget: 60,
            temperature: 0.0,
            weight_expert_score: true,
        }
    }
}

/// Draft state carried across rounds plus steps not yet fed to the draft.
/// The last pending entry is always `(feature before root, root token)`.
#[derive(Debug, Clone)]
pub struct DraftCursor<S> {
    pub state: S,
    pub pending: Vec<(FeatureVec, TokenId)>,
}

impl<S> DraftCursor<S> {
    pub fn new(state: S) -> Self {
        Self {
            state,
            pending: Vec::new(),
        }
    }
}

#[derive(Clone, Copy)]
struct Source {
    branch: Branch,
    score: f64,
    dist: usize,
}

struct Expanded<S> {
    node: Option<usize>,
    state: S,
    proposal: DraftProposal,
}

struct Cand {
    parent: Option<usize>,
    token: TokenId,
    q: f64,
    cum: f64,
    src: Source,
}

fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Grows one round's tree. Consumes `cursor.pending`, leaving
/// `cursor.state` positioned after the root step.
pub fn grow_tree<D: Drafter>(
    draft: &D,
    cursor: &mut DraftCursor<D::State>,
    context_len: usize,
    cfg: &GrowConfig,
    chooser: &mut dyn Chooser,
) -> Result<DraftTree> {
    if cfg.gamma == 0 || cfg.top_k == 0 || cfg.beam == 0 {
        return Err(Error::InvalidArgument(
            "gamma, top_k and beam must be positive".into(),
        ));
    }
    let shape = cfg.shape;
    if matches!(shape, TreeShape::Moe | TreeShape::Parallel) && draft.active_experts() < 2 {
        return Err(Error::ContrastNeedsTwoExperts);
    }
    if shape == TreeShape::Parallel && cfg.gamma < 2 {
        return Err(Error::ParallelStepDepth {
            depth: 0,
            expected: 1,
        });
    }
    let (top_k, beam) = match shape {
        TreeShape::Chain => (1, 1),
        _ => (cfg.top_k, cfg.beam),
    };
    let greedy = cfg.temperature <= 0.0;
    let temp = if greedy { 1.0 } else { cfg.temperature };
    let Some(&(_, root_token)) = cursor.pending.last() else {
        return Err(Error::InvalidArgument(
            "draft cursor has no pending root step".into(),
        ));
    };
    let mut root = None;
    for (f, t) in std::mem::take(&mut cursor.pending) {
        root = Some(draft.step(&mut cursor.state, &f, t)?);
    }
    let mut tree = DraftTree::empty(root_token, context_len);
    tree.draft_forwards = 1;
    let mut frontier = vec![Expanded {
        node: None,
        state: cursor.state.clone(),
        proposal: root.expect("pending was non-empty"),
    }];
    // const head sources come from the step one level above the last
    let mut const_sources: Vec<(Option<usize>, Source)> = Vec::new();

    for depth in 1..=cfg.gamma {
        let last_parallel = shape == TreeShape::Parallel && depth == cfg.gamma;
        let mut groups: Vec<(Option<usize>, f64, Vec<Source>)> = Vec::new();
        if last_parallel {
            for &(node, src) in &const_sources {
                groups.push((node, node.map_or(0.0, |i| tree.nodes[i].cum_score), vec![src]));
            }
        } else {
            for e in &frontier {
                let cum = e.node.map_or(0.0, |i| tree.nodes[i].cum_score);
                let p = &e.proposal;
                let srcs = match shape {
                    TreeShape::Moe => vec![
                        (Branch::Left, p.score_left, &p.logits_left),
                        (Branch::Right, p.score_right, &p.logits_right),
                    ],
                    _ => vec![(Branch::None, 1.0, &p.logits_moe)],
                };
                let mut list = Vec::new();
                for (branch, score, logits) in srcs {
                    tree.dists.push(softmax(logits, temp)?);
                    list.push(Source {
                        branch,
                        score,
                        dist: tree.dists.len() - 1,
                    });
                }
                groups.push((e.node, cum, list));
            }
        }

        let remaining = cfg.node_budget.saturating_sub(tree.len());
        if remaining == 0 {
            break;
        }
        let mut cands: Vec<Cand> = Vec::new();
        if greedy {
            for (parent, cum, srcs) in &groups {
                let start = cands.len();
                for src in srcs {
                    let d = &tree.dists[src.dist];
                    for t in top_k_indices(d.as_slice(), top_k) {
                        let q = d.get(t);
                        if q <= 0.0 {
                            continue;
                        }
                        let c = Cand {
                            parent: *parent,
                            token: t as TokenId,
                            q,
                            cum: cum + q.ln() + branch_weight(cfg, *src),
                            src: *src,
                        };
                        match cands[start..].iter_mut().find(|o| o.token == c.token) {
                            Some(o) if o.cum < c.cum => *o = c,
                            Some(_) => {}
                            None => cands.push(c),
                        }
                    }
                }
            }
            let scores: Vec<f64> = cands.iter().map(|c| c.cum).collect();
            let mut keep = vec![false; cands.len()];
            for &i in rank_desc(&scores).iter().take(beam.min(remaining)) {
                keep[i] = true;
            }
            let mut k = keep.into_iter();
            cands.retain(|_| k.next().unwrap_or(false));
        } else {
            // every drawn child is kept, so verification stays unbiased
            let per = groups.first().map_or(1, |g| g.2.len()) * top_k;
            let allowed = if depth == 1 { 1 } else { (beam / top_k).max(1) };
            let allowed = allowed.min(remaining / per);
            let scores: Vec<f64> = groups.iter().map(|g| g.1).collect();
            let mut chosen: Vec<usize> = rank_desc(&scores).into_iter().take(allowed).collect();
            chosen.sort_unstable();
            for gi in chosen {
                let (parent, cum, srcs) = &groups[gi];
                for src in srcs {
                    for _ in 0..top_k {
                        let d = &tree.dists[src.dist];
                        let t = chooser.draw(d)?;
                        let q = d.get(t as usize);
                        cands.push(Cand {
                            parent: *parent,
                            token: t,
                            q,
                            cum: cum + q.ln() + branch_weight(cfg, *src),
                            src: *src,
                        });
                    }
                }
            }
        }
        if cands.is_empty() {
            break;
        }
        let first_new = tree.len();
        for c in cands {
            tree.nodes.push(DraftNode {
                token: c.token,
                parent: c.parent,
                depth,
                q_prob: c.q,
                cum_score: c.cum,
                branch: c.src.branch,
                expert_score: c.src.score,
                dist: c.src.dist,
            });
        }
        if depth == cfg.gamma {
            break;
        }

        let parallel_next = shape == TreeShape::Parallel && depth + 1 == cfg.gamma;
        if parallel_next {
            const_sources.clear();
            let mut cached: Vec<(Option<usize>, usize)> = Vec::new();
            for i in first_new..tree.len() {
                let parent = tree.nodes[i].parent;
                let e = frontier
                    .iter()
                    .find(|e| e.node == parent)
                    .expect("parent was expanded");
                let dist = match cached.iter().find(|(p, _)| *p == parent) {
                    Some(&(_, d)) => d,
                    None => {
                        let logits = e
                            .proposal
                            .logits_const
                            .as_ref()
                            .ok_or(Error::ContrastNeedsTwoExperts)?;
                        tree.dists.push(softmax(logits, temp)?);
                        cached.push((parent, tree.dists.len() - 1));
                        tree.dists.len() - 1
                    }
                };
                const_sources.push((
                    Some(i),
                    Source {
                        branch: Branch::None,
                        score: 1.0,
                        dist,
                    },
                ));
            }
            continue;
        }

        let mut next = Vec::new();
        for i in first_new..tree.len() {
            let parent = tree.nodes[i].parent;
            let e = frontier
                .iter()
                .find(|e| e.node == parent)
                .expect("parent was expanded");
            let mut state = e.state.clone();
            let proposal = draft.step(&mut state, &e.proposal.feature, tree.nodes[i].token)?;
            next.push(Expanded {
                node: Some(i),
                state,
                proposal,
            });
        }
        tree.draft_forwards += 1;
        frontier = next;
    }
    Ok(tree)
}

fn branch_weight(cfg: &GrowConfig, src: Source) -> f64 {
    if cfg.weight_expert_score && src.branch != Branch::None {
        src.score.ln()
    } else {
        0.0
    }
}

fn fresh<D: Drafter>(
    draft: &D,
    prev_feature: &[f64],
    start_token: TokenId,
    cfg: GrowConfig,
) -> Result<DraftTree> {
    let mut cursor = DraftCursor::new(draft.init_state());
    cursor.pending.push((prev_feature.to_vec(), start_token));
    grow_tree(draft, &mut cursor, 0, &cfg, &mut NoChooser)
}

/// Greedy chain of `gamma` tokens from a fresh draft state.
pub fn grow_chain<D: Drafter>(
    draft: &D,
    prev_feature: &[f64],
    start_token: TokenId,
    gamma: usize,
) -> Result<DraftTree> {
    fresh(
        draft,
        prev_feature,
        start_token,
        GrowConfig {
            shape: TreeShape::Chain,
            gamma,
            ..GrowConfig::default()
        },
    )
}

/// Greedy top-k tree from the mixture head.
pub fn grow_static_tree<D: Drafter>(
    draft: &D,
    prev_feature: &[f64],
    start_token: TokenId,
    gamma: usize,
    top_k: usize,
    beam: usize,
) -> Result<DraftTree> {
    fresh(
        draft,
        prev_feature,
        start_token,
        GrowConfig {
            shape: TreeShape::Static,
            gamma,
            top_k,
            beam,
            ..GrowConfig::default()
        },
    )
}

/// Greedy decoupled tree: `top_k` tokens from each expert branch per node.
pub fn grow_moe_tree<D: Drafter>(
    draft: &D,
    prev_feature: &[f64],
    start_token: TokenId,
    gamma: usize,
    top_k: usize,
    beam: usize,
) -> Result<DraftTree> {
    fresh(
        draft,
        prev_feature,
        start_token,
        GrowConfig {
            shape: TreeShape::Moe,
            gamma,
            top_k,
            beam,
            ..GrowConfig::default()
        },
    )
}
