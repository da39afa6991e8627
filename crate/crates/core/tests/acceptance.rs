//! Acceptance criteria; prints one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specdec::draft::route_experts;
use specdec::numkernel::softmax;
use specdec::sampling::Enumerator;
use specdec::session::{run_session, synthetic_prompts};
use specdec::train::{finite_diff_check, generate_distillation_corpus, jakiro_loss, train};
use specdec::tree::{build_mask, flatten_for_verification, grow_tree, Branch, DraftCursor};
use specdec::verify::{accept_token, residual_distribution, verify_tree_sampling};
use specdec::{
    DecodeSettings, DraftConfig, DraftNode, DraftTree, Drafter, GrowConfig, JakiroDraft, Method, ProbVec,
    TargetConfig, TargetModel, TokenId, TrainConfig, TreeShape,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tiny_pair(seed: u64) -> (TargetModel, JakiroDraft) {
    let t = TargetModel::new(&TargetConfig {
        vocab: 8,
        dim: 8,
        layers: 1,
        heads: 2,
        seed,
        ..TargetConfig::default()
    })
    .unwrap();
    let d = JakiroDraft::new(&t, &DraftConfig::default()).unwrap();
    (t, d)
}

fn lightly_trained() -> (TargetModel, JakiroDraft) {
    let target = TargetModel::new(&TargetConfig::default()).unwrap();
    let corpus = generate_distillation_corpus(&target, 64, 32, 1.0, 11).unwrap();
    let mut draft = JakiroDraft::new(&target, &DraftConfig::default()).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    train(&mut draft, &corpus, &cfg).unwrap();
    (target, draft)
}

fn greedy_losslessness() -> Outcome {
    let (target, draft) = lightly_trained();
    let prompts = synthetic_prompts(target.vocab(), 200, 8, 2024);
    let settings = DecodeSettings {
        method: Method::JakiroFull,
        temperature: 0.0,
        max_new: 32,
        ..DecodeSettings::default()
    };
    let m = run_session(&target, &draft, &prompts, &settings, 0).map_err(e2s)?;
    for (p, pm) in prompts.iter().zip(&m.per_prompt) {
        let reference = target.autoregressive_decode(p, 32, 0.0, 0).map_err(e2s)?;
        ensure(reference == pm.output, || format!("prompt {p:?} diverged"))?;
    }
    Ok(format!("200 prompts bit-identical, tau {:.3}", m.tau))
}

/// `p`, `q` from small integer weights; some entries of each are zero.
fn rational_pair(rng: &mut ChaCha8Rng, v: usize) -> (ProbVec, ProbVec) {
    let mut draw = |zero_rate: f64| loop {
        let w: Vec<f64> = (0..v)
            .map(|_| {
                if rng.random::<f64>() < zero_rate {
                    0.0
                } else {
                    rng.random_range(1..=16) as f64
                }
            })
            .collect();
        if w.iter().sum::<f64>() > 0.0 {
            return ProbVec::from_weights(w).unwrap();
        }
    };
    let p = draw(0.2);
    let q = draw(0.2);
    (p, q)
}

fn single_step_losslessness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = 8;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p, q) = rational_pair(&mut rng, v);
        // acceptance probability read off accept_token at the boundary u
        let accept_prob: Vec<f64> = (0..v)
            .map(|x| {
                if q.get(x) == 0.0 {
                    return Ok(0.0);
                }
                let a = (p.get(x) / q.get(x)).min(1.0);
                let inside =
                    a == 0.0 || accept_token(&p, &q, x as TokenId, a * (1.0 - 1e-12)).map_err(e2s)?;
                let outside =
                    a < 1.0 && accept_token(&p, &q, x as TokenId, a * (1.0 + 1e-12) + 1e-15).map_err(e2s)?;
                ensure(inside && !outside, || {
                    format!("acceptance threshold of token {x} is not min(1, p/q)")
                })?;
                Ok(a)
            })
            .collect::<Result<_, String>>()?;
        let reject: f64 = (0..v).map(|x| q.get(x) * (1.0 - accept_prob[x])).sum();
        let residual = if reject > 1e-15 {
            Some(residual_distribution(&p, &q).map_err(e2s)?.0)
        } else {
            None
        };
        for x in 0..v {
            let out = q.get(x) * accept_prob[x] + residual.as_ref().map_or(0.0, |r| reject * r.get(x));
            worst = worst.max((out - p.get(x)).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 pairs, max |out - p| = {worst:.1e}"))
}

/// Exact output law of one full speculative round: every tree realization
/// and every acceptance / residual decision is enumerated.
fn enumerate_round(
    target: &TargetModel,
    draft: &JakiroDraft,
    prompt: &[TokenId],
    grow: &GrowConfig,
) -> Result<(BTreeMap<Vec<TokenId>, f64>, usize), String> {
    let mut cache = target.new_cache();
    let mut cursor = DraftCursor::new(draft.init_state());
    draft.start(&mut cursor.state, prompt[0]).map_err(e2s)?;
    for i in 0..prompt.len() - 1 {
        let out = target.forward_cached(&mut cache, prompt[i]).map_err(e2s)?;
        cursor.pending.push((out.feature, prompt[i + 1]));
    }
    let mut law: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
    let mut en = Enumerator::new();
    let mut runs = 0;
    while en.next_run() {
        let mut c = cache.clone();
        let mut cur = cursor.clone();
        let tree = grow_tree(draft, &mut cur, c.len(), grow, &mut en).map_err(e2s)?;
        let o = verify_tree_sampling(&tree, target, &mut c, 1.0, &mut en).map_err(e2s)?;
        *law.entry(o.emitted().take(2).collect()).or_default() += en.weight();
        runs += 1;
    }
    Ok((law, runs))
}

fn tree_losslessness() -> Outcome {
    let (target, draft) = tiny_pair(5);
    let prompt: Vec<TokenId> = vec![1, 6, 3];
    let v = target.vocab();
    let next = |ctx: &[TokenId]| -> Result<ProbVec, String> {
        let mut cache = target.new_cache();
        let mut last = None;
        for &t in ctx {
            last = Some(target.forward_cached(&mut cache, t).map_err(e2s)?);
        }
        softmax(&last.unwrap().logits, 1.0).map_err(e2s)
    };
    let p1 = next(&prompt)?;
    let p2: Vec<ProbVec> = (0..v)
        .map(|a| next(&[prompt.clone(), vec![a as TokenId]].concat()))
        .collect::<Result<_, _>>()?;
    let mut summary = Vec::new();
    for (name, shape, top_k, beam) in [
        ("static", TreeShape::Static, 2, 2),
        ("moe", TreeShape::Moe, 1, 1),
        ("parallel", TreeShape::Parallel, 1, 1),
    ] {
        let grow = GrowConfig {
            shape,
            gamma: 2,
            top_k,
            beam,
            temperature: 1.0,
            ..GrowConfig::default()
        };
        let (law, runs) = enumerate_round(&target, &draft, &prompt, &grow)?;
        let total: f64 = law.values().sum();
        ensure((total - 1.0).abs() <= 1e-10, || {
            format!("{name}: total mass {total}")
        })?;
        let mut worst: f64 = 0.0;
        for a in 0..v {
            let one = law.get(&vec![a as TokenId]).copied().unwrap_or(0.0);
            for b in 0..v {
                let two = law.get(&vec![a as TokenId, b as TokenId]).copied().unwrap_or(0.0);
                let got = two + one * p2[a].get(b);
                worst = worst.max((got - p1.get(a) * p2[a].get(b)).abs());
            }
        }
        ensure(worst <= 1e-10, || format!("{name}: max deviation {worst:e}"))?;
        summary.push(format!("{name} {runs} paths dev {worst:.1e}"));
    }
    Ok(summary.join(", "))
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> DraftTree {
    let mut tree = DraftTree::empty(0, rng.random_range(0..6));
    for i in 0..n {
        let parent = if i == 0 || rng.random::<f64>() < 0.2 {
            None
        } else {
            Some(rng.random_range(0..i))
        };
        let depth = parent.map_or(1, |p| tree.nodes[p].depth + 1);
        tree.nodes.push(DraftNode {
            token: rng.random_range(0..64),
            parent,
            depth,
            q_prob: 0.5,
            cum_score: 0.0,
            branch: Branch::None,
            expert_score: 1.0,
            dist: 0,
        });
    }
    tree
}

fn mask_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let n = rng.random_range(0..=64);
        let tree = random_tree(&mut rng, n);
        let ancestors = |mut i: usize| {
            let mut set = vec![false; n];
            loop {
                set[i] = true;
                match tree.nodes[i].parent {
                    Some(p) => i = p,
                    None => return set,
                }
            }
        };
        let mask = build_mask(&tree).map_err(e2s)?;
        let flat = flatten_for_verification(&tree).map_err(e2s)?;
        let ctx = tree.context_len;
        for i in 0..n {
            let anc = ancestors(i);
            for j in 0..n {
                ensure(mask.get(i, j) == anc[j], || {
                    format!("tree {case}: mask[{i}][{j}]")
                })?;
                ensure(flat.mask.get(i + 1, ctx + 1 + j) == anc[j], || {
                    format!("tree {case}: flattened row {}", i + 1)
                })?;
            }
            ensure(flat.positions[i + 1] == tree.nodes[i].depth, || {
                format!("tree {case}: position of {i}")
            })?;
        }
    }
    Ok("1000 trees match the ancestor walk".into())
}

fn routing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = TargetModel::new(&TargetConfig::default()).unwrap();
    let mut checked = 0;
    for n in 2..=5 {
        let draft = JakiroDraft::new(
            &target,
            &DraftConfig {
                experts: n,
                active: 2,
                ..DraftConfig::default()
            },
        )
        .map_err(e2s)?;
        let mut cache = draft.new_cache();
        for i in 0..250 {
            let u: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (scores, gates) = route_experts(&u, &draft.moe).map_err(e2s)?;
            let logits: Vec<f64> = (0..n)
                .map(|j| u.iter().zip(draft.moe.centroids.row(j)).map(|(a, b)| a * b).sum())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let oracle: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
            ensure(gates.nonzero() == 2, || {
                format!("N={n}: {} nonzero gates", gates.nonzero())
            })?;
            for j in 0..n {
                let g = gates.0[j];
                ensure(g == 0.0 || (g - oracle[j]).abs() < 1e-12, || {
                    format!("N={n}: gate {j} = {g}, score {}", oracle[j])
                })?;
            }
            ensure(scores.score_of_rank(0) >= scores.score_of_rank(1), || {
                "router order".into()
            })?;
            let out = draft
                .draft_forward(&u, (i % target.vocab()) as TokenId, &mut cache)
                .map_err(e2s)?;
            ensure(out.score_left() >= out.score_right(), || {
                format!("N={n}: left below right")
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} inputs over N = 2..5, K = 2"))
}

fn gradient_audit() -> Outcome {
    let target = TargetModel::new(&TargetConfig::default()).unwrap();
    let draft = JakiroDraft::new(&target, &DraftConfig::default()).unwrap();
    let batches = generate_distillation_corpus(&target, 4, 12, 1.0, 6).map_err(e2s)?;
    let check = finite_diff_check(&draft, &batches, &TrainConfig::default(), 64, 1e-5, 6).map_err(e2s)?;
    let groups: std::collections::BTreeSet<&str> = check.coords.iter().map(|c| c.0).collect();
    ensure(check.coords.len() == 64, || {
        format!("{} coordinates", check.coords.len())
    })?;
    ensure(groups.contains("beta") && groups.contains("alpha"), || {
        format!("groups {groups:?}")
    })?;
    ensure(check.max_rel_error < 1e-3, || {
        format!("max relative error {:e}", check.max_rel_error)
    })?;
    Ok(format!(
        "max relative error {:.2e} over {} groups",
        check.max_rel_error,
        groups.len()
    ))
}

fn draft_forward_economics() -> Outcome {
    let (target, draft) = lightly_trained();
    let prompts = synthetic_prompts(target.vocab(), 8, 8, 77);
    let gamma = 5;
    let mut parts = Vec::new();
    for (method, expected) in [(Method::JakiroFull, gamma - 1), (Method::MoeTree, gamma)] {
        let settings = DecodeSettings {
            method,
            gamma,
            max_new: 64,
            ..DecodeSettings::default()
        };
        let m = run_session(&target, &draft, &prompts, &settings, 0).map_err(e2s)?;
        let per_round: Vec<usize> = m
            .per_prompt
            .iter()
            .flat_map(|p| p.draft_forwards_per_round.iter().copied())
            .collect();
        ensure(per_round.len() >= 100, || {
            format!("{method}: only {} rounds", per_round.len())
        })?;
        ensure(per_round.iter().all(|&f| f == expected), || {
            format!("{method}: a round did not use {expected} draft forwards")
        })?;
        ensure(m.draft_forwards == expected * m.rounds, || {
            format!("{method}: totals disagree")
        })?;
        parts.push(format!("{method} {expected}/round over {} rounds", m.rounds));
    }
    Ok(parts.join(", "))
}

fn distillation_efficacy() -> Outcome {
    let target = TargetModel::new(&TargetConfig::default()).unwrap();
    let corpus = generate_distillation_corpus(&target, 512, 32, 1.0, 0).map_err(e2s)?;
    let mut draft = JakiroDraft::new(&target, &DraftConfig::default()).unwrap();
    let log = train(&mut draft, &corpus, &TrainConfig::default()).map_err(e2s)?;
    ensure(log.losses.len() == 2000, || format!("{} steps", log.losses.len()))?;
    let prompts = synthetic_prompts(target.vocab(), 32, 8, 1234);
    let tau = |method| {
        let s = DecodeSettings {
            method,
            max_new: 48,
            ..DecodeSettings::default()
        };
        run_session(&target, &draft, &prompts, &s, 0)
            .map(|m| m.tau)
            .map_err(e2s)
    };
    let chain = tau(Method::Chain)?;
    let moe = tau(Method::MoeTree)?;
    ensure(chain >= 1.5, || format!("chain tau {chain:.3} < 1.5"))?;
    ensure(moe >= chain - 0.05, || {
        format!("moe_tree tau {moe:.3} < chain {chain:.3} - 0.05")
    })?;
    Ok(format!("chain tau {chain:.3}, moe_tree tau {moe:.3}"))
}

fn loss_decomposition() -> Outcome {
    let (target, draft) = lightly_trained();
    let batches = generate_distillation_corpus(&target, 8, 32, 1.0, 9).map_err(e2s)?;
    let l = jakiro_loss(&draft, &batches, &TrainConfig::default()).map_err(e2s)?;
    let recombined = l.reg_moe + 0.1 * l.cls_moe + l.reg_const + 0.05 * l.cls_const;
    let dev = (l.total - recombined).abs();
    ensure(dev <= 1e-12, || format!("deviation {dev:e}"))?;
    Ok(format!("total {:.6}, deviation {dev:.1e}", l.total))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("greedy losslessness, jakiro_full vs vanilla", greedy_losslessness),
        ("single-step sampling losslessness", single_step_losslessness),
        ("tree sampling losslessness", tree_losslessness),
        ("tree mask correctness", mask_correctness),
        ("MoE routing", routing),
        ("gradient audit", gradient_audit),
        ("draft-forward economics", draft_forward_economics),
        ("distillation efficacy", distillation_efficacy),
        ("loss decomposition", loss_decomposition),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id} PASS {name}: {detail} ({secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} FAIL {name}: {why} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
