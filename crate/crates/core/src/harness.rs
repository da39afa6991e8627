//! End-to-end runs driven by a [`RunConfig`]: multi-method benchmarks and
//! the expert-count sweep.

use crate::config::RunConfig;
use crate::draft::JakiroDraft;
use crate::error::{Error, Result};
use crate::report::{Report, SweepCell};
use crate::session::{run_session, Method, Metrics};
use crate::target::{TargetModel, TokenId};
use crate::train::{train, TrainBatch};

/// `(N, K)` cells of the sweep, largest expert pool first.
pub const SWEEP_GRID: [(usize, usize); 4] = [(5, 2), (4, 2), (3, 2), (2, 2)];

/// Runs each method on the same prompts and checks the counter identities.
/// At temperature 0 every method must reproduce the first one's outputs.
pub fn run_methods(
    cfg: &RunConfig,
    target: &TargetModel,
    draft: &JakiroDraft,
    prompts: &[Vec<TokenId>],
    methods: &[Method],
) -> Result<Vec<Metrics>> {
    let mut out: Vec<Metrics> = Vec::with_capacity(methods.len());
    for &m in methods {
        let metrics = run_session(target, draft, prompts, &cfg.decode_settings(m), cfg.seed)?;
        metrics.check(cfg.gamma)?;
        if cfg.temperature == 0.0 {
            if let Some(first) = out.first() {
                for (a, b) in first.per_prompt.iter().zip(&metrics.per_prompt) {
                    if a.output != b.output {
                        return Err(Error::Invariant(format!(
                            "greedy output of {m} differs from {} on prompt {:?}",
                            first.method, a.prompt
                        )));
                    }
                }
            }
        }
        log::info!(
            "{m}: tau {:.3} over {} target forwards",
            metrics.tau,
            metrics.target_forwards
        );
        out.push(metrics);
    }
    Ok(out)
}

pub fn bench_report(
    cfg: &RunConfig,
    target: &TargetModel,
    draft: &JakiroDraft,
    methods: &[Method],
) -> Result<Report> {
    let prompts = cfg.prompt_set(target)?;
    let metrics = run_methods(cfg, target, draft, &prompts, methods)?;
    Report::new(cfg.clone(), metrics)
}

/// Trains one draft per grid cell on `corpus` and decodes with an
/// expert-tree method (the configured one if it uses experts).
pub fn sweep_report(
    cfg: &RunConfig,
    target: &TargetModel,
    corpus: &[TrainBatch],
    grid: &[(usize, usize)],
) -> Result<Report> {
    let method = if cfg.method.uses_experts() {
        cfg.method
    } else {
        Method::MoeTree
    };
    let prompts = cfg.prompt_set(target)?;
    let mut cells = Vec::with_capacity(grid.len());
    for &(n, k) in grid {
        let mut cell_cfg = cfg.clone();
        cell_cfg.n_experts = n;
        cell_cfg.k_active = k;
        cell_cfg.method = method;
        cell_cfg.validate()?;
        let mut draft = JakiroDraft::new(target, &cell_cfg.draft_config())?;
        let log = train(&mut draft, corpus, &cell_cfg.train)?;
        let metrics = run_session(
            target,
            &draft,
            &prompts,
            &cell_cfg.decode_settings(method),
            cfg.seed,
        )?;
        metrics.check(cfg.gamma)?;
        log::info!("N={n} K={k}: tau {:.3}", metrics.tau);
        cells.push(SweepCell {
            n_experts: n,
            k_active: k,
            method,
            tau: metrics.tau,
            target_forwards: metrics.target_forwards,
            final_loss: log.losses.last().map_or(f64::NAN, |l| l.total),
        });
    }
    Ok(Report::sweep(cfg.clone(), cells))
}
