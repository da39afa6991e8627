use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specdec::config::load_config_with_warnings;
use specdec::harness::{bench_report, sweep_report, SWEEP_GRID};
use specdec::train::{finite_diff_check, save_corpus, train};
use specdec::{run_session, Error, Method, Report, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "specdec",
    version,
    about = "Speculative decoding harness on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the decoding and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    /// Write a JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Distil a draft from the target and save it.
    Train {
        #[command(flatten)]
        common: Common,
        /// Draft checkpoint path (defaults to checkpoints.draft).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode the configured prompts with one method.
    Decode {
        #[command(flatten)]
        common: Common,
    },
    /// Decode with every method (or vanilla plus --method) and compare.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate one draft per (N, K) cell.
    SweepNk {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and central-difference loss gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Sample a distillation corpus from the target.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Corpus path (defaults to checkpoints.corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config_with_warnings(p)?.0,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(m) = common.method {
        cfg.method = m;
    }
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    Ok(cfg)
}

fn output_path(out: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("no {what} path: pass --out or set checkpoints.{what}")))
}

fn emit(report: &Report, path: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = path {
        specdec::write_report(report, p)?;
        log::info!("report written to {}", p.display());
    }
    Ok(())
}

fn fmt_tokens(t: &[u32]) -> String {
    t.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { common, out } => {
            let cfg = load(&common)?;
            let path = output_path(&out, &cfg.checkpoints.draft, "draft")?;
            let target = cfg.target_model()?;
            let corpus = cfg.corpus_batches(&target)?;
            let mut draft = specdec::JakiroDraft::new(&target, &cfg.draft_config())?;
            let log = train(&mut draft, &corpus, &cfg.train)?;
            let last = log.losses.last().ok_or(Error::EmptyInput)?;
            println!(
                "loss {:.6} (reg_moe {:.6} cls_moe {:.6} reg_const {:.6} cls_const {:.6})",
                last.total, last.reg_moe, last.cls_moe, last.reg_const, last.cls_const
            );
            draft.save(&path)?;
            if let Some(t) = &cfg.checkpoints.target {
                if !t.exists() {
                    target.save(t)?;
                }
            }
            println!("draft saved to {}", path.display());
        }
        Command::Decode { common } => {
            let cfg = load(&common)?;
            let target = cfg.target_model()?;
            let draft = cfg.draft_model(&target)?;
            let prompts = cfg.prompt_set(&target)?;
            let m = run_session(
                &target,
                &draft,
                &prompts,
                &cfg.decode_settings(cfg.method),
                cfg.seed,
            )?;
            m.check(cfg.gamma)?;
            for p in &m.per_prompt {
                println!("{} | {}", fmt_tokens(&p.prompt), fmt_tokens(&p.output));
            }
            println!(
                "{}: tau {:.4} tokens {} target_forwards {} draft_forwards {} wall_ms {:.1}",
                m.method, m.tau, m.tokens_emitted, m.target_forwards, m.draft_forwards, m.wall_ms
            );
            emit(&Report::new(cfg, vec![m])?, &common.report)?;
        }
        Command::Bench { common } => {
            let cfg = load(&common)?;
            let target = cfg.target_model()?;
            let draft = cfg.draft_model(&target)?;
            let methods = match common.method {
                Some(Method::Vanilla) | None => Method::ALL.to_vec(),
                Some(m) => vec![Method::Vanilla, m],
            };
            let report = bench_report(&cfg, &target, &draft, &methods)?;
            println!(
                "{:<12} {:>7} {:>9} {:>9} {:>9} {:>9}",
                "method", "tau", "target_fw", "draft_fw", "fw_ratio", "wall_ratio"
            );
            for (m, s) in report.metrics.iter().zip(&report.speedups) {
                println!(
                    "{:<12} {:>7.4} {:>9} {:>9} {:>9.4} {:>9.4}",
                    m.method.as_str(),
                    m.tau,
                    m.target_forwards,
                    m.draft_forwards,
                    s.forward_ratio,
                    s.wall_ratio
                );
            }
            emit(&report, &common.report)?;
        }
        Command::SweepNk { common } => {
            let cfg = load(&common)?;
            let target = cfg.target_model()?;
            let corpus = cfg.corpus_batches(&target)?;
            let report = sweep_report(&cfg, &target, &corpus, &SWEEP_GRID)?;
            for c in &report.sweep {
                println!(
                    "N={} K={} tau {:.4} loss {:.6}",
                    c.n_experts, c.k_active, c.tau, c.final_loss
                );
            }
            println!("trend: {}", report.sweep_trend.as_deref().unwrap_or("flat"));
            emit(&report, &common.report)?;
        }
        Command::Gradcheck {
            common,
            coords,
            step,
            tolerance,
        } => {
            let cfg = load(&common)?;
            let target = cfg.target_model()?;
            let draft = cfg.draft_model(&target)?;
            let mut corpus = cfg.corpus_batches(&target)?;
            corpus.truncate(cfg.train.batch_size);
            let check = finite_diff_check(&draft, &corpus, &cfg.train, coords, step, cfg.seed)?;
            println!(
                "max relative error {:.3e} over {} coordinates",
                check.max_rel_error,
                check.coords.len()
            );
            if !(check.max_rel_error < tolerance) {
                return Err(Error::Invariant(format!(
                    "gradient relative error {:.3e} exceeds {tolerance:e}",
                    check.max_rel_error
                )));
            }
        }
        Command::GenCorpus { common, out } => {
            let cfg = load(&common)?;
            let path = output_path(&out, &cfg.checkpoints.corpus, "corpus")?;
            let target = cfg.target_model()?;
            let c = &cfg.corpus;
            let corpus = specdec::train::generate_distillation_corpus(
                &target,
                c.sequences,
                c.seq_len,
                c.temperature,
                c.seed,
            )?;
            save_corpus(&corpus, &target, &path)?;
            println!("{} sequences written to {}", corpus.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Invariant(_) => 3,
                _ => 1,
            })
        }
    }
}
