use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qexpand::config::AppConfig;
use qexpand::pipeline;
use qexpand::service::{router, AppState};
use qexpand_core::expander::Strategy;
use qexpand_core::model::OptimizerKind;
use qexpand_core::synth::IntentBenchmarkConfig;

#[derive(Parser)]
#[command(name = "qexpand", version, about = "Self-supervised query expansion for code search")]
struct Cli {
    /// Configuration file (TOML).
    #[arg(short, long, global = true, default_value = "qexpand.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and the search index from the corpora.
    Prepare,
    /// Pre-train the span infilling model on the query corpus.
    Train {
        /// Override `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print reformulations of one query: IG, position, span, text.
    Reformulate {
        #[arg(value_parser = non_blank)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// RAND, PROB or ENTR.
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Score the configured strategy against the unreformulated baseline.
    Evaluate {
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Positioning-strategy and candidate-count ablations.
    Ablate,
    /// Write the synthetic intent benchmark and a config that uses it.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 101)]
        seed: u64,
    },
    /// Serve the HTTP API.
    Serve {
        /// Override `service.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
}

fn non_blank(s: &str) -> Result<String, String> {
    if s.split_whitespace().next().is_none() {
        Err("query must contain at least one word".into())
    } else {
        Ok(s.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth { out, seed } = &cli.command {
        let bench = IntentBenchmarkConfig {
            seed: *seed,
            ..IntentBenchmarkConfig::default()
        };
        let mut app = AppConfig::default();
        app.vocab.min_freq = 1;
        app.train.epochs = 250;
        app.train.optimizer = OptimizerKind::Adam;
        let path = pipeline::write_benchmark(out, &bench, &app)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let mut cfg = AppConfig::load(&cli.config)?;
    match cli.command {
        Command::Prepare => {
            let s = pipeline::prepare(&cfg)?;
            println!("queries      {}", s.queries);
            println!("documents    {}", s.documents);
            println!("vocab size   {}", s.vocab_size);
            println!("index terms  {}", s.index_terms);
            println!("vocab sha256 {}", s.vocab_hash);
        }
        Command::Train { epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.validate()?;
            }
            let s = pipeline::train(&cfg)?;
            if s.skipped_queries > 0 {
                eprintln!(
                    "skipped {} queries longer than {} tokens",
                    s.skipped_queries, cfg.model.max_input_len
                );
            }
            for (i, loss) in s.report.per_epoch_loss.iter().enumerate() {
                println!("epoch {:>3}  loss {loss:.6}", i + 1);
            }
            println!(
                "checkpoint {} ({})",
                cfg.paths.checkpoint.display(),
                s.checkpoint_sha256
            );
        }
        Command::Reformulate { query, k, m, strategy } => {
            cfg.expander.k = k.unwrap_or(cfg.expander.k);
            cfg.expander.m = m.unwrap_or(cfg.expander.m);
            cfg.expander.strategy = strategy.unwrap_or(cfg.expander.strategy);
            cfg.validate()?;
            let model = pipeline::load_model(&cfg)?;
            let candidates = pipeline::reformulate(&model, &query, &cfg.expander, cfg.eval.seed)?;
            print!("{}", pipeline::format_candidates(&candidates));
        }
        Command::Evaluate { strategy } => {
            cfg.expander.strategy = strategy.unwrap_or(cfg.expander.strategy);
            let s = pipeline::run_evaluate(&cfg)?;
            print!("{}", s.table);
            for p in &s.report_paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Ablate => {
            let s = pipeline::run_ablate(&cfg)?;
            print!("{}", s.table);
            println!("wrote {}", s.report_path.display());
        }
        Command::Serve { bind } => {
            let bind = bind.unwrap_or(cfg.service.bind.clone());
            serve(&cfg, &bind)?;
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn serve(cfg: &AppConfig, bind: &str) -> Result<()> {
    let index = pipeline::load_index(cfg)?;
    let model = match pipeline::load_model(cfg) {
        Ok(m) => Some(Arc::new(m)),
        Err(e) => {
            eprintln!("warning: serving without a model: {e:#}");
            None
        }
    };
    let state = Arc::new(AppState {
        model,
        index: Some(Arc::new(index)),
        expander: cfg.expander.clone(),
        seed: cfg.eval.seed,
    });
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .with_context(|| format!("cannot bind {bind}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
