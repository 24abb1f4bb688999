use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use racomp::harness::corpus::synth;
use racomp::harness::gradcheck::{gradcheck, tiny_config};
use racomp::harness::run::{
    cmd_complete, cmd_eval, cmd_index_build, cmd_index_query, cmd_train, load_network, CompleteRequest,
};
use racomp::harness::{ReferenceMode, RunConfig};

#[derive(Parser)]
#[command(name = "racomp", version, about = "Reference-assisted point cloud completion")]
struct Cli {
    /// Key/value config file; `preset = toy` starts from the toy settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data loading and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus with its splits and manifests.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Degrade every partial to the sparse, noisy setting.
        #[arg(long)]
        sparse: bool,
    },
    /// Build or query the retrieval index.
    Index {
        #[command(subcommand)]
        action: IndexCommand,
    },
    /// Train on the corpus train split.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Complete one partial cloud with a trained checkpoint.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        partial: PathBuf,
        /// Raster file; otherwise rendered from the partial when --viewpoint is set.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        viewpoint: Option<usize>,
        /// Reference cloud; otherwise the top-1 shape of the index.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out stem>_seeds.<ext>`.
        #[arg(long)]
        seeds_out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// retrieved, irrelevant or none.
        #[arg(long, default_value = "retrieved")]
        reference: ReferenceMode,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
        /// JSON-lines report path; defaults to `<reports>/<split>_<reference>.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter block of a tiny network.
    Gradcheck,
}

#[derive(Subcommand)]
enum IndexCommand {
    Build {
        /// Shape manifest; defaults to the corpus train-shape manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Import precomputed embeddings (`shape_id v1 .. vD` per line).
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    Query {
        cloud: PathBuf,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        index: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out, force, sparse } => {
            let out = out.unwrap_or_else(|| cfg.corpus.clone());
            let report = synth(&cfg, &out, force, sparse)?;
            println!("{} shapes written to {}", report.shapes, out.display());
            for (split, n) in &report.counts {
                println!("{split:<12} {n:>6} samples");
            }
        }
        Command::Index { action } => match action {
            IndexCommand::Build {
                manifest,
                out,
                embeddings,
            } => {
                if let Some(o) = out {
                    cfg.index = o;
                }
                let (index, report) = cmd_index_build(&cfg, manifest.as_deref(), embeddings.as_deref())?;
                for w in &report.warnings {
                    eprintln!("warning: {w}");
                }
                println!(
                    "{} shapes indexed ({}, dim {}) -> {}",
                    index.len(),
                    index.embedder,
                    index.dim,
                    cfg.index.display()
                );
            }
            IndexCommand::Query { cloud, k, index } => {
                if let Some(i) = index {
                    cfg.index = i;
                }
                for (id, cos) in cmd_index_query(&cfg, &cloud, k)? {
                    println!("{id} {cos:.6}");
                }
            }
        },
        Command::Train { resume, epochs } => {
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            println!("config {}  checkpoints -> {}", cfg.hash(), cfg.checkpoints.display());
            cmd_train(&cfg, resume.as_deref(), |log| {
                println!(
                    "epoch {:>4} steps {:>6} lr {:.2e} seed {:.6} output {:.6} ft {:.6} total {:.6} val_cd {}",
                    log.epoch,
                    log.steps,
                    log.lr,
                    log.seed,
                    log.output,
                    log.ft,
                    log.total,
                    log.val_cd_l2.map_or("-".to_string(), |v| format!("{v:.6}"))
                );
            })?;
        }
        Command::Complete {
            checkpoint,
            partial,
            image,
            viewpoint,
            reference,
            out,
            seeds_out,
        } => {
            let expected = cli.config.is_some().then_some(&cfg);
            let net = load_network(&checkpoint, expected)?;
            let req = CompleteRequest {
                partial: &partial,
                image: image.as_deref(),
                viewpoint,
                reference: reference.as_deref(),
                out: &out,
                seeds_out: seeds_out.as_deref(),
            };
            let (done, ref_id) = cmd_complete(&cfg, &net, &req)?;
            println!(
                "{} points -> {} ({} seeds, reference {})",
                done.dense.len(),
                out.display(),
                done.seeds.len(),
                ref_id.as_deref().unwrap_or("none")
            );
        }
        Command::Eval {
            checkpoint,
            split,
            reference,
            oracle,
            out,
        } => {
            let net = match (&checkpoint, oracle) {
                (_, true) => None,
                (Some(c), false) => Some(load_network(c, None)?),
                (None, false) => bail!("--checkpoint is required unless --oracle is set"),
            };
            let report = cmd_eval(&cfg, net.as_ref(), &split, reference)?;
            let out = out.unwrap_or_else(|| cfg.reports.join(format!("{split}_{}.jsonl", report.reference_mode)));
            report.write_jsonl(&out)?;
            print!("{}", report.table());
            println!("per-sample records -> {}", out.display());
            if !report.all_finite() {
                bail!("non-finite outputs in {} samples", report.records.iter().filter(|r| !r.finite).count());
            }
        }
        Command::Gradcheck => {
            let report = gradcheck(tiny_config(), cfg.seed, None)?;
            print!("{}", report.table());
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
