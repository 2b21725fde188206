use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actsparse::allocate::EvoParams;
use actsparse::calibrate::AlphaGrid;
use actsparse::model::ModelConfig;
use actsparse::pipeline::commands::{self, DataOptions, PLAN_FILE};
use actsparse::pipeline::{PipelineConfig, PrefillPolicy};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "actsparse", version, about = "Weight-aware activation sparsity for toy transformers")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Dense weights file (its `.config` sidecar sits next to it).
    #[arg(long, global = true, default_value = "model.bin")]
    model: PathBuf,

    /// Plan file; defaults to `<out-dir>/plan.toml` where one is needed.
    #[arg(long, global = true)]
    plan: Option<PathBuf>,

    /// Calibration text file or directory (repeatable).
    #[arg(long, global = true)]
    calib: Vec<PathBuf>,

    /// Held-out text file or directory (repeatable).
    #[arg(long, global = true)]
    heldout: Vec<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[arg(long, global = true, default_value_t = 0.5)]
    target_sparsity: f64,

    /// first_half | second_half | all | none
    #[arg(long, global = true, default_value = "second_half")]
    prefill_policy: PrefillPolicy,

    #[arg(long, global = true, default_value_t = 400)]
    evo_generations: usize,

    #[arg(long, global = true, default_value_t = 64)]
    evo_offspring: usize,

    #[arg(long, global = true, default_value_t = 0.005)]
    evo_step: f64,

    #[arg(long, global = true, default_value_t = 0.1)]
    evo_mutable_frac: f64,

    /// Exponent grid as lo:hi:step.
    #[arg(long, global = true, default_value = "0:1.5:0.05")]
    alpha_grid: AlphaGrid,

    #[arg(long, global = true, default_value_t = 8)]
    alpha_passes: usize,

    #[arg(long, global = true, default_value_t = 0.05)]
    greedy_step: f64,

    #[arg(long, global = true, default_value_t = 32)]
    calib_sequences: usize,

    #[arg(long, global = true, default_value_t = 16)]
    heldout_sequences: usize,

    /// Window length in bytes for calibration and held-out sequences.
    #[arg(long, global = true, default_value_t = 256)]
    seq_len: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a randomly initialised toy model to --model.
    Init {
        #[arg(long, default_value_t = 8)]
        blocks: usize,
        #[arg(long, default_value_t = 128)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 344)]
        d_ff: usize,
        #[arg(long, default_value_t = 256)]
        max_seq: usize,
    },
    /// Allocate sparsity, search exponents and write a plan.
    Pipeline,
    /// Perplexity, KL and MAC ratio on held-out text.
    Eval,
    /// Per-block perplexity sensitivity, one block sparsified at a time.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0.4,0.5,0.6")]
        levels: Vec<f64>,
    },
    /// Greedy-decode throughput, dense versus planned.
    Bench {
        #[arg(long, default_value_t = 200)]
        n_tokens: usize,
        #[arg(long, default_value_t = 5)]
        prompt_len: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
    /// Component ablation at the target sparsity.
    Ablate,
    /// Sparse matrix-vector kernel timings.
    BenchKernel {
        #[arg(long, default_value_t = 4096)]
        rows: usize,
        #[arg(long, default_value_t = 4096)]
        cols: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
        sparsity: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        iters: usize,
    },
}

impl Global {
    fn data(&self) -> DataOptions {
        DataOptions {
            calib: self.calib.clone(),
            heldout: self.heldout.clone(),
            calib_sequences: self.calib_sequences,
            heldout_sequences: self.heldout_sequences,
            seq_len: self.seq_len,
            seed: self.seed,
        }
    }

    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            target_sparsity: self.target_sparsity,
            evo: EvoParams {
                generations: self.evo_generations,
                offspring: self.evo_offspring,
                step: self.evo_step,
                mutable_fraction: self.evo_mutable_frac,
                seed: self.seed,
            },
            alpha_grid: self.alpha_grid,
            alpha_passes: self.alpha_passes,
            greedy_step: self.greedy_step,
        }
    }

    fn plan_path(&self) -> PathBuf {
        self.plan.clone().unwrap_or_else(|| self.out_dir.join(PLAN_FILE))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let out = g.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Init { blocks, d_model, heads, d_ff, max_seq } => {
            let cfg = ModelConfig {
                n_blocks: *blocks,
                d_model: *d_model,
                n_heads: *heads,
                d_ff: *d_ff,
                max_seq: *max_seq,
                ..ModelConfig::default()
            };
            commands::cmd_init(&g.model, &cfg, g.seed)?;
            println!("wrote {}", g.model.display());
        }
        Command::Pipeline => {
            let result = commands::cmd_pipeline(&g.model, &g.data(), &g.pipeline(), out)?;
            println!(
                "wrote {} (uniform loss {:.6}, allocated loss {:.6})",
                out.join(PLAN_FILE).display(),
                result.blocks.uniform_loss,
                result.blocks.loss
            );
        }
        Command::Eval => {
            let default_plan = g.plan_path();
            let plan = g.plan.as_deref().or_else(|| existing(&default_plan));
            let r = commands::cmd_eval(&g.model, plan, &g.data(), g.prefill_policy, out)?;
            print!("dense_ppl={:.4}", r.dense_ppl);
            if let (Some(ppl), Some(kl)) = (r.sparse_ppl, r.mean_kl) {
                print!(" sparse_ppl={ppl:.4} mean_kl={kl:.6}");
            }
            println!(" mac_ratio={:.4}", r.mac_ratio);
        }
        Command::Sweep { levels } => {
            let rows = commands::cmd_sweep(&g.model, &g.data(), levels, out)?;
            println!("wrote {} rows to {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::Bench { n_tokens, prompt_len, runs } => {
            let results = commands::cmd_bench(
                &g.model,
                &g.plan_path(),
                &g.data(),
                *n_tokens,
                *prompt_len,
                *runs,
                g.prefill_policy,
                out,
            )?;
            for r in results {
                println!("{}: {:.1} tokens/s, mac_ratio {:.4}", r.mode, r.tokens_per_s, r.mac_ratio);
            }
        }
        Command::Ablate => {
            for (row, r) in commands::cmd_ablate(&g.model, &g.data(), &g.pipeline(), g.prefill_policy, out)? {
                println!("{:<16} kl={:.6} mac_ratio={:.4}", row.name(), r.mean_kl.unwrap_or(0.0), r.mac_ratio);
            }
        }
        Command::BenchKernel { rows, cols, sparsity, iters } => {
            for r in commands::cmd_bench_kernel(*rows, *cols, sparsity, *iters, g.seed, out)? {
                println!("sparsity {:.2}: {:.0} ns/op, {:.2} GMAC/s", r.sparsity, r.ns_per_op, r.gmacs_per_s);
            }
        }
    }
    Ok(())
}

fn existing(p: &Path) -> Option<&Path> {
    p.exists().then_some(p)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
