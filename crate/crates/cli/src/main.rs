use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Deterministic checks and reports for the hybrid sparse attention stack.
///
/// Exit codes: 0 when every check passes, 1 when a check fails, 2 for usage,
/// configuration or I/O errors.
#[derive(Debug, Parser)]
#[command(name = "dssa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    /// Length-dependent MoBA block size and top-k.
    Training,
    /// The block size and top-k stored in the plan.
    Plan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    Tensor,
    AttnInputs,
    Profile,
    Loss,
    Plan,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the attention oracle equivalences on seeded random instances.
    AttnCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sequence lengths, e.g. `1,4,8` or `n=1,4,8`.
        #[arg(long, default_value = "1,4,8,16,64")]
        sizes: String,
        #[arg(long, default_value = "2,4,8")]
        dims: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        /// Flip one causal-mask entry in the matrix route (negative control).
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Quantize a matrix as INT8 weight blocks, INT8 activation groups and FP8.
    QuantReport {
        /// Tensor file (JSON or binary); a seeded Gaussian matrix otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        rows: usize,
        #[arg(long, default_value_t = 256)]
        cols: usize,
        /// Comma-separated clip coefficients.
        #[arg(
            long,
            default_value = "1.0,0.95,0.9,0.85,0.8,0.75,0.7,0.65,0.6,0.55,0.5"
        )]
        grid: String,
        /// Also write the INT8 weight-block container here.
        #[arg(long)]
        container: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Spike-encode activations and count events of a matmul against weights.
    SpikeReport {
        /// Activation tensor file; a seeded Gaussian matrix otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Weight tensor file; seeded Gaussian weights otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 256)]
        cols: usize,
        #[arg(long, default_value_t = 128)]
        out_features: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// CSV of modeled prefill cost and KV bytes, full attention vs the plan.
    ScalingTable {
        #[arg(long, default_value = "128k,256k,512k,1M,2M,4M")]
        lengths: String,
        /// Layer plan JSON; the default 36-layer plan otherwise.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Schedule::Training)]
        schedule: Schedule,
        /// Extra FLOPs per layer per token.
        #[arg(long, default_value_t = 0)]
        overhead: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print mechanism counts and the per-layer table of a plan.
    PlanShow {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Greedy MoBA layer selection from a sensitivity profile.
    LayerSelect {
        /// Profile JSON `{baseline, scores}`; a seeded synthetic profile otherwise.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long, default_value_t = 0.08)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate the distillation losses on a fixture.
    LossCheck {
        /// Loss fixture JSON; a seeded random fixture otherwise.
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump the MoBA block selection of every query.
    MobaTrace {
        /// JSON `{q, k, v}`; seeded random inputs otherwise.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        block_size: usize,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a seeded fixture file for the other subcommands.
    MakeFixture {
        #[arg(value_enum)]
        kind: FixtureKind,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
    },
}

fn run(cmd: Command) -> dssa_core::Result<commands::Outcome> {
    use commands::*;
    match cmd {
        Command::AttnCheck {
            seed,
            sizes,
            dims,
            trials,
            tolerance,
            inject_fault,
            output,
        } => attn_check(seed, &sizes, &dims, trials, tolerance, inject_fault)?
            .emit(output.as_deref()),
        Command::QuantReport {
            input,
            seed,
            rows,
            cols,
            grid,
            container,
            output,
        } => quant_report(
            input.as_deref(),
            seed,
            rows,
            cols,
            &grid,
            container.as_deref(),
        )?
        .emit(output.as_deref()),
        Command::SpikeReport {
            input,
            weights,
            seed,
            rows,
            cols,
            out_features,
            output,
        } => spike_report(
            input.as_deref(),
            weights.as_deref(),
            seed,
            rows,
            cols,
            out_features,
        )?
        .emit(output.as_deref()),
        Command::ScalingTable {
            lengths,
            plan,
            schedule,
            overhead,
            output,
        } => scaling_table(&lengths, plan.as_deref(), schedule, overhead)?.emit(output.as_deref()),
        Command::PlanShow { plan, json } => plan_show(plan.as_deref(), json)?.emit(None),
        Command::LayerSelect {
            profile,
            threshold,
            seed,
        } => layer_select(profile.as_deref(), threshold, seed)?.emit(None),
        Command::LossCheck { fixture, seed } => loss_check(fixture.as_deref(), seed)?.emit(None),
        Command::MobaTrace {
            inputs,
            seed,
            n,
            d,
            block_size,
            top_k,
            output,
        } => moba_trace(inputs.as_deref(), seed, n, d, block_size, top_k)?.emit(output.as_deref()),
        Command::MakeFixture {
            kind,
            output,
            seed,
            rows,
            cols,
        } => make_fixture(kind, &output, seed, rows, cols),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(outcome) if outcome.ok => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
