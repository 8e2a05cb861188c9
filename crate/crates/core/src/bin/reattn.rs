use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reattention::harness::{self, append_records, ExperimentConfig, RunKind};
use reattention::model::{init_random, load_weights, save_weights, AttentionMode};

#[derive(Parser)]
#[command(name = "reattn", about = "Long-context top-k KV selection experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare a cached attention mode with the dense reference.
    Equivalence(RunArgs),
    /// Vector-level needle retrieval through the selection path.
    Niah(RunArgs),
    /// Generate far past the pretrain window and check positional bounds.
    Extrapolate {
        #[command(flatten)]
        run: RunArgs,
        /// Write the final KV caches as an RKVC snapshot.
        #[arg(long)]
        dump_cache: Option<PathBuf>,
    },
    /// Fused vs naive top-k scorer latency and scratch memory.
    Bench(RunArgs),
    /// Hyperparameter grid over chunk, span, k and local size.
    Sweep(RunArgs),
    /// Write randomly initialized weights (RATW format).
    InitWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics output, one JSON object per line (appended).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["full", "window", "reattention"])]
    mode: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "k-prime")]
    k_prime: Option<usize>,
    #[arg(long)]
    span: Option<usize>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    local: Option<usize>,
    #[arg(long)]
    global: Option<usize>,
    #[arg(long)]
    tile: Option<usize>,
    /// Comma-separated context lengths.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Include wall-clock latency in the metrics.
    #[arg(long)]
    timing: bool,
}

impl RunArgs {
    fn resolve(&self) -> reattention::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<AttentionMode>()?;
        }
        let sel = &mut cfg.selection;
        let overrides = [
            (self.k, &mut sel.k),
            (self.k_prime, &mut sel.k_prime),
            (self.span, &mut sel.span_m),
            (self.chunk, &mut sel.l_chunk),
            (self.local, &mut sel.l_local),
            (self.global, &mut sel.l_global),
            (self.tile, &mut sel.tile_size),
        ];
        for (value, slot) in overrides {
            if let Some(v) = value {
                *slot = v;
            }
        }
        if let Some(l) = &self.lengths {
            cfg.context_lengths = l.clone();
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        cfg.timing |= self.timing;
        Ok(cfg)
    }
}

fn execute(kind: RunKind, args: &RunArgs, dump_cache: Option<&std::path::Path>) -> reattention::Result<bool> {
    let cfg = args.resolve()?;
    cfg.validate(kind)?;
    let outcome = match kind {
        RunKind::Extrapolate => harness::run_extrapolate_with(&cfg, dump_cache)?,
        _ => harness::run(kind, &cfg)?,
    };
    match &args.out {
        Some(path) => append_records(path, &outcome.records)?,
        None => {
            for r in &outcome.records {
                println!("{}", serde_json::to_string(r)?);
            }
        }
    }
    for f in &outcome.failures {
        eprintln!("FAIL {f}");
    }
    eprintln!(
        "{}: {} records, {} failed assertions",
        kind.name(),
        outcome.records.len(),
        outcome.failures.len()
    );
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Equivalence(a) => execute(RunKind::Equivalence, a, None),
        Command::Niah(a) => execute(RunKind::Niah, a, None),
        Command::Extrapolate { run, dump_cache } => execute(RunKind::Extrapolate, run, dump_cache.as_deref()),
        Command::Bench(a) => execute(RunKind::Bench, a, None),
        Command::Sweep(a) => execute(RunKind::Sweep, a, None),
        Command::InitWeights { config, seed, out } => (|| {
            let model = match config {
                Some(p) => ExperimentConfig::from_json_file(p)?.model,
                None => Default::default(),
            };
            let w = init_random(&model, *seed)?;
            save_weights(&w, out)?;
            // Read back so a bad write fails loudly.
            Ok(load_weights(out)? == w)
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
