//! `otvc`: command-line front end for the conversion, training, metric and
//! synthetic-data pipelines.
//!
//! Every command builds a run config from an optional `--config` file, the
//! command's flags and any `--set key=value` overrides (later sources win),
//! resolves it against the command's key schema and runs it. The resolved
//! config lands next to the outputs; `otvc rerun --config <file>` replays it.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use otvc_core::io::pipeline::{run, trace_path};
use otvc_core::io::RunConfig;
use otvc_core::Error;

#[derive(Parser)]
#[command(name = "otvc", version, about = "Optimal-transport feature conversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// Base run config; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` entry, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert source frames toward a reference set.
    Convert {
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// sinkvc, knn or fmvc.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        /// Trained velocity field for fmvc.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a flow-matching velocity field on Sinkhorn-plan pairs.
    TrainFm {
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out_model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a conditional neural OT map and potential.
    TrainNot {
        #[arg(long)]
        dataset_spec: Option<PathBuf>,
        #[arg(long)]
        out_model: Option<PathBuf>,
        /// Constrain the potential to f <= 0 and weight the target term by w.
        #[arg(long)]
        extremal: bool,
        /// Target weight, at least 1.
        #[arg(long)]
        w: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare two feature files: W2, Fréchet distance, FD <= 2·W2² check.
    Eval {
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        /// Comma list of w2, fd, theorem1.
        #[arg(long)]
        metrics: Option<String>,
        /// auto, exact_small, assignment or sinkhorn.
        #[arg(long)]
        w2_mode: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic task with its ground truth.
    Synth {
        /// gauss_shift, gauss_affine, clusters_outlier or two_conditions.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a resolved config written by an earlier run.
    Rerun {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

/// Flag values collected as config entries.
struct Entries(RunConfig);

impl Entries {
    fn new(command: &str) -> Self {
        let mut cfg = RunConfig::new();
        cfg.set("command", command);
        Entries(cfg)
    }

    fn put(&mut self, key: &str, value: Option<impl ToString>) -> &mut Self {
        if let Some(v) = value {
            self.0.set(key, v.to_string());
        }
        self
    }

    fn path(&mut self, key: &str, value: Option<PathBuf>) -> &mut Self {
        self.put(key, value.map(|p| p.display().to_string()))
    }
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<(), Error> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim());
    }
    Ok(())
}

fn assemble(common: Common, flags: Entries) -> Result<RunConfig, Error> {
    let command = flags.0.command()?.to_string();
    let mut cfg = match &common.config {
        Some(path) => {
            let base = RunConfig::load(path)?;
            if let Some(c) = base.get("command") {
                if c != command {
                    return Err(Error::Validation(format!(
                        "{} is a `{c}` config, not `{command}`",
                        path.display()
                    )));
                }
            }
            base.merged(&flags.0)
        }
        None => flags.0,
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", seed.to_string());
    }
    apply_sets(&mut cfg, &common.set)?;
    Ok(cfg)
}

fn build_config(command: Command) -> Result<RunConfig, Error> {
    match command {
        Command::Convert { source, reference, method, epsilon, k, model, out, report, common } => {
            let mut e = Entries::new("convert");
            e.path("source", source)
                .path("reference", reference)
                .put("method", method)
                .put("epsilon", epsilon)
                .put("k", k)
                .path("model", model)
                .path("out", out)
                .path("report", report);
            assemble(common, e)
        }
        Command::TrainFm { source, reference, out_model, common } => {
            let mut e = Entries::new("train-fm");
            e.path("source", source).path("reference", reference).path("out_model", out_model);
            assemble(common, e)
        }
        Command::TrainNot { dataset_spec, out_model, extremal, w, common } => {
            let mut e = Entries::new("train-not");
            e.path("dataset_spec", dataset_spec)
                .path("out_model", out_model)
                .put("extremal", extremal.then_some(true))
                .put("w", w);
            assemble(common, e)
        }
        Command::Eval { a, b, metrics, w2_mode, report, common } => {
            let mut e = Entries::new("eval");
            e.path("a", a).path("b", b).put("metrics", metrics).put("w2_mode", w2_mode).path("report", report);
            assemble(common, e)
        }
        Command::Synth { task, n, dim, out, common } => {
            let mut e = Entries::new("synth");
            e.put("task", task).put("n", n).put("dim", dim).path("out", out);
            assemble(common, e)
        }
        Command::Rerun { config, set } => {
            let mut cfg = RunConfig::load(&config)?;
            apply_sets(&mut cfg, &set)?;
            Ok(cfg)
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("OT_CONVERT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Validation(format!("OT_CONVERT_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Validation(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| build_config(cli.command)).and_then(|cfg| {
        let outcome = run(&cfg);
        if let Err(Error::Divergence { .. }) = &outcome {
            if let Ok(trace) = cfg.resolve().and_then(|r| trace_path(&r)) {
                eprintln!("loss trace written to {}", trace.display());
            }
        }
        outcome
    });
    match result {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"));
            for path in &outcome.outputs {
                eprintln!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Capacity(_) = e {
                eprintln!("hint: use --w2-mode sinkhorn for large inputs");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
