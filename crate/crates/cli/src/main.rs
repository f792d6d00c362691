use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idw_cli::{
    create_run_dir, evaluate_checkpoint, generate, load_spec, output_root, report, run, sweep,
    ExperimentSpec, Failure, SweepSpec,
};
use idw_core::experiment::Method;
use idw_core::synthetic::SynthConfig;

#[derive(Parser)]
#[command(
    name = "idw",
    version,
    about = "Multi-interest recommender experiments"
)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log.
    Generate {
        /// Synthetic generator config (JSON, partial allowed).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        interest_exponent: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Out,
    },
    /// Train one method for every seed and evaluate it.
    Train(RunArgs),
    /// Run MUR with iterative density weighting and calibration.
    Idw(RunArgs),
    /// Evaluate a saved checkpoint.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Run one experiment per (axis value, seed) and consolidate the metrics.
    Sweep {
        /// Sweep spec: `{"axis", "values", "methods", "base"}`.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Collect every metrics.json below a run directory into report.csv.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct Out {
    /// Run directory (default: a timestamped directory under $IDW_OUTPUT_ROOT).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Out {
    fn dir(&self, command: &str) -> Result<PathBuf, Failure> {
        match &self.out {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                Ok(d.clone())
            }
            None => Ok(create_run_dir(&output_root(), command)?),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (JSON, partial allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    num_reps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Write item representations to items.csv.
    #[arg(long)]
    dump_embeddings: bool,
    #[command(flatten)]
    out: Out,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec, Failure> {
        let mut spec = load_spec(self.config.as_deref())?;
        if let Some(m) = self.method {
            spec.method = m;
        }
        if let Some(s) = &self.seeds {
            spec.seeds = s.clone();
        }
        let e = &mut spec.experiment;
        if let Some(d) = self.embed_dim {
            e.tower.embed_dim = d;
        }
        if let Some(m) = self.num_reps {
            e.tower.num_reps = m;
        }
        for t in [&mut e.train, &mut e.idw.wake] {
            if let Some(lr) = self.learning_rate {
                t.learning_rate = lr;
            }
            if let Some(b) = self.batch_size {
                t.batch_size = b;
            }
            if let Some(n) = self.max_epochs {
                t.max_epochs = n;
            }
        }
        if let Some(p) = self.patience {
            e.train.patience = p;
        }
        if let Some(m) = self.momentum {
            e.idw.momentum = m;
        }
        if let Some(eta) = self.eta {
            e.idw.eta = eta;
        }
        if let Some(t) = self.max_iterations {
            e.idw.max_iterations = t;
        }
        spec.dump_embeddings |= self.dump_embeddings;
        Ok(spec)
    }
}

fn read_synth(path: Option<&PathBuf>) -> Result<SynthConfig, Failure> {
    let mut value = serde_json::to_value(SynthConfig::default()).expect("serializable");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
        let patch: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("{} is not valid JSON: {e}", p.display())))?;
        idw_cli::spec::merge(&mut value, &patch);
    }
    serde_json::from_value(value).map_err(|e| Failure::usage(format!("synthetic config: {e}")))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            config,
            users,
            seq_len,
            interest_exponent,
            seed,
            out,
        } => {
            let mut synth = read_synth(config.as_ref())?;
            if let Some(u) = users {
                synth.num_users = u;
            }
            if let Some(t) = seq_len {
                synth.seq_len = t;
            }
            if let Some(x) = interest_exponent {
                synth.interest_exponent = x;
            }
            if let Some(s) = seed {
                synth.rng_seed = s;
            }
            let dir = out.dir("generate")?;
            generate(&synth, &dir)?;
            println!("{}", dir.display());
        }
        Command::Train(args) => {
            let spec = args.spec()?;
            spec.validate()?;
            let dir = args.out.dir("train")?;
            run(&spec, &dir)?;
            println!("{}", dir.display());
        }
        Command::Idw(args) => {
            let mut spec = args.spec()?;
            spec.method = Method::MurIdw;
            spec.validate()?;
            let dir = args.out.dir("idw")?;
            run(&spec, &dir)?;
            println!("{}", dir.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            out,
        } => {
            let spec = load_spec(config.as_deref())?;
            spec.validate()?;
            if !checkpoint.exists() {
                return Err(Failure::usage(format!(
                    "checkpoint: {} does not exist",
                    checkpoint.display()
                )));
            }
            let dir = out.dir("evaluate")?;
            evaluate_checkpoint(&spec, &checkpoint, &dir)?;
            println!("{}", dir.display());
        }
        Command::Sweep { config, out } => {
            let spec = SweepSpec::load(&config)?;
            let dir = out.dir("sweep")?;
            let result = sweep(&spec, &dir);
            println!("{}", dir.display());
            result?;
        }
        Command::Report { dir } => {
            let rows = report(&dir)?;
            println!("run,split,metric,value");
            for r in rows {
                println!("{}", r.join(","));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
