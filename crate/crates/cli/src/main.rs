use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clare::runner::{self, RunConfig};
use clare::scenario::{self, ScenarioKind, StreamManifest};
use clare::{EmbeddingStore, MemoryPolicy, Strategy, SynthSpec};

#[derive(Parser)]
#[command(name = "clare", version, about = "Continual-learning experiments over frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster store.
    Synth(SynthArgs),
    /// Run an experiment over one or more seeds.
    Run(Box<RunArgs>),
    /// Check a task stream against the store it was built from.
    Validate(ValidateArgs),
    /// Re-aggregate run records into a CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    mean_radius: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    memory: Option<usize>,
    #[arg(long)]
    policy: Option<MemoryPolicy>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    t_mult: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    mix_prob: Option<f64>,
    #[arg(long)]
    mix_strength: Option<f64>,
    /// Append memory snapshots to the stream manifests.
    #[arg(long)]
    dump_memory: bool,
    /// Write each seed's final model snapshot.
    #[arg(long)]
    save_models: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    store: PathBuf,
    /// Stream manifest to check; without it a stream is generated from the flags.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "real")]
    scenario: ScenarioKind,
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched recursively for run_seed*.json records.
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn build_config(args: RunArgs) -> clare::Result<RunConfig> {
    let mut config = match (&args.config, &args.store) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(store)) => RunConfig::new(store),
        (None, None) => return Err(clare::Error::InvalidConfig("either --config or --store is required".into())),
    };
    if let Some(v) = args.store {
        config.store_path = v;
    }
    if args.dataset.is_some() {
        config.dataset = args.dataset;
    }
    if let Some(v) = args.scenario {
        config.scenario = v;
    }
    if args.tasks.is_some() {
        config.tasks = args.tasks;
    }
    if let Some(v) = args.memory {
        config.memory = v;
    }
    if let Some(v) = args.policy {
        config.policy = v;
    }
    if let Some(v) = args.strategy {
        config.strategy = v;
    }
    if let Some(v) = args.seeds {
        config.seeds = v;
    }
    if let Some(v) = args.out {
        config.output_dir = v;
    }
    let o = &mut config.optim;
    if let Some(v) = args.epochs {
        o.epochs_per_task = v;
    }
    if let Some(v) = args.batch_size {
        o.batch_size = v;
    }
    if let Some(v) = args.weight_decay {
        o.weight_decay = v;
    }
    if let Some(v) = args.lr_max {
        o.lr_max = v;
    }
    if let Some(v) = args.lr_min {
        o.lr_min = v;
    }
    if let Some(v) = args.t0 {
        o.t0 = v;
    }
    if let Some(v) = args.t_mult {
        o.t_mult = v;
    }
    if let Some(v) = args.warmup {
        o.warmup_epochs = v;
    }
    if let Some(v) = args.mix_prob {
        o.mix_prob = v;
    }
    if let Some(v) = args.mix_strength {
        o.mix_strength = v;
    }
    config.dump_memory |= args.dump_memory;
    config.save_models |= args.save_models;
    config.validate()?;
    Ok(config)
}

fn synth(args: SynthArgs) -> clare::Result<ExitCode> {
    let spec = SynthSpec {
        num_classes: args.classes,
        dim: args.dim,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        mean_radius: args.mean_radius,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    let store = clare::generate_synthetic(&spec)?;
    let bytes = store.save(&args.out)?;
    println!("wrote {} records ({bytes} bytes) to {}", store.records().len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run(args: RunArgs) -> clare::Result<ExitCode> {
    let config = build_config(args)?;
    let report = runner::run_experiment(&config)?;
    for r in &report.records {
        println!(
            "seed {:>4}  A_K {:.2}  A_Avg {:.2}  F_AvgG {:.2}  F_AvgT {:.2}",
            r.seed,
            100.0 * r.metrics.last_task_accuracy,
            100.0 * r.metrics.average_accuracy,
            100.0 * r.metrics.avg_global_forgetting,
            100.0 * r.metrics.avg_task_forgetting,
        );
    }
    let a = &report.aggregate;
    println!("{} {} M={} K={} {}", config.dataset_name(), config.scenario, config.memory, config.task_count(), config.strategy);
    println!("  Last Task Accuracy         {}", a.last_task_accuracy);
    println!("  Average Accuracy           {}", a.average_accuracy);
    println!("  Average Global Forgetting  {}", a.avg_global_forgetting);
    println!("  Average Task Forgetting    {}", a.avg_task_forgetting);
    println!("results in {}", config.output_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn validate(args: ValidateArgs) -> clare::Result<ExitCode> {
    let store = EmbeddingStore::load(&args.store)?;
    let streams = match &args.manifest {
        Some(path) => vec![StreamManifest::from_toml(&std::fs::read_to_string(path)?)?.to_stream(&store)?],
        None => args
            .seeds
            .iter()
            .map(|&s| scenario::generate(args.scenario, &store, args.tasks, s))
            .collect::<clare::Result<_>>()?,
    };
    let mut clean = true;
    for stream in &streams {
        let violations = runner::validate_stream(stream, &store);
        if violations.is_empty() {
            println!("{} stream, K={}, seed {}: ok", stream.kind, stream.num_tasks(), stream.seed);
        } else {
            clean = false;
            println!("{} stream, K={}, seed {}: {} violation(s)", stream.kind, stream.num_tasks(), stream.seed, violations.len());
            for v in violations {
                println!("  {v}");
            }
        }
    }
    Ok(if clean { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn report(args: ReportArgs) -> clare::Result<ExitCode> {
    let rows = runner::report(&args.runs, &args.out)?;
    println!("wrote {} configuration row(s) to {}", rows.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(*a),
        Command::Validate(a) => validate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
