mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lever_core::config::RunConfig;

/// Build, train and evaluate a demonstration-sequence model against a
/// synthetic predictor.
#[derive(Debug, Parser)]
#[command(name = "lever", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a scalar config value, e.g. `--set world.gamma=1.0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Use this seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: `LEVER_THREADS`, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Artifact directory shared by all stages.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the world and sample the training pool and test queries.
    WorldGen,
    /// Split anchors from the pool and build the scored sequence dataset.
    DatasetBuild,
    /// Train the sequence model on the dataset.
    Train,
    /// Decode sequences for every test query at every shot count.
    Generate,
    /// Score the model, the baselines and the golden sequence.
    Evaluate,
    /// Check analytic gradients against finite differences.
    GradCheck,
    /// Render the evaluation report as Markdown.
    Report,
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve_config(cli: &Cli) -> lever_core::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    for o in &cli.overrides {
        config.apply_override(o)?;
    }
    Ok(config)
}

fn init_threads(requested: Option<usize>) -> anyhow::Result<()> {
    let threads = match requested {
        Some(n) => Some(n),
        None => std::env::var("LEVER_THREADS").ok().and_then(|v| v.parse().ok()),
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    init_threads(cli.threads)?;
    let config = resolve_config(cli)?;
    if !matches!(cli.command, Command::Report | Command::ShowConfig) {
        lever_core::pipeline::check(&config)?;
    }
    let out = &cli.out;
    match cli.command {
        Command::WorldGen => stages::world_gen(&config, out),
        Command::DatasetBuild => stages::dataset_build(&config, out),
        Command::Train => stages::train(&config, out),
        Command::Generate => stages::generate(&config, out),
        Command::Evaluate => stages::evaluate(&config, out),
        Command::GradCheck => stages::grad_check(&config),
        Command::Report => stages::report(out),
        Command::ShowConfig => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .find_map(|e| e.downcast_ref::<lever_core::Error>())
        .is_some_and(lever_core::Error::is_validation);
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
