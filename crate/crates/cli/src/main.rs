use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use setexp::config::{ConfigError, RunConfig};
use setexp::pipeline::{self, AblationGrid, PipelineError, RunManifest, Workspace, CONFIG_FILE};
use setexp::ranker::{build_ranker, ChatConfig, RankerConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_DEGRADED: u8 = 4;

#[derive(Parser)]
#[command(name = "setexp", version, about = "Entity set expansion over a closed vocabulary")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline.
    Expand(RunArgs),
    /// Decode candidate sets.
    Decode(RunArgs),
    /// Build sample plans (decoding first if needed).
    Plan(RunArgs),
    /// Rank every planned list without a transcript.
    Rank(RunArgs),
    /// Aggregate transcripts into result.json.
    Score(RunArgs),
    /// Evaluate result.json against ground truth.
    Eval(RunArgs),
    /// Sweep list length and occurrence count.
    Ablate(AblateArgs),
    /// Recompute results and metrics of a run from its transcripts, offline.
    Replay {
        /// Run directory holding manifest.json and transcripts.jsonl.
        run_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RankerChoice {
    PerfectOracle,
    NoisyOracle,
    RemoteChat,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config file; flags and --set are applied on top.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. --set sampler.o=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Existing or new run directory. Without it a fresh `run-<timestamp>`
    /// directory is created under the output directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long = "out")]
    output_dir: Option<PathBuf>,
    /// Beam width.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    num_candidates: Option<usize>,
    /// Admit seed entities as candidates.
    #[arg(long)]
    include_seeds: bool,
    /// Entities per sample list.
    #[arg(short = 'n', long = "list-len")]
    n: Option<usize>,
    /// Lists each candidate appears in.
    #[arg(short = 'o', long = "occurrences")]
    o: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    ranker: Option<RankerChoice>,
    /// Swap probability for the noisy oracle.
    #[arg(long)]
    noise_tau: Option<f64>,
    /// Base URL of an OpenAI-compatible endpoint for the remote ranker.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Metric cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Fraction of degraded lists that makes the run exit with status 4.
    #[arg(long)]
    degraded_threshold: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// List lengths to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    ns: Vec<usize>,
    /// Occurrence counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,5,10")]
    os: Vec<usize>,
    /// Plan seeds per cell.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut config = match (&self.config, &self.run_dir) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(dir)) if dir.join(CONFIG_FILE).exists() => RunConfig::load(&dir.join(CONFIG_FILE))?,
            _ => RunConfig::default(),
        };
        if let Some(v) = &self.vocab {
            config.paths.vocab = v.clone();
        }
        if let Some(v) = &self.queries {
            config.paths.queries = v.clone();
        }
        if let Some(v) = &self.output_dir {
            config.paths.output_dir = v.clone();
        }
        if let Some(v) = self.width {
            config.decoder.width = v;
        }
        if let Some(v) = self.num_candidates {
            config.decoder.num_candidates = v;
        }
        if self.include_seeds {
            config.decoder.include_seeds = true;
        }
        if let Some(v) = self.n {
            config.sampler.n = v;
        }
        if let Some(v) = self.o {
            config.sampler.o = v;
        }
        if let Some(v) = self.seed {
            config.sampler.seed = v;
        }
        match self.ranker {
            Some(RankerChoice::PerfectOracle) => config.ranker = RankerConfig::PerfectOracle,
            Some(RankerChoice::NoisyOracle) if !matches!(config.ranker, RankerConfig::NoisyOracle { .. }) => {
                config.ranker = RankerConfig::NoisyOracle { tau: 0.2, seed: 0 }
            }
            Some(RankerChoice::RemoteChat) if !matches!(config.ranker, RankerConfig::RemoteChat(_)) => {
                config.ranker = RankerConfig::RemoteChat(ChatConfig::default())
            }
            _ => {}
        }
        if let Some(t) = self.noise_tau {
            match &mut config.ranker {
                RankerConfig::NoisyOracle { tau, .. } => *tau = t,
                _ => return Err(ConfigError::Invalid("--noise-tau needs --ranker noisy-oracle".into())),
            }
        }
        if self.endpoint.is_some() || self.model.is_some() {
            let RankerConfig::RemoteChat(chat) = &mut config.ranker else {
                return Err(ConfigError::Invalid(
                    "--endpoint and --model need --ranker remote-chat".into(),
                ));
            };
            if let Some(v) = &self.endpoint {
                chat.base_url = v.clone();
            }
            if let Some(v) = &self.model {
                chat.model = v.clone();
            }
        }
        if let Some(v) = &self.ks {
            config.metrics.ks = v.clone();
        }
        if let Some(v) = self.max_in_flight {
            config.max_in_flight = v;
        }
        if let Some(v) = self.degraded_threshold {
            config.degraded_threshold = v;
        }
        for assignment in &self.overrides {
            config.apply_override(assignment)?;
        }
        // Snapshots must stay valid when resumed from another directory.
        config.paths.vocab = absolute(&config.paths.vocab);
        config.paths.queries = absolute(&config.paths.queries);
        config.paths.output_dir = absolute(&config.paths.output_dir);
        config.validate()?;
        Ok(config)
    }

    fn workspace(&self) -> Result<Workspace, PipelineError> {
        let config = self.resolve()?;
        match &self.run_dir {
            Some(dir) => Workspace::open(config, dir),
            None => Workspace::create(config),
        }
    }
}

#[derive(Debug)]
enum Failure {
    Pipeline(PipelineError),
    Degraded(Box<RunManifest>),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Pipeline(e.into())
    }
}

fn ranker_for(config: &RunConfig) -> Result<Box<dyn setexp::ranker::Ranker>, Failure> {
    build_ranker(&config.ranker).map_err(|e| Failure::Pipeline(ConfigError::Invalid(e.to_string()).into()))
}

fn report(manifest: RunManifest) -> Result<(), Failure> {
    println!("run directory: {}", manifest.run_dir.display());
    let table = manifest.run_dir.join(pipeline::METRICS_TABLE_FILE);
    if manifest.metrics.is_some() {
        if let Ok(text) = std::fs::read_to_string(&table) {
            print!("{text}");
        }
    }
    println!(
        "lists: {} ({} ranked now, {} reused), degraded: {}",
        manifest.lists, manifest.ranker_calls, manifest.reused_transcripts, manifest.degraded_lists
    );
    if manifest.degraded_over_threshold {
        return Err(Failure::Degraded(Box::new(manifest)));
    }
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Expand(args) => {
            let ws = args.workspace()?;
            let ranker = ranker_for(&ws.config)?;
            report(ws.run(ranker.as_ref())?)
        }
        Command::Decode(args) => {
            let ws = args.workspace()?;
            let sets = ws.decode()?;
            println!("run directory: {}", ws.dir.root().display());
            for set in sets {
                println!("{}: {} candidates", set.query_id, set.len());
            }
            Ok(())
        }
        Command::Plan(args) => {
            let ws = args.workspace()?;
            let plans = ws.plan(&ws.decode()?)?;
            println!("run directory: {}", ws.dir.root().display());
            for plan in plans {
                println!(
                    "{}: {} lists, {} padded",
                    plan.query_id,
                    plan.lists.len(),
                    plan.padded.len()
                );
            }
            Ok(())
        }
        Command::Rank(args) => {
            let ws = args.workspace()?;
            let ranker = ranker_for(&ws.config)?;
            let plans = ws.plan(&ws.decode()?)?;
            let summary = ws.rank(&plans, ranker.as_ref())?;
            println!("run directory: {}", ws.dir.root().display());
            println!(
                "lists: {} ({} ranked now, {} reused)",
                summary.lists, summary.issued, summary.reused
            );
            Ok(())
        }
        Command::Score(args) => {
            let ws = args.workspace()?;
            let candidates = ws.decode()?;
            let plans = ws.plan(&candidates)?;
            let results = ws.score(&candidates, &plans)?;
            println!("run directory: {}", ws.dir.root().display());
            for r in results {
                println!(
                    "{}: {} entities, {} degraded lists",
                    r.query_id,
                    r.entities.len(),
                    r.provenance.degraded_lists
                );
            }
            Ok(())
        }
        Command::Eval(args) => {
            let ws = args.workspace()?;
            let results = ws.load_results()?;
            match ws.evaluate(&results)? {
                Some(report) => print!("{}", report.to_table()),
                None => println!("no ground truth available"),
            }
            Ok(())
        }
        Command::Ablate(args) => {
            let config = args.run.resolve()?;
            let ranker = ranker_for(&config)?;
            let grid = AblationGrid {
                ns: args.ns,
                os: args.os,
                repeats: args.repeats,
            };
            let report = pipeline::run_ablation(&config, &grid, ranker.as_ref())?;
            print!("{}", report.to_table());
            println!("* padded cell");
            Ok(())
        }
        Command::Replay { run_dir } => report(pipeline::replay(&run_dir)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            ExitCode::from(u8::try_from(code).unwrap_or(EXIT_CONFIG))
        }
        Err(Failure::Degraded(m)) => {
            eprintln!(
                "error: {} of {} lists degraded ({:.1}%), above the threshold of {:.1}%",
                m.degraded_lists,
                m.lists,
                m.degraded_fraction * 100.0,
                m.config.degraded_threshold * 100.0
            );
            ExitCode::from(EXIT_DEGRADED)
        }
    }
}
