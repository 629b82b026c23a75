use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ortho_probe::trainer::Mode;
use ortho_probe::{Result, Structure};
use ortho_probe_cli::commands::{self, AnalyzeOptions, SynthOptions};
use ortho_probe_cli::config::{ExperimentConfig, Overrides, SyntheticData};

const MODES_HELP: &str = "Modes: A = one orthogonal probe per objective; B = depth and distance of one \
structure with a shared V; C = the four distance objectives with a shared V; D = the four depth \
objectives with a shared V; E = all eight objectives with a shared V; I = scaling vector only \
(V fixed to the identity); II = dense linear probe.\n\nExit codes: 0 success, 2 config error, \
3 data error, 4 numerical abort. ORTHO_PROBE_THREADS caps the number of parallel runs.";

#[derive(Parser)]
#[command(name = "ortho-probe", version, about = "Orthogonal structural probes", after_help = MODES_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic treebank, planted embeddings and an experiment config.
    Synth(SynthArgs),
    /// Train every (layer, seed) run of an experiment, resuming saved runs.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Run at most this many epochs per run, then pause.
        #[arg(long)]
        epoch_budget: Option<usize>,
    },
    /// Score trained runs: correlations and parse accuracy.
    Eval {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Dimension selection, overlap tables and histograms of trained runs.
    Analyze {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Fail unless overlap tables can be produced (shared-V modes only).
        #[arg(long)]
        overlap: bool,
        #[arg(long, default_value_t = 16)]
        bin_size: usize,
        /// Comma-separated thresholds for the selection stability check.
        #[arg(long, value_delimiter = ',')]
        epsilon_sweep: Vec<f64>,
    },
    /// Print statistics of a CoNLL-U file as JSON.
    InspectConllu {
        path: PathBuf,
        /// Also count tokens resolved in this taxonomy.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Replace the seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated layers.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<u32>>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                layers: self.layers.clone(),
                mode: self.mode,
                output_dir: self.output_dir.clone(),
            },
        )
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    /// Train, dev and test sentence counts.
    #[arg(long, value_delimiter = ',', default_value = "300,50,50")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Comma-separated structures to plant (DEP, POS, RAND).
    #[arg(long, value_delimiter = ',', default_value = "DEP", value_parser = parse_structure)]
    planted: Vec<Structure>,
    #[arg(long)]
    block_dim: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    layers: Vec<u32>,
    #[arg(long, default_value_t = 0)]
    label_seed: u64,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: ortho_probe::Error| e.to_string())
}

fn parse_structure(s: &str) -> std::result::Result<Structure, String> {
    Structure::ALL
        .iter()
        .copied()
        .find(|x| x.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown structure '{}'", s))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            if a.sizes.len() != 3 {
                return Err(ortho_probe::Error::Config("sizes: expected train,dev,test counts".into()));
            }
            let opts = SynthOptions {
                out_dir: a.out,
                data: SyntheticData {
                    sizes: [a.sizes[0], a.sizes[1], a.sizes[2]],
                    min_len: a.min_len,
                    max_len: a.max_len,
                    ambient_dim: a.dim,
                    planted: a.planted,
                    block_dim: a.block_dim,
                    noise: a.noise,
                    seed: a.seed,
                },
                layers: a.layers,
                label_seed: a.label_seed,
            };
            print_json(&commands::synth(&opts)?)
        }
        Command::Train { exp, epoch_budget } => print_json(&commands::train(&exp.load()?, epoch_budget)?),
        Command::Eval { exp } => {
            let report = commands::eval(&exp.load()?)?;
            print!("{}", report.correlations_tsv());
            print!("{}", report.parse_tsv());
            Ok(())
        }
        Command::Analyze {
            exp,
            overlap,
            bin_size,
            epsilon_sweep,
        } => {
            let opts = AnalyzeOptions {
                overlap,
                bin_size,
                epsilon_sweep,
            };
            let runs = commands::analyze(&exp.load()?, &opts)?;
            for r in &runs {
                println!("{}\t{}", r.run, r.dir.display());
            }
            Ok(())
        }
        Command::InspectConllu { path, taxonomy } => {
            print_json(&commands::inspect_conllu(&path, taxonomy.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
