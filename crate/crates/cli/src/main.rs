use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use loco_ood_cli::{
    cmd_report, cmd_run, cmd_synth, cmd_tune, load_config, CliError, ReportFlags, ReportFormat,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Md,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Md => ReportFormat::Md,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "loco-ood",
    version,
    about = "Leave-one-class-out OOD detection benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic dataset directories from the [synth] section
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (falls back to output.dir in the config)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the benchmark; writes results.csv and summary.json
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; repeatable, one per subject (overrides the
        /// config's data source)
        #[arg(long = "data")]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for the cell pool (default: available parallelism)
        #[arg(long)]
        jobs: Option<usize>,
        /// Override the master seed from the config
        #[arg(long)]
        seed: Option<u64>,
    },
    /// First-subject hyperparameter tuning only; writes tuned.json
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "data")]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render report tables from a results.csv
    Report {
        results: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: FormatArg,
        /// Paired Wilcoxon test per method between react on/off rows
        #[arg(long)]
        compare_react: bool,
        /// Kruskal-Wallis test across OOD classes
        #[arg(long)]
        by_class: bool,
        /// Mann-Whitney test per method against another results.csv
        #[arg(long, value_name = "OTHER_RESULTS")]
        compare_id_classes: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = load_config(&config)?;
            let out_dir = cfg.output_dir(out.as_deref())?;
            let dirs = cmd_synth(&cfg, &out_dir)?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Run { config, data, out, jobs, seed } => {
            let cfg = load_config(&config)?;
            let out_dir = cfg.output_dir(out.as_deref())?;
            let artifacts = cmd_run(&cfg, &data, &out_dir, jobs, seed)?;
            println!("{}", artifacts.results_csv.display());
            println!("{}", artifacts.summary_json.display());
            if !artifacts.outcome.failures.is_empty() {
                eprintln!(
                    "warning: {} cell(s) failed; see summary.json",
                    artifacts.outcome.failures.len()
                );
            }
        }
        Command::Tune { config, data, out } => {
            let cfg = load_config(&config)?;
            let out_dir = cfg.output_dir(out.as_deref())?;
            let path = cmd_tune(&cfg, &data, &out_dir)?;
            println!("{}", path.display());
        }
        Command::Report { results, format, compare_react, by_class, compare_id_classes } => {
            let flags = ReportFlags { compare_react, by_class, compare_id_classes };
            let rendered = cmd_report(&results, format.into(), &flags)?;
            print!("{rendered}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
