use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use asyncmis::experiment::{
    emit_report, render_grid, render_table4, run_experiment, table4, ExperimentSpec, ThresholdBlock, DEFAULT_BLOCKS,
};
use asyncmis::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUN: u8 = 2;

#[derive(Parser)]
#[command(name = "asyncmis", version, about = "Asynchronous off-policy correction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Result directory; defaults to the spec's `outputs` or `results/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the base seed; repeats use consecutive seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run the base config of a spec, ignoring sweeps and grids.
    Run(RunArgs),
    /// Run every sweep point, grid cell and repeat of a spec.
    Sweep(RunArgs),
    /// Write series files and summary tables for a result directory.
    Report {
        /// Result directory containing manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a spec without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print effective thresholds on the total ratio for interpolation proxies.
    Table4 {
        /// Original mask interval as `lo,hi`; repeat for several blocks.
        #[arg(long, value_parser = parse_pair)]
        mask: Vec<(f64, f64)>,
        /// Original clip interval as `lo,hi`; one per mask, or one for all.
        #[arg(long, value_parser = parse_pair)]
        clip: Vec<(f64, f64)>,
        /// Version gaps.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        gaps: Vec<u64>,
        #[arg(long, value_enum, default_value_t = TableFormat::Text)]
        format: TableFormat,
    },
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if !(lo < 1.0 && 1.0 < hi) {
        return Err(format!("interval [{lo}, {hi}] must contain 1 strictly"));
    }
    Ok((lo, hi))
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUN })
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })?;
    ExperimentSpec::from_toml_str(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })
}

fn execute(args: RunArgs, full: bool) -> ExitCode {
    let mut spec = match load_spec(&args.config) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if !full {
        spec.sweeps.clear();
        spec.grid = None;
    }
    let out = args
        .out
        .or_else(|| spec.outputs.clone())
        .unwrap_or_else(|| PathBuf::from("results").join(&spec.name));
    match run_experiment(&spec, &out, args.jobs, args.seed) {
        Ok(res) => {
            for r in &res.manifest.runs {
                match (&r.summary, &r.error) {
                    (Some(s), _) => println!(
                        "{}\tfinal_success={:.4}\tfinal_rho={:.4}\tresets={}\tmax_gap={}",
                        r.name, s.final_success, s.final_mask_fraction, s.reset_count, s.max_observed_gap
                    ),
                    (None, Some(e)) => println!("{}\tFAILED\t{e}", r.name),
                    (None, None) => println!("{}\tFAILED", r.name),
                }
            }
            if let Some(rows) = &res.grid {
                print!("{}", render_grid(rows));
            }
            println!("wrote {}", res.dir.display());
            if res.failures > 0 {
                eprintln!("error: {} of {} runs failed", res.failures, res.manifest.runs.len());
                ExitCode::from(EXIT_RUN)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => fail(&e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run(args) => execute(args, false),
        Command::Sweep(args) => execute(args, true),
        Command::Report { out } => match emit_report(&out) {
            Ok(r) => {
                match std::fs::read_to_string(r.dir.join("summary.txt")) {
                    Ok(t) => print!("{t}"),
                    Err(e) => eprintln!("warning: {e}"),
                }
                println!("wrote {} files to {}", r.files.len(), r.dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::ValidateConfig { config } => match load_spec(&config) {
            Ok(spec) => match spec.plan(None) {
                Ok(plans) => {
                    println!("ok: `{}` expands to {} run(s)", spec.name, plans.len());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            },
            Err(code) => code,
        },
        Command::Table4 { mask, clip, gaps, format } => {
            let blocks: Vec<ThresholdBlock> = if mask.is_empty() && clip.is_empty() {
                DEFAULT_BLOCKS.to_vec()
            } else {
                if mask.is_empty() || !(clip.len() == 1 || clip.len() == mask.len()) {
                    eprintln!("error: give one --clip for all masks or one per --mask");
                    return ExitCode::from(EXIT_CONFIG);
                }
                mask.iter()
                    .enumerate()
                    .map(|(i, &m)| ThresholdBlock {
                        mask: m,
                        clip: clip[if clip.len() == 1 { 0 } else { i }],
                    })
                    .collect()
            };
            match table4(&blocks, &gaps) {
                Ok(rows) => {
                    match format {
                        TableFormat::Text => print!("{}", render_table4(&rows)),
                        TableFormat::Json => match serde_json::to_string_pretty(&rows) {
                            Ok(s) => println!("{s}"),
                            Err(e) => {
                                eprintln!("error: {e}");
                                return ExitCode::from(EXIT_RUN);
                            }
                        },
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
