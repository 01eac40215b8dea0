use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptft_core::experiment::{
    self, diagnose, presets, read_curve_csv, read_metadata, reproduce_row, write_output, ExperimentConfig, RunOptions,
};
use ptft_core::Error;

#[derive(Parser)]
#[command(name = "ptft", version, about = "Replica and simulation sweeps for pretrain/fine-tune diagonal networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config file and write CSV rows plus a JSON metadata file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Run a built-in preset, or print its config with --emit-config.
    Preset {
        /// exp1, exp2, exp3, exp4, curves or regimes
        name: String,
        #[arg(long)]
        emit_config: bool,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Re-run rows of an earlier output and check they come out bit-identical.
    Reproduce {
        /// CSV written by `run`; its `.json` sibling supplies the config.
        csv: PathBuf,
        /// Zero-based data row; all rows when omitted.
        #[arg(long)]
        row: Option<usize>,
    },
}

#[derive(Args)]
struct RunFlags {
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Added to every seed before the config is hashed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// Contiguous alpha chunks per replica curve.
    #[arg(long)]
    chunks: Option<usize>,
    /// Print unit progress on stderr.
    #[arg(long)]
    progress: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(err: Error, source: &str) -> Self {
        let code = if matches!(err, Error::Config { .. }) { 2 } else { 3 };
        Failure {
            code,
            message: diagnose(source, &err),
        }
    }
}

fn read_source(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure {
        code: 2,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

fn parse(source: &str) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::from_toml(source).map_err(|e| Failure::new(e, source))
}

fn run_config(mut cfg: ExperimentConfig, source: &str, flags: &RunFlags, base_dir: &Path) -> Result<(), Failure> {
    for s in &mut cfg.seeds {
        *s = s.wrapping_add(flags.seed_offset);
    }
    if let Some(c) = flags.chunks {
        cfg.chunks = c;
    }
    let out = flags
        .out
        .clone()
        .or_else(|| cfg.output_path.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| {
            let stem = if cfg.name.is_empty() { "results" } else { cfg.name.as_str() };
            PathBuf::from(format!("{stem}.csv"))
        });
    let report = cfg.validate().map_err(|e| Failure::new(e, source))?;
    eprintln!("{report}");
    let mut opts = RunOptions::from_env(flags.workers);
    opts.progress = flags.progress;
    let output = experiment::run(&cfg, &opts, base_dir).map_err(|e| Failure::new(e, source))?;
    write_output(&out, &output).map_err(|e| Failure::new(e, source))?;
    let flags_n = output.metadata.flags.len();
    eprintln!(
        "wrote {} (config {}){}",
        out.display(),
        output.metadata.config_hash,
        if flags_n > 0 { format!(", {flags_n} flagged units") } else { String::new() }
    );
    Ok(())
}

fn reproduce(csv: &Path, row: Option<usize>) -> Result<(), Failure> {
    let internal = |e: Error| Failure::new(e, "");
    let meta = read_metadata(&experiment::output::metadata_path(csv)).map_err(internal)?;
    let cfg = parse(&meta.config)?;
    let rows = read_curve_csv(csv).map_err(internal)?;
    let picked: Vec<usize> = match row {
        Some(i) if i < rows.len() => vec![i],
        Some(i) => {
            return Err(Failure {
                code: 2,
                message: format!("row {i} out of range ({} rows)", rows.len()),
            })
        }
        None => (0..rows.len()).collect(),
    };
    let mut mismatched = 0;
    for i in picked {
        let fresh = reproduce_row(&cfg, &rows[i]).map_err(|e| Failure::new(e, &meta.config))?;
        let same = fresh.same_result(&rows[i]);
        if !same {
            mismatched += 1;
        }
        println!("row {i}: alpha={} seed={} {}", rows[i].alpha, rows[i].seed, if same { "identical" } else { "DIFFERENT" });
    }
    if mismatched > 0 {
        return Err(Failure {
            code: 3,
            message: format!("{mismatched} rows did not reproduce"),
        });
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, run } => {
            let source = read_source(&config)?;
            let cfg = parse(&source)?;
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            run_config(cfg, &source, &run, &base)
        }
        Command::Validate { config } => {
            let source = read_source(&config)?;
            let cfg = parse(&source)?;
            let report = cfg.validate().map_err(|e| Failure::new(e, &source))?;
            println!("{report}");
            println!("config hash:   {}", cfg.hash().map_err(|e| Failure::new(e, &source))?);
            Ok(())
        }
        Command::Preset { name, emit_config, run } => {
            let source = presets::source(&name).map_err(|e| Failure::new(e, ""))?;
            if emit_config {
                print!("{source}");
                return Ok(());
            }
            run_config(parse(source)?, source, &run, Path::new("."))
        }
        Command::Reproduce { csv, row } => reproduce(&csv, row),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
