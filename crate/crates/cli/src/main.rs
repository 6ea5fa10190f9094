use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use speechformer::autodiff::GradCheckOptions;
use speechformer::checks::{grad_suite, oracle_suite, ORACLE_CASES};
use speechformer::complexity::{compare, count_flops, CostReport};
use speechformer::formats::{
    read_checkpoint, read_features, synth_features, write_checkpoint, write_features, ConfigFile,
};
use speechformer::model::{forward, init_model, Variant};
use speechformer::structure::{derive_schedule, DurationStats, DEFAULT_HOP1_MS};
use speechformer::{Error, Result};

#[derive(Parser)]
#[command(
    name = "speechformer",
    version,
    about = "Hierarchical windowed-attention speech encoder tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the stage schedule derived from the frame hop.
    Schedule {
        #[arg(long, default_value_t = DEFAULT_HOP1_MS)]
        hop1_ms: f64,
    },
    /// Parameter and FLOP report, optionally against a reference model.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input_len: usize,
        /// Feature width; overrides d_model of both configs.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        baseline_config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Run a forward pass and print stage shapes and logits.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Initialization seed; overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a feature file of standard-normal values.
    Synth {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a freshly initialized checkpoint.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the attention oracle and gradient check suites.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Tsv,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Suite {
    Oracle,
    Grad,
    All,
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ConfigFile::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn render(report: &CostReport, format: Format) -> String {
    match format {
        Format::Table => report.to_table(),
        Format::Tsv => report.to_tsv(),
    }
}

fn analyze(
    config: &Path,
    input_len: usize,
    dim: Option<usize>,
    baseline: Option<&Path>,
    format: Format,
    out: &mut impl Write,
) -> Result<()> {
    let cost = |path: &Path| -> Result<CostReport> {
        let mut model = load_config(path)?.model;
        if let Some(d) = dim {
            model.d_model = d;
        }
        let schedule = derive_schedule(model.hop1_ms, &DurationStats::default())?;
        count_flops(&model, input_len, &schedule)
    };
    let candidate = cost(config)?;
    write!(out, "{}", render(&candidate, format))?;
    if let Some(path) = baseline {
        let reference = cost(path)?;
        writeln!(out)?;
        write!(out, "{}", render(&reference, format))?;
        writeln!(out)?;
        write!(out, "{}", compare(&reference, &candidate)?)?;
    }
    Ok(())
}

fn run_forward(
    config: &Path,
    features: &Path,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
    out: &mut impl Write,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = cfg.model;
    model.validate()?;
    let x = read_features(&mut BufReader::new(File::open(features)?))?;
    if x.cols() != model.d_model {
        return Err(Error::Config(format!(
            "features are {}x{} but the model expects width {}",
            x.rows(),
            x.cols(),
            model.d_model
        )));
    }
    let weights = match checkpoint {
        Some(path) => read_checkpoint(&mut BufReader::new(File::open(path)?), &model)?,
        None => init_model(&model, seed.unwrap_or(cfg.seed))?,
    };
    let schedule = derive_schedule(model.hop1_ms, &DurationStats::default())?;
    let trace = forward(&x, &weights, &model, &schedule)?;
    let names: &[&str] = match model.variant {
        Variant::Baseline => &["encoder"],
        Variant::SpeechFormer => &["frame", "phoneme", "word", "utterance"],
    };
    for (name, (t, d)) in names.iter().zip(&trace.stage_shapes) {
        writeln!(out, "stage\t{name}\t{t}\t{d}")?;
    }
    let logits: Vec<String> = trace.logits.iter().map(|v| format!("{v:.12e}")).collect();
    writeln!(out, "logits\t{}", logits.join("\t"))?;
    Ok(())
}

/// Returns whether every check passed.
fn run_checks(suite: Suite, seed: u64, out: &mut impl Write) -> Result<bool> {
    let mut ok = true;
    if suite != Suite::Grad {
        for case in oracle_suite(seed, ORACLE_CASES)? {
            writeln!(out, "{case}")?;
            if !case.passed() {
                writeln!(out, "failing oracle case seed {}", case.seed)?;
                ok = false;
            }
        }
    }
    if suite != Suite::Oracle {
        let report = grad_suite(seed, &GradCheckOptions::default())?;
        write!(out, "{report}")?;
        if !report.passed() {
            writeln!(out, "failing gradient suite seed {seed}")?;
            ok = false;
        }
    }
    writeln!(
        out,
        "{}",
        if ok {
            "all checks passed"
        } else {
            "checks FAILED"
        }
    )?;
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Schedule { hop1_ms } => {
            let schedule = derive_schedule(hop1_ms, &DurationStats::default())?;
            write!(out, "{}", schedule.to_tsv())?;
        }
        Command::Analyze {
            config,
            input_len,
            dim,
            baseline_config,
            format,
        } => {
            analyze(
                &config,
                input_len,
                dim,
                baseline_config.as_deref(),
                format,
                &mut out,
            )?;
        }
        Command::Forward {
            config,
            features,
            checkpoint,
            seed,
        } => {
            run_forward(&config, &features, checkpoint.as_deref(), seed, &mut out)?;
        }
        Command::Synth {
            rows,
            cols,
            seed,
            out: path,
        } => {
            let m = synth_features(rows, cols, seed)?;
            let mut w = BufWriter::new(File::create(path)?);
            write_features(&mut w, &m)?;
            w.flush()?;
        }
        Command::Init {
            config,
            seed,
            out: path,
        } => {
            let cfg = load_config(&config)?;
            cfg.model.validate()?;
            let weights = init_model(&cfg.model, seed.unwrap_or(cfg.seed))?;
            let mut w = BufWriter::new(File::create(path)?);
            write_checkpoint(&mut w, &weights)?;
            w.flush()?;
            writeln!(out, "sha256\t{}", weights.checksum())?;
        }
        Command::Check { suite, seed } => return run_checks(suite, seed, &mut out),
    }
    out.flush()?;
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
