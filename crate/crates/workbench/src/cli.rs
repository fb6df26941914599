use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use attnlego_core::controller::{format_trace, parse_trace, stats};
use attnlego_core::numerics::{AdcConfig, AdcMode, DEFAULT_ADC_FULL_SCALE};
use attnlego_core::reference::{
    attention_fixed_reference, attention_float_for, compare, compare_codes,
};
use attnlego_core::softmax::generate_exp_lut;
use attnlego_core::{run_inference, AttentionConfig, Int8Matrix, QFormat, Weights, Workload};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::run_config::{parse_run_config, DEFAULT_PRESET};
use crate::tensor_file::TensorFile;

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Seed source for `gen-data`.
pub const SEED_ENV: &str = "ATTNLEGO_SEED";

#[derive(Debug, Parser)]
#[command(name = "attnlego", about = "Cycle-level PIM self-attention simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the 256-entry exponent table.
    GenLut {
        #[arg(long, default_value = "Q4.3")]
        in_format: String,
        #[arg(long, default_value = "UQ1.15")]
        out_format: String,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Simulate one inference.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        /// Attention outputs as a tensor file.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Simulate and compare against a reference.
    Check {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value_t = CheckMode::Bitexact)]
        mode: CheckMode,
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
    },
    /// Summarize a trace file.
    Stats {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Write random weights and tokens for a config.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides ATTNLEGO_SEED.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckMode {
    Bitexact,
    Float,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AdcArg {
    Ideal,
    Quantized,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    adc: Option<AdcArg>,
}

#[derive(Debug, Args)]
struct Inputs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    weights_q: Option<PathBuf>,
    #[arg(long)]
    weights_k: Option<PathBuf>,
    #[arg(long)]
    weights_v: Option<PathBuf>,
    #[arg(long)]
    tokens: PathBuf,
}

impl ConfigArgs {
    fn load(&self) -> Result<AttentionConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text =
                    fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
                parse_run_config(&text, self.preset.as_deref())
                    .map_err(|e| anyhow!("{}: {e}", path.display()))?
            }
            None => parse_run_config("{}", Some(self.preset.as_deref().unwrap_or(DEFAULT_PRESET)))
                .map_err(|e| anyhow!(e))?,
        };
        match (self.adc, config.adc.mode) {
            (Some(AdcArg::Ideal), _) => config.adc = AdcConfig::ideal(),
            (Some(AdcArg::Quantized), AdcMode::Ideal) => {
                config.adc = AdcConfig::quantized(config.adc.bits, DEFAULT_ADC_FULL_SCALE)
            }
            _ => {}
        }
        config.validate()?;
        Ok(config)
    }
}

fn read_matrix(path: &Path) -> Result<Int8Matrix> {
    let t = TensorFile::read(path)?;
    t.to_matrix()
        .map_err(|e| anyhow!("{}: {e}", path.display()))
}

impl Inputs {
    fn load(&self) -> Result<(AttentionConfig, Workload)> {
        let config = self.config.load()?;
        let (Some(q), Some(k), Some(v)) = (&self.weights_q, &self.weights_k, &self.weights_v)
        else {
            bail!("weights not loaded: --weights-q, --weights-k and --weights-v are all required");
        };
        let weights = Weights {
            q: read_matrix(q)?,
            k: read_matrix(k)?,
            v: read_matrix(v)?,
        };
        let workload = Workload {
            weights,
            tokens: read_matrix(&self.tokens)?,
        };
        workload.validate(&config)?;
        Ok((config, workload))
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("{}", path.display()))
}

fn cmd_gen_lut(in_format: &str, out_format: &str, output: &Path) -> Result<u8> {
    let fin: QFormat = in_format.parse()?;
    let fout: QFormat = out_format.parse()?;
    let lut = generate_exp_lut(fin, fout)?;
    write_file(output, lut.to_text().as_bytes())?;
    Ok(0)
}

fn cmd_run(
    inputs: &Inputs,
    output: Option<&Path>,
    trace: Option<&Path>,
    stats_path: Option<&Path>,
) -> Result<u8> {
    let (config, workload) = inputs.load()?;
    let result = run_inference(&workload, &config)?;
    if let Some(p) = output {
        TensorFile::from_matrix(&result.outputs).write(p)?;
    }
    if let Some(p) = trace {
        write_file(p, format_trace(&result.trace).as_bytes())?;
    }
    if let Some(p) = stats_path {
        write_file(p, result.stats.to_json().as_bytes())?;
    }
    println!(
        "{} cycles, {} tokens, {} trace records",
        result.stats.total_cycles,
        config.seq_len,
        result.trace.len()
    );
    Ok(0)
}

fn cmd_check(inputs: &Inputs, mode: CheckMode, tolerance: f64) -> Result<u8> {
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        bail!("tolerance must be a non-negative number");
    }
    let (config, workload) = inputs.load()?;
    let sim = run_inference(&workload, &config)?;
    let (report, pass) = match mode {
        CheckMode::Bitexact => {
            let reference = attention_fixed_reference(&workload, &config)?;
            let report = compare_codes(&sim.outputs, &reference.outputs, 0.0)?;
            let pass =
                report.bit_exact && sim.probs == reference.probs && sim.scores == reference.scores;
            (report, pass)
        }
        CheckMode::Float => {
            let reference = attention_float_for(&workload, config.d_k)?;
            let report = compare(&sim.outputs.dequantize(), &reference, tolerance)?;
            let pass = report.within_tolerance;
            (report, pass)
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_stats(trace: &Path) -> Result<u8> {
    let text = fs::read_to_string(trace).with_context(|| format!("{}", trace.display()))?;
    let records = parse_trace(&text).map_err(|e| anyhow!("{}: {e}", trace.display()))?;
    println!("{}", stats(&records).to_json());
    Ok(0)
}

fn cmd_gen_data(config: &ConfigArgs, out_dir: &Path, seed: Option<u64>) -> Result<u8> {
    let config = config.load()?;
    let seed = match seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(s) => s
                .parse()
                .with_context(|| format!("{SEED_ENV}={s} is not an unsigned integer"))?,
            Err(_) => 0,
        },
    };
    fs::create_dir_all(out_dir).with_context(|| format!("{}", out_dir.display()))?;
    let w = Workload::random(&config, seed);
    for (name, m) in [
        ("wq.algo", &w.weights.q),
        ("wk.algo", &w.weights.k),
        ("wv.algo", &w.weights.v),
        ("tokens.algo", &w.tokens),
    ] {
        TensorFile::from_matrix(m).write(&out_dir.join(name))?;
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenLut {
            in_format,
            out_format,
            output,
        } => cmd_gen_lut(&in_format, &out_format, &output),
        Command::Run {
            inputs,
            output,
            trace,
            stats,
        } => cmd_run(
            &inputs,
            output.as_deref(),
            trace.as_deref(),
            stats.as_deref(),
        ),
        Command::Check {
            inputs,
            mode,
            tolerance,
        } => cmd_check(&inputs, mode, tolerance),
        Command::Stats { trace } => cmd_stats(&trace),
        Command::GenData {
            config,
            out_dir,
            seed,
        } => cmd_gen_data(&config, &out_dir, seed),
    }
}

/// Parses `args` and runs; 0 success, 1 check failure, 2 usage or I/O error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
