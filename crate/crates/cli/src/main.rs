//! `mdts-calib`: synthesize multi-domain calibration benchmarks, fit scaling
//! maps, evaluate them, and check the divergence bound on held-out risk.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 bound-check
//! failure, 3 I/O failure. All randomness flows from explicit seed flags, so
//! every command is deterministic given its arguments.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mdts_core::Error;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap reserves exit code 2 for usage errors; this tool keeps 2
            // for bound-check failures, so usage errors map to 1.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Fit(args) => commands::fit(args),
        Command::Eval(args) => commands::eval(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::PredictAcc(args) => commands::predict_acc(args),
        Command::BoundCheck(args) => commands::bound_check(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for filesystem-level failures, 1 for everything else (bad flag values,
/// malformed or mismatched inputs).
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::IoFailure { .. } | Error::MissingFile { .. } => 3,
        _ => 1,
    }
}

#[derive(Parser)]
#[command(name = "mdts-calib", version, about = "Multi-domain confidence calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic multi-domain benchmark.
    Synth(SynthArgs),
    /// Fit a calibration map on the calibration half of the InD domains.
    Fit(FitArgs),
    /// Evaluate a model on the InD evaluation half and the held-out domains.
    Eval(EvalArgs),
    /// Fit and score every regressor kind on the same dataset.
    Ablate(AblateArgs),
    /// Predict per-domain accuracy from mean calibrated confidence.
    PredictAcc(PredictAccArgs),
    /// Check the divergence bound on held-out risk; exits 2 if it fails.
    BoundCheck(BoundCheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// In-distribution domain count.
    #[arg(long, default_value_t = 10)]
    pub domains: usize,
    /// Held-out domain count; scale factors come from the same range.
    #[arg(long, default_value_t = 0)]
    pub ood_domains: usize,
    /// Samples per domain.
    #[arg(long, default_value_t = 1000)]
    pub per_domain: usize,
    /// Class count.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Embedding layout.
    #[arg(long, value_enum, default_value_t = EmbeddingArg::Direct)]
    pub embedding: EmbeddingArg,
    /// Extra embedding dimensions (mixed layout only).
    #[arg(long, default_value_t = 4)]
    pub extra_dims: usize,
    /// Domain scale-factor range.
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair, default_value = "0.5,3")]
    pub scale_range: (f64, f64),
    /// Base-logit standard deviation.
    #[arg(long, default_value_t = 2.0)]
    pub logit_std: f64,
    /// Embedding-noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EmbeddingArg {
    /// Base logits plus one noisy scale coordinate.
    Direct,
    /// Random orthogonal mix of scale-tagged logits, then noise.
    Mixed,
}

#[derive(Args)]
pub struct FitArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output path for the fitted model.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Calibration map to fit.
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Temperature regressor (mdts only).
    #[arg(long, value_enum, default_value_t = RegressorArg::Ols)]
    pub regressor: RegressorArg,
    /// Drop the regressor's intercept column.
    #[arg(long)]
    pub no_intercept: bool,
    /// Pick regressor hyperparameters by leave-one-domain-out search.
    #[arg(long)]
    pub grid_search: bool,
    /// Predicted-temperature clamp.
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair, default_value = "0.05,50")]
    pub clamp: (f64, f64),
    /// Bin count for grid-search scoring.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Seed of the calibration/evaluation half split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    /// One pooled scaling temperature.
    Ts,
    /// Per-sample temperature predicted from the embedding.
    Mdts,
    /// Histogram binning on pooled confidences.
    Histbin,
    /// Isotonic regression on pooled confidences.
    Isotonic,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RegressorArg {
    Ols,
    Ridge,
    Huber,
    Krr,
    Knn,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Fitted model file.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Output directory for reports and reliability tables.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Calibration-error bin count.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Seed of the calibration/evaluation half split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Also write a reliability table for this domain (repeatable).
    #[arg(long = "reliability", value_name = "DOMAIN")]
    pub reliability: Vec<String>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory for the comparison table.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Calibration-error bin count.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Seed of the calibration/evaluation half split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Predicted-temperature clamp.
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair, default_value = "0.05,50")]
    pub clamp: (f64, f64),
}

#[derive(Args)]
pub struct PredictAccArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Fitted multi-domain scaling model.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Output directory for the per-domain table.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Calibration-error bin count.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Seed of the calibration/evaluation half split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Args)]
pub struct BoundCheckArgs {
    /// Dataset directory; domains must carry oracle confidences.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Fitted model whose held-out risk is bounded.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Output directory for the bound report.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Additive slack on the right-hand side.
    #[arg(long, default_value_t = 0.05)]
    pub slack: f64,
    /// Temperature grid size of the hypothesis family.
    #[arg(long, default_value_t = 11)]
    pub temp_grid: usize,
    /// Threshold grid size of the hypothesis family.
    #[arg(long, default_value_t = 21)]
    pub threshold_grid: usize,
    /// Mixture-weight lattice resolution.
    #[arg(long, default_value_t = 10)]
    pub alpha_resolution: usize,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|e| format!("`{}`: {e}", v.trim()))
    };
    Ok((parse(lo)?, parse(hi)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_parser_accepts_and_rejects() {
        assert_eq!(parse_pair("0.5,3").unwrap(), (0.5, 3.0));
        assert_eq!(parse_pair(" 1 , 2.5 ").unwrap(), (1.0, 2.5));
        assert!(parse_pair("1").is_err());
        assert!(parse_pair("a,b").is_err());
    }

    #[test]
    fn command_line_parses() {
        Cli::try_parse_from(["mdts-calib", "synth", "--out", "d", "--domains", "3"]).unwrap();
        Cli::try_parse_from([
            "mdts-calib", "fit", "--data", "d", "--model", "m.json", "--method", "mdts",
            "--regressor", "krr", "--grid-search", "--clamp", "0.1,20",
        ])
        .unwrap();
        assert!(Cli::try_parse_from([
            "mdts-calib", "fit", "--data", "d", "--model", "m.json", "--method", "mdts",
            "--regressor", "cubist",
        ])
        .is_err());
    }
}
