//! `mlaforge` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlaforge::cachekit::{self, Baseline, Preset, PRESET_D_ROPE};
use mlaforge::checkpoint::{
    load_calibration, load_checkpoint, save_calibration, save_checkpoint, write_dir_atomic, write_file_atomic,
    Checkpoint,
};
use mlaforge::convert::{convert, loss_report, output_residual, ConvertOptions};
use mlaforge::mdsvd::DEFAULT_RIDGE;
use mlaforge::model::ModelConfig;
use mlaforge::rope::RopeKind;
use mlaforge::selection::{score_mkl, score_two_norm, Strategy};
use mlaforge::synth::{calibration, mirrored_calibration, random_model, CalibSpec};

#[derive(Parser)]
#[command(name = "mlaforge", version, about = "Convert GQA/MHA attention checkpoints into latent attention")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random GQA checkpoint.
    GenModel(GenModelArgs),
    /// Write a synthetic calibration set.
    GenCalib(GenCalibArgs),
    /// Convert a GQA checkpoint into an MLA checkpoint.
    Convert(ConvertArgs),
    /// Compare a converted checkpoint with its source on calibration data.
    Verify(VerifyArgs),
    /// Print the KV-cache reduction of a preset architecture.
    Account(AccountArgs),
    /// Joint versus split factorization loss per layer.
    Analyze(AnalyzeArgs),
    /// Rotary subspace sensitivity scores.
    Select(SelectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RopeArg {
    #[value(name = "vanilla")]
    Vanilla,
    #[value(name = "mrope")]
    Mrope,
}

impl From<RopeArg> for RopeKind {
    fn from(r: RopeArg) -> Self {
        match r {
            RopeArg::Vanilla => RopeKind::Vanilla1d,
            RopeArg::Mrope => RopeKind::Mrope,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    #[value(name = "2norm")]
    TwoNorm,
    #[value(name = "mkl")]
    Mkl,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::TwoNorm => Strategy::TwoNorm,
            StrategyArg::Mkl => Strategy::Mkl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Mha,
    Gqa,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Mha => Baseline::Mha,
            BaselineArg::Gqa => Baseline::Gqa,
        }
    }
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    d_head: usize,
    #[arg(long, value_enum, default_value_t = RopeArg::Vanilla)]
    rope: RopeArg,
    #[arg(long, default_value_t = 10000.0)]
    rope_base: f64,
}

/// `KxHxW`: `K` images of `H` rows by `W` columns.
#[derive(Clone, Copy, Debug)]
struct ImageGrid {
    count: usize,
    rows: usize,
    cols: usize,
}

impl FromStr for ImageGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('x').collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("expected KxHxW, got {s:?}"))?;
        match nums[..] {
            [count, rows, cols] => Ok(Self { count, rows, cols }),
            _ => Err(format!("expected KxHxW, got {s:?}")),
        }
    }
}

#[derive(Args)]
struct GenCalibArgs {
    #[arg(long)]
    out: PathBuf,
    /// Text tokens per sequence.
    #[arg(long, default_value_t = 16)]
    text: usize,
    #[arg(long, default_value = "1x4x4")]
    images: ImageGrid,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long, value_enum, default_value_t = RopeArg::Vanilla)]
    rope: RopeArg,
    /// Scale of visual embeddings relative to text embeddings.
    #[arg(long, default_value_t = 1.0)]
    visual_scale: f64,
    /// Emit every sequence twice, once per modality, with identical
    /// embeddings and positions.
    #[arg(long)]
    mirror: bool,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::TwoNorm)]
    strategy: StrategyArg,
    #[arg(long)]
    d_rope: usize,
    #[arg(long)]
    d_latent: usize,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long)]
    out: PathBuf,
    /// Directory for the conversion report and sensitivity scores.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Accept single-modality calibration by reusing the present modality's
    /// activations for the missing one.
    #[arg(long)]
    allow_fallback: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Source GQA checkpoint.
    #[arg(long)]
    original: PathBuf,
    /// Converted MLA checkpoint.
    #[arg(long)]
    converted: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Fail when the residual exceeds this value.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long)]
    preset: String,
    #[arg(long)]
    d_latent: usize,
    #[arg(long, value_enum, default_value_t = BaselineArg::Mha)]
    baseline: BaselineArg,
    #[arg(long, default_value_t = 16)]
    bits: u32,
    #[arg(long, default_value_t = PRESET_D_ROPE)]
    d_rope: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::TwoNorm)]
    strategy: StrategyArg,
    #[arg(long)]
    out: PathBuf,
}

/// Failure reported as one JSON line on stderr.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<mlaforge::Error> for Failure {
    fn from(e: mlaforge::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|_| run(cli));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::json!({ "error": f.kind, "message": f.message }));
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var("MLAFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
        kind: "invalid_argument",
        message: format!("MLAFORGE_THREADS must be a positive integer, got {raw:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            kind: "internal",
            message: e.to_string(),
        })
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenModel(a) => gen_model(a, cli.seed),
        Command::GenCalib(a) => gen_calib(a, cli.seed),
        Command::Convert(a) => run_convert(a),
        Command::Verify(a) => verify(a),
        Command::Account(a) => account(a),
        Command::Analyze(a) => analyze(a),
        Command::Select(a) => select(a),
    }
}

fn gen_model(a: GenModelArgs, seed: u64) -> CmdResult {
    let cfg = ModelConfig {
        n_layers: a.layers,
        n_heads: a.heads,
        n_kv_heads: a.kv_heads,
        d_model: a.d_model,
        d_head: a.d_head,
        rope_kind: a.rope.into(),
        rope_base: a.rope_base,
        d_rope: a.d_head,
        d_latent: a.d_head.min(a.d_model),
    };
    cfg.validate()?;
    let layers = random_model(&cfg, seed);
    save_checkpoint(&a.out, &Checkpoint::Gqa { cfg, layers })?;
    Ok(())
}

fn gen_calib(a: GenCalibArgs, seed: u64) -> CmdResult {
    let spec = CalibSpec {
        d_model: a.d_model,
        rope_kind: a.rope.into(),
        sequences: a.sequences,
        text: a.text,
        images: a.images.count,
        image_rows: a.images.rows,
        image_cols: a.images.cols,
        visual_scale: a.visual_scale,
    };
    let seqs = if a.mirror {
        mirrored_calibration(&spec, seed)?
    } else {
        calibration(&spec, seed)?
    };
    save_calibration(&a.out, &seqs)?;
    Ok(())
}

fn load_gqa(path: &Path) -> Result<(ModelConfig, Vec<mlaforge::model::AttentionWeights>), Failure> {
    match load_checkpoint(path)? {
        Checkpoint::Gqa { cfg, layers } => Ok((cfg, layers)),
        Checkpoint::Mla { .. } => Err(Failure {
            kind: "invalid_argument",
            message: format!("{} holds an MLA checkpoint; a GQA checkpoint is required", path.display()),
        }),
    }
}

fn check_calib_width(cfg: &ModelConfig, calib: &[mlaforge::model::TokenSequence]) -> CmdResult {
    if let Some(s) = calib.iter().find(|s| s.d_model() != cfg.d_model) {
        return Err(Failure {
            kind: "shape",
            message: format!("calibration d_model {} differs from model d_model {}", s.d_model(), cfg.d_model),
        });
    }
    Ok(())
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> mlaforge::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn run_convert(a: ConvertArgs) -> CmdResult {
    let (src_cfg, layers) = load_gqa(&a.input)?;
    let calib = load_calibration(&a.calib)?;
    check_calib_width(&src_cfg, &calib)?;
    let cfg = src_cfg.with_targets(a.d_rope, a.d_latent);
    let strategy: Strategy = a.strategy.into();
    let conv = convert(
        &cfg,
        &layers,
        &calib,
        ConvertOptions {
            strategy,
            ridge: a.ridge,
            allow_fallback: a.allow_fallback,
        },
    )?;
    let report = match &a.report {
        Some(_) => Some((
            csv_bytes(|b| conv.report.write_csv(b))?,
            conv.report.to_text().into_bytes(),
            csv_bytes(|b| conv.scores.write_csv(b))?,
        )),
        None => None,
    };
    let ckpt = Checkpoint::Mla {
        cfg: conv.cfg,
        strategy,
        layers: conv.layers,
    };
    save_checkpoint(&a.out, &ckpt)?;
    if let (Some(dir), Some((csv, text, scores))) = (&a.report, report) {
        write_dir_atomic(
            dir,
            &[("conversion.csv", &csv), ("conversion.txt", &text), ("scores.csv", &scores)],
        )?;
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> CmdResult {
    let (cfg, original) = load_gqa(&a.original)?;
    let Checkpoint::Mla {
        cfg: mla_cfg,
        layers: mla,
        ..
    } = load_checkpoint(&a.converted)?
    else {
        return Err(Failure {
            kind: "invalid_argument",
            message: format!("{} is not an MLA checkpoint", a.converted.display()),
        });
    };
    if mla_cfg.with_targets(cfg.d_rope, cfg.d_latent) != cfg {
        return Err(Failure {
            kind: "config",
            message: "converted checkpoint does not share the source architecture".into(),
        });
    }
    let calib = load_calibration(&a.calib)?;
    check_calib_width(&cfg, &calib)?;
    let residual = output_residual(&cfg, &original, &mla_cfg, &mla, &calib)?;
    println!("residual: {residual:.3e}");
    match a.tolerance {
        Some(tol) if !(residual <= tol) => Err(Failure {
            kind: "tolerance_exceeded",
            message: format!("residual {residual:.3e} exceeds tolerance {tol:.3e}"),
        }),
        _ => Ok(()),
    }
}

fn account(a: AccountArgs) -> CmdResult {
    let preset = Preset::by_name(&a.preset)?;
    let cfg = preset.config(a.d_rope, a.d_latent);
    cfg.validate()?;
    let budget = cachekit::account(&cfg, a.baseline.into(), a.bits)?;
    println!("{}", budget.display_pct());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> CmdResult {
    let (cfg, layers) = load_gqa(&a.input)?;
    let calib = load_calibration(&a.calib)?;
    check_calib_width(&cfg, &calib)?;
    let report = loss_report(&cfg, &layers, &calib, a.rank, a.ridge)?;
    write_file_atomic(&a.out, &csv_bytes(|b| report.write_csv(b))?)?;
    Ok(())
}

fn select(a: SelectArgs) -> CmdResult {
    let (cfg, layers) = load_gqa(&a.input)?;
    let calib = load_calibration(&a.calib)?;
    check_calib_width(&cfg, &calib)?;
    let map = match a.strategy {
        StrategyArg::TwoNorm => score_two_norm(&cfg, &layers, &calib)?,
        StrategyArg::Mkl => score_mkl(&cfg, &layers, &calib)?,
    };
    write_file_atomic(&a.out, &csv_bytes(|b| map.write_csv(b))?)?;
    Ok(())
}
