//! Command-line front end: dataset generation, training, magnification,
//! evaluation and gradient verification.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or format,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::error::{Error, Result};
use crate::filter::MaskFill;
use crate::gradcheck::{run_suite, CheckOptions, GroupResult};
use crate::io::{from_model_range, read_ppm, to_model_range, write_ppm};
use crate::losses::EdgeVariant;
use crate::metrics::{MetricsReport, PairMetrics};
use crate::model::{check_frame_pair, forward, load_checkpoint, save_checkpoint, ForwardOptions, Model};
use crate::optim::{train, TrainConfig, TrainPair};
use crate::synth::{read_dataset, write_dataset, GenConfig, Subset};
use crate::tensor::{write_fixture, Tensor};
use crate::graph::Graph;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "motionmag", version, about = "Video motion magnification with sparse channel attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of (reference, query, ground truth) triples.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Magnify a frame pair or a frame sequence with a trained checkpoint.
    Magnify(MagnifyArgs),
    /// Score predicted frames against ground truth.
    Eval(EvalArgs),
    /// Verify every backward rule against finite differences in 64-bit mode.
    Gradcheck(GradcheckArgs),
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number"));
    Ok((num(lo)?, num(hi)?))
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// I (clean), II (shot noise) or III (blur).
    #[arg(long, default_value = "I", value_parser = |s: &str| s.parse::<Subset>().map_err(|e| e.to_string()))]
    pub subset: Subset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Magnification factors are drawn from (lo, hi].
    #[arg(long, default_value = "0,10", value_parser = parse_range)]
    pub alpha_range: (f64, f64),
    #[arg(long, default_value = "3,30", value_parser = parse_range)]
    pub lambda_range: (f64, f64),
    #[arg(long, default_value = "3,30", value_parser = parse_range)]
    pub sigma_range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EdgeArg {
    Log,
    Sobel,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat key = value training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; the loss log goes next to it with a `.log` extension.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Masked attention logits become 0 instead of -inf.
    #[arg(long)]
    pub mask_zero: bool,
    #[arg(long)]
    pub no_phase2_filter: bool,
    #[arg(long)]
    pub no_phase3_filter: bool,
    #[arg(long, value_enum)]
    pub edge: Option<EdgeArg>,
    #[arg(long)]
    pub topk: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Every frame against frame 0.
    Static,
    /// Consecutive frame pairs.
    Dynamic,
}

#[derive(Debug, Args)]
pub struct MagnifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = Mode::Static)]
    pub mode: Mode,
    #[arg(long = "ref", requires = "query", conflicts_with = "frames")]
    pub reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    pub query: Option<PathBuf>,
    /// Directory of same-size PPM frames, processed in file-name order.
    #[arg(long, required_unless_present = "reference")]
    pub frames: Option<PathBuf>,
    /// Output frame for a pair, output directory for a sequence.
    #[arg(long)]
    pub out: PathBuf,
    /// Write every intermediate tensor of the forward pass as a fixture.
    #[arg(long)]
    pub dump_trace: Option<PathBuf>,
    #[arg(long)]
    pub mask_zero: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted frame or directory of frames.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth frame or directory of frames.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also check the full pipeline on the reduced model configuration.
    #[arg(long)]
    pub reduced_config: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Corrupt the backward rule of the named operation.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::Config(_) | Error::InvalidArgument { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.command {
        Command::Gen(a) => cmd_gen(&a, stdout).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(&a, stdout).map(|_| EXIT_OK),
        Command::Magnify(a) => cmd_magnify(&a, stdout).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(&a, stdout).map(|_| EXIT_OK),
        Command::Gradcheck(a) => cmd_gradcheck(&a, stdout),
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = GenConfig {
        size: a.size,
        subset: a.subset,
        alpha_range: a.alpha_range,
        lambda_range: a.lambda_range,
        sigma_range: a.sigma_range,
        force_alpha: None,
        force_velocity: None,
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let rows = write_dataset(&a.out, a.count, a.seed, &cfg)?;
    writeln!(out, "wrote {} samples ({} frames) to {}", rows.len(), 3 * rows.len(), a.out.display()).map_err(out_err)
}

/// Training configuration after applying command-line overrides.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iters {
        cfg.iterations = n;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if a.mask_zero {
        cfg.mask_fill = MaskFill::Zero;
    }
    if a.no_phase2_filter {
        cfg.model.n1 = 0;
    }
    if a.no_phase3_filter {
        cfg.model.n2 = 0;
    }
    if let Some(e) = a.edge {
        cfg.weights.edge_variant = match e {
            EdgeArg::Log => EdgeVariant::Log,
            EdgeArg::Sobel => EdgeVariant::Sobel,
        };
    }
    if let Some(k) = a.topk {
        cfg.model.topk = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = train_config(a)?;
    let pairs: Vec<TrainPair> = read_dataset(&a.data)?.iter().map(TrainPair::from_triple).collect();
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log"));
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut model = Model::init(cfg.model, cfg.init_seed)?;
    info!("training {} parameters on {} pairs for {} iterations", model.params.numel(), pairs.len(), cfg.iterations);
    let res = train(&cfg, &mut model, &pairs, |iter, rec, m| {
        writeln!(log, "{}", rec.log_line(iter)).map_err(|e| Error::io(&log_path, e))?;
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(m, &a.out)?;
        }
        Ok(())
    });
    // The model holds the last completed step either way.
    save_checkpoint(&model, &a.out)?;
    let log_records = res?;
    if let Some(last) = log_records.last() {
        writeln!(out, "final {}", last.log_line(log_records.len() - 1)).map_err(out_err)?;
    }
    writeln!(out, "checkpoint {}", a.out.display()).map_err(out_err)
}

/// PPM files of a directory in file-name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")) {
            frames.push(p);
        }
    }
    frames.sort();
    Ok(frames)
}

fn dump_trace(g: &Graph<f32>, trace: &crate::model::ForwardTrace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, v) in trace.named() {
        let path = dir.join(format!("{name}.tnsr"));
        let mut bytes = Vec::new();
        write_fixture(g.value(v), &mut bytes).expect("in-memory write");
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One magnified frame in `[0, 1]`, optionally dumping the trace.
fn magnify_pair(
    model: &Model<f32>,
    reference: &Tensor<f32>,
    query: &Tensor<f32>,
    alpha: f64,
    opts: ForwardOptions,
    dump: Option<&Path>,
) -> Result<Tensor<f32>> {
    check_frame_pair(reference, query)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false)?;
    let r = g.constant(to_model_range(reference));
    let q = g.constant(to_model_range(query));
    let trace = forward(&mut g, r, q, alpha, &vars, opts)?;
    if let Some(dir) = dump {
        dump_trace(&g, &trace, dir)?;
    }
    Ok(from_model_range(g.value(trace.output)))
}

pub fn cmd_magnify(a: &MagnifyArgs, out: &mut dyn Write) -> Result<()> {
    if !a.alpha.is_finite() || a.alpha < 0.0 {
        return Err(Error::arg("magnify", format!("--alpha must be finite and non-negative, got {}", a.alpha)));
    }
    let model = load_checkpoint(&a.ckpt)?;
    let opts = ForwardOptions { mask_fill: if a.mask_zero { MaskFill::Zero } else { MaskFill::NegInf } };
    if let (Some(r), Some(q)) = (&a.reference, &a.query) {
        let frame = magnify_pair(&model, &read_ppm(r)?, &read_ppm(q)?, a.alpha, opts, a.dump_trace.as_deref())?;
        write_ppm(&frame, &a.out)?;
        return writeln!(out, "wrote {}", a.out.display()).map_err(out_err);
    }
    let dir = a.frames.as_ref().expect("clap enforces --frames or --ref/--query");
    let paths = list_frames(dir)?;
    if paths.len() < 2 {
        return Err(Error::Dataset(format!("{}: need at least two frames, found {}", dir.display(), paths.len())));
    }
    let frames = paths.iter().map(read_ppm).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for t in 1..frames.len() {
        let reference = match a.mode {
            Mode::Static => &frames[0],
            Mode::Dynamic => &frames[t - 1],
        };
        let dump = a.dump_trace.as_ref().map(|d| d.join(format!("{t:05}")));
        let frame = magnify_pair(&model, reference, &frames[t], a.alpha, opts, dump.as_deref())?;
        write_ppm(&frame, a.out.join(format!("{t:05}.ppm")))?;
    }
    writeln!(out, "wrote {} frames to {}", frames.len() - 1, a.out.display()).map_err(out_err)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (pred, gt) = if a.pred.is_dir() {
        (list_frames(&a.pred)?, list_frames(&a.gt)?)
    } else {
        (vec![a.pred.clone()], vec![a.gt.clone()])
    };
    if pred.len() != gt.len() {
        return Err(Error::Dataset(format!("{} predicted frames but {} ground-truth frames", pred.len(), gt.len())));
    }
    let pairs = pred
        .iter()
        .zip(&gt)
        .map(|(p, g)| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            PairMetrics::compute(name, &read_ppm(p)?, &read_ppm(g)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::new(pairs)?;
    fs::write(&a.report, report.to_json()).map_err(|e| Error::io(&a.report, e))?;
    let agg = &report.aggregate;
    writeln!(out, "pairs {} rmse {:.6} psnr {:.4} ssim {:.6}", agg.count, agg.rmse, agg.psnr, agg.ssim).map_err(out_err)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let fault: Option<&'static str> = a.inject_fault.clone().map(|s| &*Box::leak(s.into_boxed_str()));
    let results: Vec<GroupResult> = run_suite(a.seed, a.reduced_config, CheckOptions { fault });
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{:<22} {:>12.3e} <= {:.0e}  {verdict}", r.group, r.max_rel_err, r.tolerance).map_err(out_err)?;
    }
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&results).expect("plain data serializes") + "\n";
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(if results.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_NUMERICAL })
}
