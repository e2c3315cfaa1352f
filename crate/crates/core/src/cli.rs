//! Command implementations behind the `mau` binary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_moving_shapes, SequenceDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::generator::{frame_at, predict, predict_sequence, GeneratorConfig, SamplingMask};
use crate::graph::Graph;
use crate::loss::AblationMode;
use crate::metrics::{evaluate_sequences, MetricReport};
use crate::params::ParamStore;
use crate::pgm::write_pgm;
use crate::tensor::Tensor;
use crate::train::{load_generator, matching_discriminator, StepStats, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Sequences predicted per forward pass during evaluation.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "mau", version, about = "Multi-attention unit video prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-shapes dataset.
    GenData(GenDataArgs),
    /// Train generator and discriminator.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Dump one sequence's frames and predictions as PGM images.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "num-seq", default_value_t = 8)]
    pub num_seq: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub shapes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run configuration supplying the remaining generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    #[arg(long = "max-iters")]
    pub max_iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AblationMode>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "metrics-out")]
    pub metrics_out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "seq-index")]
    pub seq_index: usize,
    #[arg(long = "dump-frames")]
    pub dump_frames: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Stage { source, .. } => exit_code(source),
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn load_dataset(path: &Path) -> Result<SequenceDataset> {
    SequenceDataset::load(path).map_err(|e| with_path(e, path))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| with_path(e, path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| with_path(e.into(), path))
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<String> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p).map_err(|e| with_path(e, p))?.synth,
        None => SynthConfig::default(),
    };
    let cfg = SynthConfig {
        num_sequences: args.num_seq,
        frames_per_sequence: args.frames,
        frame_size: args.size,
        num_shapes: args.shapes,
        seed: args.seed,
        ..base
    };
    cfg.validate()?;
    let ds = generate_moving_shapes(&cfg)?;
    ds.save(&args.out).map_err(|e| with_path(e, &args.out))?;
    Ok(format!(
        "wrote {} sequences ({} frames, {}x{}) to {}",
        cfg.num_sequences,
        cfg.frames_per_sequence,
        cfg.frame_size,
        cfg.frame_size,
        args.out.display()
    ))
}

/// Checks that `cfg` can run on `ds` before any compute.
pub fn check_geometry(cfg: &GeneratorConfig, ds: &SequenceDataset) -> Result<()> {
    let [c, h, w] = ds.frame_shape();
    if [c, h, w] != cfg.frame_shape() {
        return Err(Error::geometry(
            "dataset",
            format!("frames are {c}x{h}x{w} but the model expects {:?}", cfg.frame_shape()),
        ));
    }
    if ds.frames_per_sequence() < cfg.seq_len() {
        return Err(Error::geometry(
            "dataset",
            format!("{} frames per sequence, model needs {}", ds.frames_per_sequence(), cfg.seq_len()),
        ));
    }
    Ok(())
}

/// The first `len` frames of every sequence in a 5-D block.
fn leading_frames(frames: &Tensor, len: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s[1] == len {
        return Ok(frames.clone());
    }
    let per = s[2] * s[3] * s[4];
    let mut data = Vec::with_capacity(s[0] * len * per);
    for n in 0..s[0] {
        let off = n * s[1] * per;
        data.extend_from_slice(&frames.data()[off..off + len * per]);
    }
    Tensor::new(&[s[0], len, s[2], s[3], s[4]], data)
}

/// Pure autoregressive predictions for every sequence of `ds`, returned
/// alongside the matching ground truth.
pub fn predict_dataset(params: &ParamStore, cfg: &GeneratorConfig, ds: &SequenceDataset) -> Result<(Tensor, Tensor)> {
    check_geometry(cfg, ds)?;
    let truth = leading_frames(ds.frames(), cfg.seq_len())?;
    let mut out = Vec::with_capacity(truth.numel());
    let n = ds.len();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let chunk = leading_frames(&ds.gather(&idx)?, cfg.seq_len())?;
        let mask = SamplingMask::constant(false, cfg.horizon_len, idx.len());
        out.extend_from_slice(predict(params, &chunk, &mask, cfg)?.data());
    }
    Ok((Tensor::new(truth.shape(), out)?, truth))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricReport> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (cfg, params) = load_generator(&ckpt)?;
    let ds = load_dataset(&args.data)?;
    check_geometry(&cfg, &ds)?;
    let (pred, truth) = predict_dataset(&params, &cfg, &ds)?;
    let report = evaluate_sequences(&pred, &truth, cfg.context_len)?;
    report.write_csv(&args.metrics_out).map_err(|e| with_path(e, &args.metrics_out))?;
    Ok(report)
}

fn write_frame(dir: &Path, name: &str, frame: &Tensor) -> Result<()> {
    let s = frame.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let path = dir.join(name);
    write_pgm(&path, &frame.data()[..h * w], w, h).map_err(|e| with_path(e, &path))
}

/// Writes context, ground-truth horizon and predicted horizon frames of one
/// sequence. Returns the number of images written.
pub fn cmd_predict(args: &PredictArgs) -> Result<usize> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (cfg, params) = load_generator(&ckpt)?;
    let ds = load_dataset(&args.input)?;
    check_geometry(&cfg, &ds)?;
    if args.seq_index >= ds.len() {
        return Err(Error::InvalidArgument(format!(
            "--seq-index {} out of range for {} sequences",
            args.seq_index,
            ds.len()
        )));
    }
    let x = leading_frames(&ds.gather(&[args.seq_index])?, cfg.seq_len())?;
    let pred = predict(&params, &x, &SamplingMask::constant(false, cfg.horizon_len, 1), &cfg)?;
    create_dir(&args.dump_frames)?;
    let t = cfg.context_len;
    let mut count = 0;
    for i in 0..t {
        write_frame(&args.dump_frames, &format!("input_{i:02}.pgm"), &frame_at(&x, i)?)?;
        count += 1;
    }
    for k in 0..cfg.horizon_len {
        write_frame(&args.dump_frames, &format!("gt_{k:02}.pgm"), &frame_at(&x, t + k)?)?;
        write_frame(&args.dump_frames, &format!("gen_{k:02}.pgm"), &frame_at(&pred, t + k)?)?;
        count += 2;
    }
    Ok(count)
}

/// Channel mean of a `1×C×h×w` map, min-max normalised and upsampled by
/// pixel repetition to `height×width`.
pub fn attention_image(att: &Tensor, height: usize, width: usize) -> Result<Vec<f64>> {
    let [_, c, h, w] = att.dims4("attention_image")?;
    let mut mean = vec![0.0; h * w];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(&att.data()[ch * h * w..(ch + 1) * h * w]) {
            *m += v / c as f64;
        }
    }
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm: Vec<f64> = mean.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
    Ok((0..height * width)
        .map(|i| {
            let (r, q) = (i / width, i % width);
            norm[(r * h / height) * w + q * w / width]
        })
        .collect())
}

/// Panel for sequence 0 of `ds`: context inputs, ground-truth and generated
/// horizon frames, and first-layer pixel attention at each horizon step.
pub fn write_panel(dir: &Path, params: &ParamStore, cfg: &GeneratorConfig, ds: &SequenceDataset) -> Result<()> {
    create_dir(dir)?;
    let x = leading_frames(&ds.gather(&[0])?, cfg.seq_len())?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mask = SamplingMask::constant(false, cfg.horizon_len, 1);
    let rollout = predict_sequence(&mut g, &x, &mask, &bound, cfg)?;
    let t = cfg.context_len;
    for i in 0..t {
        write_frame(dir, &format!("input_{i:02}.pgm"), &frame_at(&x, i)?)?;
    }
    for k in 0..cfg.horizon_len {
        write_frame(dir, &format!("gt_{k:02}.pgm"), &frame_at(&x, t + k)?)?;
        write_frame(dir, &format!("gen_{k:02}.pgm"), g.value(rollout.predictions[t + k]))?;
        // Slot t+k is produced by step t+k-1.
        let att = attention_image(g.value(rollout.pixel_attention[t + k - 1]), cfg.frame_height, cfg.frame_width)?;
        let path = dir.join(format!("att_{k:02}.pgm"));
        write_pgm(&path, &att, cfg.frame_width, cfg.frame_height).map_err(|e| with_path(e, &path))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<StepStats>,
    pub final_checkpoint: PathBuf,
    pub config: RunConfig,
}

/// Keeps the header and rows with `iter < iteration`.
fn truncate_loss_csv(path: &Path, iteration: u64) -> Result<()> {
    let mut kept = vec![StepStats::CSV_HEADER.to_string()];
    if path.exists() {
        let f = File::open(path).map_err(|e| with_path(e.into(), path))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line?;
            let it: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
            match it {
                Some(i) if i < iteration => kept.push(line),
                Some(_) => {}
                None => return Err(Error::Malformed(format!("{}: bad row {line:?}", path.display()))),
            }
        }
    }
    fs::write(path, kept.join("\n") + "\n").map_err(|e| with_path(e.into(), path))
}

pub fn resolve_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(|e| with_path(e, p))?,
        None => RunConfig::default(),
    };
    if let Some(n) = args.max_iters {
        cfg.train.max_iters = n;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.train.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs training, writing `config.txt`, `loss.csv`, periodic `panels/` and
/// `ckpt_<iter>.mauc` files, and `final.mauc` into the output directory.
/// Log lines go to `log`.
pub fn cmd_train(args: &TrainArgs, log: &mut dyn Write) -> Result<TrainSummary> {
    let cfg = resolve_run_config(args)?;
    let ds = load_dataset(&args.data)?;
    let mut gen_cfg = cfg.generator_for(ds.frame_shape());
    gen_cfg.context_len = ds.context_len();
    gen_cfg.horizon_len = ds.horizon_len();
    gen_cfg.validate()?;
    check_geometry(&gen_cfg, &ds)?;
    if cfg.train.batch_size > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "batch_size {} exceeds the {} sequences in {}",
            cfg.train.batch_size,
            ds.len(),
            args.data.display()
        )));
    }
    let ds = if ds.frames_per_sequence() == gen_cfg.seq_len() {
        ds
    } else {
        SequenceDataset::new(leading_frames(ds.frames(), gen_cfg.seq_len())?, ds.context_len(), ds.horizon_len())?
    };

    create_dir(&args.out_dir)?;
    let cfg_path = args.out_dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| with_path(e.into(), &cfg_path))?;

    let mut trainer = match &args.resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(&load_checkpoint(p)?, cfg.train.clone())?;
            if t.gen_cfg != gen_cfg {
                return Err(Error::geometry(
                    "resume",
                    format!("checkpoint model {:?} does not match data and config {:?}", t.gen_cfg, gen_cfg),
                ));
            }
            t
        }
        None => Trainer::new(gen_cfg.clone(), matching_discriminator(&gen_cfg, cfg.disc_layers), cfg.train.clone())?,
    };

    let csv_path = args.out_dir.join("loss.csv");
    truncate_loss_csv(&csv_path, trainer.iteration)?;
    let mut csv = OpenOptions::new()
        .append(true)
        .open(&csv_path)
        .map_err(|e| with_path(e.into(), &csv_path))?;

    let mut history = Vec::new();
    let out_dir = args.out_dir.clone();
    let total = cfg.train.total_iters(ds.len());
    trainer.run(&ds, total, |tr, stats| {
        writeln!(log, "{}", stats.log_line())?;
        writeln!(csv, "{}", stats.csv_row())?;
        history.push(*stats);
        let done = tr.iteration;
        if cfg.plot_interval > 0 && done % cfg.plot_interval == 0 {
            write_panel(&out_dir.join("panels").join(format!("iter_{done:06}")), &tr.gen, &tr.gen_cfg, &ds)?;
        }
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < total {
            let path = out_dir.join(format!("ckpt_{done:06}.mauc"));
            tr.checkpoint().save(&path).map_err(|e| with_path(e, &path))?;
        }
        Ok(())
    })?;
    csv.flush()?;

    let final_checkpoint = args.out_dir.join("final.mauc");
    trainer
        .checkpoint()
        .save(&final_checkpoint)
        .map_err(|e| with_path(e, &final_checkpoint))?;
    Ok(TrainSummary {
        history,
        final_checkpoint,
        config: cfg,
    })
}

/// Parses `argv`, runs the command, and returns the process exit code.
pub fn run(argv: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|s| writeln!(out, "{s}").map_err(Error::from)),
        Command::Train(a) => cmd_train(a, out).map(|s| {
            writeln!(out, "final checkpoint {}", s.final_checkpoint.display()).map_err(Error::from)
        }),
        Command::Eval(a) => cmd_eval(a).map(|r| {
            let m = r.mean();
            writeln!(
                out,
                "frames={} mse={} mae={} ssim={} psnr={}",
                r.rows.len(),
                m.mse,
                m.mae,
                m.ssim,
                m.psnr
            )
            .map_err(Error::from)
        }),
        Command::Predict(a) => cmd_predict(a).map(|n| {
            writeln!(out, "wrote {n} frames to {}", a.dump_frames.display()).map_err(Error::from)
        }),
    }
    .and_then(|r| r);
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::NonFinite { iteration: 3 }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Truncated("x".into())), EXIT_IO);
        assert_eq!(exit_code(&Error::NonFinite { iteration: 1 }.in_stage("train")), EXIT_NUMERIC);
    }

    #[test]
    fn attention_image_is_normalised_and_upsampled() {
        let att = Tensor::new(&[1, 2, 2, 2], vec![0.0, 1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let img = attention_image(&att, 4, 4).unwrap();
        assert_eq!(img[0], 0.0);
        assert_eq!(img[1], 0.0);
        assert_eq!(img[2], 1.0 / 3.0);
        assert_eq!(img[15], 1.0);
        let flat = attention_image(&Tensor::zeros(&[1, 1, 2, 2]), 2, 2).unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(["mau".into(), "gen-data".into(), "--bogus".into()], &mut out, &mut err);
        assert_eq!(code, EXIT_USAGE);
        let code = run(["mau".into(), "--help".into()], &mut out, &mut err);
        assert_eq!(code, EXIT_OK);
    }
}
