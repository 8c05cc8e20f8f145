//! `gsvr`: encode videos into GSVR containers and decode them back.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gsvr_core::codec::ImageCodec;
use gsvr_core::deform::FieldMode;
use gsvr_core::pipeline::{
    benchmark_decode, encode_video, plan_gops, ContainerSummary, Decoder, EncodeConfig,
    GaussianBudget, Slicing, DEFAULT_EPOCHS, DEFAULT_GOP_THRESHOLD, DEFAULT_PARAM_BUDGET,
};
use gsvr_core::slicer::{calibrate_threshold, write_plan_csv, MotionEstimator, SliceLimits};
use gsvr_core::train::TrainConfig;
use gsvr_core::video::{frame_file_name, load_frames, write_frames, write_png, VideoBuffer};
use gsvr_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "gsvr",
    version,
    about = "Video codec built on deformable 2D Gaussians"
)]
struct Cli {
    /// Worker threads for training, decoding and motion estimation
    /// [default: available cores]
    #[arg(long, global = true, env = "GSVR_THREADS", value_name = "T")]
    threads: Option<usize>,

    /// Log level: error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model per GOP and write a GSVR container
    Encode(EncodeArgs),
    /// Render frames from a container to PNG files
    Decode(DecodeArgs),
    /// Render at fractional frame positions
    Interpolate(InterpolateArgs),
    /// Measure decode speed (deformation and rendering only)
    Bench(BenchArgs),
    /// Print the header, GOP table and rate figures of a container
    Inspect(InspectArgs),
    /// Print the GOP plan for a video without training
    Slice(SliceArgs),
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Directory of numbered PNG frames, or a raw planar file with a JSON
    /// sidecar
    #[arg(long, value_name = "DIR")]
    input: PathBuf,

    /// Center-crop every frame to WxH before anything else
    #[arg(long, value_name = "WxH")]
    crop: Option<Crop>,
}

#[derive(Args, Debug)]
struct SlicingArgs {
    /// Accumulated motion that closes a GOP; each transition adds the mean of
    /// |u| and |v| over its flow field [default: 8]
    #[arg(long, value_name = "X", conflicts_with_all = ["gop_fixed", "gop_count"])]
    gop_threshold: Option<f64>,

    /// Fixed GOP length in frames instead of adaptive slicing
    #[arg(long, value_name = "L", conflicts_with = "gop_count")]
    gop_fixed: Option<usize>,

    /// Adaptive slicing with the threshold chosen to give this many GOPs
    #[arg(long, value_name = "N")]
    gop_count: Option<usize>,

    /// Directory of `.flo` files (one per frame transition) used instead of
    /// built-in block matching
    #[arg(long, value_name = "DIR")]
    flow_dir: Option<PathBuf>,

    /// Shortest GOP adaptive slicing may produce
    #[arg(long, value_name = "L", default_value_t = SliceLimits::default().min)]
    gop_min: usize,

    /// Longest GOP adaptive slicing may produce
    #[arg(long, value_name = "L", default_value_t = SliceLimits::default().max)]
    gop_max: usize,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[command(flatten)]
    source: SourceArgs,

    /// Output container
    #[arg(long, value_name = "FILE")]
    output: PathBuf,

    /// Gaussians per GOP; overrides --param-budget
    #[arg(long, value_name = "N")]
    gaussians: Option<usize>,

    /// Total parameters (Gaussians and planes) shared by all GOPs in
    /// proportion to their length
    #[arg(long, value_name = "P", default_value_t = DEFAULT_PARAM_BUDGET)]
    param_budget: usize,

    /// Training steps per GOP; overrides --epochs
    #[arg(long, value_name = "K", conflicts_with = "epochs")]
    iters: Option<usize>,

    /// Training steps per GOP as passes over its frames
    #[arg(long, value_name = "E", default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,

    /// Quantization-aware fine-tuning steps per GOP
    #[arg(long, value_name = "K2", default_value_t = TrainConfig::default().qat_iterations)]
    qat_iters: usize,

    #[command(flatten)]
    slicing: SlicingArgs,

    /// Random seed; GOP i uses seed + i
    #[arg(long, value_name = "S", default_value_t = 0)]
    seed: u64,

    /// Deformation field: hybrid, plane (tri-plane only) or poly
    /// (polynomial only)
    #[arg(long, value_enum, default_value_t = ModeArg::Hybrid)]
    mode: ModeArg,

    /// Storage for 8/16-bit channel grids
    #[arg(long, value_enum, default_value_t = CodecArg::Png)]
    codec: CodecArg,

    /// Learning rate for Gaussian positions
    #[arg(long, value_name = "LR", default_value_t = TrainConfig::default().lr_position)]
    lr_position: f64,

    /// Learning rate for every other parameter, planes included
    #[arg(long, value_name = "LR", default_value_t = TrainConfig::default().lr_other)]
    lr_other: f64,

    /// Train GOPs concurrently
    #[arg(long)]
    parallel_gops: bool,

    /// Per-GOP metrics CSV (PSNR, size, timing) with a final `all` row
    #[arg(long, value_name = "CSV")]
    metrics: Option<PathBuf>,

    /// Loss and PSNR for every training step as CSV
    #[arg(long, value_name = "CSV")]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Input container
    #[arg(long, value_name = "FILE")]
    input: PathBuf,

    /// Output directory for `frame_NNNNN.png` files
    #[arg(long, value_name = "DIR")]
    output: PathBuf,

    /// Inclusive frame range `a..b` [default: all frames]
    #[arg(long, value_name = "a..b")]
    frames: Option<FrameRange>,

    /// PNG bit depth, 8 or 16
    #[arg(long, value_name = "BITS", default_value_t = 16, value_parser = parse_depth)]
    bit_depth: u8,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    /// Input container
    #[arg(long, value_name = "FILE")]
    input: PathBuf,

    /// Frame position on the source timeline, e.g. 4.5 is halfway between
    /// frames 4 and 5
    #[arg(
        long,
        value_name = "FLOAT",
        required_unless_present = "factor",
        conflicts_with = "factor"
    )]
    t: Option<f64>,

    /// Render the whole clip at FACTOR times the frame rate
    #[arg(long, value_name = "FACTOR")]
    factor: Option<usize>,

    /// PNG file with --t, directory with --factor
    #[arg(long, value_name = "PATH")]
    output: PathBuf,

    /// PNG bit depth, 8 or 16
    #[arg(long, value_name = "BITS", default_value_t = 16, value_parser = parse_depth)]
    bit_depth: u8,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Input container
    #[arg(long, value_name = "FILE")]
    input: PathBuf,

    /// Passes over all frames
    #[arg(long, value_name = "N", default_value_t = 100)]
    passes: usize,

    /// Per-pass FPS as CSV
    #[arg(long, value_name = "CSV")]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Input container
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct SliceArgs {
    #[command(flatten)]
    source: SourceArgs,

    #[command(flatten)]
    slicing: SlicingArgs,

    /// Per-transition motion degree as CSV
    #[arg(long, value_name = "CSV")]
    trace: Option<PathBuf>,

    /// GOP plan as CSV
    #[arg(long, value_name = "CSV")]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Hybrid,
    Plane,
    Poly,
}

impl From<ModeArg> for FieldMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hybrid => FieldMode::Hybrid,
            ModeArg::Plane => FieldMode::PlaneOnly,
            ModeArg::Poly => FieldMode::PolyOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CodecArg {
    Png,
    Raw,
}

impl From<CodecArg> for ImageCodec {
    fn from(c: CodecArg) -> Self {
        match c {
            CodecArg::Png => ImageCodec::Png,
            CodecArg::Raw => ImageCodec::Raw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Crop(usize, usize);

impl FromStr for Crop {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or("expected WxH, e.g. 640x360")?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Crop(parse(w)?, parse(h)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct FrameRange(usize, usize);

impl FromStr for FrameRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once("..").ok_or("expected a..b, e.g. 5..9")?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty range {a}..{b}"));
        }
        Ok(FrameRange(a, b))
    }
}

fn parse_depth(s: &str) -> Result<u8, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err("bit depth must be 8 or 16".into()),
    }
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = if e.is_divergence() {
            (EXIT_DIVERGENCE, "divergence")
        } else if e.is_io()
            || matches!(
                e.root(),
                Error::Decode { .. } | Error::UnsupportedVersion { .. } | Error::Format(_)
            )
        {
            (EXIT_IO, "io")
        } else {
            (EXIT_USAGE, "usage")
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        kind: "usage",
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

type CliResult<T = ()> = Result<T, Failure>;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_failure(path, e))
}

fn write_csv(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> CliResult {
    let mut out = create(path)?;
    write(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| io_failure(path, e))
}

fn load(source: &SourceArgs) -> CliResult<VideoBuffer> {
    let video = load_frames(&source.input)?;
    let video = match source.crop {
        Some(Crop(w, h)) => video.center_cropped(w, h)?,
        None => video,
    };
    let (w, h) = video.dimensions();
    log::info!(
        "{}: {} frames of {w}x{h}",
        source.input.display(),
        video.len()
    );
    Ok(video)
}

fn read_container(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_failure(path, e))
}

fn slicing(args: &SlicingArgs, video: &VideoBuffer) -> CliResult<(Slicing, MotionEstimator)> {
    let limits = SliceLimits {
        min: args.gop_min,
        max: args.gop_max,
    };
    let estimator = match &args.flow_dir {
        Some(dir) => MotionEstimator::FlowDir(dir.clone()),
        None => MotionEstimator::default(),
    };
    let slicing = match (args.gop_fixed, args.gop_count) {
        (Some(len), _) => Slicing::Fixed(len),
        (None, Some(count)) => {
            let trace = estimator.trace(&video.frames)?;
            let threshold = calibrate_threshold(&trace, count, limits)?;
            log::info!("threshold {threshold:.4} gives {count} GOPs");
            Slicing::Adaptive { threshold, limits }
        }
        (None, None) => Slicing::Adaptive {
            threshold: args.gop_threshold.unwrap_or(DEFAULT_GOP_THRESHOLD),
            limits,
        },
    };
    Ok((slicing, estimator))
}

fn encode(args: &EncodeArgs) -> CliResult {
    let video = load(&args.source)?;
    let (slicing, estimator) = slicing(&args.slicing, &video)?;
    let config = EncodeConfig {
        train: TrainConfig {
            iterations: args.iters.unwrap_or(0),
            qat_iterations: args.qat_iters,
            seed: args.seed,
            mode: args.mode.into(),
            lr_position: args.lr_position,
            lr_other: args.lr_other,
            ..Default::default()
        },
        epochs: if args.iters.is_some() {
            None
        } else {
            Some(args.epochs)
        },
        budget: match args.gaussians {
            Some(n) => GaussianBudget::PerGop(n),
            None => GaussianBudget::Params(args.param_budget),
        },
        slicing,
        estimator,
        codec: args.codec.into(),
        parallel_gops: args.parallel_gops,
        ..Default::default()
    };
    let out = encode_video(&video.frames, &config)?;
    create(&args.output)?
        .write_all(&out.bytes)
        .map_err(|e| io_failure(&args.output, e))?;
    if let Some(path) = &args.metrics {
        write_csv(path, |w| out.write_metrics_csv(w))?;
    }
    if let Some(path) = &args.history {
        write_csv(path, |w| out.write_history_csv(w))?;
    }
    println!(
        "{}: {} GOPs, {} gaussians, {} bytes, {:.4} bpp, {:.3} bits/param, {:.2} dB",
        args.output.display(),
        out.plan.len(),
        out.container.gaussian_count(),
        out.bytes.len(),
        out.bpp(),
        out.bits_per_param(),
        out.psnr
    );
    Ok(())
}

fn decode(args: &DecodeArgs) -> CliResult {
    let decoder = Decoder::from_bytes(&read_container(&args.input)?)?;
    let last = decoder.frame_count() - 1;
    let FrameRange(first, end) = args.frames.unwrap_or(FrameRange(0, last));
    if end > last {
        return Err(usage(format!("frame {end} out of range 0..{last}")));
    }
    let frames = decoder.decode_range(first, end)?;
    let written = write_frames(&frames, &args.output, first, args.bit_depth)?;
    println!(
        "wrote {} frames to {}",
        written.len(),
        args.output.display()
    );
    Ok(())
}

fn interpolate(args: &InterpolateArgs) -> CliResult {
    let decoder = Decoder::from_bytes(&read_container(&args.input)?)?;
    match (args.t, args.factor) {
        (Some(t), _) => {
            let frame = decoder.render_at(t)?;
            if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            }
            write_png(&frame, &args.output, args.bit_depth)?;
            println!("wrote position {t} to {}", args.output.display());
        }
        (None, Some(factor)) => {
            let frames = decoder.interpolate_sequence(factor)?;
            let written = write_frames(&frames, &args.output, 0, args.bit_depth)?;
            println!(
                "wrote {} frames ({factor}x) to {}",
                written.len(),
                args.output.display()
            );
        }
        (None, None) => return Err(usage("pass --t or --factor")),
    }
    Ok(())
}

fn bench(args: &BenchArgs, threads: usize) -> CliResult {
    let decoder = Decoder::from_bytes(&read_container(&args.input)?)?;
    let report = benchmark_decode(&decoder, args.passes, threads)?;
    println!(
        "{:.2} +/- {:.2} FPS over {} passes of {} frames ({}x{}, {} gaussians, {} threads)",
        report.mean_fps,
        report.std_fps,
        report.passes,
        report.frames_per_pass,
        report.width,
        report.height,
        report.gaussians,
        report.threads
    );
    if let Some(path) = &args.csv {
        write_csv(path, |w| report.write_csv(w))?;
    }
    Ok(())
}

fn inspect(args: &InspectArgs) -> CliResult {
    let bytes = read_container(&args.input)?;
    let summary = ContainerSummary::from_bytes(&bytes)?;
    let info = &summary.info;
    println!("file:            {}", args.input.display());
    println!("version:         {}.{}", info.version.0, info.version.1);
    println!("frame size:      {}x{}", info.width, info.height);
    println!("frames:          {}", info.frame_count);
    println!("codec:           {}", info.codec.name());
    println!("gops:            {}", info.gops.len());
    println!("total bytes:     {}", info.total_bytes);
    println!("parameters:      {}", summary.param_count);
    println!("bpp:             {:.6}", summary.bpp());
    println!("bits per param:  {:.6}", summary.bits_per_param());
    println!();
    println!(
        "{:>4} {:>6} {:>6} {:>6} {:>10} {:>10}",
        "gop", "first", "last", "frames", "gaussians", "bytes"
    );
    for (i, (&(first, last, len), n)) in info.gops.iter().zip(&summary.gaussians).enumerate() {
        println!(
            "{i:>4} {first:>6} {last:>6} {:>6} {n:>10} {len:>10}",
            last - first + 1
        );
    }
    Ok(())
}

fn slice(args: &SliceArgs) -> CliResult {
    let video = load(&args.source)?;
    let (slicing, estimator) = slicing(&args.slicing, &video)?;
    let (plan, trace) = plan_gops(&video.frames, &slicing, &estimator)?;
    let trace = match trace {
        Some(t) => t,
        None => estimator.trace(&video.frames)?,
    };
    println!(
        "{:>4} {:>6} {:>6} {:>6} {:>10}",
        "gop", "first", "last", "frames", "motion"
    );
    for (i, &(first, last)) in plan.ranges().iter().enumerate() {
        let motion: f64 = trace.values()[first..last].iter().sum();
        println!(
            "{i:>4} {first:>6} {last:>6} {:>6} {motion:>10.3}",
            last - first + 1
        );
    }
    println!(
        "{} GOPs, mean length {:.1}, total motion {:.3}",
        plan.len(),
        plan.frame_count() as f64 / plan.len() as f64,
        trace.total()
    );
    if let Some(path) = &args.csv {
        write_csv(path, |w| write_plan_csv(&plan, w))?;
    }
    if let Some(path) = &args.trace {
        write_csv(path, |w| {
            writeln!(w, "transition,from,to,motion")?;
            for (i, d) in trace.values().iter().enumerate() {
                writeln!(
                    w,
                    "{i},{},{},{d:.6}",
                    frame_file_name(i),
                    frame_file_name(i + 1)
                )?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    let threads = match cli.threads {
        Some(0) => return Err(usage("--threads must be at least 1")),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| usage(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Bench(a) => bench(a, threads),
        Command::Inspect(a) => inspect(a),
        Command::Slice(a) => slice(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gsvr: error[{}]: {}", f.kind, f.message);
            ExitCode::from(f.code)
        }
    }
}
