//! Encode, decode, interpolate and benchmark whole videos.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::codec::{encode_container, inspect_container, GsvrContainer, ImageCodec};
use crate::deform::{deform, temporal_resolution, GopModel, CHANNELS, DEFAULT_SPATIAL_RES};
use crate::error::{Error, Result};
use crate::gaussian::PARAMS_PER_GAUSSIAN;
use crate::quant::{BitPlan, QuantizedGop};
use crate::raster::{render_with, Frame, RenderOptions};
use crate::slicer::{slice_fixed, slice_gops, GopPlan, MotionEstimator, MotionTrace, SliceLimits};
use crate::train::{
    evaluate, init_gop, qat_continue, train_gop, LossRecord, TrainConfig, TrainSample,
};

/// Default total parameter budget for the whole video.
pub const DEFAULT_PARAM_BUDGET: usize = 3_000_000;

/// Default training length: this many passes over each GOP's frames.
pub const DEFAULT_EPOCHS: usize = 300;

/// Default accumulated-motion threshold for adaptive slicing. It cuts the
/// 64-frame static-then-fast synthetic clip into two 32-frame GOPs; a
/// uniform one-pixel horizontal pan (0.5 per frame) closes one every 16.
pub const DEFAULT_GOP_THRESHOLD: f64 = 8.0;

/// How many Gaussians each GOP gets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GaussianBudget {
    /// The same count for every GOP.
    PerGop(usize),
    /// Total parameters (Gaussians and planes) shared in proportion to GOP
    /// length, capped at one Gaussian per pixel.
    Params(usize),
}

impl Default for GaussianBudget {
    fn default() -> Self {
        Self::Params(DEFAULT_PARAM_BUDGET)
    }
}

impl GaussianBudget {
    pub fn gaussians_for(
        &self,
        gop_frames: usize,
        total_frames: usize,
        width: usize,
        height: usize,
    ) -> usize {
        match *self {
            Self::PerGop(n) => n.max(1),
            Self::Params(budget) => {
                let share = budget as f64 * gop_frames as f64 / total_frames.max(1) as f64;
                let (long, short) = DEFAULT_SPATIAL_RES;
                let nt = temporal_resolution(gop_frames);
                let planes = CHANNELS * (long * short + long * nt + short * nt);
                let n = ((share - planes as f64) / PARAMS_PER_GAUSSIAN as f64).floor();
                (n.max(1.0) as usize).min(width * height).max(1)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Slicing {
    /// Accumulated motion threshold.
    Adaptive { threshold: f64, limits: SliceLimits },
    /// GOPs of a fixed number of frames.
    Fixed(usize),
    /// A precomputed plan.
    Plan(GopPlan),
}

impl Default for Slicing {
    fn default() -> Self {
        Self::Adaptive {
            threshold: DEFAULT_GOP_THRESHOLD,
            limits: SliceLimits::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeConfig {
    /// Training settings; `num_gaussians` is overridden per GOP by `budget`.
    pub train: TrainConfig,
    /// When set, each GOP trains for `epochs * frames` steps and
    /// `train.iterations` is ignored.
    pub epochs: Option<usize>,
    pub budget: GaussianBudget,
    pub slicing: Slicing,
    pub estimator: MotionEstimator,
    pub bits: BitPlan,
    pub codec: ImageCodec,
    /// Train GOPs concurrently instead of one after another.
    pub parallel_gops: bool,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            epochs: Some(DEFAULT_EPOCHS),
            budget: GaussianBudget::default(),
            slicing: Slicing::default(),
            estimator: MotionEstimator::default(),
            bits: BitPlan::default(),
            codec: ImageCodec::Png,
            parallel_gops: false,
        }
    }
}

/// Per-GOP encoder metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct GopReport {
    pub gop: usize,
    pub first: usize,
    pub last: usize,
    pub gaussians: usize,
    pub params: usize,
    /// Float model before quantization-aware tuning.
    pub float_psnr: f64,
    /// Dequantized model, i.e. what a decoder renders.
    pub quant_psnr: f64,
    pub train_seconds: f64,
    /// Float training, then quantization-aware tuning.
    pub history: Vec<LossRecord>,
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    pub container: GsvrContainer,
    pub bytes: Vec<u8>,
    pub plan: GopPlan,
    pub trace: Option<MotionTrace>,
    pub reports: Vec<GopReport>,
    /// PSNR of the pooled MSE of the decodable model over all frames.
    pub psnr: f64,
}

impl EncodeOutput {
    pub fn bpp(&self) -> f64 {
        self.bytes.len() as f64 * 8.0
            / (self.container.width * self.container.height * self.container.frame_count) as f64
    }

    pub fn bits_per_param(&self) -> f64 {
        self.bytes.len() as f64 * 8.0 / self.container.param_count() as f64
    }

    /// `gop,iteration,loss,psnr` rows; quantization-aware steps follow the
    /// float steps of each GOP.
    pub fn write_history_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "gop,iteration,loss,psnr")?;
        for r in &self.reports {
            for h in &r.history {
                writeln!(
                    out,
                    "{},{},{:.6e},{:.4}",
                    r.gop, h.iteration, h.loss, h.psnr
                )?;
            }
        }
        Ok(())
    }

    /// One row per GOP, then an `all` row with container totals.
    pub fn write_metrics_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "gop,first,last,frames,gaussians,params,float_psnr,quant_psnr,train_seconds,bpp,bits_per_param")?;
        for r in &self.reports {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.4},{:.4},{:.3},,",
                r.gop,
                r.first,
                r.last,
                r.last - r.first + 1,
                r.gaussians,
                r.params,
                r.float_psnr,
                r.quant_psnr,
                r.train_seconds
            )?;
        }
        let total_time: f64 = self.reports.iter().map(|r| r.train_seconds).sum();
        writeln!(
            out,
            "all,0,{},{},{},{},,{:.4},{:.3},{:.6},{:.6}",
            self.container.frame_count - 1,
            self.container.frame_count,
            self.container.gaussian_count(),
            self.container.param_count(),
            self.psnr,
            total_time,
            self.bpp(),
            self.bits_per_param()
        )
    }
}

/// Segments the video into GOPs according to `slicing`.
pub fn plan_gops(
    frames: &[Frame<f32>],
    slicing: &Slicing,
    estimator: &MotionEstimator,
) -> Result<(GopPlan, Option<MotionTrace>)> {
    match slicing {
        Slicing::Adaptive { threshold, limits } => {
            let trace = estimator.trace(frames)?;
            Ok((slice_gops(&trace, *threshold, *limits)?, Some(trace)))
        }
        Slicing::Fixed(len) => Ok((slice_fixed(frames.len(), *len, 2)?, None)),
        Slicing::Plan(plan) => {
            if plan.frame_count() != frames.len() {
                return Err(Error::InvalidParameter(format!(
                    "plan covers {} frames, video has {}",
                    plan.frame_count(),
                    frames.len()
                )));
            }
            Ok((plan.clone(), None))
        }
    }
}

/// Trains, tunes and quantizes one GOP.
pub fn encode_gop(
    frames: &[Frame<f32>],
    range: (usize, usize),
    index: usize,
    config: &EncodeConfig,
) -> Result<(QuantizedGop, GopReport)> {
    let start = Instant::now();
    let (w, h) = (frames[0].width(), frames[0].height());
    let len = range.1 - range.0 + 1;
    let train = TrainConfig {
        num_gaussians: config.budget.gaussians_for(len, frames.len(), w, h),
        seed: config.train.seed.wrapping_add(index as u64),
        iterations: config.epochs.map_or(config.train.iterations, |e| e * len),
        ..config.train.clone()
    };
    let samples: Vec<TrainSample<'_, f32>> = (range.0..=range.1)
        .map(|f| TrainSample::new(f as f64, &frames[f]))
        .collect();
    let model = init_gop::<f32>(&train, range, w, h)?;
    let mut trained = train_gop(model, &samples, &train)?;
    let mut history = std::mem::take(&mut trained.history);
    let float_psnr = evaluate(&trained.model, &samples, &train.render)?;
    let model = if train.qat_iterations > 0 {
        let tuned = qat_continue(trained, &samples, &train, &config.bits)?;
        let offset = history.len();
        history.extend(tuned.history.into_iter().map(|r| LossRecord {
            iteration: r.iteration + offset,
            ..r
        }));
        tuned.model
    } else {
        trained.model
    };
    let quantized = QuantizedGop::from_model(&model, &config.bits)?;
    let quant_psnr = evaluate(&quantized.dequantize(), &samples, &train.render)?;
    let report = GopReport {
        gop: index,
        first: range.0,
        last: range.1,
        gaussians: quantized.gaussian_count(),
        params: quantized.param_count(),
        float_psnr,
        quant_psnr,
        train_seconds: start.elapsed().as_secs_f64(),
        history,
    };
    log::info!(
        "GOP {index} frames {}..={}: {} gaussians, {:.2} dB float, {:.2} dB quantized",
        range.0,
        range.1,
        report.gaussians,
        float_psnr,
        quant_psnr
    );
    Ok((quantized, report))
}

/// Slice, train every GOP independently, fine-tune with quantization in the
/// loop, and pack the container.
pub fn encode_video(frames: &[Frame<f32>], config: &EncodeConfig) -> Result<EncodeOutput> {
    if frames.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    for f in &frames[1..] {
        frames[0].check_shape(f)?;
    }
    config.bits.validate()?;
    let (plan, trace) = plan_gops(frames, &config.slicing, &config.estimator)?;
    let run = |(i, &range): (usize, &(usize, usize))| {
        encode_gop(frames, range, i, config).map_err(|e| e.in_gop(i))
    };
    let results: Vec<(QuantizedGop, GopReport)> = if config.parallel_gops {
        plan.ranges()
            .par_iter()
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?
    } else {
        plan.ranges()
            .iter()
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?
    };
    let (gops, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let container = GsvrContainer {
        width: frames[0].width(),
        height: frames[0].height(),
        frame_count: frames.len(),
        codec: config.codec,
        gops,
    };
    let bytes = encode_container(&container)?;
    let decoder = Decoder::with_options(container.clone(), config.train.render);
    let decoded = decoder.decode_all()?;
    let psnr = crate::video::sequence_psnr(&decoded, frames)?;
    Ok(EncodeOutput {
        container,
        bytes,
        plan,
        trace,
        reports,
        psnr,
    })
}

/// Read-only decoder. Holds dequantized models and nothing trainable.
#[derive(Clone, Debug)]
pub struct Decoder {
    container: GsvrContainer,
    models: Vec<GopModel<f32>>,
    options: RenderOptions,
}

impl Decoder {
    pub fn new(container: GsvrContainer) -> Self {
        Self::with_options(container, RenderOptions::default())
    }

    pub fn with_options(container: GsvrContainer, options: RenderOptions) -> Self {
        let models = container
            .gops
            .iter()
            .map(QuantizedGop::dequantize)
            .collect();
        Self {
            container,
            models,
            options,
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::new(crate::codec::decode_container(bytes)?))
    }

    pub fn container(&self) -> &GsvrContainer {
        &self.container
    }

    pub fn models(&self) -> &[GopModel<f32>] {
        &self.models
    }

    pub fn frame_count(&self) -> usize {
        self.container.frame_count
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.container.width, self.container.height)
    }

    /// GOP whose range contains (possibly fractional) frame position `pos`.
    pub fn gop_at(&self, pos: f64) -> Option<usize> {
        self.models
            .iter()
            .position(|m| pos >= m.frame_range.0 as f64 && pos <= m.frame_range.1 as f64)
    }

    /// Renders one frame from its GOP alone, clamped to `[0, 1]`.
    pub fn decode_frame(&self, index: usize) -> Result<Frame<f32>> {
        if index >= self.frame_count() {
            return Err(Error::OutOfRange {
                what: "frame",
                value: index.to_string(),
                range: format!("0..{}", self.frame_count()),
            });
        }
        self.render_at(index as f64)
    }

    /// Renders at a fractional frame position. Positions between two GOPs
    /// repeat the last frame of the earlier GOP.
    pub fn render_at(&self, pos: f64) -> Result<Frame<f32>> {
        let last = (self.frame_count() - 1) as f64;
        let gop = match self.gop_at(pos) {
            Some(g) => g,
            None if (0.0..=last).contains(&pos) => return self.render_at(pos.floor()),
            None => {
                return Err(Error::OutOfRange {
                    what: "frame position",
                    value: pos.to_string(),
                    range: format!("0..={last}"),
                })
            }
        };
        let model = &self.models[gop];
        let (w, h) = self.dimensions();
        let (frame, _) = render_with(&deform(model, model.time_of(pos)), w, h, &self.options)?;
        Ok(frame.clamped())
    }

    /// Frames `range` (inclusive), decoded in parallel.
    pub fn decode_range(&self, first: usize, last: usize) -> Result<Vec<Frame<f32>>> {
        if first > last {
            return Err(Error::InvalidParameter(format!(
                "empty frame range {first}..{last}"
            )));
        }
        (first..=last)
            .into_par_iter()
            .map(|i| self.decode_frame(i))
            .collect()
    }

    pub fn decode_all(&self) -> Result<Vec<Frame<f32>>> {
        self.decode_range(0, self.frame_count() - 1)
    }

    /// Positions `k / factor` for the whole clip, see [`Self::render_at`].
    pub fn interpolate_sequence(&self, factor: usize) -> Result<Vec<Frame<f32>>> {
        if factor == 0 {
            return Err(Error::InvalidParameter(
                "interpolation factor must be >= 1".into(),
            ));
        }
        let steps = (self.frame_count() - 1) * factor + 1;
        (0..steps)
            .into_par_iter()
            .map(|k| self.render_at(k as f64 / factor as f64))
            .collect()
    }
}

/// Wall-clock decode speed over the deform + render path.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub passes: usize,
    pub frames_per_pass: usize,
    pub mean_fps: f64,
    pub std_fps: f64,
    pub width: usize,
    pub height: usize,
    pub gaussians: usize,
    pub threads: usize,
    pub per_pass_fps: Vec<f64>,
}

impl BenchReport {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "pass,fps")?;
        for (i, f) in self.per_pass_fps.iter().enumerate() {
            writeln!(out, "{i},{f:.3}")?;
        }
        Ok(())
    }
}

/// Renders every frame `passes` times on a pool of `threads` workers and
/// reports frames per second. Nothing touches the disk.
pub fn benchmark_decode(decoder: &Decoder, passes: usize, threads: usize) -> Result<BenchReport> {
    if passes == 0 || threads == 0 {
        return Err(Error::InvalidParameter(
            "passes and threads must be >= 1".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let n = decoder.frame_count();
    let per_pass_fps = pool.install(|| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(passes);
        for _ in 0..passes {
            let start = Instant::now();
            for i in 0..n {
                std::hint::black_box(decoder.decode_frame(i)?);
            }
            out.push(n as f64 / start.elapsed().as_secs_f64().max(1e-12));
        }
        Ok(out)
    })?;
    let mean = per_pass_fps.iter().sum::<f64>() / passes as f64;
    let var = per_pass_fps.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / passes as f64;
    let (width, height) = decoder.dimensions();
    Ok(BenchReport {
        passes,
        frames_per_pass: n,
        mean_fps: mean,
        std_fps: var.sqrt(),
        width,
        height,
        gaussians: decoder.container.gaussian_count(),
        threads,
        per_pass_fps,
    })
}

/// Header-level summary used by `inspect`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainerSummary {
    pub info: crate::codec::ContainerInfo,
    pub gaussians: Vec<usize>,
    pub param_count: usize,
}

impl ContainerSummary {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let info = inspect_container(bytes)?;
        let container = crate::codec::decode_container(bytes)?;
        Ok(Self {
            info,
            gaussians: container
                .gops
                .iter()
                .map(QuantizedGop::gaussian_count)
                .collect(),
            param_count: container.param_count(),
        })
    }

    pub fn bpp(&self) -> f64 {
        self.info.bpp()
    }

    pub fn bits_per_param(&self) -> f64 {
        self.info.bits_per_param(self.param_count)
    }
}
