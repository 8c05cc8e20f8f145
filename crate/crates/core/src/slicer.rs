//! Motion estimation and adaptive GOP segmentation.
//!
//! Each frame transition gets a motion degree `D`, the mean absolute flow
//! component. A greedy scan accumulates `D` and closes a GOP once the sum
//! passes a threshold, so static stretches become long GOPs and fast motion
//! becomes short ones.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::Frame;

/// Default lower and upper GOP length bounds.
pub const MIN_GOP_LEN: usize = 4;
pub const MAX_GOP_LEN: usize = 120;

const FLO_MAGIC: f32 = 202021.25;

/// Dense flow, `(u, v)` interleaved, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 2],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 2 {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height}x2 flow"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> [f32; 2] {
        let i = (y * self.width + x) * 2;
        [self.data[i], self.data[i + 1]]
    }

    fn set(&mut self, x: usize, y: usize, d: [f32; 2]) {
        let i = (y * self.width + x) * 2;
        self.data[i] = d[0];
        self.data[i + 1] = d[1];
    }
}

/// Mean of `|u|` and `|v|` over every pixel: `sum(|u| + |v|) / (2 H W)`.
/// A uniform one-pixel horizontal shift scores 0.5.
pub fn motion_degree(flow: &FlowField) -> f64 {
    if flow.data.is_empty() {
        return 0.0;
    }
    flow.data.iter().map(|v| (*v as f64).abs()).sum::<f64>() / flow.data.len() as f64
}

/// Single-channel image used for matching.
#[derive(Clone, Debug)]
struct Luma {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Luma {
    fn from_frame(frame: &Frame<f32>) -> Self {
        let data = frame
            .data()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Self {
            width: frame.width(),
            height: frame.height(),
            data,
        }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Box-filtered by an integer `factor` (dimensions floor, at least 1).
    fn downscaled(&self, factor: usize) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let w = (self.width / factor).max(1);
        let h = (self.height / factor).max(1);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (x0, y0) = (x * factor, y * factor);
                let x1 = (x0 + factor).min(self.width);
                let y1 = (y0 + factor).min(self.height);
                let mut sum = 0.0f64;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        sum += self.at(xx, yy) as f64;
                    }
                }
                data.push((sum / ((x1 - x0) * (y1 - y0)) as f64) as f32);
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }
}

/// Integer block displacement minimizing the mean absolute luma difference
/// inside `radius`, broadcast to every pixel of the block.
///
/// Candidates must keep at least half of the block inside the frame. Ties go
/// to the smallest `dx^2 + dy^2`, then the smallest `(dx, dy)`. Frames smaller
/// than one block are matched as a single block.
pub fn estimate_flow_blockmatch(
    a: &Frame<f32>,
    b: &Frame<f32>,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    a.check_shape(b)?;
    if block == 0 {
        return Err(Error::InvalidParameter(
            "block size must be positive".into(),
        ));
    }
    Ok(match_blocks(
        &Luma::from_frame(a),
        &Luma::from_frame(b),
        block,
        radius,
    ))
}

fn match_blocks(a: &Luma, b: &Luma, block: usize, radius: usize) -> FlowField {
    let (w, h) = (a.width, a.height);
    let (bw, bh) = if w < block || h < block {
        (w, h)
    } else {
        (block, block)
    };
    let blocks_x = w.div_ceil(bw);
    let blocks_y = h.div_ceil(bh);
    let r = radius as isize;
    let best: Vec<[isize; 2]> = (0..blocks_x * blocks_y)
        .into_par_iter()
        .map(|k| {
            let x0 = (k % blocks_x) * bw;
            let y0 = (k / blocks_x) * bh;
            let x1 = (x0 + bw).min(w);
            let y1 = (y0 + bh).min(h);
            let area = (x1 - x0) * (y1 - y0);
            let mut best: Option<(f64, isize, [isize; 2])> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let mut sad = 0.0f64;
                    let mut count = 0usize;
                    for y in y0..y1 {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for x in x0..x1 {
                            let xx = x as isize + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            sad += (a.at(x, y) - b.at(xx as usize, yy as usize)).abs() as f64;
                            count += 1;
                        }
                    }
                    if count == 0 || count * 2 < area {
                        continue;
                    }
                    let cand = (sad / count as f64, dx * dx + dy * dy, [dx, dy]);
                    let better = match &best {
                        None => true,
                        Some(cur) => (cand.0, cand.1, cand.2) < (cur.0, cur.1, cur.2),
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            best.map_or([0, 0], |b| b.2)
        })
        .collect();
    let mut flow = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = best[(y / bh) * blocks_x + x / bw];
            flow.set(x, y, [d[0] as f32, d[1] as f32]);
        }
    }
    flow
}

/// Per-transition motion degrees; entry `i` describes frame `i -> i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTrace {
    values: Vec<f64>,
}

impl MotionTrace {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "motion degree must be finite and >= 0, got {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame_count(&self) -> usize {
        self.values.len() + 1
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Where motion degrees come from.
#[derive(Clone, Debug, PartialEq)]
pub enum MotionEstimator {
    /// Built-in block matching on frames box-downscaled until the long side is
    /// at most `max_side`; degrees are scaled back to full resolution.
    BlockMatch {
        block: usize,
        radius: usize,
        max_side: usize,
    },
    /// One `.flo` file per transition, ordered by the trailing number in the
    /// file name.
    FlowDir(PathBuf),
}

impl Default for MotionEstimator {
    fn default() -> Self {
        Self::BlockMatch {
            block: 8,
            radius: 8,
            max_side: 256,
        }
    }
}

impl MotionEstimator {
    pub fn trace(&self, frames: &[Frame<f32>]) -> Result<MotionTrace> {
        if frames.is_empty() {
            return Err(Error::InvalidParameter("no frames to analyse".into()));
        }
        for f in &frames[1..] {
            frames[0].check_shape(f)?;
        }
        let values = match self {
            Self::BlockMatch {
                block,
                radius,
                max_side,
            } => {
                if *block == 0 || *max_side == 0 {
                    return Err(Error::InvalidParameter(
                        "block size and max side must be positive".into(),
                    ));
                }
                let long = frames[0].width().max(frames[0].height());
                let factor = long.div_ceil(*max_side).max(1);
                let lumas: Vec<Luma> = frames
                    .par_iter()
                    .map(|f| Luma::from_frame(f).downscaled(factor))
                    .collect();
                lumas
                    .par_windows(2)
                    .map(|pair| {
                        motion_degree(&match_blocks(&pair[0], &pair[1], *block, *radius))
                            * factor as f64
                    })
                    .collect()
            }
            Self::FlowDir(dir) => {
                let files = crate::video::numbered_files(dir, &["flo"])?;
                if files.len() != frames.len() - 1 {
                    return Err(Error::InvalidParameter(format!(
                        "{} holds {} flow files, need {} for {} frames",
                        dir.display(),
                        files.len(),
                        frames.len() - 1,
                        frames.len()
                    )));
                }
                files
                    .par_iter()
                    .map(|(_, path)| read_flo(path).map(|f| motion_degree(&f)))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        MotionTrace::new(values)
    }
}

/// Writes the Middlebury `.flo` layout: `f32` magic `202021.25`, `i32`
/// width and height, then `u, v` as `f32`, all little-endian.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let word = |i: usize| -> Option<[u8; 4]> {
        bytes.get(i * 4..i * 4 + 4).map(|b| b.try_into().unwrap())
    };
    let bad = |what: String| Error::Format(format!("flow file: {what}"));
    let magic = word(0)
        .map(f32::from_le_bytes)
        .ok_or_else(|| bad("truncated header".into()))?;
    if magic != FLO_MAGIC {
        return Err(bad(format!("bad magic {magic}")));
    }
    let w = word(1)
        .map(i32::from_le_bytes)
        .ok_or_else(|| bad("truncated header".into()))?;
    let h = word(2)
        .map(i32::from_le_bytes)
        .ok_or_else(|| bad("truncated header".into()))?;
    if w <= 0 || h <= 0 {
        return Err(bad(format!("invalid size {w}x{h}")));
    }
    let n = w as usize * h as usize * 2;
    let expected = 12 + n * 4;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FlowField::from_data(w as usize, h as usize, data)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

/// Contiguous inclusive frame ranges covering `0..frame_count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GopPlan {
    ranges: Vec<(usize, usize)>,
}

impl GopPlan {
    pub fn new(ranges: Vec<(usize, usize)>) -> Result<Self> {
        let mut next = 0;
        for &(a, b) in &ranges {
            if a != next || b < a {
                return Err(Error::InvalidParameter(format!(
                    "GOP ranges must be contiguous, got {ranges:?}"
                )));
            }
            next = b + 1;
        }
        if ranges.is_empty() {
            return Err(Error::InvalidParameter("empty GOP plan".into()));
        }
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.1 + 1)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.ranges.iter().map(|(a, b)| b - a + 1).collect()
    }

    pub fn gop_of(&self, frame: usize) -> Option<usize> {
        self.ranges
            .iter()
            .position(|&(a, b)| (a..=b).contains(&frame))
    }

    /// Mean length of the GOPs whose midpoint lies in `frames`.
    pub fn mean_length_within(&self, frames: std::ops::Range<usize>) -> Option<f64> {
        let lens: Vec<usize> = self
            .ranges
            .iter()
            .filter(|(a, b)| frames.contains(&((a + b) / 2)))
            .map(|(a, b)| b - a + 1)
            .collect();
        (!lens.is_empty()).then(|| lens.iter().sum::<usize>() as f64 / lens.len() as f64)
    }
}

/// GOP length bounds. The last GOP is merged into its predecessor when it
/// would be shorter than `min`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceLimits {
    pub min: usize,
    pub max: usize,
}

impl Default for SliceLimits {
    fn default() -> Self {
        Self {
            min: MIN_GOP_LEN,
            max: MAX_GOP_LEN,
        }
    }
}

impl SliceLimits {
    fn validate(&self) -> Result<()> {
        if self.min < 1 || self.max < self.min {
            return Err(Error::InvalidParameter(format!(
                "invalid GOP length bounds {self:?}"
            )));
        }
        Ok(())
    }
}

/// Greedy motion-accumulating segmentation.
///
/// Walking frame by frame, the degree of the transition into each frame is
/// added to the running sum. The current GOP closes at frame `f` once it is
/// at least `min` frames long and either the sum exceeds `threshold` or it
/// reached `max` frames. The next GOP starts at `f + 1` with a zero sum; the
/// transition between GOPs is not counted.
pub fn slice_gops(trace: &MotionTrace, threshold: f64, limits: SliceLimits) -> Result<GopPlan> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold must be > 0, got {threshold}"
        )));
    }
    limits.validate()?;
    let n = trace.frame_count();
    let mut ranges = Vec::new();
    let mut start = 0;
    let mut acc = 0.0;
    for f in 1..n {
        if f == start {
            continue;
        }
        acc += trace.values[f - 1];
        let len = f - start + 1;
        if len >= limits.min && (acc > threshold || len >= limits.max) {
            ranges.push((start, f));
            start = f + 1;
            acc = 0.0;
        }
    }
    close_tail(&mut ranges, start, n, limits.min);
    GopPlan::new(ranges)
}

fn close_tail(ranges: &mut Vec<(usize, usize)>, start: usize, n: usize, min: usize) {
    if start >= n {
        return;
    }
    match ranges.last_mut() {
        Some(last) if n - start < min => last.1 = n - 1,
        _ => ranges.push((start, n - 1)),
    }
}

/// Fixed-length GOPs of `len` frames (tail merged as in [`slice_gops`]).
pub fn slice_fixed(frame_count: usize, len: usize, min: usize) -> Result<GopPlan> {
    if len == 0 || frame_count == 0 {
        return Err(Error::InvalidParameter(
            "GOP length and frame count must be positive".into(),
        ));
    }
    let mut ranges = Vec::new();
    let mut start = 0;
    while start + len <= frame_count {
        ranges.push((start, start + len - 1));
        start += len;
    }
    close_tail(&mut ranges, start, frame_count, min.min(len));
    GopPlan::new(ranges)
}

/// `count` GOPs of near-equal length (longer ones first).
pub fn slice_uniform(frame_count: usize, count: usize) -> Result<GopPlan> {
    if count == 0 || count > frame_count {
        return Err(Error::InvalidParameter(format!(
            "cannot split {frame_count} frames into {count} GOPs"
        )));
    }
    let base = frame_count / count;
    let extra = frame_count % count;
    let mut ranges = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        ranges.push((start, start + len - 1));
        start += len;
    }
    GopPlan::new(ranges)
}

/// Threshold giving `target` GOPs, found by bisection (the GOP count never
/// increases with the threshold). When no threshold hits `target` exactly,
/// the smallest threshold giving fewer GOPs is returned.
pub fn calibrate_threshold(trace: &MotionTrace, target: usize, limits: SliceLimits) -> Result<f64> {
    let count = |thr: f64| slice_gops(trace, thr, limits).map(|p| p.len());
    let mut lo = 1e-9;
    let mut hi = trace.total() + 1.0;
    if count(lo)? <= target {
        return Ok(lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Writes `gop,first,last,frames` rows.
pub fn write_plan_csv(plan: &GopPlan, mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "gop,first,last,frames")?;
    for (i, (a, b)) in plan.ranges.iter().enumerate() {
        writeln!(out, "{i},{a},{b},{}", b - a + 1)?;
    }
    Ok(())
}
