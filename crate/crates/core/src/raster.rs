//! Tile-based accumulation renderer.
//!
//! Every pixel receives `sum_n c_n * exp(-sigma_n)` over the Gaussians whose
//! cutoff ellipse covers it. There is no opacity and no depth order, so the
//! result does not depend on the order of the input list (up to floating
//! point summation order, which the wide accumulation mode pins down).
//!
//! Pixel `(row i, col j)` has its center at `(j + 0.5, i + 0.5)` in pixel
//! space, i.e. normalized `(2 (j + 0.5) / W - 1, 2 (i + 0.5) / H - 1)`.

use rayon::prelude::*;

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::gaussian::{build_covariance, mahalanobis_half, Conic, DeformedGaussian};
use crate::real::Real;

/// Half squared Mahalanobis radius of the 3-sigma ellipse.
pub const THREE_SIGMA_CUTOFF: f64 = 4.5;

pub const DEFAULT_TILE_SIZE: usize = 16;

/// RGB raster, row-major `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T = f32> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> Frame<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::zero(); width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {width}x{height}x3", width * height * 3),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a frame from `f(x, y) -> rgb`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [T; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [T; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape<U>(&self, other: &Frame<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape<U>(&self, other: &Frame<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.width, self.height),
                actual: format!("{}x{}", other.width, other.height),
            })
        }
    }

    /// Values clamped to `[0, 1]`, as written to disk.
    pub fn clamped(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| v.max(T::zero()).min(T::one()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Frame<U> {
        Frame {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }

    pub fn add(&self, other: &Frame<T>) -> Result<Frame<T>> {
        self.check_shape(other)?;
        Ok(Frame {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a + *b)
                .collect(),
        })
    }
}

/// Per-pixel accumulator precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Accumulation {
    /// Accumulate in the model's scalar type.
    #[default]
    Native,
    /// Accumulate in `f64` and visit Gaussians in a canonical order, which
    /// makes the output independent of the input list order.
    Wide,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Contributions with `sigma >= cutoff` are dropped. `None` disables
    /// truncation entirely (every Gaussian touches every pixel).
    pub cutoff: Option<f64>,
    pub accumulation: Accumulation,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            cutoff: Some(THREE_SIGMA_CUTOFF),
            accumulation: Accumulation::Native,
        }
    }
}

impl RenderOptions {
    /// Untruncated rendering; the forward map is then smooth, which gradient
    /// checks rely on.
    pub fn exact() -> Self {
        Self {
            cutoff: None,
            ..Self::default()
        }
    }

    pub fn wide() -> Self {
        Self {
            accumulation: Accumulation::Wide,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Gaussians dropped because their covariance was degenerate.
    pub skipped_degenerate: usize,
}

/// Per-tile lists of Gaussians whose bounding box touches the tile.
///
/// Lists are stored contiguously: tile `k` owns `ids[offsets[k]..offsets[k + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileIndex {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    offsets: Vec<usize>,
    ids: Vec<u32>,
}

impl TileIndex {
    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn tile(&self, tx: usize, ty: usize) -> &[u32] {
        self.tile_at(ty * self.tiles_x + tx)
    }

    fn tile_at(&self, k: usize) -> &[u32] {
        &self.ids[self.offsets[k]..self.offsets[k + 1]]
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` covered by tile `k`.
    fn bounds(&self, k: usize, width: usize, height: usize) -> [usize; 4] {
        let tx = k % self.tiles_x;
        let ty = k / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        [
            x0,
            (x0 + self.tile_size).min(width),
            y0,
            (y0 + self.tile_size).min(height),
        ]
    }
}

/// Screen-space form of one Gaussian.
#[derive(Clone, Copy, Debug)]
struct Splat<T> {
    center: [T; 2],
    conic: Conic<T>,
    color: [T; 3],
    /// Inclusive pixel bounds `[x0, x1, y0, y1]`; `None` when off screen.
    bbox: Option<[usize; 4]>,
}

fn pixel_span(center: f64, radius: f64, len: usize) -> Option<[usize; 2]> {
    if !(center.is_finite() && radius.is_finite()) {
        return None;
    }
    // pixel k has its center at k + 0.5
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(len as f64 - 1.0);
    if lo > hi {
        None
    } else {
        Some([lo as usize, hi as usize])
    }
}

fn to_pixel<T: Real>(mu: [T; 2], width: usize, height: usize) -> [T; 2] {
    let half_w = T::c(width as f64 * 0.5);
    let half_h = T::c(height as f64 * 0.5);
    [(mu[0] + T::one()) * half_w, (mu[1] + T::one()) * half_h]
}

fn prepare<T: Real>(
    gaussians: &[DeformedGaussian<T>],
    width: usize,
    height: usize,
    cutoff: Option<f64>,
) -> (Vec<Option<Splat<T>>>, RenderStats) {
    let mut stats = RenderStats::default();
    let splats = gaussians
        .iter()
        .map(|g| {
            let cov = build_covariance(g.scale_t, g.theta_t).ok()?;
            let conic = match cov.inverse() {
                Ok(c) => c,
                Err(_) => return None,
            };
            let center = to_pixel(g.mu_t, width, height);
            let bbox = match cutoff {
                None => Some([0, width - 1, 0, height - 1]),
                Some(tau) => {
                    let k = (2.0 * tau).sqrt();
                    let rx = k * cov.xx.as_f64().sqrt();
                    let ry = k * cov.yy.as_f64().sqrt();
                    let xs = pixel_span(center[0].as_f64(), rx, width);
                    let ys = pixel_span(center[1].as_f64(), ry, height);
                    match (xs, ys) {
                        (Some(xs), Some(ys)) => Some([xs[0], xs[1], ys[0], ys[1]]),
                        _ => None,
                    }
                }
            };
            Some(Splat {
                center,
                conic,
                color: g.color_t,
                bbox,
            })
        })
        .collect::<Vec<_>>();
    for (s, g) in splats.iter().zip(gaussians) {
        if s.is_none() {
            stats.skipped_degenerate += 1;
            log::debug!("skipping degenerate gaussian {:?}", g);
        }
    }
    (splats, stats)
}

/// Canonical visiting order used by [`Accumulation::Wide`].
fn canonical_order<T: Real>(gaussians: &[DeformedGaussian<T>]) -> Vec<u32> {
    let key = |g: &DeformedGaussian<T>| {
        [
            g.mu_t[0],
            g.mu_t[1],
            g.scale_t[0],
            g.scale_t[1],
            g.theta_t,
            g.color_t[0],
            g.color_t[1],
            g.color_t[2],
        ]
        .map(Real::sort_bits)
    };
    let mut order: Vec<u32> = (0..gaussians.len() as u32).collect();
    order.sort_by_key(|&i| key(&gaussians[i as usize]));
    order
}

fn tiles_from_splats<T>(
    splats: &[Option<Splat<T>>],
    order: impl Iterator<Item = u32>,
    width: usize,
    height: usize,
    tile_size: usize,
) -> TileIndex {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let tile_range = |bbox: [usize; 4]| {
        (
            bbox[0] / tile_size..=bbox[1] / tile_size,
            bbox[2] / tile_size..=bbox[3] / tile_size,
        )
    };
    let order: Vec<u32> = order.collect();
    let mut counts = vec![0usize; tiles_x * tiles_y];
    for &i in &order {
        if let Some(Splat { bbox: Some(b), .. }) = &splats[i as usize] {
            let (xr, yr) = tile_range(*b);
            for ty in yr {
                for tx in xr.clone() {
                    counts[ty * tiles_x + tx] += 1;
                }
            }
        }
    }
    let mut offsets = Vec::with_capacity(counts.len() + 1);
    offsets.push(0);
    for c in &counts {
        offsets.push(offsets.last().unwrap() + c);
    }
    let mut cursor = offsets[..counts.len()].to_vec();
    let mut ids = vec![0u32; *offsets.last().unwrap()];
    for &i in &order {
        if let Some(Splat { bbox: Some(b), .. }) = &splats[i as usize] {
            let (xr, yr) = tile_range(*b);
            for ty in yr {
                for tx in xr.clone() {
                    let k = ty * tiles_x + tx;
                    ids[cursor[k]] = i;
                    cursor[k] += 1;
                }
            }
        }
    }
    TileIndex {
        tile_size,
        tiles_x,
        tiles_y,
        offsets,
        ids,
    }
}

/// Lists, per tile, the Gaussians whose 3-sigma box covers a pixel center of
/// that tile.
pub fn build_tiles<T: Real>(
    gaussians: &[DeformedGaussian<T>],
    width: usize,
    height: usize,
    tile_size: usize,
) -> Result<TileIndex> {
    if tile_size == 0 {
        return Err(Error::InvalidParameter(
            "tile size must be at least 1".into(),
        ));
    }
    let (splats, _) = prepare(gaussians, width, height, Some(THREE_SIGMA_CUTOFF));
    Ok(tiles_from_splats(
        &splats,
        0..gaussians.len() as u32,
        width,
        height,
        tile_size,
    ))
}

/// Renders with default options (3-sigma cutoff, native accumulation).
pub fn render<T: Real>(gaussians: &[DeformedGaussian<T>], width: usize, height: usize) -> Frame<T> {
    render_with(gaussians, width, height, &RenderOptions::default())
        .expect("default render options are valid")
        .0
}

pub fn render_with<T: Real>(
    gaussians: &[DeformedGaussian<T>],
    width: usize,
    height: usize,
    opts: &RenderOptions,
) -> Result<(Frame<T>, RenderStats)> {
    validate(width, height, opts)?;
    let (splats, stats) = prepare(gaussians, width, height, opts.cutoff);
    let tiles = match opts.accumulation {
        Accumulation::Native => tiles_from_splats(
            &splats,
            0..gaussians.len() as u32,
            width,
            height,
            opts.tile_size,
        ),
        Accumulation::Wide => tiles_from_splats(
            &splats,
            canonical_order(gaussians).into_iter(),
            width,
            height,
            opts.tile_size,
        ),
    };
    let cutoff = opts.cutoff.unwrap_or(f64::INFINITY);
    let tile_pixels: Vec<Vec<T>> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|k| match opts.accumulation {
            Accumulation::Native => render_tile::<T, T>(&splats, &tiles, k, width, height, cutoff),
            Accumulation::Wide => render_tile::<T, f64>(&splats, &tiles, k, width, height, cutoff),
        })
        .collect();

    let mut frame = Frame::zeros(width, height);
    for (k, buf) in tile_pixels.iter().enumerate() {
        let [x0, x1, y0, y1] = tiles.bounds(k, width, height);
        let tw = x1 - x0;
        for y in y0..y1 {
            let src = &buf[(y - y0) * tw * 3..(y - y0 + 1) * tw * 3];
            let dst = (y * width + x0) * 3;
            frame.data[dst..dst + tw * 3].copy_from_slice(src);
        }
    }
    Ok((frame, stats))
}

fn validate(width: usize, height: usize, opts: &RenderOptions) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter(format!(
            "frame must be at least 1x1, got {width}x{height}"
        )));
    }
    if opts.tile_size == 0 {
        return Err(Error::InvalidParameter(
            "tile size must be at least 1".into(),
        ));
    }
    Ok(())
}

fn render_tile<T: Real, A: Real>(
    splats: &[Option<Splat<T>>],
    tiles: &TileIndex,
    k: usize,
    width: usize,
    height: usize,
    cutoff: f64,
) -> Vec<T> {
    let [x0, x1, y0, y1] = tiles.bounds(k, width, height);
    let tw = x1 - x0;
    let mut acc = vec![A::zero(); tw * (y1 - y0) * 3];
    let cutoff = T::c(cutoff);
    let half = T::c(0.5);
    for &id in tiles.tile_at(k) {
        let Some(s) = &splats[id as usize] else {
            continue;
        };
        let Some([bx0, bx1, by0, by1]) = s.bbox else {
            continue;
        };
        let color = s.color.map(|c| A::c(c.as_f64()));
        for y in by0.max(y0)..=by1.min(y1 - 1) {
            let dy = T::c(y as f64) + half - s.center[1];
            let row = (y - y0) * tw;
            for x in bx0.max(x0)..=bx1.min(x1 - 1) {
                let dx = T::c(x as f64) + half - s.center[0];
                let sigma = mahalanobis_half(&s.conic, [dx, dy]);
                if !(sigma < cutoff) {
                    continue;
                }
                let w = A::c((-sigma).exp().as_f64());
                let p = (row + x - x0) * 3;
                acc[p] += color[0] * w;
                acc[p + 1] += color[1] * w;
                acc[p + 2] += color[2] * w;
            }
        }
    }
    acc.into_iter().map(|v| T::c(v.as_f64())).collect()
}

/// Gradient of a scalar loss with respect to one deformed Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeformedGradient<T = f32> {
    /// With respect to the normalized position.
    pub mu_t: [T; 2],
    pub scale_t: [T; 2],
    pub theta_t: T,
    pub color_t: [T; 3],
}

/// Per-Gaussian partials in screen space, accumulated in `f64`.
#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    center: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for i in 0..2 {
            self.center[i] += o.center[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
    }
}

/// Exact gradient of `sum_i frame_grad_i * render(gaussians)_i` with respect to
/// every deformed attribute.
///
/// Per-pixel weights are recomputed rather than stored. Tile partials are
/// reduced in tile order, so the result does not depend on the thread count.
pub fn render_backward<T: Real>(
    gaussians: &[DeformedGaussian<T>],
    frame_grad: &Frame<T>,
    opts: &RenderOptions,
) -> Result<Vec<DeformedGradient<T>>> {
    diagnostics::note_backward();
    let (width, height) = (frame_grad.width, frame_grad.height);
    validate(width, height, opts)?;
    let (splats, _) = prepare(gaussians, width, height, opts.cutoff);
    let tiles = tiles_from_splats(
        &splats,
        0..gaussians.len() as u32,
        width,
        height,
        opts.tile_size,
    );
    let cutoff = opts.cutoff.unwrap_or(f64::INFINITY);

    let partials: Vec<Vec<ScreenGrad>> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|k| backward_tile(&splats, &tiles, k, frame_grad, cutoff))
        .collect();

    let mut screen = vec![ScreenGrad::default(); gaussians.len()];
    for (k, part) in partials.iter().enumerate() {
        for (&id, g) in tiles.tile_at(k).iter().zip(part) {
            screen[id as usize].add(g);
        }
    }

    let half_w = width as f64 * 0.5;
    let half_h = height as f64 * 0.5;
    Ok(gaussians
        .iter()
        .zip(&splats)
        .zip(&screen)
        .map(|((g, splat), sg)| {
            if splat.is_none() {
                return DeformedGradient::default();
            }
            let [ds_x, ds_y, d_theta] = conic_to_scale_rotation(g.scale_t, g.theta_t, sg.conic);
            DeformedGradient {
                mu_t: [T::c(sg.center[0] * half_w), T::c(sg.center[1] * half_h)],
                scale_t: [T::c(ds_x), T::c(ds_y)],
                theta_t: T::c(d_theta),
                color_t: sg.color.map(T::c),
            }
        })
        .collect())
}

/// Chains `dL/d(a, b, c)` of the conic to scale and rotation, using
/// `conic = R diag(1/sx^2, 1/sy^2) R^T`.
fn conic_to_scale_rotation<T: Real>(scale: [T; 2], theta: T, d_conic: [f64; 3]) -> [f64; 3] {
    let sx = scale[0].as_f64();
    let sy = scale[1].as_f64();
    let (s, c) = theta.as_f64().sin_cos();
    let u = 1.0 / (sx * sx);
    let v = 1.0 / (sy * sy);
    let [ga, gb, gc] = d_conic;
    let d_u = ga * c * c + gb * c * s + gc * s * s;
    let d_v = ga * s * s - gb * c * s + gc * c * c;
    let d_theta =
        ga * 2.0 * c * s * (v - u) + gb * (c * c - s * s) * (u - v) + gc * 2.0 * c * s * (u - v);
    [d_u * (-2.0 * u / sx), d_v * (-2.0 * v / sy), d_theta]
}

fn backward_tile<T: Real>(
    splats: &[Option<Splat<T>>],
    tiles: &TileIndex,
    k: usize,
    frame_grad: &Frame<T>,
    cutoff: f64,
) -> Vec<ScreenGrad> {
    let width = frame_grad.width;
    let [x0, x1, y0, y1] = tiles.bounds(k, width, frame_grad.height);
    let grad = &frame_grad.data;
    tiles
        .tile_at(k)
        .iter()
        .map(|&id| {
            let mut out = ScreenGrad::default();
            let Some(s) = &splats[id as usize] else {
                return out;
            };
            let Some([bx0, bx1, by0, by1]) = s.bbox else {
                return out;
            };
            let (a, b, c) = (s.conic.a.as_f64(), s.conic.b.as_f64(), s.conic.c.as_f64());
            let color = s.color.map(|v| v.as_f64());
            let (cx, cy) = (s.center[0].as_f64(), s.center[1].as_f64());
            for y in by0.max(y0)..=by1.min(y1 - 1) {
                let dy = y as f64 + 0.5 - cy;
                for x in bx0.max(x0)..=bx1.min(x1 - 1) {
                    let dx = x as f64 + 0.5 - cx;
                    let sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy;
                    if !(sigma < cutoff) {
                        continue;
                    }
                    let p = (y * width + x) * 3;
                    let g = [grad[p].as_f64(), grad[p + 1].as_f64(), grad[p + 2].as_f64()];
                    let w = (-sigma).exp();
                    out.color[0] += g[0] * w;
                    out.color[1] += g[1] * w;
                    out.color[2] += g[2] * w;
                    let d_sigma = -w * (g[0] * color[0] + g[1] * color[1] + g[2] * color[2]);
                    out.conic[0] += d_sigma * 0.5 * dx * dx;
                    out.conic[1] += d_sigma * dx * dy;
                    out.conic[2] += d_sigma * 0.5 * dy * dy;
                    out.center[0] -= d_sigma * (a * dx + b * dy);
                    out.center[1] -= d_sigma * (b * dx + c * dy);
                }
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<DeformedGaussian<f64>> {
        (0..n)
            .map(|_| DeformedGaussian {
                mu_t: [rng.random_range(-1.1..1.1), rng.random_range(-1.1..1.1)],
                scale_t: [rng.random_range(0.6..4.0), rng.random_range(0.6..4.0)],
                theta_t: rng.random_range(-3.0..3.0),
                color_t: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
            })
            .collect()
    }

    /// Untiled, untruncated reference: every Gaussian against every pixel.
    fn brute_force(gs: &[DeformedGaussian<f64>], w: usize, h: usize) -> Frame<f64> {
        Frame::from_fn(w, h, |x, y| {
            let mut rgb = [0.0; 3];
            for g in gs {
                let conic = build_covariance(g.scale_t, g.theta_t)
                    .unwrap()
                    .inverse()
                    .unwrap();
                let cx = (g.mu_t[0] + 1.0) * w as f64 / 2.0;
                let cy = (g.mu_t[1] + 1.0) * h as f64 / 2.0;
                let wgt = crate::gaussian::gaussian_weight(
                    &conic,
                    [cx, cy],
                    [x as f64 + 0.5, y as f64 + 0.5],
                );
                for c in 0..3 {
                    rgb[c] += g.color_t[c] * wgt;
                }
            }
            rgb
        })
    }

    #[test]
    fn empty_scene_is_black() {
        let f = render::<f32>(&[], 7, 5);
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.data().len(), 7 * 5 * 3);
    }

    #[test]
    fn centered_gaussian_hits_pixel_exactly() {
        // pixel (3, 2) of an 8x8 frame has center (3.5, 2.5) -> normalized (-0.125, -0.375)
        let g = DeformedGaussian {
            mu_t: [-0.125f64, -0.375],
            scale_t: [0.3, 0.3],
            theta_t: 0.0,
            color_t: [0.3, 0.5, 0.7],
        };
        let f = render(&[g], 8, 8);
        assert_eq!(f.pixel(3, 2), [0.3, 0.5, 0.7]);
        // neighbours are beyond 3 sigma (1 px / 0.3 px)
        assert_eq!(f.pixel(4, 2), [0.0; 3]);
        assert_eq!(f.pixel(3, 3), [0.0; 3]);
    }

    #[test]
    fn overlapping_gaussians_add_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gs = random_scene(&mut rng, 2);
        let both = render(&gs, 16, 12);
        let sum = render(&gs[..1], 16, 12)
            .add(&render(&gs[1..], 16, 12))
            .unwrap();
        for (a, b) in both.data().iter().zip(sum.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_gaussian_is_skipped() {
        let good = DeformedGaussian {
            mu_t: [0.0f64, 0.0],
            scale_t: [2.0, 2.0],
            theta_t: 0.0,
            color_t: [1.0, 1.0, 1.0],
        };
        let bad = DeformedGaussian {
            scale_t: [1e-6, 1e-6],
            ..good
        };
        let (f, stats) = render_with(&[good, bad], 8, 8, &RenderOptions::default()).unwrap();
        assert_eq!(stats.skipped_degenerate, 1);
        assert_eq!(f, render(&[good], 8, 8));
        let grads = render_backward(
            &[good, bad],
            &Frame::from_fn(8, 8, |_, _| [1.0; 3]),
            &RenderOptions::default(),
        )
        .unwrap();
        assert_eq!(grads[1], DeformedGradient::default());
    }

    #[test]
    fn zero_frame_size_is_rejected() {
        assert!(render_with::<f32>(&[], 0, 4, &RenderOptions::default()).is_err());
    }

    #[test]
    fn tiny_gaussian_lands_in_central_tiles() {
        let g = DeformedGaussian {
            mu_t: [0.0f32, 0.0],
            scale_t: [0.1, 0.1],
            theta_t: 0.0,
            color_t: [1.0; 3],
        };
        let tiles = build_tiles(&[g], 64, 64, 16).unwrap();
        let mut hits = vec![];
        for ty in 0..tiles.tiles_y {
            for tx in 0..tiles.tiles_x {
                if tiles.tile(tx, ty).contains(&0) {
                    hits.push((tx, ty));
                }
            }
        }
        // the center (32, 32) lies on a tile corner; 3 sigma covers pixel 31 and 32 only if
        // within 0.3 px, so no pixel center is reached
        assert!(hits.len() <= 4);
        let g2 = DeformedGaussian {
            scale_t: [0.5, 0.5],
            ..g
        };
        let tiles = build_tiles(&[g2], 64, 64, 16).unwrap();
        let hits: Vec<_> = (0..tiles.tile_count())
            .filter(|&k| tiles.tile_at(k).contains(&0))
            .collect();
        assert_eq!(hits.len(), 4);
        for k in hits {
            let (tx, ty) = (k % 4, k / 4);
            assert!((1..=2).contains(&tx) && (1..=2).contains(&ty));
        }
    }

    #[test]
    fn large_gaussian_lands_in_every_tile() {
        let g = DeformedGaussian {
            mu_t: [0.1f32, -0.2],
            scale_t: [40.0, 30.0],
            theta_t: 0.3,
            color_t: [1.0; 3],
        };
        let tiles = build_tiles(&[g], 64, 64, 16).unwrap();
        for k in 0..tiles.tile_count() {
            assert_eq!(tiles.tile_at(k), &[0]);
        }
    }

    #[test]
    fn tiled_render_is_within_truncation_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let gs = random_scene(&mut rng, 12);
            let (w, h) = (23, 17);
            let bound = (-THREE_SIGMA_CUTOFF).exp()
                * gs.iter()
                    .map(|g| g.color_t.iter().map(|c| c.abs()).fold(0.0, f64::max))
                    .sum::<f64>();
            let tiled = render(&gs, w, h);
            let reference = brute_force(&gs, w, h);
            for (a, b) in tiled.data().iter().zip(reference.data()) {
                assert!((a - b).abs() <= bound + 1e-12, "{a} vs {b} (bound {bound})");
            }
            // with truncation disabled, tiling changes nothing but summation order
            let exact = render_with(
                &gs,
                w,
                h,
                &RenderOptions {
                    tile_size: 5,
                    ..RenderOptions::exact()
                },
            )
            .unwrap()
            .0;
            for (a, b) in exact.data().iter().zip(reference.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tile_size_does_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gs = random_scene(&mut rng, 10);
        let a = render_with(
            &gs,
            20,
            20,
            &RenderOptions {
                tile_size: 1,
                ..RenderOptions::default()
            },
        )
        .unwrap()
        .0;
        let b = render_with(
            &gs,
            20,
            20,
            &RenderOptions {
                tile_size: 64,
                ..RenderOptions::default()
            },
        )
        .unwrap()
        .0;
        assert_eq!(a, b);
    }

    #[test]
    fn tile_lists_contain_each_overlapping_gaussian_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gs = random_scene(&mut rng, 30);
        let tiles = build_tiles(&gs, 40, 24, 8).unwrap();
        for k in 0..tiles.tile_count() {
            let list = tiles.tile_at(k);
            let mut sorted = list.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), list.len());
        }
    }

    #[test]
    fn backward_zero_adjoint_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gs = random_scene(&mut rng, 6);
        let grads = render_backward(&gs, &Frame::zeros(12, 12), &RenderOptions::default()).unwrap();
        assert!(grads.iter().all(|g| *g == DeformedGradient::default()));
    }

    #[test]
    fn color_gradient_is_blend_weight() {
        let g = DeformedGaussian {
            mu_t: [0.05f64, -0.1],
            scale_t: [1.5, 2.5],
            theta_t: 0.4,
            color_t: [0.2, 0.1, -0.3],
        };
        let (w, h) = (10, 10);
        let mut adj = Frame::zeros(w, h);
        adj.set_pixel(6, 4, [1.0, 0.0, 0.0]);
        let grads = render_backward(&[g], &adj, &RenderOptions::default()).unwrap();
        let unit = DeformedGaussian {
            color_t: [1.0, 1.0, 1.0],
            ..g
        };
        let weight = render(&[unit], w, h).pixel(6, 4)[0];
        assert!((grads[0].color_t[0] - weight).abs() < 1e-15);
        assert_eq!(grads[0].color_t[1], 0.0);
    }

    fn perturb(g: &mut DeformedGaussian<f64>, k: usize, h: f64) {
        match k {
            0 => g.mu_t[0] += h,
            1 => g.mu_t[1] += h,
            2 => g.scale_t[0] += h,
            3 => g.scale_t[1] += h,
            4 => g.theta_t += h,
            5..=7 => g.color_t[k - 5] += h,
            _ => unreachable!(),
        }
    }

    fn component(g: &DeformedGradient<f64>, k: usize) -> f64 {
        match k {
            0 => g.mu_t[0],
            1 => g.mu_t[1],
            2 => g.scale_t[0],
            3 => g.scale_t[1],
            4 => g.theta_t,
            _ => g.color_t[k - 5],
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let opts = RenderOptions::exact();
        let (w, h) = (16, 16);
        let step = 1e-4;
        for _trial in 0..100 {
            let gs = random_scene(&mut rng, 10);
            let adj = Frame::from_fn(w, h, |_, _| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            });
            let objective = |scene: &[DeformedGaussian<f64>]| -> f64 {
                let f = render_with(scene, w, h, &opts).unwrap().0;
                f.data().iter().zip(adj.data()).map(|(a, b)| a * b).sum()
            };
            let grads = render_backward(&gs, &adj, &opts).unwrap();
            for n in 0..gs.len() {
                for k in 0..8 {
                    let at = |h: f64| {
                        let mut scene = gs.clone();
                        perturb(&mut scene[n], k, h);
                        objective(&scene)
                    };
                    let numeric = (8.0 * (at(step) - at(-step))
                        - (at(2.0 * step) - at(-2.0 * step)))
                        / (12.0 * step);
                    let analytic = component(&grads[n], k);
                    let rel =
                        (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                    assert!(
                        rel < 1e-4,
                        "gaussian {n} component {k}: analytic {analytic} numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gs: Vec<DeformedGaussian<f32>> = random_scene(&mut rng, 40)
            .iter()
            .map(|g| DeformedGaussian {
                mu_t: g.mu_t.map(|v| v as f32),
                scale_t: g.scale_t.map(|v| v as f32 * 3.0),
                theta_t: g.theta_t as f32,
                color_t: g.color_t.map(|v| v as f32),
            })
            .collect();
        let adj = Frame::from_fn(48, 32, |x, y| [(x as f32).sin(), (y as f32).cos(), 0.5]);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| render_backward(&gs, &adj, &RenderOptions::default()).unwrap());
        let b = four.install(|| render_backward(&gs, &adj, &RenderOptions::default()).unwrap());
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn permutation_invariance(seed in 0u64..1000, shift in 1usize..29) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gs64 = random_scene(&mut rng, 30);
            let gs: Vec<DeformedGaussian<f32>> = gs64.iter().map(|g| DeformedGaussian {
                mu_t: g.mu_t.map(|v| v as f32),
                scale_t: g.scale_t.map(|v| v as f32 * 2.0),
                theta_t: g.theta_t as f32,
                // Frame-range colors: the 32-bit bound is absolute.
                color_t: g.color_t.map(|v| 0.3 * v as f32),
            }).collect();
            let mut permuted = gs.clone();
            permuted.rotate_left(shift);
            permuted.swap(0, 7);

            let wide = RenderOptions::wide();
            let a = render_with(&gs, 24, 20, &wide).unwrap().0;
            let b = render_with(&permuted, 24, 20, &wide).unwrap().0;
            prop_assert_eq!(a.data(), b.data());

            let a = render(&gs, 24, 20);
            let b = render(&permuted, 24, 20);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
            }
        }

        #[test]
        fn linear_in_color(seed in 0u64..1000, lambda in -3.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<DeformedGaussian<f32>> = random_scene(&mut rng, 8).iter().map(|g| DeformedGaussian {
                mu_t: g.mu_t.map(|v| v as f32),
                scale_t: g.scale_t.map(|v| v as f32),
                theta_t: g.theta_t as f32,
                color_t: g.color_t.map(|v| v as f32),
            }).collect();
            let scaled: Vec<_> = gs.iter().map(|g| DeformedGaussian { color_t: g.color_t.map(|c| c * lambda), ..*g }).collect();
            let a = render(&gs, 16, 16);
            let b = render(&scaled, 16, 16);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x * lambda - y).abs() < 1e-6);
            }
        }
    }
}
