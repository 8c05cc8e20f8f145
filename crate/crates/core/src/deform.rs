//! Hybrid deformation field: tri-plane feature grids plus per-Gaussian
//! quadratic motion, blended by the dynamic indicator.
//!
//! The field has no decoder network. Each plane stores exactly the eight
//! attribute offsets, and the three bilinear samples are multiplied
//! channel-wise:
//!
//! ```text
//! deltas = xy(x, y) * xt(x, t) * yt(y, t)
//! channels: [dmu_x, dmu_y, ds_x, ds_y, dtheta, dr, dg, db]
//! ```
//!
//! Planes are queried at the canonical position, never at the deformed one.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{
    activate_attributes, sigmoid, DeformedGaussian, Gaussian2D, PARAMS_PER_GAUSSIAN, SCALE_FLOOR,
};
use crate::raster::DeformedGradient;
use crate::real::Real;

/// Feature channels per plane cell.
pub const CHANNELS: usize = 8;

/// Default spatial plane resolution along the long and short frame axes.
pub const DEFAULT_SPATIAL_RES: (usize, usize) = (32, 16);

/// One `C x rows x cols` feature grid, stored cell-major (`[row][col][channel]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Plane<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(
            rows >= 1 && cols >= 1,
            "plane resolution must be at least 1x1"
        );
        Self {
            rows,
            cols,
            data: vec![value; rows * cols * CHANNELS],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols * CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols}x{CHANNELS} plane"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let o = (row * self.cols + col) * CHANNELS;
        &self.data[o..o + CHANNELS]
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> T {
        self.data[(row * self.cols + col) * CHANNELS + channel]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: T) {
        self.data[(row * self.cols + col) * CHANNELS + channel] = v;
    }

    fn zeros_like(&self) -> Self {
        Self::filled(self.rows, self.cols, T::zero())
    }

    fn cast<U: Real>(&self) -> Plane<U> {
        Plane {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }

    /// Bilinear sample at the given row/column positions.
    fn sample(&self, r: &AxisSample<T>, c: &AxisSample<T>) -> [T; CHANNELS] {
        let mut out = [T::zero(); CHANNELS];
        for (i, wi) in [(r.lo, T::one() - r.frac), (r.hi, r.frac)] {
            for (j, wj) in [(c.lo, T::one() - c.frac), (c.hi, c.frac)] {
                let w = wi * wj;
                if w == T::zero() {
                    continue;
                }
                for (o, v) in out.iter_mut().zip(self.cell(i, j)) {
                    *o += w * *v;
                }
            }
        }
        out
    }

    /// Partial derivatives of the sample with respect to the row and column
    /// input coordinates.
    fn sample_slopes(
        &self,
        r: &AxisSample<T>,
        c: &AxisSample<T>,
    ) -> ([T; CHANNELS], [T; CHANNELS]) {
        let mut d_row = [T::zero(); CHANNELS];
        let mut d_col = [T::zero(); CHANNELS];
        let (ll, lh, hl, hh) = (
            self.cell(r.lo, c.lo),
            self.cell(r.lo, c.hi),
            self.cell(r.hi, c.lo),
            self.cell(r.hi, c.hi),
        );
        for k in 0..CHANNELS {
            d_row[k] = r.slope * ((T::one() - c.frac) * (hl[k] - ll[k]) + c.frac * (hh[k] - lh[k]));
            d_col[k] = c.slope * ((T::one() - r.frac) * (lh[k] - ll[k]) + r.frac * (hh[k] - hl[k]));
        }
        (d_row, d_col)
    }

    fn scatter(&mut self, r: &AxisSample<T>, c: &AxisSample<T>, grad: &[T; CHANNELS]) {
        for (i, wi) in [(r.lo, T::one() - r.frac), (r.hi, r.frac)] {
            for (j, wj) in [(c.lo, T::one() - c.frac), (c.hi, c.frac)] {
                let w = wi * wj;
                if w == T::zero() {
                    continue;
                }
                let o = (i * self.cols + j) * CHANNELS;
                for (d, g) in self.data[o..o + CHANNELS].iter_mut().zip(grad) {
                    *d += w * *g;
                }
            }
        }
    }
}

/// Linear interpolation stencil along one grid axis.
#[derive(Clone, Copy, Debug)]
struct AxisSample<T> {
    lo: usize,
    hi: usize,
    frac: T,
    /// d(grid coordinate)/d(input); zero where the input is clamped.
    slope: T,
}

impl<T: Real> AxisSample<T> {
    /// Maps `v` in `[lo_v, hi_v]` onto vertices `0..n`, clamping outside.
    fn new(v: T, lo_v: T, hi_v: T, n: usize) -> Self {
        if n == 1 {
            return Self {
                lo: 0,
                hi: 0,
                frac: T::zero(),
                slope: T::zero(),
            };
        }
        let last = T::c((n - 1) as f64);
        let scale = last / (hi_v - lo_v);
        let u = (v - lo_v) * scale;
        if !(u > T::zero()) {
            Self {
                lo: 0,
                hi: 1,
                frac: T::zero(),
                slope: T::zero(),
            }
        } else if u >= last {
            Self {
                lo: n - 2,
                hi: n - 1,
                frac: T::one(),
                slope: T::zero(),
            }
        } else {
            let lo = u.floor().to_usize().unwrap_or(0).min(n - 2);
            Self {
                lo,
                hi: lo + 1,
                frac: u - T::c(lo as f64),
                slope: scale,
            }
        }
    }

    fn spatial(v: T, n: usize) -> Self {
        Self::new(v, -T::one(), T::one(), n)
    }

    fn temporal(t: T, n: usize) -> Self {
        Self::new(t, T::zero(), T::one(), n)
    }
}

/// Three feature planes over `(x, y)`, `(x, t)` and `(y, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane<T = f32> {
    pub xy: Plane<T>,
    pub xt: Plane<T>,
    pub yt: Plane<T>,
}

impl<T: Real> TriPlane<T> {
    /// Initial field: `xy = 0`, `xt = yt = 1`. The product is zero (identity
    /// deformation) while `xy` still receives a non-zero gradient.
    pub fn new(nx: usize, ny: usize, nt: usize) -> Self {
        Self {
            xy: Plane::filled(nx, ny, T::zero()),
            xt: Plane::filled(nx, nt, T::one()),
            yt: Plane::filled(ny, nt, T::one()),
        }
    }

    /// Resolution for a GOP: spatial `32 x 16` with the long side along the
    /// longer frame axis, temporal `ceil(frames / 2)`.
    pub fn for_gop(width: usize, height: usize, frames: usize) -> Self {
        let (long, short) = DEFAULT_SPATIAL_RES;
        let (nx, ny) = if width >= height {
            (long, short)
        } else {
            (short, long)
        };
        Self::new(nx, ny, temporal_resolution(frames))
    }

    pub fn resolution(&self) -> (usize, usize, usize) {
        (self.xy.rows, self.xy.cols, self.xt.cols)
    }

    pub fn param_count(&self) -> usize {
        self.xy.data.len() + self.xt.data.len() + self.yt.data.len()
    }

    pub fn planes(&self) -> [&Plane<T>; 3] {
        [&self.xy, &self.xt, &self.yt]
    }

    pub fn planes_mut(&mut self) -> [&mut Plane<T>; 3] {
        [&mut self.xy, &mut self.xt, &mut self.yt]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            xy: self.xy.zeros_like(),
            xt: self.xt.zeros_like(),
            yt: self.yt.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> TriPlane<U> {
        TriPlane {
            xy: self.xy.cast(),
            xt: self.xt.cast(),
            yt: self.yt.cast(),
        }
    }

    fn stencils(&self, mu: [T; 2], t: T) -> Stencils<T> {
        let (nx, ny, nt) = self.resolution();
        Stencils {
            x: AxisSample::spatial(mu[0], nx),
            y: AxisSample::spatial(mu[1], ny),
            t: AxisSample::temporal(t, nt),
        }
    }
}

pub fn temporal_resolution(frames: usize) -> usize {
    frames.div_ceil(2).max(1)
}

struct Stencils<T> {
    x: AxisSample<T>,
    y: AxisSample<T>,
    t: AxisSample<T>,
}

/// Channel-wise product of the three bilinear plane samples at `(mu, t)`.
/// Coordinates outside the grid clamp to the border.
pub fn query_triplane<T: Real>(tp: &TriPlane<T>, mu: [T; 2], t: T) -> [T; CHANNELS] {
    let s = tp.stencils(mu, t);
    let a = tp.xy.sample(&s.x, &s.y);
    let b = tp.xt.sample(&s.x, &s.t);
    let c = tp.yt.sample(&s.y, &s.t);
    std::array::from_fn(|k| a[k] * b[k] * c[k])
}

/// Backward of [`query_triplane`]: accumulates plane gradients into `grad`
/// and returns the gradient with respect to `mu`.
fn query_triplane_backward<T: Real>(
    tp: &TriPlane<T>,
    mu: [T; 2],
    t: T,
    upstream: &[T; CHANNELS],
    grad: &mut TriPlane<T>,
) -> [T; 2] {
    let s = tp.stencils(mu, t);
    let a = tp.xy.sample(&s.x, &s.y);
    let b = tp.xt.sample(&s.x, &s.t);
    let c = tp.yt.sample(&s.y, &s.t);
    let ga: [T; CHANNELS] = std::array::from_fn(|k| upstream[k] * b[k] * c[k]);
    let gb: [T; CHANNELS] = std::array::from_fn(|k| upstream[k] * a[k] * c[k]);
    let gc: [T; CHANNELS] = std::array::from_fn(|k| upstream[k] * a[k] * b[k]);
    grad.xy.scatter(&s.x, &s.y, &ga);
    grad.xt.scatter(&s.x, &s.t, &gb);
    grad.yt.scatter(&s.y, &s.t, &gc);

    let (a_dx, a_dy) = tp.xy.sample_slopes(&s.x, &s.y);
    let (b_dx, _) = tp.xt.sample_slopes(&s.x, &s.t);
    let (c_dy, _) = tp.yt.sample_slopes(&s.y, &s.t);
    let mut d_mu = [T::zero(); 2];
    for k in 0..CHANNELS {
        d_mu[0] += ga[k] * a_dx[k] + gb[k] * b_dx[k];
        d_mu[1] += ga[k] * a_dy[k] + gc[k] * c_dy[k];
    }
    d_mu
}

/// `a2 t^2 + a1 t + a0`.
pub fn poly_offset<T: Real>(g: &Gaussian2D<T>, t: T) -> [T; 2] {
    let [a0, a1, a2] = g.poly;
    [
        (a2[0] * t + a1[0]) * t + a0[0],
        (a2[1] * t + a1[1]) * t + a0[1],
    ]
}

/// `mu + alpha * dmu_poly + (1 - alpha) * dmu_plane` with `alpha = sigmoid(alpha_raw)`.
pub fn fuse_position<T: Real>(g: &Gaussian2D<T>, dmu_plane: [T; 2], dmu_poly: [T; 2]) -> [T; 2] {
    let alpha = g.indicator();
    let beta = T::one() - alpha;
    [
        g.mu[0] + alpha * dmu_poly[0] + beta * dmu_plane[0],
        g.mu[1] + alpha * dmu_poly[1] + beta * dmu_plane[1],
    ]
}

/// Which parts of the field drive the deformation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FieldMode {
    /// Planes and polynomials fused by the indicator.
    #[default]
    Hybrid,
    /// Planes only; polynomial and indicator are unused.
    PlaneOnly,
    /// Polynomial position motion only; planes are unused.
    PolyOnly,
}

impl FieldMode {
    pub fn code(self) -> u8 {
        match self {
            FieldMode::Hybrid => 0,
            FieldMode::PlaneOnly => 1,
            FieldMode::PolyOnly => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FieldMode::Hybrid),
            1 => Some(FieldMode::PlaneOnly),
            2 => Some(FieldMode::PolyOnly),
            _ => None,
        }
    }

    fn uses_planes(self) -> bool {
        self != FieldMode::PolyOnly
    }
}

/// One GOP: canonical Gaussians, their deformation field and the frames
/// they cover.
#[derive(Clone, Debug, PartialEq)]
pub struct GopModel<T = f32> {
    pub gaussians: Vec<Gaussian2D<T>>,
    pub triplane: TriPlane<T>,
    /// First and last source frame, inclusive.
    pub frame_range: (usize, usize),
    pub mode: FieldMode,
}

impl<T: Real> GopModel<T> {
    pub fn frame_count(&self) -> usize {
        self.frame_range.1 - self.frame_range.0 + 1
    }

    pub fn contains_frame(&self, frame: usize) -> bool {
        (self.frame_range.0..=self.frame_range.1).contains(&frame)
    }

    /// Normalized time of a (possibly fractional) source frame position:
    /// first frame maps to 0, last to 1.
    pub fn time_of(&self, frame: f64) -> T {
        let (first, last) = self.frame_range;
        if last == first {
            return T::zero();
        }
        T::c((frame - first as f64) / (last - first) as f64)
    }

    pub fn param_count(&self) -> usize {
        self.gaussians.len() * PARAMS_PER_GAUSSIAN + self.triplane.param_count()
    }

    /// All learnable values: Gaussians (15 each) followed by the xy, xt and
    /// yt planes.
    pub fn to_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for g in &self.gaussians {
            out.extend_from_slice(&g.to_params());
        }
        for p in self.triplane.planes() {
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) {
        assert_eq!(params.len(), self.param_count());
        let (gs, mut rest) = params.split_at(self.gaussians.len() * PARAMS_PER_GAUSSIAN);
        for (g, chunk) in self
            .gaussians
            .iter_mut()
            .zip(gs.chunks_exact(PARAMS_PER_GAUSSIAN))
        {
            *g = Gaussian2D::from_params(chunk);
        }
        for p in self.triplane.planes_mut() {
            let (head, tail) = rest.split_at(p.data.len());
            p.data.copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn cast<U: Real>(&self) -> GopModel<U> {
        GopModel {
            gaussians: self.gaussians.iter().map(Gaussian2D::cast).collect(),
            triplane: self.triplane.cast(),
            frame_range: self.frame_range,
            mode: self.mode,
        }
    }
}

fn deform_one<T: Real>(
    g: &Gaussian2D<T>,
    tp: &TriPlane<T>,
    mode: FieldMode,
    t: T,
) -> DeformedGaussian<T> {
    let deltas = if mode.uses_planes() {
        query_triplane(tp, g.mu, t)
    } else {
        [T::zero(); CHANNELS]
    };
    let mut out = activate_attributes(g, &deltas);
    out.mu_t = match mode {
        FieldMode::Hybrid => fuse_position(g, [deltas[0], deltas[1]], poly_offset(g, t)),
        FieldMode::PlaneOnly => [g.mu[0] + deltas[0], g.mu[1] + deltas[1]],
        FieldMode::PolyOnly => {
            let p = poly_offset(g, t);
            [g.mu[0] + p[0], g.mu[1] + p[1]]
        }
    };
    out
}

/// Deformed Gaussians of `gop` at normalized time `t`.
pub fn deform<T: Real>(gop: &GopModel<T>, t: T) -> Vec<DeformedGaussian<T>> {
    gop.gaussians
        .par_iter()
        .with_min_len(256)
        .map(|g| deform_one(g, &gop.triplane, gop.mode, t))
        .collect()
}

/// Gradients with the same layout as a [`GopModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct GopGradient<T = f32> {
    pub gaussians: Vec<Gaussian2D<T>>,
    pub triplane: TriPlane<T>,
}

impl<T: Real> GopGradient<T> {
    pub fn zeros_like(gop: &GopModel<T>) -> Self {
        Self {
            gaussians: vec![Gaussian2D::default(); gop.gaussians.len()],
            triplane: gop.triplane.zeros_like(),
        }
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in &self.gaussians {
            out.extend_from_slice(&g.to_params());
        }
        for p in self.triplane.planes() {
            out.extend_from_slice(&p.data);
        }
        out
    }
}

/// Pulls per-Gaussian gradients of the deformed attributes back to the
/// canonical parameters and the plane features.
pub fn deform_backward<T: Real>(
    gop: &GopModel<T>,
    t: T,
    upstream: &[DeformedGradient<T>],
) -> GopGradient<T> {
    assert_eq!(upstream.len(), gop.gaussians.len());
    let mut grad = GopGradient::zeros_like(gop);
    let floor = T::c(SCALE_FLOOR);
    let pi = T::PI();
    for ((g, up), out) in gop
        .gaussians
        .iter()
        .zip(upstream)
        .zip(grad.gaussians.iter_mut())
    {
        let uses_planes = gop.mode.uses_planes();
        let deltas = if uses_planes {
            query_triplane(&gop.triplane, g.mu, t)
        } else {
            [T::zero(); CHANNELS]
        };

        // scale: exp(s) + ds, clamped from below
        let scale = g.scale();
        let mut d_delta = [T::zero(); CHANNELS];
        for k in 0..2 {
            if scale[k] + deltas[2 + k] > floor {
                out.s_raw[k] = up.scale_t[k] * scale[k];
                d_delta[2 + k] = up.scale_t[k];
            }
        }
        let th = g.theta_raw.tanh();
        out.theta_raw = up.theta_t * pi * (T::one() - th * th);
        d_delta[4] = up.theta_t;
        out.color = up.color_t;
        d_delta[5..8].copy_from_slice(&up.color_t);

        out.mu = up.mu_t;
        match gop.mode {
            FieldMode::Hybrid => {
                let alpha = sigmoid(g.alpha_raw);
                let poly = poly_offset(g, t);
                let t2 = t * t;
                for k in 0..2 {
                    out.poly[0][k] = alpha * up.mu_t[k];
                    out.poly[1][k] = alpha * t * up.mu_t[k];
                    out.poly[2][k] = alpha * t2 * up.mu_t[k];
                    d_delta[k] = (T::one() - alpha) * up.mu_t[k];
                }
                let d_alpha =
                    up.mu_t[0] * (poly[0] - deltas[0]) + up.mu_t[1] * (poly[1] - deltas[1]);
                out.alpha_raw = d_alpha * alpha * (T::one() - alpha);
            }
            FieldMode::PlaneOnly => {
                d_delta[0] = up.mu_t[0];
                d_delta[1] = up.mu_t[1];
            }
            FieldMode::PolyOnly => {
                for k in 0..2 {
                    out.poly[0][k] = up.mu_t[k];
                    out.poly[1][k] = t * up.mu_t[k];
                    out.poly[2][k] = t * t * up.mu_t[k];
                }
            }
        }

        if uses_planes {
            let d_mu =
                query_triplane_backward(&gop.triplane, g.mu, t, &d_delta, &mut grad.triplane);
            out.mu[0] += d_mu[0];
            out.mu[1] += d_mu[1];
        }
    }
    grad
}

/// Splits Gaussian ids into `(dynamic, static)` by `sigmoid(alpha_raw) > threshold`.
pub fn split_by_indicator<T: Real>(gop: &GopModel<T>, threshold: T) -> (Vec<usize>, Vec<usize>) {
    (0..gop.gaussians.len()).partition(|&i| gop.gaussians[i].indicator() > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{render, render_backward, render_with, Frame, RenderOptions};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_planes(rng: &mut ChaCha8Rng, nx: usize, ny: usize, nt: usize) -> TriPlane<f64> {
        let mut tp = TriPlane::new(nx, ny, nt);
        for p in tp.planes_mut() {
            for v in p.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        tp
    }

    /// Plain four-vertex weighted average on a `[channel][row][col]` view.
    fn naive_bilinear(p: &Plane<f64>, u: f64, v: f64) -> [f64; 8] {
        let (i0, j0) = (u.floor() as usize, v.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(p.rows() - 1), (j0 + 1).min(p.cols() - 1));
        let (fu, fv) = (u - i0 as f64, v - j0 as f64);
        std::array::from_fn(|c| {
            p.get(c, i0, j0) * (1.0 - fu) * (1.0 - fv)
                + p.get(c, i1, j0) * fu * (1.0 - fv)
                + p.get(c, i0, j1) * (1.0 - fu) * fv
                + p.get(c, i1, j1) * fu * fv
        })
    }

    #[test]
    fn vertex_query_is_exact_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tp = random_planes(&mut rng, 5, 4, 3);
        // x = -1 + 2*2/4 -> column 2; y = -1 + 2*1/3 -> row 1; t = 0.5 -> 1
        let (x, y, t) = (0.0, -1.0 + 2.0 / 3.0, 0.5);
        let out = query_triplane(&tp, [x, y], t);
        for c in 0..CHANNELS {
            let expected = tp.xy.get(c, 2, 1) * tp.xt.get(c, 2, 1) * tp.yt.get(c, 1, 1);
            assert_abs_diff_eq!(out[c], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_plane_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tp = random_planes(&mut rng, 6, 6, 4);
        tp.xt = Plane::filled(6, 4, 0.0);
        for _ in 0..10 {
            let q = query_triplane(
                &tp,
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                rng.random_range(0.0..1.0),
            );
            assert!(q.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cell_center_query_matches_naive_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (nx, ny, nt) = (7, 5, 4);
        let tp = random_planes(&mut rng, nx, ny, nt);
        for i in 0..nx - 1 {
            for j in 0..ny - 1 {
                for k in 0..nt - 1 {
                    let (u, v, w) = (i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5);
                    let x = u / (nx - 1) as f64 * 2.0 - 1.0;
                    let y = v / (ny - 1) as f64 * 2.0 - 1.0;
                    let t = w / (nt - 1) as f64;
                    let a = naive_bilinear(&tp.xy, u, v);
                    let b = naive_bilinear(&tp.xt, u, w);
                    let c = naive_bilinear(&tp.yt, v, w);
                    let q = query_triplane(&tp, [x, y], t);
                    for ch in 0..CHANNELS {
                        assert_abs_diff_eq!(q[ch], a[ch] * b[ch] * c[ch], epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_clamps_to_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tp = random_planes(&mut rng, 4, 4, 3);
        assert_eq!(
            query_triplane(&tp, [-3.0, 0.2], 0.3),
            query_triplane(&tp, [-1.0, 0.2], 0.3)
        );
        assert_eq!(
            query_triplane(&tp, [0.1, 7.0], 1.0),
            query_triplane(&tp, [0.1, 1.0], 1.0)
        );
    }

    #[test]
    fn single_temporal_vertex_is_constant_in_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tp = random_planes(&mut rng, 4, 4, 1);
        assert_eq!(
            query_triplane(&tp, [0.1, 0.2], 0.0),
            query_triplane(&tp, [0.1, 0.2], 0.9)
        );
    }

    #[test]
    fn poly_offset_cases() {
        let mut g = Gaussian2D::<f64> {
            poly: [[0.3, -0.2], [1.0, 2.0], [5.0, 6.0]],
            ..Default::default()
        };
        assert_eq!(poly_offset(&g, 0.0), [0.3, -0.2]);
        g.poly = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert_eq!(poly_offset(&g, 0.5), [0.25, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let poly: [[f64; 2]; 3] =
                std::array::from_fn(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let g = Gaussian2D {
                poly,
                ..Default::default()
            };
            let t = 0.37;
            for k in 0..2 {
                let horner = poly[0][k] + t * (poly[1][k] + t * poly[2][k]);
                assert_abs_diff_eq!(poly_offset(&g, t)[k], horner, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn fusion_extremes_and_midpoint() {
        let mut g = Gaussian2D::<f64> {
            mu: [0.1, 0.2],
            alpha_raw: -50.0,
            ..Default::default()
        };
        let plane = [0.05, -0.03];
        let poly = [0.2, 0.4];
        let p = fuse_position(&g, plane, poly);
        assert_abs_diff_eq!(p[0], 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.17, epsilon = 1e-12);
        g.alpha_raw = 50.0;
        let p = fuse_position(&g, plane, poly);
        assert_abs_diff_eq!(p[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.6, epsilon = 1e-12);
        g.alpha_raw = 0.0;
        let p = fuse_position(&g, [0.0, 0.2], [0.2, 0.0]);
        assert_abs_diff_eq!(p[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.3, epsilon = 1e-15);
    }

    fn random_gop(rng: &mut ChaCha8Rng, n: usize, mode: FieldMode) -> GopModel<f64> {
        let gaussians = (0..n)
            .map(|_| Gaussian2D {
                mu: [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)],
                s_raw: [rng.random_range(0.0..1.2), rng.random_range(0.0..1.2)],
                theta_raw: rng.random_range(-1.0..1.0),
                color: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
                poly: std::array::from_fn(|_| {
                    [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]
                }),
                alpha_raw: rng.random_range(-2.0..2.0),
            })
            .collect();
        let mut triplane = random_planes(rng, 5, 4, 3);
        for p in triplane.planes_mut() {
            for v in p.data_mut() {
                *v *= 0.5;
            }
        }
        GopModel {
            gaussians,
            triplane,
            frame_range: (0, 5),
            mode,
        }
    }

    #[test]
    fn zero_field_is_identity_at_all_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gop = random_gop(&mut rng, 12, FieldMode::Hybrid);
        gop.triplane = TriPlane::new(5, 4, 3);
        for g in &mut gop.gaussians {
            g.poly = [[0.0; 2]; 3];
        }
        for t in [0.0, 0.13, 0.5, 1.0] {
            for (d, g) in deform(&gop, t).iter().zip(&gop.gaussians) {
                assert_eq!(*d, g.activated());
            }
        }
    }

    #[test]
    fn linear_poly_motion_translates() {
        let g = Gaussian2D::<f64> {
            mu: [-0.25, 0.1],
            poly: [[0.0, 0.0], [0.5, 0.0], [0.0, 0.0]],
            alpha_raw: 50.0,
            ..Default::default()
        };
        let gop = GopModel {
            gaussians: vec![g],
            triplane: TriPlane::new(4, 4, 2),
            frame_range: (0, 9),
            mode: FieldMode::Hybrid,
        };
        for t in [0.0, 0.25, 0.5, 1.0] {
            let d = deform(&gop, t)[0];
            assert_abs_diff_eq!(d.mu_t[0], -0.25 + 0.5 * t, epsilon = 1e-12);
            assert_abs_diff_eq!(d.mu_t[1], 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn deform_is_continuous_in_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gop = random_gop(&mut rng, 20, FieldMode::Hybrid);
        let eps = 1e-5;
        for &t in &[0.1, 0.33, 0.61, 0.9] {
            let a = deform(&gop, t);
            let b = deform(&gop, t + eps);
            // local Lipschitz estimate from a coarser difference
            let c = deform(&gop, t + 100.0 * eps);
            for ((x, y), z) in a.iter().zip(&b).zip(&c) {
                let fine = (x.mu_t[0] - y.mu_t[0]).abs()
                    + (x.color_t[0] - y.color_t[0]).abs()
                    + (x.scale_t[0] - y.scale_t[0]).abs();
                let coarse = (x.mu_t[0] - z.mu_t[0]).abs()
                    + (x.color_t[0] - z.color_t[0]).abs()
                    + (x.scale_t[0] - z.scale_t[0]).abs();
                let lipschitz = coarse / (100.0 * eps) + 10.0;
                assert!(fine <= lipschitz * eps * 2.0, "jump {fine} at t={t}");
            }
        }
    }

    /// Perturbs one flat parameter of a model.
    fn nudged(gop: &GopModel<f64>, idx: usize, h: f64) -> GopModel<f64> {
        let mut p = gop.to_params();
        p[idx] += h;
        let mut out = gop.clone();
        out.set_params(&p);
        out
    }

    fn check_deform_gradients(mode: FieldMode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gop = random_gop(&mut rng, 4, mode);
        let (w, h) = (12, 12);
        let t = 0.41;
        let opts = RenderOptions::exact();
        let adj = Frame::from_fn(w, h, |_, _| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        });
        let objective = |m: &GopModel<f64>| -> f64 {
            let f = render_with(&deform(m, t), w, h, &opts).unwrap().0;
            f.data().iter().zip(adj.data()).map(|(a, b)| a * b).sum()
        };
        let up = render_backward(&deform(&gop, t), &adj, &opts).unwrap();
        let analytic = deform_backward(&gop, t, &up).to_flat();
        let step = 1e-4;
        for idx in 0..analytic.len() {
            let at = |h: f64| objective(&nudged(&gop, idx, h));
            let numeric =
                (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
            // summation roundoff in the objective is ~1e-11 at this step
            let rel =
                (analytic[idx] - numeric).abs() / numeric.abs().max(analytic[idx].abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "{mode:?} param {idx}: analytic {} numeric {numeric}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn deform_gradients_match_finite_differences() {
        for seed in 0..3 {
            check_deform_gradients(FieldMode::Hybrid, seed);
        }
        check_deform_gradients(FieldMode::PlaneOnly, 7);
        check_deform_gradients(FieldMode::PolyOnly, 8);
    }

    #[test]
    fn split_by_indicator_partitions() {
        let mut gop = random_gop(&mut ChaCha8Rng::seed_from_u64(12), 6, FieldMode::Hybrid);
        for g in &mut gop.gaussians {
            g.alpha_raw = -50.0;
        }
        let (dynamic, stat) = split_by_indicator(&gop, 0.5);
        assert!(dynamic.is_empty());
        assert_eq!(stat.len(), 6);

        gop.gaussians.truncate(2);
        gop.gaussians[1].alpha_raw = 50.0;
        assert_eq!(split_by_indicator(&gop, 0.5), (vec![1], vec![0]));
    }

    #[test]
    fn split_renders_sum_to_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gop = random_gop(&mut rng, 30, FieldMode::Hybrid).cast::<f32>();
        let deformed = deform(&gop, 0.3f32);
        for threshold in [0.2f32, 0.5, 0.8] {
            let (dynamic, stat) = split_by_indicator(&gop, threshold);
            let pick = |ids: &[usize]| ids.iter().map(|&i| deformed[i]).collect::<Vec<_>>();
            let full = render(&deformed, 20, 20);
            let sum = render(&pick(&dynamic), 20, 20)
                .add(&render(&pick(&stat), 20, 20))
                .unwrap();
            for (a, b) in full.data().iter().zip(sum.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn params_round_trip_through_flat_layout() {
        let gop = random_gop(&mut ChaCha8Rng::seed_from_u64(14), 3, FieldMode::Hybrid);
        let mut other = gop.clone();
        for g in &mut other.gaussians {
            *g = Gaussian2D::default();
        }
        other.triplane = gop.triplane.zeros_like();
        other.set_params(&gop.to_params());
        assert_eq!(other, gop);
        assert_eq!(gop.param_count(), 3 * 15 + 8 * (5 * 4 + 5 * 3 + 4 * 3));
    }

    #[test]
    fn gop_resolution_follows_frame_shape() {
        let tp = TriPlane::<f32>::for_gop(1280, 640, 17);
        assert_eq!(tp.resolution(), (32, 16, 9));
        let tp = TriPlane::<f32>::for_gop(480, 640, 16);
        assert_eq!(tp.resolution(), (16, 32, 8));
    }

    #[test]
    fn time_normalization() {
        let gop = GopModel::<f64> {
            gaussians: vec![],
            triplane: TriPlane::new(2, 2, 2),
            frame_range: (10, 18),
            mode: FieldMode::Hybrid,
        };
        assert_eq!(gop.time_of(10.0), 0.0);
        assert_eq!(gop.time_of(18.0), 1.0);
        assert_eq!(gop.time_of(14.0), 0.5);
    }
}
