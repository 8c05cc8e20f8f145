//! Canonical 2D Gaussians and the covariance math shared by the renderer and
//! the trainer.
//!
//! Positions live in normalized screen coordinates (`[-1, 1]` per axis).
//! Scales are expressed in pixels, so `s_raw = 0` is a one-pixel standard
//! deviation regardless of the frame size.

use crate::error::{Error, Result};
use crate::real::Real;

/// Lower bound applied to deformed scales.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Covariances with a determinant below this are rejected.
pub const MIN_DET: f64 = 1e-12;

/// Number of learnable scalars per Gaussian.
pub const PARAMS_PER_GAUSSIAN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Gaussian2D<T = f32> {
    /// Canonical position, normalized coordinates.
    pub mu: [T; 2],
    /// Pre-activation scale; the activated scale is `exp(s_raw)`.
    pub s_raw: [T; 2],
    /// Pre-activation rotation; the activated rotation is `pi * tanh(theta_raw)`.
    pub theta_raw: T,
    pub color: [T; 3],
    /// Quadratic motion coefficients `[a0, a1, a2]`, each a 2D offset.
    pub poly: [[T; 2]; 3],
    /// Pre-activation dynamic indicator; activated by a sigmoid.
    pub alpha_raw: T,
}

impl<T: Real> Gaussian2D<T> {
    pub fn scale(&self) -> [T; 2] {
        [self.s_raw[0].exp(), self.s_raw[1].exp()]
    }

    pub fn rotation(&self) -> T {
        T::PI() * self.theta_raw.tanh()
    }

    pub fn indicator(&self) -> T {
        sigmoid(self.alpha_raw)
    }

    /// Attributes with every activation applied and no deformation.
    pub fn activated(&self) -> DeformedGaussian<T> {
        activate_attributes(self, &[T::zero(); 8])
    }

    /// Flattened parameters in storage order: mu, s, theta, color, a0, a1, a2, alpha.
    pub fn to_params(&self) -> [T; PARAMS_PER_GAUSSIAN] {
        let [a0, a1, a2] = self.poly;
        [
            self.mu[0],
            self.mu[1],
            self.s_raw[0],
            self.s_raw[1],
            self.theta_raw,
            self.color[0],
            self.color[1],
            self.color[2],
            a0[0],
            a0[1],
            a1[0],
            a1[1],
            a2[0],
            a2[1],
            self.alpha_raw,
        ]
    }

    pub fn from_params(p: &[T]) -> Self {
        assert!(p.len() >= PARAMS_PER_GAUSSIAN);
        Self {
            mu: [p[0], p[1]],
            s_raw: [p[2], p[3]],
            theta_raw: p[4],
            color: [p[5], p[6], p[7]],
            poly: [[p[8], p[9]], [p[10], p[11]], [p[12], p[13]]],
            alpha_raw: p[14],
        }
    }

    pub fn cast<U: Real>(&self) -> Gaussian2D<U> {
        let p = self.to_params().map(|v| U::c(v.as_f64()));
        Gaussian2D::from_params(&p)
    }
}

/// Gaussian attributes at one timestamp, ready to rasterize.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DeformedGaussian<T = f32> {
    pub mu_t: [T; 2],
    /// Activated scale in pixels.
    pub scale_t: [T; 2],
    pub theta_t: T,
    pub color_t: [T; 3],
}

/// Symmetric 2x2 covariance `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance<T = f32> {
    pub xx: T,
    pub xy: T,
    pub yy: T,
}

/// Inverse covariance `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conic<T = f32> {
    pub a: T,
    pub b: T,
    pub c: T,
}

impl<T: Real> Covariance<T> {
    pub fn det(&self) -> T {
        self.xx * self.yy - self.xy * self.xy
    }

    /// Closed-form 2x2 inverse.
    pub fn inverse(&self) -> Result<Conic<T>> {
        let det = self.det();
        if !(det.as_f64() >= MIN_DET) {
            return Err(Error::DegenerateGaussian {
                det: det.as_f64(),
                min: MIN_DET,
            });
        }
        let inv = T::one() / det;
        Ok(Conic {
            a: self.yy * inv,
            b: -self.xy * inv,
            c: self.xx * inv,
        })
    }
}

/// `R S S^T R^T` for `S = diag(scale)` and `R` the rotation by `theta`.
pub fn build_covariance<T: Real>(scale: [T; 2], theta: T) -> Result<Covariance<T>> {
    if !(scale[0].is_finite() && scale[1].is_finite() && theta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite covariance input: scale={scale:?}, theta={theta}"
        )));
    }
    if scale[0] <= T::zero() || scale[1] <= T::zero() {
        return Err(Error::InvalidParameter(format!(
            "scale must be positive, got {scale:?}"
        )));
    }
    let (sin, cos) = theta.sin_cos();
    let sx2 = scale[0] * scale[0];
    let sy2 = scale[1] * scale[1];
    Ok(Covariance {
        xx: cos * cos * sx2 + sin * sin * sy2,
        xy: cos * sin * (sx2 - sy2),
        yy: sin * sin * sx2 + cos * cos * sy2,
    })
}

/// Half the squared Mahalanobis distance of `delta`.
#[inline(always)]
pub fn mahalanobis_half<T: Real>(conic: &Conic<T>, delta: [T; 2]) -> T {
    let [dx, dy] = delta;
    T::c(0.5) * (conic.a * dx * dx + conic.c * dy * dy) + conic.b * dx * dy
}

/// `exp(-0.5 (x - mu)^T Sigma^-1 (x - mu))`.
pub fn gaussian_weight<T: Real>(conic: &Conic<T>, mu: [T; 2], x: [T; 2]) -> T {
    (-mahalanobis_half(conic, [x[0] - mu[0], x[1] - mu[1]])).exp()
}

/// Applies activations and plane offsets to scale, rotation and color.
///
/// `deltas` follows the tri-plane channel layout: `[dmu_x, dmu_y, ds_x, ds_y,
/// dtheta, dr, dg, db]`. The position channels are ignored here; the
/// returned `mu_t` is the canonical position and is replaced by
/// [`crate::deform::fuse_position`].
pub fn activate_attributes<T: Real>(g: &Gaussian2D<T>, deltas: &[T; 8]) -> DeformedGaussian<T> {
    let floor = T::c(SCALE_FLOOR);
    let scale = g.scale();
    DeformedGaussian {
        mu_t: g.mu,
        scale_t: [
            (scale[0] + deltas[2]).max(floor),
            (scale[1] + deltas[3]).max(floor),
        ],
        theta_t: g.rotation() + deltas[4],
        color_t: [
            g.color[0] + deltas[5],
            g.color[1] + deltas[6],
            g.color[2] + deltas[7],
        ],
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
