//! Min-max quantization of model attributes.
//!
//! Every attribute channel of a GOP gets its own `[min, max]` range, mapped
//! linearly onto `0..=2^bits - 1`. A 32-bit class means "store the float
//! bits unchanged".

use crate::deform::{FieldMode, GopModel, Plane, TriPlane, CHANNELS};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian2D, PARAMS_PER_GAUSSIAN};
use crate::morton;
use crate::real::Real;

/// Bit depth per attribute class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitPlan {
    pub position: u8,
    pub color: u8,
    /// Scale, rotation, polynomial coefficients and indicator.
    pub other: u8,
    pub plane: u8,
}

impl Default for BitPlan {
    fn default() -> Self {
        Self {
            position: 16,
            color: 16,
            other: 8,
            plane: 16,
        }
    }
}

impl BitPlan {
    /// No quantization anywhere.
    pub fn lossless() -> Self {
        Self {
            position: 32,
            color: 32,
            other: 32,
            plane: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("position", self.position),
            ("color", self.color),
            ("other", self.other),
            ("plane", self.plane),
        ] {
            if !matches!(b, 8 | 16 | 32) {
                return Err(Error::InvalidParameter(format!(
                    "{name} bit depth must be 8, 16 or 32, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Bit depth of flat Gaussian parameter `channel` (see [`Gaussian2D::to_params`]).
    pub fn channel_bits(&self, channel: usize) -> u8 {
        match channel {
            0 | 1 => self.position,
            5..=7 => self.color,
            _ => self.other,
        }
    }
}

/// One quantized channel.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedChannel {
    pub bits: u8,
    pub min: f32,
    pub max: f32,
    /// Integer codes, or raw `f32` bits when `bits == 32`.
    pub codes: Vec<u32>,
}

impl QuantizedChannel {
    pub fn max_code(bits: u8) -> u32 {
        if bits >= 32 {
            u32::MAX
        } else {
            (1u32 << bits) - 1
        }
    }

    /// Distance between adjacent reconstruction levels.
    pub fn step(&self) -> f64 {
        if self.bits >= 32 {
            0.0
        } else {
            (self.max as f64 - self.min as f64) / Self::max_code(self.bits) as f64
        }
    }

    pub fn value(&self, i: usize) -> f32 {
        dequantize_code(self.codes[i], self.bits, self.min, self.max)
    }

    pub fn values(&self) -> Vec<f32> {
        (0..self.codes.len()).map(|i| self.value(i)).collect()
    }

    fn permuted(&self, order: &[usize]) -> Self {
        Self {
            codes: order.iter().map(|&i| self.codes[i]).collect(),
            ..self.clone()
        }
    }
}

fn dequantize_code(code: u32, bits: u8, min: f32, max: f32) -> f32 {
    if bits >= 32 {
        return f32::from_bits(code);
    }
    if max == min {
        return min;
    }
    let (lo, hi) = (min as f64, max as f64);
    (lo + code as f64 / QuantizedChannel::max_code(bits) as f64 * (hi - lo)) as f32
}

/// `code = round((v - min) / (max - min) * (2^bits - 1))`, half away from zero.
pub fn quantize_minmax<T: Real>(values: &[T], bits: u8) -> Result<QuantizedChannel> {
    if !matches!(bits, 8 | 16 | 32) {
        return Err(Error::InvalidParameter(format!(
            "unsupported bit depth {bits}"
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "cannot quantize non-finite value {v}"
        )));
    }
    if bits == 32 {
        let codes: Vec<u32> = values
            .iter()
            .map(|v| (v.as_f64() as f32).to_bits())
            .collect();
        let (min, max) = min_max(values.iter().map(|v| v.as_f64() as f32));
        return Ok(QuantizedChannel {
            bits,
            min,
            max,
            codes,
        });
    }
    let (min, max) = min_max(values.iter().map(|v| v.as_f64() as f32));
    let top = QuantizedChannel::max_code(bits);
    let codes = if max == min {
        vec![0; values.len()]
    } else {
        let (lo, span) = (min as f64, max as f64 - min as f64);
        values
            .iter()
            .map(|v| {
                let q = ((v.as_f64() - lo) / span * top as f64).round();
                q.clamp(0.0, top as f64) as u32
            })
            .collect()
    };
    Ok(QuantizedChannel {
        bits,
        min,
        max,
        codes,
    })
}

fn min_max(values: impl Iterator<Item = f32>) -> (f32, f32) {
    let (lo, hi) = values.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if lo > hi {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

/// Quantize-dequantize every attribute in place of rounding during
/// fine-tuning. Gaussian order is preserved.
pub fn fake_quantize<T: Real>(model: &GopModel<T>, plan: &BitPlan) -> Result<GopModel<T>> {
    let n = model.gaussians.len();
    let mut params: Vec<[T; PARAMS_PER_GAUSSIAN]> =
        model.gaussians.iter().map(Gaussian2D::to_params).collect();
    for ch in 0..PARAMS_PER_GAUSSIAN {
        let bits = plan.channel_bits(ch);
        if bits == 32 {
            continue;
        }
        let column: Vec<T> = params.iter().map(|p| p[ch]).collect();
        let q = quantize_minmax(&column, bits)?;
        for (i, p) in params.iter_mut().enumerate().take(n) {
            p[ch] = T::c(q.value(i) as f64);
        }
    }
    let mut out = model.clone();
    for (g, p) in out.gaussians.iter_mut().zip(&params) {
        *g = Gaussian2D::from_params(p);
    }
    if plan.plane != 32 {
        for plane in out.triplane.planes_mut() {
            for ch in 0..CHANNELS {
                let column: Vec<T> = plane
                    .data()
                    .iter()
                    .skip(ch)
                    .step_by(CHANNELS)
                    .copied()
                    .collect();
                let q = quantize_minmax(&column, plan.plane)?;
                for (i, v) in plane
                    .data_mut()
                    .iter_mut()
                    .skip(ch)
                    .step_by(CHANNELS)
                    .enumerate()
                {
                    *v = T::c(q.value(i) as f64);
                }
            }
        }
    }
    Ok(out)
}

/// Quantized feature plane: one channel record per feature channel, codes
/// in row-major `rows x cols` order.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedPlane {
    pub rows: usize,
    pub cols: usize,
    pub channels: Vec<QuantizedChannel>,
}

impl QuantizedPlane {
    fn from_plane(plane: &Plane<f32>, bits: u8) -> Result<Self> {
        let channels = (0..CHANNELS)
            .map(|ch| {
                let column: Vec<f32> = plane
                    .data()
                    .iter()
                    .skip(ch)
                    .step_by(CHANNELS)
                    .copied()
                    .collect();
                quantize_minmax(&column, bits)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows: plane.rows(),
            cols: plane.cols(),
            channels,
        })
    }

    fn dequantize(&self) -> Plane<f32> {
        let mut data = vec![0.0f32; self.rows * self.cols * CHANNELS];
        for (ch, q) in self.channels.iter().enumerate() {
            for (i, v) in q.values().into_iter().enumerate() {
                data[i * CHANNELS + ch] = v;
            }
        }
        Plane::from_data(self.rows, self.cols, data).expect("shape checked at construction")
    }
}

/// A GOP after quantization: the unit stored in the container.
///
/// Gaussians are kept in Morton order of their quantized positions, so the
/// dequantized model renders identically whether it comes from memory or
/// from a decoded container.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGop {
    pub frame_range: (usize, usize),
    pub mode: FieldMode,
    pub plan: BitPlan,
    /// Gaussian parameter channels in [`Gaussian2D::to_params`] order.
    pub attributes: Vec<QuantizedChannel>,
    /// `xy`, `xt`, `yt`.
    pub planes: [QuantizedPlane; 3],
}

impl QuantizedGop {
    pub fn from_model(model: &GopModel<f32>, plan: &BitPlan) -> Result<Self> {
        plan.validate()?;
        if model.gaussians.is_empty() {
            return Err(Error::InvalidParameter(
                "a GOP needs at least one gaussian".into(),
            ));
        }
        let columns: Vec<Vec<f32>> = (0..PARAMS_PER_GAUSSIAN)
            .map(|ch| model.gaussians.iter().map(|g| g.to_params()[ch]).collect())
            .collect();
        let attributes = columns
            .iter()
            .enumerate()
            .map(|(ch, col)| quantize_minmax(col, plan.channel_bits(ch)))
            .collect::<Result<Vec<_>>>()?;
        let [xy, xt, yt] = model
            .triplane
            .planes()
            .map(|p| QuantizedPlane::from_plane(p, plan.plane));
        let unsorted = Self {
            frame_range: model.frame_range,
            mode: model.mode,
            plan: *plan,
            attributes,
            planes: [xy?, xt?, yt?],
        };
        let order = unsorted.morton_order();
        Ok(unsorted.permuted(&order))
    }

    pub fn gaussian_count(&self) -> usize {
        self.attributes[0].codes.len()
    }

    pub fn param_count(&self) -> usize {
        self.gaussian_count() * PARAMS_PER_GAUSSIAN
            + self
                .planes
                .iter()
                .map(|p| p.rows * p.cols * CHANNELS)
                .sum::<usize>()
    }

    /// Position key on a 16-bit lattice regardless of the stored depth.
    fn position_key(&self, i: usize) -> (u16, u16) {
        let key = |ch: &QuantizedChannel| -> u16 {
            match ch.bits {
                16 => ch.codes[i] as u16,
                8 => (ch.codes[i] << 8) as u16,
                _ => {
                    let span = ch.max as f64 - ch.min as f64;
                    if span <= 0.0 {
                        0
                    } else {
                        ((ch.value(i) as f64 - ch.min as f64) / span * 65535.0).round() as u16
                    }
                }
            }
        };
        (key(&self.attributes[0]), key(&self.attributes[1]))
    }

    pub fn morton_order(&self) -> Vec<usize> {
        morton::sort_order((0..self.gaussian_count()).map(|i| self.position_key(i)))
    }

    /// Reorders Gaussians: new position `k` holds old Gaussian `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            attributes: self.attributes.iter().map(|c| c.permuted(order)).collect(),
            ..self.clone()
        }
    }

    pub fn dequantize(&self) -> GopModel<f32> {
        let columns: Vec<Vec<f32>> = self
            .attributes
            .iter()
            .map(QuantizedChannel::values)
            .collect();
        let gaussians = (0..self.gaussian_count())
            .map(|i| {
                let p: [f32; PARAMS_PER_GAUSSIAN] = std::array::from_fn(|ch| columns[ch][i]);
                Gaussian2D::from_params(&p)
            })
            .collect();
        let [xy, xt, yt] = &self.planes;
        GopModel {
            gaussians,
            triplane: TriPlane {
                xy: xy.dequantize(),
                xt: xt.dequantize(),
                yt: yt.dequantize(),
            },
            frame_range: self.frame_range,
            mode: self.mode,
        }
    }
}
