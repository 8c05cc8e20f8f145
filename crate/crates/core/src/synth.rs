//! Procedural test videos with known motion.

use std::f64::consts::PI;

use crate::raster::Frame;

/// A generated clip plus the ground truth needed to score it.
#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub frames: Vec<Frame<f32>>,
    /// Frame without the moving object.
    pub background: Frame<f32>,
    /// Object center per frame, pixel coordinates.
    pub centers: Vec<[f64; 2]>,
    /// Half extent of the object (half side for squares, radius for disks).
    pub half_size: f64,
}

impl SynthVideo {
    /// Whether pixel-space point `p` lies within `margin` of the object at
    /// frame `f`.
    pub fn near_object(&self, f: usize, p: [f64; 2], margin: f64) -> bool {
        let c = self.centers[f];
        (p[0] - c[0]).abs() <= self.half_size + margin
            && (p[1] - c[1]).abs() <= self.half_size + margin
    }
}

/// Smooth low-frequency color texture.
pub fn textured_background(width: usize, height: usize) -> Frame<f32> {
    Frame::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        let r =
            0.45 + 0.15 * (2.0 * PI * u).sin() * (PI * v).cos() + 0.05 * (2.0 * PI * (u + v)).cos();
        let g =
            0.40 + 0.12 * (2.0 * PI * v).sin() + 0.06 * (4.0 * PI * u).cos() * (2.0 * PI * v).sin();
        let b = 0.35 + 0.10 * (2.0 * PI * (u - 0.3 * v)).cos() + 0.05 * (3.0 * PI * v).sin();
        [r as f32, g as f32, b as f32]
    })
}

/// Fraction of the pixel at center `p` covered by an axis-aligned square,
/// with a linear ramp `edge` pixels wide.
fn square_coverage(p: [f64; 2], center: [f64; 2], half: f64, edge: f64) -> f64 {
    let axis = |d: f64| ((half - d.abs()) / edge + 0.5).clamp(0.0, 1.0);
    axis(p[0] - center[0]) * axis(p[1] - center[1])
}

fn disk_coverage(p: [f64; 2], center: [f64; 2], radius: f64, edge: f64) -> f64 {
    let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
    ((radius - d) / edge + 0.5).clamp(0.0, 1.0)
}

fn composite(
    background: &Frame<f32>,
    color: [f64; 3],
    coverage: impl Fn([f64; 2]) -> f64,
) -> Frame<f32> {
    Frame::from_fn(background.width(), background.height(), |x, y| {
        let a = coverage([x as f64 + 0.5, y as f64 + 0.5]);
        let bg = background.pixel(x, y);
        std::array::from_fn(|c| ((1.0 - a) * bg[c] as f64 + a * color[c]) as f32)
    })
}

/// Textured background with a soft-edged square (side `width / 4`) moving
/// 20 px to the right over the clip. The square eases in and out
/// (`6s^5 - 15s^4 + 10s^3`), so its path is not a low-degree polynomial.
pub fn moving_square(width: usize, height: usize, frames: usize) -> SynthVideo {
    let background = textured_background(width, height);
    let half = width as f64 / 8.0;
    let travel = 20.0;
    let x0 = 0.5 * (width as f64 - travel);
    let centers: Vec<[f64; 2]> = (0..frames)
        .map(|f| {
            let s = if frames > 1 {
                f as f64 / (frames - 1) as f64
            } else {
                0.0
            };
            [x0 + travel * smootherstep(s), height as f64 / 2.0]
        })
        .collect();
    let frames = centers
        .iter()
        .map(|&c| {
            composite(&background, [0.9, 0.2, 0.15], |p| {
                square_coverage(p, c, half, 1.5)
            })
        })
        .collect();
    SynthVideo {
        frames,
        background,
        centers,
        half_size: half,
    }
}

fn smootherstep(s: f64) -> f64 {
    s * s * s * (s * (6.0 * s - 15.0) + 10.0)
}

/// Static for the first half, then a disk circling quickly (about 6 px per
/// frame) for the second half.
pub fn static_then_fast(width: usize, height: usize, frames: usize) -> SynthVideo {
    let background = textured_background(width, height);
    let radius = width.min(height) as f64 / 8.0;
    let orbit = width.min(height) as f64 / 4.0;
    let mid = [width as f64 / 2.0, height as f64 / 2.0];
    let calm = frames / 2;
    let centers: Vec<[f64; 2]> = (0..frames)
        .map(|f| {
            let angle = if f < calm {
                0.0
            } else {
                0.4 * (f - calm + 1) as f64
            };
            [mid[0] + orbit * angle.cos(), mid[1] + orbit * angle.sin()]
        })
        .collect();
    let frames = centers
        .iter()
        .map(|&c| {
            composite(&background, [0.15, 0.25, 0.85], |p| {
                disk_coverage(p, c, radius, 1.5)
            })
        })
        .collect();
    SynthVideo {
        frames,
        background,
        centers,
        half_size: radius,
    }
}

/// A disk moving at constant velocity over a gentle gradient. The center at
/// (fractional) frame `f` is `start + f * velocity`.
pub fn linear_motion(
    width: usize,
    height: usize,
    frames: usize,
    start: [f64; 2],
    velocity: [f64; 2],
) -> SynthVideo {
    let background = Frame::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        [(0.2 + 0.1 * u) as f32, (0.25 + 0.1 * v) as f32, 0.3]
    });
    let radius = width.min(height) as f64 / 10.0;
    let centers: Vec<[f64; 2]> = (0..frames)
        .map(|f| {
            [
                start[0] + f as f64 * velocity[0],
                start[1] + f as f64 * velocity[1],
            ]
        })
        .collect();
    let frames = centers
        .iter()
        .map(|&c| {
            composite(&background, [0.95, 0.9, 0.3], |p| {
                disk_coverage(p, c, radius, 1.0)
            })
        })
        .collect();
    SynthVideo {
        frames,
        background,
        centers,
        half_size: radius,
    }
}

/// Centroid (pixel coordinates) of `max(|frame - background| - floor, 0)`,
/// the difference summed over channels. A positive `floor` suppresses
/// low-level reconstruction noise. `None` when no weight is left.
pub fn foreground_centroid(
    frame: &Frame<f32>,
    background: &Frame<f32>,
    floor: f64,
) -> Option<[f64; 2]> {
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let a = frame.pixel(x, y);
            let b = background.pixel(x, y);
            let d: f64 = (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum();
            let w = (d - floor).max(0.0);
            sx += w * (x as f64 + 0.5);
            sy += w * (y as f64 + 0.5);
            sw += w;
        }
    }
    (sw > 0.0).then(|| [sx / sw, sy / sw])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_travels_twenty_pixels() {
        let v = moving_square(64, 64, 16);
        assert_eq!(v.frames.len(), 16);
        assert_eq!(v.centers[15][0] - v.centers[0][0], 20.0);
        for (f, c) in v.frames.iter().zip(&v.centers) {
            let (cx, cy) = (c[0] as usize, c[1] as usize);
            assert_eq!(f.pixel(cx, cy), [0.9, 0.2, 0.15]);
            let outside = cx + v.half_size as usize + 2;
            assert_eq!(f.pixel(outside, cy), v.background.pixel(outside, cy));
        }
    }

    #[test]
    fn static_half_does_not_move() {
        let v = static_then_fast(64, 64, 64);
        assert!(v.frames[..32].windows(2).all(|w| w[0] == w[1]));
        assert!(v.frames[32..].windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn linear_centroid_follows_trajectory() {
        let v = linear_motion(64, 64, 9, [20.0, 30.0], [3.0, 0.5]);
        for (f, c) in v.frames.iter().zip(&v.centers) {
            let got = foreground_centroid(f, &v.background, 0.0).unwrap();
            assert!((got[0] - c[0]).abs() < 0.05 && (got[1] - c[1]).abs() < 0.05);
            let floored = foreground_centroid(f, &v.background, 0.3).unwrap();
            assert!((floored[0] - c[0]).abs() < 0.05 && (floored[1] - c[1]).abs() < 0.05);
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        for v in [moving_square(32, 32, 4), static_then_fast(32, 32, 8)] {
            assert!(v
                .frames
                .iter()
                .flat_map(|f| f.data())
                .all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
