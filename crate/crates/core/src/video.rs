//! Frame sequences on disk and quality metrics.
//!
//! Inputs are directories of numbered PNG files (`frame_000.png`,
//! `frame_001.png`, ...) or a raw planar RGB file with a `.json` sidecar
//! holding `{"width", "height", "count"}` and optionally `"bit_depth"`.
//! Pixel values are scaled to `[0, 1]`.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Frame;
use crate::real::Real;

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoBuffer {
    pub frames: Vec<Frame<f32>>,
    pub fps: Option<f64>,
    pub source: Option<PathBuf>,
}

impl VideoBuffer {
    pub fn new(frames: Vec<Frame<f32>>) -> Result<Self> {
        if let Some(first) = frames.first() {
            for f in &frames[1..] {
                first.check_shape(f)?;
            }
        }
        Ok(Self {
            frames,
            fps: None,
            source: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the frames, `(0, 0)` when empty.
    pub fn dimensions(&self) -> (usize, usize) {
        self.frames
            .first()
            .map_or((0, 0), |f| (f.width(), f.height()))
    }

    /// Center crop of every frame.
    pub fn center_cropped(&self, width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            frames: self
                .frames
                .iter()
                .map(|f| center_crop(f, width, height))
                .collect::<Result<_>>()?,
            ..self.clone()
        })
    }
}

/// Raw planar RGB sidecar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    #[serde(default = "eight")]
    pub bit_depth: u8,
}

fn eight() -> u8 {
    8
}

/// Files in `dir` with one of `extensions`, keyed and sorted by the last
/// run of digits in the file stem. Files without digits are ignored.
pub(crate) fn numbered_files(dir: &Path, extensions: &[&str]) -> Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| extensions.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let digits: String = stem
            .chars()
            .rev()
            .skip_while(|c| !c.is_ascii_digit())
            .take_while(char::is_ascii_digit)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        if let Ok(index) = digits.parse::<usize>() {
            out.push((index, path));
        }
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Image {
            path: w[1].1.clone(),
            reason: format!("duplicate frame index {}", w[0].0),
        });
    }
    Ok(out)
}

/// Loads a frame directory or a raw planar RGB file (with `<file>.json` or
/// `<stem>.json` next to it).
pub fn load_frames(path: &Path) -> Result<VideoBuffer> {
    let mut buffer = if path.is_dir() {
        load_image_dir(path)?
    } else {
        load_raw(path)?
    };
    buffer.source = Some(path.to_path_buf());
    Ok(buffer)
}

fn load_image_dir(dir: &Path) -> Result<VideoBuffer> {
    let files = numbered_files(dir, &["png"])?;
    let Some(&(first, _)) = files.first() else {
        return Err(Error::Image {
            path: dir.into(),
            reason: "no numbered PNG frames found".into(),
        });
    };
    for (k, (index, _)) in files.iter().enumerate() {
        if *index != first + k {
            return Err(Error::MissingFrame { index: first + k });
        }
    }
    let frames: Vec<Frame<f32>> = files
        .par_iter()
        .map(|(_, p)| read_png(p))
        .collect::<Result<_>>()?;
    let (w, h) = (frames[0].width(), frames[0].height());
    for ((_, p), f) in files.iter().zip(&frames) {
        if (f.width(), f.height()) != (w, h) {
            return Err(Error::Image {
                path: p.clone(),
                reason: format!("size {}x{} differs from {w}x{h}", f.width(), f.height()),
            });
        }
    }
    VideoBuffer::new(frames)
}

/// Reads one image; 16-bit sources keep their precision.
pub fn read_png(path: &Path) -> Result<Frame<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let wide = img.color().bytes_per_pixel() / img.color().channel_count() > 1;
    let data: Vec<f32> = if wide {
        img.to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect()
    } else {
        img.to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect()
    };
    Frame::from_data(w, h, data)
}

fn sidecar_path(path: &Path) -> [PathBuf; 2] {
    let mut appended = path.as_os_str().to_owned();
    appended.push(".json");
    [PathBuf::from(appended), path.with_extension("json")]
}

fn load_raw(path: &Path) -> Result<VideoBuffer> {
    let side = sidecar_path(path)
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Image {
            path: path.into(),
            reason: "not a directory and no .json sidecar found".into(),
        })?;
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: RawSidecar = serde_json::from_str(&text).map_err(|e| Error::Image {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    let bytes_per = match meta.bit_depth {
        8 => 1,
        16 => 2,
        d => {
            return Err(Error::Image {
                path: side,
                reason: format!("bit depth {d} unsupported"),
            })
        }
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let plane = meta.width * meta.height;
    let frame_bytes = plane * 3 * bytes_per;
    if bytes.len() != frame_bytes * meta.count {
        return Err(Error::Image {
            path: path.into(),
            reason: format!(
                "expected {} bytes, found {}",
                frame_bytes * meta.count,
                bytes.len()
            ),
        });
    }
    let frames = bytes
        .chunks_exact(frame_bytes.max(1))
        .take(meta.count)
        .map(|chunk| {
            let sample = |i: usize| -> f32 {
                if bytes_per == 1 {
                    chunk[i] as f32 / 255.0
                } else {
                    u16::from_le_bytes([chunk[2 * i], chunk[2 * i + 1]]) as f32 / 65535.0
                }
            };
            Frame::from_fn(meta.width, meta.height, |x, y| {
                let p = y * meta.width + x;
                [sample(p), sample(plane + p), sample(2 * plane + p)]
            })
        })
        .collect();
    VideoBuffer::new(frames)
}

/// Writes raw planar RGB plus its sidecar at `<path>.json`.
pub fn write_raw(frames: &[Frame<f32>], path: &Path, bit_depth: u8) -> Result<()> {
    let (w, h) = frames.first().map_or((0, 0), |f| (f.width(), f.height()));
    let mut bytes = Vec::new();
    for f in frames {
        for ch in 0..3 {
            for p in f.data().chunks_exact(3) {
                let code = to_code(p[ch], bit_depth);
                if bit_depth == 8 {
                    bytes.push(code as u8);
                } else {
                    bytes.extend_from_slice(&code.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = RawSidecar {
        width: w,
        height: h,
        count: frames.len(),
        bit_depth,
    };
    let side = &sidecar_path(path)[0];
    fs::write(
        side,
        serde_json::to_string_pretty(&meta).expect("plain struct"),
    )
    .map_err(|e| Error::io(side, e))
}

fn to_code(v: f32, bit_depth: u8) -> u16 {
    let max = if bit_depth == 8 { 255.0 } else { 65535.0 };
    (v.clamp(0.0, 1.0) as f64 * max).round() as u16
}

/// File name used for frame `index` by [`write_frames`].
pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Writes one PNG, clamped to `[0, 1]`, at 8 or 16 bits per channel.
pub fn write_png(frame: &Frame<f32>, path: &Path, bit_depth: u8) -> Result<()> {
    let depth = match bit_depth {
        8 => png::BitDepth::Eight,
        16 => png::BitDepth::Sixteen,
        d => {
            return Err(Error::InvalidParameter(format!(
                "output bit depth must be 8 or 16, got {d}"
            )))
        }
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        frame.width() as u32,
        frame.height() as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(depth);
    let mut bytes = Vec::with_capacity(frame.data().len() * 2);
    for &v in frame.data() {
        let code = to_code(v, bit_depth);
        if bit_depth == 8 {
            bytes.push(code as u8);
        } else {
            bytes.extend_from_slice(&code.to_be_bytes());
        }
    }
    let png_err = |e: png::EncodingError| Error::Image {
        path: path.into(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Writes `frames` as `frame_<first + k>.png` into `dir` (created if needed)
/// and returns the paths.
pub fn write_frames(
    frames: &[Frame<f32>],
    dir: &Path,
    first: usize,
    bit_depth: u8,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .par_iter()
        .enumerate()
        .map(|(k, f)| {
            let path = dir.join(frame_file_name(first + k));
            write_png(f, &path, bit_depth).map(|_| path)
        })
        .collect()
}

/// Mean squared error over all channels.
pub fn mse<T: Real>(a: &Frame<T>, b: &Frame<T>) -> Result<f64> {
    a.check_shape(b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)` for values in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Frame<T>, b: &Frame<T>) -> Result<f64> {
    Ok(crate::train::mse_to_psnr(mse(a, b)?))
}

/// PSNR of the pooled MSE over a whole sequence.
pub fn sequence_psnr<T: Real>(a: &[Frame<T>], b: &[Frame<T>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames", a.len()),
            actual: format!("{} frames", b.len()),
        });
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| mse(x, y))
        .sum::<Result<f64>>()?;
    Ok(crate::train::mse_to_psnr(total / a.len().max(1) as f64))
}

/// Central `width x height` window (offset rounded down).
pub fn center_crop<T: Real>(frame: &Frame<T>, width: usize, height: usize) -> Result<Frame<T>> {
    if width == 0 || height == 0 || width > frame.width() || height > frame.height() {
        return Err(Error::OutOfRange {
            what: "crop",
            value: format!("{width}x{height}"),
            range: format!("1x1..={}x{}", frame.width(), frame.height()),
        });
    }
    let x0 = (frame.width() - width) / 2;
    let y0 = (frame.height() - height) / 2;
    Ok(Frame::from_fn(width, height, |x, y| {
        frame.pixel(x0 + x, y0 + y)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(w: usize, h: usize, seed: u64) -> Frame<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_cases() {
        let a = random_frame(8, 6, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let a64: Frame<f64> = Frame::from_fn(4, 4, |_, _| [0.5, 0.5, 0.5]);
        let b64: Frame<f64> = Frame::from_fn(4, 4, |_, _| [0.6, 0.6, 0.6]);
        assert!((psnr(&a64, &b64).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Frame::zeros(6, 8)).is_err());
    }

    #[test]
    fn psnr_matches_reference_loop_and_is_symmetric() {
        let a = random_frame(13, 7, 2);
        let b = random_frame(13, 7, 3);
        let mut sum = 0.0f64;
        for y in 0..7 {
            for x in 0..13 {
                for c in 0..3 {
                    let d = a.pixel(x, y)[c] as f64 - b.pixel(x, y)[c] as f64;
                    sum += d * d;
                }
            }
        }
        let reference = 10.0 * (1.0 / (sum / (13.0 * 7.0 * 3.0))).log10();
        assert!((psnr(&a, &b).unwrap() - reference).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ordered_load_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..3)
            .map(|k| Frame::from_fn(4, 2, |_, _| [k as f32 / 2.0, 1.0, 0.0]))
            .collect();
        // written out of order to check sorting
        for k in [2, 0, 1] {
            write_png(&frames[k], &dir.path().join(format!("frame_{k:03}.png")), 8).unwrap();
        }
        let buf = load_frames(dir.path()).unwrap();
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.frames[2].pixel(0, 0)[0], 1.0);
        assert_eq!(buf.frames[0].pixel(1, 1), [0.0, 1.0, 0.0]);
        assert_eq!(buf.frames[1].pixel(0, 0)[0], 128.0 / 255.0);
    }

    #[test]
    fn gap_names_missing_index() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::<f32>::zeros(2, 2);
        for k in [0, 2] {
            write_png(&f, &dir.path().join(format!("frame_{k:03}.png")), 8).unwrap();
        }
        assert!(matches!(
            load_frames(dir.path()),
            Err(Error::MissingFrame { index: 1 })
        ));
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&Frame::zeros(2, 2), &dir.path().join("f0.png"), 8).unwrap();
        write_png(&Frame::zeros(3, 2), &dir.path().join("f1.png"), 8).unwrap();
        assert!(matches!(load_frames(dir.path()), Err(Error::Image { .. })));
    }

    #[test]
    fn sixteen_bit_round_trip_within_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![random_frame(9, 5, 4), random_frame(9, 5, 5)];
        write_frames(&frames, dir.path(), 0, 16).unwrap();
        let back = load_frames(dir.path()).unwrap();
        for (a, b) in frames.iter().zip(&back.frames) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((*x as f64 - *y as f64).abs() <= 1.0 / (2.0 * 65535.0) + 1e-7);
            }
        }
        // second round trip is exact
        let dir2 = tempfile::tempdir().unwrap();
        write_frames(&back.frames, dir2.path(), 0, 16).unwrap();
        assert_eq!(load_frames(dir2.path()).unwrap().frames, back.frames);
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::from_fn(2, 1, |x, _| {
            if x == 0 {
                [-0.2, -0.2, -0.2]
            } else {
                [1.7, 1.7, 1.7]
            }
        });
        write_frames(&[f], dir.path(), 0, 16).unwrap();
        let back = load_frames(dir.path()).unwrap();
        assert_eq!(back.frames[0].pixel(0, 0), [0.0; 3]);
        assert_eq!(back.frames[0].pixel(1, 0), [1.0; 3]);
    }

    #[test]
    fn raw_planar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.rgb");
        let frames = vec![random_frame(5, 3, 6), random_frame(5, 3, 7)];
        for depth in [8, 16] {
            write_raw(&frames, &path, depth).unwrap();
            let back = load_frames(&path).unwrap();
            let tol = if depth == 8 {
                0.5 / 255.0
            } else {
                0.5 / 65535.0
            } + 1e-7;
            assert_eq!(back.len(), 2);
            for (a, b) in frames.iter().zip(&back.frames) {
                assert!(a
                    .data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| (x - y).abs() <= tol));
            }
        }
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(load_frames(&path).is_err());
    }

    #[test]
    fn crop_takes_the_center() {
        let f: Frame<f32> = Frame::from_fn(6, 4, |x, y| [x as f32, y as f32, 0.0]);
        let c = center_crop(&f, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), [2.0, 1.0, 0.0]);
        assert!(center_crop(&f, 7, 2).is_err());
    }
}
