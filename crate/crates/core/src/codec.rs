//! The `GSVR` container.
//!
//! Each quantized attribute channel is laid out on a square grid in Morton
//! order and stored as a lossless grayscale image; each feature plane is one
//! image with its eight channels stacked vertically. `FORMAT.md` at the
//! repository root documents every byte.

use std::io::Cursor;

use rayon::prelude::*;

use crate::deform::{FieldMode, CHANNELS};
use crate::error::{Error, Result};
use crate::gaussian::PARAMS_PER_GAUSSIAN;
use crate::quant::{BitPlan, QuantizedChannel, QuantizedGop, QuantizedPlane};

pub const MAGIC: &[u8; 4] = b"GSVR";
pub const VERSION_MAJOR: u16 = 1;
pub const VERSION_MINOR: u16 = 0;

const HEADER_LEN: usize = 28;
const GOP_ENTRY_LEN: usize = 16;

/// How 8- and 16-bit code grids are stored. 32-bit channels are always raw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ImageCodec {
    #[default]
    Png,
    /// Uncompressed little-endian samples.
    Raw,
}

impl ImageCodec {
    pub fn code(self) -> u8 {
        match self {
            Self::Png => 0,
            Self::Raw => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Png),
            1 => Some(Self::Raw),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Png => "png",
            Self::Raw => "raw",
        }
    }
}

/// Side of the square grid holding `n` cells.
pub fn grid_side(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    while s > 0 && (s - 1) * (s - 1) >= n {
        s -= 1;
    }
    s
}

/// Row-major `side x side` grid; padding cells repeat the last code.
pub fn pack_grid(codes: &[u32]) -> (usize, Vec<u32>) {
    let side = grid_side(codes.len());
    let mut grid = codes.to_vec();
    grid.resize(side * side, codes.last().copied().unwrap_or(0));
    (side, grid)
}

/// Inverse of [`pack_grid`]: the first `n` cells.
pub fn unpack_grid(grid: &[u32], n: usize) -> Result<Vec<u32>> {
    if grid.len() < n {
        return Err(Error::decode(
            "grid",
            format!("{} cells cannot hold {n} values", grid.len()),
        ));
    }
    Ok(grid[..n].to_vec())
}

fn encode_image(
    samples: &[u32],
    width: usize,
    height: usize,
    bits: u8,
    codec: ImageCodec,
) -> Result<Vec<u8>> {
    debug_assert_eq!(samples.len(), width * height);
    if bits == 32 || codec == ImageCodec::Raw {
        let mut out = Vec::with_capacity(samples.len() * (bits as usize / 8));
        for &s in samples {
            match bits {
                8 => out.push(s as u8),
                16 => out.extend_from_slice(&(s as u16).to_le_bytes()),
                _ => out.extend_from_slice(&s.to_le_bytes()),
            }
        }
        return Ok(out);
    }
    let mut bytes = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        if bits == 8 {
            bytes.push(s as u8);
        } else {
            bytes.extend_from_slice(&(s as u16).to_be_bytes());
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(if bits == 8 {
        png::BitDepth::Eight
    } else {
        png::BitDepth::Sixteen
    });
    enc.set_compression(png::Compression::High);
    let err = |e: png::EncodingError| Error::InvalidParameter(format!("png encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&bytes).map_err(err)?;
    writer.finish().map_err(err)?;
    Ok(out)
}

fn decode_image(
    blob: &[u8],
    width: usize,
    height: usize,
    bits: u8,
    codec: ImageCodec,
    section: &str,
) -> Result<Vec<u32>> {
    let n = width * height;
    if bits == 32 || codec == ImageCodec::Raw {
        let per = bits as usize / 8;
        if blob.len() != n * per {
            return Err(Error::decode(
                section,
                format!("expected {} raw bytes, found {}", n * per, blob.len()),
            ));
        }
        return Ok(blob
            .chunks_exact(per)
            .map(|c| match per {
                1 => c[0] as u32,
                2 => u16::from_le_bytes([c[0], c[1]]) as u32,
                _ => u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
            })
            .collect());
    }
    let err = |e: png::DecodingError| Error::decode(section, format!("png: {e}"));
    let mut reader = png::Decoder::new(Cursor::new(blob))
        .read_info()
        .map_err(err)?;
    let info = reader.info();
    let want_depth = if bits == 8 {
        png::BitDepth::Eight
    } else {
        png::BitDepth::Sixteen
    };
    if (info.width as usize, info.height as usize) != (width, height)
        || info.color_type != png::ColorType::Grayscale
        || info.bit_depth != want_depth
    {
        return Err(Error::decode(
            section,
            format!(
                "image is {}x{} {:?}/{:?}, expected {width}x{height} grayscale {bits}-bit",
                info.width, info.height, info.color_type, info.bit_depth
            ),
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::decode(section, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(err)?;
    let buf = &buf[..frame.buffer_size()];
    Ok(if bits == 8 {
        buf.iter().map(|&b| b as u32).collect()
    } else {
        buf.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            .collect()
    })
}

/// A whole encoded video.
#[derive(Clone, Debug, PartialEq)]
pub struct GsvrContainer {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub codec: ImageCodec,
    pub gops: Vec<QuantizedGop>,
}

impl GsvrContainer {
    /// Checks that the GOP ranges tile `0..frame_count` in order.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (i, g) in self.gops.iter().enumerate() {
            if g.frame_range.0 != next || g.frame_range.1 < g.frame_range.0 {
                return Err(Error::InvalidParameter(format!(
                    "GOP {i} covers {:?}, expected to start at {next}",
                    g.frame_range
                )));
            }
            next = g.frame_range.1 + 1;
        }
        if next != self.frame_count {
            return Err(Error::InvalidParameter(format!(
                "GOPs cover {next} frames, header says {}",
                self.frame_count
            )));
        }
        Ok(())
    }

    pub fn gaussian_count(&self) -> usize {
        self.gops.iter().map(QuantizedGop::gaussian_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.gops.iter().map(QuantizedGop::param_count).sum()
    }

    /// Size of every parameter stored as a 32-bit float.
    pub fn raw_param_bytes(&self) -> usize {
        self.param_count() * 4
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::InvalidParameter(format!("{v} does not fit in 32 bits")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn blob(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::decode(
                    section,
                    format!(
                        "truncated: need {n} bytes at offset {}, {} available",
                        self.pos,
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, s: &str) -> Result<u8> {
        Ok(self.take(1, s)?[0])
    }
    fn u16(&mut self, s: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, s)?.try_into().unwrap()))
    }
    fn u32(&mut self, s: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, s)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, s: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, s)?.try_into().unwrap()))
    }
    fn f32(&mut self, s: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, s)?.try_into().unwrap()))
    }
    fn blob(&mut self, s: &str) -> Result<&'a [u8]> {
        let n = self.u32(s)?;
        self.take(n, s)
    }
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn encode_gop(gop: &QuantizedGop, codec: ImageCodec) -> Result<Vec<u8>> {
    let n = gop.gaussian_count();
    if gop.attributes.len() != PARAMS_PER_GAUSSIAN {
        return Err(Error::InvalidParameter(format!(
            "{} attribute channels",
            gop.attributes.len()
        )));
    }
    let side = grid_side(n);
    let [xy, xt, yt] = &gop.planes;
    let (nx, ny, nt) = (xy.rows, xy.cols, xt.cols);
    if (xt.rows, yt.rows, yt.cols) != (nx, ny, nt) {
        return Err(Error::InvalidParameter("inconsistent plane shapes".into()));
    }
    let mut w = Writer(Vec::new());
    w.u8(gop.mode.code());
    for b in [
        gop.plan.position,
        gop.plan.color,
        gop.plan.other,
        gop.plan.plane,
    ] {
        w.u8(b);
    }
    w.0.extend_from_slice(&[0; 3]);
    w.u32(n)?;
    w.u32(side)?;
    w.u32(nx)?;
    w.u32(ny)?;
    w.u32(nt)?;
    for ch in &gop.attributes {
        w.f32(ch.min);
        w.f32(ch.max);
    }
    for plane in &gop.planes {
        for ch in &plane.channels {
            w.f32(ch.min);
            w.f32(ch.max);
        }
    }
    for (k, ch) in gop.attributes.iter().enumerate() {
        if ch.bits != gop.plan.channel_bits(k) || ch.codes.len() != n {
            return Err(Error::InvalidParameter(format!(
                "attribute channel {k} disagrees with the bit plan"
            )));
        }
        let (_, grid) = pack_grid(&ch.codes);
        w.blob(&encode_image(&grid, side, side, ch.bits, codec)?)?;
    }
    for plane in &gop.planes {
        let stacked: Vec<u32> = plane
            .channels
            .iter()
            .flat_map(|c| c.codes.iter().copied())
            .collect();
        w.blob(&encode_image(
            &stacked,
            plane.cols,
            plane.rows * CHANNELS,
            gop.plan.plane,
            codec,
        )?)?;
    }
    Ok(w.0)
}

const PLANE_NAMES: [&str; 3] = ["xy", "xt", "yt"];

fn decode_gop(
    bytes: &[u8],
    frame_range: (usize, usize),
    codec: ImageCodec,
    index: usize,
) -> Result<QuantizedGop> {
    let sec = |part: &str| format!("gop {index} {part}");
    let mut r = Reader::new(bytes);
    let head = sec("header");
    let mode_code = r.u8(&head)?;
    let mode = FieldMode::from_code(mode_code)
        .ok_or_else(|| Error::decode(&head, format!("unknown field mode {mode_code}")))?;
    let plan = BitPlan {
        position: r.u8(&head)?,
        color: r.u8(&head)?,
        other: r.u8(&head)?,
        plane: r.u8(&head)?,
    };
    plan.validate()
        .map_err(|e| Error::decode(&head, e.to_string()))?;
    r.take(3, &head)?;
    let n = r.u32(&head)?;
    let side = r.u32(&head)?;
    let (nx, ny, nt) = (r.u32(&head)?, r.u32(&head)?, r.u32(&head)?);
    if n == 0 || side != grid_side(n) {
        return Err(Error::decode(
            &head,
            format!("grid side {side} does not fit {n} gaussians"),
        ));
    }
    if nx == 0 || ny == 0 || nt == 0 {
        return Err(Error::decode(
            &head,
            format!("empty plane resolution {nx}x{ny}x{nt}"),
        ));
    }
    let ranges_sec = sec("ranges");
    let mut attr_ranges = Vec::with_capacity(PARAMS_PER_GAUSSIAN);
    for _ in 0..PARAMS_PER_GAUSSIAN {
        attr_ranges.push((r.f32(&ranges_sec)?, r.f32(&ranges_sec)?));
    }
    let mut plane_ranges = Vec::with_capacity(3 * CHANNELS);
    for _ in 0..3 * CHANNELS {
        plane_ranges.push((r.f32(&ranges_sec)?, r.f32(&ranges_sec)?));
    }
    let mut attributes = Vec::with_capacity(PARAMS_PER_GAUSSIAN);
    for (k, (min, max)) in attr_ranges.into_iter().enumerate() {
        let s = sec(&format!("attribute {k}"));
        let bits = plan.channel_bits(k);
        let grid = decode_image(r.blob(&s)?, side, side, bits, codec, &s)?;
        attributes.push(QuantizedChannel {
            bits,
            min,
            max,
            codes: unpack_grid(&grid, n)?,
        });
    }
    let shapes = [(nx, ny), (nx, nt), (ny, nt)];
    let mut planes = Vec::with_capacity(3);
    for (p, &(rows, cols)) in shapes.iter().enumerate() {
        let s = sec(&format!("plane {}", PLANE_NAMES[p]));
        let samples = decode_image(r.blob(&s)?, cols, rows * CHANNELS, plan.plane, codec, &s)?;
        let channels = samples
            .chunks_exact(rows * cols)
            .zip(&plane_ranges[p * CHANNELS..(p + 1) * CHANNELS])
            .map(|(codes, &(min, max))| QuantizedChannel {
                bits: plan.plane,
                min,
                max,
                codes: codes.to_vec(),
            })
            .collect();
        planes.push(QuantizedPlane {
            rows,
            cols,
            channels,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::decode(
            sec("trailer"),
            format!("{} unexpected trailing bytes", r.remaining()),
        ));
    }
    let max_code = |bits: u8| QuantizedChannel::max_code(bits);
    for ch in attributes
        .iter()
        .chain(planes.iter().flat_map(|p| p.channels.iter()))
    {
        if ch.codes.iter().any(|&c| c > max_code(ch.bits)) {
            return Err(Error::decode(sec("codes"), "code exceeds its bit depth"));
        }
    }
    let planes: [QuantizedPlane; 3] = planes.try_into().expect("three planes");
    Ok(QuantizedGop {
        frame_range,
        mode,
        plan,
        attributes,
        planes,
    })
}

/// Serializes the container. GOP blocks are encoded in parallel and written
/// in order, so the output does not depend on the thread count.
pub fn encode_container(container: &GsvrContainer) -> Result<Vec<u8>> {
    container.validate()?;
    let blocks: Vec<Vec<u8>> = container
        .gops
        .par_iter()
        .enumerate()
        .map(|(i, g)| encode_gop(g, container.codec).map_err(|e| e.in_gop(i)))
        .collect::<Result<_>>()?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION_MAJOR);
    w.u16(VERSION_MINOR);
    w.u32(container.width)?;
    w.u32(container.height)?;
    w.u32(container.frame_count)?;
    w.u8(container.codec.code());
    w.0.extend_from_slice(&[0; 3]);
    w.u32(container.gops.len())?;
    for (g, b) in container.gops.iter().zip(&blocks) {
        w.u32(g.frame_range.0)?;
        w.u32(g.frame_range.1)?;
        w.u64(b.len() as u64);
    }
    for b in &blocks {
        w.0.extend_from_slice(b);
    }
    Ok(w.0)
}

/// Header and GOP table, without the GOP payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainerInfo {
    pub version: (u16, u16),
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub codec: ImageCodec,
    /// `(first frame, last frame, block bytes)` per GOP.
    pub gops: Vec<(usize, usize, u64)>,
    pub total_bytes: usize,
}

impl ContainerInfo {
    /// Container bits per video pixel.
    pub fn bpp(&self) -> f64 {
        self.total_bytes as f64 * 8.0 / (self.width * self.height * self.frame_count).max(1) as f64
    }

    /// Container bits per stored parameter.
    pub fn bits_per_param(&self, param_count: usize) -> f64 {
        self.total_bytes as f64 * 8.0 / param_count.max(1) as f64
    }
}

fn read_header<'a>(bytes: &'a [u8]) -> Result<(ContainerInfo, Reader<'a>)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "header")?;
    if magic != MAGIC {
        return Err(Error::decode("header", format!("bad magic {magic:?}")));
    }
    let major = r.u16("header")?;
    let minor = r.u16("header")?;
    if major != VERSION_MAJOR {
        return Err(Error::UnsupportedVersion { major, minor });
    }
    if minor > VERSION_MINOR {
        log::warn!(
            "container minor version {minor} is newer than {VERSION_MINOR}; decoding anyway"
        );
    }
    let width = r.u32("header")?;
    let height = r.u32("header")?;
    let frame_count = r.u32("header")?;
    let codec_code = r.u8("header")?;
    let codec = ImageCodec::from_code(codec_code)
        .ok_or_else(|| Error::decode("header", format!("unknown image codec {codec_code}")))?;
    r.take(3, "header")?;
    let count = r.u32("header")?;
    debug_assert_eq!(r.pos, HEADER_LEN);
    if count > r.remaining() / GOP_ENTRY_LEN {
        return Err(Error::decode(
            "gop table",
            format!("truncated: {count} entries announced"),
        ));
    }
    let mut gops = Vec::with_capacity(count);
    let mut next = 0;
    for i in 0..count {
        let first = r.u32("gop table")?;
        let last = r.u32("gop table")?;
        let len = r.u64("gop table")?;
        if first != next || last < first {
            return Err(Error::decode(
                "gop table",
                format!("entry {i} covers {first}..={last}, expected start {next}"),
            ));
        }
        next = last + 1;
        gops.push((first, last, len));
    }
    if next != frame_count {
        return Err(Error::decode(
            "gop table",
            format!("GOPs cover {next} frames, header says {frame_count}"),
        ));
    }
    let info = ContainerInfo {
        version: (major, minor),
        width,
        height,
        frame_count,
        codec,
        gops,
        total_bytes: bytes.len(),
    };
    Ok((info, r))
}

/// Parses only the header and GOP table.
pub fn inspect_container(bytes: &[u8]) -> Result<ContainerInfo> {
    read_header(bytes).map(|(info, _)| info)
}

pub fn decode_container(bytes: &[u8]) -> Result<GsvrContainer> {
    let (info, mut r) = read_header(bytes)?;
    let mut slices = Vec::with_capacity(info.gops.len());
    for (i, &(first, last, len)) in info.gops.iter().enumerate() {
        let len = usize::try_from(len)
            .map_err(|_| Error::decode(format!("gop {i}"), "block length overflows"))?;
        slices.push(((first, last), r.take(len, &format!("gop {i} block"))?));
    }
    if r.remaining() != 0 {
        return Err(Error::decode(
            "trailer",
            format!("{} unexpected trailing bytes", r.remaining()),
        ));
    }
    let gops = slices
        .into_par_iter()
        .enumerate()
        .map(|(i, (range, block))| decode_gop(block, range, info.codec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(GsvrContainer {
        width: info.width,
        height: info.height,
        frame_count: info.frame_count,
        codec: info.codec,
        gops,
    })
}
