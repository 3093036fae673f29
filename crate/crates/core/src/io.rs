//! PNG image and mask I/O.
//!
//! Frames are 8-bit RGB, masks 8-bit grayscale with 0 = background and
//! 255 = foreground, probability maps 16-bit grayscale storing
//! `round(p * 65535)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

/// An 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::shape(
                "frame",
                format!("{} bytes for {width}x{height} RGB", rgb.len()),
            ));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `[1,3,H,W]` with values in `[0,1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0; 3 * hw];
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = px[c] as f64 / 255.0;
            }
        }
        Tensor::from_parts(vec![1, 3, self.height, self.width], data)
    }
}

/// A binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "mask",
                format!("{} pixels for {width}x{height}", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Pixels with probability strictly above `threshold`.
    pub fn from_probabilities(width: usize, height: usize, p: &[f64], threshold: f64) -> Result<Self> {
        Self::new(width, height, p.iter().map(|&v| v > threshold).collect())
    }

    /// `[1,1,H,W]` of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, 1, self.height, self.width],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    bit16: bool,
    bytes: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_from(BufReader::new(file), &path.display().to_string())
}

fn decode_from(reader: impl std::io::Read, what: &str) -> Result<Decoded> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{what}: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{what}: {e}")))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Format(format!("{what}: unexpanded palette image")))
        }
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        bit16: info.bit_depth == png::BitDepth::Sixteen,
        bytes: buf,
    })
}

impl Decoded {
    /// Sample `c` of pixel `p` scaled to 8 bits.
    fn sample8(&self, p: usize, c: usize) -> u8 {
        let i = p * self.channels + c;
        if self.bit16 {
            self.bytes[2 * i]
        } else {
            self.bytes[i]
        }
    }

    fn sample16(&self, p: usize, c: usize) -> u16 {
        let i = p * self.channels + c;
        if self.bit16 {
            u16::from_be_bytes([self.bytes[2 * i], self.bytes[2 * i + 1]])
        } else {
            self.bytes[i] as u16 * 257
        }
    }

    fn color_channels(&self) -> usize {
        if self.channels >= 3 {
            3
        } else {
            1
        }
    }

    fn into_frame(self) -> Frame {
        let n = self.width * self.height;
        let mut rgb = Vec::with_capacity(n * 3);
        for p in 0..n {
            for c in 0..3 {
                let src = if self.color_channels() == 3 { c } else { 0 };
                rgb.push(self.sample8(p, src));
            }
        }
        Frame {
            width: self.width,
            height: self.height,
            rgb,
        }
    }

    fn into_mask(self) -> Mask {
        let n = self.width * self.height;
        let cc = self.color_channels();
        let data = (0..n)
            .map(|p| (0..cc).any(|c| self.sample8(p, c) >= 128))
            .collect();
        Mask {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

fn encode(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = BufWriter::new(file);
    encode_to(&mut buf, width, height, color, depth, bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn encode_to(
    w: impl std::io::Write,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> std::result::Result<(), png::EncodingError> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header()?;
    writer.write_image_data(bytes)?;
    writer.finish()
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    Ok(decode(path)?.into_frame())
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    encode(
        path,
        frame.width,
        frame.height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &frame.rgb,
    )
}

/// Reads a mask; any sample >= 128 (in 8-bit scale) counts as foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(decode(path)?.into_mask())
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask> {
    Ok(decode_from(bytes, "mask upload")?.into_mask())
}

pub fn decode_frame_png(bytes: &[u8]) -> Result<Frame> {
    Ok(decode_from(bytes, "frame upload")?.into_frame())
}

fn mask_bytes(mask: &Mask) -> Vec<u8> {
    mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect()
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    encode(
        path,
        mask.width,
        mask.height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &mask_bytes(mask),
    )
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_to(
        &mut out,
        mask.width,
        mask.height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &mask_bytes(mask),
    )
    .map_err(|e| Error::Format(format!("mask encoding: {e}")))?;
    Ok(out)
}

pub fn encode_frame_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_to(
        &mut out,
        frame.width,
        frame.height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &frame.rgb,
    )
    .map_err(|e| Error::Format(format!("frame encoding: {e}")))?;
    Ok(out)
}

/// Writes probabilities in `[0,1]` as a 16-bit grayscale PNG.
pub fn write_probability(path: &Path, width: usize, height: usize, p: &[f64]) -> Result<()> {
    if p.len() != width * height {
        return Err(Error::shape(
            "probability map",
            format!("{} values for {width}x{height}", p.len()),
        ));
    }
    let bytes: Vec<u8> = p
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    encode(
        path,
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

/// Reads a probability map written by [`write_probability`].
pub fn read_probability(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let d = decode(path)?;
    let n = d.width * d.height;
    let p = (0..n).map(|i| d.sample16(i, 0) as f64 / 65535.0).collect();
    Ok((d.width, d.height, p))
}

/// PNG files in `dir`, sorted lexicographically by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// All frames of a directory in lexicographic order; every frame must share
/// the first frame's resolution.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<Frame>> {
    let paths = list_pngs(dir)?;
    let mut frames: Vec<Frame> = Vec::with_capacity(paths.len());
    for path in &paths {
        let f = read_frame(path)?;
        if let Some(first) = frames.first() {
            if f.resolution() != first.resolution() {
                return Err(Error::Input(format!(
                    "frame {} is {}x{}, expected {}x{}",
                    path.display(),
                    f.width,
                    f.height,
                    first.width,
                    first.height
                )));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

/// `%05d.png`
pub fn frame_file_name(index: usize) -> String {
    format!("{index:05}.png")
}
