//! 16-bit height profile → 8-bit three-channel model input.
//!
//! The chain is `quantize_center` → `triplicate` → `pad_center`. No scaling happens anywhere:
//! one gray count of height stays one 8-bit step, so the 79-count tape step survives intact.
//!
//! # ModelInput byte format
//!
//! [`ModelInput::to_bytes`] writes, all integers little-endian `u32`:
//!
//! ```text
//! width | height | channels | source_id length (bytes) | source_id (UTF-8) | values
//! ```
//!
//! `values` holds `width * height * channels` bytes, row-major with channels interleaved
//! (`[r0c0ch0, r0c0ch1, r0c0ch2, r0c1ch0, ...]`).

use crate::heightfield::HeightImage;
use crate::{Error, Result};

pub const MODEL_SIDE: usize = 224;
pub const MODEL_CHANNELS: usize = 3;

/// Mid-gray level the mean is mapped to.
const CENTER: i64 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayPatch8 {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayPatch8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} patch needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayPatch8 { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Three identical 8-bit channels, stored once per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriplePatch {
    width: usize,
    height: usize,
    channels: [Vec<u8>; 3],
}

impl TriplePatch {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        &self.channels[c]
    }
}

/// 224×224×3 8-bit tensor, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    source_id: String,
    values: Vec<u8>,
}

impl ModelInput {
    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn width(&self) -> usize {
        MODEL_SIDE
    }

    pub fn height(&self) -> usize {
        MODEL_SIDE
    }

    pub fn channels(&self) -> usize {
        MODEL_CHANNELS
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.values[(row * MODEL_SIDE + col) * MODEL_CHANNELS + channel]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.source_id.as_bytes();
        let mut out = Vec::with_capacity(16 + id.len() + self.values.len());
        for v in [MODEL_SIDE, MODEL_SIDE, MODEL_CHANNELS, id.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(id);
        out.extend_from_slice(&self.values);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let field = |i: usize| -> Result<usize> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
                .ok_or_else(|| Error::Dimension("model input header truncated".into()))
        };
        let (w, h, c, id_len) = (field(0)?, field(1)?, field(2)?, field(3)?);
        if (w, h, c) != (MODEL_SIDE, MODEL_SIDE, MODEL_CHANNELS) {
            return Err(Error::Dimension(format!("model input must be 224x224x3, header says {w}x{h}x{c}")));
        }
        let id = bytes
            .get(16..16 + id_len)
            .ok_or_else(|| Error::Dimension("model input source id truncated".into()))?;
        let source_id = String::from_utf8(id.to_vec())
            .map_err(|_| Error::Dimension("model input source id is not UTF-8".into()))?;
        let values = &bytes[16 + id_len..];
        if values.len() != w * h * c {
            return Err(Error::Dimension(format!(
                "model input carries {} value bytes, {} expected",
                values.len(),
                w * h * c
            )));
        }
        Ok(ModelInput {
            source_id,
            values: values.to_vec(),
        })
    }
}

/// `n / d` rounded half away from zero, exactly. `d > 0`.
fn div_round_half_away(n: i64, d: i64) -> i64 {
    let q = (2 * n.abs() + d) / (2 * d);
    if n < 0 {
        -q
    } else {
        q
    }
}

/// Maps each pixel to `clamp(round(v - mean + 128), 0, 255)`, rounding half away from zero.
///
/// The mean is never rounded: the result is computed exactly as
/// `round((n * (v + 128) - sum) / n)` in integer arithmetic.
pub fn quantize_center(img: &HeightImage) -> GrayPatch8 {
    let n = img.pixels().len() as i64;
    let sum: i64 = img.pixels().iter().map(|&v| i64::from(v)).sum();
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| div_round_half_away(n * (i64::from(v) + CENTER) - sum, n).clamp(0, 255) as u8)
        .collect();
    GrayPatch8 {
        width: img.width(),
        height: img.height(),
        pixels,
    }
}

pub fn triplicate(g: &GrayPatch8) -> TriplePatch {
    TriplePatch {
        width: g.width,
        height: g.height,
        channels: [g.pixels.clone(), g.pixels.clone(), g.pixels.clone()],
    }
}

/// Top-left corner `(left, top)` of a `width`×`height` source centered on the model input.
pub fn pad_offsets(width: usize, height: usize) -> (usize, usize) {
    ((MODEL_SIDE - width) / 2, (MODEL_SIDE - height) / 2)
}

/// Places the patch at the centered offset of a zero 224×224×3 canvas.
pub fn pad_center(p: &TriplePatch, source_id: impl Into<String>) -> Result<ModelInput> {
    if p.width > MODEL_SIDE || p.height > MODEL_SIDE {
        return Err(Error::Dimension(format!(
            "{}x{} patch does not fit a {MODEL_SIDE}x{MODEL_SIDE} input",
            p.width, p.height
        )));
    }
    let (left, top) = pad_offsets(p.width, p.height);
    let mut values = vec![0u8; MODEL_SIDE * MODEL_SIDE * MODEL_CHANNELS];
    for r in 0..p.height {
        for c in 0..p.width {
            let dst = ((top + r) * MODEL_SIDE + left + c) * MODEL_CHANNELS;
            for (ch, channel) in p.channels.iter().enumerate() {
                values[dst + ch] = channel[r * p.width + c];
            }
        }
    }
    Ok(ModelInput {
        source_id: source_id.into(),
        values,
    })
}

pub fn preprocess(img: &HeightImage, source_id: impl Into<String>) -> Result<ModelInput> {
    pad_center(&triplicate(&quantize_center(img)), source_id)
}
