//! Physical data model of tape-laying height profiles.
//!
//! A height profile is a 16-bit grayscale raster. Columns run across the tape width
//! (`x_mm_per_px`), rows run along the layup direction, one scanline per row
//! (`y_mm_per_px`), and each gray count is a fixed height step (`z_microns_per_gray`).

pub mod synth;
pub mod tiff;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use synth::{
    default_counts, synthesize_dataset, synthesize_patch, DatasetManifest, LabeledPatch,
    ManifestEntry, PatchProvenance, SynthesisConfig, PATCH_HEIGHT, PATCH_WIDTH,
};

/// Sensor calibration of a height image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub z_microns_per_gray: f64,
    pub x_mm_per_px: f64,
    pub y_mm_per_px: f64,
    pub tape_height_gray: u16,
    pub tape_width_mm: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            z_microns_per_gray: 1.77,
            x_mm_per_px: 0.041,
            y_mm_per_px: 0.4,
            tape_height_gray: 79,
            tape_width_mm: 12.54,
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("z_microns_per_gray", self.z_microns_per_gray),
            ("x_mm_per_px", self.x_mm_per_px),
            ("y_mm_per_px", self.y_mm_per_px),
            ("tape_width_mm", self.tape_width_mm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("calibration {name} must be > 0, got {v}")));
            }
        }
        if self.tape_height_gray == 0 {
            return Err(Error::Config("calibration tape_height_gray must be > 0".into()));
        }
        Ok(())
    }

    /// Physical tape thickness in micrometres.
    pub fn tape_thickness_microns(&self) -> f64 {
        f64::from(self.tape_height_gray) * self.z_microns_per_gray
    }
}

/// Row-major 16-bit height raster.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightImage {
    width: usize,
    height: usize,
    pixels: Vec<u16>,
    calibration: Calibration,
}

impl HeightImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>, calibration: Calibration) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(HeightImage {
            width,
            height,
            pixels,
            calibration,
        })
    }

    pub fn filled(width: usize, height: usize, value: u16, calibration: Calibration) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], calibration)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    pub fn get(&self, col: usize, row: usize) -> u16 {
        self.pixels[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[u16] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    pub fn with_calibration(mut self, calibration: Calibration) -> Self {
        self.calibration = calibration;
        self
    }

    pub fn into_pixels(self) -> Vec<u16> {
        self.pixels
    }
}

/// Physical size of an image: across-tape width, along-layup length and height range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalExtent {
    pub width_mm: f64,
    pub length_mm: f64,
    pub z_range_microns: f64,
}

pub fn physical_extent(img: &HeightImage) -> PhysicalExtent {
    let cal = img.calibration();
    let (lo, hi) = img
        .pixels()
        .iter()
        .fold((u16::MAX, u16::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    PhysicalExtent {
        width_mm: img.width() as f64 * cal.x_mm_per_px,
        length_mm: img.height() as f64 * cal.y_mm_per_px,
        z_range_microns: f64::from(hi - lo) * cal.z_microns_per_gray,
    }
}

/// Defect class of a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectLabel {
    Nominal,
    Gap,
    Overlap,
}

impl DefectLabel {
    /// All labels in class-index order.
    pub const ALL: [DefectLabel; 3] = [DefectLabel::Nominal, DefectLabel::Gap, DefectLabel::Overlap];

    pub fn index(self) -> usize {
        match self {
            DefectLabel::Nominal => 0,
            DefectLabel::Gap => 1,
            DefectLabel::Overlap => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DefectLabel::Nominal => "nominal",
            DefectLabel::Gap => "gap",
            DefectLabel::Overlap => "overlap",
        }
    }
}

impl fmt::Display for DefectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefectLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nominal" => Ok(DefectLabel::Nominal),
            "gap" => Ok(DefectLabel::Gap),
            "overlap" => Ok(DefectLabel::Overlap),
            other => Err(Error::Dataset(format!("unknown label `{other}`"))),
        }
    }
}
