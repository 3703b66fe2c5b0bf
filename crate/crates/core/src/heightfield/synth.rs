//! Seeded synthetic generator for labeled defect patches.
//!
//! Every patch is built from a noise-free column profile plus i.i.d. Gaussian sensor noise:
//!
//! - the tape plateau (`substrate + tape_height`) covers columns `[0, boundary)`, the bare
//!   substrate covers `[boundary, width)`;
//! - a gap drops a strip of `width` columns inside the tape plateau to substrate level, with
//!   at least one tape column on either side;
//! - an overlap raises a strip straddling the boundary to `substrate + 2 * tape_height`.
//!
//! Geometry is drawn first and noise second from the same seeded stream, so the geometry of a
//! patch can be recovered without paying for the noise.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Calibration, DefectLabel, HeightImage};
use crate::{pool, rng, Error, Result};

pub const PATCH_WIDTH: usize = 152;
pub const PATCH_HEIGHT: usize = 100;

/// Inclusive integer range `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange(pub usize, pub usize);

impl IntRange {
    pub fn lo(&self) -> usize {
        self.0
    }

    pub fn hi(&self) -> usize {
        self.1
    }

    fn sample(&self, r: &mut rng::Rng) -> usize {
        r.random_range(self.0..=self.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub substrate_level_gray: u16,
    pub noise_sigma_gray: f64,
    pub defect_width_px: IntRange,
    pub boundary_column_px: IntRange,
    pub seed: u64,
    pub calibration: Calibration,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            substrate_level_gray: 20_000,
            noise_sigma_gray: 3.0,
            defect_width_px: IntRange(3, 20),
            boundary_column_px: IntRange(72, 80),
            seed: 0,
            calibration: Calibration::default(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        let top = u32::from(self.substrate_level_gray) + 2 * u32::from(self.calibration.tape_height_gray);
        if top > u32::from(u16::MAX) {
            return Err(Error::Config(format!(
                "substrate {} + 2 x tape height {} exceeds 65535",
                self.substrate_level_gray, self.calibration.tape_height_gray
            )));
        }
        if !(self.noise_sigma_gray.is_finite() && self.noise_sigma_gray >= 0.0) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma_gray)));
        }
        for (name, r) in [("defect_width_px", self.defect_width_px), ("boundary_column_px", self.boundary_column_px)] {
            if r.lo() > r.hi() {
                return Err(Error::Config(format!("{name} range [{}, {}] is empty", r.lo(), r.hi())));
            }
            if r.lo() == 0 || r.hi() >= PATCH_WIDTH {
                return Err(Error::Config(format!(
                    "{name} range [{}, {}] must lie inside (0, {PATCH_WIDTH})",
                    r.lo(),
                    r.hi()
                )));
            }
        }
        Ok(())
    }
}

/// Where a patch came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchProvenance {
    pub seed: u64,
    pub boundary_column_px: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub defect_column_px: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub defect_width_px: Option<usize>,
    pub noise_sigma_gray: f64,
}

/// A 152×100 height patch with its defect label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    image: HeightImage,
    label: DefectLabel,
    provenance: PatchProvenance,
}

impl LabeledPatch {
    pub fn new(image: HeightImage, label: DefectLabel, provenance: PatchProvenance) -> Result<Self> {
        if image.width() != PATCH_WIDTH || image.height() != PATCH_HEIGHT {
            return Err(Error::Dimension(format!(
                "patch must be {PATCH_WIDTH}x{PATCH_HEIGHT}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let has_defect = provenance.defect_column_px.is_some() && provenance.defect_width_px.is_some();
        let no_defect = provenance.defect_column_px.is_none() && provenance.defect_width_px.is_none();
        match label {
            DefectLabel::Nominal if !no_defect => {
                return Err(Error::Geometry("nominal patch must not carry defect geometry".into()))
            }
            DefectLabel::Gap | DefectLabel::Overlap if !has_defect => {
                return Err(Error::Geometry(format!("{label} patch must carry defect geometry")))
            }
            _ => {}
        }
        Ok(LabeledPatch {
            image,
            label,
            provenance,
        })
    }

    pub fn image(&self) -> &HeightImage {
        &self.image
    }

    pub fn label(&self) -> DefectLabel {
        self.label
    }

    pub fn provenance(&self) -> &PatchProvenance {
        &self.provenance
    }

    pub fn into_image(self) -> HeightImage {
        self.image
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    boundary: usize,
    strip: Option<(usize, usize)>,
}

fn draw_geometry(cfg: &SynthesisConfig, label: DefectLabel, r: &mut rng::Rng) -> Result<Geometry> {
    let boundary = cfg.boundary_column_px.sample(r);
    let strip = match label {
        DefectLabel::Nominal => None,
        DefectLabel::Gap => {
            let width = cfg.defect_width_px.sample(r);
            // one tape column on each side of the strip
            if boundary < width + 2 {
                return Err(Error::Geometry(format!(
                    "gap of {width} px does not fit inside a tape plateau of {boundary} px"
                )));
            }
            let start = r.random_range(1..=boundary - width - 1);
            Some((start, width))
        }
        DefectLabel::Overlap => {
            let width = cfg.defect_width_px.sample(r);
            let half = width / 2;
            if width < 2 || half > boundary || boundary - half + width > PATCH_WIDTH {
                return Err(Error::Geometry(format!(
                    "overlap of {width} px around column {boundary} exceeds the patch bounds"
                )));
            }
            Some((boundary - half, width))
        }
    };
    Ok(Geometry { boundary, strip })
}

fn column_profile(cfg: &SynthesisConfig, label: DefectLabel, g: &Geometry) -> Vec<f64> {
    let substrate = f64::from(cfg.substrate_level_gray);
    let tape = f64::from(cfg.calibration.tape_height_gray);
    let mut profile: Vec<f64> = (0..PATCH_WIDTH)
        .map(|c| if c < g.boundary { substrate + tape } else { substrate })
        .collect();
    if let Some((start, width)) = g.strip {
        let level = match label {
            DefectLabel::Gap => substrate,
            DefectLabel::Overlap => substrate + 2.0 * tape,
            DefectLabel::Nominal => unreachable!("nominal patches have no strip"),
        };
        profile[start..start + width].iter_mut().for_each(|v| *v = level);
    }
    profile
}

/// Generates one patch. A pure function of `(cfg, label, seed)`; `cfg.seed` is not used.
pub fn synthesize_patch(cfg: &SynthesisConfig, label: DefectLabel, seed: u64) -> Result<LabeledPatch> {
    cfg.validate()?;
    let mut r = rng::seeded(seed);
    let geometry = draw_geometry(cfg, label, &mut r)?;
    let profile = column_profile(cfg, label, &geometry);

    let sigma = cfg.noise_sigma_gray;
    let mut pixels = Vec::with_capacity(PATCH_WIDTH * PATCH_HEIGHT);
    if sigma == 0.0 {
        for _ in 0..PATCH_HEIGHT {
            pixels.extend(profile.iter().map(|&v| v as u16));
        }
    } else {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..PATCH_HEIGHT {
            for &v in &profile {
                let noisy = (v + noise.sample(&mut r)).round();
                pixels.push(noisy.clamp(0.0, f64::from(u16::MAX)) as u16);
            }
        }
    }

    let image = HeightImage::new(PATCH_WIDTH, PATCH_HEIGHT, pixels, cfg.calibration)?;
    let provenance = PatchProvenance {
        seed,
        boundary_column_px: geometry.boundary,
        defect_column_px: geometry.strip.map(|s| s.0),
        defect_width_px: geometry.strip.map(|s| s.1),
        noise_sigma_gray: sigma,
    };
    LabeledPatch::new(image, label, provenance)
}

/// Default class mix (84 % nominal, 12 % gap, 4 % overlap) for `total` patches,
/// rounded by largest remainder.
pub fn default_counts(total: usize) -> BTreeMap<DefectLabel, usize> {
    const SHARES: [(DefectLabel, usize); 3] =
        [(DefectLabel::Nominal, 84), (DefectLabel::Gap, 12), (DefectLabel::Overlap, 4)];
    let mut counts: Vec<(DefectLabel, usize, usize)> = SHARES
        .iter()
        .map(|&(l, pct)| (l, total * pct / 100, total * pct % 100))
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].2.cmp(&counts[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(total - assigned) {
        counts[i].1 += 1;
    }
    counts.into_iter().map(|(l, n, _)| (l, n)).collect()
}

/// One patch in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub item_id: String,
    pub file: String,
    pub label: DefectLabel,
    #[serde(flatten)]
    pub provenance: PatchProvenance,
}

/// JSON description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthesisConfig,
    pub counts: BTreeMap<DefectLabel, usize>,
    pub patches: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Plans a dataset: item ids, files and derived seeds, with geometry but no pixels.
    pub fn plan(cfg: &SynthesisConfig, counts: &BTreeMap<DefectLabel, usize>) -> Result<Self> {
        cfg.validate()?;
        let mut patches = Vec::with_capacity(counts.values().sum());
        for label in DefectLabel::ALL {
            let n = counts.get(&label).copied().unwrap_or(0);
            for i in 0..n {
                let seed = patch_seed(cfg.seed, label, i);
                let mut r = rng::seeded(seed);
                let g = draw_geometry(cfg, label, &mut r)?;
                let item_id = format!("{label}_{i:06}");
                patches.push(ManifestEntry {
                    file: format!("patches/{item_id}.tif"),
                    item_id,
                    label,
                    provenance: PatchProvenance {
                        seed,
                        boundary_column_px: g.boundary,
                        defect_column_px: g.strip.map(|s| s.0),
                        defect_width_px: g.strip.map(|s| s.1),
                        noise_sigma_gray: cfg.noise_sigma_gray,
                    },
                });
            }
        }
        let counts = DefectLabel::ALL
            .iter()
            .map(|&l| (l, counts.get(&l).copied().unwrap_or(0)))
            .collect();
        Ok(DatasetManifest {
            config: cfg.clone(),
            counts,
            patches,
        })
    }

    pub fn synthesize(&self, entry: &ManifestEntry) -> Result<LabeledPatch> {
        synthesize_patch(&self.config, entry.label, entry.provenance.seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Seed of the `index`-th patch of `label`; distinct for distinct `(label, index)`.
fn patch_seed(base: u64, label: DefectLabel, index: usize) -> u64 {
    rng::derive_seed(base, ((label.index() as u64) << 40) | index as u64)
}

/// Generates `counts[label]` patches per label with distinct derived seeds.
pub fn synthesize_dataset(
    cfg: &SynthesisConfig,
    counts: &BTreeMap<DefectLabel, usize>,
) -> Result<(Vec<LabeledPatch>, DatasetManifest)> {
    let manifest = DatasetManifest::plan(cfg, counts)?;
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let patches = pool::parallel_map(&manifest.patches, workers, |e| manifest.synthesize(e))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((patches, manifest))
}
