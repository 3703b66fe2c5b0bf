//! Minimal 16-bit grayscale TIFF codec.
//!
//! The writer always produces the same layout:
//!
//! ```text
//! offset 0    "II" 0x2A00, IFD offset = 8
//! offset 8    IFD: entry count (9), nine 12-byte entries sorted by tag, next IFD = 0
//! offset 122  pixel data, one strip, u16 little-endian, row-major
//! ```
//!
//! Tags written: ImageWidth, ImageLength, BitsPerSample=16, Compression=1,
//! PhotometricInterpretation=1, StripOffsets, RowsPerStrip=ImageLength, StripByteCounts,
//! SampleFormat=1.
//!
//! The reader accepts little-endian files with uncompressed, single-sample, unsigned 16-bit
//! data in one or more strips. Anything else is rejected with the offending field named.

use super::{Calibration, HeightImage};

const TAG_IMAGE_WIDTH: u16 = 256;
const TAG_IMAGE_LENGTH: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_BYTE_COUNTS: u16 = 279;
const TAG_PLANAR_CONFIG: u16 = 284;
const TAG_SAMPLE_FORMAT: u16 = 339;

const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;

const HEADER_LEN: usize = 8;
const ENTRY_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TiffError {
    #[error("truncated file: {0}")]
    Truncated(&'static str),
    #[error("unsupported byte order {0:?} (only little-endian \"II\")")]
    ByteOrder([u8; 2]),
    #[error("bad magic number {0} (expected 42)")]
    Magic(u16),
    #[error("missing required tag {0}")]
    MissingTag(&'static str),
    #[error("unsupported {field} = {value}")]
    Unsupported { field: &'static str, value: u32 },
    #[error("inconsistent {field}: {detail}")]
    Inconsistent { field: &'static str, detail: String },
    #[error("image too large for a classic TIFF")]
    TooLarge,
}

type Result<T> = std::result::Result<T, TiffError>;

struct Entry {
    tag: u16,
    typ: u16,
    value: u32,
}

pub fn encode_image(img: &HeightImage) -> Result<Vec<u8>> {
    let width = u32::try_from(img.width()).map_err(|_| TiffError::TooLarge)?;
    let height = u32::try_from(img.height()).map_err(|_| TiffError::TooLarge)?;
    let data_len = u32::try_from(img.pixels().len() * 2).map_err(|_| TiffError::TooLarge)?;

    let entries = [
        Entry { tag: TAG_IMAGE_WIDTH, typ: TYPE_LONG, value: width },
        Entry { tag: TAG_IMAGE_LENGTH, typ: TYPE_LONG, value: height },
        Entry { tag: TAG_BITS_PER_SAMPLE, typ: TYPE_SHORT, value: 16 },
        Entry { tag: TAG_COMPRESSION, typ: TYPE_SHORT, value: 1 },
        Entry { tag: TAG_PHOTOMETRIC, typ: TYPE_SHORT, value: 1 },
        Entry { tag: TAG_STRIP_OFFSETS, typ: TYPE_LONG, value: 0 },
        Entry { tag: TAG_ROWS_PER_STRIP, typ: TYPE_LONG, value: height },
        Entry { tag: TAG_STRIP_BYTE_COUNTS, typ: TYPE_LONG, value: data_len },
        Entry { tag: TAG_SAMPLE_FORMAT, typ: TYPE_SHORT, value: 1 },
    ];
    let data_offset = (HEADER_LEN + 2 + entries.len() * ENTRY_LEN + 4) as u32;
    data_offset.checked_add(data_len).ok_or(TiffError::TooLarge)?;

    let mut out = Vec::with_capacity(data_offset as usize + data_len as usize);
    out.extend_from_slice(b"II");
    out.extend_from_slice(&42u16.to_le_bytes());
    out.extend_from_slice(&(HEADER_LEN as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for e in &entries {
        let value = if e.tag == TAG_STRIP_OFFSETS { data_offset } else { e.value };
        out.extend_from_slice(&e.tag.to_le_bytes());
        out.extend_from_slice(&e.typ.to_le_bytes());
        out.extend_from_slice(&1u32.to_le_bytes());
        match e.typ {
            // SHORT values are left-justified in the 4-byte field
            TYPE_SHORT => {
                out.extend_from_slice(&(value as u16).to_le_bytes());
                out.extend_from_slice(&[0, 0]);
            }
            _ => out.extend_from_slice(&value.to_le_bytes()),
        }
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    debug_assert_eq!(out.len(), data_offset as usize);
    for &v in img.pixels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u16_at(b: &[u8], off: usize, what: &'static str) -> Result<u16> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or(TiffError::Truncated(what))
}

fn u32_at(b: &[u8], off: usize, what: &'static str) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or(TiffError::Truncated(what))
}

#[derive(Default)]
struct Fields {
    width: Option<u32>,
    length: Option<u32>,
    bits: Option<Vec<u32>>,
    compression: Option<u32>,
    photometric: Option<u32>,
    strip_offsets: Option<Vec<u32>>,
    samples_per_pixel: Option<u32>,
    rows_per_strip: Option<u32>,
    strip_byte_counts: Option<Vec<u32>>,
    planar: Option<u32>,
    sample_format: Option<Vec<u32>>,
}

/// Reads the values of one IFD entry as u32s (SHORT or LONG only).
fn entry_values(b: &[u8], entry_off: usize, field: &'static str) -> Result<Vec<u32>> {
    let typ = u16_at(b, entry_off + 2, field)?;
    let count = u32_at(b, entry_off + 4, field)? as usize;
    let size = match typ {
        TYPE_SHORT => 2,
        TYPE_LONG => 4,
        other => {
            return Err(TiffError::Unsupported {
                field,
                value: u32::from(other),
            })
        }
    };
    let total = count.checked_mul(size).ok_or(TiffError::Truncated(field))?;
    let base = if total <= 4 {
        entry_off + 8
    } else {
        u32_at(b, entry_off + 8, field)? as usize
    };
    (0..count)
        .map(|i| match typ {
            TYPE_SHORT => u16_at(b, base + 2 * i, field).map(u32::from),
            _ => u32_at(b, base + 4 * i, field),
        })
        .collect()
}

fn single(values: Vec<u32>, field: &'static str) -> Result<u32> {
    match values.as_slice() {
        [v] => Ok(*v),
        _ => Err(TiffError::Inconsistent {
            field,
            detail: format!("expected 1 value, got {}", values.len()),
        }),
    }
}

fn all_equal(values: &[u32], expected: u32, field: &'static str) -> Result<()> {
    match values.iter().find(|&&v| v != expected) {
        Some(&v) => Err(TiffError::Unsupported { field, value: v }),
        None => Ok(()),
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<HeightImage> {
    decode_image_with(bytes, Calibration::default())
}

/// Decodes a file, attaching `calibration` (TIFF carries no height calibration).
pub fn decode_image_with(bytes: &[u8], calibration: Calibration) -> Result<HeightImage> {
    let order = bytes.get(0..2).ok_or(TiffError::Truncated("header"))?;
    if order != b"II" {
        return Err(TiffError::ByteOrder([order[0], order[1]]));
    }
    let magic = u16_at(bytes, 2, "header")?;
    if magic != 42 {
        return Err(TiffError::Magic(magic));
    }
    let ifd = u32_at(bytes, 4, "header")? as usize;
    let n = u16_at(bytes, ifd, "IFD entry count")? as usize;
    if bytes.len() < ifd + 2 + n * ENTRY_LEN {
        return Err(TiffError::Truncated("IFD entries"));
    }

    let mut f = Fields::default();
    for i in 0..n {
        let off = ifd + 2 + i * ENTRY_LEN;
        let tag = u16_at(bytes, off, "IFD entry")?;
        match tag {
            TAG_IMAGE_WIDTH => f.width = Some(single(entry_values(bytes, off, "ImageWidth")?, "ImageWidth")?),
            TAG_IMAGE_LENGTH => f.length = Some(single(entry_values(bytes, off, "ImageLength")?, "ImageLength")?),
            TAG_BITS_PER_SAMPLE => f.bits = Some(entry_values(bytes, off, "BitsPerSample")?),
            TAG_COMPRESSION => f.compression = Some(single(entry_values(bytes, off, "Compression")?, "Compression")?),
            TAG_PHOTOMETRIC => {
                f.photometric = Some(single(
                    entry_values(bytes, off, "PhotometricInterpretation")?,
                    "PhotometricInterpretation",
                )?)
            }
            TAG_STRIP_OFFSETS => f.strip_offsets = Some(entry_values(bytes, off, "StripOffsets")?),
            TAG_SAMPLES_PER_PIXEL => {
                f.samples_per_pixel = Some(single(entry_values(bytes, off, "SamplesPerPixel")?, "SamplesPerPixel")?)
            }
            TAG_ROWS_PER_STRIP => {
                f.rows_per_strip = Some(single(entry_values(bytes, off, "RowsPerStrip")?, "RowsPerStrip")?)
            }
            TAG_STRIP_BYTE_COUNTS => f.strip_byte_counts = Some(entry_values(bytes, off, "StripByteCounts")?),
            TAG_PLANAR_CONFIG => {
                f.planar = Some(single(entry_values(bytes, off, "PlanarConfiguration")?, "PlanarConfiguration")?)
            }
            TAG_SAMPLE_FORMAT => f.sample_format = Some(entry_values(bytes, off, "SampleFormat")?),
            // descriptive tags (resolution, software, ...) are irrelevant to the raster
            _ => {}
        }
    }

    let width = f.width.ok_or(TiffError::MissingTag("ImageWidth"))?;
    let length = f.length.ok_or(TiffError::MissingTag("ImageLength"))?;
    all_equal(&f.bits.ok_or(TiffError::MissingTag("BitsPerSample"))?, 16, "BitsPerSample")?;
    let compression = f.compression.unwrap_or(1);
    if compression != 1 {
        return Err(TiffError::Unsupported {
            field: "Compression",
            value: compression,
        });
    }
    let photometric = f.photometric.ok_or(TiffError::MissingTag("PhotometricInterpretation"))?;
    if photometric != 1 {
        return Err(TiffError::Unsupported {
            field: "PhotometricInterpretation",
            value: photometric,
        });
    }
    if let Some(spp) = f.samples_per_pixel.filter(|&s| s != 1) {
        return Err(TiffError::Unsupported {
            field: "SamplesPerPixel",
            value: spp,
        });
    }
    if let Some(p) = f.planar.filter(|&p| p != 1) {
        return Err(TiffError::Unsupported {
            field: "PlanarConfiguration",
            value: p,
        });
    }
    if let Some(fmt) = &f.sample_format {
        all_equal(fmt, 1, "SampleFormat")?;
    }
    let offsets = f.strip_offsets.ok_or(TiffError::MissingTag("StripOffsets"))?;
    let counts = f.strip_byte_counts.ok_or(TiffError::MissingTag("StripByteCounts"))?;
    if offsets.len() != counts.len() || offsets.is_empty() {
        return Err(TiffError::Inconsistent {
            field: "StripByteCounts",
            detail: format!("{} offsets vs {} byte counts", offsets.len(), counts.len()),
        });
    }

    let (w, h) = (width as usize, length as usize);
    if w == 0 || h == 0 {
        return Err(TiffError::Inconsistent {
            field: "ImageWidth",
            detail: format!("empty image {w}x{h}"),
        });
    }
    let expected = w.checked_mul(h).and_then(|p| p.checked_mul(2)).ok_or(TiffError::TooLarge)?;
    let total: usize = counts.iter().map(|&c| c as usize).sum();
    if total != expected {
        return Err(TiffError::Inconsistent {
            field: "StripByteCounts",
            detail: format!("{total} bytes for a {w}x{h} 16-bit image ({expected} expected)"),
        });
    }

    let mut pixels = Vec::with_capacity(w * h);
    for (&off, &count) in offsets.iter().zip(&counts) {
        let (off, count) = (off as usize, count as usize);
        let strip = bytes
            .get(off..off.checked_add(count).ok_or(TiffError::TooLarge)?)
            .ok_or(TiffError::Truncated("strip data"))?;
        pixels.extend(strip.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])));
    }
    HeightImage::new(w, h, pixels, calibration).map_err(|e| TiffError::Inconsistent {
        field: "ImageLength",
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, px: Vec<u16>) -> HeightImage {
        HeightImage::new(w, h, px, Calibration::default()).unwrap()
    }

    /// Patches the value field of the IFD entry carrying `tag`.
    fn patch_tag(bytes: &mut [u8], tag: u16, value: u16) {
        let n = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        for i in 0..n {
            let off = 10 + i * ENTRY_LEN;
            if u16::from_le_bytes([bytes[off], bytes[off + 1]]) == tag {
                bytes[off + 8..off + 10].copy_from_slice(&value.to_le_bytes());
                return;
            }
        }
        panic!("tag {tag} not present");
    }

    #[test]
    fn two_by_two_round_trip() {
        let i = img(2, 2, vec![0, 1, 65_535, 20_000]);
        let bytes = encode_image(&i).unwrap();
        assert_eq!(bytes.len(), 122 + 8);
        assert_eq!(&bytes[..4], b"II\x2a\x00");
        assert_eq!(decode_image(&bytes).unwrap(), i);
    }

    #[test]
    fn rejects_compression() {
        let mut bytes = encode_image(&img(2, 2, vec![1, 2, 3, 4])).unwrap();
        patch_tag(&mut bytes, TAG_COMPRESSION, 5);
        let err = decode_image(&bytes).unwrap_err();
        assert_eq!(err, TiffError::Unsupported { field: "Compression", value: 5 });
        assert!(err.to_string().contains("Compression"));
    }

    #[test]
    fn rejects_eight_bit_samples() {
        let mut bytes = encode_image(&img(2, 2, vec![1, 2, 3, 4])).unwrap();
        patch_tag(&mut bytes, TAG_BITS_PER_SAMPLE, 8);
        assert!(decode_image(&bytes).unwrap_err().to_string().contains("BitsPerSample"));
    }

    #[test]
    fn rejects_signed_samples() {
        let mut bytes = encode_image(&img(2, 2, vec![1, 2, 3, 4])).unwrap();
        patch_tag(&mut bytes, TAG_SAMPLE_FORMAT, 2);
        assert!(decode_image(&bytes).unwrap_err().to_string().contains("SampleFormat"));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode_image(&img(3, 3, vec![7; 9])).unwrap();
        for cut in [0, 1, 5, 9, 60, bytes.len() - 1] {
            let err = decode_image(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, TiffError::Truncated(_) | TiffError::ByteOrder(_)),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn rejects_big_endian_and_bad_magic() {
        let mut bytes = encode_image(&img(1, 1, vec![7])).unwrap();
        bytes[0..2].copy_from_slice(b"MM");
        assert_eq!(decode_image(&bytes).unwrap_err(), TiffError::ByteOrder(*b"MM"));
        let mut bytes = encode_image(&img(1, 1, vec![7])).unwrap();
        bytes[2] = 43;
        assert_eq!(decode_image(&bytes).unwrap_err(), TiffError::Magic(43));
    }

    #[test]
    fn reads_multi_strip_files() {
        // hand-built: 2x2 image stored as two one-row strips, offsets array out of line
        let mut b = Vec::new();
        b.extend_from_slice(b"II\x2a\x00");
        b.extend_from_slice(&8u32.to_le_bytes());
        let entries: [(u16, u16, u32, u32); 8] = [
            (TAG_IMAGE_WIDTH, TYPE_SHORT, 1, 2),
            (TAG_IMAGE_LENGTH, TYPE_SHORT, 1, 2),
            (TAG_BITS_PER_SAMPLE, TYPE_SHORT, 1, 16),
            (TAG_COMPRESSION, TYPE_SHORT, 1, 1),
            (TAG_PHOTOMETRIC, TYPE_SHORT, 1, 1),
            (TAG_STRIP_OFFSETS, TYPE_LONG, 2, 0),
            (TAG_ROWS_PER_STRIP, TYPE_SHORT, 1, 1),
            (TAG_STRIP_BYTE_COUNTS, TYPE_SHORT, 2, 4 | (4 << 16)),
        ];
        let ifd_end = 8 + 2 + entries.len() * 12 + 4;
        let offsets_at = ifd_end as u32;
        let data_at = offsets_at + 8;
        b.extend_from_slice(&(entries.len() as u16).to_le_bytes());
        for (tag, typ, count, value) in entries {
            b.extend_from_slice(&tag.to_le_bytes());
            b.extend_from_slice(&typ.to_le_bytes());
            b.extend_from_slice(&count.to_le_bytes());
            let v = if tag == TAG_STRIP_OFFSETS { offsets_at } else { value };
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&(data_at + 4).to_le_bytes()); // second row stored first
        b.extend_from_slice(&data_at.to_le_bytes());
        for v in [3u16, 4, 1, 2] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let decoded = decode_image(&b).unwrap();
        assert_eq!(decoded.pixels(), &[1, 2, 3, 4]);
    }
}
