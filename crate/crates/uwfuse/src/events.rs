//! Synthetic event-map generation from grayscale frame sequences, plus a
//! deterministic pooling encoder so end-to-end demos can run without any
//! pretrained encoder.
//!
//! Frames are split into consecutive segments; within a segment every
//! consecutive frame pair yields a binary map marking pixels whose absolute
//! intensity change reaches the threshold. Per pixel, at most `clamp`
//! firings survive per segment (later firings are zeroed first).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 10.0 / 255.0;
pub const DEFAULT_CLAMP: usize = 10;

/// Grayscale frame stack with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pixels: Vec<f64>,
    frame_count: usize,
    height: usize,
    width: usize,
}

impl FrameSequence {
    pub fn new(pixels: Vec<f64>, frame_count: usize, height: usize, width: usize) -> Result<Self> {
        if pixels.len() != frame_count * height * width {
            return Err(Error::ShapeMismatch {
                what: "frame sequence",
                expected: format!("{} pixels", frame_count * height * width),
                actual: format!("{}", pixels.len()),
            });
        }
        for (index, v) in pixels.iter().enumerate() {
            if !(v.is_finite() && (0.0..=1.0).contains(v)) {
                return Err(Error::NonFiniteValue {
                    what: "frame pixels",
                    index,
                });
            }
        }
        Ok(FrameSequence {
            pixels,
            frame_count,
            height,
            width,
        })
    }

    /// Builds from 8-bit intensities, dividing by 255.
    pub fn from_bytes(bytes: &[u8], frame_count: usize, height: usize, width: usize) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        FrameSequence::new(pixels, frame_count, height, width)
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[f * n..(f + 1) * n]
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// Binary event maps for one segment, indexed (pair, row, col); a full
/// segment of `segment_len` frames holds `segment_len - 1` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSegment {
    bits: Vec<u8>,
    pairs: usize,
    height: usize,
    width: usize,
}

impl EventSegment {
    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, pair: usize, row: usize, col: usize) -> u8 {
        self.bits[(pair * self.height + row) * self.width + col]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Number of firings of one pixel across the segment.
    pub fn pixel_count(&self, row: usize, col: usize) -> usize {
        (0..self.pairs).map(|p| usize::from(self.at(p, row, col))).sum()
    }

    /// Packs the maps into bytes, MSB first, in (pair, row, col) order,
    /// padding the final byte with zeros.
    pub fn to_packed_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (k, &bit) in self.bits.iter().enumerate() {
            if bit != 0 {
                out[k / 8] |= 0x80 >> (k % 8);
            }
        }
        out
    }

    pub fn from_packed_bits(packed: &[u8], pairs: usize, height: usize, width: usize) -> Result<Self> {
        let n = pairs * height * width;
        if packed.len() != n.div_ceil(8) {
            return Err(Error::ShapeMismatch {
                what: "packed event maps",
                expected: format!("{} bytes", n.div_ceil(8)),
                actual: format!("{}", packed.len()),
            });
        }
        let bits = (0..n)
            .map(|k| (packed[k / 8] >> (7 - k % 8)) & 1)
            .collect();
        Ok(EventSegment {
            bits,
            pairs,
            height,
            width,
        })
    }
}

/// How the clamp value bounds per-segment activity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// Cap the number of fired events per pixel per segment, zeroing the
    /// latest excess firings. The default.
    CountCap,
    /// Clamp the absolute intensity difference at `clamp / 255` before
    /// thresholding. Inert whenever `threshold <= clamp / 255`.
    IntensityClamp,
}

/// Event synthesis parameters. Defaults: threshold 10/255, clamp 10,
/// segment_len 16, count-cap clamping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventOptions {
    pub threshold: f64,
    pub clamp: usize,
    pub segment_len: usize,
    pub clamp_mode: ClampMode,
}

impl Default for EventOptions {
    fn default() -> Self {
        EventOptions {
            threshold: DEFAULT_THRESHOLD,
            clamp: DEFAULT_CLAMP,
            segment_len: 16,
            clamp_mode: ClampMode::CountCap,
        }
    }
}

impl EventOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::invalid_config(format!(
                "threshold must be a nonnegative real, got {}",
                self.threshold
            )));
        }
        if self.segment_len < 2 {
            return Err(Error::invalid_config(
                "segment_len must be at least 2 to form frame pairs".to_string(),
            ));
        }
        Ok(())
    }
}

/// Synthesizes binary event maps from consecutive-frame differences.
/// Frames are partitioned into segments of `segment_len`; a trailing
/// partial segment is kept when it still holds at least two frames.
pub fn synth_events(frames: &FrameSequence, opts: &EventOptions) -> Result<Vec<EventSegment>> {
    opts.validate()?;
    if frames.frame_count() < 2 {
        return Err(Error::TooFewFrames {
            frames: frames.frame_count(),
        });
    }
    let (height, width) = (frames.height(), frames.width());
    let pixels = height * width;
    let mut segments = Vec::new();
    let mut start = 0;
    while start < frames.frame_count() {
        let end = (start + opts.segment_len).min(frames.frame_count());
        let len = end - start;
        if len < 2 {
            break;
        }
        let pairs = len - 1;
        let mut bits = vec![0u8; pairs * pixels];
        for p in 0..pairs {
            let a = frames.frame(start + p);
            let b = frames.frame(start + p + 1);
            let map = &mut bits[p * pixels..(p + 1) * pixels];
            for k in 0..pixels {
                let mut diff = (b[k] - a[k]).abs();
                if opts.clamp_mode == ClampMode::IntensityClamp {
                    diff = diff.min(opts.clamp as f64 / 255.0);
                }
                map[k] = u8::from(diff >= opts.threshold);
            }
        }
        if opts.clamp_mode == ClampMode::CountCap {
            for k in 0..pixels {
                let mut fired = 0usize;
                for p in 0..pairs {
                    if bits[p * pixels + k] != 0 {
                        fired += 1;
                        if fired > opts.clamp {
                            bits[p * pixels + k] = 0;
                        }
                    }
                }
            }
        }
        segments.push(EventSegment {
            bits,
            pairs,
            height,
            width,
        });
        start = end;
    }
    Ok(segments)
}

/// Deterministic spatial pooling: pixels are split row-major into `dim`
/// contiguous cells, as even as possible, and each feature is the mean
/// event rate of its cell across the segment's maps.
pub fn toy_event_encoder(segment: &EventSegment, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::invalid_config(
            "encoder dimension must be at least 1".to_string(),
        ));
    }
    let pixels = segment.height() * segment.width();
    let base = pixels / dim;
    let extra = pixels % dim;
    let mut features = vec![0.0; dim];
    let mut cursor = 0usize;
    for (cell, feature) in features.iter_mut().enumerate() {
        let size = base + usize::from(cell < extra);
        if size == 0 {
            continue;
        }
        let mut sum = 0usize;
        for p in 0..segment.pairs() {
            let map = &segment.bits()[p * pixels..(p + 1) * pixels];
            sum += map[cursor..cursor + size]
                .iter()
                .map(|&b| usize::from(b))
                .sum::<usize>();
        }
        *feature = sum as f64 / (size * segment.pairs()) as f64;
        cursor += size;
    }
    Ok(features)
}

// ---------------------------------------------------------------------------
// FRM1 container
// ---------------------------------------------------------------------------
//
// Header: magic "FRM1", then frame_count, height, width as u32
// little-endian, then unsigned 8-bit intensities (0-255) row-major per
// frame. The loader divides by 255.

const FRM1_MAGIC: &[u8; 4] = b"FRM1";

pub fn write_frm1(path: &Path, frames: &FrameSequence) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        w.write_all(FRM1_MAGIC)?;
        w.write_all(&(frames.frame_count() as u32).to_le_bytes())?;
        w.write_all(&(frames.height() as u32).to_le_bytes())?;
        w.write_all(&(frames.width() as u32).to_le_bytes())?;
        for v in &frames.pixels {
            w.write_all(&[(v * 255.0).round() as u8])?;
        }
        w.flush()
    };
    run().map_err(|e| Error::io(path, e))
}

pub fn read_frm1(path: &Path) -> Result<FrameSequence> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != FRM1_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, expected \"FRM1\"",
            path.display(),
            magic
        )));
    }
    let mut header = [0u8; 12];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let frame_count = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != frame_count * height * width {
        return Err(Error::format(format!(
            "{}: expected {} pixel bytes, got {}",
            path.display(),
            frame_count * height * width,
            payload.len()
        )));
    }
    FrameSequence::from_bytes(&payload, frame_count, height, width)
}

// ---------------------------------------------------------------------------
// Event output: packed bits plus a JSON sidecar describing shapes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub index: usize,
    pub pairs: usize,
    pub offset_bytes: usize,
    pub byte_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventSidecar {
    pub height: usize,
    pub width: usize,
    pub options: EventOptions,
    pub segments: Vec<SegmentMeta>,
}

/// Writes all segments bit-packed into `bin_path`, each segment starting on
/// a byte boundary, with the layout described in `json_path`.
pub fn write_events(
    bin_path: &Path,
    json_path: &Path,
    segments: &[EventSegment],
    opts: &EventOptions,
) -> Result<EventSidecar> {
    if segments.is_empty() {
        return Err(Error::EmptyInput {
            what: "event segments",
        });
    }
    let mut metas = Vec::with_capacity(segments.len());
    let mut blob = Vec::new();
    for (index, segment) in segments.iter().enumerate() {
        let packed = segment.to_packed_bits();
        metas.push(SegmentMeta {
            index,
            pairs: segment.pairs(),
            offset_bytes: blob.len(),
            byte_len: packed.len(),
        });
        blob.extend_from_slice(&packed);
    }
    std::fs::write(bin_path, &blob).map_err(|e| Error::io(bin_path, e))?;
    let sidecar = EventSidecar {
        height: segments[0].height(),
        width: segments[0].width(),
        options: opts.clone(),
        segments: metas,
    };
    let file = File::create(json_path).map_err(|e| Error::io(json_path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)
        .map_err(|e| Error::format(format!("{}: {e}", json_path.display())))?;
    Ok(sidecar)
}

pub fn read_events(bin_path: &Path, json_path: &Path) -> Result<Vec<EventSegment>> {
    let file = File::open(json_path).map_err(|e| Error::io(json_path, e))?;
    let sidecar: EventSidecar = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::format(format!("{}: {e}", json_path.display())))?;
    let blob = std::fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let mut segments = Vec::with_capacity(sidecar.segments.len());
    for meta in &sidecar.segments {
        let end = meta.offset_bytes + meta.byte_len;
        if end > blob.len() {
            return Err(Error::format(format!(
                "{}: segment {} spans past end of payload",
                bin_path.display(),
                meta.index
            )));
        }
        segments.push(EventSegment::from_packed_bits(
            &blob[meta.offset_bytes..end],
            meta.pairs,
            sidecar.height,
            sidecar.width,
        )?);
    }
    Ok(segments)
}
