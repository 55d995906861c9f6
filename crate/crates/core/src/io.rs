//! On-disk formats.
//!
//! Pyramid container layout:
//!
//! ```text
//! u64 LE   header length N
//! N bytes  UTF-8 JSON header
//! payload  little-endian f32 values
//! ```
//!
//! The header is `{"version": 1, "image_width", "image_height", "levels":
//! [{"level", "height", "width", "depth", "dtype": "f32", "byte_offset",
//! "byte_length"}]}`; offsets are relative to the start of the payload.
//! Unknown header keys are ignored.
//!
//! Tracks and groundtruth are JSON lines, one object per frame in ascending
//! frame order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{GroundtruthEntry, GroundtruthSequence};
use crate::pyramid::{BoundingBox, FeatureMap, FeaturePyramid, Mask};
use crate::template::{TemplateKind, TemplateVector};
use crate::tracker::{Detection, Track, TrackEntry};

pub const CONTAINER_VERSION: u32 = 1;
const LEN_PREFIX: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level: u32,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub version: u32,
    pub image_width: usize,
    pub image_height: usize,
    pub levels: Vec<LevelRecord>,
}

pub fn encode_container(pyramid: &FeaturePyramid) -> Vec<u8> {
    let mut offset = 0u64;
    let levels = pyramid
        .levels()
        .iter()
        .map(|m| {
            let len = (m.data().len() * 4) as u64;
            let rec = LevelRecord {
                level: m.level(),
                height: m.height(),
                width: m.width(),
                depth: m.depth(),
                dtype: "f32".into(),
                byte_offset: offset,
                byte_length: len,
            };
            offset += len;
            rec
        })
        .collect();
    let header = ContainerHeader {
        version: CONTAINER_VERSION,
        image_width: pyramid.image_width(),
        image_height: pyramid.image_height(),
        levels,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(LEN_PREFIX as usize + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in pyramid.levels() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<(ContainerHeader, usize)> {
    if bytes.len() < LEN_PREFIX as usize {
        return Err(Error::Truncated {
            expected: LEN_PREFIX,
            actual: bytes.len() as u64,
        });
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let end = LEN_PREFIX.checked_add(n).ok_or_else(|| Error::Malformed {
        offset: 0,
        message: format!("header length {n} overflows"),
    })?;
    if (bytes.len() as u64) < end {
        return Err(Error::Truncated {
            expected: end,
            actual: bytes.len() as u64,
        });
    }
    let header: ContainerHeader = serde_json::from_slice(&bytes[8..end as usize]).map_err(|e| Error::Malformed {
        offset: LEN_PREFIX + e.column() as u64,
        message: e.to_string(),
    })?;
    if header.version != CONTAINER_VERSION {
        return Err(Error::Malformed {
            offset: LEN_PREFIX,
            message: format!("unsupported container version {}", header.version),
        });
    }
    Ok((header, end as usize))
}

fn validate_records(header: &ContainerHeader, payload_len: u64, payload_start: u64) -> Result<()> {
    let mut spans: Vec<(u64, u64, u32)> = Vec::with_capacity(header.levels.len());
    for rec in &header.levels {
        if rec.dtype != "f32" {
            return Err(Error::Validation(format!("level {}: unsupported dtype '{}'", rec.level, rec.dtype)));
        }
        let expected = (rec.height as u64)
            .checked_mul(rec.width as u64)
            .and_then(|v| v.checked_mul(rec.depth as u64))
            .and_then(|v| v.checked_mul(4));
        if expected != Some(rec.byte_length) {
            return Err(Error::ShapeMismatch {
                offset: payload_start + rec.byte_offset,
                message: format!(
                    "level {}: byte_length {} but {}x{}x{} f32 needs {}",
                    rec.level,
                    rec.byte_length,
                    rec.height,
                    rec.width,
                    rec.depth,
                    expected.map_or("overflow".to_string(), |v| v.to_string())
                ),
            });
        }
        let end = rec.byte_offset.checked_add(rec.byte_length).ok_or_else(|| {
            Error::Validation(format!("level {}: offset overflows", rec.level))
        })?;
        spans.push((rec.byte_offset, end, rec.level));
    }
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Validation(format!(
                "levels {} and {} overlap: [{}, {}) and [{}, {})",
                pair[0].2, pair[1].2, pair[0].0, pair[0].1, pair[1].0, pair[1].1
            )));
        }
    }
    if let Some(&(_, end, _)) = spans.iter().max_by_key(|s| s.1) {
        if end > payload_len {
            return Err(Error::Truncated {
                expected: payload_start + end,
                actual: payload_start + payload_len,
            });
        }
    }
    Ok(())
}

pub fn decode_container(bytes: &[u8]) -> Result<FeaturePyramid> {
    let (header, start) = decode_header(bytes)?;
    let payload = &bytes[start..];
    validate_records(&header, payload.len() as u64, start as u64)?;
    let mut levels = Vec::with_capacity(header.levels.len());
    for rec in &header.levels {
        let raw = &payload[rec.byte_offset as usize..(rec.byte_offset + rec.byte_length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let map = FeatureMap::new(rec.level, rec.height, rec.width, rec.depth, data).map_err(|e| Error::ShapeMismatch {
            offset: start as u64 + rec.byte_offset,
            message: e.to_string(),
        })?;
        levels.push(map);
    }
    levels.sort_by_key(|m| m.level());
    FeaturePyramid::new(header.image_width, header.image_height, levels).map_err(|e| Error::ShapeMismatch {
        offset: LEN_PREFIX,
        message: e.to_string(),
    })
}

pub fn write_container(pyramid: &FeaturePyramid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_container(pyramid)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

/// One line of a track file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
}

impl From<&TrackEntry> for TrackRecord {
    fn from(e: &TrackEntry) -> Self {
        Self {
            frame: e.frame,
            bbox: e.detection.bbox,
            confidence: e.detection.confidence,
            present: e.present,
            mask: e.detection.mask.clone(),
        }
    }
}

fn write_lines<T: Serialize>(items: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(item);
    }
    Ok(out)
}

pub fn track_to_jsonl(track: &Track) -> String {
    let mut s = String::new();
    for e in track.entries() {
        s.push_str(&serde_json::to_string(&TrackRecord::from(e)).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_track(track: &Track, path: impl AsRef<Path>) -> Result<()> {
    write_lines(track.entries().iter().map(TrackRecord::from), path.as_ref())
}

pub fn read_track(path: impl AsRef<Path>) -> Result<Track> {
    let records: Vec<TrackRecord> = read_lines(path.as_ref())?;
    let entries = records
        .into_iter()
        .map(|r| {
            Ok(TrackEntry {
                frame: r.frame,
                detection: Detection::new(r.bbox, r.confidence, r.mask)?,
                present: r.present,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Track::new(entries)
}

pub fn write_groundtruth(gt: &GroundtruthSequence, path: impl AsRef<Path>) -> Result<()> {
    write_lines(gt.entries(), path.as_ref())
}

pub fn read_groundtruth(path: impl AsRef<Path>) -> Result<GroundtruthSequence> {
    GroundtruthSequence::new(read_lines(path.as_ref())?)
}

/// Candidate file entry; a missing confidence is filled in by scoring the
/// box against the tracking template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
}

pub fn write_candidates(records: &[CandidateRecord], path: impl AsRef<Path>) -> Result<()> {
    write_json(records, path)
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateRecord>> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub pyramid: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groundtruth: Option<GroundtruthRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundtruthRecord {
    pub present: bool,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
}

/// Sequence description. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub init_box: BoundingBox,
    pub frames: Vec<FrameRecord>,
}

impl SequenceManifest {
    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("manifest has no frames"));
        }
        if self.frames.windows(2).any(|p| p[1].frame <= p[0].frame) {
            return Err(Error::invalid("manifest frame indices must be strictly increasing"));
        }
        for f in &self.frames {
            let paths = std::iter::once(&f.pyramid).chain(f.candidates.as_ref());
            for p in paths {
                let full = base.join(p);
                if !full.exists() {
                    return Err(Error::invalid(format!("frame {}: {} does not exist", f.frame, full.display())));
                }
            }
            if let Some(g) = &f.groundtruth {
                if g.present && g.bbox.is_none() {
                    return Err(Error::invalid(format!("frame {}: groundtruth present without a box", f.frame)));
                }
            }
        }
        Ok(())
    }

    pub fn groundtruth(&self) -> Option<GroundtruthSequence> {
        let entries = self
            .frames
            .iter()
            .map(|f| {
                f.groundtruth.as_ref().map(|g| GroundtruthEntry {
                    frame: f.frame,
                    present: g.present,
                    bbox: g.bbox,
                    mask: g.mask.clone(),
                })
            })
            .collect::<Option<Vec<_>>>()?;
        GroundtruthSequence::new(entries).ok()
    }
}

/// Reads and validates a manifest; returns it with its base directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<(SequenceManifest, PathBuf)> {
    let path = path.as_ref();
    let manifest: SequenceManifest = read_json(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate(&base)?;
    Ok((manifest, base))
}

/// Template file: `{"kind", "lambda", "values"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub kind: TemplateKind,
    pub lambda: f64,
    pub values: Vec<f64>,
}

impl TemplateRecord {
    pub fn new(template: &TemplateVector, lambda: f64) -> Self {
        Self {
            kind: template.kind(),
            lambda,
            values: template.values().to_vec(),
        }
    }

    pub fn template(&self) -> Result<TemplateVector> {
        TemplateVector::new(self.values.clone(), self.kind)
    }
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
