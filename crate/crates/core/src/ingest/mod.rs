//! Canonical on-disk pose format, clip windows, and synthetic sequences.
//!
//! The canonical format is a single self-describing JSON document with a
//! `schema_version` field. A flat binary variant (the same header followed by
//! little-endian `f64` coordinates) is provided for large files; see
//! [`write_canonical_binary`] for the exact layout. Foreign datasets are
//! adapted declaratively: the metadata may carry a `joint_name_map` remap
//! table that is applied to all joint-name fields on read, so per-dataset
//! converter code is never needed.

mod synth;

pub use synth::{base_pose, generate_synthetic, SynthSpec};

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use thiserror::Error;

use crate::skeleton::{
    validate_sequence, Axis, PoseFrame, PoseSequence, SkeletonTopology, TopologyError, Units,
    ValidationReport,
};

/// Version of the canonical document layout this library reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Magic prefix of the binary pose variant.
pub const POSE_BINARY_MAGIC: &[u8; 8] = b"POSEBIN1";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("unsupported schema_version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },
    #[error("binary pose file has a bad magic prefix")]
    BadMagic,
    #[error("binary pose file is truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("schema error: {0}")]
    Topology(#[from] TopologyError),
    #[error("frame {frame} has {got} coordinates, metadata names {expected} joints")]
    FrameWidth {
        frame: usize,
        expected: usize,
        got: usize,
    },
    #[error("frame_indices length {got} does not match frame count {expected}")]
    FrameIndexCount { expected: usize, got: usize },
    #[error("invalid sequence: {0}")]
    Validation(ValidationReport),
    #[error("window length and step must be positive")]
    ZeroWindowParam,
    #[error("window length {window_len} exceeds frame count {frames}")]
    WindowTooLong { window_len: usize, frames: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Metadata block of a canonical pose document.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CanonicalMetadata {
    pub dataset: String,
    pub fps: f64,
    pub units: Units,
    pub up_axis: Axis,
    pub joint_names: Vec<String>,
    pub edges: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_triple: Option<[String; 3]>,
    /// Foreign-to-canonical joint-name remap, applied to every name field
    /// (joint list, edges, reference triple) when the document is read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_name_map: Option<BTreeMap<String, String>>,
    /// Free-form provenance echoed by tools that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// The canonical pose document: metadata plus per-frame joint coordinates.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CanonicalDocument {
    pub schema_version: u32,
    pub metadata: CanonicalMetadata,
    pub frame_indices: Vec<usize>,
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl CanonicalDocument {
    pub fn from_sequence(seq: &PoseSequence) -> Self {
        let topo = &seq.topology;
        let name = |j| topo.name(j).unwrap_or("?").to_string();
        let metadata = CanonicalMetadata {
            dataset: seq.source_label.clone(),
            fps: seq.fps,
            units: seq.units,
            up_axis: seq.up_axis,
            joint_names: topo.joint_names().to_vec(),
            edges: topo.edges().map(|(a, b)| (name(a), name(b))).collect(),
            reference_triple: topo
                .reference_triple()
                .map(|t| [name(t.left_shoulder), name(t.right_shoulder), name(t.pubis)]),
            joint_name_map: None,
            provenance: None,
        };
        CanonicalDocument {
            schema_version: SCHEMA_VERSION,
            metadata,
            frame_indices: seq.frames.iter().map(|f| f.frame_index).collect(),
            frames: seq
                .frames
                .iter()
                .map(|f| f.coords.iter().map(|p| [p.x, p.y, p.z]).collect())
                .collect(),
        }
    }

    /// Resolves the document into a validated [`PoseSequence`], applying the
    /// `joint_name_map` adapter if one is present.
    pub fn into_sequence(self) -> Result<PoseSequence, IngestError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(IngestError::SchemaVersion {
                found: self.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        let meta = self.metadata;
        let remap = |name: &str| -> String {
            match &meta.joint_name_map {
                Some(map) => map.get(name).cloned().unwrap_or_else(|| name.to_string()),
                None => name.to_string(),
            }
        };
        let names: Vec<String> = meta.joint_names.iter().map(|n| remap(n)).collect();
        let edges: Vec<(String, String)> = meta
            .edges
            .iter()
            .map(|(a, b)| (remap(a), remap(b)))
            .collect();
        let triple = meta
            .reference_triple
            .as_ref()
            .map(|[l, r, p]| [remap(l), remap(r), remap(p)]);
        let topology = SkeletonTopology::from_names(names, &edges, triple)?;

        if self.frame_indices.len() != self.frames.len() {
            return Err(IngestError::FrameIndexCount {
                expected: self.frames.len(),
                got: self.frame_indices.len(),
            });
        }
        let expected = topology.joint_count();
        let mut frames = Vec::with_capacity(self.frames.len());
        for (idx, coords) in self.frame_indices.iter().zip(&self.frames) {
            if coords.len() != expected {
                return Err(IngestError::FrameWidth {
                    frame: *idx,
                    expected,
                    got: coords.len(),
                });
            }
            frames.push(PoseFrame::new(
                coords
                    .iter()
                    .map(|c| Point3::new(c[0], c[1], c[2]))
                    .collect(),
                *idx,
            ));
        }

        let seq = PoseSequence {
            topology,
            frames,
            fps: meta.fps,
            source_label: meta.dataset,
            units: meta.units,
            up_axis: meta.up_axis,
        };
        let report = validate_sequence(&seq);
        if !report.is_clean() {
            return Err(IngestError::Validation(report));
        }
        Ok(seq)
    }
}

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Serializes a document to canonical JSON bytes (deterministic for equal
/// inputs: fixed field order, shortest-round-trip floats).
pub fn document_to_json(doc: &CanonicalDocument) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(doc).expect("canonical document serializes");
    bytes.push(b'\n');
    bytes
}

/// Writes a document as canonical JSON.
pub fn write_document(doc: &CanonicalDocument, path: &Path) -> Result<(), IngestError> {
    atomic_write(path, &document_to_json(doc))
}

/// Header of the binary pose variant (everything but the coordinates).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct BinaryHeader {
    schema_version: u32,
    metadata: CanonicalMetadata,
    frame_count: usize,
    joint_count: usize,
    frame_indices: Vec<usize>,
}

/// Writes a document in the binary variant:
///
/// ```text
/// bytes 0..8    magic "POSEBIN1"
/// bytes 8..12   u32 little-endian header length H
/// bytes 12..12+H  header JSON (schema_version, metadata, counts, frame_indices)
/// remainder     frame_count * joint_count * 3 little-endian f64,
///               frame-major, joint-minor, xyz innermost
/// ```
pub fn write_document_binary(doc: &CanonicalDocument, path: &Path) -> Result<(), IngestError> {
    let joint_count = doc.metadata.joint_names.len();
    let header = BinaryHeader {
        schema_version: doc.schema_version,
        metadata: doc.metadata.clone(),
        frame_count: doc.frames.len(),
        joint_count,
        frame_indices: doc.frame_indices.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("binary header serializes");
    let mut bytes =
        Vec::with_capacity(12 + header_json.len() + doc.frames.len() * joint_count * 24);
    bytes.extend_from_slice(POSE_BINARY_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for frame in &doc.frames {
        for coord in frame {
            for c in coord {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    atomic_write(path, &bytes)
}

fn read_document_binary(path: &Path, bytes: &[u8]) -> Result<CanonicalDocument, IngestError> {
    let mut cursor = &bytes[POSE_BINARY_MAGIC.len()..];
    let mut len_buf = [0u8; 4];
    cursor.read_exact(&mut len_buf).map_err(io_err(path))?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    if cursor.len() < header_len {
        return Err(IngestError::Truncated {
            expected: header_len,
            found: cursor.len(),
        });
    }
    let header: BinaryHeader =
        serde_json::from_slice(&cursor[..header_len]).map_err(|source| IngestError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    let payload = &cursor[header_len..];
    let expected = header.frame_count * header.joint_count * 24;
    if payload.len() != expected {
        return Err(IngestError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut frames = Vec::with_capacity(header.frame_count);
    let mut offset = 0;
    for _ in 0..header.frame_count {
        let mut frame = Vec::with_capacity(header.joint_count);
        for _ in 0..header.joint_count {
            let mut coord = [0.0f64; 3];
            for c in &mut coord {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&payload[offset..offset + 8]);
                *c = f64::from_le_bytes(buf);
                offset += 8;
            }
            frame.push(coord);
        }
        frames.push(frame);
    }
    Ok(CanonicalDocument {
        schema_version: header.schema_version,
        metadata: header.metadata,
        frame_indices: header.frame_indices,
        frames,
    })
}

/// Reads a canonical document, auto-detecting the JSON and binary variants.
pub fn read_document(path: &Path) -> Result<CanonicalDocument, IngestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(POSE_BINARY_MAGIC) {
        read_document_binary(path, &bytes)
    } else {
        serde_json::from_slice(&bytes).map_err(|source| IngestError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Reads and validates a pose sequence from either canonical variant.
pub fn read_canonical(path: &Path) -> Result<PoseSequence, IngestError> {
    read_document(path)?.into_sequence()
}

/// Writes a sequence as canonical JSON. Byte output is deterministic for
/// identical input.
pub fn write_canonical(seq: &PoseSequence, path: &Path) -> Result<(), IngestError> {
    write_document(&CanonicalDocument::from_sequence(seq), path)
}

/// Writes a sequence in the binary variant.
pub fn write_canonical_binary(seq: &PoseSequence, path: &Path) -> Result<(), IngestError> {
    write_document_binary(&CanonicalDocument::from_sequence(seq), path)
}

/// A fully-contained clip: `length` frames starting at `start_frame`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ClipWindow {
    pub start_frame: usize,
    pub length: usize,
}

impl ClipWindow {
    /// Copies the window's frames out of `seq` as a standalone sequence.
    pub fn extract(&self, seq: &PoseSequence) -> PoseSequence {
        PoseSequence {
            topology: seq.topology.clone(),
            frames: seq.frames[self.start_frame..self.start_frame + self.length].to_vec(),
            fps: seq.fps,
            source_label: seq.source_label.clone(),
            units: seq.units,
            up_axis: seq.up_axis,
        }
    }
}

/// Enumerates clip windows starting at 0, step, 2·step, …; windows that
/// would run past the end of the sequence are discarded.
pub fn sliding_windows(
    seq: &PoseSequence,
    window_len: usize,
    step: usize,
) -> Result<Vec<ClipWindow>, IngestError> {
    if window_len == 0 || step == 0 {
        return Err(IngestError::ZeroWindowParam);
    }
    let n = seq.frames.len();
    if window_len > n {
        return Err(IngestError::WindowTooLong {
            window_len,
            frames: n,
        });
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + window_len <= n {
        windows.push(ClipWindow {
            start_frame: start,
            length: window_len,
        });
        start += step;
    }
    Ok(windows)
}
