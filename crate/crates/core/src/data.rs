//! Feature files, feature stores and the segment manifest.

use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;
use crate::trajectory::RobustSegment;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

const FEATURE_MAGIC: &[u8; 4] = b"SSTF";
const FEATURE_VERSION: u32 = 1;

/// Writes a `rows × cols` frame matrix: magic, version, rows, cols, then
/// little-endian f64 values row by row.
pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    if frames.shape.len() != 2 {
        return contract_err("feature matrix must be 2-D");
    }
    let mut buf = Vec::with_capacity(24 + frames.data.len() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(frames.cols() as u64).to_le_bytes());
    for v in &frames.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 24];
    f.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let rows = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes")) as usize;
    let mut body = Vec::new();
    f.read_to_end(&mut body)?;
    if Some(body.len()) != rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) {
        return Err(bad("payload size does not match the header"));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Source of feature frames for utterances and recordings.
pub trait FeatureStore {
    fn frames(&self, source: &str) -> Result<Tensor>;
}

#[derive(Clone, Debug, Default)]
pub struct MemoryFeatureStore {
    pub frames: BTreeMap<String, Tensor>,
}

impl FeatureStore for MemoryFeatureStore {
    fn frames(&self, source: &str) -> Result<Tensor> {
        self.frames.get(source).cloned().ok_or_else(|| Error::Contract(format!("no features for {source:?}")))
    }
}

/// `<dir>/<source>.feat` files.
#[derive(Clone, Debug)]
pub struct DirFeatureStore {
    pub dir: PathBuf,
}

impl DirFeatureStore {
    pub fn path_of(&self, source: &str) -> PathBuf {
        self.dir.join(format!("{source}.feat"))
    }
}

impl FeatureStore for DirFeatureStore {
    fn frames(&self, source: &str) -> Result<Tensor> {
        read_features(&self.path_of(source))
    }
}

/// Frames of a whole segment (`n_chunks × chunk_frames` rows); uncovered
/// stretches and missing source frames are zero.
pub fn segment_frames(
    seg: &RobustSegment,
    store: &dyn FeatureStore,
    d_in: usize,
    frame_ms: u64,
    chunk_frames: usize,
) -> Result<Tensor> {
    let total = seg.n_chunks * chunk_frames;
    let mut out = Tensor::zeros(&[total, d_in]);
    for p in &seg.pieces {
        let src = store.frames(&p.source)?;
        if src.cols() != d_in {
            return Err(Error::Shape(format!("features of {} have {} columns, expected {d_in}", p.source, src.cols())));
        }
        let s0 = (p.source_start_ms / frame_ms) as usize;
        let d0 = (p.seg_start_ms / frame_ms) as usize;
        let n = (p.duration_ms / frame_ms) as usize;
        for i in 0..n {
            let (s, d) = (s0 + i, d0 + i);
            if s >= src.rows() || d >= total {
                break;
            }
            out.data[d * d_in..(d + 1) * d_in].copy_from_slice(src.row(s));
        }
    }
    Ok(out)
}

pub const MANIFEST_VERSION: u32 = 1;

/// One line of the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub version: u32,
    pub segment: RobustSegment,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and checks every record; an unknown version is fatal.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |reason: String| Error::Format { path: path.to_path_buf(), reason: format!("line {}: {reason}", n + 1) };
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
        let version = v.get("version").and_then(|x| x.as_u64()).ok_or_else(|| fmt("missing version".into()))?;
        if version != MANIFEST_VERSION as u64 {
            return Err(Error::UnknownVersion(version as u32));
        }
        let r: ManifestRecord = serde_json::from_value(v).map_err(|e| fmt(e.to_string()))?;
        r.segment.trajectory.check().map_err(|e| fmt(e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}
