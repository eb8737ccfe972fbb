//! On-disk formats: feature files, annotation/prediction JSON, inference
//! records, checkpoints and loss curves. Every write goes to a temporary
//! sibling first and is renamed into place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::evalproto::AnnotationSet;
use crate::layers::{Module, TensorKind};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::EpochLoss;

const CHECKPOINT_MAGIC: &[u8; 8] = b"BNDCKPT1";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------------------
// features

/// Sidecar of a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMeta {
    pub video_id: String,
    pub frames: usize,
    pub channels: usize,
    pub fps: f64,
}

fn feature_paths(dir: &Path, video_id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{video_id}.bin")), dir.join(format!("{video_id}.json")))
}

/// Writes `[T, C]` features as little-endian `f64`, row-major, plus a JSON sidecar.
pub fn write_features(dir: &Path, video_id: &str, features: &Tensor, fps: f64) -> Result<()> {
    if features.shape().len() != 2 {
        return Err(Error::Shape(format!("features must be [T, C], got {:?}", features.shape())));
    }
    let (bin, meta) = feature_paths(dir, video_id);
    let bytes: Vec<u8> = features.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&bin, &bytes)?;
    write_json(
        &meta,
        &FeatureMeta {
            video_id: video_id.to_string(),
            frames: features.dim(0),
            channels: features.dim(1),
            fps,
        },
    )
}

pub fn read_features(dir: &Path, video_id: &str) -> Result<(Tensor, FeatureMeta)> {
    let (bin, meta_path) = feature_paths(dir, video_id);
    let meta: FeatureMeta = read_json(&meta_path)?;
    let bytes = read(&bin)?;
    let want = meta.frames * meta.channels * 8;
    if bytes.len() != want {
        return Err(Error::Input(format!(
            "{}: expected {want} bytes for {}x{} features, found {}",
            bin.display(),
            meta.frames,
            meta.channels,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((Tensor::from_vec(&[meta.frames, meta.channels], data)?, meta))
}

/// Video ids with a feature sidecar in `dir`, sorted.
pub fn list_videos(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("cannot list features in {}: {e}", dir.display())))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Input(format!("no feature files in {}", dir.display())));
    }
    Ok(ids)
}

// ---------------------------------------------------------------------------
// annotations and predictions

pub fn write_annotations(path: &Path, annotations: &BTreeMap<String, AnnotationSet>) -> Result<()> {
    write_json(path, annotations)
}

pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, AnnotationSet>> {
    let mut map: BTreeMap<String, AnnotationSet> = read_json(path)?;
    for (id, ann) in map.iter_mut() {
        ann.video_id = id.clone();
        ann.validate()?;
    }
    Ok(map)
}

pub fn write_predictions(path: &Path, predictions: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    write_json(path, predictions)
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    read_json(path)
}

/// Per-video result of dynamic inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub video_id: String,
    pub boundaries_frames: Vec<usize>,
    pub boundaries_seconds: Vec<f64>,
    /// 1-based stage at which each frame left the pipeline.
    pub exit_stage: Vec<usize>,
    pub frames_processed: Vec<usize>,
    pub macs_per_stage: Vec<u64>,
    pub macs_total: u64,
}

// ---------------------------------------------------------------------------
// checkpoints

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

/// Layout: magic, config JSON, named tensors (parameters and normalization
/// statistics, visit order, `f64` LE), SHA-256 of everything before it.
pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let config = serde_json::to_vec(&model.config)?;
    put_u64(&mut buf, config.len() as u64);
    buf.extend_from_slice(&config);
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit("", &mut |name, _, t| {
        tensors.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    });
    put_u32(&mut buf, tensors.len() as u32);
    for (name, shape, data) in tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, shape.len() as u32);
        for d in shape {
            put_u64(&mut buf, d as u64);
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn model_from_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupt".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let n = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let mut model = Model::new(config, 0)?;
    let count = r.u32()? as usize;
    let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        stored.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let mut problem = None;
    let mut seen = 0usize;
    model.visit_mut("", &mut |name, _: TensorKind, t| {
        if problem.is_some() {
            return;
        }
        match stored.get(name) {
            Some(s) if s.shape() == t.shape() => {
                *t = s.clone();
                seen += 1;
            }
            Some(s) => {
                problem = Some(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    s.shape(),
                    t.shape()
                ))
            }
            None => problem = Some(format!("tensor {name} missing")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if seen != stored.len() {
        return Err(Error::Checkpoint("checkpoint holds tensors the model does not use".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    model_from_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// csv

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let depth = curve.first().map_or(0, |e| e.per_detector.len());
    let mut s = String::from("epoch");
    for l in 1..=depth {
        let _ = write!(s, ",loss_detector{l}");
    }
    s.push_str(",total\n");
    for e in curve {
        let _ = write!(s, "{}", e.epoch);
        for v in &e.per_detector {
            let _ = write!(s, ",{v:.8}");
        }
        let _ = writeln!(s, ",{:.8}", e.total);
    }
    s
}
