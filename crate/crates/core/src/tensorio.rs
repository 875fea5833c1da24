//! Portable persistence: tensor containers, JSON-Lines dataset manifests and
//! checkpoint directories.
//!
//! Container layout: 8-byte little-endian header length, UTF-8 JSON header,
//! raw little-endian `f32` payload in C order.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::groupnet::ModelParams;
use crate::tensor::Tensor;
use crate::volume::{ImageVolume, ProbSeg, Volume};

pub const ELEMENT_TYPE: &str = "f32";
pub const AXIS_ORDER: &str = "C row-major";

/// Optional header fields of a container.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    /// Millimetres per spatial axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Vec<f64>>,
    #[serde(default)]
    pub allow_non_finite: bool,
    #[serde(default)]
    pub metadata: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    order: String,
    #[serde(flatten)]
    meta: TensorMeta,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some_and(|b| b <= isize::MAX as usize))
        .ok_or_else(|| Error::BadShape(shape.to_vec()))
}

/// Encodes a container into bytes.
pub fn encode_tensor(values: &Tensor<f32>, meta: &TensorMeta) -> Result<Vec<u8>> {
    let n = element_count(values.shape())?;
    debug_assert_eq!(n, values.len());
    if !meta.allow_non_finite {
        if let Some(i) = values.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
    }
    let header = serde_json::to_vec(&Header {
        shape: values.shape().to_vec(),
        dtype: ELEMENT_TYPE.into(),
        order: AXIS_ORDER.into(),
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + 4 * n);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for x in values.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Parses container bytes; `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Tensor<f32>, TensorMeta)> {
    let malformed = |message: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 8 {
        return Err(malformed(format!("file is {} bytes, shorter than the length prefix", bytes.len())));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen)
        .ok()
        .filter(|&h| h <= bytes.len() - 8)
        .ok_or_else(|| malformed(format!("header length {hlen} exceeds file size")))?;
    let header: Header =
        serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| malformed(e.to_string()))?;
    if header.dtype != ELEMENT_TYPE {
        return Err(Error::UnsupportedType(header.dtype));
    }
    if header.order != AXIS_ORDER {
        return Err(malformed(format!("unsupported axis order {:?}", header.order)));
    }
    let n = element_count(&header.shape)?;
    let payload = &bytes[8 + hlen..];
    if payload.len() < 4 * n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 4 * n,
            found: payload.len(),
        });
    }
    if payload.len() > 4 * n {
        return Err(malformed(format!(
            "{} trailing bytes after the payload",
            payload.len() - 4 * n
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if !header.meta.allow_non_finite {
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
    }
    Ok((Tensor::from_vec(&header.shape, data), header.meta))
}

pub fn write_tensor(path: impl AsRef<Path>, values: &Tensor<f32>, meta: &TensorMeta) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(values, meta)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Tensor<f32>, TensorMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Stores a volume as shape `[channels, ...extent]` with spacing.
pub fn write_volume(path: impl AsRef<Path>, v: &Volume<f32>, metadata: Map<String, Value>) -> Result<()> {
    let mut shape = vec![v.channels()];
    shape.extend_from_slice(v.grid().extent());
    let meta = TensorMeta {
        channels: Some(v.channels()),
        spacing: Some(v.grid().spacing().to_vec()),
        allow_non_finite: false,
        metadata,
    };
    write_tensor(path, &Tensor::from_vec(&shape, v.data().to_vec()), &meta)
}

/// Reads a volume; a header without `channels` is a single-channel grid.
pub fn read_volume(path: impl AsRef<Path>) -> Result<(Volume<f32>, Map<String, Value>)> {
    let path = path.as_ref();
    let (t, meta) = read_tensor(path)?;
    let (channels, extent) = match meta.channels {
        Some(c) if t.shape().first() == Some(&c) => (c, t.shape()[1..].to_vec()),
        Some(c) => {
            return Err(Error::ShapeMismatch(format!(
                "{}: header says {c} channels but shape is {:?}",
                path.display(),
                t.shape()
            )))
        }
        None => (1, t.shape().to_vec()),
    };
    let grid = match &meta.spacing {
        Some(s) => Grid::with_spacing(&extent, s)?,
        None => Grid::new(&extent)?,
    };
    Ok((Volume::new(grid, channels, t.into_data())?, meta.metadata))
}

/// Loads an image, min-max normalizing it unless it already lies in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageVolume<f32>> {
    let (v, _) = read_volume(path)?;
    if v.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "image must have 1 channel, got {}",
            v.channels()
        )));
    }
    if v.data().iter().all(|x| (0.0..=1.0).contains(x)) {
        ImageVolume::from_volume(v)
    } else {
        ImageVolume::ingest(v.grid().clone(), v.into_data())
    }
}

pub fn read_seg(path: impl AsRef<Path>) -> Result<ProbSeg<f32>> {
    let (v, _) = read_volume(path)?;
    ProbSeg::from_volume(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One subject. Paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_path: Option<PathBuf>,
    pub modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SubjectRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SubjectRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn parse_record(line: usize, value: Value, base: &Path) -> Result<SubjectRecord> {
    let obj = value.as_object().ok_or_else(|| Error::MalformedHeader {
        path: base.to_path_buf(),
        message: format!("record {line} is not a JSON object"),
    })?;
    let string = |field: &'static str| -> Result<Option<String>> {
        match obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => Err(Error::MalformedHeader {
                path: base.to_path_buf(),
                message: format!("record {line}: field {field} must be a string, got {other}"),
            }),
        }
    };
    let required = |field: &'static str| -> Result<String> {
        string(field)?.ok_or(Error::MissingField { line, field })
    };
    let id = required("id")?;
    let image_path = required("image_path")?;
    let split_raw = required("split")?;
    let split = Split::parse(&split_raw).ok_or(Error::UnknownSplit {
        line,
        split: split_raw,
    })?;
    let modality = required("modality")?;
    let age = match obj.get("age") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or_else(|| Error::MalformedHeader {
            path: base.to_path_buf(),
            message: format!("record {line}: age must be a number"),
        })?),
    };
    let resolve = |p: String| -> Result<PathBuf> {
        let p = base.join(p);
        if !p.exists() {
            return Err(Error::io(
                &p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file does not exist"),
            ));
        }
        Ok(p)
    };
    Ok(SubjectRecord {
        id,
        image_path: resolve(image_path)?,
        seg_path: string("seg_path")?.map(resolve).transpose()?,
        modality,
        age,
        diagnosis: string("diagnosis")?,
        split,
    })
}

/// Loads and validates a JSON-Lines manifest. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            message: format!("record {}: {e}", i + 1),
        })?;
        let rec = parse_record(i + 1, value, base)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    Ok(DatasetManifest { records })
}

/// Model state on disk: `config.json`, `index.json`, and one container per
/// parameter (`params/`) and optimizer tensor (`optim/`).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub params: ModelParams<f32>,
    pub optimizer: Vec<(String, Tensor<f32>)>,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    iteration: u64,
    params: Vec<IndexEntry>,
    #[serde(default)]
    optimizer: Vec<IndexEntry>,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.tensor")
}

fn write_group(dir: &Path, sub: &str, items: &[(String, Tensor<f32>)]) -> Result<Vec<IndexEntry>> {
    let d = dir.join(sub);
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    items
        .iter()
        .map(|(name, t)| {
            let file = format!("{sub}/{}", file_name(name));
            write_tensor(dir.join(&file), t, &TensorMeta::default())?;
            Ok(IndexEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            })
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint, replacing `dir` only once the new copy is complete.
pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    write_json(&staging.join("config.json"), &ckpt.config)?;
    let index = CheckpointIndex {
        iteration: ckpt.iteration,
        params: write_group(&staging, "params", ckpt.params.entries())?,
        optimizer: write_group(&staging, "optim", &ckpt.optimizer)?,
    };
    write_json(&staging.join("index.json"), &index)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn read_group(dir: &Path, entries: &[IndexEntry]) -> Result<Vec<(String, Tensor<f32>)>> {
    entries
        .iter()
        .map(|e| {
            let (t, _) = read_tensor(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: index records shape {:?}, file has {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            Ok((e.name.clone(), t))
        })
        .collect()
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let read_json = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let config: Value = serde_json::from_slice(&read_json("config.json")?)?;
    let index: CheckpointIndex = serde_json::from_slice(&read_json("index.json")?)?;
    Ok(Checkpoint {
        config,
        params: ModelParams::from_entries(read_group(dir, &index.params)?),
        optimizer: read_group(dir, &index.optimizer)?,
        iteration: index.iteration,
    })
}
