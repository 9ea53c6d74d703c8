//! Single-file container: `PFCONT01` magic, little-endian u64 header length,
//! a JSON header, then the raw little-endian arrays back to back.
//!
//! The header lists every array (`name`, `dtype`, `shape`, byte `offset`)
//! and a free-form `meta` object. Image pixels are stored as f32; model
//! parameters and representations as f64 so that round trips stay exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{ImageBatch, PerturbationBudget, PoisonedDataset, BUDGET_TOLERANCE};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PFCONT01";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len() * 4,
            ArrayData::F64(v) => v.len() * 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    arrays: Vec<ArrayHeader>,
    meta: Map<String, Value>,
}

/// In-memory view of one container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Map<String, Value>,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    /// Empty container whose header already carries the artifact version.
    pub fn new(kind: impl Into<String>) -> Self {
        let mut meta = Map::new();
        meta.insert("artifact_version".into(), Value::from(crate::ARTIFACT_VERSION));
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::format(name, "array missing from container"))
    }

    pub fn meta_field(&self, name: &str) -> Result<&Value> {
        self.meta
            .get(name)
            .ok_or_else(|| Error::format(name, "missing header field"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut arrays = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let expect: usize = a.shape.iter().product();
            if expect != a.data.len() {
                return Err(Error::arg(format!(
                    "array `{}` has {} values but shape {:?}",
                    a.name,
                    a.data.len(),
                    a.shape
                )));
            }
            arrays.push(ArrayHeader {
                name: a.name.clone(),
                dtype: a.data.dtype().to_string(),
                shape: a.shape.clone(),
                offset,
            });
            offset += a.data.byte_len();
        }
        let header = Header {
            kind: self.kind.clone(),
            arrays,
            meta: self.meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header_bytes.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for a in &self.arrays {
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format("magic", "not a poisonforge container"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("header", "header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| Error::format("header", e.to_string()))?;
        let body = &bytes[body_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut expected_end = 0usize;
        for ah in header.arrays {
            let count: usize = ah.shape.iter().product();
            let width = match ah.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => {
                    return Err(Error::format(
                        format!("arrays[{}].dtype", ah.name),
                        format!("unknown dtype `{other}`"),
                    ))
                }
            };
            let end = ah.offset + count * width;
            if end > body.len() {
                return Err(Error::format(
                    format!("arrays[{}]", ah.name),
                    format!("needs {} bytes, file body holds {}", end, body.len()),
                ));
            }
            let raw = &body[ah.offset..end];
            let data = if width == 4 {
                ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            };
            expected_end = expected_end.max(end);
            arrays.push(NamedArray {
                name: ah.name,
                shape: ah.shape,
                data,
            });
        }
        if expected_end != body.len() {
            return Err(Error::format(
                "body",
                format!("{} trailing bytes after arrays", body.len() - expected_end),
            ));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Write `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Either kind of dataset the container stores.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetFile {
    Batch(ImageBatch),
    Poisoned(PoisonedDataset),
}

impl From<ImageBatch> for DatasetFile {
    fn from(b: ImageBatch) -> Self {
        DatasetFile::Batch(b)
    }
}

impl From<PoisonedDataset> for DatasetFile {
    fn from(p: PoisonedDataset) -> Self {
        DatasetFile::Poisoned(p)
    }
}

impl DatasetFile {
    pub fn into_batch(self) -> ImageBatch {
        match self {
            DatasetFile::Batch(b) => b,
            DatasetFile::Poisoned(p) => p.poisoned,
        }
    }

    pub fn into_poisoned(self) -> Result<PoisonedDataset> {
        match self {
            DatasetFile::Poisoned(p) => Ok(p),
            DatasetFile::Batch(_) => Err(Error::arg(
                "expected a poisoned dataset, found a plain image batch",
            )),
        }
    }
}

fn batch_meta(b: &ImageBatch, meta: &mut Map<String, Value>, prefix: &str) {
    meta.insert(format!("{prefix}labels"), serde_json::json!(b.labels));
    meta.insert(format!("{prefix}ids"), serde_json::json!(b.ids));
}

fn pixel_array(name: &str, b: &ImageBatch) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        shape: b.pixels.shape().to_vec(),
        data: ArrayData::F32(b.pixels.iter().copied().collect()),
    }
}

pub fn save_dataset(ds: &DatasetFile, path: &Path) -> Result<()> {
    save_dataset_with_meta(ds, path, Map::new())
}

/// Save with extra header fields (resolved run config, version string...).
pub fn save_dataset_with_meta(
    ds: &DatasetFile,
    path: &Path,
    extra: Map<String, Value>,
) -> Result<()> {
    let mut c = match ds {
        DatasetFile::Batch(b) => {
            let mut c = Container::new("image_batch");
            c.meta.insert("num_classes".into(), b.num_classes.into());
            batch_meta(b, &mut c.meta, "");
            c.arrays.push(pixel_array("pixels", b));
            c
        }
        DatasetFile::Poisoned(p) => {
            let mut c = Container::new("poisoned_dataset");
            c.meta.insert("num_classes".into(), p.clean.num_classes.into());
            batch_meta(&p.clean, &mut c.meta, "");
            c.meta
                .insert("budget".into(), serde_json::to_value(p.budget)?);
            c.meta
                .insert("generator_tag".into(), p.generator_tag.clone().into());
            c.meta.insert(
                "generator_config".into(),
                serde_json::to_value(&p.generator_config)?,
            );
            c.arrays.push(pixel_array("clean", &p.clean));
            c.arrays.push(pixel_array("poisoned", &p.poisoned));
            c
        }
    };
    for (k, v) in extra {
        c.meta.entry(k).or_insert(v);
    }
    c.write(path)
}

fn parse_field<T: serde::de::DeserializeOwned>(c: &Container, name: &str) -> Result<T> {
    serde_json::from_value(c.meta_field(name)?.clone())
        .map_err(|e| Error::format(name, e.to_string()))
}

fn pixels_from(c: &Container, name: &str) -> Result<Array4<f32>> {
    let a = c.array(name)?;
    if a.shape.len() != 4 {
        return Err(Error::format(name, format!("expected rank 4, got {:?}", a.shape)));
    }
    let data = match &a.data {
        ArrayData::F32(v) => v.clone(),
        ArrayData::F64(_) => return Err(Error::format(name, "pixels must be f32")),
    };
    Array4::from_shape_vec((a.shape[0], a.shape[1], a.shape[2], a.shape[3]), data)
        .map_err(|e| Error::format(name, e.to_string()))
}

fn batch_from(c: &Container, array: &str) -> Result<ImageBatch> {
    let pixels = pixels_from(c, array)?;
    let labels: Vec<usize> = parse_field(c, "labels")?;
    let ids: Vec<String> = parse_field(c, "ids")?;
    let num_classes: usize = parse_field(c, "num_classes")?;
    ImageBatch::new(pixels, labels, ids, num_classes)
        .map_err(|e| Error::format(array, e.to_string()))
}

/// Load a dataset written by [`save_dataset`]. A poisoned dataset whose
/// pixels exceed its stored budget is rejected with an integrity error.
pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    let c = Container::read(path)?;
    match c.kind.as_str() {
        "image_batch" => Ok(DatasetFile::Batch(batch_from(&c, "pixels")?)),
        "poisoned_dataset" => {
            let clean = batch_from(&c, "clean")?;
            let poisoned = batch_from(&c, "poisoned")?;
            let budget: PerturbationBudget = parse_field(&c, "budget")?;
            let tag: String = parse_field(&c, "generator_tag")?;
            let cfg: BTreeMap<String, Value> = parse_field(&c, "generator_config")?;
            if budget.is_checked() {
                for i in 0..clean.len() {
                    let d = budget.distance(poisoned.image(i), clean.image(i));
                    if d > budget.epsilon + BUDGET_TOLERANCE {
                        return Err(Error::Integrity(format!(
                            "sample `{}` exceeds stored {:?} budget {} (distance {})",
                            clean.ids()[i],
                            budget.norm,
                            budget.epsilon,
                            d
                        )));
                    }
                }
            }
            Ok(DatasetFile::Poisoned(PoisonedDataset::from_parts_unchecked(
                clean, poisoned, budget, tag, cfg,
            )))
        }
        other => Err(Error::format("kind", format!("not a dataset container: `{other}`"))),
    }
}

/// Read the header `meta` object of any container.
pub fn read_meta(path: &Path) -> Result<Map<String, Value>> {
    Ok(Container::read(path)?.meta)
}
