//! safetensors containers for weights, activations, Hessians and quantized
//! layers.
//!
//! Naming: weights are `<layer>.weight` (d_out × d_in), activations
//! `<layer>.input` or `<layer>.input.<shard>` (d_in × n_tokens). Every file
//! this module writes carries exactly one metadata key holding a JSON
//! document, which keeps the header byte-stable across runs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensorError, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::HessianState;
use crate::matrix::DenseMatrix;
use crate::quantizer::{GroupScale, QuantGrid, QuantizedLayer};

/// Metadata key used by every artifact written here.
pub const META_KEY: &str = "foem";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementKind {
    F32,
    F64,
    I32,
    I64,
}

impl ElementKind {
    pub fn width(self) -> usize {
        match self {
            ElementKind::F32 | ElementKind::I32 => 4,
            ElementKind::F64 | ElementKind::I64 => 8,
        }
    }

    fn dtype(self) -> Dtype {
        match self {
            ElementKind::F32 => Dtype::F32,
            ElementKind::F64 => Dtype::F64,
            ElementKind::I32 => Dtype::I32,
            ElementKind::I64 => Dtype::I64,
        }
    }

    fn from_dtype(name: &str, dtype: Dtype) -> Result<Self> {
        Ok(match dtype {
            Dtype::F32 => ElementKind::F32,
            Dtype::F64 => ElementKind::F64,
            Dtype::I32 => ElementKind::I32,
            Dtype::I64 => ElementKind::I64,
            other => {
                return Err(Error::UnsupportedKind {
                    name: name.to_string(),
                    kind: format!("{other:?}"),
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    shape: Vec<usize>,
    kind: ElementKind,
    data: Vec<u8>,
}

impl TensorEntry {
    /// Checks `payload length = product(shape) × width` before accepting bytes.
    pub fn new(name: &str, shape: Vec<usize>, kind: ElementKind, data: Vec<u8>) -> Result<Self> {
        let expected = shape.iter().product::<usize>() * kind.width();
        if data.len() != expected {
            return Err(Error::PayloadMismatch {
                name: name.to_string(),
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(TensorEntry { shape, kind, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Values widened to f64. Integer kinds convert exactly up to 2^53.
    pub fn to_f64(&self) -> Vec<f64> {
        let w = self.kind.width();
        self.data
            .chunks_exact(w)
            .map(|b| match self.kind {
                ElementKind::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                ElementKind::F64 => f64::from_le_bytes(b.try_into().unwrap()),
                ElementKind::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
                ElementKind::I64 => i64::from_le_bytes(b.try_into().unwrap()) as f64,
            })
            .collect()
    }

    fn to_i32(&self, name: &str) -> Result<Vec<i32>> {
        if self.kind != ElementKind::I32 {
            return Err(Error::UnsupportedKind {
                name: name.to_string(),
                kind: format!("{:?} (expected I32)", self.kind),
            });
        }
        Ok(self
            .data
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn matrix_dims(name: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        [n] => Ok((1, n)),
        _ => Err(Error::Format(format!("tensor `{name}` has rank {}, expected 1 or 2", shape.len()))),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    path: Option<PathBuf>,
    entries: BTreeMap<String, TensorEntry>,
    metadata: BTreeMap<String, String>,
}

fn map_st_error(e: SafeTensorError) -> Error {
    Error::Format(e.to_string())
}

/// Names the entry whose declared shape disagrees with its byte range, for
/// headers the safetensors validator rejected without saying which.
fn diagnose_header(bytes: &[u8]) -> Option<Error> {
    let n = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(bytes.get(8..8 + n)?).ok()?;
    for (name, info) in header.iter().filter(|(k, _)| *k != "__metadata__") {
        let kind = match info.get("dtype")?.as_str()? {
            "F32" => ElementKind::F32,
            "F64" => ElementKind::F64,
            "I32" => ElementKind::I32,
            "I64" => ElementKind::I64,
            other => {
                return Some(Error::UnsupportedKind {
                    name: name.clone(),
                    kind: other.to_string(),
                })
            }
        };
        let shape: Vec<usize> = serde_json::from_value(info.get("shape")?.clone()).ok()?;
        let offs: Vec<usize> = serde_json::from_value(info.get("data_offsets")?.clone()).ok()?;
        let got = offs.get(1)?.saturating_sub(*offs.first()?);
        let expected = shape.iter().product::<usize>() * kind.width();
        if got != expected {
            return Some(Error::PayloadMismatch {
                name: name.clone(),
                shape,
                expected,
                got,
            });
        }
    }
    None
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (n, header) = SafeTensors::read_metadata(bytes).map_err(|e| match e {
            SafeTensorError::TensorInvalidInfo | SafeTensorError::InvalidOffset(_) => {
                diagnose_header(bytes).unwrap_or_else(|| map_st_error(e))
            }
            other => map_st_error(other),
        })?;
        let data_start = 8 + n;
        let mut entries = BTreeMap::new();
        for (name, info) in header.tensors() {
            let kind = ElementKind::from_dtype(&name, info.dtype)?;
            let (a, b) = info.data_offsets;
            let data = bytes[data_start + a..data_start + b].to_vec();
            entries.insert(name.clone(), TensorEntry::new(&name, info.shape.clone(), kind, data)?);
        }
        let metadata = header
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        Ok(TensorFile {
            path: None,
            entries,
            metadata,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut f = Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })?;
        f.path = Some(path.to_path_buf());
        Ok(f)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.entries.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Sets the single JSON metadata document.
    pub fn set_metadata_json(&mut self, value: &impl Serialize) -> Result<()> {
        self.metadata.clear();
        self.metadata.insert(META_KEY.to_string(), serde_json::to_string(value)?);
        Ok(())
    }

    pub fn metadata_json<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        let raw = self
            .metadata
            .get(META_KEY)
            .ok_or_else(|| Error::Format(format!("missing `{META_KEY}` metadata")))?;
        Ok(serde_json::from_str(raw)?)
    }

    /// Inserts a tensor, replacing any previous entry with the same name.
    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn insert_raw(&mut self, name: &str, shape: Vec<usize>, kind: ElementKind, data: Vec<u8>) -> Result<()> {
        let e = TensorEntry::new(name, shape, kind, data)?;
        self.insert(name, e);
        Ok(())
    }

    /// Stores a matrix as F64, or F32 when `kind` says so.
    pub fn insert_matrix(&mut self, name: &str, m: &DenseMatrix, kind: ElementKind) -> Result<()> {
        let data: Vec<u8> = match kind {
            ElementKind::F64 => m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect(),
            ElementKind::F32 => m.as_slice().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
            other => {
                return Err(Error::UnsupportedKind {
                    name: name.to_string(),
                    kind: format!("{other:?} for a real matrix"),
                })
            }
        };
        self.insert_raw(name, vec![m.rows(), m.cols()], kind, data)
    }

    pub fn insert_i32(&mut self, name: &str, rows: usize, cols: usize, values: &[i32]) -> Result<()> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.insert_raw(name, vec![rows, cols], ElementKind::I32, data)
    }

    /// Reads `name` as a 64-bit matrix; 1-D tensors become a single row.
    pub fn load_tensor(&self, name: &str) -> Result<DenseMatrix> {
        let e = self.entry(name)?;
        let (r, c) = matrix_dims(name, &e.shape)?;
        DenseMatrix::from_vec(r, c, e.to_f64())
    }

    fn load_i32(&self, name: &str) -> Result<(usize, usize, Vec<i32>)> {
        let e = self.entry(name)?;
        let (r, c) = matrix_dims(name, &e.shape)?;
        Ok((r, c, e.to_i32(name)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let views = self
            .entries
            .iter()
            .map(|(n, e)| {
                TensorView::new(e.kind.dtype(), e.shape.clone(), &e.data)
                    .map(|v| (n.clone(), v))
                    .map_err(map_st_error)
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: Option<HashMap<String, String>> = if self.metadata.is_empty() {
            None
        } else {
            Some(self.metadata.clone().into_iter().collect())
        };
        safetensors::serialize(views, meta).map_err(map_st_error)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Header document of a quantized-layer file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantMeta {
    pub layer: String,
    pub bits: u8,
    pub group_size: Option<usize>,
    pub symmetric: bool,
    pub engine: String,
    pub beta: f64,
    pub damping: f64,
    pub block_size: usize,
    /// Effective run configuration, sufficient to reproduce the artifact.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayerFile {
    pub layer: QuantizedLayer,
    pub meta: QuantMeta,
}

impl QuantizedLayerFile {
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let q = &self.layer;
        q.validate()?;
        let g = q.grid();
        if (g.bits(), g.group_size(), g.symmetric()) != (self.meta.bits, self.meta.group_size, self.meta.symmetric) {
            return Err(Error::InvalidLayer("metadata grid disagrees with the layer's grid".into()));
        }
        let (d_out, d_in, ng) = (q.d_out(), q.d_in(), q.n_groups());
        let mut f = TensorFile::new();
        f.insert_i32("codes", d_out, d_in, q.codes())?;
        let scales = DenseMatrix::from_vec(d_out, ng, q.scales().iter().map(|s| s.scale).collect())?;
        f.insert_matrix("scales", &scales, ElementKind::F64)?;
        let zps: Vec<i32> = q.scales().iter().map(|s| s.zero_point).collect();
        f.insert_i32("zero_points", d_out, ng, &zps)?;
        f.set_metadata_json(&self.meta)?;
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let meta: QuantMeta = f.metadata_json()?;
        let grid = QuantGrid::new(meta.bits, meta.group_size, meta.symmetric)?;
        let (d_out, d_in, codes) = f.load_i32("codes")?;
        let scales = f.load_tensor("scales")?;
        let (zr, zc, zps) = f.load_i32("zero_points")?;
        let ng = grid.n_groups(d_in);
        if scales.shape() != (d_out, ng) || (zr, zc) != (d_out, ng) {
            return Err(Error::dims(
                "quantized layer groups",
                format!("{d_out}x{ng}"),
                format!("scales {:?}, zero_points {zr}x{zc}", scales.shape()),
            ));
        }
        let gs = scales
            .as_slice()
            .iter()
            .zip(zps)
            .map(|(&scale, zero_point)| GroupScale { scale, zero_point })
            .collect();
        let layer = QuantizedLayer::from_parts(d_out, d_in, grid, codes, gs)?;
        Ok(QuantizedLayerFile { layer, meta })
    }
}

/// Refuses to write when the layer violates its grid.
pub fn save_quantized(file: &QuantizedLayerFile, path: impl AsRef<Path>) -> Result<()> {
    file.to_tensor_file()?.save(path)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedLayerFile> {
    QuantizedLayerFile::from_tensor_file(&TensorFile::load(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianMeta {
    pub layer: String,
    pub n_samples: u64,
    /// Damping ratio the engines will apply; the stored matrix is undamped.
    pub damping: f64,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const HESSIAN_TENSOR: &str = "hessian";

pub fn hessian_file_name(layer: &str) -> String {
    format!("{layer}.hessian.safetensors")
}

/// Writes the undamped matrix; `meta.n_samples` is taken from `state`.
pub fn save_hessian(path: impl AsRef<Path>, state: &HessianState, meta: &HessianMeta) -> Result<()> {
    let mut f = TensorFile::new();
    f.insert_matrix(HESSIAN_TENSOR, &state.undamped(), ElementKind::F64)?;
    f.set_metadata_json(&HessianMeta {
        n_samples: state.n_samples(),
        ..meta.clone()
    })?;
    f.save(path)
}

pub fn load_hessian(path: impl AsRef<Path>) -> Result<(HessianState, HessianMeta)> {
    let f = TensorFile::load(path)?;
    let meta: HessianMeta = f.metadata_json()?;
    let h = f.load_tensor(HESSIAN_TENSOR)?;
    if !h.is_square() {
        return Err(Error::dims("Hessian tensor", "square", format!("{:?}", h.shape())));
    }
    Ok((HessianState::from_matrix(h, meta.n_samples)?, meta))
}
