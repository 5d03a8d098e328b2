//! Tensor files and the corpus manifest.
//!
//! Tensor file layout, all little-endian:
//!
//! ```text
//! "STDT" | u32 version (=1) | u8 dtype (0 = f32) | u8 ndim | ndim x u64 dims | payload
//! ```
//!
//! The payload is the row-major f32 data, so a file is always
//! `10 + 8 * ndim + 4 * product(shape)` bytes long.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorFormatError};

pub const MAGIC: [u8; 4] = *b"STDT";
pub const VERSION: u32 = 1;
pub const MAX_DIMS: usize = 4;

const FIXED_HEADER: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self, TensorFormatError> {
        match code {
            0 => Ok(DType::F32),
            other => Err(TensorFormatError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        4
    }
}

/// Dense row-major f32 array with 1 to 4 non-zero dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[u64]) -> Result<u64, TensorFormatError> {
    if shape.is_empty() || shape.len() > MAX_DIMS {
        return Err(TensorFormatError::InvalidShape {
            shape: shape.to_vec(),
            reason: "tensor must have 1 to 4 dimensions",
        });
    }
    if shape.contains(&0) {
        return Err(TensorFormatError::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be non-zero",
        });
    }
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or(TensorFormatError::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows",
        })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorFormatError> {
        let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
        let n = check_shape(&dims)?;
        if n != data.len() as u64 {
            return Err(TensorFormatError::InvalidShape {
                shape: dims,
                reason: "element count does not match data length",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorFormatError> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn dtype(&self) -> DType {
        DType::F32
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Contiguous sub-block obtained by fixing the leading indices.
    pub fn slice(&self, leading: &[usize]) -> Result<&[f32]> {
        if leading.len() > self.shape.len() {
            return Err(Error::Shape(format!(
                "{} leading indices for a {}-d tensor",
                leading.len(),
                self.shape.len()
            )));
        }
        let strides = self.strides();
        let mut offset = 0;
        for (axis, (&i, &dim)) in leading.iter().zip(&self.shape).enumerate() {
            if i >= dim {
                return Err(Error::OutOfRange(format!(
                    "index {i} on axis {axis} of size {dim}"
                )));
            }
            offset += i * strides[axis];
        }
        let len = self.shape[leading.len()..].iter().product::<usize>();
        Ok(&self.data[offset..offset + len])
    }

    pub fn file_size(&self) -> u64 {
        file_size_for(&self.shape)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.file_size() as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DType::F32 as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorFormatError> {
        let header = parse_header(bytes)?;
        let body = &bytes[header.header_len..];
        let expected = header.payload_bytes();
        let actual = body.len() as u64;
        if actual < expected {
            return Err(TensorFormatError::TruncatedPayload { expected, actual });
        }
        if actual > expected {
            return Err(TensorFormatError::TrailingBytes { expected, actual });
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor {
            shape: header.shape.iter().map(|&d| d as usize).collect(),
            data,
        })
    }
}

pub fn file_size_for(shape: &[usize]) -> u64 {
    (FIXED_HEADER + 8 * shape.len()) as u64 + 4 * shape.iter().map(|&d| d as u64).product::<u64>()
}

/// Decoded tensor header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub header_len: usize,
}

impl TensorHeader {
    pub fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn payload_bytes(&self) -> u64 {
        self.element_count() * self.dtype.size() as u64
    }
}

fn parse_header(bytes: &[u8]) -> Result<TensorHeader, TensorFormatError> {
    if bytes.len() < FIXED_HEADER {
        // Report bad magic first when we have enough bytes to see it.
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(TensorFormatError::BadMagic {
                found: [bytes[0], bytes[1], bytes[2], bytes[3]],
            });
        }
        return Err(TensorFormatError::TruncatedHeader {
            expected: FIXED_HEADER,
            actual: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(TensorFormatError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(TensorFormatError::VersionMismatch { found: version });
    }
    let dtype = DType::from_code(bytes[8])?;
    let ndim = bytes[9] as usize;
    let header_len = FIXED_HEADER + 8 * ndim;
    if bytes.len() < header_len {
        return Err(TensorFormatError::TruncatedHeader {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let shape: Vec<u64> = bytes[FIXED_HEADER..header_len]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    check_shape(&shape)?;
    Ok(TensorHeader {
        dtype,
        shape,
        header_len,
    })
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&t.to_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|source| Error::Tensor {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads only the header and checks the payload length against the file size.
pub fn read_tensor_header(path: impl AsRef<Path>) -> Result<TensorHeader> {
    let path = path.as_ref();
    let wrap = |source| Error::Tensor {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut head = vec![0u8; FIXED_HEADER + 8 * MAX_DIMS];
    let mut filled = 0;
    while filled < head.len() {
        let n = file
            .read(&mut head[filled..])
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    head.truncate(filled);
    let header = parse_header(&head).map_err(wrap)?;
    let actual = file_len - header.header_len as u64;
    let expected = header.payload_bytes();
    if actual < expected {
        return Err(wrap(TensorFormatError::TruncatedPayload {
            expected,
            actual,
        }));
    }
    if actual > expected {
        return Err(wrap(TensorFormatError::TrailingBytes { expected, actual }));
    }
    Ok(header)
}

/// One manifest line: where an utterance's attention and feature tensors live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub attention_path: PathBuf,
    pub feature_path: PathBuf,
    pub num_frames: u64,
    pub frame_shift_ms: f64,
    pub layers: Vec<usize>,
    pub has_cls: bool,
    /// Directory the relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ManifestEntry {
    pub fn attention_file(&self) -> PathBuf {
        self.base_dir.join(&self.attention_path)
    }

    pub fn feature_file(&self) -> PathBuf {
        self.base_dir.join(&self.feature_path)
    }

    /// Position of model layer `layer` on the tensors' leading axis.
    pub fn layer_position(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }

    pub fn frame_shift_s(&self) -> f64 {
        self.frame_shift_ms / 1000.0
    }

    pub fn nominal_duration_s(&self) -> f64 {
        self.num_frames as f64 * self.frame_shift_s()
    }

    pub fn check_fields(&self) -> Result<()> {
        let bad = |msg: &str| Error::Manifest {
            id: self.utterance_id.clone(),
            msg: msg.to_string(),
        };
        if self.utterance_id.is_empty() {
            return Err(bad("empty utterance_id"));
        }
        if !(self.frame_shift_ms > 0.0 && self.frame_shift_ms.is_finite()) {
            return Err(bad("frame_shift_ms must be positive"));
        }
        if self.num_frames == 0 {
            return Err(bad("num_frames must be positive"));
        }
        if self.layers.is_empty() {
            return Err(bad("layers list is empty"));
        }
        let unique: HashSet<_> = self.layers.iter().collect();
        if unique.len() != self.layers.len() {
            return Err(bad("layers list has duplicates"));
        }
        Ok(())
    }

    /// Checks the referenced tensors exist and agree with the record.
    pub fn check_tensors(&self) -> Result<()> {
        let id = &self.utterance_id;
        let attn_file = self.attention_file();
        if !attn_file.is_file() {
            return Err(Error::MissingFile {
                id: id.clone(),
                path: attn_file,
            });
        }
        let feat_file = self.feature_file();
        if !feat_file.is_file() {
            return Err(Error::MissingFile {
                id: id.clone(),
                path: feat_file,
            });
        }

        let attn = read_tensor_header(&attn_file)?;
        let feat = read_tensor_header(&feat_file)?;
        self.check_shapes(&attn.shape, &feat.shape)
    }

    /// Checks attention and feature shapes against the record.
    pub fn check_shapes(&self, attn_shape: &[u64], feat_shape: &[u64]) -> Result<()> {
        let id = &self.utterance_id;
        let cls = self.has_cls as u64;
        let n_layers = self.layers.len() as u64;
        match attn_shape.len() {
            3 | 4 => {}
            n => {
                return Err(Error::Manifest {
                    id: id.clone(),
                    msg: format!(
                        "attention tensor must be [layer, head, key] or [layer, head, query, key], got {n} dims"
                    ),
                })
            }
        }
        if attn_shape[0] != n_layers {
            return Err(Error::FrameMismatch {
                id: id.clone(),
                what: "attention layer axis",
                expected: n_layers,
                actual: attn_shape[0],
            });
        }
        let keys = *attn_shape.last().unwrap();
        if keys != self.num_frames + cls {
            return Err(Error::FrameMismatch {
                id: id.clone(),
                what: "attention key axis",
                expected: self.num_frames + cls,
                actual: keys,
            });
        }
        if attn_shape.len() == 4 && attn_shape[2] != keys {
            return Err(Error::FrameMismatch {
                id: id.clone(),
                what: "attention query axis",
                expected: keys,
                actual: attn_shape[2],
            });
        }

        if feat_shape.len() != 3 {
            return Err(Error::Manifest {
                id: id.clone(),
                msg: format!(
                    "feature tensor must be [layer, frame, dim], got {} dims",
                    feat_shape.len()
                ),
            });
        }
        if feat_shape[0] != n_layers {
            return Err(Error::FrameMismatch {
                id: id.clone(),
                what: "feature layer axis",
                expected: n_layers,
                actual: feat_shape[0],
            });
        }
        // Features may or may not carry the CLS row.
        let frames = feat_shape[1];
        if frames != self.num_frames && frames != self.num_frames + cls {
            return Err(Error::FrameMismatch {
                id: id.clone(),
                what: "feature frame axis",
                expected: self.num_frames,
                actual: frames,
            });
        }
        Ok(())
    }
}

/// Reads a JSON-lines manifest, validating every record and the tensors it
/// references. Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
        entry.base_dir = base_dir.clone();
        entry.check_fields()?;
        if !seen.insert(entry.utterance_id.clone()) {
            return Err(Error::DuplicateId(entry.utterance_id));
        }
        entry.check_tensors()?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Reads several manifest shards as one manifest; ids must be unique across shards.
pub fn read_manifests<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<ManifestEntry>> {
    let mut all = Vec::new();
    let mut seen = HashSet::new();
    for p in paths {
        for entry in read_manifest(p)? {
            if !seen.insert(entry.utterance_id.clone()) {
                return Err(Error::DuplicateId(entry.utterance_id));
            }
            all.push(entry);
        }
    }
    Ok(all)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
