//! Byte-level helpers shared by the checkpoint, adapter and dataset formats.

use std::fs;
use std::path::Path;

use lorafwi_tensor::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Manifest line for one tensor blob; offsets are relative to the start of
/// the blob section.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub(crate) fn encode_tensors<T: Scalar>(tensors: &[(String, &Tensor<T>)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut blob = Vec::with_capacity(tensors.iter().map(|(_, t)| t.numel() * T::DTYPE.size_of()).sum());
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            };
            for &v in t.data() {
                v.write_le(&mut blob);
            }
            entry
        })
        .collect();
    (entries, blob)
}

fn decode_as<S: Scalar, T: Scalar>(bytes: &[u8], shape: Vec<usize>) -> Result<Tensor<T>> {
    let values = bytes.chunks_exact(S::DTYPE.size_of()).map(|c| T::of(S::read_le(c).to_f64_lossy())).collect();
    Ok(Tensor::new(shape, values)?)
}

/// Decodes blobs laid out back to back in manifest order. The blob section
/// must be consumed exactly.
pub(crate) fn decode_tensors<T: Scalar>(entries: &[TensorEntry], blob: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut pos = 0usize;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.offset != pos as u64 {
            return Err(Error::Corrupt(format!("tensor {} at offset {}, expected {pos}", e.name, e.offset)));
        }
        let numel: usize = e.shape.iter().product();
        if e.shape.is_empty() || numel == 0 {
            return Err(Error::Corrupt(format!("tensor {} has invalid shape {:?}", e.name, e.shape)));
        }
        let len = numel * e.dtype.size_of();
        let bytes = blob
            .get(pos..pos + len)
            .ok_or_else(|| Error::Corrupt(format!("truncated data for tensor {}", e.name)))?;
        let tensor = match e.dtype {
            DType::F32 => decode_as::<f32, T>(bytes, e.shape.clone())?,
            DType::F64 => decode_as::<f64, T>(bytes, e.shape.clone())?,
        };
        out.push((e.name.clone(), tensor));
        pos += len;
    }
    if pos != blob.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after tensor data", blob.len() - pos)));
    }
    Ok(out)
}

/// Sequential reader over a whole file image.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("unexpected end of file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Corrupt(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// u32 length prefix followed by JSON.
    pub(crate) fn json<D: for<'de> Deserialize<'de>>(&mut self, what: &str) -> Result<D> {
        let len = self.u32()? as usize;
        let text = self.take(len)?;
        serde_json::from_slice(text).map_err(|e| Error::Corrupt(format!("{what}: {e}")))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }
}

pub(crate) fn push_json<S: Serialize>(out: &mut Vec<u8>, value: &S) {
    let text = serde_json::to_vec(value).expect("manifest types serialize");
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file so readers never observe a
/// partially written artifact.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
