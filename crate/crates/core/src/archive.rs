// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor archive I/O.
//!
//! The archive is a single safetensors file holding little-endian `F32`
//! tensors: an 8-byte little-endian header length `N`, then `N` bytes of
//! JSON mapping each tensor name to `{"dtype":"F32","shape":[..],
//! "data_offsets":[begin,end]}`, then the raw data buffer. Offsets are
//! relative to the start of the data buffer. An optional `__metadata__`
//! string map is preserved but not interpreted. A directory is accepted in
//! place of a file when it contains `model.safetensors`.
//!
//! See `docs/FORMATS.md` for the tensor names the model expects.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

/// File name looked up when the archive path is a directory.
pub const ARCHIVE_FILE_NAME: &str = "model.safetensors";

/// A named, row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// All tensors of an archive, keyed by name.
#[derive(Debug, Default)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, RawTensor>,
    pub metadata: BTreeMap<String, String>,
}

pub fn resolve_archive_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ARCHIVE_FILE_NAME)
    } else {
        path.to_path_buf()
    }
}

impl TensorArchive {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let file = resolve_archive_path(path.as_ref());
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Archive(format!("bad header: {e}")))?;
        let metadata = header
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Archive(format!("bad archive: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Archive(format!(
                    "tensor `{name}` has dtype {:?}; only F32 is supported",
                    view.dtype()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(
                name,
                RawTensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self { tensors, metadata })
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), RawTensor { shape, data });
    }

    /// Serialize to bytes. Tensor order in the header is sorted by name, so equal
    /// archives produce identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), bytes, t.shape.clone())
            })
            .collect();
        let mut views = Vec::with_capacity(buffers.len());
        for (name, bytes, shape) in &buffers {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map_err(|e| Error::Archive(format!("tensor `{name}`: {e}")))?;
            views.push((name.as_str(), view));
        }
        let metadata = if self.metadata.is_empty() {
            None
        } else {
            Some(self.metadata.clone().into_iter().collect())
        };
        safetensors::serialize(views, &metadata)
            .map_err(|e| Error::Archive(format!("serialize: {e}")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut a = TensorArchive::default();
        a.insert("b", vec![2], vec![1.5, -2.0]);
        a.insert("a", vec![1, 3], vec![0.0, f32::MIN_POSITIVE, 7.25]);
        a.metadata.insert("format".into(), "pt".into());
        let bytes = a.to_bytes().unwrap();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors, a.tensors);
        assert_eq!(back.metadata, a.metadata);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(
            TensorArchive::from_bytes(b"not an archive"),
            Err(Error::Archive(_))
        ));
    }
}
