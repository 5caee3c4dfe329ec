//! Region feature files and their JSON manifests.
//!
//! Feature file layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `CAMPFEAT` |
//! | 2     | version (`u16`) |
//! | 4     | vector width `dim` (`u32`) |
//! | 4     | vector count `count` (`u32`) |
//! | 4 * dim * count | `f32` payload, one vector after another |
//!
//! Each image owns a contiguous run of vectors (one per region). The manifest
//! names the feature file, lists images by offset and region count, and lists
//! captions as token ids together with the id of their image.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Caption, Dataset};
use crate::encoders::{RawRegionFeatures, MAX_REGIONS};
use crate::error::{CampError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"CAMPFEAT";
pub const FEATURE_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 2 + 4 + 4;

/// Decoded contents of a feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub dim: u32,
    pub count: u32,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn vector(&self, k: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.data[k * d..(k + 1) * d]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and validates a feature file image; `path` is only used in errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |msg: String| CampError::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 8 && &bytes[..8] != FEATURE_MAGIC {
                return Err(format(format!("expected magic {:?}", "CAMPFEAT")));
            }
            return Err(CampError::Truncated {
                path: path.to_path_buf(),
                needed: HEADER_LEN as u64,
                available: bytes.len() as u64,
            });
        }
        if &bytes[..8] != FEATURE_MAGIC {
            return Err(format(format!("expected magic {:?}", "CAMPFEAT")));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != FEATURE_VERSION {
            return Err(CampError::Version {
                path: path.to_path_buf(),
                expected: FEATURE_VERSION,
                found: version,
            });
        }
        let dim = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
        let count = u32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes"));
        if dim == 0 {
            return Err(format("vector width is zero".into()));
        }
        // checked against the file size before anything is allocated
        let needed = (dim as u64).saturating_mul(count as u64).saturating_mul(4);
        let available = (bytes.len() - HEADER_LEN) as u64;
        if needed > available {
            return Err(CampError::Truncated {
                path: path.to_path_buf(),
                needed: needed.saturating_add(HEADER_LEN as u64),
                available: bytes.len() as u64,
            });
        }
        if needed < available {
            return Err(format(format!(
                "{} trailing bytes after the payload",
                available - needed
            )));
        }
        let payload = &bytes[HEADER_LEN..];
        let mut data = Vec::with_capacity((dim as usize) * (count as usize));
        for (index, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(CampError::NonFinite {
                    path: path.to_path_buf(),
                    index,
                });
            }
            data.push(v);
        }
        Ok(Self { dim, count, data })
    }
}

pub fn write_feature_file(path: &Path, file: &FeatureFile) -> Result<()> {
    std::fs::write(path, file.to_bytes()).map_err(|e| CampError::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let bytes = std::fs::read(path).map_err(|e| CampError::io(path, e))?;
    FeatureFile::from_bytes(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: String,
    /// Index of the image's first vector in the feature file.
    pub offset: usize,
    pub regions: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCaption {
    pub id: String,
    /// Id of the described image.
    pub image: String,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// Feature file path, relative to the manifest's directory.
    pub features: PathBuf,
    pub vocab_size: usize,
    pub images: Vec<ManifestImage>,
    pub captions: Vec<ManifestCaption>,
}

/// Writes `<manifest stem>.feat` next to the manifest, then the manifest.
pub fn save_dataset<S: Scalar>(data: &Dataset<S>, manifest_path: &Path) -> Result<()> {
    let dim = data.raw_dim().unwrap_or(1);
    let mut payload = Vec::new();
    let mut images = Vec::with_capacity(data.images.len());
    let mut offset = 0;
    for (k, im) in data.images.iter().enumerate() {
        let f = im.features();
        for r in 0..f.cols() {
            payload.extend((0..f.rows()).map(|i| f.get(i, r).as_f64() as f32));
        }
        images.push(ManifestImage {
            id: k.to_string(),
            offset,
            regions: f.cols(),
        });
        offset += f.cols();
    }
    let count = u32::try_from(offset).map_err(|_| CampError::Config("too many region vectors".into()))?;
    let dim32 = u32::try_from(dim).map_err(|_| CampError::Config("feature width too large".into()))?;
    let stem = manifest_path
        .file_stem()
        .ok_or_else(|| CampError::Config(format!("{} has no file name", manifest_path.display())))?;
    let feat_name = PathBuf::from(stem).with_extension("feat");
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    write_feature_file(
        &dir.join(&feat_name),
        &FeatureFile {
            dim: dim32,
            count,
            data: payload,
        },
    )?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        features: feat_name,
        vocab_size: data.vocab_size,
        images,
        captions: data
            .captions
            .iter()
            .enumerate()
            .map(|(k, c)| ManifestCaption {
                id: k.to_string(),
                image: c.image.to_string(),
                tokens: c.tokens.clone(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(manifest_path, text + "\n").map_err(|e| CampError::io(manifest_path, e))
}

/// Reads a manifest and its feature file into a dataset.
pub fn load_dataset<S: Scalar>(manifest_path: &Path) -> Result<Dataset<S>> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| CampError::io(manifest_path, e))?;
    let format = |msg: String| CampError::Format {
        path: manifest_path.to_path_buf(),
        msg,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(format(format!(
            "manifest version {} is not the supported {MANIFEST_VERSION}",
            manifest.version
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    let feat_path = dir.join(&manifest.features);
    let file = read_feature_file(&feat_path)?;
    let dim = file.dim as usize;

    let mut ids = HashMap::with_capacity(manifest.images.len());
    let mut images = Vec::with_capacity(manifest.images.len());
    for (k, im) in manifest.images.iter().enumerate() {
        if ids.insert(im.id.as_str(), k).is_some() {
            return Err(format(format!("duplicate image id {:?}", im.id)));
        }
        if im.regions == 0 || im.regions > MAX_REGIONS {
            return Err(format(format!("image {:?} has {} regions", im.id, im.regions)));
        }
        let end = im.offset.checked_add(im.regions).filter(|&e| e <= file.count as usize);
        if end.is_none() {
            return Err(format(format!(
                "image {:?} reads vectors {}..{} of {}",
                im.id,
                im.offset,
                im.offset.saturating_add(im.regions),
                file.count
            )));
        }
        let m = Tensor::from_fn(dim, im.regions, |i, r| S::lit(file.vector(im.offset + r)[i] as f64));
        images.push(RawRegionFeatures::new(m)?);
    }
    let mut captions = Vec::with_capacity(manifest.captions.len());
    for c in &manifest.captions {
        let image = *ids
            .get(c.image.as_str())
            .ok_or_else(|| format(format!("caption {:?} refers to unknown image {:?}", c.id, c.image)))?;
        captions.push(Caption {
            image,
            tokens: c.tokens.clone(),
        });
    }
    Dataset::new(images, captions, manifest.vocab_size)
}
