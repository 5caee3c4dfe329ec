//! In-memory datasets, the synthetic benchmark, and on-disk formats.

mod checkpoint;
mod features;
mod synthetic;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, RngState, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use features::{
    load_dataset, read_feature_file, save_dataset, write_feature_file, FeatureFile, Manifest, ManifestCaption,
    ManifestImage, FEATURE_MAGIC, FEATURE_VERSION, MANIFEST_VERSION,
};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticMeta, SyntheticSpec};

use crate::encoders::RawRegionFeatures;
use crate::error::{CampError, Result};
use crate::scalar::Scalar;

/// A caption and the index of the image it describes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub image: usize,
    pub tokens: Vec<usize>,
}

/// Images with their captions; several captions may share an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub images: Vec<RawRegionFeatures<S>>,
    pub captions: Vec<Caption>,
    pub vocab_size: usize,
}

impl<S: Scalar> Dataset<S> {
    /// Checks image references, token ids and feature widths.
    pub fn new(images: Vec<RawRegionFeatures<S>>, captions: Vec<Caption>, vocab_size: usize) -> Result<Self> {
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.raw_dim() != first.raw_dim()) {
                return Err(CampError::InvalidShape(format!(
                    "images mix feature widths {} and {}",
                    first.raw_dim(),
                    bad.raw_dim()
                )));
            }
        }
        for (k, c) in captions.iter().enumerate() {
            if c.image >= images.len() {
                return Err(CampError::Config(format!(
                    "caption {k} refers to image {} of {}",
                    c.image,
                    images.len()
                )));
            }
            if c.tokens.is_empty() {
                return Err(CampError::Domain(format!("caption {k} is empty")));
            }
            if let Some(&id) = c.tokens.iter().find(|&&t| t >= vocab_size) {
                return Err(CampError::TokenOutOfVocab { id, vocab: vocab_size });
            }
        }
        Ok(Self {
            images,
            captions,
            vocab_size,
        })
    }

    pub fn raw_dim(&self) -> Option<usize> {
        self.images.first().map(|im| im.raw_dim())
    }

    /// Ground-truth image index of every caption.
    pub fn caption_images(&self) -> Vec<usize> {
        self.captions.iter().map(|c| c.image).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            images: self
                .images
                .iter()
                .map(|im| RawRegionFeatures::new(im.features().cast()).expect("cast keeps shape and finiteness"))
                .collect(),
            captions: self.captions.clone(),
            vocab_size: self.vocab_size,
        }
    }

    /// The images in `range` and their captions, re-indexed from zero.
    pub fn slice_images(&self, range: std::ops::Range<usize>) -> Self {
        let images = self.images[range.clone()].to_vec();
        let captions = self
            .captions
            .iter()
            .filter(|c| range.contains(&c.image))
            .map(|c| Caption {
                image: c.image - range.start,
                tokens: c.tokens.clone(),
            })
            .collect();
        Self {
            images,
            captions,
            vocab_size: self.vocab_size,
        }
    }
}
