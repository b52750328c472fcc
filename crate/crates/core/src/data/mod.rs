//! Paired multi-scale training data.
//!
//! Pyramid level `k` of an HR image is the image downsampled `k` times by 2×
//! with [`bicubic_downsample`]; level 0 is the HR image itself.

mod io;
mod manifest;
mod render;
mod resample;

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use io::{load_png, quantize, save_png, to_u8};
pub use manifest::{
    build_manifest, build_manifest_from_dir, generate_synthetic_corpus, sha256_hex, DatasetManifest, LoadedItem,
    ManifestEntry, Role, SourceItem, SplitFractions, MIN_MANIFEST_ITEMS,
};
pub use render::{render_synthetic_patch, synthetic_items, SyntheticSpec};
pub use resample::{bicubic_downsample, bicubic_upsample, cubic, reflect, resize_bicubic, BICUBIC_A};

use crate::tensor::{ImageTensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image is empty")]
    EmptyImage,
    #[error("2× downsampling needs even dimensions, got {height}×{width}")]
    OddDimensions { height: usize, width: usize },
    #[error("{height}×{width} is not divisible by 2^{levels}")]
    NotDivisible { height: usize, width: usize, levels: usize },
    #[error("page {height}×{width} is smaller than the {size}×{size} patch")]
    PageTooSmall { height: usize, width: usize, size: usize },
    #[error("text to render is empty")]
    EmptyText,
    #[error("text does not fit the canvas: {0}")]
    TextDoesNotFit(String),
    #[error("character {0:?} is not in the bundled font")]
    UnsupportedChar(char),
    #[error("canvas size {0} must be a positive multiple of 4")]
    BadCanvas(usize),
    #[error("a manifest needs at least {MIN_MANIFEST_ITEMS} items, got {0}")]
    TooFewItems(usize),
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
    #[error("cannot read image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("file referenced by manifest is missing: {0}")]
    MissingFile(String),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("pyramid level {requested} requested but the dataset has {available} levels")]
    MissingLevel { requested: usize, available: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// An HR patch with its downsampled pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub hr: ImageTensor,
    /// `pyramid[k − 1]` is level `k`.
    pub pyramid: Vec<ImageTensor>,
    pub source: String,
    pub offset: (usize, usize),
}

impl PatchPair {
    pub fn levels(&self) -> usize {
        self.pyramid.len()
    }

    /// Level 0 is the HR image.
    pub fn level(&self, k: usize) -> Option<&ImageTensor> {
        match k {
            0 => Some(&self.hr),
            k => self.pyramid.get(k - 1),
        }
    }
}

pub fn make_pyramid(hr: ImageTensor, levels: usize) -> Result<PatchPair, DataError> {
    let (_, h, w) = hr.shape();
    let unit = 1usize << levels;
    if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
        return Err(DataError::NotDivisible {
            height: h,
            width: w,
            levels,
        });
    }
    let mut pyramid = Vec::with_capacity(levels);
    for k in 0..levels {
        let next = bicubic_downsample(if k == 0 { &hr } else { &pyramid[k - 1] })?;
        pyramid.push(next);
    }
    Ok(PatchPair {
        hr,
        pyramid,
        source: String::new(),
        offset: (0, 0),
    })
}

/// `count` top-left offsets of `size×size` crops drawn uniformly from a `h×w` page.
pub fn patch_offsets(h: usize, w: usize, size: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>, DataError> {
    if size == 0 || h < size || w < size {
        return Err(DataError::PageTooSmall {
            height: h,
            width: w,
            size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)))
        .collect())
}

pub fn extract_patches(page: &ImageTensor, size: usize, count: usize, seed: u64) -> Result<Vec<ImageTensor>, DataError> {
    patch_offsets(page.height(), page.width(), size, count, seed)?
        .into_iter()
        .map(|(y, x)| Ok(page.crop(y, x, size, size)?))
        .collect()
}

/// Patch pairs sharing one shape and depth, with a record of which
/// `(input level, target level)` pairs have been read.
#[derive(Debug)]
pub struct PyramidDataset {
    pairs: Vec<PatchPair>,
    levels: usize,
    accesses: Mutex<BTreeMap<(usize, usize), usize>>,
}

impl Clone for PyramidDataset {
    fn clone(&self) -> Self {
        Self {
            pairs: self.pairs.clone(),
            levels: self.levels,
            accesses: Mutex::new(self.accesses()),
        }
    }
}

impl PyramidDataset {
    pub fn new(pairs: Vec<PatchPair>) -> Result<Self, DataError> {
        let first = pairs.first().ok_or(DataError::EmptyDataset)?;
        let levels = first.levels();
        let shape = first.hr.shape();
        for p in &pairs {
            if p.hr.shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    left: vec![shape.0, shape.1, shape.2],
                    right: vec![p.hr.channels(), p.hr.height(), p.hr.width()],
                }
                .into());
            }
            if p.levels() != levels {
                return Err(DataError::MissingLevel {
                    requested: levels,
                    available: p.levels(),
                });
            }
        }
        Ok(Self {
            pairs,
            levels,
            accesses: Mutex::new(BTreeMap::new()),
        })
    }

    /// Builds a `levels`-deep pyramid for every image.
    pub fn from_images(images: Vec<ImageTensor>, levels: usize) -> Result<Self, DataError> {
        let pairs = images
            .into_iter()
            .enumerate()
            .map(|(i, img)| {
                let mut p = make_pyramid(img, levels)?;
                p.source = format!("#{i}");
                Ok(p)
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn pairs(&self) -> &[PatchPair] {
        &self.pairs
    }

    fn check_level(&self, k: usize) -> Result<(), DataError> {
        if k > self.levels {
            return Err(DataError::MissingLevel {
                requested: k,
                available: self.levels,
            });
        }
        Ok(())
    }

    /// Stacks level `input` and level `target` of the selected pairs.
    pub fn batch(&self, input: usize, target: usize, indices: &[usize]) -> Result<(Tensor, Tensor), DataError> {
        self.check_level(input)?;
        self.check_level(target)?;
        if indices.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let xs: Vec<&ImageTensor> = indices.iter().map(|&i| self.pairs[i].level(input).expect("checked")).collect();
        let ys: Vec<&ImageTensor> = indices.iter().map(|&i| self.pairs[i].level(target).expect("checked")).collect();
        *self
            .accesses
            .lock()
            .expect("access log poisoned")
            .entry((input, target))
            .or_default() += indices.len();
        Ok((Tensor::from_images(&xs)?, Tensor::from_images(&ys)?))
    }

    /// Items read so far per `(input level, target level)`.
    pub fn accesses(&self) -> BTreeMap<(usize, usize), usize> {
        self.accesses.lock().expect("access log poisoned").clone()
    }

    pub fn reset_accesses(&self) {
        self.accesses.lock().expect("access log poisoned").clear();
    }
}
