//! Chains 2× networks into a `2^N` super-resolution pipeline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DpNet, ModelError};
use crate::tensor::{ImageTensor, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error("a cascade needs at least one stage")]
    Empty,
    #[error("stage {stage} expects {got} image channels but stage 1 expects {expected}")]
    ChannelMismatch {
        stage: usize,
        expected: usize,
        got: usize,
    },
    #[error("requested {requested} stages but the cascade has {available}")]
    StagesOutOfRange { requested: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How a stage was trained.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageProvenance {
    pub parallel_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: Option<u64>,
}

impl StageProvenance {
    pub fn is_trained(&self) -> bool {
        self.parallel_epochs > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeMetadata {
    pub tool_version: String,
    #[serde(default)]
    pub note: Option<String>,
    pub stages: Vec<StageProvenance>,
}

/// Ordered stages; stage 1 consumes the lowest resolution.
#[derive(Debug, Clone)]
pub struct Cascade {
    stages: Vec<DpNet>,
    metadata: CascadeMetadata,
}

/// Builds a cascade from `nets` in the given order.
pub fn assemble_cascade(nets: Vec<DpNet>) -> Result<Cascade, CascadeError> {
    Cascade::new(nets)
}

impl Cascade {
    pub fn new(stages: Vec<DpNet>) -> Result<Self, CascadeError> {
        let first = stages.first().ok_or(CascadeError::Empty)?;
        let expected = first.image_channels();
        for (i, s) in stages.iter().enumerate() {
            if s.image_channels() != expected {
                return Err(CascadeError::ChannelMismatch {
                    stage: i + 1,
                    expected,
                    got: s.image_channels(),
                });
            }
        }
        let metadata = CascadeMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            note: None,
            stages: vec![StageProvenance::default(); stages.len()],
        };
        Ok(Self { stages, metadata })
    }

    pub(crate) fn with_metadata(stages: Vec<DpNet>, metadata: CascadeMetadata) -> Result<Self, CascadeError> {
        let mut c = Self::new(stages)?;
        if metadata.stages.len() == c.stages.len() {
            c.metadata = metadata;
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn image_channels(&self) -> usize {
        self.stages[0].image_channels()
    }

    /// Total magnification `2^len`.
    pub fn magnification(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn stages(&self) -> &[DpNet] {
        &self.stages
    }

    pub fn stage(&self, i: usize) -> &DpNet {
        &self.stages[i]
    }

    pub fn stage_mut(&mut self, i: usize) -> &mut DpNet {
        &mut self.stages[i]
    }

    pub fn stages_mut(&mut self) -> &mut [DpNet] {
        &mut self.stages
    }

    pub fn into_stages(self) -> Vec<DpNet> {
        self.stages
    }

    pub fn metadata(&self) -> &CascadeMetadata {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut CascadeMetadata {
        &mut self.metadata
    }

    fn resolve_stages(&self, stages: Option<usize>) -> Result<usize, CascadeError> {
        let k = stages.unwrap_or(self.stages.len());
        if k > self.stages.len() {
            return Err(CascadeError::StagesOutOfRange {
                requested: k,
                available: self.stages.len(),
            });
        }
        Ok(k)
    }

    /// Applies the first `stages` networks in order (all when `None`).
    /// Intermediate images are passed on unquantized; zero stages returns the
    /// input unchanged.
    pub fn super_resolve(&self, img: &ImageTensor, stages: Option<usize>) -> Result<ImageTensor, CascadeError> {
        let k = self.resolve_stages(stages)?;
        if img.channels() != self.image_channels() {
            return Err(ModelError::ChannelMismatch {
                expected: self.image_channels(),
                got: img.channels(),
            }
            .into());
        }
        let mut cur = img.clone();
        for net in &self.stages[..k] {
            cur = net.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Batched variant of [`Cascade::super_resolve`].
    pub fn super_resolve_batch(&self, x: &Tensor, stages: Option<usize>) -> Result<Tensor, CascadeError> {
        let k = self.resolve_stages(stages)?;
        let mut cur = x.clone();
        for net in &self.stages[..k] {
            cur = net.forward_batch(&cur)?;
        }
        Ok(cur)
    }
}
