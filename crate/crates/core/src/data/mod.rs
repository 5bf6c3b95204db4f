//! Dataset types, the on-disk manifest, and the synthetic generator.

mod manifest;
mod synth;
pub mod tensor_file;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Segment, Tube};
use crate::tensor::Tensor;

pub use manifest::{
    load_dataset, read_manifest, write_dataset, Dataset, DatasetDims, DatasetManifest,
    SampleRecord,
};
pub use synth::{generate_synthetic, SynthConfig, SyntheticSet};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: not an OMRN tensor file")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated tensor record")]
    Truncated { path: PathBuf },
    #[error("{path}: expected {expected} tensor record(s), found {got}")]
    RecordCount {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("sample `{id}`: {what} has shape {got:?}, expected {expected:?}")]
    Shape {
        id: String,
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("sample `{id}`: noun index {index} out of range for {words} words")]
    NounIndex { id: String, index: usize, words: usize },
    #[error("sample `{id}`: ground-truth segment [{start}, {end}] invalid for {frames} frames")]
    GtSegment {
        id: String,
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("sample `{id}`: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("invalid bounding box ({x}, {y}, {w}, {h}): width and height must be positive and finite")]
    InvalidBox { x: f32, y: f32, w: f32, h: f32 },
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Axis-aligned box in pixels, stored as center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 4]", into = "[f32; 4]")]
pub struct BoundingBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BoundingBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Result<Self, DataError> {
        let ok = [x, y, w, h].iter().all(|v| v.is_finite()) && w > 0.0 && h > 0.0;
        if !ok {
            return Err(DataError::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }
}

impl TryFrom<[f32; 4]> for BoundingBox {
    type Error = DataError;

    fn try_from(v: [f32; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// One video/sentence pair with its ground-truth tube.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `[frames, regions, region_dim]`
    pub regions: Tensor<f32>,
    /// Row-major `[frames, regions]`.
    pub boxes: Vec<BoundingBox>,
    pub words: Vec<u32>,
    /// `[words, word_dim]`
    pub embeddings: Tensor<f32>,
    /// Word positions of the mentioned objects; entry 0 is the queried object.
    pub noun_indices: Vec<usize>,
    pub gt_segment: Segment,
    /// One box per frame of `gt_segment`.
    pub gt_boxes: Vec<BoundingBox>,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.regions.shape()[0]
    }

    pub fn num_regions(&self) -> usize {
        self.regions.shape()[1]
    }

    pub fn region_dim(&self) -> usize {
        self.regions.shape()[2]
    }

    pub fn num_words(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn word_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn num_objects(&self) -> usize {
        self.noun_indices.len()
    }

    /// Feature of region `k` (0-based) on frame `n` (1-based).
    pub fn region(&self, n: usize, k: usize) -> &[f32] {
        let (kk, d) = (self.num_regions(), self.region_dim());
        let off = ((n - 1) * kk + k) * d;
        &self.regions.data()[off..off + d]
    }

    /// Box of region `k` (0-based) on frame `n` (1-based).
    pub fn box_at(&self, n: usize, k: usize) -> &BoundingBox {
        &self.boxes[(n - 1) * self.num_regions() + k]
    }

    pub fn gt_box(&self, n: usize) -> Option<&BoundingBox> {
        self.gt_segment
            .contains(n)
            .then(|| &self.gt_boxes[n - self.gt_segment.start()])
    }

    pub fn gt_tube(&self) -> Tube {
        Tube::new(self.gt_segment, self.gt_boxes.clone()).expect("validated sample")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let id = || self.id.clone();
        let shape = self.regions.shape();
        if shape.len() != 3 || shape.contains(&0) {
            return Err(DataError::InvalidSample {
                id: id(),
                reason: format!("region tensor must be [frames, regions, dim], got {shape:?}"),
            });
        }
        let (n, k) = (shape[0], shape[1]);
        if self.boxes.len() != n * k {
            return Err(DataError::Shape {
                id: id(),
                what: "boxes",
                expected: vec![n, k],
                got: vec![self.boxes.len()],
            });
        }
        let es = self.embeddings.shape();
        if es.len() != 2 || es[0] == 0 || es[1] == 0 {
            return Err(DataError::InvalidSample {
                id: id(),
                reason: format!("embedding tensor must be [words, dim], got {es:?}"),
            });
        }
        if self.words.len() != es[0] {
            return Err(DataError::Shape {
                id: id(),
                what: "word ids",
                expected: vec![es[0]],
                got: vec![self.words.len()],
            });
        }
        if self.noun_indices.is_empty() {
            return Err(DataError::InvalidSample {
                id: id(),
                reason: "no object nouns marked".into(),
            });
        }
        if let Some(&bad) = self.noun_indices.iter().find(|&&i| i >= es[0]) {
            return Err(DataError::NounIndex {
                id: id(),
                index: bad,
                words: es[0],
            });
        }
        if self.gt_segment.end() > n {
            return Err(DataError::GtSegment {
                id: id(),
                start: self.gt_segment.start(),
                end: self.gt_segment.end(),
                frames: n,
            });
        }
        if self.gt_boxes.len() != self.gt_segment.len() {
            return Err(DataError::Shape {
                id: id(),
                what: "gt_boxes",
                expected: vec![self.gt_segment.len()],
                got: vec![self.gt_boxes.len()],
            });
        }
        if !self.regions.is_finite() || !self.embeddings.is_finite() {
            return Err(DataError::InvalidSample {
                id: id(),
                reason: "non-finite feature values".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_invariants() {
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(f32::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[1, 1, -2, 2]").is_err());
        let b: BoundingBox = serde_json::from_str("[1.5, 2, 3, 4]").unwrap();
        assert_eq!(b, BoundingBox::new(1.5, 2.0, 3.0, 4.0).unwrap());
    }
}
