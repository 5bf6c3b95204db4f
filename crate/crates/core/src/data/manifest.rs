use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file::{load_tensor, save_tensor};
use super::{BoundingBox, DataError, VideoSample};
use crate::geometry::Segment;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDims {
    pub max_frames: usize,
    pub regions: usize,
    pub region_dim: usize,
    pub word_dim: usize,
}

/// Annotation for one sample. Tensor paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub regions: String,
    pub boxes: String,
    /// Per-sample `[words, word_dim]` tensor. When absent, rows of the
    /// manifest's shared embedding table are looked up by word id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    pub words: Vec<u32>,
    pub noun_indices: Vec<usize>,
    pub gt_segment: [usize; 2],
    pub gt_boxes: Vec<BoundingBox>,
    /// Class of each mentioned object, when the generator knows it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_classes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub dims: DatasetDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_table: Option<String>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&VideoSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Accepts either the manifest file itself or the directory holding `manifest.json`.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let manifest = read_manifest(&manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let table = manifest
        .embedding_table
        .as_ref()
        .map(|p| load_tensor(&root.join(p)))
        .transpose()?;
    let samples = manifest
        .samples
        .iter()
        .map(|rec| load_sample(&root, &manifest.dims, rec, table.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        manifest,
        root,
        samples,
    })
}

fn load_sample(
    root: &Path,
    dims: &DatasetDims,
    rec: &SampleRecord,
    table: Option<&Tensor<f32>>,
) -> Result<VideoSample, DataError> {
    let shape_err = |what, expected: Vec<usize>, got: &[usize]| DataError::Shape {
        id: rec.id.clone(),
        what,
        expected,
        got: got.to_vec(),
    };
    let regions = load_tensor(&root.join(&rec.regions))?;
    let rs = regions.shape();
    if rs.len() != 3 || rs[0] > dims.max_frames || rs[1] != dims.regions || rs[2] != dims.region_dim {
        return Err(shape_err(
            "regions",
            vec![dims.max_frames, dims.regions, dims.region_dim],
            rs,
        ));
    }
    let frames = rs[0];
    let raw_boxes = load_tensor(&root.join(&rec.boxes))?;
    if raw_boxes.shape() != [frames, dims.regions, 4] {
        return Err(shape_err("boxes", vec![frames, dims.regions, 4], raw_boxes.shape()));
    }
    let boxes = raw_boxes
        .data()
        .chunks_exact(4)
        .map(|c| BoundingBox::new(c[0], c[1], c[2], c[3]))
        .collect::<Result<Vec<_>, _>>()?;

    let embeddings = match (&rec.embeddings, table) {
        (Some(p), _) => load_tensor(&root.join(p))?,
        (None, Some(table)) => lookup_rows(&rec.id, table, &rec.words)?,
        (None, None) => {
            return Err(DataError::InvalidSample {
                id: rec.id.clone(),
                reason: "no embeddings and no shared embedding table".into(),
            })
        }
    };
    if embeddings.shape().len() != 2 || embeddings.shape()[1] != dims.word_dim {
        return Err(shape_err(
            "embeddings",
            vec![rec.words.len(), dims.word_dim],
            embeddings.shape(),
        ));
    }

    let [start, end] = rec.gt_segment;
    let gt_segment = Segment::new(start, end).map_err(|_| DataError::GtSegment {
        id: rec.id.clone(),
        start,
        end,
        frames,
    })?;
    let sample = VideoSample {
        id: rec.id.clone(),
        regions,
        boxes,
        words: rec.words.clone(),
        embeddings,
        noun_indices: rec.noun_indices.clone(),
        gt_segment,
        gt_boxes: rec.gt_boxes.clone(),
    };
    sample.validate()?;
    Ok(sample)
}

fn lookup_rows(id: &str, table: &Tensor<f32>, words: &[u32]) -> Result<Tensor<f32>, DataError> {
    let dim = table.cols();
    let mut data = Vec::with_capacity(words.len() * dim);
    for &w in words {
        let w = w as usize;
        if w >= table.rows() {
            return Err(DataError::InvalidSample {
                id: id.to_string(),
                reason: format!("word id {w} outside embedding table of {} rows", table.rows()),
            });
        }
        data.extend_from_slice(table.row(w));
    }
    Ok(Tensor::from_vec(&[words.len(), dim], data))
}

/// Writes tensors and `manifest.json` into `dir` (created if missing).
pub fn write_dataset(
    dir: &Path,
    split: &str,
    samples: &[VideoSample],
    object_classes: Option<&[Vec<usize>]>,
) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let manifest = build_manifest(split, samples, object_classes)?;
    for (s, rec) in samples.iter().zip(&manifest.samples) {
        save_tensor(&dir.join(&rec.regions), &s.regions)?;
        let flat: Vec<f32> = s.boxes.iter().flat_map(|b| <[f32; 4]>::from(*b)).collect();
        let boxes = Tensor::from_vec(&[s.num_frames(), s.num_regions(), 4], flat);
        save_tensor(&dir.join(&rec.boxes), &boxes)?;
        if let Some(p) = &rec.embeddings {
            save_tensor(&dir.join(p), &s.embeddings)?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| DataError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

pub(crate) fn build_manifest(
    split: &str,
    samples: &[VideoSample],
    object_classes: Option<&[Vec<usize>]>,
) -> Result<DatasetManifest, DataError> {
    let first = samples.first();
    let dims = DatasetDims {
        max_frames: samples.iter().map(VideoSample::num_frames).max().unwrap_or(0),
        regions: first.map_or(0, VideoSample::num_regions),
        region_dim: first.map_or(0, VideoSample::region_dim),
        word_dim: first.map_or(0, VideoSample::word_dim),
    };
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        if s.num_regions() != dims.regions
            || s.region_dim() != dims.region_dim
            || s.word_dim() != dims.word_dim
        {
            return Err(DataError::Shape {
                id: s.id.clone(),
                what: "sample dims",
                expected: vec![dims.regions, dims.region_dim, dims.word_dim],
                got: vec![s.num_regions(), s.region_dim(), s.word_dim()],
            });
        }
        records.push(SampleRecord {
            id: s.id.clone(),
            regions: format!("{}.regions.omrn", s.id),
            boxes: format!("{}.boxes.omrn", s.id),
            embeddings: Some(format!("{}.embeddings.omrn", s.id)),
            words: s.words.clone(),
            noun_indices: s.noun_indices.clone(),
            gt_segment: s.gt_segment.into(),
            gt_boxes: s.gt_boxes.clone(),
            object_classes: object_classes.and_then(|c| c.get(i).cloned()),
        });
    }
    Ok(DatasetManifest {
        split: split.to_string(),
        dims,
        embedding_table: None,
        samples: records,
    })
}
