//! Synthetic grounding data with a planted, recoverable target tube.
//!
//! Every object class owns a region prototype and a word vector. A sample
//! mentions `objects` distinct classes; the first is the queried one. Each
//! class occupies a fixed horizontal slot for the whole clip, except that
//! the queried object's slot shows a distractor class outside the
//! ground-truth segment. Slots never overlap, so a region's IoU with the
//! ground-truth box is exactly 0 or 1. Region order is shuffled per frame.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::build_manifest;
use super::{BoundingBox, DataError, DatasetManifest, VideoSample};
use crate::geometry::Segment;
use crate::tensor::Tensor;

const FRAME_W: f32 = 640.0;
const FRAME_H: f32 = 360.0;
const FILLER_WORDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub frames: usize,
    pub regions: usize,
    pub objects: usize,
    pub feature_dim: usize,
    pub word_dim: usize,
    pub num_classes: usize,
    /// Sentence length; defaults to `2 * objects + 1`.
    pub sentence_len: Option<usize>,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 4,
            frames: 12,
            regions: 5,
            objects: 3,
            feature_dim: 16,
            word_dim: 16,
            num_classes: 8,
            sentence_len: None,
            noise_std: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.objects == 0 {
            return fail("objects must be at least 1".into());
        }
        if self.objects > self.regions {
            return fail(format!(
                "objects ({}) must not exceed regions ({})",
                self.objects, self.regions
            ));
        }
        if self.num_classes <= self.objects {
            return fail(format!(
                "num_classes ({}) must exceed objects ({}) to leave distractor classes",
                self.num_classes, self.objects
            ));
        }
        if self.sentence_len.is_some_and(|m| m < self.objects) {
            return fail(format!("sentence_len must be at least objects ({})", self.objects));
        }
        if self.num_samples == 0 || self.frames == 0 || self.feature_dim == 0 || self.word_dim == 0 {
            return fail("samples, frames, feature_dim and word_dim must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub manifest: DatasetManifest,
    pub samples: Vec<VideoSample>,
    /// `[num_classes, feature_dim]` region prototype per class.
    pub prototypes: Tensor<f32>,
    /// `[num_classes + fillers, word_dim]`, indexed by word id.
    pub vocabulary: Tensor<f32>,
    /// Classes mentioned by each sample, queried object first.
    pub object_classes: Vec<Vec<usize>>,
}

impl SyntheticSet {
    pub fn prototype(&self, class: usize) -> &[f32] {
        self.prototypes.row(class)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::from_vec(&[rows, cols], data)
}

fn slot_box(slot: usize, regions: usize, jitter: f32) -> BoundingBox {
    let sw = FRAME_W / regions as f32;
    let x = (slot as f32 + 0.5) * sw + jitter;
    let w = 0.6 * sw;
    let h = 100.0 + 20.0 * (slot % 3) as f32;
    BoundingBox::new(x, FRAME_H / 2.0, w, h).expect("positive size")
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticSet, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = gaussian_matrix(&mut rng, cfg.num_classes, cfg.feature_dim);
    let vocabulary = gaussian_matrix(&mut rng, cfg.num_classes + FILLER_WORDS, cfg.word_dim);
    let noise = Normal::new(0.0f32, cfg.noise_std.max(f32::MIN_POSITIVE))
        .map_err(|e| DataError::Config(e.to_string()))?;

    let (n, k, t) = (cfg.frames, cfg.regions, cfg.objects);
    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut object_classes = Vec::with_capacity(cfg.num_samples);
    for idx in 0..cfg.num_samples {
        let mut classes: Vec<usize> = (0..cfg.num_classes).collect();
        classes.shuffle(&mut rng);
        let mentioned = classes[..t].to_vec();
        let others = &classes[t..];

        // Sentence: nouns at random positions among fillers.
        let m = cfg.sentence_len.unwrap_or(2 * t + 1);
        let mut positions: Vec<usize> = (0..m).collect();
        positions.shuffle(&mut rng);
        let noun_indices = positions[..t].to_vec();
        let mut words: Vec<u32> = (0..m)
            .map(|_| (cfg.num_classes + rng.random_range(0..FILLER_WORDS)) as u32)
            .collect();
        for (&pos, &c) in noun_indices.iter().zip(&mentioned) {
            words[pos] = c as u32;
        }
        let emb: Vec<f32> = words
            .iter()
            .flat_map(|&w| vocabulary.row(w as usize).iter().copied())
            .collect();
        let embeddings = Tensor::from_vec(&[m, cfg.word_dim], emb);

        // Slot layout: target slot, auxiliaries to its right, distractors elsewhere.
        let target_slot = rng.random_range(0..k);
        let mut slot_class = vec![usize::MAX; k];
        for (j, &c) in mentioned.iter().enumerate() {
            slot_class[(target_slot + j) % k] = c;
        }
        for c in slot_class.iter_mut().filter(|c| **c == usize::MAX) {
            *c = others[rng.random_range(0..others.len())];
        }
        let absent_class = others[rng.random_range(0..others.len())];

        let min_len = n.div_ceil(4).max(1);
        let max_len = n.div_ceil(2).max(min_len);
        let len = rng.random_range(min_len..=max_len);
        let start = rng.random_range(1..=n - len + 1);
        let gt_segment = Segment::new(start, start + len - 1).expect("in range");

        let sw = FRAME_W / k as f32;
        let mut regions = Vec::with_capacity(n * k * cfg.feature_dim);
        let mut boxes = Vec::with_capacity(n * k);
        let mut gt_boxes = Vec::with_capacity(len);
        for frame in 1..=n {
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            for &slot in &order {
                // half-pixel jitter, well inside the gap between slots
                let steps = (0.05 * sw / 0.5).floor() as i32;
                let jitter = rng.random_range(-steps..=steps) as f32 * 0.5;
                let b = slot_box(slot, k, jitter);
                let class = if slot == target_slot && !gt_segment.contains(frame) {
                    absent_class
                } else {
                    slot_class[slot]
                };
                for &p in prototypes.row(class) {
                    let e = if cfg.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    regions.push(p + e);
                }
                if slot == target_slot && gt_segment.contains(frame) {
                    gt_boxes.push(b);
                }
                boxes.push(b);
            }
        }
        samples.push(VideoSample {
            id: format!("syn{idx:05}"),
            regions: Tensor::from_vec(&[n, k, cfg.feature_dim], regions),
            boxes,
            words,
            embeddings,
            noun_indices,
            gt_segment,
            gt_boxes,
        });
        object_classes.push(mentioned);
    }
    let manifest = build_manifest("synthetic", &samples, Some(&object_classes))?;
    Ok(SyntheticSet {
        manifest,
        samples,
        prototypes,
        vocabulary,
        object_classes,
    })
}
