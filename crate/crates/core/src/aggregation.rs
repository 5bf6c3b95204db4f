//! Temporal region aggregation.
//!
//! Each region is linked to its best match in every neighbouring frame
//! within `radius` frames; the linked raw features are mean-pooled with the
//! region's own and passed through a learned linear map. Linking is a
//! discrete, parameter-free choice, so pooling happens once per sample and
//! only the linear map is trained.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BoundingBox, VideoSample};
use crate::geometry::box_iou;
use crate::tensor::{add_into, dot, norm, Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("sample `{id}`: region {region} on frame {frame} has a zero feature vector")]
    ZeroFeature { id: String, frame: usize, region: usize },
    #[error("linking needs two distinct frames")]
    SameFrame,
    #[error("cosine similarity undefined for a zero-norm feature")]
    ZeroNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub alpha: f64,
    /// Neighbour radius `L` in frames.
    pub radius: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            radius: 5,
        }
    }
}

crate::param_group! {
    pub struct AggregationParams { w: Tensor, b: Tensor }
}

impl<F: Real> AggregationParams<F> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[out_dim, in_dim]),
            b: Tensor::zeros(&[out_dim]),
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, AggregationError> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(AggregationError::ZeroNorm);
    }
    Ok(dot(a, b) / (na * nb))
}

/// `cos(f1, f2) + alpha / |n2 - n1| * IoU(b1, b2)`.
pub fn linking_score(
    (f1, b1, n1): (&[f32], &BoundingBox, usize),
    (f2, b2, n2): (&[f32], &BoundingBox, usize),
    alpha: f64,
) -> Result<f64, AggregationError> {
    if n1 == n2 {
        return Err(AggregationError::SameFrame);
    }
    let a: Vec<f64> = f1.iter().map(|&x| x as f64).collect();
    let b: Vec<f64> = f2.iter().map(|&x| x as f64).collect();
    let gap = n1.abs_diff(n2) as f64;
    Ok(cosine(&a, &b)? + alpha / gap * box_iou(b1, b2))
}

/// For region `k` on frame `n` (1-based), the index of the best-linked
/// region on frame `m`. Ties go to the lowest index.
pub fn best_link(sample: &VideoSample, n: usize, k: usize, m: usize, alpha: f64) -> Result<usize, AggregationError> {
    let own = (sample.region(n, k), sample.box_at(n, k), n);
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..sample.num_regions() {
        let s = linking_score(own, (sample.region(m, j), sample.box_at(m, j), m), alpha)?;
        if s > best.1 {
            best = (j, s);
        }
    }
    Ok(best.0)
}

/// Mean of each region's feature and its best link in every available
/// neighbour frame. Returns `[frames * regions, region_dim]`.
pub fn pool_regions(sample: &VideoSample, cfg: &AggregationConfig) -> Result<Tensor<f64>, AggregationError> {
    let (nf, nk, d) = (sample.num_frames(), sample.num_regions(), sample.region_dim());
    for n in 1..=nf {
        for k in 0..nk {
            if sample.region(n, k).iter().all(|&x| x == 0.0) {
                return Err(AggregationError::ZeroFeature {
                    id: sample.id.clone(),
                    frame: n,
                    region: k,
                });
            }
        }
    }
    let mut pooled = Tensor::zeros(&[nf * nk, d]);
    for n in 1..=nf {
        let lo = n.saturating_sub(cfg.radius).max(1);
        let hi = (n + cfg.radius).min(nf);
        for k in 0..nk {
            let mut acc: Vec<f64> = sample.region(n, k).iter().map(|&x| x as f64).collect();
            let mut count = 1usize;
            for m in (lo..=hi).filter(|&m| m != n) {
                let j = best_link(sample, n, k, m, cfg.alpha)?;
                for (a, &x) in acc.iter_mut().zip(sample.region(m, j)) {
                    *a += x as f64;
                }
                count += 1;
            }
            let row = pooled.row_mut((n - 1) * nk + k);
            for (r, a) in row.iter_mut().zip(&acc) {
                *r = a / count as f64;
            }
        }
    }
    Ok(pooled)
}

/// `W · pooled + b` for every row.
pub fn project<F: Real>(pooled: &Tensor<F>, p: &AggregationParams<F>) -> Tensor<F> {
    let out_dim = p.b.len();
    let mut out = Tensor::zeros(&[pooled.rows(), out_dim]);
    for i in 0..pooled.rows() {
        let row = out.row_mut(i);
        p.w.matvec(pooled.row(i), row);
        add_into(p.b.data(), row);
    }
    out
}

pub fn project_backward<F: Real>(pooled: &Tensor<F>, d_out: &Tensor<F>, g: &mut AggregationParams<F>) {
    for i in 0..pooled.rows() {
        g.w.outer_acc(d_out.row(i), pooled.row(i));
        add_into(d_out.row(i), g.b.data_mut());
    }
}

/// Pool then project. Output is `[frames * regions, out_dim]`.
pub fn aggregate_regions<F: Real>(
    sample: &VideoSample,
    cfg: &AggregationConfig,
    p: &AggregationParams<F>,
) -> Result<Tensor<F>, AggregationError> {
    Ok(project(&pool_regions(sample, cfg)?.cast(), p))
}

impl<F: Real> AggregationParams<F> {
    pub fn out_dim(&self) -> usize {
        self.b.len()
    }
}
