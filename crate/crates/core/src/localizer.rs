//! Spatio-temporal localizer: region scores, frame attention, candidate
//! segments with confidence and boundary offsets, the four training losses
//! and the inference rule.

use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::geometry::{temporal_iou, Segment};
use crate::gru::{bigru_backward, bigru_forward, BiGruParams, BiGruTrace};
use crate::tensor::{add_into, axpy, dot, sigmoid, softmax, softmax_backward, Real, Tensor};

pub const DEFAULT_WIDTHS: [usize; 9] = [3, 9, 17, 33, 65, 97, 129, 165, 197];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub spatial: f64,
    pub temporal: f64,
    pub regression: f64,
    pub diversity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spatial: 1.0,
            temporal: 1.0,
            regression: 0.001,
            diversity: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            spatial: 0.0,
            temporal: 0.0,
            regression: 0.0,
            diversity: 0.0,
        }
    }

    /// Weight 1 on term `i` (spatial, temporal, regression, diversity), 0 elsewhere.
    pub fn one_hot(i: usize) -> Self {
        let mut w = [0.0; 4];
        w[i] = 1.0;
        Self::from_array(w)
    }

    pub fn from_array(w: [f64; 4]) -> Self {
        Self {
            spatial: w[0],
            temporal: w[1],
            regression: w[2],
            diversity: w[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.spatial, self.temporal, self.regression, self.diversity]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub widths: Vec<usize>,
    pub smooth_l1_threshold: f64,
    pub weights: LossWeights,
    pub bce_epsilon: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            widths: DEFAULT_WIDTHS.to_vec(),
            smooth_l1_threshold: 1.0,
            weights: LossWeights::default(),
            bce_epsilon: 1e-7,
        }
    }
}

crate::param_group! {
    pub struct LocalizerParams {
        w_r: Tensor,
        w_o: Tensor,
        w_f1: Tensor,
        w_f2: Tensor,
        b_f: Tensor,
        w_f: Tensor,
        gru: BiGruParams,
        w_conf: Tensor,
        b_conf: Tensor,
        w_off: Tensor,
        b_off: Tensor,
    }
}

impl<F: Real> LocalizerParams<F> {
    pub fn zeros(feat: usize, obj: usize, attn: usize, hidden: usize, widths: usize) -> Self {
        Self {
            w_r: Tensor::zeros(&[attn, feat]),
            w_o: Tensor::zeros(&[attn, obj]),
            w_f1: Tensor::zeros(&[attn, feat]),
            w_f2: Tensor::zeros(&[attn, obj]),
            b_f: Tensor::zeros(&[attn]),
            w_f: Tensor::zeros(&[attn]),
            gru: BiGruParams::zeros(feat, hidden),
            w_conf: Tensor::zeros(&[widths, 2 * hidden]),
            b_conf: Tensor::zeros(&[widths]),
            w_off: Tensor::zeros(&[2 * widths, 2 * hidden]),
            b_off: Tensor::zeros(&[2 * widths]),
        }
    }
}

/// One candidate segment: frame `center` (1-based) with width index `width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub center: usize,
    pub width: usize,
    pub segment: Segment,
}

/// All `frames * widths.len()` candidates, ordered by center then width.
/// A width `w` spans `[n - floor((w-1)/2), n + ceil((w-1)/2)]`, clamped to the clip.
pub fn candidate_segments(frames: usize, widths: &[usize]) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(frames * widths.len());
    for n in 1..=frames {
        for (h, &w) in widths.iter().enumerate() {
            let back = (w.max(1) - 1) / 2;
            let fwd = (w.max(1) - 1).div_ceil(2);
            let s = n.saturating_sub(back).max(1);
            let e = (n + fwd).min(frames);
            out.push(Candidate {
                center: n,
                width: h,
                segment: Segment::new(s, e).expect("clamped span is valid"),
            });
        }
    }
    out
}

/// Binary cross entropy against a soft target, with `p` clamped to `[ε, 1 − ε]`.
pub fn soft_bce<F: Real>(p: F, target: F, eps: F) -> F {
    let pc = p.max(eps).min(F::one() - eps);
    -((F::one() - target) * (F::one() - pc).ln() + target * pc.ln())
}

/// `d soft_bce / d logit` where `p = σ(logit)`; zero where the clamp is active.
pub fn soft_bce_logit_grad<F: Real>(p: F, target: F, eps: F) -> F {
    if p < eps || p > F::one() - eps {
        F::zero()
    } else {
        p - target
    }
}

pub fn smooth_l1<F: Real>(x: F, threshold: F) -> F {
    if x.abs() < threshold {
        F::lit(0.5) * x * x
    } else {
        x.abs() - F::lit(0.5) * threshold
    }
}

pub fn smooth_l1_grad<F: Real>(x: F, threshold: F) -> F {
    if x.abs() < threshold {
        x
    } else {
        x.signum()
    }
}

#[derive(Clone, Debug)]
pub struct SpatialTrace<F> {
    /// `[N * K, attn]`, `W_r r̃` per region.
    pub projected: Tensor<F>,
    /// `W_o o_1`
    pub query: Vec<F>,
    pub logits: Tensor<F>,
    /// `[N * K]` region confidences.
    pub scores: Tensor<F>,
}

pub fn spatial_scores<F: Real>(regions: &Tensor<F>, main_object: &[F], p: &LocalizerParams<F>) -> SpatialTrace<F> {
    let rows = regions.rows();
    let attn = p.w_r.rows();
    let query = p.w_o.mv(main_object);
    let mut projected = Tensor::zeros(&[rows, attn]);
    let mut logits = Tensor::zeros(&[rows]);
    let mut scores = Tensor::zeros(&[rows]);
    for i in 0..rows {
        let y = projected.row_mut(i);
        p.w_r.matvec(regions.row(i), y);
        let z = dot(y, &query);
        logits.data_mut()[i] = z;
        scores.data_mut()[i] = sigmoid(z);
    }
    SpatialTrace {
        projected,
        query,
        logits,
        scores,
    }
}

/// `targets[i]` is the IoU of region `i` with the ground-truth box of its
/// frame; only rows on `gt_frames` (0-based) contribute.
pub fn spatial_loss<F: Real>(scores: &Tensor<F>, targets: &[F], regions_per_frame: usize, gt_frames: &[usize], eps: F) -> F {
    let mut total = F::zero();
    for &n in gt_frames {
        for k in 0..regions_per_frame {
            let i = n * regions_per_frame + k;
            total += soft_bce(scores.data()[i], targets[i], eps);
        }
    }
    total / F::lit((gt_frames.len() * regions_per_frame) as f64)
}

/// Accumulates into `d_regions` / `d_main` and parameter grads.
pub fn spatial_backward<F: Real>(
    regions: &Tensor<F>,
    main_object: &[F],
    p: &LocalizerParams<F>,
    trace: &SpatialTrace<F>,
    d_logits: &[F],
    d_regions: &mut Tensor<F>,
    d_main: &mut [F],
    g: &mut LocalizerParams<F>,
) {
    let attn = p.w_r.rows();
    let mut d_query = vec![F::zero(); attn];
    for (i, &dz) in d_logits.iter().enumerate() {
        if dz == F::zero() {
            continue;
        }
        let y = trace.projected.row(i);
        axpy(dz, y, &mut d_query);
        let dy: Vec<F> = trace.query.iter().map(|&q| dz * q).collect();
        g.w_r.outer_acc(&dy, regions.row(i));
        p.w_r.matvec_t_acc(&dy, d_regions.row_mut(i));
    }
    g.w_o.outer_acc(&d_query, main_object);
    p.w_o.matvec_t_acc(&d_query, d_main);
}

#[derive(Clone, Debug)]
pub struct FrameTrace<F> {
    /// `[N * K, attn]` tanh activations of the frame attention.
    hidden: Tensor<F>,
    /// `[N, K]` attention over regions.
    pub attention: Tensor<F>,
    /// `[N, feat]` attention-pooled frame features.
    pub pooled: Tensor<F>,
    gru: BiGruTrace<F>,
    /// `[N, 2 * hidden]` context features.
    pub context: Tensor<F>,
}

pub fn frame_features<F: Real>(
    regions: &Tensor<F>,
    main_object: &[F],
    p: &LocalizerParams<F>,
    frames: usize,
    regions_per_frame: usize,
) -> FrameTrace<F> {
    let kk = regions_per_frame;
    let feat = regions.cols();
    let attn = p.b_f.len();
    let mut obj_term = p.w_f2.mv(main_object);
    add_into(p.b_f.data(), &mut obj_term);
    let mut hidden = Tensor::zeros(&[frames * kk, attn]);
    let mut attention = Tensor::zeros(&[frames, kk]);
    let mut pooled = Tensor::zeros(&[frames, feat]);
    for n in 0..frames {
        let mut logits = vec![F::zero(); kk];
        for k in 0..kk {
            let i = n * kk + k;
            let h = hidden.row_mut(i);
            p.w_f1.matvec(regions.row(i), h);
            for (hj, &c) in h.iter_mut().zip(&obj_term) {
                *hj = (*hj + c).tanh();
            }
            logits[k] = dot(p.w_f.data(), h);
        }
        let att = softmax(&logits);
        let f = pooled.row_mut(n);
        for k in 0..kk {
            axpy(att[k], regions.row(n * kk + k), f);
        }
        attention.row_mut(n).copy_from_slice(&att);
    }
    let (context, gru) = bigru_forward(&p.gru, &pooled);
    FrameTrace {
        hidden,
        attention,
        pooled,
        gru,
        context,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn frame_backward<F: Real>(
    regions: &Tensor<F>,
    main_object: &[F],
    p: &LocalizerParams<F>,
    trace: &FrameTrace<F>,
    d_context: &Tensor<F>,
    d_regions: &mut Tensor<F>,
    d_main: &mut [F],
    g: &mut LocalizerParams<F>,
) {
    let (frames, kk) = (trace.attention.rows(), trace.attention.cols());
    let attn = p.b_f.len();
    let d_pooled = bigru_backward(&p.gru, &trace.gru, &trace.pooled, d_context, &mut g.gru);
    let mut du_obj = vec![F::zero(); attn];
    for n in 0..frames {
        let df = d_pooled.row(n);
        let att = trace.attention.row(n);
        let mut d_att = vec![F::zero(); kk];
        for k in 0..kk {
            let i = n * kk + k;
            d_att[k] = dot(df, regions.row(i));
            axpy(att[k], df, d_regions.row_mut(i));
        }
        let d_logits = softmax_backward(att, &d_att);
        for k in 0..kk {
            let i = n * kk + k;
            let h = trace.hidden.row(i);
            axpy(d_logits[k], h, g.w_f.data_mut());
            let du: Vec<F> = (0..attn)
                .map(|j| d_logits[k] * p.w_f.data()[j] * (F::one() - h[j] * h[j]))
                .collect();
            g.w_f1.outer_acc(&du, regions.row(i));
            p.w_f1.matvec_t_acc(&du, d_regions.row_mut(i));
            add_into(&du, &mut du_obj);
        }
    }
    add_into(&du_obj, g.b_f.data_mut());
    g.w_f2.outer_acc(&du_obj, main_object);
    p.w_f2.matvec_t_acc(&du_obj, d_main);
}

#[derive(Clone, Debug)]
pub struct HeadOutputs<F> {
    /// `[N, H]`
    pub logits: Tensor<F>,
    /// `[N, H]` candidate confidences.
    pub confidence: Tensor<F>,
    /// `[N, 2H]`, `(l_s, l_e)` pairs per width.
    pub offsets: Tensor<F>,
}

impl<F: Real> HeadOutputs<F> {
    pub fn offset(&self, n: usize, h: usize) -> (F, F) {
        let row = self.offsets.row(n);
        (row[2 * h], row[2 * h + 1])
    }
}

pub fn temporal_heads<F: Real>(context: &Tensor<F>, p: &LocalizerParams<F>) -> HeadOutputs<F> {
    let frames = context.rows();
    let hh = p.b_conf.len();
    let mut logits = Tensor::zeros(&[frames, hh]);
    let mut confidence = Tensor::zeros(&[frames, hh]);
    let mut offsets = Tensor::zeros(&[frames, 2 * hh]);
    for n in 0..frames {
        let z = logits.row_mut(n);
        p.w_conf.matvec(context.row(n), z);
        add_into(p.b_conf.data(), z);
        let z = z.to_vec();
        for (c, zi) in confidence.row_mut(n).iter_mut().zip(z) {
            *c = sigmoid(zi);
        }
        let l = offsets.row_mut(n);
        p.w_off.matvec(context.row(n), l);
        add_into(p.b_off.data(), l);
    }
    HeadOutputs {
        logits,
        confidence,
        offsets,
    }
}

/// Returns `dL/d context`.
pub fn heads_backward<F: Real>(
    context: &Tensor<F>,
    p: &LocalizerParams<F>,
    d_logits: &Tensor<F>,
    d_offsets: &Tensor<F>,
    g: &mut LocalizerParams<F>,
) -> Tensor<F> {
    let mut d_context = Tensor::zeros(context.shape());
    for n in 0..context.rows() {
        let x = context.row(n);
        g.w_conf.outer_acc(d_logits.row(n), x);
        add_into(d_logits.row(n), g.b_conf.data_mut());
        g.w_off.outer_acc(d_offsets.row(n), x);
        add_into(d_offsets.row(n), g.b_off.data_mut());
        let dx = d_context.row_mut(n);
        p.w_conf.matvec_t_acc(d_logits.row(n), dx);
        p.w_off.matvec_t_acc(d_offsets.row(n), dx);
    }
    d_context
}

/// Temporal IoU of every candidate with the ground truth, in candidate order.
pub fn temporal_targets(candidates: &[Candidate], gt: &Segment) -> Vec<f64> {
    candidates.iter().map(|c| temporal_iou(&c.segment, gt)).collect()
}

pub fn temporal_loss<F: Real>(confidence: &Tensor<F>, targets: &[F], eps: F) -> F {
    let total: F = confidence
        .data()
        .iter()
        .zip(targets)
        .map(|(&c, &t)| soft_bce(c, t, eps))
        .sum();
    total / F::lit(confidence.len() as f64)
}

/// Index of the highest-confidence candidate; ties go to the lowest
/// `(center, width)`.
pub fn select_candidate<F: Real>(confidence: &Tensor<F>) -> usize {
    let mut best = 0;
    for (i, &c) in confidence.data().iter().enumerate() {
        if c > confidence.data()[best] {
            best = i;
        }
    }
    best
}

/// Ground-truth offsets `(s − ŝ, e − ê)` of a candidate.
pub fn target_offsets(candidate: &Segment, gt: &Segment) -> (f64, f64) {
    (
        candidate.start() as f64 - gt.start() as f64,
        candidate.end() as f64 - gt.end() as f64,
    )
}

pub fn regression_loss<F: Real>(offsets: (F, F), candidate: &Segment, gt: &Segment, threshold: F) -> F {
    let (ts, te) = target_offsets(candidate, gt);
    smooth_l1(offsets.0 - F::lit(ts), threshold) + smooth_l1(offsets.1 - F::lit(te), threshold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub spatial: f64,
    pub temporal: f64,
    pub regression: f64,
    pub diversity: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.spatial * self.spatial
            + w.temporal * self.temporal
            + w.regression * self.regression
            + w.diversity * self.diversity
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            spatial: self.spatial * s,
            temporal: self.temporal * s,
            regression: self.regression * s,
            diversity: self.diversity * s,
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.spatial += other.spatial;
        self.temporal += other.temporal;
        self.regression += other.regression;
        self.diversity += other.diversity;
    }
}

/// A predicted tube plus the raw scores it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub segment: Segment,
    pub boxes: Vec<BoundingBox>,
    pub candidate: Candidate,
    pub confidence: f64,
    pub offsets: (f64, f64),
    /// Chosen region (0-based) on each frame of `segment`.
    pub regions: Vec<usize>,
}

/// Moves a candidate by predicted offsets: `s' = round(s − l_s)`,
/// `e' = round(e − l_e)`, clamped to the clip and reordered if crossed.
pub fn adjust_segment(candidate: &Segment, offsets: (f64, f64), frames: usize) -> Segment {
    let clamp = |x: f64| -> usize {
        let r = x.round();
        if r.is_nan() || r < 1.0 {
            1
        } else if r > frames as f64 {
            frames
        } else {
            r as usize
        }
    };
    let s = clamp(candidate.start() as f64 - offsets.0);
    let e = clamp(candidate.end() as f64 - offsets.1);
    let (s, e) = if s > e { (e, s) } else { (s, e) };
    Segment::new(s, e).expect("clamped to the clip")
}

/// Picks the best candidate, applies its offsets, then the best region
/// on every frame of the adjusted segment. `boxes` is `[N * K]` row-major.
pub fn select_tube<F: Real>(
    heads: &HeadOutputs<F>,
    spatial: &Tensor<F>,
    candidates: &[Candidate],
    boxes: &[BoundingBox],
    frames: usize,
    regions_per_frame: usize,
) -> Prediction {
    let best = select_candidate(&heads.confidence);
    let cand = candidates[best];
    let (ls, le) = heads.offset(cand.center - 1, cand.width);
    let offsets = (ls.to_f64().unwrap_or(0.0), le.to_f64().unwrap_or(0.0));
    let segment = adjust_segment(&cand.segment, offsets, frames);
    let mut chosen = Vec::with_capacity(segment.len());
    let mut out_boxes = Vec::with_capacity(segment.len());
    for n in segment.frames() {
        let row = &spatial.data()[(n - 1) * regions_per_frame..n * regions_per_frame];
        let mut k_best = 0;
        for (k, &s) in row.iter().enumerate() {
            if s > row[k_best] {
                k_best = k;
            }
        }
        chosen.push(k_best);
        out_boxes.push(boxes[(n - 1) * regions_per_frame + k_best]);
    }
    Prediction {
        segment,
        boxes: out_boxes,
        candidate: cand,
        confidence: heads.confidence.data()[best].to_f64().unwrap_or(f64::NAN),
        offsets,
        regions: chosen,
    }
}
