//! The full network: parameters, per-sample inputs, forward pass with all
//! four losses, analytic backward pass and inference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{pool_regions, project, project_backward, AggregationConfig, AggregationError, AggregationParams};
use crate::data::{BoundingBox, VideoSample};
use crate::geometry::{box_iou, rel_geometry, PredictionRecord, Segment};
use crate::gru::{BiGruParams, BiGruTrace};
use crate::language::{build_objects, build_objects_backward, encode_words, encode_words_backward, ContextAttnParams, ObjectSet};
use crate::localizer::{
    candidate_segments, frame_backward, frame_features, heads_backward, regression_loss, select_candidate, select_tube,
    smooth_l1_grad, soft_bce_logit_grad, spatial_backward, spatial_loss, spatial_scores, target_offsets,
    temporal_heads, temporal_loss, temporal_targets, Candidate, FrameTrace, HeadOutputs, LocalizerConfig,
    LocalizerParams, LossBreakdown, LossWeights, Prediction, SpatialTrace,
};
use crate::params::ParamGroup;
use crate::relation::{
    branch_backward, branch_forward, diversity_backward, diversity_loss, relate, relate_backward, BranchParams,
    BranchState, RelationParams, RelationTrace,
};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("sample `{id}`: {reason}")]
    Incompatible { id: String, reason: String },
    #[error("non-finite values in `{0}`")]
    NonFinite(&'static str),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Layer sizes. Word features are `2 * hidden` wide and object features
/// `4 * hidden`; the temporal context is `2 * hidden`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub region_dim: usize,
    pub word_dim: usize,
    pub feat: usize,
    pub attn: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            region_dim: 2048,
            word_dim: 300,
            feat: 256,
            attn: 256,
            hidden: 128,
        }
    }
}

impl ModelDims {
    pub fn object_dim(&self) -> usize {
        4 * self.hidden
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub aggregation: AggregationConfig,
    pub localizer: LocalizerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let d = &self.dims;
        if [d.region_dim, d.word_dim, d.feat, d.attn, d.hidden].contains(&0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        let w = &self.localizer.widths;
        if w.is_empty() || w[0] == 0 || w.windows(2).any(|p| p[0] >= p[1]) {
            return Err(ModelError::Config(format!("widths must be positive and ascending, got {w:?}")));
        }
        let l = &self.localizer;
        if l.weights.to_array().iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(ModelError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(l.smooth_l1_threshold > 0.0) || !(l.bce_epsilon > 0.0 && l.bce_epsilon < 0.5) {
            return Err(ModelError::Config("threshold must be positive and epsilon in (0, 0.5)".into()));
        }
        Ok(())
    }
}

crate::param_group! {
    pub struct ModelParams {
        aggregation: AggregationParams,
        language: BiGruParams,
        context: ContextAttnParams,
        branch: BranchParams,
        relation: RelationParams,
        localizer: LocalizerParams,
    }
}

impl<F: Real> ModelParams<F> {
    pub fn zeros(dims: &ModelDims, num_widths: usize) -> Self {
        let obj = dims.object_dim();
        Self {
            aggregation: AggregationParams::zeros(dims.region_dim, dims.feat),
            language: BiGruParams::zeros(dims.word_dim, dims.hidden),
            context: ContextAttnParams::zeros(2 * dims.hidden, dims.attn),
            branch: BranchParams::zeros(dims.feat, obj, dims.attn),
            relation: RelationParams::zeros(dims.feat, dims.attn),
            localizer: LocalizerParams::zeros(dims.feat, obj, dims.attn, dims.hidden, num_widths),
        }
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros_from(self);
        let src = self.named();
        let mut i = 0;
        out.for_each_mut("", &mut |_, t| {
            *t = src[i].1.cast();
            i += 1;
        });
        out
    }

    fn zeros_from<G: Real>(other: &ModelParams<G>) -> Self {
        Self {
            aggregation: AggregationParams::zeros(other.aggregation.w.cols(), other.aggregation.b.len()),
            language: BiGruParams::zeros(other.language.fwd.input(), other.language.fwd.hidden()),
            context: ContextAttnParams::zeros(other.context.w1.cols(), other.context.b.len()),
            branch: BranchParams::zeros(other.branch.b_gamma.len(), other.branch.w_gamma.cols(), other.branch.b_c.len()),
            relation: RelationParams::zeros(other.relation.w1.cols(), other.relation.b.len()),
            localizer: LocalizerParams::zeros(
                other.localizer.w_r.cols(),
                other.localizer.w_o.cols(),
                other.localizer.b_f.len(),
                other.localizer.gru.fwd.hidden(),
                other.localizer.b_conf.len(),
            ),
        }
    }
}

/// Everything about a sample the network consumes, precomputed once:
/// pooled region features, pairwise geometry, IoU and tIoU targets.
#[derive(Clone, Debug)]
pub struct SampleInput<F> {
    pub id: String,
    pub frames: usize,
    pub regions: usize,
    /// `[N * K, region_dim]` temporally pooled raw features.
    pub pooled: Tensor<F>,
    /// `[N * K * K, 4]` relative geometry of region `k` to region `l`.
    pub geometry: Tensor<F>,
    pub embeddings: Tensor<F>,
    pub nouns: Vec<usize>,
    pub gt_segment: Segment,
    /// 0-based ground-truth frames.
    pub gt_frames: Vec<usize>,
    /// `[N * K]` IoU with the ground-truth box of the frame, 0 off the segment.
    pub iou_targets: Vec<F>,
    pub candidates: Vec<Candidate>,
    /// `[N * H]` tIoU of every candidate.
    pub tiou_targets: Vec<F>,
    pub boxes: Vec<BoundingBox>,
}

impl SampleInput<f64> {
    pub fn new(sample: &VideoSample, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let d = &cfg.dims;
        let incompatible = |reason: String| ModelError::Incompatible {
            id: sample.id.clone(),
            reason,
        };
        if sample.region_dim() != d.region_dim {
            return Err(incompatible(format!(
                "region dim {} but the model expects {}",
                sample.region_dim(),
                d.region_dim
            )));
        }
        if sample.word_dim() != d.word_dim {
            return Err(incompatible(format!(
                "word dim {} but the model expects {}",
                sample.word_dim(),
                d.word_dim
            )));
        }
        let (nf, kk) = (sample.num_frames(), sample.num_regions());
        let pooled = pool_regions(sample, &cfg.aggregation)?;
        let mut geometry = Tensor::zeros(&[nf * kk * kk, 4]);
        for n in 1..=nf {
            for k in 0..kk {
                for l in 0..kk {
                    let g = rel_geometry(sample.box_at(n, k), sample.box_at(n, l));
                    geometry
                        .row_mut(((n - 1) * kk + k) * kk + l)
                        .copy_from_slice(&g.to_array());
                }
            }
        }
        let mut iou_targets = vec![0.0; nf * kk];
        for n in sample.gt_segment.frames() {
            let gt = sample.gt_box(n).expect("frame inside the segment");
            for k in 0..kk {
                iou_targets[(n - 1) * kk + k] = box_iou(sample.box_at(n, k), gt);
            }
        }
        let candidates = candidate_segments(nf, &cfg.localizer.widths);
        let tiou_targets = temporal_targets(&candidates, &sample.gt_segment);
        Ok(Self {
            id: sample.id.clone(),
            frames: nf,
            regions: kk,
            pooled,
            geometry,
            embeddings: sample.embeddings.cast(),
            nouns: sample.noun_indices.clone(),
            gt_segment: sample.gt_segment,
            gt_frames: sample.gt_segment.frames().map(|n| n - 1).collect(),
            iou_targets,
            candidates,
            tiou_targets,
            boxes: sample.boxes.clone(),
        })
    }
}

impl<F: Real> SampleInput<F> {
    pub fn cast<G: Real>(&self) -> SampleInput<G> {
        let c = |v: &[F]| v.iter().map(|&x| G::lit(x.to_f64().unwrap_or(f64::NAN))).collect();
        SampleInput {
            id: self.id.clone(),
            frames: self.frames,
            regions: self.regions,
            pooled: self.pooled.cast(),
            geometry: self.geometry.cast(),
            embeddings: self.embeddings.cast(),
            nouns: self.nouns.clone(),
            gt_segment: self.gt_segment,
            gt_frames: self.gt_frames.clone(),
            iou_targets: c(&self.iou_targets),
            candidates: self.candidates.clone(),
            tiou_targets: c(&self.tiou_targets),
            boxes: self.boxes.clone(),
        }
    }
}

/// All intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    /// `[N * K, feat]` aggregated region features.
    pub regions: Tensor<F>,
    pub words: Tensor<F>,
    language: BiGruTrace<F>,
    pub objects: ObjectSet<F>,
    pub branches: BranchState<F>,
    pub relation: RelationTrace<F>,
    pub spatial: SpatialTrace<F>,
    pub frames: FrameTrace<F>,
    pub heads: HeadOutputs<F>,
    /// Index into the candidate list used for the regression loss.
    pub selected: usize,
    pub losses: LossBreakdown,
}

fn check<F: Real>(name: &'static str, t: &Tensor<F>) -> Result<(), ModelError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite(name))
    }
}

pub fn forward<F: Real>(
    input: &SampleInput<F>,
    params: &ModelParams<F>,
    cfg: &LocalizerConfig,
) -> Result<ForwardTrace<F>, ModelError> {
    let (nf, kk) = (input.frames, input.regions);
    let eps = F::lit(cfg.bce_epsilon);
    let regions = project(&input.pooled, &params.aggregation);
    check("aggregated regions", &regions)?;
    let (words, language) = encode_words(&input.embeddings, &params.language);
    check("word features", &words)?;
    let objects = build_objects(&words, &input.nouns, &params.context);
    check("object features", &objects.features)?;
    let branches = branch_forward(&regions, &objects.features, &params.branch, nf, kk);
    check("modulated regions", &branches.modulated)?;
    check("matching distributions", &branches.dist)?;
    let relation = relate(&branches, &input.geometry, &params.relation);
    check("relation features", &relation.output)?;
    let main = objects.main();
    let spatial = spatial_scores(&relation.output, main, &params.localizer);
    check("spatial scores", &spatial.scores)?;
    let frames = frame_features(&relation.output, main, &params.localizer, nf, kk);
    check("frame context", &frames.context)?;
    let heads = temporal_heads(&frames.context, &params.localizer);
    check("temporal confidences", &heads.confidence)?;
    check("boundary offsets", &heads.offsets)?;

    let selected = select_candidate(&heads.confidence);
    let cand = input.candidates[selected];
    let threshold = F::lit(cfg.smooth_l1_threshold);
    let to64 = |x: F| x.to_f64().unwrap_or(f64::NAN);
    let losses = LossBreakdown {
        spatial: to64(spatial_loss(&spatial.scores, &input.iou_targets, kk, &input.gt_frames, eps)),
        temporal: to64(temporal_loss(&heads.confidence, &input.tiou_targets, eps)),
        regression: to64(regression_loss(
            heads.offset(cand.center - 1, cand.width),
            &cand.segment,
            &input.gt_segment,
            threshold,
        )),
        diversity: to64(diversity_loss(&branches, &input.gt_frames)),
    };
    if !losses.total(&cfg.weights).is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }
    Ok(ForwardTrace {
        regions,
        words,
        language,
        objects,
        branches,
        relation,
        spatial,
        frames,
        heads,
        selected,
        losses,
    })
}

/// Accumulates `scale * d(Σ λ_i L_i)/dθ` into `grads`.
pub fn backward<F: Real>(
    input: &SampleInput<F>,
    params: &ModelParams<F>,
    trace: &ForwardTrace<F>,
    cfg: &LocalizerConfig,
    weights: &LossWeights,
    scale: F,
    grads: &mut ModelParams<F>,
) {
    let (nf, kk) = (input.frames, input.regions);
    let hh = cfg.widths.len();
    let eps = F::lit(cfg.bce_epsilon);
    let lam = |w: f64| scale * F::lit(w);
    let p = &params.localizer;
    let g = &mut grads.localizer;

    // temporal heads: confidence and the selected candidate's offsets
    let mut d_conf = Tensor::zeros(trace.heads.logits.shape());
    let ct = lam(weights.temporal) / F::lit((nf * hh) as f64);
    for (i, d) in d_conf.data_mut().iter_mut().enumerate() {
        *d = ct * soft_bce_logit_grad(trace.heads.confidence.data()[i], input.tiou_targets[i], eps);
    }
    let mut d_off = Tensor::zeros(trace.heads.offsets.shape());
    let cand = input.candidates[trace.selected];
    let (ls, le) = trace.heads.offset(cand.center - 1, cand.width);
    let (ts, te) = target_offsets(&cand.segment, &input.gt_segment);
    let threshold = F::lit(cfg.smooth_l1_threshold);
    let row = d_off.row_mut(cand.center - 1);
    row[2 * cand.width] = lam(weights.regression) * smooth_l1_grad(ls - F::lit(ts), threshold);
    row[2 * cand.width + 1] = lam(weights.regression) * smooth_l1_grad(le - F::lit(te), threshold);
    let d_context = heads_backward(&trace.frames.context, p, &d_conf, &d_off, g);

    let mut d_final = Tensor::zeros(trace.relation.output.shape());
    let mut d_main = vec![F::zero(); trace.objects.features.cols()];
    let main = trace.objects.main();
    frame_backward(&trace.relation.output, main, p, &trace.frames, &d_context, &mut d_final, &mut d_main, g);

    let mut d_logits = vec![F::zero(); nf * kk];
    let cs = lam(weights.spatial) / F::lit((input.gt_frames.len() * kk) as f64);
    for &n in &input.gt_frames {
        for k in 0..kk {
            let i = n * kk + k;
            d_logits[i] = cs * soft_bce_logit_grad(trace.spatial.scores.data()[i], input.iou_targets[i], eps);
        }
    }
    spatial_backward(&trace.relation.output, main, p, &trace.spatial, &d_logits, &mut d_final, &mut d_main, g);

    let (d_mod, mut d_dist) = relate_backward(
        &trace.branches,
        &input.geometry,
        &params.relation,
        &trace.relation,
        &d_final,
        &mut grads.relation,
    );
    diversity_backward(&trace.branches, &input.gt_frames, lam(weights.diversity), &mut d_dist);
    let bg = branch_backward(
        &trace.regions,
        &trace.objects.features,
        &params.branch,
        &trace.branches,
        d_mod,
        &d_dist,
        &mut grads.branch,
    );
    project_backward(&input.pooled, &bg.regions, &mut grads.aggregation);
    let mut d_objects = bg.objects;
    for (d, &m) in d_objects.row_mut(0).iter_mut().zip(&d_main) {
        *d += m;
    }
    let d_words = build_objects_backward(
        &trace.words,
        &input.nouns,
        &params.context,
        &trace.objects,
        &d_objects,
        &mut grads.context,
    );
    encode_words_backward(&input.embeddings, &params.language, &trace.language, &d_words, &mut grads.language);
}

/// Loss breakdown and gradients of `Σ λ_i L_i` for one sample.
pub fn loss_and_grad<F: Real>(
    input: &SampleInput<F>,
    params: &ModelParams<F>,
    cfg: &LocalizerConfig,
) -> Result<(LossBreakdown, ModelParams<F>), ModelError> {
    let trace = forward(input, params, cfg)?;
    let mut grads = params.zeros_like();
    backward(input, params, &trace, cfg, &cfg.weights, F::one(), &mut grads);
    if !grads.all_finite() {
        return Err(ModelError::NonFinite("gradients"));
    }
    Ok((trace.losses, grads))
}

pub fn infer<F: Real>(
    input: &SampleInput<F>,
    params: &ModelParams<F>,
    cfg: &LocalizerConfig,
) -> Result<Prediction, ModelError> {
    let trace = forward(input, params, cfg)?;
    Ok(select_tube(
        &trace.heads,
        &trace.spatial.scores,
        &input.candidates,
        &input.boxes,
        input.frames,
        input.regions,
    ))
}

impl Prediction {
    pub fn to_record(&self, id: &str) -> PredictionRecord {
        PredictionRecord {
            id: id.to_string(),
            segment: self.segment,
            boxes: self.boxes.clone(),
            confidence: Some(self.confidence as f32),
        }
    }
}
