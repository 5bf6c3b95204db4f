//! Box and segment geometry plus the tube-level evaluation criteria
//! (m_tIoU, m_vIoU, vIoU@R).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BoundingBox;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid segment [{start}, {end}]: frames are 1-based and start must not exceed end")]
    InvalidSegment { start: usize, end: usize },
    #[error("tube over [{start}, {end}] needs {expected} boxes, got {got}")]
    TubeBoxCount {
        start: usize,
        end: usize,
        expected: usize,
        got: usize,
    },
    #[error("{predictions} predictions for {ground_truths} ground truths")]
    CountMismatch {
        predictions: usize,
        ground_truths: usize,
    },
    #[error("no prediction for sample `{0}`")]
    MissingPrediction(String),
    #[error("duplicate prediction for sample `{0}`")]
    DuplicatePrediction(String),
}

/// Inclusive frame range, 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct Segment {
    start: usize,
    end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Result<Self, GeometryError> {
        if start == 0 || start > end {
            return Err(GeometryError::InvalidSegment { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn intersection_len(&self, other: &Segment) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if lo > hi {
            0
        } else {
            hi - lo + 1
        }
    }
}

impl TryFrom<[usize; 2]> for Segment {
    type Error = GeometryError;

    fn try_from(v: [usize; 2]) -> Result<Self, Self::Error> {
        Segment::new(v[0], v[1])
    }
}

impl From<Segment> for [usize; 2] {
    fn from(s: Segment) -> Self {
        [s.start, s.end]
    }
}

/// Position and scale of one box relative to another.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelGeometry {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl RelGeometry {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

fn corners(b: &BoundingBox) -> (f64, f64, f64, f64) {
    let (x, y, w, h) = (b.x as f64, b.y as f64, b.w as f64, b.h as f64);
    (x - w / 2.0, y - h / 2.0, x + w / 2.0, y + h / 2.0)
}

/// Intersection over union of two center/size boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Offsets of `main` measured in units of `aux`'s size, and log size ratios.
pub fn rel_geometry(main: &BoundingBox, aux: &BoundingBox) -> RelGeometry {
    let (mx, my, mw, mh) = (main.x as f64, main.y as f64, main.w as f64, main.h as f64);
    let (ax, ay, aw, ah) = (aux.x as f64, aux.y as f64, aux.w as f64, aux.h as f64);
    RelGeometry {
        dx: (mx - ax) / aw,
        dy: (my - ay) / ah,
        dw: (mw / aw).ln(),
        dh: (mh / ah).ln(),
    }
}

pub fn temporal_iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// A segment plus one box for each of its frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Tube {
    segment: Segment,
    boxes: Vec<BoundingBox>,
}

impl Tube {
    pub fn new(segment: Segment, boxes: Vec<BoundingBox>) -> Result<Self, GeometryError> {
        if boxes.len() != segment.len() {
            return Err(GeometryError::TubeBoxCount {
                start: segment.start,
                end: segment.end,
                expected: segment.len(),
                got: boxes.len(),
            });
        }
        Ok(Self { segment, boxes })
    }

    pub fn segment(&self) -> Segment {
        self.segment
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    /// Box on an absolute frame index, if the frame lies in the tube.
    pub fn box_at(&self, frame: usize) -> Option<&BoundingBox> {
        self.segment
            .contains(frame)
            .then(|| &self.boxes[frame - self.segment.start])
    }
}

/// Spatio-temporal IoU: per-frame box IoU summed over the shared frames,
/// divided by the size of the frame union.
pub fn viou(pred: &Tube, gt: &Tube) -> f64 {
    let (ps, gs) = (pred.segment, gt.segment);
    let inter = ps.intersection_len(&gs);
    let union = ps.len() + gs.len() - inter;
    if inter == 0 {
        return 0.0;
    }
    let lo = ps.start.max(gs.start);
    let hi = ps.end.min(gs.end);
    let total: f64 = (lo..=hi)
        .map(|n| {
            let p = pred.box_at(n).expect("frame in predicted tube");
            let g = gt.box_at(n).expect("frame in ground-truth tube");
            box_iou(p, g)
        })
        .sum();
    total / union as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub m_tiou: f64,
    pub m_viou: f64,
    #[serde(rename = "viou@0.3")]
    pub viou_at_03: f64,
    #[serde(rename = "viou@0.5")]
    pub viou_at_05: f64,
    pub count: usize,
}

/// Pairs predictions with ground truths by position.
pub fn evaluate(predictions: &[Tube], ground_truths: &[Tube]) -> Result<Metrics, GeometryError> {
    if predictions.len() != ground_truths.len() {
        return Err(GeometryError::CountMismatch {
            predictions: predictions.len(),
            ground_truths: ground_truths.len(),
        });
    }
    let n = predictions.len();
    if n == 0 {
        return Ok(Metrics {
            m_tiou: 0.0,
            m_viou: 0.0,
            viou_at_03: 0.0,
            viou_at_05: 0.0,
            count: 0,
        });
    }
    let mut tiou_sum = 0.0;
    let mut viou_sum = 0.0;
    let mut above_03 = 0usize;
    let mut above_05 = 0usize;
    for (p, g) in predictions.iter().zip(ground_truths) {
        tiou_sum += temporal_iou(&p.segment, &g.segment);
        let v = viou(p, g);
        viou_sum += v;
        // strict inequality
        if v > 0.3 {
            above_03 += 1;
        }
        if v > 0.5 {
            above_05 += 1;
        }
    }
    let nf = n as f64;
    Ok(Metrics {
        m_tiou: tiou_sum / nf,
        m_viou: viou_sum / nf,
        viou_at_03: above_03 as f64 / nf,
        viou_at_05: above_05 as f64 / nf,
        count: n,
    })
}

/// One line of the prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub segment: Segment,
    pub boxes: Vec<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f32>,
}

impl PredictionRecord {
    pub fn tube(&self) -> Result<Tube, GeometryError> {
        Tube::new(self.segment, self.boxes.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub predictions: Vec<PredictionRecord>,
}

/// Matches predictions to ground truths by sample id, then evaluates.
pub fn evaluate_by_id(
    predictions: &[PredictionRecord],
    ground_truths: &[(String, Tube)],
) -> Result<Metrics, GeometryError> {
    if predictions.len() != ground_truths.len() {
        return Err(GeometryError::CountMismatch {
            predictions: predictions.len(),
            ground_truths: ground_truths.len(),
        });
    }
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in predictions {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(GeometryError::DuplicatePrediction(p.id.clone()));
        }
    }
    let mut preds = Vec::with_capacity(ground_truths.len());
    let mut gts = Vec::with_capacity(ground_truths.len());
    for (id, gt) in ground_truths {
        let p = by_id
            .get(id.as_str())
            .ok_or_else(|| GeometryError::MissingPrediction(id.clone()))?;
        preds.push(p.tube()?);
        gts.push(gt.clone());
    }
    evaluate(&preds, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f32, y: f32, w: f32, h: f32) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn seg(s: usize, e: usize) -> Segment {
        Segment::new(s, e).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = bx(5.0, 5.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bx(20.0, 20.0, 2.0, 2.0)), 0.0);
        let v = box_iou(&bx(1.0, 1.0, 2.0, 2.0), &bx(2.0, 2.0, 2.0, 2.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rel_geometry_cases() {
        let a = bx(10.0, 10.0, 4.0, 6.0);
        assert_eq!(rel_geometry(&a, &a).to_array(), [0.0; 4]);
        let main = bx(14.0, 10.0, 4.0, 6.0);
        assert_eq!(rel_geometry(&main, &a).dx, 1.0);
        let wide = bx(10.0, 10.0, 8.0, 6.0);
        assert!((rel_geometry(&wide, &a).dw - 2f64.ln()).abs() < 1e-12);
        assert!((rel_geometry(&a, &wide).dw + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn temporal_iou_cases() {
        assert_eq!(temporal_iou(&seg(2, 8), &seg(2, 8)), 1.0);
        assert_eq!(temporal_iou(&seg(1, 5), &seg(6, 9)), 0.0);
        assert!((temporal_iou(&seg(1, 5), &seg(3, 7)) - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn segment_rejects_reversed_and_zero() {
        assert!(Segment::new(3, 2).is_err());
        assert!(Segment::new(0, 2).is_err());
        assert!(serde_json::from_str::<Segment>("[5, 4]").is_err());
    }

    #[test]
    fn viou_cases() {
        let b = bx(5.0, 5.0, 2.0, 2.0);
        let gt = Tube::new(seg(3, 6), vec![b; 4]).unwrap();
        assert_eq!(viou(&gt, &gt), 1.0);
        let far = Tube::new(seg(8, 9), vec![b; 2]).unwrap();
        assert_eq!(viou(&far, &gt), 0.0);
        let pred = Tube::new(seg(1, 4), vec![b; 4]).unwrap();
        assert!((viou(&pred, &gt) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn tube_box_count_checked() {
        assert!(Tube::new(seg(1, 3), vec![bx(1.0, 1.0, 1.0, 1.0)]).is_err());
    }

    #[test]
    fn evaluate_two_samples() {
        // Tubes with one frame each; vIoU equals the box IoU.
        let g = bx(0.0, 0.0, 10.0, 10.0);
        // IoU 0.4 and 0.6 via horizontal shifts: overlap w/(20-w)
        let shift = |iou: f64| {
            let ov = 20.0 * iou / (1.0 + iou);
            bx((10.0 - ov) as f32, 0.0, 10.0, 10.0)
        };
        let gts = vec![
            Tube::new(seg(1, 1), vec![g]).unwrap(),
            Tube::new(seg(1, 1), vec![g]).unwrap(),
        ];
        let preds = vec![
            Tube::new(seg(1, 1), vec![shift(0.4)]).unwrap(),
            Tube::new(seg(1, 1), vec![shift(0.6)]).unwrap(),
        ];
        let m = evaluate(&preds, &gts).unwrap();
        assert!((m.m_viou - 0.5).abs() < 1e-6);
        assert_eq!(m.viou_at_03, 1.0);
        assert_eq!(m.viou_at_05, 0.5);
        assert_eq!(m.m_tiou, 1.0);
        assert!(evaluate(&preds[..1], &gts).is_err());
    }

    #[test]
    fn evaluate_by_id_reports_missing() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let gt = Tube::new(seg(1, 1), vec![g]).unwrap();
        let rec = PredictionRecord {
            id: "a".into(),
            segment: seg(1, 1),
            boxes: vec![g],
            confidence: None,
        };
        let gts = vec![("b".to_string(), gt.clone())];
        assert_eq!(
            evaluate_by_id(std::slice::from_ref(&rec), &gts),
            Err(GeometryError::MissingPrediction("b".into()))
        );
        let m = evaluate_by_id(&[rec], &[("a".to_string(), gt)]).unwrap();
        assert_eq!(m.m_viou, 1.0);
    }
}
