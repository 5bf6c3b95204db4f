mod common;

use common::*;
use omrn::data::VideoSample;
use omrn::geometry::{viou, Segment, Tube};
use omrn::gradcheck::{analytic_gradient, finite_differences, relative_error, standard_weight_sets};
use omrn::localizer::{candidate_segments, select_tube, spatial_scores, target_offsets, HeadOutputs, LocalizerParams, LossWeights};
use omrn::model::{forward, loss_and_grad, SampleInput};
use omrn::params::ParamGroup;
use omrn::tensor::{sigmoid, Tensor};

#[test]
fn backward_matches_finite_differences_away_from_round_off() {
    let synth = omrn::data::SynthConfig {
        feature_dim: 5,
        word_dim: 4,
        ..tiny_synth(4)
    };
    let cfg = small_model(5, 4);
    let (_, inputs) = synth_inputs(&synth, &cfg);
    let params = random_params(&cfg, 4, 1.0);
    let numeric = finite_differences(&inputs[0], &params, &cfg.localizer, 1e-5).unwrap();
    for w in standard_weight_sets(&cfg.localizer.weights) {
        let (_, g) = analytic_gradient(&inputs[0], &params, &cfg.localizer, &w).unwrap();
        let wa = w.to_array();
        for (i, &ga) in g.flat().iter().enumerate() {
            let gn: f64 = (0..4).map(|j| wa[j] * numeric[i][j]).sum();
            if ga.abs() + gn.abs() > 1e-6 {
                assert!(relative_error(ga, gn) < 1e-4, "element {i} weights {wa:?}: {ga} vs {gn}");
            } else {
                assert!((ga - gn).abs() < 1e-9, "element {i} weights {wa:?}: {ga} vs {gn}");
            }
        }
    }
}

fn zero_under(g: &omrn::model::ModelParams<f64>, prefix: &str) -> bool {
    g.named()
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .all(|(_, t)| t.data().iter().all(|&x| x == 0.0))
}

#[test]
fn diversity_only_gradient_skips_relation_and_localizer() {
    let cfg = tiny_model();
    let (_, inputs) = synth_inputs(&tiny_synth(2), &cfg);
    let params = random_params(&cfg, 2, 1.0);
    let (_, g) = analytic_gradient(&inputs[0], &params, &cfg.localizer, &LossWeights::one_hot(3)).unwrap();
    assert!(zero_under(&g, "relation."));
    assert!(zero_under(&g, "localizer."));
    for upstream in ["aggregation.", "language.", "context.", "branch.w_c", "branch.w_gamma"] {
        assert!(!zero_under(&g, upstream), "{upstream}");
    }
}

#[test]
fn offset_head_is_idle_without_regression_weight() {
    let mut cfg = tiny_model();
    cfg.localizer.weights.regression = 0.0;
    let (_, inputs) = synth_inputs(&tiny_synth(3), &cfg);
    let params = random_params(&cfg, 3, 1.0);
    let (_, g) = loss_and_grad(&inputs[0], &params, &cfg.localizer).unwrap();
    assert!(zero_under(&g, "localizer.w_off"));
    assert!(zero_under(&g, "localizer.b_off"));
    assert!(!zero_under(&g, "localizer.w_conf"));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let cfg = tiny_model();
    let (_, inputs) = synth_inputs(&tiny_synth(5), &cfg);
    let params = random_params(&cfg, 5, 1.0).cast::<f32>();
    let input = inputs[0].cast::<f32>();
    let a = loss_and_grad(&input, &params, &cfg.localizer).unwrap();
    let b = loss_and_grad(&input, &params, &cfg.localizer).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

fn permute_regions(s: &VideoSample, perm_for: impl Fn(usize) -> Vec<usize>) -> VideoSample {
    let (nf, kk, d) = (s.num_frames(), s.num_regions(), s.region_dim());
    let mut regions = Vec::with_capacity(nf * kk * d);
    let mut boxes = Vec::with_capacity(nf * kk);
    for n in 1..=nf {
        for &k in &perm_for(n) {
            regions.extend_from_slice(s.region(n, k));
            boxes.push(*s.box_at(n, k));
        }
    }
    VideoSample {
        regions: Tensor::from_vec(&[nf, kk, d], regions),
        boxes,
        ..s.clone()
    }
}

#[test]
fn loss_and_gradients_ignore_region_order() {
    let cfg = tiny_model();
    let (set, inputs) = synth_inputs(&tiny_synth(6), &cfg);
    let params = random_params(&cfg, 6, 1.0);
    let shuffled = permute_regions(&set.samples[0], |n| {
        let mut p: Vec<usize> = (0..4).collect();
        p.rotate_left(n % 4);
        p.reverse();
        p
    });
    let other = SampleInput::new(&shuffled, &cfg).unwrap();
    let (la, ga) = loss_and_grad(&inputs[0], &params, &cfg.localizer).unwrap();
    let (lb, gb) = loss_and_grad(&other, &params, &cfg.localizer).unwrap();
    let (ta, tb) = (la.total(&cfg.localizer.weights), lb.total(&cfg.localizer.weights));
    assert!((ta - tb).abs() < 1e-12 * ta.abs().max(1.0), "{ta} vs {tb}");
    for ((name, x), (_, y)) in ga.named().iter().zip(gb.named()) {
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-10 + 1e-8 * a.abs(), "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn loss_matches_component_oracle_at_zero_parameters() {
    let cfg = tiny_model();
    let (set, inputs) = synth_inputs(&tiny_synth(8), &cfg);
    let params = omrn::model::ModelParams::<f64>::zeros(&cfg.dims, 3);
    let t = forward(&inputs[0], &params, &cfg.localizer).unwrap();
    // all confidences 0.5, offsets 0, first candidate selected
    let gt = set.samples[0].gt_segment;
    let cand = candidate_segments(6, &[3, 5, 7])[0];
    let (ts, te) = target_offsets(&cand.segment, &gt);
    let r = |x: f64| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
    assert!((t.losses.regression - (r(-ts) + r(-te))).abs() < 1e-12);
    assert!((t.losses.temporal - 2f64.ln()).abs() < 1e-12);
}

/// Scores every region by its dot product with the queried object's
/// prototype through identity projections, and feeds the temporal heads
/// the confidences and offsets an ideal network would produce for the
/// segment on which that prototype is present.
#[test]
fn inference_recovers_planted_tube_with_oracle_scores() {
    let synth = omrn::data::SynthConfig {
        feature_dim: 64,
        ..desk_synth(11)
    };
    let set = omrn::data::generate_synthetic(&synth).unwrap();
    for (s, classes) in set.samples.iter().zip(&set.object_classes) {
        let (nf, kk, d) = (s.num_frames(), s.num_regions(), s.region_dim());
        let proto: Vec<f64> = set.prototype(classes[0]).iter().map(|&x| x as f64).collect();
        let mut lp = LocalizerParams::<f64>::zeros(d, d, d, 1, 1);
        for i in 0..d {
            lp.w_r.data_mut()[i * d + i] = 1.0;
            lp.w_o.data_mut()[i * d + i] = 1.0 / (d as f64);
        }
        let regions = Tensor::from_vec(&[nf * kk, d], s.regions.data().iter().map(|&x| x as f64).collect());
        let spatial = spatial_scores(&regions, &proto, &lp);

        // nearest-prototype oracle for the segment
        let present: Vec<usize> = (1..=nf)
            .filter(|&n| (0..kk).any(|k| s.region(n, k).iter().zip(&proto).all(|(&a, &b)| a as f64 == b)))
            .collect();
        let found = Segment::new(present[0], *present.last().unwrap()).unwrap();
        assert_eq!(found, s.gt_segment);

        let widths = vec![3, 5, 7];
        let cands = candidate_segments(nf, &widths);
        let mut conf = Tensor::zeros(&[nf, 3]);
        let mut offsets = Tensor::zeros(&[nf, 6]);
        for (i, c) in cands.iter().enumerate() {
            conf.data_mut()[i] = sigmoid(omrn::geometry::temporal_iou(&c.segment, &found) * 4.0 - 2.0);
            let (ls, le) = target_offsets(&c.segment, &found);
            offsets.data_mut()[2 * i] = ls;
            offsets.data_mut()[2 * i + 1] = le;
        }
        let heads = HeadOutputs {
            logits: conf.clone(),
            confidence: conf,
            offsets,
        };
        let p = select_tube(&heads, &spatial.scores, &cands, &s.boxes, nf, kk);
        let tube = Tube::new(p.segment, p.boxes.clone()).unwrap();
        assert_eq!(viou(&tube, &s.gt_tube()), 1.0, "sample {}", s.id);
    }
}
