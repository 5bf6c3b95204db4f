use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn omrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omrn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = omrn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&["gen", "--samples", "4", "--frames", "12", "--regions", "5", "--objects", "3", "--seed", "7", "--out", p(dir)]);
}

const SMALL: [&str; 8] = ["--feat", "8", "--attn", "8", "--hidden", "4", "--widths", "3,5,7"];

#[test]
fn gen_is_deterministic_and_validates() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a);
    gen(&b);
    for e in fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    let bad = omrn(&["gen", "--objects", "9", "--regions", "5", "--out", p(&t.path().join("c"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("objects"));
}

#[test]
fn unknown_flags_and_missing_output_are_validation_errors() {
    assert_eq!(omrn(&["gen", "--bogus", "1"]).status.code(), Some(1));
    assert_eq!(omrn(&["gen"]).status.code(), Some(1));
    assert_eq!(omrn(&["frobnicate"]).status.code(), Some(1));
    assert!(omrn(&["--help"]).status.success());
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data);
    let ck = t.path().join("ck");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&ck), "--steps", "0", "--seed", "3"];
    args.extend(SMALL);
    ok(&args);
    let (header, params) = omrn::training::load_checkpoint(&ck).unwrap();
    let template = omrn::model::ModelParams::<f32>::zeros(&header.model.dims, 3);
    assert_eq!(params, omrn::training::init_params(&template, 3, 1.0));
    let log = fs::read_to_string(ck.join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn train_log_has_one_line_per_step_with_default_weights() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data);
    let ck = t.path().join("ck");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&ck), "--steps", "5", "--quiet"];
    args.extend(SMALL);
    ok(&args);
    let log = fs::read_to_string(ck.join("train_log.txt")).unwrap();
    let rows: Vec<Vec<f64>> = log
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(' ').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 6);
        assert_eq!(r[0], (i + 1) as f64);
        let total = r[1] + r[2] + 0.001 * r[3] + r[4];
        assert!((total - r[5]).abs() < 1e-4 * r[5].max(1.0), "{r:?}");
    }
    let (header, _) = omrn::training::load_checkpoint(&ck).unwrap();
    assert_eq!(header.model.localizer.weights.to_array(), [1.0, 1.0, 0.001, 1.0]);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 5, "synth": {"num_samples": 2, "frames": 8, "regions": 4}}"#).unwrap();
    let out = t.path().join("d");
    ok(&["--config", p(&cfg), "gen", "--samples", "3", "--out", p(&out)]);
    let ds = omrn::data::load_dataset(&out).unwrap();
    assert_eq!(ds.samples.len(), 3);
    assert_eq!(ds.samples[0].num_frames(), 8);
    let expected = omrn::data::generate_synthetic(&omrn::data::SynthConfig {
        num_samples: 3,
        frames: 8,
        regions: 4,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(ds.samples, expected.samples);

    fs::write(&cfg, r#"{"synth": {"nonsense": 1}}"#).unwrap();
    assert_eq!(omrn(&["--config", p(&cfg), "gen", "--out", p(&out)]).status.code(), Some(1));
}

#[test]
fn infer_then_eval_composes_and_rejects_mismatched_ids() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data);
    let ck = t.path().join("ck");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&ck), "--steps", "2", "--quiet"];
    args.extend(SMALL);
    ok(&args);
    let pr = t.path().join("pr");
    ok(&["infer", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&pr)]);
    let preds = pr.join("predictions.json");
    let ev = t.path().join("ev");
    let out = ok(&["eval", "--predictions", p(&preds), "--data", p(&data), "--out", p(&ev)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("m_vIoU"));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for key in ["m_tiou", "m_viou", "viou@0.3", "viou@0.5"] {
        assert!(metrics[key].is_f64(), "{key}");
    }

    let text = fs::read_to_string(&preds).unwrap().replace("syn00001", "other");
    fs::write(&preds, text).unwrap();
    let bad = omrn(&["eval", "--predictions", p(&preds), "--data", p(&data)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("syn00001"));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data);
    let ds = omrn::data::load_dataset(&data).unwrap();
    let file = omrn::geometry::PredictionFile {
        predictions: ds
            .samples
            .iter()
            .map(|s| omrn::geometry::PredictionRecord {
                id: s.id.clone(),
                segment: s.gt_segment,
                boxes: s.gt_boxes.clone(),
                confidence: None,
            })
            .collect(),
    };
    let preds = t.path().join("gt.json");
    fs::write(&preds, serde_json::to_string(&file).unwrap()).unwrap();
    let out = ok(&["eval", "--predictions", p(&preds), "--data", p(&data)]);
    let text = String::from_utf8_lossy(&out.stdout);
    for line in ["m_tIoU 1", "m_vIoU 1", "vIoU@0.3 1", "vIoU@0.5 1"] {
        assert!(text.lines().any(|l| l == line), "{line} in {text}");
    }
}

#[test]
fn gradcheck_flags_a_corrupted_parameter() {
    let t = tempfile::tempdir().unwrap();
    let args = [
        "gradcheck", "--corrupt", "localizer.w_conf", "--frames", "4", "--regions", "3", "--objects", "2",
        "--words", "5", "--dim", "4", "--hidden", "2", "--out", p(t.path()),
    ];
    let out = omrn(&args);
    assert_eq!(out.status.code(), Some(2));
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("gradcheck.json")).unwrap()).unwrap();
    let combined = reports[0]["params"].as_array().unwrap();
    let conf = combined.iter().find(|p| p["name"] == "localizer.w_conf").unwrap();
    assert!((conf["max_rel_error"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-6);
    assert_eq!(conf["passed"], false);
    assert_eq!(omrn(&["gradcheck", "--corrupt", "no.such"]).status.code(), Some(1));
}
