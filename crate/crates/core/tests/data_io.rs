use std::fs;

use omrn::data::tensor_file::save_tensor;
use omrn::data::{generate_synthetic, load_dataset, read_manifest, write_dataset, DataError, SynthConfig};
use omrn::tensor::Tensor;

fn write_synthetic(dir: &std::path::Path, cfg: &SynthConfig) -> omrn::data::SyntheticSet {
    let set = generate_synthetic(cfg).unwrap();
    write_dataset(dir, "synthetic", &set.samples, Some(&set.object_classes)).unwrap();
    set
}

#[test]
fn write_then_load_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let set = write_synthetic(dir.path(), &SynthConfig {
        noise_std: 0.37,
        ..Default::default()
    });
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.samples.len(), 4);
    for (a, b) in set.samples.iter().zip(&loaded.samples) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.regions), bits(&b.regions));
        assert_eq!(bits(&a.embeddings), bits(&b.embeddings));
        assert_eq!(a, b);
    }
    // the manifest file path works as well as the directory
    let again = load_dataset(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(again.samples, loaded.samples);
}

#[test]
fn single_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = write_synthetic(dir.path(), &SynthConfig {
        num_samples: 1,
        ..Default::default()
    });
    assert_eq!(load_dataset(dir.path()).unwrap().samples, set.samples);
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig {
        noise_std: 0.2,
        ..Default::default()
    };
    write_synthetic(a.path(), &cfg);
    write_synthetic(b.path(), &cfg);
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 1 + 3 * 4);
    for name in names {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = dir.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn noun_index_out_of_range_names_sample_and_index() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), &SynthConfig::default());
    edit_manifest(dir.path(), |v| v["samples"][2]["noun_indices"][1] = 99.into());
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, DataError::NounIndex { id, index: 99, .. } if id == "syn00002"), "{err}");
    assert!(err.to_string().contains("syn00002") && err.to_string().contains("99"));
}

#[test]
fn reversed_segment_is_rejected_with_sample_id() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), &SynthConfig::default());
    edit_manifest(dir.path(), |v| v["samples"][1]["gt_segment"] = serde_json::json!([5, 3]));
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, DataError::GtSegment { id, start: 5, end: 3, .. } if id == "syn00001"), "{err}");
}

#[test]
fn missing_and_mismatched_tensors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), &SynthConfig::default());
    fs::remove_file(dir.path().join("syn00003.boxes.omrn")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Io { .. })));

    let dir = tempfile::tempdir().unwrap();
    write_synthetic(dir.path(), &SynthConfig::default());
    save_tensor(&dir.path().join("syn00000.regions.omrn"), &Tensor::zeros(&[12, 5, 7])).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Shape { what: "regions", .. })));
}

#[test]
fn shared_embedding_table_is_looked_up_by_word_id() {
    let dir = tempfile::tempdir().unwrap();
    let set = write_synthetic(dir.path(), &SynthConfig::default());
    save_tensor(&dir.path().join("vocab.omrn"), &set.vocabulary).unwrap();
    edit_manifest(dir.path(), |v| {
        v["embedding_table"] = "vocab.omrn".into();
        for s in v["samples"].as_array_mut().unwrap() {
            s.as_object_mut().unwrap().remove("embeddings");
        }
    });
    assert!(read_manifest(&dir.path().join("manifest.json")).unwrap().embedding_table.is_some());
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.samples, set.samples);
}

#[test]
fn noise_free_prototype_oracle_recovers_every_tube() {
    let set = generate_synthetic(&SynthConfig::default()).unwrap();
    for (s, classes) in set.samples.iter().zip(&set.object_classes) {
        let proto = set.prototype(classes[0]);
        let cos = |a: &[f32], b: &[f32]| {
            let d: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f32>().sqrt() * b.iter().map(|x| x * x).sum::<f32>().sqrt())
        };
        let mut hits = Vec::new();
        for n in 1..=s.num_frames() {
            let best = (0..s.num_regions())
                .max_by(|&a, &b| cos(s.region(n, a), proto).total_cmp(&cos(s.region(n, b), proto)))
                .unwrap();
            if cos(s.region(n, best), proto) > 1.0 - 1e-6 {
                hits.push((n, *s.box_at(n, best)));
            }
        }
        let frames: Vec<usize> = hits.iter().map(|h| h.0).collect();
        assert_eq!(frames, s.gt_segment.frames().collect::<Vec<_>>());
        let boxes: Vec<_> = hits.iter().map(|h| h.1).collect();
        assert_eq!(boxes, s.gt_boxes);
    }
}
