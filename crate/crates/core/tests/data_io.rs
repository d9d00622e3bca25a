use ssvos::data::{self, pnm, synth_generate, Outputs, Sequence, SyntheticSpec};
use ssvos::{Error, LabelMask, Tensor};

fn small_sequence(frames: usize) -> Sequence {
    let spec = SyntheticSpec { num_objects: 2, frame_count: frames, height: 24, width: 32, seed: 5, ..Default::default() };
    synth_generate(&spec).unwrap()
}

#[test]
fn sequence_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(5);
    data::save_sequence(dir.path(), &seq).unwrap();
    let loaded = data::load_sequence(dir.path()).unwrap();
    assert_eq!(loaded.frames.len(), 5);
    assert_eq!(loaded.first_mask, seq.masks[0]);
    assert_eq!(loaded.gt.as_ref().unwrap(), &seq.masks);
    assert!(loaded.warnings.is_empty());
    for (a, b) in loaded.frames.iter().zip(&seq.frames) {
        // Frames are quantized to 8 bits on disk.
        assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn frames_without_ground_truth_load() {
    let dir = tempfile::tempdir().unwrap();
    data::save_sequence(dir.path(), &small_sequence(5)).unwrap();
    std::fs::remove_dir_all(dir.path().join("gt")).unwrap();
    let loaded = data::load_sequence(dir.path()).unwrap();
    assert_eq!(loaded.frames.len(), 5);
    assert!(loaded.gt.is_none());
}

#[test]
fn sparse_ids_are_remapped_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(2);
    data::save_sequence(dir.path(), &seq).unwrap();
    let sparse = seq.masks[0].map_labels(|v| [0, 3, 7][v as usize]);
    pnm::write_pgm(&dir.path().join("annotation/00000.pgm"), &sparse).unwrap();
    let loaded = data::load_sequence(dir.path()).unwrap();
    assert_eq!(loaded.id_map, [(3, 1), (7, 2)]);
    assert_eq!(loaded.first_mask.labels(), [1, 2]);
    assert_eq!(loaded.warnings.len(), 1);
    assert_eq!(loaded.restore_ids(&loaded.first_mask), sparse);
}

#[test]
fn missing_annotation_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    data::save_sequence(dir.path(), &small_sequence(2)).unwrap();
    std::fs::remove_file(dir.path().join("annotation/00000.pgm")).unwrap();
    assert!(matches!(data::load_sequence(dir.path()), Err(Error::Input(_))));
    assert!(data::load_sequence(&dir.path().join("absent")).unwrap_err().is_input_error());
}

#[test]
fn outputs_round_trip_and_report_only() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(3);
    data::save_outputs(dir.path(), &Outputs { masks: &seq.masks, frames: Some(&seq.frames), ..Default::default() }).unwrap();
    assert_eq!(data::load_masks(&dir.path().join("masks")).unwrap(), seq.masks);
    assert_eq!(std::fs::read_dir(dir.path().join("overlays")).unwrap().count(), 3);

    let report_dir = dir.path().join("report_only");
    let report = serde_json::json!({ "jf": 1.0 });
    data::save_outputs(&report_dir, &Outputs { report: Some(&report), ..Default::default() }).unwrap();
    let names: Vec<_> = std::fs::read_dir(&report_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["metrics.json"]);
}

#[test]
fn background_overlay_is_the_frame() {
    let frame = Tensor::from_fn(&[3, 4, 5], |i| (i % 7) as f64 / 7.0);
    assert_eq!(data::overlay(&frame, &LabelMask::zeros(4, 5)).data(), frame.data());
}
