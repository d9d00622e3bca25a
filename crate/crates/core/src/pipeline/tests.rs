use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::EngineConfig;
use crate::data::{synth_generate, SyntheticSpec};
use crate::error::Error;
use crate::nn::Ctx;
use crate::tensor::{fd_gradcheck, Tape};

fn tiny_model(seed: u64) -> Model {
    crate::gradcheck::perturbed_tiny_model(seed)
}

fn sequence(objects: usize, frames: usize, size: usize, seed: u64) -> crate::data::Sequence {
    let spec = SyntheticSpec { num_objects: objects, frame_count: frames, height: size, width: size, seed, ..Default::default() };
    synth_generate(&spec).unwrap()
}

fn single_branch() -> EngineConfig {
    EngineConfig { scales: vec![1.0], ..Default::default() }
}

#[test]
fn saturated_logits_label_everything() {
    let mut logits = Tensor::zeros(&[2, 4, 5]).into_vec();
    logits[20..].iter_mut().for_each(|v| *v = f64::INFINITY);
    let r = SegResult::from_logits(&Tensor::new(&[2, 4, 5], logits).unwrap(), &[7], 3).unwrap();
    assert!(r.labels.data().iter().all(|&l| l == 7));
    assert!(r.probs.data()[20..].iter().all(|&p| p == 1.0));
    assert!(SegResult::from_logits(&Tensor::zeros(&[3, 2, 2]), &[1], 0).is_err());
}

#[test]
fn emitted_probabilities_are_normalized() {
    let model = tiny_model(1);
    let seq = sequence(2, 5, 32, 3);
    let cfg = EngineConfig { scales: vec![1.0, 1.5], flip_fusion: true, ..Default::default() };
    let out = infer_sequence(&model, &seq.frames, &seq.masks[0], &cfg).unwrap();
    assert_eq!(out.results.len(), 5);
    for r in &out.results {
        let s = r.probs.shape();
        let hw = s[1] * s[2];
        for p in 0..hw {
            let z: f64 = (0..s[0]).map(|c| r.probs.data()[c * hw + p]).sum();
            assert!((z - 1.0).abs() < 1e-6);
        }
        assert!(r.labels.labels().iter().all(|l| r.object_ids.contains(l)));
    }
    assert_eq!(out.results[0].labels, seq.masks[0]);
}

#[test]
fn decode_point_loss_gradcheck() {
    let model = tiny_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frame = Tensor::from_fn(&[3, 32, 32], |_| rng.gen_range(0.0..1.0));
    let c = model.cfg.corr_dim;
    let r0 = Tensor::from_fn(&[c, 2, 2], |_| rng.gen_range(-1.0..1.0));
    let q = Tensor::from_fn(&[c], |_| rng.gen_range(-1.0..1.0));
    let blob = LabelMask::new(32, 32, (0..1024).map(|p| (p / 32 > 10 && p % 32 < 14) as u8).collect()).unwrap();
    let points: Vec<usize> = (0..40).map(|_| rng.gen_range(0..1024)).collect();
    let targets: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2)).collect();
    let f = |tape: &mut Tape, r: Var| -> crate::Result<Var> {
        let mut ctx = Ctx::new(tape, &model.params);
        let x = ctx.constant(frame.clone());
        let ff = model.frame_features(&mut ctx, x)?;
        let qv = ctx.constant(q.clone());
        let appearance = model.decoder.appearance(&mut ctx, ff.fine, &blob, 1)?;
        let obj = ObjectInput { correlated: r, query: qv, appearance };
        let logits = model.cropped_logits(&mut ctx, &ff, &[obj])?;
        let rows = ctx.reshape(logits, &[2, 1024])?;
        let rows = ctx.transpose(rows)?;
        let rows = ctx.select_rows(rows, &points)?;
        ctx.cross_entropy(rows, &targets)
    };
    let err = fd_gradcheck(f, &r0, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn full_model_gradcheck_on_32x32_clip() {
    let model = tiny_model(5);
    let seq = sequence(2, 2, 32, 6);
    let x0 = Tensor::from_fn(&[6, 32, 32], |i| seq.frames[i / 3072].data()[i % 3072]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fixed = Points::Fixed(vec![Vec::new(), (0..30).map(|_| rng.gen_range(0..1024)).collect()]);
    let f = |tape: &mut Tape, x: Var| -> crate::Result<Var> {
        let mut ctx = Ctx::new(tape, &model.params);
        let f0 = ctx.gather(x, (0..3072).collect(), &[3, 32, 32])?;
        let f1 = ctx.gather(x, (3072..6144).collect(), &[3, 32, 32])?;
        clip_loss(&model, &mut ctx, &[f0, f1], &seq.masks, 2, &[0.0, 1.0], &[], &fixed)
    };
    let err = fd_gradcheck(f, &x0, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn write_flags_follow_the_cadence() {
    let mut model = Model::new(ModelConfig::tiny(), 8);
    // Objects outscore the background everywhere, so predictions are never empty.
    let bg = model.params.find("dec.background").unwrap();
    model.params.set(bg, Tensor::new(&[1], vec![-5.0]).unwrap()).unwrap();
    let seq = sequence(1, 7, 32, 9);
    let cfg = single_branch();
    let (mut tracker, first) = Tracker::start(&model, &seq.frames[0], &seq.masks[0], &cfg).unwrap();
    assert!(!first.skipped_write);
    let flags: Vec<bool> = (1..7).map(|t| tracker.step(&seq.frames[t], t).unwrap().skipped_write).collect();
    assert_eq!(flags, [true, true, false, true, true, false]);
    assert_eq!(tracker.branches[0].bank.write_log(), [0, 3, 6]);
    assert_eq!(tracker.branches[0].query_log.len(), 2);
}

#[test]
fn empty_predictions_are_not_written() {
    // Zero-initialized heads give all-zero logits; ties go to background.
    let model = Model::new(ModelConfig::tiny(), 10);
    let seq = sequence(1, 4, 32, 11);
    let out = infer_sequence(&model, &seq.frames, &seq.masks[0], &single_branch()).unwrap();
    assert!(out.results[3].labels.foreground_area() == 0 && out.results[3].skipped_write);
    assert!(out.log.lines().all(|l| !l.contains("\"frame_idx\":3") || l.contains("skip")));
}

#[test]
fn single_scale_fusion_is_the_plain_step() {
    let model = tiny_model(12);
    let seq = sequence(2, 6, 32, 13);
    let cfg = single_branch();
    let fused = infer_sequence(&model, &seq.frames, &seq.masks[0], &cfg).unwrap();
    let mut branch = BranchState::start(&model, &seq.frames[0], &seq.masks[0], 1.0, false, &cfg).unwrap();
    for t in 1..6 {
        let plain = branch.step(&model, &seq.frames[t], t).unwrap();
        assert_eq!(plain.probs.data(), fused.results[t].probs.data());
        assert_eq!(plain.labels, fused.results[t].labels);
        assert_eq!(plain.skipped_write, fused.results[t].skipped_write);
    }
}

#[test]
fn duplicated_scale_fusion_matches_within_rounding() {
    let model = tiny_model(14);
    let seq = sequence(2, 6, 32, 15);
    let one = infer_sequence(&model, &seq.frames, &seq.masks[0], &single_branch()).unwrap();
    let cfg = EngineConfig { scales: vec![1.0, 1.0], ..Default::default() };
    let two = infer_sequence(&model, &seq.frames, &seq.masks[0], &cfg).unwrap();
    for (a, b) in one.results.iter().zip(&two.results) {
        assert!(a.probs.max_abs_diff(&b.probs) <= 1e-12);
    }
}

fn symmetrize(t: &Tensor) -> Tensor {
    let w = t.shape()[2];
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let x = i % w;
        0.5 * (d[i] + d[i - x + (w - 1 - x)])
    })
}

#[test]
fn flip_fusion_on_a_mirror_symmetric_sequence_is_symmetric() {
    let model = tiny_model(16);
    let seq = sequence(1, 5, 32, 17);
    let frames: Vec<Tensor> = seq.frames.iter().map(symmetrize).collect();
    let mut mask = LabelMask::zeros(32, 32);
    for y in 10..20 {
        for x in 8..24 {
            mask.set(y, x, 1);
        }
    }
    let cfg = EngineConfig { scales: vec![1.0, 1.5], flip_fusion: true, ..Default::default() };
    let out = infer_sequence(&model, &frames, &mask, &cfg).unwrap();
    for r in &out.results[1..] {
        let s = r.probs.shape();
        let d = r.probs.data();
        for i in 0..d.len() {
            let x = i % s[2];
            assert!((d[i] - d[i - x + (s[2] - 1 - x)]).abs() < 1e-8);
        }
    }
}

#[test]
fn inference_is_deterministic() {
    let model = tiny_model(18);
    let seq = sequence(2, 5, 32, 19);
    let cfg = EngineConfig::default();
    let a = infer_sequence(&model, &seq.frames, &seq.masks[0], &cfg).unwrap();
    let b = infer_sequence(&model, &seq.frames, &seq.masks[0], &cfg).unwrap();
    for (x, y) in a.results.iter().zip(&b.results) {
        assert_eq!(x.probs.data(), y.probs.data());
    }
    assert_eq!(a.log, b.log);
}

#[test]
fn sequence_edge_cases() {
    let model = tiny_model(20);
    let seq = sequence(1, 3, 32, 21);
    let cfg = single_branch();
    let one = infer_sequence(&model, &seq.frames[..1], &seq.masks[0], &cfg).unwrap();
    assert_eq!(one.results.len(), 1);
    assert_eq!(one.results[0].labels, seq.masks[0]);
    let empty = LabelMask::zeros(32, 32);
    assert!(matches!(infer_sequence(&model, &seq.frames, &empty, &cfg), Err(Error::Contract(_))));
    let (mut tracker, _) = Tracker::start(&model, &seq.frames[0], &seq.masks[0], &cfg).unwrap();
    let odd = Tensor::zeros(&[3, 32, 48]);
    assert!(matches!(tracker.step(&odd, 1), Err(Error::Shape(_))));
}

#[test]
fn sampler_returns_distinct_points_on_uniform_maps() {
    let probs = Tensor::full(&[3, 8, 8], 1.0 / 3.0);
    let pts = sample_points(&probs, 20, 0).unwrap();
    let mut sorted = pts.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 20);
    assert_eq!(sample_points(&probs, 20, 0).unwrap(), pts);
    assert_eq!(sample_points(&probs, 1000, 1).unwrap().len(), 64);
}

#[test]
fn sampler_always_takes_the_most_uncertain_pixel() {
    let (h, w) = (10, 10);
    let mut d = vec![0.0; 2 * h * w];
    for p in 0..h * w {
        d[p] = 0.95;
        d[h * w + p] = 0.05;
    }
    let hot = 37;
    d[hot] = 0.5;
    d[h * w + hot] = 0.5;
    let probs = Tensor::new(&[2, h, w], d).unwrap();
    let n = 8;
    let n_imp = (0.75 * n as f64).round() as usize;
    for seed in 0..100 {
        let pts = sample_points(&probs, n, seed).unwrap();
        assert_eq!(pts.len(), n);
        assert!(pts[..n_imp].contains(&hot));
    }
}

#[test]
fn initial_loss_is_log_of_class_count() {
    let mut model = Model::new(ModelConfig::tiny(), 22);
    let seq = sequence(3, 10, 32, 23);
    let cfg = TrainConfig { iters: 1, ..Default::default() };
    let report = train_toy(&mut model, &[seq], &cfg).unwrap();
    let k = report.objects[0] as f64;
    assert!((report.losses[0] - (k + 1.0).ln()).abs() < 1e-9, "{report:?}");
}

#[test]
fn at_most_three_targets_are_trained() {
    let seq = sequence(5, 12, 32, 24);
    assert_eq!(seq.masks[0].labels().len(), 5);
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let clip = build_clip(&seq, &cfg, &mut rng).unwrap();
        let present = seq.masks[clip.indices[0]].labels().len();
        assert_eq!(clip.num_objects(), present.min(3));
        assert!(clip.masks.iter().all(|m| m.labels().iter().all(|&l| (1..=3).contains(&l))));
        assert_eq!(clip.indices.len(), 8);
        assert!(clip.indices.windows(2).all(|g| (1..=3).contains(&(g[1] - g[0]))));
        assert_eq!(clip.weights.iter().filter(|&&w| w == 2.0).count(), 3);
        assert_eq!(clip.write_at, [3, 6]);
    }
    let mut model = Model::new(ModelConfig::tiny(), 25);
    let report = train_toy(&mut model, &[seq], &TrainConfig { iters: 2, ..cfg }).unwrap();
    assert!(report.objects.iter().all(|&k| k == 3));
}

#[test]
fn clips_are_rescaled_and_recoloured_consistently() {
    let seq = sequence(2, 10, 32, 28);
    let cfg = TrainConfig { scales: vec![1.5], ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clip = build_clip(&seq, &cfg, &mut rng).unwrap();
    assert_eq!(clip.scale, 1.5);
    for (f, m) in clip.frames.iter().zip(&clip.masks) {
        assert_eq!(f.shape(), [3, 48, 48]);
        assert_eq!(m.hw(), (48, 48));
        assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    // The remap is one affine map per channel: pixels equal before are equal
    // after, and the clip differs from the plain one.
    let plain_cfg = TrainConfig { scales: vec![1.0], color_augment: false, ..Default::default() };
    let recol_cfg = TrainConfig { scales: vec![1.0], color_augment: true, ..Default::default() };
    let plain = build_clip(&seq, &plain_cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let recol = build_clip(&seq, &recol_cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(plain.indices, recol.indices);
    assert_eq!(plain.masks, recol.masks);
    let (a, b) = (plain.frames[0].data(), recol.frames[0].data());
    assert!(plain.frames[0].max_abs_diff(&recol.frames[0]) > 1e-3);
    let hw = 32 * 32;
    for p in 1..hw {
        let same = (0..3).all(|c| a[c * hw + p] == a[c * hw]);
        if same {
            assert!((0..3).all(|c| b[c * hw + p] == b[c * hw]));
        }
    }
}

#[test]
fn training_rejects_an_empty_dataset() {
    let mut model = Model::new(ModelConfig::tiny(), 26);
    assert!(matches!(train_toy(&mut model, &[], &TrainConfig::default()), Err(Error::Contract(_))));
}

#[test]
fn checkpoints_round_trip() {
    let model = tiny_model(27);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ck");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.cfg, model.cfg);
    for id in model.params.ids() {
        assert_eq!(back.params.get(id).data(), model.params.get(id).data());
    }
}
