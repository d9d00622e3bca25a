use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{argmax_labels, points::sample_points, softmax_channels, Model, ObjectInput};
use crate::backbone::FRAME_ALIGN;
use crate::data::Sequence;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::mask::LabelMask;
use crate::nn::{to_rows, Ctx, ParamId};
use crate::tensor::{resize_tensor, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub iters: usize,
    /// Peak step size, decayed to `lr_floor · lr` along a half cosine.
    pub lr: f64,
    pub lr_floor: f64,
    pub clip_frames: usize,
    /// Largest index gap between consecutive clip frames.
    pub max_skip: usize,
    pub max_objects: usize,
    /// Clip positions (after the first) whose prediction is written to
    /// memory, mirroring the inference cadence.
    pub write_every: usize,
    /// Number of predicted frames with the raised matching weight.
    pub matching_frames: usize,
    pub matching_weight: f64,
    pub points: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub optimizer: Optimizer,
    /// Each clip is resized by one of these factors, so the model sees the
    /// resolutions multi-scale inference runs at.
    pub scales: Vec<f64>,
    /// Remaps colours per clip (channel permutation and a random affine map
    /// of each channel onto `[0,1]`), so object identity has to come from
    /// memory rather than from remembered colours.
    pub color_augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            lr: 0.002,
            lr_floor: 0.0,
            clip_frames: 8,
            max_skip: 3,
            max_objects: 3,
            write_every: 3,
            matching_frames: 3,
            matching_weight: 2.0,
            points: 112,
            grad_clip: 1.0,
            optimizer: Optimizer::adam(),
            scales: vec![1.0, 1.5],
            color_augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::config::parse_value;
        match key {
            "iters" => self.iters = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lr_floor" => self.lr_floor = parse_value(key, value)?,
            "clip_frames" => self.clip_frames = parse_value(key, value)?,
            "max_skip" => self.max_skip = parse_value(key, value)?,
            "max_objects" => self.max_objects = parse_value(key, value)?,
            "write_every" => self.write_every = parse_value(key, value)?,
            "matching_frames" => self.matching_frames = parse_value(key, value)?,
            "matching_weight" => self.matching_weight = parse_value(key, value)?,
            "points" => self.points = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::adam(),
                    _ => return Err(Error::Config(format!("optimizer: expected sgd or adam, got {value:?}"))),
                }
            }
            "scales" => {
                self.scales = value
                    .split(',')
                    .map(|s| parse_value::<f64>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "color_augment" => self.color_augment = crate::config::parse_bool(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown training setting {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_frames < 2 || self.max_skip == 0 || self.max_objects == 0 || self.points == 0 {
            return Err(Error::Config(
                "clip_frames must be at least 2 and max_skip, max_objects, points at least 1".into(),
            ));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("scales must be nonempty and positive, got {:?}", self.scales)));
        }
        if self.write_every == 0 {
            return Err(Error::Config("write_every must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config(format!("bad step size {} with floor {}", self.lr, self.lr_floor)));
        }
        Ok(())
    }

    /// Step size at iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let t = if self.iters <= 1 { 0.0 } else { it as f64 / (self.iters - 1) as f64 };
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * cos)
    }
}

/// A training clip: ordered frames of one sequence with masks remapped so
/// the chosen objects are `1..=K` and everything else is background.
#[derive(Clone, Debug)]
pub struct Clip {
    /// Frame indices in the source sequence.
    pub indices: Vec<usize>,
    pub frames: Vec<Tensor>,
    pub masks: Vec<LabelMask>,
    /// Source ids of the chosen objects; object `k+1` in `masks` is
    /// `source_ids[k]`.
    pub source_ids: Vec<u8>,
    /// Loss weight per clip frame; the first frame is given, so 0.
    pub weights: Vec<f64>,
    /// Clip positions written to memory after prediction.
    pub write_at: Vec<usize>,
    /// Resize factor applied to frames and masks.
    pub scale: f64,
}

impl Clip {
    pub fn num_objects(&self) -> usize {
        self.source_ids.len()
    }
}

/// Sorted clip frame indices with gaps in `1..=max_skip`, shortened when the
/// sequence is too short.
fn clip_indices(t: usize, len: usize, max_skip: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = len.min(t);
    let mut gaps: Vec<usize> = (1..len).map(|_| rng.gen_range(1..=max_skip)).collect();
    while gaps.iter().sum::<usize>() > t - 1 {
        let big: Vec<usize> = (0..gaps.len()).filter(|&i| gaps[i] > 1).collect();
        gaps[*big.choose(rng).expect("len <= t leaves a reducible gap")] -= 1;
    }
    let span: usize = gaps.iter().sum();
    let mut idx = vec![rng.gen_range(0..=t - 1 - span)];
    for g in gaps {
        idx.push(idx.last().unwrap() + g);
    }
    idx
}

/// Samples a clip whose first frame shows at least one object, keeping at
/// most `max_objects` of the objects visible there.
pub fn build_clip(seq: &Sequence, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Clip> {
    let t = seq.frames.len();
    if t < 2 || seq.masks.len() != t {
        return Err(contract_err!("training needs at least 2 frames with masks, got {t} frames, {} masks", seq.masks.len()));
    }
    let mut indices = Vec::new();
    for attempt in 0..20 {
        indices = clip_indices(t, cfg.clip_frames, cfg.max_skip, rng);
        if seq.masks[indices[0]].foreground_area() > 0 {
            break;
        }
        if attempt == 19 {
            indices[0] = 0;
            if seq.masks[0].foreground_area() == 0 {
                return Err(contract_err!("no object is visible in the sequence's first frame"));
            }
            indices.sort_unstable();
            indices.dedup();
        }
    }
    let present = seq.masks[indices[0]].labels();
    let keep = cfg.max_objects.min(present.len());
    let mut chosen: Vec<u8> = index::sample(rng, present.len(), keep).into_iter().map(|i| present[i]).collect();
    chosen.sort_unstable();
    let remap = |v: u8| chosen.iter().position(|&c| c == v).map_or(0, |k| k as u8 + 1);
    let scale = *cfg.scales.choose(rng).ok_or_else(|| Error::Config("no training scales".into()))?;
    let (h, w) = (seq.masks[0].height(), seq.masks[0].width());
    let (sh, sw) = (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1));
    let mut masks: Vec<LabelMask> = indices.iter().map(|&i| seq.masks[i].map_labels(remap)).collect();
    let mut frames: Vec<Tensor> = indices.iter().map(|&i| seq.frames[i].clone()).collect();
    if (sh, sw) != (h, w) {
        masks = masks.iter().map(|m| m.resize_nearest(sh, sw)).collect();
        frames = frames.iter().map(|f| resize_tensor(f, sh, sw)).collect::<Result<_>>()?;
        if masks[0].foreground_area() == 0 {
            return Err(contract_err!("clip objects vanish at scale {scale}"));
        }
    }

    if cfg.color_augment {
        let remap = ColorMap::sample(rng);
        frames = frames.iter().map(|f| remap.apply(f)).collect::<Result<_>>()?;
    }

    let n = indices.len();
    let mut weights = vec![0.0; n];
    weights[1..].iter_mut().for_each(|w| *w = 1.0);
    let m = cfg.matching_frames.min(n - 1);
    for k in index::sample(rng, n - 1, m) {
        weights[k + 1] = cfg.matching_weight;
    }
    let write_at = (1..n - 1).filter(|i| i % cfg.write_every == 0).collect();
    Ok(Clip { indices, frames, masks, source_ids: chosen, weights, write_at, scale })
}

/// Per-clip colour remapping: output channel `c` is `gain[c] * x[perm[c]]
/// + offset[c]`, with `|gain|` in `[0.6, 1]` so contrast survives, and the
/// offset chosen so `[0,1]` maps into `[0,1]`.
struct ColorMap {
    perm: [usize; 3],
    gain: [f64; 3],
    offset: [f64; 3],
}

impl ColorMap {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut perm = [0, 1, 2];
        perm.shuffle(rng);
        let mut gain = [0.0; 3];
        let mut offset = [0.0; 3];
        for c in 0..3 {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let a: f64 = sign * rng.gen_range(0.6..=1.0);
            gain[c] = a;
            offset[c] = rng.gen_range((-a).max(0.0)..=(1.0 - a).min(1.0));
        }
        ColorMap { perm, gain, offset }
    }

    fn apply(&self, frame: &Tensor) -> Result<Tensor> {
        let s = frame.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err!("colour remap needs [3,h,w], got {s:?}"));
        }
        let hw = s[1] * s[2];
        let d = frame.data();
        Ok(Tensor::from_fn(s, |i| {
            let c = i / hw;
            (self.gain[c] * d[self.perm[c] * hw + i % hw] + self.offset[c]).clamp(0.0, 1.0)
        }))
    }
}

/// Where the loss is evaluated on each clip frame.
#[derive(Clone, Debug)]
pub enum Points {
    /// Uncertainty-weighted sampling from the frame's own prediction.
    Sample { n: usize, seed: u64 },
    /// Flat pixel indices per clip frame; frames without an entry are not
    /// scored.
    Fixed(Vec<Vec<usize>>),
}

/// Memory of a clip kept on the tape: key rows `[N,C_k]` and value rows
/// per object.
struct TapeMemory {
    keys: Var,
    values: Vec<Var>,
}

impl TapeMemory {
    fn append(&mut self, ctx: &mut Ctx, key: Var, values: &[Var]) -> Result<()> {
        let k = to_rows(ctx, key)?;
        self.keys = ctx.concat(&[self.keys, k])?;
        for (store, &v) in self.values.iter_mut().zip(values) {
            let v = to_rows(ctx, v)?;
            *store = ctx.concat(&[*store, v])?;
        }
        Ok(())
    }
}

fn encode_values(model: &Model, ctx: &mut Ctx, f16: Var, mask: &LabelMask, k: usize) -> Result<Vec<Var>> {
    let (h16, w16) = (ctx.shape(f16)[1], ctx.shape(f16)[2]);
    let padded = mask.pad_reflect(h16 * FRAME_ALIGN, w16 * FRAME_ALIGN);
    (1..=k as u8)
        .map(|id| {
            let plane = ctx.constant(padded.downsample_any(id, FRAME_ALIGN));
            model.memory.encode_value(ctx, f16, plane)
        })
        .collect()
}

/// Weighted mean point cross-entropy over a clip. Frame 0's ground truth
/// seeds memory and queries; every later frame is read from memory and
/// decoded; at `write_at` positions the frame's own argmax prediction is
/// written and the queries are updated, as at inference.
#[allow(clippy::too_many_arguments)]
pub fn clip_loss(
    model: &Model,
    ctx: &mut Ctx,
    frames: &[Var],
    masks: &[LabelMask],
    num_objects: usize,
    weights: &[f64],
    write_at: &[usize],
    points: &Points,
) -> Result<Var> {
    let n = frames.len();
    if n < 2 || masks.len() != n || weights.len() != n {
        return Err(shape_err!("clip of {n} frames with {} masks and {} weights", masks.len(), weights.len()));
    }
    if num_objects == 0 {
        return Err(contract_err!("a training clip needs at least one object"));
    }
    let ff0 = model.frame_features(ctx, frames[0])?;
    let values0 = encode_values(model, ctx, ff0.scales[2], &masks[0], num_objects)?;
    let mut mem = TapeMemory { keys: to_rows(ctx, ff0.key)?, values: Vec::new() };
    for v in values0 {
        mem.values.push(to_rows(ctx, v)?);
    }
    let padded0 = masks[0].pad_reflect(ff0.padded.0, ff0.padded.1);
    let mut queries = Vec::with_capacity(num_objects);
    let mut appearance = Vec::with_capacity(num_objects);
    for id in 1..=num_objects as u8 {
        queries.push(model.query.init_query(ctx, ff0.scales[2], &padded0, id)?.0);
        appearance.push(model.decoder.appearance(ctx, ff0.fine, &padded0, id)?);
    }

    let total: f64 = weights[1..].iter().sum();
    if total <= 0.0 {
        return Err(contract_err!("clip loss weights sum to {total}"));
    }
    let mut loss: Option<Var> = None;
    for t in 1..n {
        let ff = model.frame_features(ctx, frames[t])?;
        let mut objects = Vec::with_capacity(num_objects);
        for k in 0..num_objects {
            let read = model.memory.read(ctx, ff.key, mem.keys, mem.values[k], ff.scales[2])?;
            objects.push(ObjectInput { correlated: read.correlated, query: queries[k], appearance: appearance[k] });
        }
        let logits = model.cropped_logits(ctx, &ff, &objects)?;
        let (h, w) = ff.hw;
        let picked = match points {
            Points::Sample { n, seed } => {
                let probs = softmax_channels(ctx.value(logits));
                Some(sample_points(&probs, *n, seed.wrapping_add(t as u64))?)
            }
            Points::Fixed(p) => p.get(t).cloned(),
        };
        if let Some(picked) = picked.filter(|p| !p.is_empty() && weights[t] > 0.0) {
            if let Some(&bad) = picked.iter().find(|&&p| p >= h * w) {
                return Err(shape_err!("point {bad} outside a {h}x{w} frame"));
            }
            let targets: Vec<usize> = picked.iter().map(|&p| masks[t].data()[p] as usize).collect();
            if let Some(&bad) = targets.iter().find(|&&c| c > num_objects) {
                return Err(contract_err!("label {bad} in a clip with {num_objects} objects"));
            }
            let rows = ctx.reshape(logits, &[num_objects + 1, h * w])?;
            let rows = ctx.transpose(rows)?;
            let rows = ctx.select_rows(rows, &picked)?;
            let ce = ctx.cross_entropy(rows, &targets)?;
            let term = ctx.scale(ce, weights[t] / total);
            loss = Some(match loss {
                None => term,
                Some(l) => ctx.add(l, term)?,
            });
        }
        if write_at.contains(&t) {
            let ids: Vec<u8> = (1..=num_objects as u8).collect();
            let pred = argmax_labels(&softmax_channels(ctx.value(logits)), &ids);
            if pred.foreground_area() > 0 {
                let values = encode_values(model, ctx, ff.scales[2], &pred, num_objects)?;
                mem.append(ctx, ff.key, &values)?;
                for (k, q) in queries.iter_mut().enumerate() {
                    *q = model.query.discriminative_update(ctx, *q, objects[k].correlated, model.cfg.salient_k)?.0;
                }
            }
        }
    }
    loss.ok_or_else(|| contract_err!("no clip frame was scored"))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Objects used per iteration.
    pub objects: Vec<usize>,
}

struct OptState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn apply_update(model: &mut Model, grads: &[(ParamId, Tensor)], lr: f64, cfg: &TrainConfig, st: &mut OptState) -> Result<()> {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(contract_err!("non-finite gradient norm"));
    }
    let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    st.step += 1;
    for (id, g) in grads {
        let p = model.params.get(*id);
        let i = id.index();
        let data: Vec<f64> = match cfg.optimizer {
            Optimizer::Sgd => p.data().iter().zip(g.data()).map(|(w, g)| w - lr * scale * g).collect(),
            Optimizer::Adam { beta1, beta2, eps } => {
                let (m, v) = (&mut st.m[i], &mut st.v[i]);
                if m.is_empty() {
                    *m = vec![0.0; p.numel()];
                    *v = vec![0.0; p.numel()];
                }
                let (c1, c2) = (1.0 - beta1.powi(st.step as i32), 1.0 - beta2.powi(st.step as i32));
                p.data()
                    .iter()
                    .zip(g.data())
                    .enumerate()
                    .map(|(j, (w, g))| {
                        let g = g * scale;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        w - lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps)
                    })
                    .collect()
            }
        };
        let shape = p.shape().to_vec();
        model.params.set(*id, Tensor::new(&shape, data)?)?;
    }
    Ok(())
}

/// Point-supervised training on clips drawn from `data`.
pub fn train_toy(model: &mut Model, data: &[Sequence], cfg: &TrainConfig) -> Result<TrainReport> {
    train_toy_with(model, data, cfg, |_, _| {})
}

/// [`train_toy`] with a callback receiving `(iteration, loss)`.
pub fn train_toy_with(
    model: &mut Model,
    data: &[Sequence],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(contract_err!("training dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_params = model.params.len();
    let mut st = OptState { step: 0, m: vec![Vec::new(); n_params], v: vec![Vec::new(); n_params] };
    let mut report = TrainReport { losses: Vec::new(), lrs: Vec::new(), objects: Vec::new() };
    for it in 0..cfg.iters {
        let seq = &data[rng.gen_range(0..data.len())];
        let clip = build_clip(seq, cfg, &mut rng)?;
        let point_seed: u64 = rng.gen();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let frames: Vec<Var> = clip.frames.iter().map(|f| ctx.constant(f.clone())).collect();
        let points = Points::Sample { n: cfg.points, seed: point_seed };
        let loss = clip_loss(model, &mut ctx, &frames, &clip.masks, clip.num_objects(), &clip.weights, &clip.write_at, &points)?;
        let value = ctx.value(loss).item();
        let grads = ctx.tape.backward(loss)?;
        let grads = ctx.param_grads(&grads);
        drop(ctx);
        let lr = cfg.lr_at(it);
        apply_update(model, &grads, lr, cfg, &mut st)?;
        report.losses.push(value);
        report.lrs.push(lr);
        report.objects.push(clip.num_objects());
        progress(it, value);
    }
    Ok(report)
}
