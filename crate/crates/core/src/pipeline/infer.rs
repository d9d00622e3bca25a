use serde_json::json;

use super::{softmax_channels, Model, ObjectInput, SegResult};
use crate::backbone::FRAME_ALIGN;
use crate::config::EngineConfig;
use crate::error::{contract_err, shape_err, Result};
use crate::mask::LabelMask;
use crate::memory::{should_write, MemoryBank};
use crate::nn::Ctx;
use crate::query::QueryRecord;
use crate::tensor::{resize_tensor, Tape, Tensor};

/// Memory and queries of one fusion branch (one input scale, optionally
/// mirrored).
#[derive(Clone, Debug)]
pub struct BranchState {
    pub scale: f64,
    pub flip: bool,
    hw: (usize, usize),
    branch_hw: (usize, usize),
    object_ids: Vec<u8>,
    interval: usize,
    pub bank: MemoryBank,
    pub queries: Vec<Tensor>,
    /// Appearance prototypes from the annotated frame, per object.
    appearance: Vec<Tensor>,
    /// Objects whose query fell back to the global mean at initialization.
    pub fallback: Vec<bool>,
    pub query_log: Vec<QueryRecord>,
    pending: Option<Pending>,
}

/// Values from the last prediction that a following write reuses.
#[derive(Clone, Debug)]
struct Pending {
    frame_idx: usize,
    key: Tensor,
    f16: Tensor,
    correlated: Vec<Tensor>,
}

fn flip_tensor(x: &Tensor) -> Tensor {
    let s = x.shape();
    let w = s[s.len() - 1];
    let d = x.data();
    Tensor::from_fn(s, |i| {
        let col = i % w;
        d[i - col + (w - 1 - col)]
    })
}

fn scaled_extent(v: usize, scale: f64) -> usize {
    ((v as f64 * scale).round() as usize).max(1)
}

impl BranchState {
    /// Runs the annotated frame through the branch: memory holds frame 0 and
    /// each object gets its initial query.
    pub fn start(
        model: &Model,
        frame0: &Tensor,
        mask0: &LabelMask,
        scale: f64,
        flip: bool,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let object_ids = mask0.labels();
        if object_ids.is_empty() {
            return Err(contract_err!("the first-frame annotation has no objects"));
        }
        let hw = (frame0.shape()[1], frame0.shape()[2]);
        if mask0.hw() != hw {
            return Err(shape_err!("annotation {:?} for frame {hw:?}", mask0.hw()));
        }
        let branch_hw = (scaled_extent(hw.0, scale), scaled_extent(hw.1, scale));
        let cells = branch_hw.0.div_ceil(FRAME_ALIGN) * branch_hw.1.div_ceil(FRAME_ALIGN);
        let mut state = BranchState {
            scale,
            flip,
            hw,
            branch_hw,
            interval: cfg.mem_interval,
            bank: MemoryBank::new(model.cfg.key_dim, model.cfg.value_dim, object_ids.len(), cfg.mem_cap * cells),
            queries: Vec::new(),
            appearance: Vec::new(),
            fallback: Vec::new(),
            query_log: Vec::new(),
            object_ids,
            pending: None,
        };
        let input = state.branch_input(frame0)?;
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let x = ctx.constant(input);
        let ff = model.frame_features(&mut ctx, x)?;
        let mask = state.branch_mask(mask0).pad_reflect(ff.padded.0, ff.padded.1);
        for &id in &state.object_ids {
            let (q, fb) = model.query.init_query(&mut ctx, ff.scales[2], &mask, id)?;
            state.queries.push(ctx.value(q).clone());
            let a = model.decoder.appearance(&mut ctx, ff.fine, &mask, id)?;
            state.appearance.push(ctx.value(a).clone());
            state.fallback.push(fb);
        }
        state.pending = Some(Pending {
            frame_idx: 0,
            key: ctx.value(ff.key).clone(),
            f16: ctx.value(ff.scales[2]).clone(),
            correlated: Vec::new(),
        });
        drop(ctx);
        state.write(model, mask0, 0, false)?;
        Ok(state)
    }

    pub fn object_ids(&self) -> &[u8] {
        &self.object_ids
    }

    fn branch_input(&self, frame: &Tensor) -> Result<Tensor> {
        let s = frame.shape();
        if s.len() != 3 || s[0] != 3 || (s[1], s[2]) != self.hw {
            return Err(shape_err!("frame {s:?} differs from the first frame's 3x{}x{}", self.hw.0, self.hw.1));
        }
        let resized = if self.branch_hw == self.hw {
            frame.clone()
        } else {
            resize_tensor(frame, self.branch_hw.0, self.branch_hw.1)?
        };
        Ok(if self.flip { flip_tensor(&resized) } else { resized })
    }

    fn branch_mask(&self, mask: &LabelMask) -> LabelMask {
        let m = if self.flip { mask.flip_horizontal() } else { mask.clone() };
        m.resize_nearest(self.branch_hw.0, self.branch_hw.1)
    }

    /// Probabilities `[K+1,h,w]` at the original frame resolution. Reading
    /// memory updates its usage counters.
    pub fn predict(&mut self, model: &Model, frame: &Tensor, frame_idx: usize) -> Result<Tensor> {
        let input = self.branch_input(frame)?;
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let x = ctx.constant(input);
        let ff = model.frame_features(&mut ctx, x)?;
        let keys = ctx.constant(self.bank.keys()?);
        let mut objects = Vec::with_capacity(self.object_ids.len());
        let mut affinity = None;
        for (k, q) in self.queries.iter().enumerate() {
            let values = ctx.constant(self.bank.values(k)?);
            let read = model.memory.read(&mut ctx, ff.key, keys, values, ff.scales[2])?;
            affinity.get_or_insert(read.affinity);
            let query = ctx.constant(q.clone());
            let appearance = ctx.constant(self.appearance[k].clone());
            objects.push(ObjectInput { correlated: read.correlated, query, appearance });
        }
        let logits = model.cropped_logits(&mut ctx, &ff, &objects)?;
        let probs = softmax_channels(ctx.value(logits));
        if let Some(a) = affinity {
            self.bank.record_read(ctx.value(a))?;
        }
        self.pending = Some(Pending {
            frame_idx,
            key: ctx.value(ff.key).clone(),
            f16: ctx.value(ff.scales[2]).clone(),
            correlated: objects.iter().map(|o| ctx.value(o.correlated).clone()).collect(),
        });
        let probs = if self.flip { flip_tensor(&probs) } else { probs };
        Ok(if self.branch_hw == self.hw { probs } else { resize_tensor(&probs, self.hw.0, self.hw.1)? })
    }

    /// Applies the write gate to the final labels of the last predicted
    /// frame; on a write, stores the frame and updates the queries.
    pub fn commit(&mut self, model: &Model, labels: &LabelMask, frame_idx: usize) -> Result<bool> {
        if !should_write(frame_idx, self.interval, labels) {
            self.bank.log_skip(frame_idx);
            return Ok(false);
        }
        self.write(model, labels, frame_idx, true)?;
        Ok(true)
    }

    fn write(&mut self, model: &Model, labels: &LabelMask, frame_idx: usize, update_queries: bool) -> Result<()> {
        let pending = self
            .pending
            .take()
            .filter(|p| p.frame_idx == frame_idx)
            .ok_or_else(|| contract_err!("write for frame {frame_idx} without a prediction for it"))?;
        let (h16, w16) = (pending.f16.shape()[1], pending.f16.shape()[2]);
        let mask = self.branch_mask(labels).pad_reflect(h16 * FRAME_ALIGN, w16 * FRAME_ALIGN);
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &model.params);
        let f16 = ctx.constant(pending.f16.clone());
        let mut values = Vec::with_capacity(self.object_ids.len());
        for &id in &self.object_ids {
            let plane = ctx.constant(mask.downsample_any(id, FRAME_ALIGN));
            let v = model.memory.encode_value(&mut ctx, f16, plane)?;
            values.push(ctx.value(v).clone());
        }
        self.bank.write(&pending.key, &values, frame_idx)?;
        if update_queries {
            for (k, r) in pending.correlated.iter().enumerate() {
                let q = ctx.constant(self.queries[k].clone());
                let rv = ctx.constant(r.clone());
                let (q2, c_star, cosine) = model.query.discriminative_update(&mut ctx, q, rv, model.cfg.salient_k)?;
                self.queries[k] = ctx.value(q2).clone();
                self.query_log.push(QueryRecord { frame_idx, object_id: self.object_ids[k], c_star, cosine });
            }
        }
        Ok(())
    }

    /// Predicts one frame and commits this branch's own prediction.
    pub fn step(&mut self, model: &Model, frame: &Tensor, frame_idx: usize) -> Result<SegResult> {
        let probs = self.predict(model, frame, frame_idx)?;
        let mut result = SegResult::from_probs(probs, &self.object_ids, frame_idx)?;
        result.skipped_write = !self.commit(model, &result.labels, frame_idx)?;
        Ok(result)
    }
}

/// Sequence-level inference state: one branch per (scale, flip) pair.
pub struct Tracker<'m> {
    model: &'m Model,
    pub branches: Vec<BranchState>,
    object_ids: Vec<u8>,
    last_frame: usize,
}

impl<'m> Tracker<'m> {
    /// Starts every branch on the annotated frame and returns the frame-0
    /// result, which is the annotation itself.
    pub fn start(model: &'m Model, frame0: &Tensor, mask0: &LabelMask, cfg: &EngineConfig) -> Result<(Self, SegResult)> {
        let flips: &[bool] = if cfg.flip_fusion { &[false, true] } else { &[false] };
        let mut branches = Vec::new();
        for &scale in &cfg.scales {
            for &flip in flips {
                branches.push(BranchState::start(model, frame0, mask0, scale, flip, cfg)?);
            }
        }
        let object_ids = mask0.labels();
        let first = SegResult::from_annotation(mask0, &object_ids);
        Ok((Tracker { model, branches, object_ids, last_frame: 0 }, first))
    }

    /// Fuses all branches' probabilities for one frame by their mean,
    /// renormalized when there is more than one branch, then lets every
    /// branch commit the fused labels.
    pub fn step(&mut self, frame: &Tensor, frame_idx: usize) -> Result<SegResult> {
        if frame_idx <= self.last_frame {
            return Err(contract_err!("frame {frame_idx} does not follow frame {}", self.last_frame));
        }
        let mut sum: Option<Vec<f64>> = None;
        let mut shape = Vec::new();
        for b in &mut self.branches {
            let p = b.predict(self.model, frame, frame_idx)?;
            shape = p.shape().to_vec();
            match &mut sum {
                None => sum = Some(p.into_vec()),
                Some(acc) => acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v),
            }
        }
        let mut data = sum.expect("at least one branch");
        let n = self.branches.len();
        if n > 1 {
            let (k, hw) = (shape[0], shape[1] * shape[2]);
            data.iter_mut().for_each(|v| *v /= n as f64);
            for p in 0..hw {
                let z: f64 = (0..k).map(|c| data[c * hw + p]).sum();
                (0..k).for_each(|c| data[c * hw + p] /= z);
            }
        }
        let probs = Tensor::new(&shape, data)?;
        let mut result = SegResult::from_probs(probs, &self.object_ids, frame_idx)?;
        let mut wrote = false;
        for b in &mut self.branches {
            wrote |= b.commit(self.model, &result.labels, frame_idx)?;
        }
        result.skipped_write = !wrote;
        self.last_frame = frame_idx;
        Ok(result)
    }

    /// Memory and query events of every branch as JSON lines.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, b) in self.branches.iter().enumerate() {
            for e in b.bank.events() {
                let mut v = serde_json::to_value(e).expect("event serializes");
                v["branch"] = json!(i);
                v["scale"] = json!(b.scale);
                v["flip"] = json!(b.flip);
                out.push_str(&v.to_string());
                out.push('\n');
            }
            for r in &b.query_log {
                let mut v = serde_json::to_value(r).expect("record serializes");
                v["event"] = json!("query_update");
                v["branch"] = json!(i);
                out.push_str(&v.to_string());
                out.push('\n');
            }
        }
        out
    }
}

pub struct Inference {
    pub results: Vec<SegResult>,
    /// Memory and query debug log, JSON lines.
    pub log: String,
    /// Largest bank size seen after any frame, per branch.
    pub max_bank: Vec<usize>,
    pub caps: Vec<usize>,
}

/// Segments every frame given the first frame's annotation.
pub fn infer_sequence(model: &Model, frames: &[Tensor], first_mask: &LabelMask, cfg: &EngineConfig) -> Result<Inference> {
    let Some(frame0) = frames.first() else {
        return Err(contract_err!("cannot segment an empty sequence"));
    };
    let (mut tracker, first) = Tracker::start(model, frame0, first_mask, cfg)?;
    let mut max_bank: Vec<usize> = tracker.branches.iter().map(|b| b.bank.len()).collect();
    let mut results = vec![first];
    for (t, frame) in frames.iter().enumerate().skip(1) {
        results.push(tracker.step(frame, t)?);
        for (m, b) in max_bank.iter_mut().zip(&tracker.branches) {
            *m = (*m).max(b.bank.len());
        }
    }
    let caps = tracker.branches.iter().map(|b| b.bank.cap()).collect();
    Ok(Inference { results, log: tracker.log_jsonl(), max_bank, caps })
}
