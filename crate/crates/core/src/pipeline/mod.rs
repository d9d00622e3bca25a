//! The assembled network, mask decoding, sequence inference and training.

mod infer;
mod points;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{crop, pad_to_multiple, Backbone, FRAME_ALIGN};
use crate::config::ModelConfig;
use crate::error::{contract_err, shape_err, Result};
use crate::mask::LabelMask;
use crate::memory::MemoryHeads;
use crate::nn::{Conv, Ctx, Init, Linear, ParamId, ParamSet};
use crate::query::QueryEngine;
use crate::spatial_semantic::SpatialSemantic;
use crate::tensor::{Tensor, Var};

pub use infer::{infer_sequence, BranchState, Inference, Tracker};
pub use points::sample_points;
pub use train::{build_clip, clip_loss, train_toy, train_toy_with, Clip, Optimizer, Points, TrainConfig, TrainReport};

/// Per-object mask decoder: correlated map plus a query-modulated bias
/// channel, upsampled through stride-8 and stride-4 skips, then refined at
/// full resolution with appearance features and a second query-modulated
/// bias over them.
pub struct Decoder {
    modulate: ParamId,
    head16: Conv,
    skip8: Conv,
    head8: Conv,
    skip4: Conv,
    head4: Conv,
    fine: Conv,
    fine_modulate: Linear,
    appearance_modulate: Linear,
    refine: Conv,
    background: ParamId,
}

impl Decoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.corr_dim;
        Decoder {
            modulate: init.uniform("dec.modulate", &[c, c], (1.0 / c as f64).sqrt()),
            head16: init.conv("dec.head16", c + 1, cfg.dec8, 3, 1, 1),
            skip8: init.conv("dec.skip8", cfg.c8, cfg.dec8, 1, 1, 0),
            head8: init.conv("dec.head8", cfg.dec8, cfg.dec4, 3, 1, 1),
            skip4: init.conv("dec.skip4", cfg.c4, cfg.dec4, 1, 1, 0),
            head4: init.conv_zero("dec.head4", cfg.dec4, 1, 3, 1, 1),
            fine: init.conv("dec.fine", 3, cfg.refine_channels, 3, 1, 1),
            fine_modulate: init.linear("dec.fine_modulate", c, cfg.refine_channels),
            appearance_modulate: init.linear("dec.appearance_modulate", 2 * cfg.refine_channels, cfg.refine_channels),
            refine: init.conv_zero("dec.refine", 2, 1, 1, 1, 0),
            background: init.zeros("dec.background", &[1]),
        }
    }

    /// `[1,h,w]` map of `q · (W_m R[:, p])`.
    pub fn query_bias(&self, ctx: &mut Ctx, r: Var, q: Var) -> Result<Var> {
        let s = ctx.shape(r).to_vec();
        if ctx.shape(q) != [s[0]] {
            return Err(shape_err!("query {:?} for correlated map {s:?}", ctx.shape(q)));
        }
        let wm = ctx.p(self.modulate);
        let qr = ctx.reshape(q, &[1, s[0]])?;
        let u = ctx.matmul(qr, wm)?;
        let flat = ctx.reshape(r, &[s[0], s[1] * s[2]])?;
        let b = ctx.matmul(u, flat)?;
        ctx.reshape(b, &[1, s[1], s[2]])
    }

    /// Object and background prototypes `[1, 2·C_f]`: mean full-resolution
    /// features under `label` in `mask` and under everything else. An empty
    /// region averages the whole frame.
    pub fn appearance(&self, ctx: &mut Ctx, fine: Var, mask: &LabelMask, label: u8) -> Result<Var> {
        let s = ctx.shape(fine).to_vec();
        if mask.hw() != (s[1], s[2]) {
            return Err(shape_err!("appearance mask {:?} for features {s:?}", mask.hw()));
        }
        let hw = s[1] * s[2];
        let mut weights = Vec::with_capacity(2 * hw);
        for inside in [true, false] {
            let sel: Vec<f64> = mask.data().iter().map(|&v| ((v == label) == inside) as u8 as f64).collect();
            let n: f64 = sel.iter().sum();
            weights.extend(sel.iter().map(|&v| if n > 0.0 { v / n } else { 1.0 / hw as f64 }));
        }
        let wv = ctx.constant(Tensor::new(&[2, hw], weights)?);
        let flat = ctx.reshape(fine, &[s[0], hw])?;
        let protos = ctx.matmul_nt(wv, flat)?;
        ctx.reshape(protos, &[1, 2 * s[0]])
    }

    /// `[1,H,W]` map of `u · fine[:, p]`, where `u` mixes the query and the
    /// object's appearance prototypes.
    fn fine_bias(&self, ctx: &mut Ctx, fine: Var, q: Var, appearance: Var) -> Result<Var> {
        let s = ctx.shape(fine).to_vec();
        let c = ctx.shape(q)[0];
        let qr = ctx.reshape(q, &[1, c])?;
        let uq = self.fine_modulate.forward(ctx, qr)?;
        let ua = self.appearance_modulate.forward(ctx, appearance)?;
        let u = ctx.add(uq, ua)?;
        let flat = ctx.reshape(fine, &[s[0], s[1] * s[2]])?;
        let b = ctx.matmul(u, flat)?;
        ctx.reshape(b, &[1, s[1], s[2]])
    }

    fn up2_add(&self, ctx: &mut Ctx, x: Var, skip: &Conv, feat: Var) -> Result<Var> {
        let s = ctx.shape(x).to_vec();
        let up = ctx.resize_bilinear(x, 2 * s[1], 2 * s[2])?;
        let sk = skip.forward(ctx, feat)?;
        let sum = ctx.add(up, sk)?;
        Ok(ctx.gelu(sum))
    }

    /// Logit map `[1,H,W]` of one object at padded frame resolution.
    pub fn object_logit(&self, ctx: &mut Ctx, feats: &FrameFeatures, obj: &ObjectInput) -> Result<Var> {
        let (r, q) = (obj.correlated, obj.query);
        let bias = self.query_bias(ctx, r, q)?;
        let x = ctx.concat(&[r, bias])?;
        let x = self.head16.forward(ctx, x)?;
        let x = ctx.gelu(x);
        let x = self.up2_add(ctx, x, &self.skip8, feats.scales[1])?;
        let x = self.head8.forward(ctx, x)?;
        let x = self.up2_add(ctx, x, &self.skip4, feats.scales[0])?;
        let coarse = self.head4.forward(ctx, x)?;
        let (h, w) = feats.padded;
        let up = ctx.resize_bilinear(coarse, h, w)?;
        let fine_bias = self.fine_bias(ctx, feats.fine, q, obj.appearance)?;
        let x = ctx.concat(&[up, fine_bias])?;
        let delta = self.refine.forward(ctx, x)?;
        ctx.add(up, delta)
    }

    /// `[K+1,H,W]` logits, background first, objects in order.
    pub fn logits(&self, ctx: &mut Ctx, feats: &FrameFeatures, objects: &[ObjectInput]) -> Result<Var> {
        if objects.is_empty() {
            return Err(contract_err!("decoding needs at least one object"));
        }
        let (h, w) = feats.padded;
        let bg = ctx.p(self.background);
        let mut planes = vec![ctx.gather(bg, vec![0; h * w], &[1, h, w])?];
        for obj in objects {
            planes.push(self.object_logit(ctx, feats, obj)?);
        }
        ctx.concat(&planes)
    }

    /// Full-resolution appearance features shared by all objects.
    fn fine_features(&self, ctx: &mut Ctx, padded: Var) -> Result<Var> {
        let x = self.fine.forward(ctx, padded)?;
        Ok(ctx.gelu(x))
    }
}

/// Per-object decoder input for one frame.
#[derive(Clone, Copy, Debug)]
pub struct ObjectInput {
    /// Correlated map `[C,h/16,w/16]` from the memory read.
    pub correlated: Var,
    pub query: Var,
    /// Prototypes from [`Decoder::appearance`] on the annotated frame.
    pub appearance: Var,
}

/// Everything the per-object stages read from one frame.
pub struct FrameFeatures {
    /// Extents before padding.
    pub hw: (usize, usize),
    pub padded: (usize, usize),
    /// Enriched features at strides 4, 8, 16.
    pub scales: [Var; 3],
    pub fine: Var,
    /// Memory key `[C_k, H/16, W/16]`.
    pub key: Var,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub backbone: Backbone,
    pub ss: SpatialSemantic,
    pub memory: MemoryHeads,
    pub query: QueryEngine,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { params: &mut params, rng: &mut rng };
        let backbone = Backbone::new(&mut init, &cfg);
        let ss = SpatialSemantic::new(&mut init, &cfg);
        let memory = MemoryHeads::new(&mut init, &cfg);
        let query = QueryEngine::new(&mut init, &cfg);
        let decoder = Decoder::new(&mut init, &cfg);
        Model { cfg, params, backbone, ss, memory, query, decoder }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, tensors) = ParamSet::read_checkpoint::<ModelConfig>(path)?;
        let mut model = Model::new(cfg, 0);
        model.params.load_from(&tensors)?;
        Ok(model)
    }

    /// Pads the `[3,h,w]` frame and runs backbone, spatial-semantic block,
    /// key head and the full-resolution branch.
    pub fn frame_features(&self, ctx: &mut Ctx, frame: Var) -> Result<FrameFeatures> {
        let s = ctx.shape(frame).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err!("frames must be [3,h,w], got {s:?}"));
        }
        let padded = pad_to_multiple(ctx, frame, FRAME_ALIGN)?;
        let ps = ctx.shape(padded).to_vec();
        let pyr = self.backbone.forward(ctx, padded)?;
        let scales = self.ss.forward(ctx, &pyr)?;
        let fine = self.decoder.fine_features(ctx, padded)?;
        let key = self.memory.encode_key(ctx, scales[2])?;
        Ok(FrameFeatures { hw: (s[1], s[2]), padded: (ps[1], ps[2]), scales, fine, key })
    }

    /// Logits cropped back to the unpadded frame.
    pub fn cropped_logits(&self, ctx: &mut Ctx, feats: &FrameFeatures, objects: &[ObjectInput]) -> Result<Var> {
        let logits = self.decoder.logits(ctx, feats, objects)?;
        crop(ctx, logits, feats.hw.0, feats.hw.1)
    }
}

/// Softmax over the leading axis of `[K+1,h,w]` logits. Infinite logits
/// share the mass equally.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let (k, hw) = (s[0], s[1] * s[2]);
    let d = logits.data();
    let mut out = vec![0.0; k * hw];
    for p in 0..hw {
        let max = (0..k).map(|c| d[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::INFINITY {
            let n = (0..k).filter(|&c| d[c * hw + p] == f64::INFINITY).count() as f64;
            for c in 0..k {
                out[c * hw + p] = if d[c * hw + p] == f64::INFINITY { 1.0 / n } else { 0.0 };
            }
            continue;
        }
        let mut z = 0.0;
        for c in 0..k {
            let e = (d[c * hw + p] - max).exp();
            out[c * hw + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * hw + p] /= z;
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// Per-pixel argmax over `[K+1,h,w]` probabilities, lowest index on ties;
/// channel 0 is background, channel `k` is `object_ids[k-1]`.
pub fn argmax_labels(probs: &Tensor, object_ids: &[u8]) -> LabelMask {
    let s = probs.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let d = probs.data();
    let data = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * h * w + p] > d[best * h * w + p] {
                    best = c;
                }
            }
            if best == 0 {
                0
            } else {
                object_ids[best - 1]
            }
        })
        .collect();
    LabelMask::new(h, w, data).expect("probability map shape")
}

/// One emitted frame.
#[derive(Clone, Debug)]
pub struct SegResult {
    pub frame_idx: usize,
    /// `[K+1,h,w]`, background first; sums to 1 over the leading axis.
    pub probs: Tensor,
    pub labels: LabelMask,
    pub object_ids: Vec<u8>,
    pub skipped_write: bool,
}

impl SegResult {
    pub fn from_probs(probs: Tensor, object_ids: &[u8], frame_idx: usize) -> Result<Self> {
        if probs.ndim() != 3 || probs.shape()[0] != object_ids.len() + 1 {
            return Err(contract_err!("{} probability planes for {} objects", probs.shape()[0], object_ids.len()));
        }
        let labels = argmax_labels(&probs, object_ids);
        Ok(SegResult { frame_idx, probs, labels, object_ids: object_ids.to_vec(), skipped_write: false })
    }

    /// Result built directly from logits, bypassing the network.
    pub fn from_logits(logits: &Tensor, object_ids: &[u8], frame_idx: usize) -> Result<Self> {
        Self::from_probs(softmax_channels(logits), object_ids, frame_idx)
    }

    /// The given annotation as a one-hot result.
    pub fn from_annotation(mask: &LabelMask, object_ids: &[u8]) -> Self {
        let (h, w) = mask.hw();
        let k = object_ids.len() + 1;
        let probs = Tensor::from_fn(&[k, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            let label = mask.data()[p];
            let want = if c == 0 { 0 } else { object_ids[c - 1] };
            if label == want {
                1.0
            } else {
                0.0
            }
        });
        SegResult { frame_idx: 0, probs, labels: mask.clone(), object_ids: object_ids.to_vec(), skipped_write: false }
    }
}

#[cfg(test)]
mod tests;
