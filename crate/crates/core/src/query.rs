//! Per-object target queries: initialization from the annotated frame,
//! discriminative channel selection on the correlated map, salient pixel
//! extraction, and the residual attention update.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{contract_err, shape_err, Result};
use crate::mask::LabelMask;
use crate::nn::{to_rows, Ctx, Init, Linear, Norm};
use crate::tensor::{gemm, Tensor, Var};

/// Cosines below this norm are defined as 0.
pub const COSINE_GUARD: f64 = 1e-12;

pub struct QueryEngine {
    dim: usize,
    init_proj: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm: Norm,
}

/// One query update, for the debug log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRecord {
    pub frame_idx: usize,
    pub object_id: u8,
    pub c_star: usize,
    pub cosine: f64,
}

/// Smallest cell coverage at which an object still counts as present after
/// downsampling.
pub const MIN_CELL_COVERAGE: f64 = 1.0 / 64.0;

/// Per-location pooling weights over an object's support at `stride`, each
/// cell weighted by the fraction of it covered by `label`. `None` when the
/// object vanishes, meaning no cell reaches [`MIN_CELL_COVERAGE`].
pub fn support_weights(mask: &LabelMask, label: u8, stride: usize) -> Option<Vec<f64>> {
    let frac = mask.block_fractions(label, stride);
    if !frac.iter().any(|&f| f >= MIN_CELL_COVERAGE) {
        return None;
    }
    let n: f64 = frac.iter().sum();
    Some(frac.iter().map(|f| f / n).collect())
}

/// `D[c] = Σ_p softmax_p(R[c])[p] · R[:, p]` for a `[C, h, w]` map.
pub fn channel_descriptors(r: &Tensor) -> Result<Tensor> {
    if r.ndim() != 3 {
        return Err(shape_err!("channel descriptors need [C,h,w], got {:?}", r.shape()));
    }
    let c = r.shape()[0];
    let hw = r.numel() / c;
    let mut weights = r.data().to_vec();
    for row in weights.chunks_mut(hw) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    let mut out = vec![0.0; c * c];
    gemm(c, hw, c, &weights, false, r.data(), true, 0.0, &mut out);
    Tensor::new(&[c, c], out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COSINE_GUARD || nb < COSINE_GUARD {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Channel whose descriptor is most cosine-similar to `q`, lowest index on
/// ties. Returns `(c_star, cosine)`.
pub fn select_discriminative(q: &[f64], descriptors: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..descriptors.shape()[0] {
        let s = cosine(q, descriptors.row(c));
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

/// Positions of the `k` largest activations of channel `c_star` of a
/// `[C,h,w]` map, descending, ties in row-major order. `k` is clipped.
pub fn salient_positions(r: &Tensor, c_star: usize, k: usize) -> Vec<usize> {
    let hw = r.numel() / r.shape()[0];
    let act = &r.data()[c_star * hw..(c_star + 1) * hw];
    let mut idx: Vec<usize> = (0..hw).collect();
    idx.sort_by(|&a, &b| act[b].total_cmp(&act[a]).then(a.cmp(&b)));
    idx.truncate(k.min(hw));
    idx
}

impl QueryEngine {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let c = cfg.corr_dim;
        QueryEngine {
            dim: c,
            init_proj: init.linear("query.init", cfg.c16, c),
            wq: init.linear("query.wq", c, c),
            wk: init.linear("query.wk", c, c),
            wv: init.linear("query.wv", c, c),
            wo: init.linear_zero("query.wo", c, c),
            norm: init.layer_norm("query.norm", c),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Projected masked mean of `[C16,h,w]` features over the object's
    /// stride-16 support in `mask` (padded frame resolution). Falls back to
    /// the global mean when the support vanishes; the flag reports that.
    pub fn init_query(&self, ctx: &mut Ctx, f16: Var, mask: &LabelMask, label: u8) -> Result<(Var, bool)> {
        let s = ctx.shape(f16).to_vec();
        let (h, w) = mask.hw();
        if s.len() != 3 || h != s[1] * 16 || w != s[2] * 16 {
            return Err(shape_err!("query init mask {h}x{w} for stride-16 features {s:?}"));
        }
        let hw = s[1] * s[2];
        let (weights, fallback) = match support_weights(mask, label, 16) {
            Some(wts) => (wts, false),
            None => (vec![1.0 / hw as f64; hw], true),
        };
        let wv = ctx.constant(Tensor::new(&[1, hw], weights)?);
        let rows = to_rows(ctx, f16)?;
        let pooled = ctx.matmul(wv, rows)?;
        let q = self.init_proj.forward(ctx, pooled)?;
        Ok((ctx.reshape(q, &[self.dim])?, fallback))
    }

    /// Queries for every label present in `mask`, in label order.
    pub fn init_queries(&self, ctx: &mut Ctx, f16: Var, mask: &LabelMask) -> Result<Vec<(Var, bool)>> {
        let labels = mask.labels();
        if labels.is_empty() {
            return Err(contract_err!("query initialization needs at least one object"));
        }
        labels.iter().map(|&l| self.init_query(ctx, f16, mask, l)).collect()
    }

    /// `q' = LN(q + W_o · attend(W_q q; W_k S, W_v S))` for salient rows `S`.
    pub fn query_update(&self, ctx: &mut Ctx, q: Var, salient: Var) -> Result<Var> {
        let c = self.dim;
        if ctx.shape(q) != [c] || ctx.shape(salient).len() != 2 || ctx.shape(salient)[1] != c {
            return Err(shape_err!("query update of {:?} with salient {:?}", ctx.shape(q), ctx.shape(salient)));
        }
        let qr = ctx.reshape(q, &[1, c])?;
        let qq = self.wq.forward(ctx, qr)?;
        let k = self.wk.forward(ctx, salient)?;
        let v = self.wv.forward(ctx, salient)?;
        let scores = ctx.matmul_nt(qq, k)?;
        let scores = ctx.scale(scores, 1.0 / (c as f64).sqrt());
        let a = ctx.softmax_lastdim(scores);
        let att = ctx.matmul(a, v)?;
        let o = self.wo.forward(ctx, att)?;
        let sum = ctx.add(qr, o)?;
        let out = self.norm.forward(ctx, sum)?;
        ctx.reshape(out, &[c])
    }

    /// Selection on the current values, then the differentiable update.
    /// Returns the new query, the chosen channel and its cosine.
    pub fn discriminative_update(&self, ctx: &mut Ctx, q: Var, r: Var, k: usize) -> Result<(Var, usize, f64)> {
        let rv = ctx.value(r).clone();
        let d = channel_descriptors(&rv)?;
        let (c_star, cos) = select_discriminative(ctx.value(q).data(), &d);
        let positions = salient_positions(&rv, c_star, k);
        let rows = to_rows(ctx, r)?;
        let salient = ctx.select_rows(rows, &positions)?;
        Ok((self.query_update(ctx, q, salient)?, c_star, cos))
    }
}
