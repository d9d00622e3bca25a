//! Injects ViT semantics into the convolutional pyramid and fuses each scale
//! with its local neighbourhood of patch tokens.

use crate::backbone::{FramePyramid, STRIDES};
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{from_rows, to_rows, Ctx, Init, Linear, Norm};
use crate::tensor::Var;

struct LocalFuse {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm: Norm,
}

pub struct SpatialSemantic {
    patch: usize,
    dim: usize,
    summary: Linear,
    summary_norm: Norm,
    inject: [Linear; 3],
    inject_norm: [Norm; 3],
    fuse: [LocalFuse; 3],
}

pub struct LocalFuseOutput {
    pub out: Var,
    /// `[h·w, G_h·G_w]`; zero outside each location's window.
    pub attention: Var,
    /// Attended token values before the output projection, `[h·w, D]`.
    pub attended: Var,
}

/// For each location of an `h`×`w` map at `stride`, whether each patch token
/// lies in the 3×3 window around that location's patch cell.
pub fn window_mask(h: usize, w: usize, stride: usize, patch: usize, grid: (usize, usize)) -> Vec<bool> {
    let (gh, gw) = grid;
    let cell = |v: usize, g: usize| ((((v as f64) + 0.5) * stride as f64 / patch as f64).floor() as usize).min(g - 1);
    let n = gh * gw;
    let mut allowed = vec![false; h * w * n];
    for y in 0..h {
        let cy = cell(y, gh);
        for x in 0..w {
            let cx = cell(x, gw);
            let row = &mut allowed[(y * w + x) * n..(y * w + x + 1) * n];
            for ty in cy.saturating_sub(1)..=(cy + 1).min(gh - 1) {
                for tx in cx.saturating_sub(1)..=(cx + 1).min(gw - 1) {
                    row[ty * gw + tx] = true;
                }
            }
        }
    }
    allowed
}

impl SpatialSemantic {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.vit_dim;
        let chans = cfg.scale_channels();
        let inject = std::array::from_fn(|l| init.linear(&format!("ss.inject{l}"), d, chans[l]));
        let inject_norm = std::array::from_fn(|l| init.layer_norm(&format!("ss.inject{l}.norm"), chans[l]));
        let fuse = std::array::from_fn(|l| LocalFuse {
            q: init.linear(&format!("ss.fuse{l}.q"), chans[l], d),
            k: init.linear(&format!("ss.fuse{l}.k"), d, d),
            v: init.linear(&format!("ss.fuse{l}.v"), d, d),
            out: init.linear(&format!("ss.fuse{l}.out"), d, chans[l]),
            norm: init.layer_norm(&format!("ss.fuse{l}.norm"), chans[l]),
        });
        SpatialSemantic {
            patch: cfg.patch,
            dim: d,
            summary: init.linear("ss.summary", 2 * d, d),
            summary_norm: init.layer_norm("ss.summary.norm", d),
            inject,
            inject_norm,
            fuse,
        }
    }

    /// `s = LN(W_s · [cls; mean(patches)])`.
    pub fn summary(&self, ctx: &mut Ctx, cls: Var, patches: Var) -> Result<Var> {
        let gap = ctx.mean_rows(patches)?;
        let both = ctx.concat(&[cls, gap])?;
        let row = ctx.reshape(both, &[1, 2 * self.dim])?;
        let s = self.summary.forward(ctx, row)?;
        let s = self.summary_norm.forward(ctx, s)?;
        ctx.reshape(s, &[self.dim])
    }

    /// Adds the projected summary at every location of every scale, then
    /// channel-normalizes.
    pub fn semantic_embed(&self, ctx: &mut Ctx, cls: Var, patches: Var, scales: [Var; 3]) -> Result<[Var; 3]> {
        let s = self.summary(ctx, cls, patches)?;
        let row = ctx.reshape(s, &[1, self.dim])?;
        let mut out = scales;
        for (l, f) in out.iter_mut().enumerate() {
            let proj = self.inject[l].forward(ctx, row)?;
            let c = ctx.shape(proj)[1];
            let proj = ctx.reshape(proj, &[c])?;
            let sum = ctx.add_bias_channels(*f, proj)?;
            *f = self.inject_norm[l].forward_channels(ctx, sum)?;
        }
        Ok(out)
    }

    /// Cross-attention from each location of scale `level` to the 3×3 patch
    /// window around it, projected back and residual-added.
    pub fn local_fuse(
        &self,
        ctx: &mut Ctx,
        level: usize,
        feat: Var,
        patches: Var,
        grid: (usize, usize),
    ) -> Result<LocalFuseOutput> {
        let s = ctx.shape(feat).to_vec();
        if s.len() != 3 || ctx.shape(patches) != [grid.0 * grid.1, self.dim] {
            return Err(shape_err!("local fuse of {s:?} with tokens {:?} on grid {grid:?}", ctx.shape(patches)));
        }
        let (h, w) = (s[1], s[2]);
        let fuse = &self.fuse[level];
        let rows = to_rows(ctx, feat)?;
        let q = fuse.q.forward(ctx, rows)?;
        let k = fuse.k.forward(ctx, patches)?;
        let v = fuse.v.forward(ctx, patches)?;
        let scores = ctx.matmul_nt(q, k)?;
        let scores = ctx.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let allowed = window_mask(h, w, STRIDES[level], self.patch, grid);
        let attention = ctx.softmax_lastdim_masked(scores, &allowed)?;
        let attended = ctx.matmul(attention, v)?;
        let proj = fuse.out.forward(ctx, attended)?;
        let proj = from_rows(ctx, proj, h, w)?;
        let sum = ctx.add(feat, proj)?;
        let out = fuse.norm.forward_channels(ctx, sum)?;
        Ok(LocalFuseOutput { out, attention, attended })
    }

    /// Semantic embedding followed by local fusion at every scale.
    pub fn forward(&self, ctx: &mut Ctx, pyr: &FramePyramid) -> Result<[Var; 3]> {
        let embedded = self.semantic_embed(ctx, pyr.cls, pyr.patches, pyr.scales)?;
        let mut out = embedded;
        for (l, f) in out.iter_mut().enumerate() {
            *f = self.local_fuse(ctx, l, *f, pyr.patches, pyr.grid)?.out;
        }
        Ok(out)
    }
}
