//! Per-frame feature extraction: a small ViT that yields a cls token and
//! patch tokens, and a convolutional stem that yields features at strides
//! 4, 8 and 16.

use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::mask::reflect_index;
use crate::nn::{Conv, Ctx, Init, Linear, Norm, ParamId};
use crate::tensor::Var;

/// Spatial extents are padded to a multiple of this before feature extraction.
pub const FRAME_ALIGN: usize = 16;
pub const STRIDES: [usize; 3] = [4, 8, 16];

struct VitBlock {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

pub struct Backbone {
    patch: usize,
    dim: usize,
    heads: usize,
    pos_grid: usize,
    patch_embed: Linear,
    cls: ParamId,
    cls_pos: ParamId,
    pos: ParamId,
    blocks: Vec<VitBlock>,
    final_norm: Norm,
    stem: [Conv; 2],
    stage8: Conv,
    stage16: Conv,
}

/// Everything the later stages need from one (padded) frame.
pub struct FramePyramid {
    pub cls: Var,
    /// `[G_h·G_w, D]`, row-major over the patch grid.
    pub patches: Var,
    pub grid: (usize, usize),
    /// Features at strides 4, 8, 16.
    pub scales: [Var; 3],
    /// Padded frame extents.
    pub frame_hw: (usize, usize),
}

pub struct VitOutput {
    pub cls: Var,
    pub patches: Var,
    /// Attention matrices `[N+1, N+1]`, layer-major then head.
    pub attention: Vec<Var>,
}

/// Reflect-pads `[c,h,w]` on the bottom and right to multiples of `align`.
pub fn pad_to_multiple(ctx: &mut Ctx, frame: Var, align: usize) -> Result<Var> {
    let s = ctx.shape(frame).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h.div_ceil(align) * align, w.div_ceil(align) * align);
    if (ph, pw) == (h, w) {
        return Ok(frame);
    }
    let mut idx = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for x in 0..pw {
                idx.push((ch * h + sy) * w + reflect_index(x as isize, w));
            }
        }
    }
    ctx.gather(frame, idx, &[c, ph, pw])
}

/// Top-left `h`×`w` window of `[c,H,W]`.
pub fn crop(ctx: &mut Ctx, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = ctx.shape(x).to_vec();
    if (s[1], s[2]) == (h, w) {
        return Ok(x);
    }
    let mut idx = Vec::with_capacity(s[0] * h * w);
    for c in 0..s[0] {
        for y in 0..h {
            idx.extend((0..w).map(|xx| (c * s[1] + y) * s[2] + xx));
        }
    }
    ctx.gather(x, idx, &[s[0], h, w])
}

/// Mirror `[c,h,w]` left to right.
pub fn flip_horizontal(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let s = ctx.shape(x).to_vec();
    let mut idx = Vec::with_capacity(s.iter().product());
    for c in 0..s[0] {
        for y in 0..s[1] {
            let row = (c * s[1] + y) * s[2];
            idx.extend((0..s[2]).rev().map(|xx| row + xx));
        }
    }
    ctx.gather(x, idx, &s)
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.vit_dim;
        let p = cfg.patch;
        let blocks = (0..cfg.vit_layers)
            .map(|l| VitBlock {
                ln1: init.layer_norm(&format!("vit.{l}.ln1"), d),
                qkv: init.linear(&format!("vit.{l}.qkv"), d, 3 * d),
                proj: init.linear(&format!("vit.{l}.proj"), d, d),
                ln2: init.layer_norm(&format!("vit.{l}.ln2"), d),
                fc1: init.linear(&format!("vit.{l}.fc1"), d, cfg.mlp_ratio * d),
                fc2: init.linear(&format!("vit.{l}.fc2"), cfg.mlp_ratio * d, d),
            })
            .collect();
        Backbone {
            patch: p,
            dim: d,
            heads: cfg.vit_heads,
            pos_grid: cfg.pos_grid,
            patch_embed: init.linear("vit.patch_embed", 3 * p * p, d),
            cls: init.uniform("vit.cls", &[d], 0.02),
            cls_pos: init.uniform("vit.cls_pos", &[d], 0.02),
            pos: init.uniform("vit.pos", &[cfg.pos_grid * cfg.pos_grid, d], 0.02),
            blocks,
            final_norm: init.layer_norm("vit.norm", d),
            stem: [
                init.conv("stem.0", 3, cfg.stem_channels, 4, 2, 1),
                init.conv("stem.1", cfg.stem_channels, cfg.c4, 4, 2, 1),
            ],
            stage8: init.conv("stage8", cfg.c4, cfg.c8, 4, 2, 1),
            stage16: init.conv("stage16", cfg.c8, cfg.c16, 4, 2, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Splits `[3,h,w]` into non-overlapping patches (row-major) and projects
    /// each to the token width. Frames are reflect-padded up to whole patches.
    pub fn patchify(&self, ctx: &mut Ctx, frame: Var) -> Result<(Var, (usize, usize))> {
        let s = ctx.shape(frame).to_vec();
        let p = self.patch;
        if s.len() != 3 || s[0] != 3 || s[1] < p || s[2] < p {
            return Err(shape_err!("patchify needs a [3,h,w] frame of at least {p}x{p}, got {s:?}"));
        }
        let frame = pad_to_multiple(ctx, frame, p)?;
        let (h, w) = (ctx.shape(frame)[1], ctx.shape(frame)[2]);
        let (gh, gw) = (h / p, w / p);
        let mut idx = Vec::with_capacity(3 * h * w);
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push((c * h + gy * p + py) * w + gx * p + px);
                        }
                    }
                }
            }
        }
        let flat = ctx.gather(frame, idx, &[gh * gw, 3 * p * p])?;
        Ok((self.patch_embed.forward(ctx, flat)?, (gh, gw)))
    }

    /// Positional embeddings for a `gh`×`gw` grid, bilinearly resized from
    /// the learned base grid.
    pub fn positional(&self, ctx: &mut Ctx, gh: usize, gw: usize) -> Result<Var> {
        let g = self.pos_grid;
        let pos = ctx.p(self.pos);
        if (gh, gw) == (g, g) {
            return Ok(pos);
        }
        let t = ctx.transpose(pos)?;
        let img = ctx.reshape(t, &[self.dim, g, g])?;
        let resized = ctx.resize_bilinear(img, gh, gw)?;
        let flat = ctx.reshape(resized, &[self.dim, gh * gw])?;
        ctx.transpose(flat)
    }

    /// Transformer over `tokens` with explicit per-token positional
    /// embeddings `pos` (same shape). Prepends the cls token.
    pub fn vit_encode(&self, ctx: &mut Ctx, tokens: Var, pos: Var) -> Result<VitOutput> {
        let n = ctx.shape(tokens)[0];
        if n == 0 || ctx.shape(tokens) != ctx.shape(pos) {
            return Err(shape_err!("vit tokens {:?} with positions {:?}", ctx.shape(tokens), ctx.shape(pos)));
        }
        let d = self.dim;
        let (cls, cls_pos) = (ctx.p(self.cls), ctx.p(self.cls_pos));
        let cls0 = ctx.add(cls, cls_pos)?;
        let cls0 = ctx.reshape(cls0, &[1, d])?;
        let body = ctx.add(tokens, pos)?;
        let mut x = ctx.concat(&[cls0, body])?;
        let mut attention = Vec::new();
        for block in &self.blocks {
            let h = block.ln1.forward(ctx, x)?;
            let a = self.self_attention(ctx, block, h, &mut attention)?;
            x = ctx.add(x, a)?;
            let h = block.ln2.forward(ctx, x)?;
            let h = block.fc1.forward(ctx, h)?;
            let h = ctx.gelu(h);
            let h = block.fc2.forward(ctx, h)?;
            x = ctx.add(x, h)?;
        }
        let x = self.final_norm.forward(ctx, x)?;
        let cls = ctx.select_rows(x, &[0])?;
        let cls = ctx.reshape(cls, &[d])?;
        let rows: Vec<usize> = (1..=n).collect();
        let patches = ctx.select_rows(x, &rows)?;
        Ok(VitOutput { cls, patches, attention })
    }

    fn self_attention(&self, ctx: &mut Ctx, block: &VitBlock, x: Var, attn_out: &mut Vec<Var>) -> Result<Var> {
        let d = self.dim;
        let dh = d / self.heads;
        let qkv = block.qkv.forward(ctx, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = |base: usize| (base + h * dh..base + (h + 1) * dh).collect::<Vec<_>>();
            let q = ctx.select_cols(qkv, &cols(0))?;
            let k = ctx.select_cols(qkv, &cols(d))?;
            let v = ctx.select_cols(qkv, &cols(2 * d))?;
            let scores = ctx.matmul_nt(q, k)?;
            let scores = ctx.scale(scores, scale);
            let a = ctx.softmax_lastdim(scores);
            attn_out.push(a);
            let o = ctx.matmul(a, v)?;
            heads.push(ctx.transpose(o)?);
        }
        let stacked = ctx.concat(&heads)?;
        let merged = ctx.transpose(stacked)?;
        block.proj.forward(ctx, merged)
    }

    pub fn vit_forward(&self, ctx: &mut Ctx, tokens: Var, grid: (usize, usize)) -> Result<VitOutput> {
        let pos = self.positional(ctx, grid.0, grid.1)?;
        self.vit_encode(ctx, tokens, pos)
    }

    /// Stride-4 stem followed by two stride-2 stages.
    pub fn pyramid_forward(&self, ctx: &mut Ctx, frame: Var) -> Result<[Var; 3]> {
        let s = ctx.shape(frame);
        if s.len() != 3 || !s[1].is_multiple_of(FRAME_ALIGN) || !s[2].is_multiple_of(FRAME_ALIGN) {
            return Err(shape_err!("pyramid needs extents that are multiples of {FRAME_ALIGN}, got {s:?}"));
        }
        let mut x = frame;
        for conv in &self.stem {
            let y = conv.forward(ctx, x)?;
            x = ctx.gelu(y);
        }
        let f4 = x;
        let y = self.stage8.forward(ctx, f4)?;
        let f8 = ctx.gelu(y);
        let y = self.stage16.forward(ctx, f8)?;
        let f16 = ctx.gelu(y);
        Ok([f4, f8, f16])
    }

    /// Pads the frame and runs both branches.
    pub fn forward(&self, ctx: &mut Ctx, frame: Var) -> Result<FramePyramid> {
        let frame = pad_to_multiple(ctx, frame, FRAME_ALIGN)?;
        let s = ctx.shape(frame).to_vec();
        let (tokens, grid) = self.patchify(ctx, frame)?;
        let vit = self.vit_forward(ctx, tokens, grid)?;
        let scales = self.pyramid_forward(ctx, frame)?;
        Ok(FramePyramid { cls: vit.cls, patches: vit.patches, grid, scales, frame_hw: (s[1], s[2]) })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamSet;
    use crate::tensor::{fd_gradcheck, Tape, Tensor};

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamSet, Backbone) {
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(&mut Init { params: &mut params, rng: &mut rng }, cfg);
        (params, bb)
    }

    fn frame(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    fn zero_params(params: &mut ParamSet) {
        for id in params.clone().ids() {
            let s = params.get(id).shape().to_vec();
            params.set(id, Tensor::zeros(&s)).unwrap();
        }
    }

    #[test]
    fn patch_counts() {
        let (params, bb) = build(&ModelConfig::default(), 0);
        for ((h, w), n, grid) in [((8, 8), 1, (1, 1)), ((16, 24), 6, (2, 3))] {
            let mut tape = Tape::no_grad();
            let mut ctx = Ctx::new(&mut tape, &params);
            let f = ctx.constant(frame(h, w, 1));
            let (tok, g) = bb.patchify(&mut ctx, f).unwrap();
            assert_eq!(ctx.shape(tok), &[n, 64]);
            assert_eq!(g, grid);
        }
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &params);
        let f = ctx.constant(frame(4, 16, 1));
        assert!(bb.patchify(&mut ctx, f).is_err());
    }

    #[test]
    fn patch_rows_are_row_major() {
        // With an identity-like projection the token of patch (gy, gx) holds
        // that patch's first pixel.
        let (mut params, bb) = build(&ModelConfig::default(), 0);
        let mut w = vec![0.0; 192 * 64];
        w[0] = 1.0;
        params.set(bb.patch_embed.w, Tensor::new(&[192, 64], w).unwrap()).unwrap();
        let f = Tensor::from_fn(&[3, 16, 24], |i| i as f64);
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &params);
        let fv = ctx.constant(f);
        let (tok, _) = bb.patchify(&mut ctx, fv).unwrap();
        let firsts: Vec<f64> = (0..6).map(|r| ctx.value(tok).row(r)[0]).collect();
        assert_eq!(firsts, vec![0.0, 8.0, 16.0, 192.0, 200.0, 208.0]);
    }

    #[test]
    fn zero_frame_zero_bias_gives_zero_tokens() {
        let (params, bb) = build(&ModelConfig::default(), 0);
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &params);
        let f = ctx.constant(Tensor::zeros(&[3, 16, 16]));
        let (tok, _) = bb.patchify(&mut ctx, f).unwrap();
        assert!(ctx.value(tok).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vit_shapes_and_attention_rows() {
        let (params, bb) = build(&ModelConfig::default(), 1);
        for n in [1usize, 5, 12] {
            let mut tape = Tape::no_grad();
            let mut ctx = Ctx::new(&mut tape, &params);
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let tok = ctx.constant(Tensor::from_fn(&[n, 64], |_| rng.gen_range(-1.0..1.0)));
            let pos = ctx.constant(Tensor::zeros(&[n, 64]));
            let out = bb.vit_encode(&mut ctx, tok, pos).unwrap();
            assert_eq!(ctx.shape(out.cls), &[64]);
            assert_eq!(ctx.shape(out.patches), &[n, 64]);
            assert_eq!(out.attention.len(), 16);
            for a in &out.attention {
                let t = ctx.value(*a);
                for r in 0..n + 1 {
                    assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn joint_permutation_equivariance() {
        let (params, bb) = build(&ModelConfig::default(), 2);
        let n = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = Tensor::from_fn(&[n, 64], |_| rng.gen_range(-1.0..1.0));
        let pos = Tensor::from_fn(&[n, 64], |_| rng.gen_range(-1.0..1.0));
        let perm = [4usize, 7, 0, 2, 8, 1, 6, 3, 5];
        let run = |order: &[usize]| {
            let mut tape = Tape::no_grad();
            let mut ctx = Ctx::new(&mut tape, &params);
            let t = ctx.constant(tokens.clone());
            let p = ctx.constant(pos.clone());
            let t = ctx.select_rows(t, order).unwrap();
            let p = ctx.select_rows(p, order).unwrap();
            let out = bb.vit_encode(&mut ctx, t, p).unwrap();
            (ctx.value(out.cls).clone(), ctx.value(out.patches).clone())
        };
        let ident: Vec<usize> = (0..n).collect();
        let (cls_a, pat_a) = run(&ident);
        let (cls_b, pat_b) = run(&perm);
        assert!(cls_a.max_abs_diff(&cls_b) < 1e-10);
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in pat_b.row(i).iter().zip(pat_a.row(src)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn vit_is_bitwise_deterministic() {
        let (params, bb) = build(&ModelConfig::default(), 4);
        let f = frame(32, 48, 5);
        let run = || {
            let mut tape = Tape::no_grad();
            let mut ctx = Ctx::new(&mut tape, &params);
            let fv = ctx.constant(f.clone());
            let pyr = bb.forward(&mut ctx, fv).unwrap();
            ctx.value(pyr.patches).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pyramid_extents_follow_strides() {
        let (params, bb) = build(&ModelConfig::default(), 6);
        for (h, w) in [(64, 64), (96, 96), (128, 128), (64, 96), (128, 64), (96, 128), (40, 56)] {
            let mut tape = Tape::no_grad();
            let mut ctx = Ctx::new(&mut tape, &params);
            let fv = ctx.constant(frame(h, w, 7));
            let pyr = bb.forward(&mut ctx, fv).unwrap();
            let (ph, pw) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
            assert_eq!(pyr.frame_hw, (ph, pw));
            assert_eq!(pyr.grid, (ph / 8, pw / 8));
            assert_eq!(ctx.shape(pyr.patches), &[(ph / 8) * (pw / 8), 64]);
            for ((&stride, &c), v) in STRIDES.iter().zip(&[32, 64, 128]).zip(pyr.scales) {
                assert_eq!(ctx.shape(v), &[c, ph / stride, pw / stride]);
            }
        }
    }

    #[test]
    fn zero_frame_zero_weights_give_zero_features() {
        let (mut params, bb) = build(&ModelConfig::default(), 8);
        zero_params(&mut params);
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &params);
        let f = ctx.constant(Tensor::zeros(&[3, 64, 64]));
        let scales = bb.pyramid_forward(&mut ctx, f).unwrap();
        for s in scales {
            assert!(ctx.value(s).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pyramid_gradcheck() {
        let cfg = ModelConfig::tiny();
        let (params, bb) = build(&cfg, 9);
        let f = frame(16, 16, 10);
        let err = fd_gradcheck(
            |tape, x| {
                let mut ctx = Ctx::new(tape, &params);
                let [a, b, c] = bb.pyramid_forward(&mut ctx, x)?;
                let (sa, sb, sc) = (ctx.sum(a), ctx.sum(b), ctx.sum(c));
                let s = ctx.add(sa, sb)?;
                ctx.add(s, sc)
            },
            &f,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn vit_gradcheck_through_frame() {
        let cfg = ModelConfig::tiny();
        let (params, bb) = build(&cfg, 11);
        let f = frame(16, 24, 12);
        let err = fd_gradcheck(
            |tape, x| {
                let mut ctx = Ctx::new(tape, &params);
                let (tok, grid) = bb.patchify(&mut ctx, x)?;
                let out = bb.vit_forward(&mut ctx, tok, grid)?;
                let sq = ctx.mul(out.patches, out.patches)?;
                let a = ctx.sum(sq);
                let b = ctx.sum(out.cls);
                ctx.add(a, b)
            },
            &f,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
