//! Finite-difference gradient checks over every differentiable op and the
//! composed model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::{synth_generate, SyntheticSpec};
use crate::error::Result;
use crate::nn::Ctx;
use crate::mask::LabelMask;
use crate::pipeline::{clip_loss, Model, ObjectInput, Points};
use crate::tensor::{fd_gradcheck, Tape, Tensor, Var};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckRow {
    pub fn pass(&self) -> bool {
        self.max_rel_err < SUITE_TOL
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum with fixed random weights so every output coordinate
/// carries its own gradient.
fn probe(tp: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tp.shape(y), &mut rng);
    let wv = tp.constant(w);
    let p = tp.mul(y, wv)?;
    Ok(tp.sum(p))
}

/// Tiny model with every all-zero parameter replaced by noise, so no path
/// is trivially dead.
pub fn perturbed_tiny_model(seed: u64) -> Model {
    let mut model = Model::new(ModelConfig::tiny(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let p = model.params.get(id);
        if p.data().iter().all(|&v| v == 0.0) {
            let t = Tensor::from_fn(p.shape(), |_| rng.gen_range(-0.3..0.3));
            model.params.set(id, t).expect("same shape");
        }
    }
    model
}

/// One check per op and per differentiable argument.
pub fn op_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c) = (2, 4, 5);
    let x = random(&[a, b, c], &mut rng);
    let m2 = random(&[b, c], &mut rng);
    let rhs = random(&[c, 3], &mut rng);
    let other = random(&[b, c], &mut rng);
    let gamma = random(&[c], &mut rng);
    let beta = random(&[c], &mut rng);
    let chan = random(&[a], &mut rng);
    let kernel = random(&[3, a, 3, 3], &mut rng);
    let allowed: Vec<bool> = (0..a * b * c).map(|i| i % c != 2).collect();
    let s = seed.wrapping_add(1);
    let eps = SUITE_EPS;
    let mut rows = Vec::new();
    let mut push = |name: &str, err: Result<f64>| -> Result<()> {
        rows.push(CheckRow { name: name.to_string(), max_rel_err: err? });
        Ok(())
    };
    push("matmul lhs", fd_gradcheck(|tp, l| { let r = tp.constant(rhs.clone()); let y = tp.matmul(l, r)?; probe(tp, y, s) }, &m2, eps))?;
    push("matmul rhs", fd_gradcheck(|tp, r| { let l = tp.constant(m2.clone()); let y = tp.matmul(l, r)?; probe(tp, y, s) }, &rhs, eps))?;
    push("matmul_nt lhs", fd_gradcheck(|tp, l| { let o = tp.constant(other.clone()); let y = tp.matmul_nt(l, o)?; probe(tp, y, s) }, &m2, eps))?;
    push("matmul_nt rhs", fd_gradcheck(|tp, o| { let l = tp.constant(m2.clone()); let y = tp.matmul_nt(l, o)?; probe(tp, y, s) }, &other, eps))?;
    push("matmul_tn lhs", fd_gradcheck(|tp, l| { let o = tp.constant(other.clone()); let y = tp.matmul_tn(l, o)?; probe(tp, y, s) }, &m2, eps))?;
    push("matmul_tn rhs", fd_gradcheck(|tp, o| { let l = tp.constant(m2.clone()); let y = tp.matmul_tn(l, o)?; probe(tp, y, s) }, &other, eps))?;
    push("add", fd_gradcheck(|tp, v| { let o = tp.constant(other.clone()); let y = tp.add(v, o)?; let y = tp.add(y, v)?; probe(tp, y, s) }, &m2, eps))?;
    push("sub", fd_gradcheck(|tp, v| { let o = tp.constant(other.clone()); let y = tp.sub(o, v)?; probe(tp, y, s) }, &m2, eps))?;
    push("mul", fd_gradcheck(|tp, v| { let y = tp.mul(v, v)?; probe(tp, y, s) }, &m2, eps))?;
    push("scale", fd_gradcheck(|tp, v| { let y = tp.scale(v, -2.5); probe(tp, y, s) }, &x, eps))?;
    push("add_bias_rows", fd_gradcheck(|tp, g| { let xv = tp.constant(m2.clone()); let y = tp.add_bias_rows(xv, g)?; probe(tp, y, s) }, &gamma, eps))?;
    push("add_bias_channels", fd_gradcheck(|tp, bc| { let xv = tp.constant(x.clone()); let y = tp.add_bias_channels(xv, bc)?; probe(tp, y, s) }, &chan, eps))?;
    push("gelu", fd_gradcheck(|tp, v| { let y = tp.gelu(v); probe(tp, y, s) }, &x, eps))?;
    push("softmax", fd_gradcheck(|tp, v| { let y = tp.softmax_lastdim(v); probe(tp, y, s) }, &x, eps))?;
    push("softmax masked", fd_gradcheck(|tp, v| { let y = tp.softmax_lastdim_masked(v, &allowed)?; probe(tp, y, s) }, &x, eps))?;
    push("layer_norm x", fd_gradcheck(|tp, v| { let g = tp.constant(gamma.clone()); let bt = tp.constant(beta.clone()); let y = tp.layer_norm(v, g, bt)?; probe(tp, y, s) }, &x, eps))?;
    push("layer_norm gamma", fd_gradcheck(|tp, g| { let xv = tp.constant(x.clone()); let bt = tp.constant(beta.clone()); let y = tp.layer_norm(xv, g, bt)?; probe(tp, y, s) }, &gamma, eps))?;
    push("layer_norm beta", fd_gradcheck(|tp, bt| { let xv = tp.constant(x.clone()); let g = tp.constant(gamma.clone()); let y = tp.layer_norm(xv, g, bt)?; probe(tp, y, s) }, &beta, eps))?;
    push("conv2d input", fd_gradcheck(|tp, v| { let k = tp.constant(kernel.clone()); let y = tp.conv2d(v, k, 1, 1)?; probe(tp, y, s) }, &x, eps))?;
    push("conv2d kernel", fd_gradcheck(|tp, k| { let xv = tp.constant(x.clone()); let y = tp.conv2d(xv, k, 1, 1)?; probe(tp, y, s) }, &kernel, eps))?;
    push("conv2d strided", fd_gradcheck(|tp, v| { let k = tp.constant(random(&[2, a, 2, 2], &mut ChaCha8Rng::seed_from_u64(s))); let y = tp.conv2d(v, k, 2, 0)?; probe(tp, y, s) }, &random(&[a, 4, 6], &mut ChaCha8Rng::seed_from_u64(s + 1)), eps))?;
    push("resize up", fd_gradcheck(|tp, v| { let y = tp.resize_bilinear(v, 2 * b + 1, c + 3)?; probe(tp, y, s) }, &x, eps))?;
    push("resize down", fd_gradcheck(|tp, v| { let y = tp.resize_bilinear(v, 2, 3)?; probe(tp, y, s) }, &x, eps))?;
    push("gather", fd_gradcheck(|tp, v| { let n = tp.value(v).numel(); let idx: Vec<usize> = (0..n + 3).map(|i| (i * 7) % n).collect(); let y = tp.gather(v, idx, &[n + 3])?; probe(tp, y, s) }, &x, eps))?;
    push("select_rows", fd_gradcheck(|tp, v| { let y = tp.select_rows(v, &[3, 0, 3])?; probe(tp, y, s) }, &m2, eps))?;
    push("select_cols", fd_gradcheck(|tp, v| { let y = tp.select_cols(v, &[4, 1])?; probe(tp, y, s) }, &m2, eps))?;
    push("concat", fd_gradcheck(|tp, v| { let o = tp.constant(other.clone()); let y = tp.concat(&[v, o, v])?; probe(tp, y, s) }, &m2, eps))?;
    push("reshape", fd_gradcheck(|tp, v| { let y = tp.reshape(v, &[c, b])?; probe(tp, y, s) }, &m2, eps))?;
    push("transpose", fd_gradcheck(|tp, v| { let y = tp.transpose(v)?; probe(tp, y, s) }, &m2, eps))?;
    push("sum", fd_gradcheck(|tp, v| { let y = tp.mul(v, v)?; Ok(tp.sum(y)) }, &x, eps))?;
    push("mean", fd_gradcheck(|tp, v| { let y = tp.mul(v, v)?; Ok(tp.mean(y)) }, &x, eps))?;
    push("mean_rows", fd_gradcheck(|tp, v| { let y = tp.mean_rows(v)?; probe(tp, y, s) }, &m2, eps))?;
    push("cross_entropy", fd_gradcheck(|tp, v| { let targets: Vec<usize> = (0..b).map(|i| i % c).collect(); tp.cross_entropy(v, &targets) }, &m2, eps))?;
    Ok(rows)
}

/// Checks of the composed stages on a perturbed tiny model, ending with the
/// point loss of a two-frame 32×32 clip differentiated down to its pixels.
pub fn model_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let model = perturbed_tiny_model(seed);
    let spec = SyntheticSpec { num_objects: 2, frame_count: 2, height: 32, width: 32, seed, ..Default::default() };
    let seq = synth_generate(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &model.cfg;
    let mut rows = Vec::new();
    let s = seed.wrapping_add(2);

    let frame = &seq.frames[0];
    let err = fd_gradcheck(
        |tp, x| {
            let mut ctx = Ctx::new(tp, &model.params);
            let pyr = model.backbone.forward(&mut ctx, x)?;
            let feats = model.ss.forward(&mut ctx, &pyr)?;
            let parts: Vec<Var> = feats
                .iter()
                .map(|&f| {
                    let n = ctx.value(f).numel();
                    ctx.reshape(f, &[n])
                })
                .collect::<Result<_>>()?;
            let all = ctx.concat(&parts)?;
            probe(ctx.tape, all, s)
        },
        frame,
        SUITE_EPS,
    )?;
    rows.push(CheckRow { name: "backbone + spatial-semantic".into(), max_rel_err: err });

    let (h16, w16) = (2, 2);
    let f16 = random(&[cfg.c16, h16, w16], &mut rng);
    let keys = random(&[6, cfg.key_dim], &mut rng);
    let values = random(&[6, cfg.value_dim], &mut rng);
    let err = fd_gradcheck(
        |tp, x| {
            let mut ctx = Ctx::new(tp, &model.params);
            let k = ctx.constant(keys.clone());
            let v = ctx.constant(values.clone());
            let qk = model.memory.encode_key(&mut ctx, x)?;
            let read = model.memory.read(&mut ctx, qk, k, v, x)?;
            probe(ctx.tape, read.correlated, s)
        },
        &f16,
        SUITE_EPS,
    )?;
    rows.push(CheckRow { name: "memory key + read".into(), max_rel_err: err });

    let mask = random(&[1, h16, w16], &mut rng).map(|v| (v > 0.0) as u8 as f64);
    let err = fd_gradcheck(
        |tp, x| {
            let mut ctx = Ctx::new(tp, &model.params);
            let m = ctx.constant(mask.clone());
            let v = model.memory.encode_value(&mut ctx, x, m)?;
            probe(ctx.tape, v, s)
        },
        &f16,
        SUITE_EPS,
    )?;
    rows.push(CheckRow { name: "memory value".into(), max_rel_err: err });

    let c = model.query.dim();
    let q0 = random(&[c], &mut rng);
    let r = random(&[c, 4, 4], &mut rng);
    let err = fd_gradcheck(
        |tp, q| {
            let mut ctx = Ctx::new(tp, &model.params);
            let rv = ctx.constant(r.clone());
            let (q2, _, _) = model.query.discriminative_update(&mut ctx, q, rv, cfg.salient_k)?;
            probe(ctx.tape, q2, s)
        },
        &q0,
        SUITE_EPS,
    )?;
    rows.push(CheckRow { name: "query update".into(), max_rel_err: err });

    let r0 = random(&[c, 2, 2], &mut rng);
    let blob = LabelMask::new(32, 32, (0..1024).map(|p| (p / 32 > 10 && p % 32 < 14) as u8).collect())?;
    let points: Vec<usize> = (0..40).map(|_| rng.gen_range(0..1024)).collect();
    let targets: Vec<usize> = (0..40).map(|_| rng.gen_range(0..2)).collect();
    let err = fd_gradcheck(
        |tp, r| {
            let mut ctx = Ctx::new(tp, &model.params);
            let x = ctx.constant(frame.clone());
            let ff = model.frame_features(&mut ctx, x)?;
            let qv = ctx.constant(q0.clone());
            let appearance = model.decoder.appearance(&mut ctx, ff.fine, &blob, 1)?;
            let obj = ObjectInput { correlated: r, query: qv, appearance };
            let logits = model.cropped_logits(&mut ctx, &ff, &[obj])?;
            let rows = ctx.reshape(logits, &[2, 1024])?;
            let rows = ctx.transpose(rows)?;
            let rows = ctx.select_rows(rows, &points)?;
            ctx.cross_entropy(rows, &targets)
        },
        &r0,
        SUITE_EPS,
    )?;
    rows.push(CheckRow { name: "decoder point loss".into(), max_rel_err: err });

    let k = seq.masks[0].labels().len();
    let x0 = Tensor::from_fn(&[6, 32, 32], |i| seq.frames[i / 3072].data()[i % 3072]);
    let fixed = Points::Fixed(vec![Vec::new(), (0..30).map(|_| rng.gen_range(0..1024)).collect()]);
    let err = fd_gradcheck(
        |tp, x| {
            let mut ctx = Ctx::new(tp, &model.params);
            let f0 = ctx.gather(x, (0..3072).collect(), &[3, 32, 32])?;
            let f1 = ctx.gather(x, (3072..6144).collect(), &[3, 32, 32])?;
            clip_loss(&model, &mut ctx, &[f0, f1], &seq.masks, k, &[0.0, 1.0], &[], &fixed)
        },
        &x0,
        SUITE_EPS,
    )?;
    rows.push(CheckRow { name: "full model, 32x32 clip".into(), max_rel_err: err });
    Ok(rows)
}

/// Every op check followed by the composed-model checks.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = op_checks(seed)?;
    rows.extend(model_checks(seed)?);
    Ok(rows)
}
