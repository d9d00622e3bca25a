use std::sync::Arc;

use super::tape::Op;
use super::{gemm, Tape, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// tanh through a single exp; saturates cleanly to +-1 when exp overflows.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npos = g.ho * g.wo;
    let mut cols = vec![0.0; g.ci * g.kh * g.kw * npos];
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let npos = g.ho * g.wo;
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for one axis of an align-corners=false bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ResizeGeom {
    c: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
}

pub(crate) fn resize_backward(gy: &[f64], g: &ResizeGeom, dx: &mut [f64]) {
    let ty = bilinear_taps(g.ih, g.oh);
    let tx = bilinear_taps(g.iw, g.ow);
    for c in 0..g.c {
        let src = &mut dx[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
        let out = &gy[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
        for (oy, yt) in ty.iter().enumerate() {
            for (ox, xt) in tx.iter().enumerate() {
                let d = out[oy * g.ow + ox];
                let (wy0, wy1) = (1.0 - yt.frac, yt.frac);
                let (wx0, wx1) = (1.0 - xt.frac, xt.frac);
                src[yt.lo * g.iw + xt.lo] += d * wy0 * wx0;
                src[yt.lo * g.iw + xt.hi] += d * wy0 * wx1;
                src[yt.hi * g.iw + xt.lo] += d * wy1 * wx0;
                src[yt.hi * g.iw + xt.hi] += d * wy1 * wx1;
            }
        }
    }
}

/// Sum that does not depend on the order of `vals`.
pub(crate) fn order_free_sum(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum()
}

impl Tape {
    fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!("matmul needs 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err!(
                "matmul inner extents differ: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb, m, k: ka, n }, &[a, b]))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// `a[k,m]ᵀ · b[k,n]`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true, false)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over every leading index.
    pub fn add_bias_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return Err(shape_err!("row bias {:?} for input {:?}", self.shape(b), self.shape(x)));
        }
        let bv = self.value(b).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(r, b)| *r += b);
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::AddBiasRows { x, b }, &[x, b]))
    }

    /// `x[c, ...] + b[c]`, broadcasting `b` over every trailing index.
    pub fn add_bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(b) != [c] {
            return Err(shape_err!(
                "channel bias {:?} for input {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let bv = self.value(b).data().to_vec();
        let xv = self.value(x);
        let inner = xv.numel() / c;
        let mut data = xv.data().to_vec();
        for (chunk, b) in data.chunks_mut(inner).zip(&bv) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::AddBiasChannels { x, b }, &[x, b]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis, with max-subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None).expect("unmasked softmax cannot fail")
    }

    /// Softmax along the last axis restricted to entries where `allowed` is
    /// true; excluded entries come out exactly 0. Every row needs at least one
    /// allowed entry.
    pub fn softmax_lastdim_masked(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(x).numel() {
            return Err(shape_err!(
                "softmax mask has {} entries for shape {:?}",
                allowed.len(),
                self.shape(x)
            ));
        }
        self.softmax_impl(x, Some(allowed))
    }

    fn softmax_impl(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = vec![0.0; xv.numel()];
        for (r, (o, row)) in out.chunks_mut(n).zip(xv.data().chunks(n)).enumerate() {
            let keep = |j: usize| allowed.is_none_or(|m| m[r * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(contract_err!("softmax row {r} has no allowed entries"));
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    o[j] = (v - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "layer_norm affine {:?}/{:?} for input {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / c;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Cross-correlation of `x[c_in,h,w]` with `kernel[c_out,c_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(shape_err!("conv2d input {sx:?} with kernel {sk:?}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(shape_err!(
                "conv2d output extent not integral: input {sx:?}, kernel {sk:?}, stride {stride}, pad {pad}"
            ));
        }
        let geom = ConvGeom {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let npos = geom.ho * geom.wo;
        let kcols = ci * kh * kw;
        let mut out = vec![0.0; co * npos];
        if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
            gemm(co, kcols, npos, self.value(kernel).data(), false, self.value(x).data(), false, 0.0, &mut out);
        } else {
            let cols = im2col(self.value(x).data(), &geom);
            gemm(co, kcols, npos, self.value(kernel).data(), false, &cols, false, 0.0, &mut out);
        }
        let value = Tensor::new(&[co, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, k: kernel, geom }, &[x, kernel]))
    }

    /// Bilinear resize of `x[c,h,w]` using the align-corners=false sampling
    /// grid. Same-size resizes copy the input.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize {s:?} to {out_h}x{out_w}"));
        }
        let geom = ResizeGeom { c: s[0], ih: s[1], iw: s[2], oh: out_h, ow: out_w };
        let xv = self.value(x);
        let value = if geom.ih == out_h && geom.iw == out_w {
            xv.clone()
        } else {
            Tensor::new(&[geom.c, out_h, out_w], resize_forward(xv.data(), &geom))?
        };
        Ok(self.push(value, Op::Resize { x, geom }, &[x]))
    }

    /// `out[i] = x[idx[i]]` over flat indices, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.numel()) {
            return Err(shape_err!("gather index {bad} out of range for {:?}", xv.shape()));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x, idx: Arc::new(idx) }, &[x]))
    }

    /// Rows `ids` of a tensor viewed as `[rows, rest]`.
    pub fn select_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        if let Some(&bad) = ids.iter().find(|&&r| r >= s[0]) {
            return Err(shape_err!("row {bad} out of range for {s:?}"));
        }
        let idx = ids.iter().flat_map(|&r| r * inner..(r + 1) * inner).collect();
        let mut shape = s.clone();
        shape[0] = ids.len();
        self.gather(x, idx, &shape)
    }

    /// Columns `ids` of a 2-D tensor.
    pub fn select_cols(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("select_cols needs 2-D, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&c| c >= n) {
            return Err(shape_err!("column {bad} out of range for {s:?}"));
        }
        let idx = (0..m).flat_map(|i| ids.iter().map(move |&j| i * n + j)).collect();
        self.gather(x, idx, &[m, ids.len()])
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(shape_err!("concat {first:?} with {s:?}"));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        let (m, n) = (value.shape()[1], value.shape()[0]);
        Ok(self.push(value, Op::Transpose { x, m, n }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means of `x[m,n]`. Summation order is canonical, so the result
    /// is bitwise invariant to any permutation of the rows.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err!("mean_rows needs 2-D, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut col = vec![0.0; m];
        let data = (0..n)
            .map(|j| {
                for i in 0..m {
                    col[i] = xv[i * n + j];
                }
                order_free_sum(&mut col) / m as f64
            })
            .collect();
        let value = Tensor::new(&[n], data)?;
        Ok(self.push(value, Op::MeanRows { x, m }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err!("cross_entropy logits {s:?} with {} targets", targets.len()));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err!("target class {bad} out of range for {c} classes"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / sum;
            }
            loss += sum.ln() + max - row[t];
        }
        let value = Tensor::scalar(loss / targets.len() as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }
}

fn resize_forward(x: &[f64], g: &ResizeGeom) -> Vec<f64> {
    let ty = bilinear_taps(g.ih, g.oh);
    let tx = bilinear_taps(g.iw, g.ow);
    let mut out = vec![0.0; g.c * g.oh * g.ow];
    for c in 0..g.c {
        let src = &x[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
        let dst = &mut out[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
        for (oy, yt) in ty.iter().enumerate() {
            for (ox, xt) in tx.iter().enumerate() {
                let top = src[yt.lo * g.iw + xt.lo] * (1.0 - xt.frac) + src[yt.lo * g.iw + xt.hi] * xt.frac;
                let bot = src[yt.hi * g.iw + xt.lo] * (1.0 - xt.frac) + src[yt.hi * g.iw + xt.hi] * xt.frac;
                dst[oy * g.ow + ox] = top * (1.0 - yt.frac) + bot * yt.frac;
            }
        }
    }
    out
}

/// Bilinear resize of a plain `[c,h,w]` tensor, outside any tape.
pub fn resize_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let r = tape.resize_bilinear(v, out_h, out_w)?;
    Ok(tape.value(r).clone())
}
