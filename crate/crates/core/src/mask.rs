//! Label maps: one `u8` object id per pixel, 0 = background.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

/// Index into `0..n` after mirroring at both ends without repeating the
/// edge sample (`n = 4`: 4 → 2, 5 → 1, -1 → 1).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

impl LabelMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(shape_err!("label mask {h}x{w} with {} pixels", data.len()));
        }
        Ok(LabelMask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        LabelMask { h, w, data: vec![0; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn area(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn foreground_area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn binary(&self, label: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == label).collect()
    }

    /// Sorted distinct nonzero labels.
    pub fn labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    /// `[1,h,w]` indicator plane of `label`.
    pub fn plane(&self, label: u8) -> Tensor {
        Tensor::from_fn(&[1, self.h, self.w], |i| if self.data[i] == label { 1.0 } else { 0.0 })
    }

    /// Applies `f` to every label.
    pub fn map_labels(&self, f: impl Fn(u8) -> u8) -> Self {
        LabelMask { h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Nearest-neighbour resize on the align-corners=false pixel grid.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let src = |o: usize, out: usize, inp: usize| {
            (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
        };
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = src(y, h, self.h);
            for x in 0..w {
                data.push(self.get(sy, src(x, w, self.w)));
            }
        }
        LabelMask { h, w, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.h {
            data.extend(self.data[y * self.w..(y + 1) * self.w].iter().rev());
        }
        LabelMask { h: self.h, w: self.w, data }
    }

    /// Reflect-pads on the bottom and right to `h`×`w`.
    pub fn pad_reflect(&self, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = reflect_index(y as isize, self.h);
            for x in 0..w {
                data.push(self.get(sy, reflect_index(x as isize, self.w)));
            }
        }
        LabelMask { h, w, data }
    }

    /// Top-left `h`×`w` window.
    pub fn crop(&self, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            data.extend_from_slice(&self.data[y * self.w..y * self.w + w]);
        }
        LabelMask { h, w, data }
    }

    /// Per-cell fraction of pixels carrying `label` over `stride`×`stride`
    /// blocks. Extents must be multiples of `stride`.
    pub fn block_fractions(&self, label: u8, stride: usize) -> Vec<f64> {
        let (bh, bw) = (self.h / stride, self.w / stride);
        let mut out = vec![0.0; bh * bw];
        for y in 0..bh * stride {
            for x in 0..bw * stride {
                if self.get(y, x) == label {
                    out[(y / stride) * bw + x / stride] += 1.0;
                }
            }
        }
        let n = (stride * stride) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Area-max downsampling: a cell is 1 when any pixel in it carries `label`.
    pub fn downsample_any(&self, label: u8, stride: usize) -> Tensor {
        let f = self.block_fractions(label, stride);
        Tensor::new(&[1, self.h / stride, self.w / stride], f.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect())
            .expect("downsample shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let r: Vec<usize> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(r, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn labels_and_areas() {
        let m = LabelMask::new(2, 3, vec![0, 3, 3, 7, 0, 0]).unwrap();
        assert_eq!(m.labels(), vec![3, 7]);
        assert_eq!(m.area(3), 2);
        assert_eq!(m.foreground_area(), 3);
    }

    #[test]
    fn nearest_resize_round_trips_integer_upscale() {
        let m = LabelMask::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let up = m.resize_nearest(4, 6);
        assert_eq!(up.get(0, 0), 1);
        assert_eq!(up.get(3, 5), 4);
        assert_eq!(up.resize_nearest(2, 2), m);
    }

    #[test]
    fn downsample_any_keeps_single_pixels() {
        let mut m = LabelMask::zeros(32, 32);
        m.set(17, 3, 1);
        let d = m.downsample_any(1, 16);
        assert_eq!(d.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let m = LabelMask::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let p = m.pad_reflect(5, 4);
        assert_eq!(p.crop(3, 2), m);
        assert_eq!(p.get(3, 0), m.get(1, 0));
    }
}
