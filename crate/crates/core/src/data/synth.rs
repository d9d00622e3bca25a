//! Moving-shapes generator: rectangles, disks and L-shapes with linear drift,
//! sinusoidal jitter, bouncing at the borders, depth-ordered occlusion and
//! scheduled disappearances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sequence;
use crate::config::{parse_bool, parse_key_values, parse_value};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

pub const MAX_OBJECTS: usize = 5;

/// Object `object` (0-based) is absent on frames `start..end`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HiddenInterval {
    pub object: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_objects: usize,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Scales drift speed and jitter; 0 gives static objects.
    pub motion: f64,
    /// Sends object 1 across object 0's mid-sequence position, in front of it.
    pub occlusion: bool,
    pub hidden: Vec<HiddenInterval>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_objects: 3,
            frame_count: 24,
            height: 64,
            width: 64,
            noise: 0.02,
            motion: 1.0,
            occlusion: false,
            hidden: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_objects" => self.num_objects = parse_value(key, value)?,
            "frame_count" => self.frame_count = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "motion" => self.motion = parse_value(key, value)?,
            "occlusion" => self.occlusion = parse_bool(key, value)?,
            "hidden" => self.hidden = parse_hidden(value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown synthetic setting {key:?}"))),
        }
        Ok(())
    }

    /// Reads `key=value` text; keys it does not know are returned untouched
    /// so callers can layer other settings in the same file.
    pub fn from_key_values_lenient(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut spec = SyntheticSpec::default();
        let mut rest = Vec::new();
        for (k, v) in parse_key_values(text)? {
            match spec.set(&k, &v) {
                Err(Error::Config(msg)) if msg.starts_with("unknown") => rest.push((k, v)),
                other => other?,
            }
        }
        Ok((spec, rest))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_objects == 0 || self.num_objects > MAX_OBJECTS {
            return err(format!("num_objects must be 1..={MAX_OBJECTS}, got {}", self.num_objects));
        }
        if self.frame_count == 0 || self.height < 16 || self.width < 16 {
            return err(format!(
                "need at least one frame of 16x16, got {} frames of {}x{}",
                self.frame_count, self.height, self.width
            ));
        }
        if !(self.noise >= 0.0 && self.motion >= 0.0) {
            return err("noise and motion must be nonnegative".into());
        }
        for h in &self.hidden {
            if h.object >= self.num_objects || h.start == 0 || h.start >= h.end || h.end > self.frame_count {
                return err(format!(
                    "hidden interval {}:{}-{} must name an existing object, start after frame 0 and end by frame {}",
                    h.object, h.start, h.end, self.frame_count
                ));
            }
        }
        Ok(())
    }
}

/// `obj:start-end` items separated by commas, e.g. `1:8-12,2:3-5`.
fn parse_hidden(v: &str) -> Result<Vec<HiddenInterval>> {
    let bad = || Error::Config(format!("hidden: expected obj:start-end[,..], got {v:?}"));
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (o, range) = item.trim().split_once(':').ok_or_else(bad)?;
            let (s, e) = range.split_once('-').ok_or_else(bad)?;
            Ok(HiddenInterval {
                object: o.trim().parse().map_err(|_| bad())?,
                start: s.trim().parse().map_err(|_| bad())?,
                end: e.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { h: usize, w: usize },
    Disk { r: f64 },
    L { s: usize },
}

impl Shape {
    fn extent(&self) -> (usize, usize) {
        match *self {
            Shape::Rect { h, w } => (h, w),
            Shape::Disk { r } => {
                let d = (2.0 * r).ceil() as usize;
                (d, d)
            }
            Shape::L { s } => (s, s),
        }
    }

    fn covers(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { h, w } => y < h && x < w,
            Shape::Disk { r } => {
                let (dy, dx) = (y as f64 + 0.5 - r, x as f64 + 0.5 - r);
                dy * dy + dx * dx <= r * r
            }
            Shape::L { s } => y < s && x < s && !(y < s / 2 && x >= s / 2),
        }
    }

    fn area(&self) -> usize {
        let (h, w) = self.extent();
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| self.covers(y, x)).count()
    }
}

/// Per-axis motion: drift plus jitter, folded back into `[0, range]`.
#[derive(Clone, Copy, Debug)]
struct Track {
    start: f64,
    velocity: f64,
    amp: f64,
    freq: f64,
    phase: f64,
    range: f64,
}

impl Track {
    fn at(&self, t: usize) -> f64 {
        let t = t as f64;
        let raw = self.start + self.velocity * t + self.amp * (self.freq * t + self.phase).sin();
        if self.range <= 0.0 {
            return 0.0;
        }
        let m = raw.rem_euclid(2.0 * self.range);
        if m > self.range {
            2.0 * self.range - m
        } else {
            m
        }
    }
}

struct Object {
    shape: Shape,
    color: [f64; 3],
    ty: Track,
    tx: Track,
    depth: usize,
}

fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn random_object(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, used: &[[f64; 3]]) -> Object {
    let side = spec.height.min(spec.width) as f64;
    let size = |rng: &mut ChaCha8Rng| ((side * rng.gen_range(0.16..0.3)).round() as usize).max(4);
    let shape = match rng.gen_range(0..3) {
        0 => Shape::Rect { h: size(rng), w: size(rng) },
        1 => Shape::Disk { r: size(rng) as f64 / 2.0 },
        _ => Shape::L { s: size(rng).max(6) },
    };
    let mut color = [0.0; 3];
    for _ in 0..200 {
        color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        if used.iter().all(|u| color_distance(u, &color) > 0.45) {
            break;
        }
    }
    let (eh, ew) = shape.extent();
    let (ry, rx) = (spec.height.saturating_sub(eh) as f64, spec.width.saturating_sub(ew) as f64);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(0.5..1.5) * spec.motion;
    let mut track = |range: f64, v: f64| Track {
        start: rng.gen_range(0.0..=range.max(0.0)),
        velocity: v,
        amp: rng.gen_range(0.0..1.5) * spec.motion,
        freq: rng.gen_range(0.2..0.6),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        range,
    };
    let ty = track(ry, speed * angle.sin());
    let tx = track(rx, speed * angle.cos());
    Object { shape, color, ty, tx, depth: 0 }
}

fn hidden_at(spec: &SyntheticSpec, object: usize, t: usize) -> bool {
    spec.hidden.iter().any(|h| h.object == object && (h.start..h.end).contains(&t))
}

fn render_mask(spec: &SyntheticSpec, objects: &[Object], t: usize) -> LabelMask {
    let mut mask = LabelMask::zeros(spec.height, spec.width);
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by_key(|&i| objects[i].depth);
    for i in order {
        if hidden_at(spec, i, t) {
            continue;
        }
        let o = &objects[i];
        let (y0, x0) = (o.ty.at(t).round() as usize, o.tx.at(t).round() as usize);
        let (eh, ew) = o.shape.extent();
        for dy in 0..eh {
            for dx in 0..ew {
                let (y, x) = (y0 + dy, x0 + dx);
                if y < spec.height && x < spec.width && o.shape.covers(dy, dx) {
                    mask.set(y, x, (i + 1) as u8);
                }
            }
        }
    }
    mask
}

/// Renders the sequence described by `spec`. Identical specs give bitwise
/// identical output.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Sequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let mut objects = Vec::new();
    let mut accepted = false;
    for _ in 0..200 {
        objects.clear();
        let mut used = vec![background];
        for _ in 0..spec.num_objects {
            let o = random_object(&mut rng, spec, &used);
            used.push(o.color);
            objects.push(o);
        }
        let mut depths: Vec<usize> = (0..spec.num_objects).collect();
        depths.shuffle(&mut rng);
        for (o, d) in objects.iter_mut().zip(depths) {
            o.depth = d;
        }
        if spec.occlusion && spec.num_objects >= 2 {
            arrange_occlusion(spec, &mut objects);
        }
        let first = render_mask(spec, &objects, 0);
        accepted = objects.iter().enumerate().all(|(i, o)| 4 * first.area((i + 1) as u8) >= o.shape.area());
        if accepted {
            break;
        }
    }
    if !accepted {
        return Err(Error::Config("could not place every object visibly in frame 0".into()));
    }

    let normal = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut masks = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        let mask = render_mask(spec, &objects, t);
        let mut data = vec![0.0; 3 * h * w];
        for p in 0..h * w {
            let label = mask.data()[p] as usize;
            let color = if label == 0 { &background } else { &objects[label - 1].color };
            for c in 0..3 {
                let n = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                data[c * h * w + p] = (color[c] + n).clamp(0.0, 1.0);
            }
        }
        frames.push(Tensor::new(&[3, h, w], data)?);
        masks.push(mask);
    }
    Ok(Sequence { frames, masks })
}

/// Object 1 moves horizontally through object 0's position at mid-sequence
/// and is drawn in front of it.
fn arrange_occlusion(spec: &SyntheticSpec, objects: &mut [Object]) {
    let mid = spec.frame_count / 2;
    let (y0, x0) = (objects[0].ty.at(mid), objects[0].tx.at(mid));
    let (eh, ew) = objects[1].shape.extent();
    let (ry, rx) = (spec.height.saturating_sub(eh) as f64, spec.width.saturating_sub(ew) as f64);
    let speed = 1.5 * spec.motion.max(0.2);
    objects[1].ty = Track { start: y0.min(ry), velocity: 0.0, amp: 0.0, freq: 0.0, phase: 0.0, range: ry };
    objects[1].tx = Track {
        start: x0.min(rx) - speed * mid as f64,
        velocity: speed,
        amp: 0.0,
        freq: 0.0,
        phase: 0.0,
        range: rx,
    };
    // The others keep their relative order beneath objects 0 and 1.
    let mut order: Vec<usize> = (2..objects.len()).collect();
    order.sort_by_key(|&i| objects[i].depth);
    for (rank, i) in order.into_iter().enumerate() {
        objects[i].depth = rank;
    }
    let n = objects.len();
    objects[0].depth = n - 2;
    objects[1].depth = n - 1;
}
