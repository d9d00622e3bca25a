//! Sequences on disk and in memory.
//!
//! A sequence directory holds `frames/%05d.ppm`, `annotation/00000.pgm` and
//! optionally `gt/%05d.pgm`. Results go to `masks/%05d.pgm`,
//! `overlays/%05d.ppm`, `metrics.json` and `memlog.jsonl`.

pub mod pnm;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

pub use synth::{synth_generate, HiddenInterval, SyntheticSpec};

/// Frames with one ground-truth label mask per frame.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Tensor>,
    pub masks: Vec<LabelMask>,
}

#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub frames: Vec<Tensor>,
    pub first_mask: LabelMask,
    pub gt: Option<Vec<LabelMask>>,
    /// `(id on disk, id used internally)` for every annotated object.
    pub id_map: Vec<(u8, u8)>,
    pub warnings: Vec<String>,
}

impl LoadedSequence {
    /// Maps internal ids back to the ids found on disk.
    pub fn restore_ids(&self, mask: &LabelMask) -> LabelMask {
        mask.map_labels(|v| self.id_map.iter().find(|&&(_, new)| new == v).map_or(v, |&(old, _)| old))
    }
}

/// Sorted files in `dir` with the given extension.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

/// Reads every `.pgm` in `dir`, in filename order.
pub fn load_masks(dir: &Path) -> Result<Vec<LabelMask>> {
    list_files(dir, "pgm")?.iter().map(|p| pnm::read_pgm(p)).collect()
}

pub fn load_sequence(dir: &Path) -> Result<LoadedSequence> {
    let frame_dir = dir.join("frames");
    if !frame_dir.is_dir() {
        return Err(Error::Input(format!("{} has no frames/ directory", dir.display())));
    }
    let frames: Vec<Tensor> = list_files(&frame_dir, "ppm")?.iter().map(|p| pnm::read_ppm(p)).collect::<Result<_>>()?;
    let Some(first) = frames.first() else {
        return Err(Error::Input(format!("{} contains no frames", frame_dir.display())));
    };
    let shape = first.shape().to_vec();
    if let Some(f) = frames.iter().find(|f| f.shape() != shape.as_slice()) {
        return Err(Error::Input(format!("frames differ in size: {:?} vs {:?}", shape, f.shape())));
    }
    let hw = (shape[1], shape[2]);
    let ann = dir.join("annotation").join("00000.pgm");
    if !ann.is_file() {
        return Err(Error::Input(format!("missing first-frame annotation {}", ann.display())));
    }
    let raw_first = pnm::read_pgm(&ann)?;
    if raw_first.hw() != hw {
        return Err(Error::Input(format!("annotation is {:?} but frames are {hw:?}", raw_first.hw())));
    }
    let gt_dir = dir.join("gt");
    let raw_gt = if gt_dir.is_dir() {
        let gt = load_masks(&gt_dir)?;
        if gt.len() != frames.len() || gt.iter().any(|m| m.hw() != hw) {
            return Err(Error::Input(format!(
                "{} must hold one {}x{} mask per frame ({} frames, {} masks)",
                gt_dir.display(),
                hw.0,
                hw.1,
                frames.len(),
                gt.len()
            )));
        }
        Some(gt)
    } else {
        None
    };

    let id_map: Vec<(u8, u8)> = raw_first.labels().into_iter().zip(1u8..).collect();
    let mut warnings = Vec::new();
    if id_map.iter().any(|(a, b)| a != b) {
        warnings.push(format!("object ids remapped: {id_map:?}"));
    }
    let remap = |v: u8| id_map.iter().find(|&&(old, _)| old == v).map_or(0, |&(_, new)| new);
    Ok(LoadedSequence {
        frames,
        first_mask: raw_first.map_labels(remap),
        gt: raw_gt.map(|g| g.iter().map(|m| m.map_labels(remap)).collect()),
        id_map,
        warnings,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn numbered(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{i:05}.{ext}"))
}

/// Writes a generated sequence in the on-disk layout, ground truth included.
pub fn save_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    let (fd, ad, gd) = (dir.join("frames"), dir.join("annotation"), dir.join("gt"));
    for d in [&fd, &ad, &gd] {
        ensure_dir(d)?;
    }
    for (i, (f, m)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        pnm::write_ppm(&numbered(&fd, i, "ppm"), f)?;
        pnm::write_pgm(&numbered(&gd, i, "pgm"), m)?;
    }
    if let Some(m) = seq.masks.first() {
        pnm::write_pgm(&numbered(&ad, 0, "pgm"), m)?;
    }
    Ok(())
}

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.35, 0.95],
    [0.95, 0.80, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.55, 0.55],
];

/// Frame with labelled pixels blended half-way towards a per-label colour.
pub fn overlay(frame: &Tensor, mask: &LabelMask) -> Tensor {
    let (h, w) = mask.hw();
    let d = frame.data();
    Tensor::from_fn(frame.shape(), |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        match mask.data()[p] {
            0 => d[i],
            l => 0.5 * d[i] + 0.5 * PALETTE[(l as usize - 1) % PALETTE.len()][c],
        }
    })
}

/// Everything `save_outputs` may write; absent parts are skipped.
#[derive(Default)]
pub struct Outputs<'a> {
    pub masks: &'a [LabelMask],
    /// Frames matching `masks`, for overlays.
    pub frames: Option<&'a [Tensor]>,
    pub report: Option<&'a serde_json::Value>,
    pub memlog: Option<&'a str>,
}

pub fn save_outputs(dir: &Path, out: &Outputs) -> Result<()> {
    ensure_dir(dir)?;
    if !out.masks.is_empty() {
        let md = dir.join("masks");
        ensure_dir(&md)?;
        for (i, m) in out.masks.iter().enumerate() {
            pnm::write_pgm(&numbered(&md, i, "pgm"), m)?;
        }
        if let Some(frames) = out.frames {
            let od = dir.join("overlays");
            ensure_dir(&od)?;
            for (i, (f, m)) in frames.iter().zip(out.masks).enumerate() {
                pnm::write_ppm(&numbered(&od, i, "ppm"), &overlay(f, m))?;
            }
        }
    }
    if let Some(report) = out.report {
        let path = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(report).map_err(|e| Error::Input(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    if let Some(log) = out.memlog {
        let path = dir.join("memlog.jsonl");
        std::fs::write(&path, log).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
