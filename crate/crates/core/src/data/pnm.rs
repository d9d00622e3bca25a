//! Binary PPM (P6) frames and PGM (P5) label masks, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, w: usize, h: usize, body: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(body);
    out
}

/// Writes a `[3,h,w]` frame with values in `[0,1]`.
pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("ppm frame must be [3,h,w], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = frame.data();
    let mut body = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            body.push(quantize(d[c * h * w + p]));
        }
    }
    std::fs::write(path, encode("P6", w, h, &body)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    let (h, w) = mask.hw();
    std::fs::write(path, encode("P5", w, h, mask.data())).map_err(|e| Error::io(path, e))
}

/// Splits a binary PNM file into its magic, extents and pixel bytes.
fn parse(path: &Path, bytes: &[u8]) -> Result<(String, usize, usize, Vec<u8>)> {
    let bad = |why: String| Error::Input(format!("{}: {why}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad(format!("only 8-bit images are supported, maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(bad("empty image".into()));
    }
    Ok((fields[0].clone(), w, h, bytes.get(pos..).unwrap_or(&[]).to_vec()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (magic, w, h, raster) = parse(path, &read_bytes(path)?)?;
    if magic != "P6" || raster.len() < 3 * w * h {
        return Err(Error::Input(format!("{}: not a complete binary PPM", path.display())));
    }
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = raster[3 * p + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<LabelMask> {
    let (magic, w, h, raster) = parse(path, &read_bytes(path)?)?;
    if magic != "P5" || raster.len() < w * h {
        return Err(Error::Input(format!("{}: not a complete binary PGM", path.display())));
    }
    LabelMask::new(h, w, raster[..w * h].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_frames_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        let f = Tensor::from_fn(&[3, 5, 7], |i| (i % 256) as f64 / 255.0);
        write_ppm(&path, &f).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), f);
    }

    #[test]
    fn masks_round_trip_and_comments_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = LabelMask::new(2, 3, vec![0, 1, 2, 3, 255, 9]).unwrap();
        write_pgm(&path, &m).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), m);
        let mut bytes = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3, 255, 9]);
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), m);
    }

    #[test]
    fn rejects_wrong_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"P5\n2 2\n65535\n").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Input(_))));
        std::fs::write(&path, b"P6\n2 2\n255\nabc").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Input(_))));
        assert!(matches!(read_ppm(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
