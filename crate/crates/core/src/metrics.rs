//! Region Jaccard, boundary F-measure and their J&F aggregate.

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::mask::LabelMask;

fn check(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(shape_err!("mask sizes differ: {a} vs {b} pixels"));
    }
    Ok(())
}

/// `|pred ∩ gt| / |pred ∪ gt|`; 1 when both are empty.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check(pred.len(), gt.len())?;
    let (mut inter, mut union) = (0u32, 0u32);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p & g) as u32;
        union += (p | g) as u32;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            mask[i] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

/// Match tolerance in pixels for an `h`×`w` image.
pub fn boundary_tolerance(h: usize, w: usize) -> usize {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil() as usize
}

/// Marks every pixel within Euclidean distance `r` of a set pixel.
fn dilate(b: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for (i, _) in b.iter().enumerate().filter(|(_, &v)| v) {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for &(dy, dx) in &offsets {
            let (yy, xx) = (y + dy, x + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                out[yy as usize * w + xx as usize] = true;
            }
        }
    }
    out
}

/// Boundary F-measure with tolerance [`boundary_tolerance`]. Both masks
/// empty scores 1; exactly one empty scores 0.
pub fn boundary_f(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<f64> {
    check(pred.len(), gt.len())?;
    check(pred.len(), h * w)?;
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    let (np, ng) = (bp.iter().filter(|&&v| v).count(), bg.iter().filter(|&&v| v).count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let r = boundary_tolerance(h, w);
    let (dp, dg) = (dilate(&bp, h, w, r), dilate(&bg, h, w, r));
    let matched = |b: &[bool], near: &[bool]| b.iter().zip(near).filter(|(&x, &n)| x && n).count() as f64;
    let precision = matched(&bp, &dg) / np as f64;
    let recall = matched(&bg, &dp) / ng as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// Half-up rounding to two decimals of the decimal value `x` is meant to
/// carry. `x` is first printed to nine decimals so binary representation
/// error (80.894999… for 80.895) cannot flip the result.
pub fn round_half_up_2(x: f64) -> String {
    let s = format!("{:.9}", x.abs());
    let (int, frac) = s.split_once('.').unwrap_or((&s, ""));
    let digit = |i: usize| frac.as_bytes().get(i).map_or(0, |b| (b - b'0') as u64);
    let mut hundredths = int.parse::<u64>().unwrap_or(0) * 100 + digit(0) * 10 + digit(1);
    if digit(2) >= 5 {
        hundredths += 1;
    }
    let sign = if x < 0.0 && hundredths > 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", hundredths / 100, hundredths % 100)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectScores {
    pub object_id: u8,
    /// Per evaluated frame, in `[0,1]`.
    pub j: Vec<f64>,
    pub f: Vec<f64>,
    pub j_mean: f64,
    pub f_mean: f64,
}

/// Sequence scores. `j`, `f` and `jf` are percentages at full precision;
/// the `display` strings are rounded half-up to two decimals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub objects: Vec<ObjectScores>,
    pub frames_evaluated: usize,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub display: Display,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Display {
    pub jf: String,
    pub j: String,
    pub f: String,
}

/// J&F from percentage J and F.
pub fn j_and_f(j: f64, f: f64) -> f64 {
    (j + f) / 2.0
}

impl MetricReport {
    pub fn from_means(objects: Vec<ObjectScores>, frames_evaluated: usize, j: f64, f: f64) -> Self {
        let jf = j_and_f(j, f);
        let display = Display { jf: round_half_up_2(jf), j: round_half_up_2(j), f: round_half_up_2(f) };
        MetricReport { objects, frames_evaluated, j, f, jf, display }
    }

    /// Mean over several sequence reports, each weighted equally.
    pub fn mean(reports: &[MetricReport]) -> Option<(f64, f64, f64)> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let j = reports.iter().map(|r| r.j).sum::<f64>() / n;
        let f = reports.iter().map(|r| r.f).sum::<f64>() / n;
        Some((j, f, j_and_f(j, f)))
    }
}

/// Scores `preds` against `gts` for each object id over frames `1..T`; the
/// annotated frame 0 is excluded unless it is the only frame.
pub fn evaluate_sequence(preds: &[LabelMask], gts: &[LabelMask], object_ids: &[u8]) -> Result<MetricReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(shape_err!("{} predicted frames for {} ground-truth frames", preds.len(), gts.len()));
    }
    let frames: Vec<usize> = if preds.len() == 1 { vec![0] } else { (1..preds.len()).collect() };
    let mut objects = Vec::with_capacity(object_ids.len());
    for &id in object_ids {
        let (mut js, mut fs) = (Vec::new(), Vec::new());
        for &t in &frames {
            let (p, g) = (&preds[t], &gts[t]);
            if p.hw() != g.hw() {
                return Err(shape_err!("frame {t}: prediction {:?} vs ground truth {:?}", p.hw(), g.hw()));
            }
            let (pb, gb) = (p.binary(id), g.binary(id));
            js.push(jaccard(&pb, &gb)?);
            fs.push(boundary_f(&pb, &gb, g.height(), g.width())?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        objects.push(ObjectScores { object_id: id, j_mean: mean(&js), f_mean: mean(&fs), j: js, f: fs });
    }
    let n = objects.len().max(1) as f64;
    let j = 100.0 * objects.iter().map(|o| o.j_mean).sum::<f64>() / n;
    let f = 100.0 * objects.iter().map(|o| o.f_mean).sum::<f64>() / n;
    Ok(MetricReport::from_means(objects, frames.len(), j, f))
}

/// Published leaderboard rows `(J, F, J&F)` used as a self-check.
pub const LEADERBOARD: [(f64, f64, &str); 4] =
    [(76.16, 85.63, "80.90"), (76.42, 85.26, "80.84"), (71.94, 80.76, "76.35"), (71.25, 80.33, "75.79")];

#[derive(Clone, Debug, Serialize)]
pub struct SelftestRow {
    pub j: f64,
    pub f: f64,
    pub expected: String,
    pub computed: String,
    pub pass: bool,
}

/// Recomputes J&F for every leaderboard row.
pub fn selftest() -> Vec<SelftestRow> {
    LEADERBOARD
        .iter()
        .map(|&(j, f, expected)| {
            let jf = j_and_f(j, f);
            let computed = round_half_up_2(jf);
            let pass = (jf - expected.parse::<f64>().unwrap()).abs() <= 0.005 + 1e-9 && computed == expected;
            SelftestRow { j, f, expected: expected.to_string(), computed, pass }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        (0..h * w).map(|i| f(i / w, i % w)).collect()
    }

    #[test]
    fn jaccard_cases() {
        let a = grid(4, 4, |y, x| y < 2 && x < 2);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let b = grid(4, 4, |y, x| y >= 2 && x >= 2);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
        // |∩| = 2, |∪| = 5.
        let p = grid(4, 4, |y, x| y == 0 && x < 4);
        let g = grid(4, 4, |y, x| (y == 0 && x < 2) || (y == 1 && x == 0));
        assert!((jaccard(&p, &g).unwrap() - 0.4).abs() < 1e-15);
        assert!(jaccard(&p, &g[..4]).is_err());
    }

    #[test]
    fn boundary_cases() {
        let a = grid(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        assert_eq!(boundary_f(&a, &a, 8, 8).unwrap(), 1.0);
        let empty = vec![false; 64];
        assert_eq!(boundary_f(&empty, &a, 8, 8).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &empty, 8, 8).unwrap(), 1.0);
        assert_eq!(boundary(&a, 8, 8).iter().filter(|&&v| v).count(), 12);
    }

    #[test]
    fn rounding_is_half_up_on_the_decimal_value() {
        assert_eq!(round_half_up_2(80.895), "80.90");
        assert_eq!(round_half_up_2(80.845), "80.85");
        assert_eq!(round_half_up_2(80.8449), "80.84");
        assert_eq!(round_half_up_2(100.0), "100.00");
        assert_eq!(round_half_up_2(0.004), "0.00");
    }

    #[test]
    fn leaderboard_rows_recompute() {
        for row in selftest() {
            assert!(row.pass, "{row:?}");
        }
    }

    #[test]
    fn perfect_predictions_score_100() {
        let mut m = LabelMask::zeros(16, 16);
        for i in 0..4 {
            m.set(i, i, 1);
            m.set(8 + i, 3, 2);
            m.set(12, 8 + i, 3);
        }
        let seq = vec![m.clone(), m.clone(), m];
        let r = evaluate_sequence(&seq, &seq, &[1, 2, 3]).unwrap();
        assert_eq!((r.j, r.f, r.jf), (100.0, 100.0, 100.0));
        assert_eq!(r.display.jf, "100.00");
        assert_eq!(r.frames_evaluated, 2);
    }
}
