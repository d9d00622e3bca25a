use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Share of the sampled points taken from the most uncertain candidates.
const IMPORTANCE: f64 = 0.75;
/// Candidate pool size as a multiple of the point count.
const OVERSAMPLE: usize = 3;

/// Top-1 minus top-2 probability per pixel of `[K+1,h,w]` probabilities.
fn margins(probs: &Tensor) -> Vec<f64> {
    let s = probs.shape();
    let (k, hw) = (s[0], s[1] * s[2]);
    let d = probs.data();
    (0..hw)
        .map(|p| {
            let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for c in 0..k {
                let v = d[c * hw + p];
                if v > a {
                    b = a;
                    a = v;
                } else if v > b {
                    b = v;
                }
            }
            if k == 1 {
                a
            } else {
                a - b
            }
        })
        .collect()
}

/// Distinct flat pixel indices at which the training loss is evaluated.
///
/// The `3n` pixels with the smallest margin between the two most likely
/// classes form the candidate pool (random order among equal margins); the
/// `round(0.75 n)` most uncertain of them are kept and the remaining points
/// are drawn uniformly from all other pixels. `n` is clipped to the pixel
/// count.
pub fn sample_points(probs: &Tensor, n: usize, seed: u64) -> Result<Vec<usize>> {
    if probs.ndim() != 3 || probs.shape()[0] == 0 {
        return Err(shape_err!("point sampling needs [K+1,h,w] probabilities, got {:?}", probs.shape()));
    }
    let hw = probs.shape()[1] * probs.shape()[2];
    let n = n.min(hw);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = margins(probs);
    let jitter: Vec<u64> = (0..hw).map(|_| rng.gen()).collect();
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by(|&a, &b| m[a].total_cmp(&m[b]).then(jitter[a].cmp(&jitter[b])));
    order.truncate((OVERSAMPLE * n).min(hw));
    let n_imp = ((IMPORTANCE * n as f64).round() as usize).min(order.len());
    let mut chosen = vec![false; hw];
    let mut out: Vec<usize> = order[..n_imp].to_vec();
    out.iter().for_each(|&p| chosen[p] = true);
    let mut rest: Vec<usize> = (0..hw).filter(|&p| !chosen[p]).collect();
    rest.shuffle(&mut rng);
    out.extend(rest.into_iter().take(n - n_imp));
    Ok(out)
}
