//! Pixel-level key/value memory: encoding heads, affinity readout, and a
//! capacity-bounded bank with usage-driven consolidation.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::mask::LabelMask;
use crate::nn::{from_rows, to_rows, Conv, Ctx, Init};
use crate::tensor::{Tensor, Var};

pub struct MemoryHeads {
    key_dim: usize,
    key: Conv,
    value: [Conv; 2],
    fuse: [Conv; 2],
}

/// Result of reading memory for one object.
pub struct Readout {
    /// Correlated map `[C, h, w]`.
    pub correlated: Var,
    /// Affinity `[h·w, N]`; rows sum to 1.
    pub affinity: Var,
}

impl MemoryHeads {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        MemoryHeads {
            key_dim: cfg.key_dim,
            key: init.conv("mem.key", cfg.c16, cfg.key_dim, 1, 1, 0),
            value: [
                init.conv("mem.value.0", cfg.c16 + 1, cfg.value_dim, 3, 1, 1),
                init.conv("mem.value.1", cfg.value_dim, cfg.value_dim, 1, 1, 0),
            ],
            fuse: [
                init.conv("mem.fuse.0", cfg.value_dim + cfg.c16, cfg.corr_dim, 1, 1, 0),
                init.conv("mem.fuse.1", cfg.corr_dim, cfg.corr_dim, 3, 1, 1),
            ],
        }
    }

    /// `[C_k, h, w]` key of stride-16 features.
    pub fn encode_key(&self, ctx: &mut Ctx, f16: Var) -> Result<Var> {
        self.key.forward(ctx, f16)
    }

    /// Value of one object from stride-16 features and its `[1,h,w]` mask plane.
    pub fn encode_value(&self, ctx: &mut Ctx, f16: Var, mask_plane: Var) -> Result<Var> {
        let (fs, ms) = (ctx.shape(f16).to_vec(), ctx.shape(mask_plane).to_vec());
        if ms.len() != 3 || ms[0] != 1 || ms[1..] != fs[1..] {
            return Err(shape_err!("value mask plane {ms:?} for features {fs:?}"));
        }
        let x = ctx.concat(&[f16, mask_plane])?;
        let h = self.value[0].forward(ctx, x)?;
        let h = ctx.gelu(h);
        self.value[1].forward(ctx, h)
    }

    /// Affinity-weighted readout of `values` (`[N, C_v]`) for every location
    /// of `query_key`, fused with the query frame's stride-16 features.
    pub fn read(&self, ctx: &mut Ctx, query_key: Var, keys: Var, values: Var, f16: Var) -> Result<Readout> {
        let s = ctx.shape(query_key).to_vec();
        let (n, nv) = (ctx.shape(keys)[0], ctx.shape(values)[0]);
        if ctx.shape(keys) != [n, self.key_dim] || n != nv {
            return Err(shape_err!("memory keys {:?} with values {:?}", ctx.shape(keys), ctx.shape(values)));
        }
        let (h, w) = (s[1], s[2]);
        let q = to_rows(ctx, query_key)?;
        let scores = ctx.matmul_nt(q, keys)?;
        let scores = ctx.scale(scores, 1.0 / (self.key_dim as f64).sqrt());
        let affinity = ctx.softmax_lastdim(scores);
        let rows = ctx.matmul(affinity, values)?;
        let readout = from_rows(ctx, rows, h, w)?;
        let x = ctx.concat(&[readout, f16])?;
        let y = self.fuse[0].forward(ctx, x)?;
        let y = ctx.gelu(y);
        let correlated = self.fuse[1].forward(ctx, y)?;
        Ok(Readout { correlated, affinity })
    }
}

/// Write gate: the annotated frame always, otherwise every `interval`-th
/// frame whose prediction has any foreground.
pub fn should_write(frame_idx: usize, interval: usize, predicted: &LabelMask) -> bool {
    frame_idx == 0 || (frame_idx.is_multiple_of(interval) && predicted.foreground_area() > 0)
}

/// One line of the memory debug log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MemEvent {
    Write { frame_idx: usize, n_before: usize, n_after: usize, cap: usize },
    Consolidate { frame_idx: usize, n_before: usize, n_after: usize, cap: usize },
    Skip { frame_idx: usize, n: usize },
}

/// Inference-time memory for one sequence (or one fusion branch).
///
/// Elements are stored row-major: `keys` is `[N, C_k]` and each object's
/// values are `[N, C_v]`.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    key_dim: usize,
    value_dim: usize,
    cap: usize,
    keys: Vec<f64>,
    values: Vec<Vec<f64>>,
    usage: Vec<f64>,
    reads: Vec<f64>,
    provenance: Vec<usize>,
    write_log: Vec<usize>,
    events: Vec<MemEvent>,
}

impl MemoryBank {
    pub fn new(key_dim: usize, value_dim: usize, num_objects: usize, cap: usize) -> Self {
        MemoryBank {
            key_dim,
            value_dim,
            cap,
            keys: Vec::new(),
            values: vec![Vec::new(); num_objects],
            usage: Vec::new(),
            reads: Vec::new(),
            provenance: Vec::new(),
            write_log: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.usage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.usage.is_empty()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn num_objects(&self) -> usize {
        self.values.len()
    }

    pub fn usage(&self) -> &[f64] {
        &self.usage
    }

    pub fn provenance(&self) -> &[usize] {
        &self.provenance
    }

    pub fn write_log(&self) -> &[usize] {
        &self.write_log
    }

    pub fn events(&self) -> &[MemEvent] {
        &self.events
    }

    pub fn log_skip(&mut self, frame_idx: usize) {
        self.events.push(MemEvent::Skip { frame_idx, n: self.len() });
    }

    pub fn keys(&self) -> Result<Tensor> {
        self.nonempty()?;
        Tensor::new(&[self.len(), self.key_dim], self.keys.clone())
    }

    pub fn values(&self, object: usize) -> Result<Tensor> {
        self.nonempty()?;
        Tensor::new(&[self.len(), self.value_dim], self.values[object].clone())
    }

    fn nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(contract_err!("memory read from an empty bank"));
        }
        Ok(())
    }

    /// Appends every location of a `[C_k,h,w]` key and the matching
    /// per-object `[C_v,h,w]` values, consolidating if over capacity.
    pub fn write(&mut self, key: &Tensor, values: &[Tensor], frame_idx: usize) -> Result<()> {
        if let Some(&last) = self.write_log.last() {
            if frame_idx <= last {
                return Err(contract_err!("memory write for frame {frame_idx} after frame {last}"));
            }
        }
        let ks = key.shape();
        if ks.len() != 3 || ks[0] != self.key_dim || values.len() != self.values.len() {
            return Err(shape_err!("memory write key {ks:?} with {} value maps", values.len()));
        }
        if let Some(v) = values.iter().find(|v| v.shape() != [self.value_dim, ks[1], ks[2]]) {
            return Err(shape_err!("memory value {:?} for key {ks:?}", v.shape()));
        }
        let n_before = self.len();
        let hw = ks[1] * ks[2];
        self.keys.extend(key.reshape(&[self.key_dim, hw])?.transpose2()?.data());
        for (store, v) in self.values.iter_mut().zip(values) {
            store.extend(v.reshape(&[self.value_dim, hw])?.transpose2()?.data());
        }
        self.usage.extend(std::iter::repeat_n(0.0, hw));
        self.reads.extend(std::iter::repeat_n(0.0, hw));
        self.provenance.extend(std::iter::repeat_n(frame_idx, hw));
        self.write_log.push(frame_idx);
        self.events.push(MemEvent::Write { frame_idx, n_before, n_after: self.len(), cap: self.cap });
        if self.len() > self.cap {
            self.consolidate()?;
        }
        Ok(())
    }

    /// Adds the column sums of an `[h·w, N]` affinity to the usage counters.
    pub fn record_read(&mut self, affinity: &Tensor) -> Result<()> {
        if affinity.ndim() != 2 || affinity.shape()[1] != self.len() {
            return Err(shape_err!("affinity {:?} for a bank of {}", affinity.shape(), self.len()));
        }
        let n = self.len();
        for row in affinity.data().chunks(n) {
            self.usage.iter_mut().zip(row).for_each(|(u, a)| *u += a);
        }
        self.reads.iter_mut().for_each(|r| *r += 1.0);
        Ok(())
    }

    /// Retention score: usage per read since the element was written.
    /// Elements that have not been read yet are kept unconditionally.
    fn score(&self, j: usize) -> f64 {
        if self.reads[j] == 0.0 {
            f64::INFINITY
        } else {
            self.usage[j] / self.reads[j]
        }
    }

    /// Shrinks the bank to `cap`. Elements of the first written frame are
    /// never evicted; the rest are ranked by retention score and each evicted
    /// element is merged into the surviving non-pinned element with the
    /// nearest key.
    pub fn consolidate(&mut self) -> Result<()> {
        let n = self.len();
        if n <= self.cap {
            return Ok(());
        }
        let first = self.write_log[0];
        let pinned: Vec<bool> = self.provenance.iter().map(|&p| p == first).collect();
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        if self.cap < n_pinned {
            return Err(Error::Config(format!(
                "memory cap {} is below the {n_pinned} pinned first-frame elements",
                self.cap
            )));
        }
        let mut ranked: Vec<usize> = (0..n).filter(|&j| !pinned[j]).collect();
        ranked.sort_by(|&a, &b| self.score(b).total_cmp(&self.score(a)).then(a.cmp(&b)));
        let keep_count = self.cap - n_pinned;
        let mut keep = pinned.clone();
        for &j in &ranked[..keep_count] {
            keep[j] = true;
        }
        let survivors = &ranked[..keep_count];
        for &e in &ranked[keep_count..] {
            if let Some(s) = self.nearest(e, survivors) {
                self.merge_into(s, e);
            }
        }
        let kept: Vec<usize> = (0..n).filter(|&j| keep[j]).collect();
        self.retain(&kept);
        let frame_idx = *self.write_log.last().unwrap();
        self.events.push(MemEvent::Consolidate { frame_idx, n_before: n, n_after: self.len(), cap: self.cap });
        Ok(())
    }

    fn key_row(&self, j: usize) -> &[f64] {
        &self.keys[j * self.key_dim..(j + 1) * self.key_dim]
    }

    /// Nearest candidate by squared L2 key distance, lowest index on ties.
    fn nearest(&self, e: usize, candidates: &[usize]) -> Option<usize> {
        let ke = self.key_row(e);
        let mut sorted = candidates.to_vec();
        sorted.sort_unstable();
        let mut best: Option<(usize, f64)> = None;
        for s in sorted {
            let d: f64 = self.key_row(s).iter().zip(ke).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((s, d));
            }
        }
        best.map(|(s, _)| s)
    }

    fn merge_into(&mut self, s: usize, e: usize) {
        let (us, ue) = (self.usage[s], self.usage[e]);
        let (ws, we) = if us + ue > 0.0 { (us / (us + ue), ue / (us + ue)) } else { (0.5, 0.5) };
        let c = self.value_dim;
        for store in &mut self.values {
            for i in 0..c {
                store[s * c + i] = ws * store[s * c + i] + we * store[e * c + i];
            }
        }
        self.usage[s] = us + ue;
    }

    fn retain(&mut self, kept: &[usize]) {
        let pick = |data: &[f64], width: usize| -> Vec<f64> {
            kept.iter().flat_map(|&j| data[j * width..(j + 1) * width].iter().copied()).collect()
        };
        self.keys = pick(&self.keys, self.key_dim);
        self.values = self.values.iter().map(|v| pick(v, self.value_dim)).collect();
        self.usage = pick(&self.usage, 1);
        self.reads = pick(&self.reads, 1);
        self.provenance = kept.iter().map(|&j| self.provenance[j]).collect();
    }

    /// The debug log as JSON lines.
    pub fn events_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn set_usage(&mut self, usage: Vec<f64>, reads: Vec<f64>) {
        assert_eq!(usage.len(), self.len());
        self.usage = usage;
        self.reads = reads;
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::ParamSet;
    use crate::tensor::{fd_gradcheck, Tape};

    fn heads(cfg: &ModelConfig, seed: u64) -> (ParamSet, MemoryHeads) {
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = MemoryHeads::new(&mut Init { params: &mut params, rng: &mut rng }, cfg);
        (params, h)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn write_gate_truth_table() {
        let empty = LabelMask::zeros(4, 4);
        let mut full = LabelMask::zeros(4, 4);
        full.set(1, 2, 1);
        for idx in 0..100 {
            for (mask, nonempty) in [(&empty, false), (&full, true)] {
                let expected = idx == 0 || (idx % 3 == 0 && nonempty);
                assert_eq!(should_write(idx, 3, mask), expected, "idx {idx}");
            }
        }
        assert!(should_write(0, 3, &empty));
        assert!(!should_write(3, 3, &empty));
        assert!(!should_write(4, 3, &full));
        assert!(should_write(6, 3, &full));
    }

    #[test]
    fn key_and_value_shapes() {
        let cfg = ModelConfig::default();
        let (params, h) = heads(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &params);
        let f16 = ctx.constant(random(&[128, 4, 4], &mut rng));
        let k = h.encode_key(&mut ctx, f16).unwrap();
        assert_eq!(ctx.shape(k), &[32, 4, 4]);
        let empty = ctx.constant(Tensor::zeros(&[1, 4, 4]));
        let v = h.encode_value(&mut ctx, f16, empty).unwrap();
        assert_eq!(ctx.shape(v), &[64, 4, 4]);
        assert!(ctx.value(v).is_finite());
        let wrong = ctx.constant(Tensor::zeros(&[1, 8, 8]));
        assert!(h.encode_value(&mut ctx, f16, wrong).is_err());
    }

    #[test]
    fn value_head_gradcheck() {
        let cfg = ModelConfig::tiny();
        let (params, h) = heads(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = Tensor::from_fn(&[1, 3, 3], |i| (i % 2) as f64);
        let probe = random(&[4, 3, 3], &mut rng);
        let err = fd_gradcheck(
            |tape, f| {
                let mut ctx = Ctx::new(tape, &params);
                let m = ctx.constant(mask.clone());
                let v = h.encode_value(&mut ctx, f, m)?;
                let p = ctx.constant(probe.clone());
                let y = ctx.mul(v, p)?;
                Ok(ctx.sum(y))
            },
            &random(&[6, 3, 3], &mut rng),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_element_readout_is_broadcast() {
        let cfg = ModelConfig::default();
        let (params, h) = heads(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &params);
        let qk = ctx.constant(random(&[32, 3, 5], &mut rng));
        let keys = ctx.constant(random(&[1, 32], &mut rng));
        let vals = random(&[1, 64], &mut rng);
        let values = ctx.constant(vals.clone());
        let f16 = ctx.constant(random(&[128, 3, 5], &mut rng));
        let out = h.read(&mut ctx, qk, keys, values, f16).unwrap();
        assert!(ctx.value(out.affinity).data().iter().all(|&a| a == 1.0));
        // Rebuild the readout half of the fusion input from the affinity.
        let rows = ctx.matmul(out.affinity, values).unwrap();
        for r in 0..15 {
            assert_eq!(ctx.value(rows).row(r), vals.data());
        }
    }

    #[test]
    fn usage_mass_matches_query_locations() {
        let cfg = ModelConfig::default();
        let (params, h) = heads(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bank = MemoryBank::new(32, 64, 2, 64);
        let key = random(&[32, 4, 4], &mut rng);
        bank.write(&key, &[random(&[64, 4, 4], &mut rng), random(&[64, 4, 4], &mut rng)], 0).unwrap();
        let mut tape = Tape::no_grad();
        let mut ctx = Ctx::new(&mut tape, &params);
        let qk = ctx.constant(random(&[32, 4, 4], &mut rng));
        let keys = ctx.constant(bank.keys().unwrap());
        let values = ctx.constant(bank.values(1).unwrap());
        let f16 = ctx.constant(random(&[128, 4, 4], &mut rng));
        let out = h.read(&mut ctx, qk, keys, values, f16).unwrap();
        let aff = ctx.value(out.affinity).clone();
        for r in 0..16 {
            assert!((aff.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        bank.record_read(&aff).unwrap();
        assert!((bank.usage().iter().sum::<f64>() - 16.0).abs() < 1e-6);
    }

    #[test]
    fn empty_bank_rejects_reads() {
        let bank = MemoryBank::new(4, 4, 1, 8);
        assert!(matches!(bank.keys(), Err(Error::Contract(_))));
    }

    #[test]
    fn write_log_and_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bank = MemoryBank::new(4, 3, 1, 1000);
        for f in [0, 3, 6] {
            bank.write(&random(&[4, 4, 4], &mut rng), &[random(&[3, 4, 4], &mut rng)], f).unwrap();
        }
        assert_eq!(bank.len(), 48);
        assert_eq!(bank.write_log(), &[0, 3, 6]);
        let dup = bank.write(&random(&[4, 4, 4], &mut rng), &[random(&[3, 4, 4], &mut rng)], 6);
        assert!(matches!(dup, Err(Error::Contract(_))));
    }

    #[test]
    fn consolidation_keeps_highest_usage_and_pins_first_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..50 {
            let mut bank = MemoryBank::new(4, 3, 2, 1000);
            let mk = |rng: &mut ChaCha8Rng| (random(&[4, 4, 4], rng), vec![random(&[3, 4, 4], rng), random(&[3, 4, 4], rng)]);
            for f in [0, 3, 6] {
                let (k, v) = mk(&mut rng);
                bank.write(&k, &v, f).unwrap();
            }
            let usage: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..10.0)).collect();
            bank.set_usage(usage.clone(), vec![1.0; 48]);
            let all_keys = bank.keys.clone();
            let pinned_vals = bank.values[0][..16 * 3].to_vec();
            bank.cap = 32;
            bank.consolidate().unwrap();
            assert_eq!(bank.len(), 32, "trial {trial}");
            // Brute-force oracle: the 16 largest usages among the 32 candidates,
            // kept in their original order.
            let mut cands: Vec<(f64, usize)> = (16..48).map(|j| (usage[j], j)).collect();
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut expected: Vec<usize> = cands[..16].iter().map(|c| c.1).collect();
            expected.sort_unstable();
            let expected_keys: Vec<f64> =
                expected.iter().flat_map(|&j| all_keys[j * 4..(j + 1) * 4].iter().copied()).collect();
            assert_eq!(&bank.keys[16 * 4..], expected_keys.as_slice());
            // Pinned elements are bitwise untouched and still first.
            assert_eq!(&bank.keys[..16 * 4], &all_keys[..16 * 4]);
            assert_eq!(&bank.values[0][..16 * 3], pinned_vals.as_slice());
            assert!(bank.provenance()[..16].iter().all(|&p| p == 0));
        }
    }

    #[test]
    fn identical_elements_merge_without_change() {
        let mut bank = MemoryBank::new(2, 2, 1, 1000);
        let key0 = Tensor::new(&[2, 1, 1], vec![0.0, 0.0]).unwrap();
        bank.write(&key0, &[Tensor::new(&[2, 1, 1], vec![9.0, 9.0]).unwrap()], 0).unwrap();
        let key = Tensor::new(&[2, 1, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let val = Tensor::new(&[2, 1, 2], vec![5.0, 5.0, -1.0, -1.0]).unwrap();
        bank.write(&key, &[val], 3).unwrap();
        bank.set_usage(vec![0.0, 3.0, 1.0], vec![1.0; 3]);
        bank.cap = 2;
        bank.consolidate().unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.values[0], vec![9.0, 9.0, 5.0, -1.0]);
        assert_eq!(bank.usage(), &[0.0, 4.0]);
    }

    #[test]
    fn cap_below_pinned_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut bank = MemoryBank::new(4, 3, 1, 8);
        let r = bank.write(&random(&[4, 4, 4], &mut rng), &[random(&[3, 4, 4], &mut rng)], 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn unread_elements_survive_consolidation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bank = MemoryBank::new(4, 3, 1, 32);
        for f in [0, 3] {
            bank.write(&random(&[4, 2, 4], &mut rng), &[random(&[3, 2, 4], &mut rng)], f).unwrap();
        }
        let aff = Tensor::full(&[8, 16], 1.0 / 16.0);
        bank.record_read(&aff).unwrap();
        bank.write(&random(&[4, 2, 4], &mut rng), &[random(&[3, 2, 4], &mut rng)], 6).unwrap();
        bank.write(&random(&[4, 2, 4], &mut rng), &[random(&[3, 2, 4], &mut rng)], 9).unwrap();
        bank.write(&random(&[4, 2, 4], &mut rng), &[random(&[3, 2, 4], &mut rng)], 12).unwrap();
        assert_eq!(bank.len(), 32);
        assert!(bank.provenance().iter().filter(|&&p| p == 12).count() == 8);
        assert!(bank.provenance().iter().filter(|&&p| p == 0).count() == 8);
        let lines = bank.events_jsonl();
        assert!(lines.lines().any(|l| l.contains("\"event\":\"consolidate\"")));
    }

    proptest! {
        #[test]
        fn bank_never_exceeds_cap(writes in 1usize..30, hw in 1usize..6, extra in 0usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cap = hw + extra;
            let mut bank = MemoryBank::new(3, 2, 1, cap);
            for i in 0..writes {
                bank.write(&random(&[3, 1, hw], &mut rng), &[random(&[2, 1, hw], &mut rng)], 3 * i).unwrap();
                prop_assert!(bank.len() <= cap);
                let n = bank.len();
                let aff = Tensor::full(&[hw, n], 1.0 / n as f64);
                let before = bank.usage().to_vec();
                bank.record_read(&aff).unwrap();
                prop_assert!(bank.usage().iter().zip(&before).all(|(a, b)| a >= b));
            }
        }
    }
}
