//! Per-patient feature memory for cross-phase attention.
//!
//! Two banks per patient — one filled sweeping the cycle forward, one
//! backward — hold key/value feature grids produced by the slow-moving
//! teacher. Queries from the current phase attend over every stored spatial
//! position; annotated phases are pinned in the bank while other entries
//! rotate out oldest-first.
//!
//! The functions here are the dense reference path (explicit affinity
//! matrix); the training loop uses the fused tape op
//! [`crate::autograd::Tape::memory_readout`], which computes the same
//! quantities without materializing the matrix. Tests pin the two paths
//! against each other.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Features remembered for one phase: a key and value grid per readout
/// level, flattened to [channels, positions].
#[derive(Clone, Debug)]
pub struct BankEntry {
    pub phase_index: usize,
    /// Pinned entries (the annotated phases) are never evicted.
    pub anchor: bool,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

/// Bounded FIFO of [`BankEntry`] in arrival order, oldest first.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub direction: Direction,
    pub capacity: usize,
    pub entries: Vec<BankEntry>,
}

impl MemoryBank {
    pub fn new(direction: Direction, capacity: usize) -> Self {
        assert!(capacity >= 1, "memory bank needs capacity >= 1");
        MemoryBank {
            direction,
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    /// Store features for a phase. Re-writing a phase already present
    /// replaces that entry in place. When the bank is full the oldest
    /// non-anchor entry is evicted; if every resident entry is pinned, a
    /// non-anchor write is dropped.
    pub fn write(
        &mut self,
        phase_index: usize,
        anchor: bool,
        keys: Vec<Tensor>,
        values: Vec<Tensor>,
    ) {
        assert_eq!(keys.len(), values.len(), "key/value level count mismatch");
        if let Some(existing) = self
            .entries
            .iter_mut()
            .find(|e| e.phase_index == phase_index)
        {
            existing.anchor = anchor || existing.anchor;
            existing.keys = keys;
            existing.values = values;
            return;
        }
        if self.entries.len() >= self.capacity {
            match self.entries.iter().position(|e| !e.anchor) {
                Some(oldest) => {
                    self.entries.remove(oldest);
                }
                None => {
                    if !anchor {
                        return; // nothing evictable and the newcomer is not pinned
                    }
                    // a pinned write into an all-pinned full bank still lands;
                    // capacity is a soft bound for anchors
                }
            }
        }
        self.entries.push(BankEntry {
            phase_index,
            anchor,
            keys,
            values,
        });
    }

    /// Concatenate all entries' keys and values at one readout level along
    /// the position axis, in arrival order. `None` when the bank is empty.
    pub fn stacked(&self, level: usize) -> Option<(Tensor, Tensor)> {
        self.stacked_view(level, None)
    }

    /// Like [`stacked`](Self::stacked), but windowed relative to a query
    /// phase: a forward bank exposes strictly earlier phases, a backward
    /// bank strictly later ones, so the two directions carry the past and
    /// the future of the cycle respectively. `None` when nothing is in view.
    pub fn stacked_view(
        &self,
        level: usize,
        query_phase: Option<usize>,
    ) -> Option<(Tensor, Tensor)> {
        let visible: Vec<&BankEntry> = self
            .entries
            .iter()
            .filter(|e| match query_phase {
                None => true,
                Some(t) => match self.direction {
                    Direction::Forward => e.phase_index < t,
                    Direction::Backward => e.phase_index > t,
                },
            })
            .collect();
        if visible.is_empty() {
            return None;
        }
        let ck = visible[0].keys[level].shape()[0];
        let cv = visible[0].values[level].shape()[0];
        let m: usize = visible.iter().map(|e| e.keys[level].shape()[1]).sum();
        let mut keys = vec![0.0f64; ck * m];
        let mut values = vec![0.0f64; cv * m];
        let mut offset = 0usize;
        for e in visible {
            let me = e.keys[level].shape()[1];
            assert_eq!(e.values[level].shape()[1], me);
            for c in 0..ck {
                keys[c * m + offset..c * m + offset + me]
                    .copy_from_slice(&e.keys[level].data()[c * me..(c + 1) * me]);
            }
            for c in 0..cv {
                values[c * m + offset..c * m + offset + me]
                    .copy_from_slice(&e.values[level].data()[c * me..(c + 1) * me]);
            }
            offset += me;
        }
        Some((
            Tensor::new(vec![ck, m], keys),
            Tensor::new(vec![cv, m], values),
        ))
    }
}

/// Column-stochastic attention weights: entry (i, j) is the softmax over
/// memory positions i of the dot product between memory key i and query key
/// j. Shape [M, N].
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    pub weights: Tensor,
}

impl AffinityMatrix {
    pub fn m(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let (m, n) = (self.m(), self.n());
        let mut sums = vec![0.0f64; n];
        for i in 0..m {
            for (j, s) in sums.iter_mut().enumerate() {
                *s += self.weights.data()[i * n + j];
            }
        }
        sums
    }
}

/// Dense affinity between stacked memory keys [Ck, M] and query keys
/// [Ck, N]: per-column max-subtracted softmax of the dot-product logits.
pub fn affinity(bank_keys: &Tensor, query_keys: &Tensor) -> Result<AffinityMatrix> {
    let ck = bank_keys.shape()[0];
    if query_keys.shape()[0] != ck {
        return Err(Error::shape(format!(
            "affinity: key channels {} vs {}",
            ck,
            query_keys.shape()[0]
        )));
    }
    let m = bank_keys.shape()[1];
    let n: usize = query_keys.shape()[1..].iter().product();
    if m == 0 {
        return Err(Error::EmptyMemory);
    }
    let km = bank_keys.data();
    let q = query_keys.data();
    let mut weights = vec![0.0f64; m * n];
    for j in 0..n {
        let mut logits = vec![0.0f64; m];
        for c in 0..ck {
            let qv = q[c * n + j];
            for (l, &kv) in logits.iter_mut().zip(&km[c * m..(c + 1) * m]) {
                *l += qv * kv;
            }
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0f64;
        for l in &mut logits {
            *l = (*l - mx).exp();
            z += *l;
        }
        for (i, l) in logits.iter().enumerate() {
            weights[i * n + j] = l / z;
        }
    }
    Ok(AffinityMatrix {
        weights: Tensor::new(vec![m, n], weights),
    })
}

/// Sparse readout: per query column keep the k largest attention weights
/// (ties toward the lower memory index), renormalize them to sum to one,
/// and blend the corresponding value columns. Output [Cv, N].
pub fn topk_readout(bank_values: &Tensor, aff: &AffinityMatrix, k: usize) -> Result<Tensor> {
    let (m, n) = (aff.m(), aff.n());
    if bank_values.shape()[1] != m {
        return Err(Error::shape(format!(
            "topk_readout: {} value columns vs {} affinity rows",
            bank_values.shape()[1],
            m
        )));
    }
    let cv = bank_values.shape()[0];
    let k = k.max(1).min(m);
    let w = aff.weights.data();
    let vm = bank_values.data();
    let mut out = vec![0.0f64; cv * n];
    for j in 0..n {
        let mut idx: Vec<u32> = (0..m as u32).collect();
        if k < m {
            idx.select_nth_unstable_by(k - 1, |&a, &b| {
                w[a as usize * n + j]
                    .partial_cmp(&w[b as usize * n + j])
                    .unwrap()
                    .reverse()
                    .then(a.cmp(&b))
            });
            idx.truncate(k);
        }
        let z: f64 = idx.iter().map(|&i| w[i as usize * n + j]).sum();
        for &i in &idx {
            let wt = w[i as usize * n + j] / z;
            for c in 0..cv {
                out[c * n + j] += wt * vm[c * m + i as usize];
            }
        }
    }
    Ok(Tensor::new(vec![cv, n], out))
}

/// Read both banks at one level and concatenate the results along channels:
/// forward readout first, backward second, each of width Cv. A side with
/// nothing in view (empty bank, or no phase on that side of the query)
/// contributes its broadcast null feature instead; both banks entirely
/// empty is an error.
pub fn bidirectional_read(
    forward: &MemoryBank,
    backward: &MemoryBank,
    level: usize,
    query_phase: Option<usize>,
    query_keys: &Tensor,
    k: usize,
    null_forward: &Tensor,
    null_backward: &Tensor,
) -> Result<Tensor> {
    if forward.is_empty() && backward.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let n: usize = query_keys.shape()[1..].iter().product();
    let read_side = |bank: &MemoryBank, null: &Tensor| -> Result<Tensor> {
        match bank.stacked_view(level, query_phase) {
            Some((keys, values)) => {
                let aff = affinity(&keys, query_keys)?;
                topk_readout(&values, &aff, k)
            }
            None => {
                let cv = null.numel();
                let mut data = vec![0.0f64; cv * n];
                for c in 0..cv {
                    data[c * n..(c + 1) * n].fill(null.data()[c]);
                }
                Ok(Tensor::new(vec![cv, n], data))
            }
        }
    };
    let vf = read_side(forward, null_forward)?;
    let vb = read_side(backward, null_backward)?;
    let cvf = vf.shape()[0];
    let cvb = vb.shape()[0];
    let mut data = Vec::with_capacity((cvf + cvb) * n);
    data.extend_from_slice(vf.data());
    data.extend_from_slice(vb.data());
    Ok(Tensor::new(vec![cvf + cvb, n], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::readout_fwd;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn two_position_softmax_hand_value() {
        // queries chosen so logits are (1, 0): bank keys (1, 0), query 1
        let bank_keys = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let query = Tensor::new(vec![1, 1], vec![1.0]);
        let aff = affinity(&bank_keys, &query).unwrap();
        assert!((aff.weights.data()[0] - 0.7311).abs() < 1e-4);
        assert!((aff.weights.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn columns_are_stochastic_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bank_keys = rand_tensor(vec![4, 20], &mut rng);
        let query = rand_tensor(vec![4, 9], &mut rng);
        let aff = affinity(&bank_keys, &query).unwrap();
        for s in aff.column_sums() {
            assert!((s - 1.0).abs() < 1e-5, "column sum {s}");
        }
        // adding a constant to every logit of a column leaves weights
        // unchanged; realize it by appending a constant key channel
        let mut shifted_keys = vec![0.0f64; 5 * 20];
        shifted_keys[..4 * 20].copy_from_slice(bank_keys.data());
        shifted_keys[4 * 20..].fill(1.0);
        let mut shifted_query = vec![0.0f64; 5 * 9];
        shifted_query[..4 * 9].copy_from_slice(query.data());
        shifted_query[4 * 9..].fill(3.0);
        let aff2 = affinity(
            &Tensor::new(vec![5, 20], shifted_keys),
            &Tensor::new(vec![5, 9], shifted_query),
        )
        .unwrap();
        for (a, b) in aff.weights.data().iter().zip(aff2.weights.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn k1_readout_is_argmax_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bank_keys = rand_tensor(vec![3, 5], &mut rng);
        let bank_values = rand_tensor(vec![2, 5], &mut rng);
        let query = rand_tensor(vec![3, 7], &mut rng);
        let aff = affinity(&bank_keys, &query).unwrap();
        let out = topk_readout(&bank_values, &aff, 1).unwrap();
        for j in 0..7 {
            let mut best = 0usize;
            for i in 1..5 {
                if aff.weights.data()[i * 7 + j] > aff.weights.data()[best * 7 + j] {
                    best = i;
                }
            }
            for c in 0..2 {
                assert_eq!(out.data()[c * 7 + j], bank_values.data()[c * 5 + best]);
            }
        }
    }

    #[test]
    fn renormalized_pair_blends_values() {
        // weights 0.6 / 0.2 / 0.2; top-2 keeps (0.6, 0.2) -> (0.75, 0.25)
        let aff = AffinityMatrix {
            weights: Tensor::new(vec![3, 1], vec![0.6, 0.2, 0.2]),
        };
        let values = Tensor::new(vec![1, 3], vec![10.0, 2.0, 100.0]);
        let out = topk_readout(&values, &aff, 2).unwrap();
        // ties toward lower index: positions 0 and 1 selected
        assert!((out.data()[0] - (0.75 * 10.0 + 0.25 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn full_k_matches_fused_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bank_keys = rand_tensor(vec![4, 12], &mut rng);
        let bank_values = rand_tensor(vec![6, 12], &mut rng);
        let query = rand_tensor(vec![4, 10], &mut rng);
        for k in [1, 3, 12] {
            let aff = affinity(&bank_keys, &query).unwrap();
            let dense = topk_readout(&bank_values, &aff, k).unwrap();
            let (fused, _, _) = readout_fwd(&query, &bank_keys, &bank_values, k);
            for (a, b) in dense.data().iter().zip(&fused) {
                assert!((a - b).abs() < 1e-6, "k={k}: {a} vs {b}");
            }
        }
    }

    fn entry_tensors(
        phase: usize,
        positions: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<Tensor>, Vec<Tensor>) {
        let _ = phase;
        (
            vec![rand_tensor(vec![2, positions], rng)],
            vec![rand_tensor(vec![3, positions], rng)],
        )
    }

    #[test]
    fn eviction_keeps_anchors_and_drops_oldest() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut bank = MemoryBank::new(Direction::Forward, 4);
        for (phase, anchor) in [(0usize, true), (4, true), (1, false), (2, false)] {
            let (k, v) = entry_tensors(phase, 6, &mut rng);
            bank.write(phase, anchor, k, v);
        }
        assert_eq!(bank.len(), 4);
        let (k, v) = entry_tensors(3, 6, &mut rng);
        bank.write(3, false, k, v);
        assert_eq!(bank.len(), 4);
        let phases: Vec<usize> = bank.entries.iter().map(|e| e.phase_index).collect();
        assert_eq!(phases, vec![0, 4, 2, 3], "oldest non-anchor (1) evicted");
        assert!(bank.entries.iter().filter(|e| e.anchor).count() == 2);
    }

    #[test]
    fn rewriting_a_phase_replaces_in_place() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut bank = MemoryBank::new(Direction::Backward, 4);
        let (k, v) = entry_tensors(1, 4, &mut rng);
        bank.write(1, false, k, v);
        let (k2, v2) = entry_tensors(1, 4, &mut rng);
        let probe = k2[0].data()[0];
        bank.write(1, false, k2, v2);
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.entries[0].keys[0].data()[0], probe);
    }

    #[test]
    fn stacking_preserves_arrival_order() {
        let mut bank = MemoryBank::new(Direction::Forward, 4);
        for (phase, fill) in [(0usize, 1.0f64), (1, 2.0), (2, 3.0)] {
            bank.write(
                phase,
                phase == 0,
                vec![Tensor::full(&[1, 2], fill)],
                vec![Tensor::full(&[1, 2], 10.0 * fill)],
            );
        }
        let (keys, values) = bank.stacked(0).unwrap();
        assert_eq!(keys.shape(), &[1, 6]);
        assert_eq!(keys.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(values.data(), &[10.0, 10.0, 20.0, 20.0, 30.0, 30.0]);
    }

    #[test]
    fn empty_side_contributes_null_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut fwd = MemoryBank::new(Direction::Forward, 4);
        let (k, v) = entry_tensors(0, 5, &mut rng);
        fwd.write(0, true, k, v);
        let bwd = MemoryBank::new(Direction::Backward, 4);
        let query = rand_tensor(vec![2, 5], &mut rng);
        let null_f = Tensor::full(&[3], 0.0);
        let null_b = Tensor::new(vec![3], vec![0.5, -0.5, 2.0]);
        let out = bidirectional_read(&fwd, &bwd, 0, None, &query, 2, &null_f, &null_b).unwrap();
        assert_eq!(out.shape(), &[6, 5]);
        for c in 0..3 {
            for j in 0..5 {
                assert_eq!(out.data()[(3 + c) * 5 + j], null_b.data()[c]);
            }
        }
        // forward half actually attends (not the null)
        assert!(out.data()[..15].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn both_sides_empty_is_an_error() {
        let fwd = MemoryBank::new(Direction::Forward, 4);
        let bwd = MemoryBank::new(Direction::Backward, 4);
        let query = Tensor::full(&[2, 3], 0.1);
        let null = Tensor::full(&[3], 0.0);
        assert!(matches!(
            bidirectional_read(&fwd, &bwd, 0, None, &query, 2, &null, &null),
            Err(Error::EmptyMemory)
        ));
    }

    #[test]
    fn windowed_views_split_past_and_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut fwd = MemoryBank::new(Direction::Forward, 4);
        let mut bwd = MemoryBank::new(Direction::Backward, 4);
        for phase in [0usize, 2, 4] {
            let (k, v) = entry_tensors(phase, 3, &mut rng);
            fwd.write(phase, phase == 0, k.clone(), v.clone());
            let (k, v) = entry_tensors(phase, 3, &mut rng);
            bwd.write(phase, phase == 0, k, v);
        }
        // query at phase 2: forward sees only phase 0, backward only phase 4
        let (fk, _) = fwd.stacked_view(0, Some(2)).unwrap();
        assert_eq!(fk.shape(), &[2, 3]);
        assert_eq!(fk.data(), fwd.entries[0].keys[0].data());
        let (bk, _) = bwd.stacked_view(0, Some(2)).unwrap();
        assert_eq!(bk.data(), bwd.entries[2].keys[0].data());
        // at the sequence ends one side has nothing in view
        assert!(fwd.stacked_view(0, Some(0)).is_none());
        assert!(bwd.stacked_view(0, Some(5)).is_none());
        // and bidirectional_read substitutes the null there
        let query = rand_tensor(vec![2, 3], &mut rng);
        let null_f = Tensor::new(vec![3], vec![7.0, 8.0, 9.0]);
        let null_b = Tensor::full(&[3], 0.0);
        let out =
            bidirectional_read(&fwd, &bwd, 0, Some(0), &query, 2, &null_f, &null_b).unwrap();
        for c in 0..3 {
            for j in 0..3 {
                assert_eq!(out.data()[c * 3 + j], null_f.data()[c]);
            }
        }
    }
}
