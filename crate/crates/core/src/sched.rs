//! Grant selection (RR ring, PF, WPF) and RB allocation.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{Bytes, Slot, UeId};

/// Floor for the PF average rate.
pub const PF_EPSILON: f64 = 1e-6;

/// Round-robin order over the current members of `E[n]`.
///
/// Each member holds a sequence key; the ring order is ascending key and a
/// served UE is re-keyed to the back. Newcomers wait in `pending` until the
/// next selection, where they receive keys in ascending UE id. A UE that
/// leaves after being served and comes back before the next grant phase
/// keeps its key, so membership churn inside one slot boundary never
/// reorders the ring.
#[derive(Debug, Clone, Default)]
pub struct EligibleRing {
    order: BTreeSet<(u64, UeId)>,
    keys: BTreeMap<UeId, u64>,
    pending: BTreeSet<UeId>,
    /// Keys of UEs that left, with the slot they left in.
    parked: BTreeMap<UeId, (u64, Slot)>,
    next_key: u64,
}

impl EligibleRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.order.len() + self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, ue: UeId) -> bool {
        self.keys.contains_key(&ue) || self.pending.contains(&ue)
    }

    /// Adds `ue` ahead of the grant phase of slot `grant_slot`.
    pub fn join(&mut self, ue: UeId, grant_slot: Slot) {
        if self.contains(ue) {
            return;
        }
        match self.parked.remove(&ue) {
            Some((key, left)) if left + 1 == grant_slot => {
                self.keys.insert(ue, key);
                self.order.insert((key, ue));
            }
            _ => {
                self.pending.insert(ue);
            }
        }
    }

    /// Removes `ue` after the grant phase of slot `now`.
    pub fn leave(&mut self, ue: UeId, now: Slot) {
        if let Some(key) = self.keys.remove(&ue) {
            self.order.remove(&(key, ue));
            self.parked.insert(ue, (key, now));
        }
        self.pending.remove(&ue);
    }

    /// Removes `ue` without remembering its position (the naive scan, where
    /// membership is re-evaluated from scratch every slot).
    pub fn evict(&mut self, ue: UeId) {
        if let Some(key) = self.keys.remove(&ue) {
            self.order.remove(&(key, ue));
        }
        self.pending.remove(&ue);
        self.parked.remove(&ue);
    }

    fn fresh_key(&mut self) -> u64 {
        let k = self.next_key;
        self.next_key += 1;
        k
    }

    /// Keys the pending joiners in ascending id order.
    pub fn admit_pending(&mut self) {
        for ue in std::mem::take(&mut self.pending) {
            let key = self.fresh_key();
            self.parked.remove(&ue);
            self.keys.insert(ue, key);
            self.order.insert((key, ue));
        }
    }

    /// Moves a served member to the back of the ring.
    pub fn rotate(&mut self, ue: UeId) {
        if let Some(old) = self.keys.get(&ue).copied() {
            self.order.remove(&(old, ue));
            let key = self.fresh_key();
            self.keys.insert(ue, key);
            self.order.insert((key, ue));
        }
    }

    /// Members in ring order (pending joiners excluded).
    pub fn iter(&self) -> impl Iterator<Item = UeId> + '_ {
        self.order.iter().map(|&(_, u)| u)
    }

    /// All members including pending joiners, ascending id.
    pub fn members(&self) -> Vec<UeId> {
        let mut m: Vec<UeId> = self.keys.keys().copied().chain(self.pending.iter().copied()).collect();
        m.sort_unstable();
        m
    }
}

/// Up to `k` members from the front of the ring, skipping those for which
/// `skip` holds. Pending joiners are admitted first. Does not rotate; the
/// caller rotates the UEs that actually receive a grant.
pub fn rr_select(ring: &mut EligibleRing, k: usize, skip: impl Fn(UeId) -> bool) -> Vec<UeId> {
    ring.admit_pending();
    ring.iter().filter(|&u| !skip(u)).take(k).collect()
}

#[derive(Debug, Clone)]
pub struct PfState {
    /// Average served bytes/slot per UE.
    pub avg_rate: Vec<f64>,
    pub beta: f64,
}

impl PfState {
    pub fn new(num_ues: usize, beta: f64) -> Self {
        Self {
            avg_rate: vec![PF_EPSILON; num_ues],
            beta,
        }
    }

    pub fn score(&self, ue: UeId, inst_rate: f64) -> f64 {
        inst_rate / self.avg_rate[ue].max(PF_EPSILON)
    }

    /// EWMA over all UEs; `served[u]` is zero for UEs not served this slot.
    pub fn update(&mut self, served: &[Bytes]) {
        for (r, &s) in self.avg_rate.iter_mut().zip(served) {
            *r = ((1.0 - self.beta) * *r + self.beta * s as f64).max(PF_EPSILON);
        }
    }
}

fn top_k(mut scored: Vec<(f64, UeId)>, k: usize) -> Vec<UeId> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, u)| u).collect()
}

/// Top-`k` candidates by `r_i / R̄_i`; ties go to the lower id.
pub fn pf_select(candidates: &[UeId], pf: &PfState, inst_rate: impl Fn(UeId) -> f64, k: usize) -> Vec<UeId> {
    top_k(candidates.iter().map(|&u| (pf.score(u, inst_rate(u)), u)).collect(), k)
}

/// PF with each score multiplied by the UE's class weight.
pub fn wpf_select(
    candidates: &[UeId],
    pf: &PfState,
    inst_rate: impl Fn(UeId) -> f64,
    weight: impl Fn(UeId) -> f64,
    k: usize,
) -> Vec<UeId> {
    top_k(candidates.iter().map(|&u| (weight(u) * pf.score(u, inst_rate(u)), u)).collect(), k)
}

/// Splits `residual` RBs among the selected UEs, in allocation units of
/// `rbg` RBs.
///
/// Units are dealt out evenly, earlier-selected UEs taking the remainder.
/// No UE receives more than `caps[i]` (its queue need, rounded up to whole
/// units); what a capped UE leaves behind is dealt again among the rest.
/// A trailing partial unit goes to the first UE with room.
pub fn allocate_rbs(caps: &[u32], residual: u32, rbg: u32) -> Vec<u32> {
    debug_assert!(rbg >= 1);
    let mut alloc = vec![0u32; caps.len()];
    let mut remaining = residual;
    loop {
        let active: Vec<usize> = (0..caps.len()).filter(|&i| alloc[i] < caps[i]).collect();
        if active.is_empty() || remaining == 0 {
            break;
        }
        let units = remaining / rbg;
        if units == 0 {
            for &i in &active {
                let give = remaining.min(caps[i] - alloc[i]);
                alloc[i] += give;
                remaining -= give;
                if remaining == 0 {
                    break;
                }
            }
            break;
        }
        let per = units / active.len() as u32;
        let extra = units % active.len() as u32;
        for (j, &i) in active.iter().enumerate() {
            let want = (per + u32::from((j as u32) < extra)) * rbg;
            let give = want.min(caps[i] - alloc[i]);
            alloc[i] += give;
            remaining -= give;
        }
    }
    alloc
}

/// RBs needed to carry `backlog` bytes at `bytes_per_rb`, rounded up to
/// whole allocation units.
pub fn rbs_needed(backlog: Bytes, bytes_per_rb: u32, rbg: u32) -> u32 {
    if backlog <= 0 {
        return 0;
    }
    let rbs = (backlog as u64).div_ceil(bytes_per_rb as u64);
    let rounded = rbs.div_ceil(rbg as u64) * rbg as u64;
    rounded.min(u32::MAX as u64) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rr_cursor_example() {
        // ring [u1,u2,u3] with the cursor at u2
        let mut ring = EligibleRing::new();
        for u in [2, 3, 1] {
            ring.join(u, 0);
            ring.admit_pending();
        }
        let sel = rr_select(&mut ring, 2, |_| false);
        assert_eq!(sel, vec![2, 3]);
        for &u in &sel {
            ring.rotate(u);
        }
        assert_eq!(ring.iter().next(), Some(1));
    }

    #[test]
    fn rr_small_and_empty() {
        let mut ring = EligibleRing::new();
        assert!(rr_select(&mut ring, 3, |_| false).is_empty());
        ring.join(5, 0);
        assert_eq!(rr_select(&mut ring, 3, |_| false), vec![5]);
    }

    #[test]
    fn joiners_keyed_by_id() {
        let mut ring = EligibleRing::new();
        for u in [7, 2, 4] {
            ring.join(u, 0);
        }
        assert_eq!(rr_select(&mut ring, 3, |_| false), vec![2, 4, 7]);
    }

    #[test]
    fn rejoin_next_slot_keeps_position() {
        let mut ring = EligibleRing::new();
        for u in 0..3 {
            ring.join(u, 0);
        }
        ring.admit_pending();
        ring.leave(0, 4);
        ring.join(0, 5);
        assert_eq!(ring.iter().collect::<Vec<_>>(), vec![0, 1, 2]);
        ring.leave(0, 5);
        ring.join(0, 7);
        ring.admit_pending();
        assert_eq!(ring.iter().collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn skipped_members_keep_position() {
        let mut ring = EligibleRing::new();
        for u in 0..3 {
            ring.join(u, 0);
        }
        let sel = rr_select(&mut ring, 1, |u| u == 0);
        assert_eq!(sel, vec![1]);
        ring.rotate(1);
        assert_eq!(rr_select(&mut ring, 1, |_| false), vec![0]);
    }

    #[test]
    fn pf_examples() {
        let mut pf = PfState::new(2, 0.01);
        pf.avg_rate = vec![50.0, 80.0];
        let r = [100.0, 80.0];
        assert_eq!(pf_select(&[0, 1], &pf, |u| r[u], 1), vec![0]);
        pf.avg_rate = vec![10.0, 10.0];
        assert_eq!(pf_select(&[1, 0], &pf, |_| 5.0, 1), vec![0]);
        // floored average beats any finite rival
        pf.avg_rate = vec![1e9, 0.0];
        assert_eq!(pf_select(&[0, 1], &pf, |u| [1e9, 1.0][u], 1), vec![1]);
    }

    #[test]
    fn pf_ewma_update() {
        let mut pf = PfState::new(2, 0.5);
        pf.avg_rate = vec![10.0, 10.0];
        pf.update(&[30, 0]);
        assert_eq!(pf.avg_rate, vec![20.0, 5.0]);
    }

    #[test]
    fn wpf_examples() {
        let mut pf = PfState::new(2, 0.01);
        pf.avg_rate = vec![1.0, 1.0];
        let w = [0.75, 0.05];
        assert_eq!(wpf_select(&[0, 1], &pf, |_| 1.0, |u| w[u], 1), vec![0]);
        // p3 needs more than 15x the score of p1
        assert_eq!(wpf_select(&[0, 1], &pf, |u| [1.0, 15.0][u], |u| w[u], 1), vec![0]);
        assert_eq!(wpf_select(&[0, 1], &pf, |u| [1.0, 15.1][u], |u| w[u], 1), vec![1]);
        let r = [3.0, 7.0, 5.0];
        pf.avg_rate = vec![1.0, 2.0, 1.0];
        assert_eq!(
            wpf_select(&[0, 1, 2], &pf, |u| r[u], |_| 0.4, 3),
            pf_select(&[0, 1, 2], &pf, |u| r[u], 3)
        );
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_rbs(&[u32::MAX; 3], 10, 1), vec![4, 3, 3]);
        assert_eq!(allocate_rbs(&[u32::MAX; 2], 0, 1), vec![0, 0]);
        let rbs = allocate_rbs(&[u32::MAX], 10, 1);
        assert_eq!(rbs[0] as i64 * 18, 180);
    }

    #[test]
    fn capped_leftover_goes_to_others() {
        assert_eq!(allocate_rbs(&[2, 100, 100], 20, 2), vec![2, 10, 8]);
        assert_eq!(allocate_rbs(&[4, 4], 50, 2), vec![4, 4]);
        assert_eq!(allocate_rbs(&[100, 100], 9, 2), vec![5, 4]);
    }

    #[test]
    fn need_rounding() {
        assert_eq!(rbs_needed(240, 36, 2), 8);
        assert_eq!(rbs_needed(80, 4, 2), 20);
        assert_eq!(rbs_needed(0, 4, 2), 0);
        assert_eq!(rbs_needed(1, 48, 1), 1);
    }

    proptest! {
        #[test]
        fn wpf_selection_ignores_weight_scale(
            rates in proptest::collection::vec(1.0f64..500.0, 1..8),
            avgs in proptest::collection::vec(0.5f64..50.0, 8),
            shares in proptest::collection::vec(0.01f64..1.0, 8),
            exp in -6i32..6,
            k in 1usize..4,
        ) {
            let n = rates.len();
            let mut pf = PfState::new(n, 0.01);
            pf.avg_rate = avgs[..n].to_vec();
            let cands: Vec<UeId> = (0..n).collect();
            let scale = 2f64.powi(exp);
            let a = wpf_select(&cands, &pf, |u| rates[u], |u| shares[u], k);
            let b = wpf_select(&cands, &pf, |u| rates[u], |u| scale * shares[u], k);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn rr_static_ring_serves_each_once_per_window(m in 1usize..20, k in 1usize..6, calls in 1usize..40) {
            let mut ring = EligibleRing::new();
            for u in 0..m { ring.join(u, 0); }
            let window = m.div_ceil(k);
            let mut history = Vec::new();
            for _ in 0..calls.max(window) {
                let sel = rr_select(&mut ring, k, |_| false);
                for &u in &sel { ring.rotate(u); }
                history.push(sel);
            }
            for w in history.windows(window) {
                let mut seen = vec![0usize; m];
                for sel in w { for &u in sel { seen[u] += 1; } }
                prop_assert!(seen.iter().all(|&c| c >= 1));
            }
        }

        #[test]
        fn allocation_within_budget(
            caps in proptest::collection::vec(0u32..60, 0..6), residual in 0u32..100, rbg in 1u32..4
        ) {
            let alloc = allocate_rbs(&caps, residual, rbg);
            prop_assert!(alloc.iter().sum::<u32>() <= residual);
            for (a, c) in alloc.iter().zip(&caps) {
                prop_assert!(a <= c);
            }
            // nothing left on the table while someone still has room and a full unit remains
            let left = residual - alloc.iter().sum::<u32>();
            if alloc.iter().zip(&caps).any(|(a, c)| a < c) {
                prop_assert!(left == 0);
            }
        }

        #[test]
        fn pf_never_selects_outside_candidates(
            cands in proptest::collection::btree_set(0usize..10, 0..10), k in 1usize..5
        ) {
            let pf = PfState::new(10, 0.01);
            let c: Vec<UeId> = cands.iter().copied().collect();
            let sel = pf_select(&c, &pf, |u| (u * 7 % 5) as f64, k);
            prop_assert!(sel.len() <= k);
            prop_assert!(sel.iter().all(|u| cands.contains(u)));
        }
    }
}
