//! Event-driven credit gate.
//!
//! Instead of updating every UE every slot, a UE's credit is stored at an
//! anchor slot and advanced in closed form when touched. UEs in deficit sit
//! in a wake-up heap keyed by the slot their credit returns to zero; the
//! only touch points are grants, queue activations, wake-ups and HARQ
//! processes freeing up.
//!
//! Anchors: after a grant in slot `n` the stored credit is the value at
//! the start of slot `n + 1`, so the wake-up key is
//! `n + 1 + ceil(-C[n+1] / dC)`.

use thiserror::Error;

use crate::credit::{accrue, clamp, pre_debit_update};
use crate::model::{Bytes, Slot, UeId, UeState};
use crate::sched::EligibleRing;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("slot {now}: wake-up for ue {ue} was due at slot {key}")]
    MissedWakeup { now: Slot, key: Slot, ue: UeId },
}

/// First slot at which a deficit recovers to zero under pure accrual.
pub fn wakeup_slot(now: Slot, credit: Bytes, allowance: Bytes) -> Slot {
    assert!(credit < 0, "wake-up requested for non-negative credit {credit}");
    assert!(allowance > 0);
    now + (-credit as u64).div_ceil(allowance as u64)
}

/// Credit at `now`, assuming the UE's backlog state has not changed since
/// its anchor.
pub fn credit_at(ue: &UeState, now: Slot, backlogged: bool) -> Bytes {
    debug_assert!(ue.last_update_slot <= now);
    accrue(ue.credit, ue.allowance, ue.clamp_hi, backlogged, now - ue.last_update_slot)
}

/// Moves the anchor to `now`.
pub fn lazy_accrue(ue: &mut UeState, now: Slot, backlogged: bool) {
    ue.credit = credit_at(ue, now, backlogged);
    ue.last_update_slot = now;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    key: Slot,
    ue: UeId,
    generation: u64,
}

/// Binary min-heap over `(wake slot, ue)` with instrumented comparisons.
#[derive(Debug, Clone, Default)]
pub struct WakeupHeap {
    data: Vec<Entry>,
    pub comparisons: u64,
    pub pushes: u64,
    pub pops: u64,
    pub peeks: u64,
}

impl WakeupHeap {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn less(&mut self, a: usize, b: usize) -> bool {
        self.comparisons += 1;
        let (x, y) = (self.data[a], self.data[b]);
        (x.key, x.ue) < (y.key, y.ue)
    }

    fn push(&mut self, entry: Entry) {
        self.pushes += 1;
        self.data.push(entry);
        let mut i = self.data.len() - 1;
        while i > 0 {
            let parent = (i - 1) / 2;
            if !self.less(i, parent) {
                break;
            }
            self.data.swap(i, parent);
            i = parent;
        }
    }

    fn peek_key(&mut self) -> Option<Slot> {
        self.peeks += 1;
        self.data.first().map(|e| e.key)
    }

    fn pop(&mut self) -> Option<Entry> {
        if self.data.is_empty() {
            return None;
        }
        self.pops += 1;
        let top = self.data.swap_remove(0);
        let n = self.data.len();
        let mut i = 0;
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut m = i;
            if l < n && self.less(l, m) {
                m = l;
            }
            if r < n && self.less(r, m) {
                m = r;
            }
            if m == i {
                break;
            }
            self.data.swap(i, m);
            i = m;
        }
        Some(top)
    }

    /// Keys in heap order, for tests.
    pub fn keys(&self) -> Vec<(Slot, UeId)> {
        self.data.iter().map(|e| (e.key, e.ue)).collect()
    }
}

/// Work counters shared by both engines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EventCounters {
    /// Queue empty -> non-empty transitions.
    pub activations: u64,
    pub new_grants: u64,
    pub wakeups: u64,
    pub stale_pops: u64,
    pub heap_inserts: u64,
    pub heap_pops: u64,
    pub heap_peeks: u64,
    pub heap_comparisons: u64,
    /// Ring re-entries triggered by a HARQ process freeing up.
    pub harq_rejoins: u64,
    /// UE state visits by the gate, summed over slots.
    pub touched: u64,
    pub max_touched_per_slot: u64,
    pub max_heap_len: u64,
    pub slots: u64,
}

impl EventCounters {
    pub fn heap_ops(&self) -> u64 {
        self.heap_inserts + self.heap_pops + self.heap_peeks
    }
}

/// Wake-up heap plus per-UE generation tags.
#[derive(Debug, Clone)]
pub struct EventGate {
    pub heap: WakeupHeap,
    generation: Vec<u64>,
    gated: bool,
    touched_this_slot: u64,
    wakeups_this_slot: u64,
    events_this_slot: u64,
}

impl EventGate {
    pub fn new(num_ues: usize, gated: bool) -> Self {
        Self {
            heap: WakeupHeap::default(),
            generation: vec![0; num_ues],
            gated,
            touched_this_slot: 0,
            wakeups_this_slot: 0,
            events_this_slot: 0,
        }
    }

    fn schedule(&mut self, ue: UeId, key: Slot, counters: &mut EventCounters) {
        self.generation[ue] += 1;
        self.heap.push(Entry {
            key,
            ue,
            generation: self.generation[ue],
        });
        counters.heap_inserts += 1;
        counters.max_heap_len = counters.max_heap_len.max(self.heap.len() as u64);
    }

    fn touch(&mut self, counters: &mut EventCounters) {
        self.touched_this_slot += 1;
        counters.touched += 1;
    }

    /// Pops every wake-up due at `now`: credit is exactly zero there, and
    /// the UE rejoins the ring if it has work and a free HARQ process.
    pub fn on_slot_start(
        &mut self,
        now: Slot,
        ues: &mut [UeState],
        ring: &mut EligibleRing,
        counters: &mut EventCounters,
    ) -> Result<(), EngineError> {
        while let Some(key) = self.heap.peek_key() {
            if key > now {
                break;
            }
            let e = self.heap.pop().expect("peeked");
            if key < now {
                return Err(EngineError::MissedWakeup { now, key, ue: e.ue });
            }
            if e.generation != self.generation[e.ue] {
                counters.stale_pops += 1;
                continue;
            }
            self.generation[e.ue] += 1;
            counters.wakeups += 1;
            self.wakeups_this_slot += 1;
            self.touch(counters);
            let ue = &mut ues[e.ue];
            debug_assert_eq!(credit_at(ue, now, ue.is_backlogged()), 0);
            ue.credit = 0;
            ue.last_update_slot = now;
            if ue.is_backlogged() && ue.has_free_harq() {
                ring.join(e.ue, now);
            }
        }
        Ok(())
    }

    /// Settles a UE granted a new transmission in slot `now`. `backlog_pre`
    /// is the queue before service, `debit` the variant's charge; the queue
    /// itself has already been served.
    pub fn post_grant_bookkeeping(
        &mut self,
        ue: &mut UeState,
        backlog_pre: Bytes,
        debit: Bytes,
        now: Slot,
        ring: &mut EligibleRing,
        counters: &mut EventCounters,
    ) {
        self.touch(counters);
        self.events_this_slot += 1;
        if self.gated {
            lazy_accrue(ue, now, true);
            let pre = pre_debit_update(ue.credit, ue.allowance, backlog_pre);
            ue.credit = clamp(pre - debit, ue.clamp_lo, ue.clamp_hi);
        }
        ue.last_update_slot = now + 1;
        if !ue.is_backlogged() {
            ring.leave(ue.id, now);
        } else if ue.credit < 0 {
            ring.leave(ue.id, now);
            self.schedule(ue.id, wakeup_slot(now + 1, ue.credit, ue.allowance), counters);
        } else if !ue.has_free_harq() {
            ring.leave(ue.id, now);
        }
    }

    /// Queue of `ue` goes from empty to non-empty at the end of slot `now`.
    /// Must run before the new bytes are appended.
    pub fn on_queue_activation(
        &mut self,
        ue: &mut UeState,
        now: Slot,
        ring: &mut EligibleRing,
        counters: &mut EventCounters,
    ) {
        debug_assert!(!ue.is_backlogged());
        self.touch(counters);
        self.events_this_slot += 1;
        if self.gated {
            lazy_accrue(ue, now + 1, false);
        } else {
            ue.last_update_slot = now + 1;
        }
        if ue.credit < 0 {
            self.schedule(ue.id, wakeup_slot(now + 1, ue.credit, ue.allowance), counters);
        } else if ue.has_free_harq() {
            ring.join(ue.id, now + 1);
        }
    }

    /// A HARQ process of `ue` became free at the start of slot `now`.
    pub fn on_harq_free(&mut self, ue: &mut UeState, now: Slot, ring: &mut EligibleRing, counters: &mut EventCounters) {
        if ring.contains(ue.id) || !ue.is_backlogged() {
            return;
        }
        let credit = if self.gated { credit_at(ue, now, true) } else { 0 };
        if credit >= 0 {
            counters.harq_rejoins += 1;
            self.events_this_slot += 1;
            self.touch(counters);
            ring.join(ue.id, now);
        }
    }

    /// Closes the slot's per-slot counters. Returns `(touched, bound)` where
    /// `bound` is wake-ups + grants + activations + HARQ re-entries.
    pub fn end_slot(&mut self, counters: &mut EventCounters) -> (u64, u64) {
        counters.heap_pops = self.heap.pops;
        counters.heap_peeks = self.heap.peeks;
        counters.heap_comparisons = self.heap.comparisons;
        counters.max_touched_per_slot = counters.max_touched_per_slot.max(self.touched_this_slot);
        let out = (self.touched_this_slot, self.wakeups_this_slot + self.events_this_slot);
        self.touched_this_slot = 0;
        self.wakeups_this_slot = 0;
        self.events_this_slot = 0;
        out
    }
}
