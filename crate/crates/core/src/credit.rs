//! Slot-quantized per-UE credit recursion.
//!
//! One slot step is `clamp(pre_debit_update(C, dC, Q) - debit, lo, hi)`.
//! Only new transmissions debit; HARQ retransmissions never reach this
//! module.

use serde::{Deserialize, Serialize};

use crate::model::{Bytes, GateVariant};

/// How a new grant is charged against credit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DebitVariant {
    /// Debit the full granted TBS.
    DT,
    /// Debit only the bytes taken from the queue.
    PU,
}

impl DebitVariant {
    pub fn from_gate(gate: GateVariant) -> Option<Self> {
        match gate {
            GateVariant::DT => Some(DebitVariant::DT),
            GateVariant::PU => Some(DebitVariant::PU),
            GateVariant::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CreditUpdateInput {
    pub credit_in: Bytes,
    /// Backlog at the start of the slot, before service.
    pub backlog: Bytes,
    pub allowance: Bytes,
    pub granted: bool,
    pub tbs: Bytes,
    pub lo: Bytes,
    pub hi: Bytes,
}

/// Accrual / recovery / reset before the debit.
///
/// A non-negative credit with an empty queue resets to zero. The reset also
/// covers `credit == 0` so an idle UE does not oscillate between 0 and
/// `allowance`.
pub fn pre_debit_update(credit: Bytes, allowance: Bytes, backlog: Bytes) -> Bytes {
    debug_assert!(allowance > 0);
    if credit < 0 {
        (credit + allowance).min(0)
    } else if backlog == 0 {
        0
    } else {
        credit + allowance
    }
}

pub fn compute_debit(variant: DebitVariant, granted: bool, tbs: Bytes, backlog: Bytes) -> Bytes {
    if !granted {
        return 0;
    }
    match variant {
        DebitVariant::DT => tbs,
        DebitVariant::PU => tbs.min(backlog),
    }
}

pub fn clamp(x: Bytes, lo: Bytes, hi: Bytes) -> Bytes {
    debug_assert!(lo < hi);
    x.max(lo).min(hi)
}

/// Credit at the start of the next slot.
pub fn slot_update(input: CreditUpdateInput, variant: DebitVariant) -> Bytes {
    let pre = pre_debit_update(input.credit_in, input.allowance, input.backlog);
    let debit = compute_debit(variant, input.granted, input.tbs, input.backlog);
    clamp(pre - debit, input.lo, input.hi)
}

/// Gate predicate over a UE that is already known to be MAC-eligible.
pub fn passes_gate(credit: Bytes) -> bool {
    credit >= 0
}

/// Full eligibility: backlogged, a free HARQ process, not already scheduled
/// for a retransmission this slot, and non-negative credit.
pub fn is_gate_eligible(backlog: Bytes, has_free_harq: bool, in_retx_set: bool, credit: Bytes) -> bool {
    backlog > 0 && has_free_harq && !in_retx_set && passes_gate(credit)
}

/// Closed form of `k` no-grant steps starting from `credit`, with the queue
/// state fixed over the interval.
///
/// A deficit recovers by `allowance` per slot up to exactly zero; from there
/// a backlogged UE keeps accruing up to `hi` and an idle one sits at zero.
pub fn accrue(credit: Bytes, allowance: Bytes, hi: Bytes, backlogged: bool, k: u64) -> Bytes {
    if k == 0 {
        return credit;
    }
    let k = k as i64;
    let (start, remaining) = if credit < 0 {
        let to_zero = (-credit + allowance - 1) / allowance;
        if k <= to_zero {
            return (credit + k * allowance).min(0);
        }
        (0, k - to_zero)
    } else {
        (credit, k)
    };
    if backlogged {
        start.saturating_add(remaining.saturating_mul(allowance)).min(hi)
    } else {
        0
    }
}
