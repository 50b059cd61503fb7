//! Slot-level simulator for credit-gated 5G downlink scheduling.
//!
//! Per-UE credit recursions (debit-TBS and partial-usage variants) gate an
//! RR scheduler with a per-slot grant cap, over an abstract PHY with
//! stop-and-wait HARQ. The gate runs either as a naive per-slot scan or as
//! an event-driven engine; both produce identical traces.

// `!(x > 0.0)` is used on purpose in validation: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::field_reassign_with_default))]

pub mod bounds;
pub mod credit;
pub mod event;
pub mod model;
pub mod output;
pub mod phy;
pub mod rng;
pub mod sched;
pub mod sim;
pub mod traffic;

pub use model::*;
