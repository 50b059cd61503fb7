//! ON/OFF packet sources and load calibration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{Bytes, ConfigError, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceState {
    On,
    Off,
}

/// Markov-modulated Bernoulli source with geometric ON/OFF dwell times.
///
/// Each step consumes exactly two draws (emission, transition) regardless
/// of state, so rescaling the emission probability never shifts the stream.
#[derive(Debug, Clone)]
pub struct OnOffSource {
    pub state: SourceState,
    pub mean_on_slots: f64,
    pub mean_off_slots: f64,
    pub arrival_prob: f64,
    pub payload: Bytes,
    rng: ChaCha8Rng,
}

impl OnOffSource {
    pub fn new(mean_on_slots: f64, mean_off_slots: f64, arrival_prob: f64, payload: Bytes, mut rng: ChaCha8Rng) -> Self {
        let on_frac = on_fraction(mean_on_slots, mean_off_slots);
        let state = if rng.gen::<f64>() < on_frac { SourceState::On } else { SourceState::Off };
        Self {
            state,
            mean_on_slots,
            mean_off_slots,
            arrival_prob,
            payload,
            rng,
        }
    }

    /// Bytes emitted this slot (zero or one packet of `payload` bytes).
    pub fn step(&mut self, _now: Slot) -> Option<Bytes> {
        let emit_draw: f64 = self.rng.gen();
        let switch_draw: f64 = self.rng.gen();
        let emitted = (self.state == SourceState::On && emit_draw < self.arrival_prob).then_some(self.payload);
        self.state = match self.state {
            SourceState::On if self.mean_off_slots > 0.0 && switch_draw < 1.0 / self.mean_on_slots => SourceState::Off,
            SourceState::Off if switch_draw < 1.0 / self.mean_off_slots => SourceState::On,
            s => s,
        };
        emitted
    }

    /// Long-run bytes per slot.
    pub fn mean_rate(&self) -> f64 {
        self.arrival_prob * on_fraction(self.mean_on_slots, self.mean_off_slots) * self.payload as f64
    }
}

pub fn on_fraction(mean_on: f64, mean_off: f64) -> f64 {
    if mean_off <= 0.0 {
        1.0
    } else {
        mean_on / (mean_on + mean_off)
    }
}

/// Arrival probability and payload multiplier that put the offered load at
/// `target_rho * c_dl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadCalibration {
    pub arrival_prob: f64,
    pub payload_scale: u32,
    /// Offered bytes/slot after scaling.
    pub offered: f64,
}

/// Scales the emission probability uniformly across UEs. When the required
/// probability exceeds one, payloads are multiplied by the smallest integer
/// that brings it back under one (if allowed).
pub fn calibrate_load(
    c_dl: f64,
    payloads: &[Bytes],
    on_frac: f64,
    target_rho: f64,
    allow_payload_scaling: bool,
) -> Result<LoadCalibration, ConfigError> {
    if !(c_dl > 0.0) {
        return Err(ConfigError::invalid("calibration", format!("measured capacity {c_dl} is not positive")));
    }
    let per_unit: f64 = payloads.iter().map(|&s| s as f64 * on_frac).sum();
    if !(per_unit > 0.0) {
        return Err(ConfigError::invalid("traffic", "no traffic sources"));
    }
    let needed = target_rho * c_dl / per_unit;
    let scale = if needed <= 1.0 {
        1
    } else if allow_payload_scaling {
        needed.ceil() as u32
    } else {
        return Err(ConfigError::UnreachableLoad { target: target_rho, needed });
    };
    let arrival_prob = needed / scale as f64;
    Ok(LoadCalibration {
        arrival_prob,
        payload_scale: scale,
        offered: arrival_prob * per_unit * scale as f64,
    })
}
