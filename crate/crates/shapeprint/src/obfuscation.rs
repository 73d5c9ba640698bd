//! The defenses: random padding, tiered padding, stochastic traffic padding
//! (STP), and simplified independent link padding (ILP).
//!
//! STP divides time into periods of length `T`. A period containing real
//! activity emits a packet in every slot of a `1/R`-spaced grid — real
//! packets where due, cover packets elsewhere — and at every period boundary
//! a cover-only injection of length `T` starts with probability `q` at a
//! uniform offset inside the period, extending any injection still in
//! progress. Every emitted packet is padded, so on the wire cover and real
//! packets are indistinguishable.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;

use crate::error::{Error, Result};
use crate::model::{PacketRecord, SizeHistogram, Trace};

/// STP shaping parameters.
#[derive(Clone, Debug)]
pub struct StpParams {
    /// Cover-injection probability q at each period boundary, in [0, 1].
    pub q: f64,
    /// Period length T in seconds.
    pub period: f64,
    /// Emission rate R in packets per second; slot spacing is 1/R.
    pub rate: f64,
    /// Random-padding bound W in bytes.
    pub pad_window: u32,
    /// Distribution cover packet sizes are drawn from (before padding).
    pub cover: SizeHistogram,
}

impl StpParams {
    /// Defaults (q=0.1, T=1s, R=100pps, W=80) with the given cover
    /// distribution.
    pub fn with_cover(cover: SizeHistogram) -> Self {
        StpParams {
            q: 0.1,
            period: 1.0,
            rate: 100.0,
            pad_window: 80,
            cover,
        }
    }

    /// The padding scheme implied by `pad_window`.
    pub fn default_padding(&self) -> PaddingScheme {
        PaddingScheme::random(self.pad_window)
    }

    /// Slots per period, `round(T·R)`.
    pub fn slots_per_period(&self) -> usize {
        (self.period * self.rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::InvalidArgument(format!(
                "q must be in [0,1], got {}",
                self.q
            )));
        }
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "period must be positive, got {}",
                self.period
            )));
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rate must be positive, got {}",
                self.rate
            )));
        }
        if self.period * self.rate < 1.0 {
            return Err(Error::InvalidArgument(
                "rate·period must provide at least one slot per period".into(),
            ));
        }
        if self.pad_window == 0 {
            return Err(Error::InvalidArgument("padding bound must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-packet padding variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PaddingScheme {
    /// Add a uniform random 1..=window bytes.
    Random { window: u32 },
    /// Tiered table padding (see [`level100_pad`]).
    Level100,
    /// Pad everything to one fixed size (must dominate all real sizes).
    Constant { size: u32 },
}

impl PaddingScheme {
    pub fn random(window: u32) -> Self {
        assert!(window >= 1, "padding window must be at least 1");
        PaddingScheme::Random { window }
    }

    /// Pads one packet size.
    pub fn pad(&self, size: u32, rng: &mut impl Rng) -> Result<u32> {
        match *self {
            PaddingScheme::Random { window } => Ok(random_pad(size, window, rng)),
            PaddingScheme::Level100 => level100_pad(size, rng),
            PaddingScheme::Constant { size: fixed } => {
                if size > fixed {
                    Err(Error::UnsupportedSize { size })
                } else {
                    Ok(fixed)
                }
            }
        }
    }
}

/// Adds a uniform random 1..=window bytes to the size.
pub fn random_pad(size: u32, window: u32, rng: &mut impl Rng) -> u32 {
    assert!(window >= 1, "padding window must be at least 1");
    size + rng.random_range(1..=window)
}

/// Tiered padding:
///
/// | input size      | output                |
/// |-----------------|-----------------------|
/// | 1..=100         | 100                   |
/// | 101..=200       | 200                   |
/// | 201..=300       | 300                   |
/// | 301..=998       | uniform [size, 1000]  |
/// | 999..=1399      | uniform [size, 1400]  |
/// | 1400..=1600     | 1600                  |
///
/// Sizes outside 1..=1600 are unsupported.
pub fn level100_pad(size: u32, rng: &mut impl Rng) -> Result<u32> {
    Ok(match size {
        1..=100 => 100,
        101..=200 => 200,
        201..=300 => 300,
        301..=998 => rng.random_range(size..=1000),
        999..=1399 => rng.random_range(size..=1400),
        1400..=1600 => 1600,
        _ => return Err(Error::UnsupportedSize { size }),
    })
}

/// Pads every packet of a trace, leaving timing untouched: the padding-only
/// defenses close the size side-channel but keep inter-arrival gaps real.
pub fn pad_trace(trace: &Trace, padding: &PaddingScheme, rng: &mut impl Rng) -> Result<Trace> {
    let packets = trace
        .packets()
        .iter()
        .map(|p| {
            Ok(PacketRecord {
                size: padding.pad(p.size, rng)?,
                ..p.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Trace::new(packets, trace.duration())
}

/// Rounds a timestamp up onto the slot grid: first slot index s with
/// s/rate ≥ t.
fn due_slot(t: f64, rate: f64) -> u64 {
    (t * rate).ceil().max(0.0) as u64
}

/// First slot index at or after time `t`, used for interval boundaries.
/// Both ends of adjacent intervals evaluate this on the same value, so the
/// produced ranges tile without gaps or overlaps.
fn slot_from(t: f64, rate: f64) -> u64 {
    (t * rate).ceil().max(0.0) as u64
}

/// Applies STP shaping to a trace.
///
/// Real packets are mapped onto the slot grid by rounding up; several real
/// packets contending for one slot queue into consecutive slots. A backlog
/// that would delay a packet by more than one period is an overload: the
/// deployment assumption is that R exceeds any device's real rate.
pub fn stp_shape(
    trace: &Trace,
    params: &StpParams,
    padding: &PaddingScheme,
    rng: &mut impl Rng,
) -> Result<Trace> {
    params.validate()?;
    let rate = params.rate;
    let period = params.period;
    let duration = trace.duration();
    let num_periods = (duration / period).ceil() as u64;

    // Real packets onto the slot grid, queueing on contention.
    let mut real_slots: BTreeMap<u64, usize> = BTreeMap::new();
    let mut next_free = 0u64;
    for (i, p) in trace.packets().iter().enumerate() {
        let slot = due_slot(p.timestamp, rate).max(next_free);
        if slot as f64 / rate - p.timestamp > period {
            return Err(Error::Overload { at: p.timestamp });
        }
        real_slots.insert(slot, i);
        next_free = slot + 1;
    }

    // Periods containing real activity emit their full slot grid. A queued
    // packet spilling over a boundary activates the next period too.
    let mut active_periods: BTreeSet<u64> = BTreeSet::new();
    for p in trace.packets() {
        active_periods.insert((p.timestamp / period).floor() as u64);
    }
    for &slot in real_slots.keys() {
        active_periods.insert((slot as f64 / rate / period).floor() as u64);
    }

    // Cover-only injections: one coin per period boundary.
    let mut inject_end = 0.0_f64;
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for k in 0..num_periods {
        let t = k as f64 * period;
        if rng.random::<f64>() < params.q {
            let offset = rng.random_range(0.0..period);
            if t + offset > inject_end {
                let start = t + offset;
                inject_end = start + period;
                intervals.push((start, inject_end));
            } else {
                inject_end += period;
                intervals
                    .last_mut()
                    .expect("extension implies an interval")
                    .1 = inject_end;
            }
        }
    }

    // Union of everything that emits, as slot indices.
    let mut emit: BTreeSet<u64> = BTreeSet::new();
    for &k in &active_periods {
        let start = slot_from(k as f64 * period, rate);
        let end = slot_from(((k + 1) as f64 * period).min(duration), rate);
        emit.extend(start..end);
    }
    for &(a, b) in &intervals {
        let start = slot_from(a, rate);
        let end = slot_from(b.min(duration), rate);
        emit.extend(start..end);
    }
    emit.extend(real_slots.keys().copied());

    if !emit.is_empty() && real_slots.len() < emit.len() && params.cover.is_empty() {
        return Err(Error::InvalidArgument(
            "cover distribution is empty but cover packets are required".into(),
        ));
    }
    let cover_sampler = if params.cover.is_empty() {
        None
    } else {
        let sizes: Vec<u32> = params.cover.iter().map(|(s, _)| s).collect();
        let weights: Vec<u64> = params.cover.iter().map(|(_, c)| c).collect();
        let index = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidArgument(format!("bad cover distribution: {e}")))?;
        Some((sizes, index))
    };

    let device_hint = trace.packets().iter().find_map(|p| p.device_id.clone());

    let mut out = Vec::with_capacity(emit.len());
    let mut out_duration = duration;
    for &slot in &emit {
        let timestamp = slot as f64 / rate;
        out_duration = out_duration.max(timestamp);
        match real_slots.get(&slot) {
            Some(&i) => {
                let p = &trace.packets()[i];
                out.push(PacketRecord {
                    timestamp,
                    size: padding.pad(p.size, rng)?,
                    device_id: p.device_id.clone(),
                    is_cover: false,
                    is_attack: p.is_attack,
                });
            }
            None => {
                let (sizes, index) = cover_sampler
                    .as_ref()
                    .expect("checked above: cover required implies sampler");
                let raw = sizes[index.sample(rng)];
                out.push(PacketRecord {
                    timestamp,
                    size: padding.pad(raw, rng)?,
                    device_id: device_hint.clone(),
                    is_cover: true,
                    is_attack: false,
                });
            }
        }
    }
    Trace::new(out, out_duration)
}

/// Constant-rate, constant-size link padding. Every slot of the grid emits a
/// packet of size `pad_to`: the queued real packet when one is due, else a
/// cover packet. Output always holds exactly `⌈duration·rate⌉` packets.
pub fn ilp_shape(trace: &Trace, rate: f64, pad_to: u32) -> Result<Trace> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rate must be positive, got {rate}"
        )));
    }
    if pad_to == 0 {
        return Err(Error::InvalidArgument("pad_to must be at least 1".into()));
    }
    let duration = trace.duration();
    let total_slots = (duration * rate).ceil() as u64;

    let mut real_slots: BTreeMap<u64, usize> = BTreeMap::new();
    let mut next_free = 0u64;
    for (i, p) in trace.packets().iter().enumerate() {
        if p.size > pad_to {
            return Err(Error::UnsupportedSize { size: p.size });
        }
        let slot = due_slot(p.timestamp, rate).max(next_free);
        if slot >= total_slots {
            return Err(Error::Overload { at: p.timestamp });
        }
        real_slots.insert(slot, i);
        next_free = slot + 1;
    }

    let device_hint = trace.packets().iter().find_map(|p| p.device_id.clone());
    let mut out = Vec::with_capacity(total_slots as usize);
    for slot in 0..total_slots {
        let timestamp = slot as f64 / rate;
        match real_slots.get(&slot) {
            Some(&i) => {
                let p = &trace.packets()[i];
                out.push(PacketRecord {
                    timestamp,
                    size: pad_to,
                    device_id: p.device_id.clone(),
                    is_cover: false,
                    is_attack: p.is_attack,
                });
            }
            None => out.push(PacketRecord {
                timestamp,
                size: pad_to,
                device_id: device_hint.clone(),
                is_cover: true,
                is_attack: false,
            }),
        }
    }
    Trace::new(
        out,
        duration.max((total_slots.saturating_sub(1)) as f64 / rate),
    )
}
