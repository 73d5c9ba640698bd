//! Domain types shared by every pipeline stage: packets, traces, size and
//! joint histograms, and time-windowing.
//!
//! Everything here is immutable after construction and purely functional,
//! so values can be shared freely across threads.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::de::{Deserialize, Deserializer};
use serde::ser::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Opaque device identifier. Cheap to clone; compares by value.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct DeviceId(Arc<str>);

impl DeviceId {
    pub fn new(id: impl AsRef<str>) -> Self {
        DeviceId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DeviceId {
    fn from(s: &str) -> Self {
        DeviceId::new(s)
    }
}

impl Serialize for DeviceId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d).map(|s| DeviceId::new(&s))
    }
}

/// One captured packet.
///
/// `is_cover` and `is_attack` are simulator ground truth: they exist solely
/// so experiments can score results. No classification path may read them.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketRecord {
    /// Seconds since trace start.
    pub timestamp: f64,
    /// Wire size in bytes. Canonical unpadded sizes lie in [54, 1594];
    /// padded sizes may exceed that range.
    pub size: u32,
    /// Emitting device, if still known. `None` once NAT aggregation erased it.
    pub device_id: Option<DeviceId>,
    /// Ground truth: bogus packet injected by a defense.
    pub is_cover: bool,
    /// Ground truth: packet injected by an attacker.
    pub is_attack: bool,
}

impl PacketRecord {
    /// A real (non-cover, non-attack) packet.
    pub fn real(timestamp: f64, size: u32, device_id: Option<DeviceId>) -> Self {
        PacketRecord {
            timestamp,
            size,
            device_id,
            is_cover: false,
            is_attack: false,
        }
    }
}

/// A time-ordered packet capture of known duration.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    packets: Vec<PacketRecord>,
    duration: f64,
}

impl Trace {
    /// Builds a trace, validating ordering and time bounds.
    pub fn new(packets: Vec<PacketRecord>, duration: f64) -> Result<Self> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "trace duration must be positive and finite, got {duration}"
            )));
        }
        let mut prev = 0.0_f64;
        for (index, p) in packets.iter().enumerate() {
            if !p.timestamp.is_finite() || p.timestamp < 0.0 {
                return Err(Error::InvalidTrace {
                    index,
                    reason: format!("timestamp {} out of range", p.timestamp),
                });
            }
            if p.timestamp < prev {
                return Err(Error::InvalidTrace {
                    index,
                    reason: "timestamps must be non-decreasing".into(),
                });
            }
            if p.timestamp > duration {
                return Err(Error::InvalidTrace {
                    index,
                    reason: format!("timestamp {} exceeds duration {duration}", p.timestamp),
                });
            }
            if p.size == 0 {
                return Err(Error::InvalidTrace {
                    index,
                    reason: "size must be at least 1".into(),
                });
            }
            prev = p.timestamp;
        }
        Ok(Trace { packets, duration })
    }

    /// An empty trace of the given duration.
    pub fn empty(duration: f64) -> Result<Self> {
        Trace::new(Vec::new(), duration)
    }

    pub fn packets(&self) -> &[PacketRecord] {
        &self.packets
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    /// Mean packet rate in packets per second.
    pub fn mean_rate(&self) -> f64 {
        self.packets.len() as f64 / self.duration
    }

    /// Restricts the trace to packets from one device. Duration is kept.
    pub fn filter_device(&self, id: &DeviceId) -> Trace {
        let packets = self
            .packets
            .iter()
            .filter(|p| p.device_id.as_ref() == Some(id))
            .cloned()
            .collect();
        Trace {
            packets,
            duration: self.duration,
        }
    }

    /// Splits the trace into consecutive windows `[offset + k·L, offset + (k+1)·L)`.
    ///
    /// Packets before `offset` attach to a partial leading window. Empty
    /// windows are retained (callers can see vacancy via `is_empty`). A
    /// packet sitting exactly at `duration` is kept in the last window, so
    /// the windows always conserve the packet count.
    pub fn split_windows(&self, window_length: f64, offset: f64) -> Result<Vec<TimeWindow<'_>>> {
        if !(window_length.is_finite() && window_length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "window length must be positive, got {window_length}"
            )));
        }
        if !(offset.is_finite() && (0.0..window_length).contains(&offset)) {
            return Err(Error::InvalidArgument(format!(
                "offset must lie in [0, window length), got {offset}"
            )));
        }
        let span = (self.duration - offset).max(0.0);
        let full = (span / window_length).ceil() as usize;
        let mut windows = Vec::with_capacity(full + 1);
        let lead_end = self.packets.partition_point(|p| p.timestamp < offset);
        if offset > 0.0 {
            windows.push(TimeWindow {
                start: 0.0,
                length: offset,
                packets: &self.packets[..lead_end],
            });
        }
        let mut cursor = lead_end;
        for k in 0..full {
            let start = offset + k as f64 * window_length;
            let end = if k + 1 == full {
                // Last window absorbs a packet at exactly `duration`.
                f64::INFINITY
            } else {
                start + window_length
            };
            let stop = self.packets[cursor..].partition_point(|p| p.timestamp < end) + cursor;
            windows.push(TimeWindow {
                start,
                length: window_length,
                packets: &self.packets[cursor..stop],
            });
            cursor = stop;
        }
        Ok(windows)
    }
}

/// A contiguous slice of a trace covering `[start, start + length)`.
#[derive(Clone, Copy, Debug)]
pub struct TimeWindow<'a> {
    pub start: f64,
    pub length: f64,
    packets: &'a [PacketRecord],
}

impl<'a> TimeWindow<'a> {
    pub fn packets(&self) -> &'a [PacketRecord] {
        self.packets
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn histogram(&self) -> SizeHistogram {
        SizeHistogram::from_sizes(self.packets.iter().map(|p| p.size))
    }

    /// Ground truth: does the window contain any non-cover packet?
    pub fn has_real(&self) -> bool {
        self.packets.iter().any(|p| !p.is_cover)
    }

    /// Ground truth: does the window contain any attack packet?
    pub fn has_attack(&self) -> bool {
        self.packets.iter().any(|p| p.is_attack)
    }
}

/// Histogram of packet sizes.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SizeHistogram {
    counts: BTreeMap<u32, u64>,
    total: u64,
}

impl SizeHistogram {
    pub fn new() -> Self {
        SizeHistogram::default()
    }

    pub fn from_sizes(sizes: impl IntoIterator<Item = u32>) -> Self {
        let mut h = SizeHistogram::new();
        for s in sizes {
            h.add(s);
        }
        h
    }

    /// Builds a histogram from weighted entries (weights become counts).
    pub fn from_counts(entries: impl IntoIterator<Item = (u32, u64)>) -> Self {
        let mut h = SizeHistogram::new();
        for (s, c) in entries {
            h.add_count(s, c);
        }
        h
    }

    pub fn add(&mut self, size: u32) {
        self.add_count(size, 1);
    }

    pub fn add_count(&mut self, size: u32, count: u64) {
        if count > 0 {
            *self.counts.entry(size).or_insert(0) += count;
            self.total += count;
        }
    }

    pub fn merge(&mut self, other: &SizeHistogram) {
        for (&s, &c) in &other.counts {
            self.add_count(s, c);
        }
    }

    pub fn count(&self, size: u32) -> u64 {
        self.counts.get(&size).copied().unwrap_or(0)
    }

    /// Sum of all counts.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Number of distinct sizes observed.
    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    /// Iterates `(size, count)` in ascending size order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts.iter().map(|(&s, &c)| (s, c))
    }

    /// Raw counts as a float-valued sparse vector.
    pub fn to_vector(&self) -> BTreeMap<u32, f64> {
        self.counts.iter().map(|(&s, &c)| (s, c as f64)).collect()
    }

    /// Normalized view summing to 1. Empty histogram yields an empty map.
    pub fn frequencies(&self) -> BTreeMap<u32, f64> {
        let total = self.total as f64;
        self.counts
            .iter()
            .map(|(&s, &c)| (s, c as f64 / total))
            .collect()
    }

    /// Counts scaled by a positive factor, as a sparse float vector.
    pub fn scaled(&self, factor: f64) -> BTreeMap<u32, f64> {
        self.counts
            .iter()
            .map(|(&s, &c)| (s, c as f64 * factor))
            .collect()
    }

    /// Sizes sorted by descending count; ties by ascending size.
    pub fn sizes_by_frequency(&self) -> Vec<(u32, u64)> {
        let mut v: Vec<(u32, u64)> = self.iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

/// Histogram of packet sizes in a trace.
pub fn size_histogram(trace: &Trace) -> SizeHistogram {
    SizeHistogram::from_sizes(trace.packets().iter().map(|p| p.size))
}

/// Number of 1-second inter-arrival bins; the last bin absorbs all longer
/// gaps so the feature vector stays fixed-length.
pub const INTERARRIVAL_BINS: u32 = 108;

/// Histogram of inter-arrival gaps in 1-second bins.
///
/// A gap of g seconds lands in bin ⌈g⌉, clamped to [1, 108]; the result is
/// keyed by bin index and reuses [`SizeHistogram`] as a generic counted
/// vector.
pub fn interarrival_histogram(trace: &Trace) -> Result<SizeHistogram> {
    let packets = trace.packets();
    if packets.len() < 2 {
        return Err(Error::EmptyFeature {
            needed: 2,
            got: packets.len(),
        });
    }
    let mut hist = SizeHistogram::new();
    for pair in packets.windows(2) {
        let gap = pair[1].timestamp - pair[0].timestamp;
        let bin = (gap.ceil() as u32).clamp(1, INTERARRIVAL_BINS);
        hist.add(bin);
    }
    Ok(hist)
}

/// 2-D histogram over (inter-arrival-time bin, size bin).
///
/// Each packet after the first contributes one cell: the gap to its
/// predecessor picks the time bin, its own size picks the size bin.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    bins: BTreeMap<(u32, u32), u64>,
    pub time_bin_width: f64,
    pub size_bin_width: u32,
    total: u64,
}

impl JointHistogram {
    pub fn bins(&self) -> &BTreeMap<(u32, u32), u64> {
        &self.bins
    }

    /// Total cell count: trace length − 1.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// Cells as a sparse float vector keyed by (time bin, size bin).
    pub fn to_vector(&self) -> BTreeMap<(u32, u32), f64> {
        self.bins.iter().map(|(&k, &c)| (k, c as f64)).collect()
    }
}

/// Builds the joint (gap, size) histogram at the given bin widths.
pub fn joint_histogram(
    trace: &Trace,
    time_bin_width: f64,
    size_bin_width: u32,
) -> Result<JointHistogram> {
    if !(time_bin_width.is_finite() && time_bin_width > 0.0) || size_bin_width == 0 {
        return Err(Error::InvalidArgument(
            "joint histogram bin widths must be positive".into(),
        ));
    }
    let packets = trace.packets();
    if packets.len() < 2 {
        return Err(Error::EmptyFeature {
            needed: 2,
            got: packets.len(),
        });
    }
    let mut bins: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for pair in packets.windows(2) {
        let gap = pair[1].timestamp - pair[0].timestamp;
        // Zero gaps share the first bin with (0, width].
        let ti = ((gap / time_bin_width).ceil() as u32).max(1) - 1;
        let si = (pair[1].size - 1) / size_bin_width;
        *bins.entry((ti, si)).or_insert(0) += 1;
    }
    Ok(JointHistogram {
        bins,
        time_bin_width,
        size_bin_width,
        total: (packets.len() - 1) as u64,
    })
}
