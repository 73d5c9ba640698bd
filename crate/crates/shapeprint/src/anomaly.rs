//! Defender-side anomaly detection on raw device traffic.
//!
//! Traffic is cut into fixed windows (120 s by default) and each window's
//! packet-size histogram is scored against a learning day of clean traffic,
//! either by local outlier factor over window histograms or by Jensen-Shannon
//! distance to the whole-day histogram. A threshold picked from a labeled
//! validation trace via a ROC sweep then flags abnormal windows. Scoring
//! never sees ground-truth labels: its inputs are histograms only.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_distr::Exp;

use crate::error::{Error, Result};
use crate::metrics::jsd;
use crate::model::{PacketRecord, SizeHistogram, Trace};

/// Default detection window, in seconds.
pub const DEFAULT_WINDOW_LENGTH: f64 = 120.0;
/// Default LOF neighborhood size.
pub const DEFAULT_NEIGHBORHOOD: usize = 20;

/// How an attack spreads its packets inside a window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BurstPattern {
    /// Poisson arrivals across the whole window.
    Continuous,
    /// Poisson bursts of `length` seconds separated by `gap` seconds.
    Bursts { length: f64, gap: f64 },
}

/// A synthetic attacker: what it sends and how fast.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackProfile {
    pub name: &'static str,
    /// Weighted packet sizes.
    pub sizes: Vec<(u32, f64)>,
    /// Packets per second while transmitting.
    pub rate: f64,
    pub burst: BurstPattern,
}

impl AttackProfile {
    /// High-rate stream of minimal fixed-size packets.
    pub fn syn_flood() -> AttackProfile {
        AttackProfile {
            name: "syn_flood",
            sizes: vec![(54, 1.0)],
            rate: 80.0,
            burst: BurstPattern::Continuous,
        }
    }

    /// High-rate repeated mid-size queries.
    pub fn dns_attack() -> AttackProfile {
        AttackProfile {
            name: "dns_attack",
            sizes: vec![(90, 0.4), (91, 0.3), (92, 0.3)],
            rate: 60.0,
            burst: BurstPattern::Continuous,
        }
    }

    /// Low-rate small-packet handshake bursts: 3 s of chatter every 15 s,
    /// averaging ~4 pps — an order of magnitude under the floods.
    pub fn cnc_infection() -> AttackProfile {
        AttackProfile {
            name: "cnc_infection",
            sizes: vec![(60, 0.4), (66, 0.35), (74, 0.25)],
            rate: 20.0,
            burst: BurstPattern::Bursts {
                length: 3.0,
                gap: 12.0,
            },
        }
    }

    pub fn all() -> Vec<AttackProfile> {
        vec![
            AttackProfile::cnc_infection(),
            AttackProfile::syn_flood(),
            AttackProfile::dns_attack(),
        ]
    }

    pub fn named(name: &str) -> Result<AttackProfile> {
        AttackProfile::all()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown attack profile '{name}'; expected cnc_infection, syn_flood, or dns_attack"
                ))
            })
    }

    fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "attack rate must be positive, got {}",
                self.rate
            )));
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&(s, w)| s == 0 || w <= 0.0) {
            return Err(Error::InvalidArgument(
                "attack size distribution must be non-empty with positive weights".into(),
            ));
        }
        if let BurstPattern::Bursts { length, gap } = self.burst {
            if !(length > 0.0 && gap >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bad burst pattern: length {length}, gap {gap}"
                )));
            }
        }
        Ok(())
    }

    /// Attack packets for one window `[start, end)`.
    fn packets(&self, start: f64, end: f64, rng: &mut dyn RngCore) -> Result<Vec<PacketRecord>> {
        let weights = WeightedIndex::new(self.sizes.iter().map(|&(_, w)| w))
            .map_err(|e| Error::InvalidArgument(format!("attack size weights: {e}")))?;
        let gaps =
            Exp::new(self.rate).map_err(|e| Error::InvalidArgument(format!("attack rate: {e}")))?;
        let mut out = Vec::new();
        let mut emit = |from: f64, to: f64, rng: &mut dyn RngCore| {
            let mut t = from + gaps.sample(rng);
            while t < to {
                out.push(PacketRecord {
                    timestamp: t,
                    size: self.sizes[weights.sample(rng)].0,
                    device_id: None,
                    is_cover: false,
                    is_attack: true,
                });
                t += gaps.sample(rng);
            }
        };
        match self.burst {
            BurstPattern::Continuous => emit(start, end, rng),
            BurstPattern::Bursts { length, gap } => {
                let mut seg = start;
                while seg < end {
                    emit(seg, (seg + length).min(end), rng);
                    seg += length + gap;
                }
            }
        }
        Ok(out)
    }
}

/// Injects attack traffic into ⌈fraction·windows⌉ windows chosen uniformly
/// without replacement. Injected packets carry `is_attack = true`; the rest
/// of the trace is untouched.
pub fn inject_attack(
    trace: &Trace,
    profile: &AttackProfile,
    window_length: f64,
    fraction: f64,
    rng: &mut dyn RngCore,
) -> Result<Trace> {
    profile.validate()?;
    if !(window_length.is_finite() && window_length > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "window length must be positive, got {window_length}"
        )));
    }
    if trace.duration() < window_length {
        return Err(Error::InvalidArgument(format!(
            "trace of {}s is shorter than one {window_length}s window",
            trace.duration()
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "window fraction must lie in [0,1], got {fraction}"
        )));
    }
    let windows = (trace.duration() / window_length).ceil() as usize;
    let hit = ((fraction * windows as f64).ceil() as usize).min(windows);
    let mut chosen = rand::seq::index::sample(rng, windows, hit).into_vec();
    chosen.sort_unstable();

    let mut packets = trace.packets().to_vec();
    for w in chosen {
        let start = w as f64 * window_length;
        let end = (start + window_length).min(trace.duration());
        packets.extend(profile.packets(start, end, rng)?);
    }
    packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Trace::new(packets, trace.duration())
}

/// One detection window: its size histogram plus the ground-truth label.
/// Scoring functions only ever see the histogram.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub histogram: SizeHistogram,
    pub attacked: bool,
}

/// Cuts a trace into fixed windows (offset 0) and builds one sample per
/// window; a window is `attacked` when it holds any injected packet.
pub fn window_samples(trace: &Trace, window_length: f64) -> Result<Vec<WindowSample>> {
    let windows = trace.split_windows(window_length, 0.0)?;
    Ok(windows
        .iter()
        .map(|w| WindowSample {
            histogram: SizeHistogram::from_sizes(w.packets().iter().map(|p| p.size)),
            attacked: w.packets().iter().any(|p| p.is_attack),
        })
        .collect())
}

fn frequency_maps(histograms: &[SizeHistogram]) -> Vec<std::collections::BTreeMap<u32, f64>> {
    histograms.iter().map(|h| h.frequencies()).collect()
}

/// Local outlier factor of each evaluation window against the normal
/// windows, with Jensen-Shannon distance between window histograms as the
/// metric. Higher means more anomalous; inliers sit near 1. Empty windows
/// score `None`.
pub fn lof_scores(
    normal: &[SizeHistogram],
    eval: &[SizeHistogram],
    neighborhood: usize,
) -> Result<Vec<Option<f64>>> {
    if neighborhood == 0 {
        return Err(Error::InvalidArgument(
            "LOF neighborhood must be ≥ 1".into(),
        ));
    }
    let reference: Vec<&SizeHistogram> = normal.iter().filter(|h| !h.is_empty()).collect();
    let n = reference.len();
    if n <= neighborhood {
        return Err(Error::NotEnoughData(format!(
            "LOF with neighborhood {neighborhood} needs more than {neighborhood} non-empty normal windows, got {n}"
        )));
    }
    let k = neighborhood;
    let freqs: Vec<_> = reference.iter().map(|h| h.frequencies()).collect();

    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = jsd(&freqs[i], &freqs[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    // k-distance and k-neighborhood (ties included) within the normal set.
    let mut kdist = vec![0.0f64; n];
    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut ds: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dist[i][j], j))
            .collect();
        ds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        kdist[i] = ds[k - 1].0;
        neighbors.push(
            ds.iter()
                .take_while(|&&(d, _)| d <= kdist[i])
                .map(|&(_, j)| j)
                .collect(),
        );
    }

    // Local reachability density, with the usual guard for coincident points.
    let lrd_of = |mean_reach: f64| 1.0 / mean_reach.max(1e-10);
    let lrd: Vec<f64> = (0..n)
        .map(|i| {
            let mean = neighbors[i]
                .iter()
                .map(|&j| dist[i][j].max(kdist[j]))
                .sum::<f64>()
                / neighbors[i].len() as f64;
            lrd_of(mean)
        })
        .collect();

    let eval_freqs = frequency_maps(eval);
    let mut scores = Vec::with_capacity(eval.len());
    for (h, f) in eval.iter().zip(&eval_freqs) {
        if h.is_empty() {
            scores.push(None);
            continue;
        }
        let mut ds: Vec<(f64, usize)> = (0..n)
            .map(|j| (jsd(f, &freqs[j]).unwrap_or(1.0), j))
            .collect();
        ds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let kd = ds[k - 1].0;
        let near: Vec<(f64, usize)> = ds.into_iter().take_while(|&(d, _)| d <= kd).collect();
        let mean_reach =
            near.iter().map(|&(d, j)| d.max(kdist[j])).sum::<f64>() / near.len() as f64;
        let own = lrd_of(mean_reach);
        let others = near.iter().map(|&(_, j)| lrd[j]).sum::<f64>() / near.len() as f64;
        scores.push(Some(others / own));
    }
    Ok(scores)
}

/// Jensen-Shannon distance of each window's histogram to the whole-day
/// normal histogram. Scores lie in [0, 1]; empty windows score `None`.
pub fn js_scores(normal: &SizeHistogram, eval: &[SizeHistogram]) -> Result<Vec<Option<f64>>> {
    if normal.is_empty() {
        return Err(Error::InvalidArgument(
            "reference histogram for JS scoring is empty".into(),
        ));
    }
    let reference = normal.frequencies();
    eval.iter()
        .map(|h| {
            if h.is_empty() {
                Ok(None)
            } else {
                jsd(&h.frequencies(), &reference).map(Some)
            }
        })
        .collect()
}

/// Outcome of the validation-trace ROC sweep.
#[derive(Clone, Debug)]
pub struct ThresholdSelection {
    /// Accuracy-maximizing threshold; windows scoring strictly above it are
    /// abnormal. Ties resolve to the lower (more sensitive) threshold.
    pub threshold: f64,
    /// Validation accuracy at that threshold.
    pub accuracy: f64,
    /// (false-positive rate, true-positive rate) per swept threshold,
    /// sorted by rate, endpoints included.
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
    /// Equal-error rate, interpolated along the ROC polyline.
    pub eer: f64,
}

impl ThresholdSelection {
    /// Threshold to deploy against unseen traffic. The swept threshold sits
    /// exactly on the highest clean validation score, leaving zero margin:
    /// a fresh clean window often lands just above it. When validation
    /// separates perfectly, the midpoint of the gap between the highest
    /// clean and lowest attacked scores buys margin on both sides; otherwise
    /// the swept threshold is kept.
    pub fn deployed(&self, scores: &[f64], attacked: &[bool]) -> f64 {
        let mut max_clean = f64::NEG_INFINITY;
        let mut min_attacked = f64::INFINITY;
        for (&s, &a) in scores.iter().zip(attacked) {
            if a {
                min_attacked = min_attacked.min(s);
            } else {
                max_clean = max_clean.max(s);
            }
        }
        if max_clean.is_finite() && min_attacked.is_finite() && max_clean < min_attacked {
            (max_clean + min_attacked) / 2.0
        } else {
            self.threshold
        }
    }
}

/// Sweeps every distinct score as a candidate threshold and keeps the most
/// accurate one. Needs both classes in the validation labels.
pub fn select_threshold(scores: &[f64], attacked: &[bool]) -> Result<ThresholdSelection> {
    if scores.len() != attacked.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores vs {} labels",
            scores.len(),
            attacked.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let mut pos: Vec<f64> = scores
        .iter()
        .zip(attacked)
        .filter(|&(_, &a)| a)
        .map(|(&s, _)| s)
        .collect();
    let mut neg: Vec<f64> = scores
        .iter()
        .zip(attacked)
        .filter(|&(_, &a)| !a)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&s| s <= t);
    let n = scores.len() as f64;

    let mut best_t = candidates[0];
    let mut best_acc = -1.0;
    let mut roc: Vec<(f64, f64)> = vec![(1.0, 1.0)]; // implicit threshold below min
    for &t in &candidates {
        let tp = above(&pos, t);
        let fp = above(&neg, t);
        let acc = (tp + (neg.len() - fp)) as f64 / n;
        if acc > best_acc {
            best_acc = acc;
            best_t = t;
        }
        roc.push((fp as f64 / neg.len() as f64, tp as f64 / pos.len() as f64));
    }
    roc.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    roc.dedup();

    let auc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum::<f64>();

    // EER: where the polyline crosses tpr = 1 − fpr.
    let g = |p: (f64, f64)| p.1 + p.0 - 1.0;
    let mut eer = 0.5;
    for w in roc.windows(2) {
        let (g1, g2) = (g(w[0]), g(w[1]));
        if g1 <= 0.0 && g2 >= 0.0 {
            let a = if g2 == g1 { 0.0 } else { -g1 / (g2 - g1) };
            eer = w[0].0 + a * (w[1].0 - w[0].0);
            break;
        }
    }

    Ok(ThresholdSelection {
        threshold: best_t,
        accuracy: best_acc,
        roc,
        auc,
        eer,
    })
}

/// Which scoring method a trained model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Lof,
    Js,
}

/// Clean-traffic reference a model scores against.
#[derive(Clone, Debug)]
pub enum Reference {
    /// Per-window histograms of the learning day (LOF).
    Windows(Vec<SizeHistogram>),
    /// The learning day as one histogram (JS).
    Histogram(SizeHistogram),
}

/// A calibrated detector: scoring reference plus decision threshold.
#[derive(Clone, Debug)]
pub struct AnomalyModel {
    pub method: Method,
    pub threshold: f64,
    pub window_length: f64,
    pub neighborhood: usize,
    pub reference: Reference,
}

impl AnomalyModel {
    pub fn lof(reference: Vec<SizeHistogram>, neighborhood: usize, threshold: f64) -> AnomalyModel {
        AnomalyModel {
            method: Method::Lof,
            threshold,
            window_length: DEFAULT_WINDOW_LENGTH,
            neighborhood,
            reference: Reference::Windows(reference),
        }
    }

    pub fn js(reference: SizeHistogram, threshold: f64) -> AnomalyModel {
        AnomalyModel {
            method: Method::Js,
            threshold,
            window_length: DEFAULT_WINDOW_LENGTH,
            neighborhood: DEFAULT_NEIGHBORHOOD,
            reference: Reference::Histogram(reference),
        }
    }

    /// Scores evaluation windows; `None` marks empty windows.
    pub fn score(&self, eval: &[SizeHistogram]) -> Result<Vec<Option<f64>>> {
        match (&self.method, &self.reference) {
            (Method::Lof, Reference::Windows(normal)) => {
                lof_scores(normal, eval, self.neighborhood)
            }
            (Method::Js, Reference::Histogram(normal)) => js_scores(normal, eval),
            _ => Err(Error::InvalidArgument(
                "model method does not match its reference kind".into(),
            )),
        }
    }
}

/// Detection outcome over a set of test windows.
#[derive(Clone, Debug)]
pub struct Detection {
    /// Per-window verdicts; empty windows are never flagged.
    pub labels: Vec<bool>,
    pub scores: Vec<Option<f64>>,
    /// `None` when no window was flagged (undefined precision).
    pub precision: Option<f64>,
    /// `None` when the test set holds no attacked window.
    pub recall: Option<f64>,
    /// Clean windows flagged abnormal.
    pub false_alarms: usize,
}

/// Applies the threshold rule to each window and scores the verdicts
/// against ground truth. Ground truth is only read after scoring.
pub fn detect(model: &AnomalyModel, windows: &[WindowSample]) -> Result<Detection> {
    let histograms: Vec<SizeHistogram> = windows.iter().map(|w| w.histogram.clone()).collect();
    let scores = model.score(&histograms)?;
    let labels: Vec<bool> = scores
        .iter()
        .map(|s| matches!(s, Some(v) if *v > model.threshold))
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (w, &flagged) in windows.iter().zip(&labels) {
        match (w.attacked, flagged) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Detection {
        labels,
        scores,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        false_alarms: fp,
    })
}
