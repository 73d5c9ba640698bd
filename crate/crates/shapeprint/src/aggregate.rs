//! External-adversary analysis of NAT-aggregated traffic: device-count
//! estimation from rate thresholds, subset identification by exhaustive
//! histogram comparison (Full Comparison Check), and the linear-time
//! score-based alternative (FSBC).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::DeviceProfile;
use crate::model::{DeviceId, SizeHistogram, Trace};

/// Largest corpus the exhaustive subset enumeration accepts.
pub const MAX_FULL_COMPARISON_DEVICES: usize = 20;

/// Merges per-device traces into the stream a NAT-external observer sees:
/// time-sorted, device identity erased. Ground-truth flags survive (they are
/// invisible to classifiers but needed for scoring).
pub fn nat_aggregate(traces: &[Trace]) -> Result<Trace> {
    let mut packets: Vec<_> = traces
        .iter()
        .flat_map(|t| t.packets().iter().cloned())
        .map(|mut p| {
            p.device_id = None;
            p
        })
        .collect();
    packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let duration = traces
        .iter()
        .map(|t| t.duration())
        .fold(f64::MIN_POSITIVE, f64::max);
    Trace::new(packets, duration)
}

/// Rate thresholds for estimating how many devices are active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountThresholds {
    /// `avg_rate[k-1]` = expected aggregate pps of a size-k subset.
    pub avg_rate: Vec<f64>,
    /// Midpoints between adjacent expected rates; length n−1, increasing.
    pub thresholds: Vec<f64>,
}

impl CountThresholds {
    pub fn device_count(&self) -> usize {
        self.avg_rate.len()
    }
}

/// Expected subset rates as a function of subset size. Averaged over all
/// size-k subsets the expected sum is k times the mean device rate, so the
/// closed form replaces enumeration.
pub fn learn_count_thresholds(profiles: &[DeviceProfile]) -> Result<CountThresholds> {
    if profiles.len() < 2 {
        return Err(Error::NotEnoughData(format!(
            "count thresholds need at least 2 profiles, got {}",
            profiles.len()
        )));
    }
    let mean: f64 = profiles.iter().map(|p| p.mean_rate).sum::<f64>() / profiles.len() as f64;
    let avg_rate: Vec<f64> = (1..=profiles.len()).map(|k| k as f64 * mean).collect();
    let thresholds: Vec<f64> = avg_rate.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    Ok(CountThresholds {
        avg_rate,
        thresholds,
    })
}

/// Number of thresholds strictly below the observed rate, plus one; clamped
/// to the valid subset sizes.
pub fn estimate_count(rate: f64, t: &CountThresholds) -> usize {
    let below = t.thresholds.iter().filter(|&&th| th < rate).count();
    (below + 1).clamp(1, t.device_count())
}

/// Which detector produced a subset estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsetMethod {
    FullComparison,
    Fsbc,
}

/// A detector's answer: the estimated active-device set plus diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetEstimate {
    pub devices: BTreeSet<DeviceId>,
    pub method: SubsetMethod,
    /// Subset size estimated from the observed rate.
    pub estimated_count: usize,
    /// Cosine distance of the winning candidate (full comparison only).
    pub best_distance: Option<f64>,
    /// Per-device scores (FSBC only), in profile order.
    pub scores: Vec<(DeviceId, f64)>,
    /// Candidate subsets scored (full comparison) or devices scored (FSBC);
    /// the cost-comparison diagnostic.
    pub candidates_evaluated: usize,
}

/// Dense per-profile rate vectors over the union support of all profiles
/// and the test histogram; reused across candidate subsets.
struct DenseProfiles {
    /// Per profile: histogram counts / learning duration, densely indexed.
    vectors: Vec<Vec<f64>>,
    test: Vec<f64>,
}

fn dense_profiles(profiles: &[DeviceProfile], test: &SizeHistogram) -> DenseProfiles {
    let mut index: BTreeMap<u32, usize> = BTreeMap::new();
    for p in profiles {
        for (s, _) in p.histogram.iter() {
            let next = index.len();
            index.entry(s).or_insert(next);
        }
    }
    for (s, _) in test.iter() {
        let next = index.len();
        index.entry(s).or_insert(next);
    }
    let dim = index.len();
    let vectors = profiles
        .iter()
        .map(|p| {
            let mut v = vec![0.0; dim];
            for (s, c) in p.histogram.iter() {
                v[index[&s]] = c as f64 / p.duration;
            }
            v
        })
        .collect();
    let mut tv = vec![0.0; dim];
    for (s, c) in test.iter() {
        tv[index[&s]] = c as f64;
    }
    DenseProfiles { vectors, test: tv }
}

/// Visits every k-combination of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        // advance to the next combination
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exhaustive subset identification: estimates the subset size from the
/// observed rate, then scores every subset within ±1 of that size by the
/// cosine distance between its expected aggregate histogram (sum of
/// duration-normalized member histograms) and the test histogram.
pub fn full_comparison_check(
    profiles: &[DeviceProfile],
    test: &SizeHistogram,
    test_duration: f64,
    t: &CountThresholds,
) -> Result<SubsetEstimate> {
    let n = profiles.len();
    if n > MAX_FULL_COMPARISON_DEVICES {
        return Err(Error::CombinatorialGuard {
            n,
            max: MAX_FULL_COMPARISON_DEVICES,
        });
    }
    if n == 0 || test.is_empty() {
        return Err(Error::EmptyFeature { needed: 1, got: 0 });
    }
    if !(test_duration.is_finite() && test_duration > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "test duration must be positive, got {test_duration}"
        )));
    }
    let rate = test.total() as f64 / test_duration;
    let estimated_count = estimate_count(rate, t);

    // Precomputing all pairwise dot products reduces each candidate's
    // cosine distance from O(support) to O(k²):
    //   cos(Σv_i, t) = Σ⟨v_i,t⟩ / (√(Σ⟨v_i,v_j⟩)·‖t‖).
    let dense = dense_profiles(profiles, test);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| dot(&dense.vectors[i], &dense.vectors[j]))
                .collect()
        })
        .collect();
    let with_test: Vec<f64> = (0..n)
        .map(|i| dot(&dense.vectors[i], &dense.test))
        .collect();
    let test_norm = dot(&dense.test, &dense.test).sqrt();

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut evaluated = 0usize;

    let lo = estimated_count.saturating_sub(1).max(1);
    let hi = (estimated_count + 1).min(n);
    for k in lo..=hi {
        for_each_combination(n, k, |members| {
            evaluated += 1;
            let mut num = 0.0;
            let mut sq = 0.0;
            for (a, &i) in members.iter().enumerate() {
                num += with_test[i];
                sq += gram[i][i];
                for &j in &members[..a] {
                    sq += 2.0 * gram[i][j];
                }
            }
            // Profiles are non-empty, so both norms are positive.
            let d = (1.0 - num / (sq.sqrt() * test_norm)).clamp(0.0, 1.0);
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, members.to_vec()));
            }
        });
    }
    let (distance, members) = best.expect("at least one candidate subset");
    Ok(SubsetEstimate {
        devices: members
            .into_iter()
            .map(|m| profiles[m].device_id.clone())
            .collect(),
        method: SubsetMethod::FullComparison,
        estimated_count,
        best_distance: Some(distance),
        scores: Vec::new(),
        candidates_evaluated: evaluated,
    })
}

/// Fast score-based check. Each device starts at score 1 and loses 1/total
/// per missing piece of evidence: its top unique size absent from the test,
/// or a common size observed below `f2`% of its duration-normalized learnt
/// count. The `estimate_count` highest scorers form the estimate.
pub fn fsbc(
    profiles: &[DeviceProfile],
    test: &SizeHistogram,
    f1: f64,
    f2: f64,
    t: &CountThresholds,
    test_duration: f64,
) -> Result<SubsetEstimate> {
    if !(0.0..=100.0).contains(&f1) || !(0.0..=100.0).contains(&f2) {
        return Err(Error::InvalidArgument(format!(
            "f1/f2 are percentages, got {f1}/{f2}"
        )));
    }
    if profiles.is_empty() || test.is_empty() {
        return Err(Error::EmptyFeature { needed: 1, got: 0 });
    }
    if !(test_duration.is_finite() && test_duration > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "test duration must be positive, got {test_duration}"
        )));
    }
    let rate = test.total() as f64 / test_duration;
    let estimated_count = estimate_count(rate, t);

    let mut scores: Vec<(DeviceId, f64)> = Vec::with_capacity(profiles.len());
    for p in profiles {
        let common_len = ((f1 / 100.0) * p.histogram.distinct() as f64).ceil() as usize;
        let common = &p.common_sizes[..common_len.min(p.common_sizes.len())];
        let total = (common.len() + usize::from(p.top_unique_size.is_some())) as f64;
        let mut score = 1.0;
        if total > 0.0 {
            let penalty = 1.0 / total;
            if let Some(unique) = p.top_unique_size {
                if test.count(unique) == 0 {
                    score -= penalty;
                }
            }
            let scale = test_duration / p.duration;
            for &(size, learnt) in common {
                if (test.count(size) as f64) < (f2 / 100.0) * learnt as f64 * scale {
                    score -= penalty;
                }
            }
        }
        scores.push((p.device_id.clone(), score));
    }

    // Stable sort keeps profile order among equal scores.
    let mut ranked: Vec<usize> = (0..scores.len()).collect();
    ranked.sort_by(|&a, &b| scores[b].1.total_cmp(&scores[a].1));
    let devices = ranked
        .iter()
        .take(estimated_count)
        .map(|&i| scores[i].0.clone())
        .collect();
    Ok(SubsetEstimate {
        devices,
        method: SubsetMethod::Fsbc,
        estimated_count,
        best_distance: None,
        candidates_evaluated: scores.len(),
        scores,
    })
}

/// Set-overlap quality of a subset estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub recall: f64,
    pub precision: f64,
    pub exact: bool,
    /// True when either set was empty, which forces the ratios to 0.
    pub degenerate: bool,
}

/// Standard precision/recall over device sets, plus exact equality.
pub fn subset_metrics(truth: &BTreeSet<DeviceId>, estimate: &BTreeSet<DeviceId>) -> SubsetMetrics {
    let exact = truth == estimate;
    if truth.is_empty() || estimate.is_empty() {
        return SubsetMetrics {
            recall: 0.0,
            precision: 0.0,
            exact,
            degenerate: true,
        };
    }
    let hit = truth.intersection(estimate).count() as f64;
    SubsetMetrics {
        recall: hit / truth.len() as f64,
        precision: hit / estimate.len() as f64,
        exact,
        degenerate: false,
    }
}
