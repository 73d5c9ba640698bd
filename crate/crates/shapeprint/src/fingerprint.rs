//! Device fingerprinting from traffic metadata: learnt per-device profiles,
//! nearest-profile classification of a dominating device, confusion matrices
//! and their diagonal-rate summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::cosine_distance;
use crate::model::{
    interarrival_histogram, joint_histogram, size_histogram, DeviceId, SizeHistogram, Trace,
};

/// Everything learnt about one device from its (shaped) learning trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: DeviceId,
    pub histogram: SizeHistogram,
    /// Observed packets per second over the learning trace.
    pub mean_rate: f64,
    /// Learning-trace duration in seconds, kept so counts can be rescaled
    /// when the test interval is shorter.
    pub duration: f64,
    /// Highest-frequency size emitted by this device and no other corpus
    /// device; filled by [`assign_unique_sizes`] once the corpus is known.
    pub top_unique_size: Option<u32>,
    /// All observed sizes with counts, sorted by descending count.
    pub common_sizes: Vec<(u32, u64)>,
}

/// Learns a profile from a (shaped) trace. Ground-truth flags are ignored;
/// only sizes and counts are read.
pub fn learn_profile(trace: &Trace) -> Result<DeviceProfile> {
    if trace.is_empty() {
        return Err(Error::EmptyProfile);
    }
    let device_id = trace_label(trace).unwrap_or_else(|| DeviceId::new("-"));
    let histogram = size_histogram(trace);
    let common_sizes = histogram.sizes_by_frequency();
    Ok(DeviceProfile {
        device_id,
        mean_rate: trace.mean_rate(),
        duration: trace.duration(),
        top_unique_size: None,
        common_sizes,
        histogram,
    })
}

/// The device id a trace is labeled with (first packet's id).
pub fn trace_label(trace: &Trace) -> Option<DeviceId> {
    trace.packets().iter().find_map(|p| p.device_id.clone())
}

/// Fills each profile's `top_unique_size`: its most frequent size that no
/// other profile in the slice emits, if any exists.
pub fn assign_unique_sizes(profiles: &mut [DeviceProfile]) {
    let mut owners: BTreeMap<u32, usize> = BTreeMap::new();
    for p in profiles.iter() {
        for (size, _) in p.histogram.iter() {
            *owners.entry(size).or_insert(0) += 1;
        }
    }
    for p in profiles.iter_mut() {
        p.top_unique_size = p
            .common_sizes
            .iter()
            .map(|&(size, _)| size)
            .find(|size| owners[size] == 1);
    }
}

/// Classifies a test histogram against learnt profiles: the cosine-nearest
/// profile wins, index order breaking ties.
pub fn classify_dominant(
    profiles: &[DeviceProfile],
    test: &SizeHistogram,
) -> Result<(DeviceId, f64)> {
    if profiles.is_empty() {
        return Err(Error::EmptyProfile);
    }
    if test.is_empty() {
        return Err(Error::EmptyFeature { needed: 1, got: 0 });
    }
    let test_vec = test.to_vector();
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in profiles.iter().enumerate() {
        let d = cosine_distance(&p.histogram.to_vector(), &test_vec)?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    let (i, d) = best.expect("profiles checked non-empty");
    Ok((profiles[i].device_id.clone(), d))
}

/// Which metadata the classifier reads from a trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Feature {
    /// Packet-size frequencies only.
    PacketSize,
    /// Inter-arrival time bins only.
    InterArrival,
    /// Joint (gap bin, size bin) frequencies.
    Joint {
        time_bin_width: f64,
        size_bin_width: u32,
    },
}

/// Sparse feature counts keyed by `(time bin, size bin)`; pure size or gap
/// features zero out the unused axis.
pub type FeatureVector = BTreeMap<(u32, u32), f64>;

/// Extracts a trace's feature vector, keyed uniformly by `(u32, u32)` so all
/// feature kinds flow through the same distance machinery.
pub fn feature_vector(trace: &Trace, feature: Feature) -> Result<FeatureVector> {
    match feature {
        Feature::PacketSize => {
            let h = size_histogram(trace);
            if h.is_empty() {
                return Err(Error::EmptyFeature { needed: 1, got: 0 });
            }
            Ok(h.iter().map(|(s, c)| ((0, s), c as f64)).collect())
        }
        Feature::InterArrival => {
            let h = interarrival_histogram(trace)?;
            Ok(h.iter().map(|(b, c)| ((b, 0), c as f64)).collect())
        }
        Feature::Joint {
            time_bin_width,
            size_bin_width,
        } => Ok(joint_histogram(trace, time_bin_width, size_bin_width)?.to_vector()),
    }
}

/// Pairwise model-vs-test distances; entry (i, j) compares model i against
/// test j, so a perfect classifier minimizes every column on the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<DeviceId>,
    pub entries: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn n(&self) -> usize {
        self.labels.len()
    }
}

/// Confusion matrix of learnt profiles against labeled test traces, on the
/// packet-size feature. Test traces are matched to profiles by device id.
pub fn confusion_matrix(profiles: &[DeviceProfile], tests: &[Trace]) -> Result<ConfusionMatrix> {
    let models: Vec<(DeviceId, FeatureVector)> = profiles
        .iter()
        .map(|p| {
            let v = p
                .histogram
                .iter()
                .map(|(s, c)| ((0u32, s), c as f64))
                .collect();
            (p.device_id.clone(), v)
        })
        .collect();
    matrix_of(models, tests, Feature::PacketSize)
}

/// Confusion matrix where both models and tests are reduced to the given
/// feature; models are learnt from raw labeled traces.
pub fn feature_confusion_matrix(
    learn: &[Trace],
    tests: &[Trace],
    feature: Feature,
) -> Result<ConfusionMatrix> {
    let models: Vec<(DeviceId, FeatureVector)> = learn
        .iter()
        .map(|t| {
            let label = trace_label(t)
                .ok_or_else(|| Error::LabelMismatch("learning trace has no device id".into()))?;
            Ok((label, feature_vector(t, feature)?))
        })
        .collect::<Result<_>>()?;
    matrix_of(models, tests, feature)
}

fn matrix_of(
    models: Vec<(DeviceId, FeatureVector)>,
    tests: &[Trace],
    feature: Feature,
) -> Result<ConfusionMatrix> {
    let mut test_vectors: BTreeMap<DeviceId, FeatureVector> = BTreeMap::new();
    for t in tests {
        let label = trace_label(t)
            .ok_or_else(|| Error::LabelMismatch("test trace has no device id".into()))?;
        if test_vectors
            .insert(label.clone(), feature_vector(t, feature)?)
            .is_some()
        {
            return Err(Error::LabelMismatch(format!(
                "duplicate test label {label}"
            )));
        }
    }
    if test_vectors.len() != models.len() {
        return Err(Error::LabelMismatch(format!(
            "{} models vs {} test traces",
            models.len(),
            test_vectors.len()
        )));
    }
    let labels: Vec<DeviceId> = models.iter().map(|(id, _)| id.clone()).collect();
    let ordered_tests: Vec<&FeatureVector> = labels
        .iter()
        .map(|id| {
            test_vectors
                .get(id)
                .ok_or_else(|| Error::LabelMismatch(format!("no test trace for {id}")))
        })
        .collect::<Result<_>>()?;
    let mut entries = vec![vec![0.0; labels.len()]; labels.len()];
    for (i, (_, model)) in models.iter().enumerate() {
        for (j, test) in ordered_tests.iter().enumerate() {
            entries[i][j] = cosine_distance(model, test)?;
        }
    }
    Ok(ConfusionMatrix { labels, entries })
}

/// Fraction of columns whose strict minimum sits on the diagonal; ties count
/// as failures.
pub fn diagonal_rate(m: &ConfusionMatrix) -> f64 {
    let n = m.n();
    assert!(m.entries.len() == n && m.entries.iter().all(|r| r.len() == n));
    if n == 0 {
        return 0.0;
    }
    let mut hits = 0;
    for j in 0..n {
        let diag = m.entries[j][j];
        if (0..n).all(|i| i == j || m.entries[i][j] > diag) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}
