//! Window-level detection of real traffic inside shaped streams.
//!
//! The defense emits on a slot grid, so a window of length T holds at most
//! round(T·R) packets, one per slot. The window's feature vector is the
//! padded size in each slot (0 when vacant): order-sensitive, lossless for
//! valid shaped traffic. Non-empty windows are labeled from ground truth and
//! classified real-vs-cover with a KNN whose k is chosen by cross-validated
//! accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{TimeWindow, Trace};
use crate::obfuscation::StpParams;

/// Per-slot padded sizes of one window; 0 marks a vacant slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotFeature {
    pub slots: Vec<f64>,
}

impl SlotFeature {
    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(|&s| s == 0.0)
    }
}

/// A feature with its ground-truth label (true = contains real traffic).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub feature: SlotFeature,
    pub real: bool,
}

/// Maps a window of shaped traffic onto its slot vector.
pub fn slot_features(window: &TimeWindow, params: &StpParams) -> Result<SlotFeature> {
    if (window.length - params.period).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "window length {} does not match the shaping period {}",
            window.length, params.period
        )));
    }
    let len = params.slots_per_period();
    let mut slots = vec![0.0; len];
    for p in window.packets() {
        // The small epsilon absorbs float slop in s/R-gridded timestamps.
        let raw = ((p.timestamp - window.start) * params.rate + 1e-6).floor();
        let slot = (raw.max(0.0) as usize).min(len - 1);
        if slots[slot] != 0.0 {
            return Err(Error::MalformedShaping { slot });
        }
        slots[slot] = f64::from(p.size);
    }
    Ok(SlotFeature { slots })
}

/// Splits a shaped trace into period-length windows at the given offset and
/// labels each non-empty one from ground truth. Empty windows and the
/// partial leading window (when offset > 0) are dropped.
pub fn label_training_windows(
    shaped: &Trace,
    params: &StpParams,
    offset: f64,
) -> Result<Vec<LabeledWindow>> {
    let windows = shaped.split_windows(params.period, offset)?;
    let mut labeled = Vec::new();
    for w in &windows {
        if w.length < params.period || w.packets().is_empty() {
            continue;
        }
        labeled.push(LabeledWindow {
            feature: slot_features(w, params)?,
            real: w.packets().iter().any(|p| !p.is_cover),
        });
    }
    Ok(labeled)
}

/// KNN over slot vectors with Euclidean distance.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub training: Vec<(Vec<f64>, bool)>,
    /// Mean cross-validation accuracy achieved by the selected k.
    pub cv_accuracy: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote; ties vote "real" (false negatives cost the adversary more
/// than false positives).
fn vote(real_votes: usize, k: usize) -> bool {
    2 * real_votes >= k
}

/// Selects k by `folds`-fold cross-validated accuracy over `k_min..=k_max`
/// (ties to the smaller k) and returns the model trained on all data.
pub fn train_knn(
    labeled: &[LabeledWindow],
    k_min: usize,
    k_max: usize,
    folds: usize,
) -> Result<KnnModel> {
    if k_min == 0 || k_min > k_max || folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "bad KNN search space: k in [{k_min}, {k_max}], {folds} folds"
        )));
    }
    let n = labeled.len();
    let real = labeled.iter().filter(|w| w.real).count();
    if real == 0 || real == n {
        return Err(Error::SingleClass);
    }
    if real.min(n - real) < folds {
        return Err(Error::NotEnoughData(format!(
            "need at least {folds} examples per class, got {} real / {} cover",
            real,
            n - real
        )));
    }

    // Fold f = indices ≡ f (mod folds); every complement has ≥ n − ⌈n/folds⌉
    // points, which caps usable k.
    let largest_fold = n.div_ceil(folds);
    let k_hi = k_max.min(n - largest_fold);
    let k_lo = k_min.min(k_hi);
    let mut correct = vec![0usize; k_hi + 1];

    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, w) in labeled.iter().enumerate() {
        let fold = i % folds;
        order.clear();
        for (j, other) in labeled.iter().enumerate() {
            if j % folds != fold {
                order.push((squared_distance(&w.feature.slots, &other.feature.slots), j));
            }
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut real_votes = 0;
        for (rank, &(_, j)) in order.iter().take(k_hi).enumerate() {
            if labeled[j].real {
                real_votes += 1;
            }
            let k = rank + 1;
            if k >= k_lo && vote(real_votes, k) == w.real {
                correct[k] += 1;
            }
        }
    }

    let mut best_k = k_lo;
    for k in k_lo..=k_hi {
        if correct[k] > correct[best_k] {
            best_k = k;
        }
    }
    Ok(KnnModel {
        k: best_k,
        training: labeled
            .iter()
            .map(|w| (w.feature.slots.clone(), w.real))
            .collect(),
        cv_accuracy: correct[best_k] as f64 / n as f64,
    })
}

impl KnnModel {
    /// Classifies one slot vector.
    pub fn classify(&self, feature: &SlotFeature) -> bool {
        let mut order: Vec<(f64, usize)> = self
            .training
            .iter()
            .enumerate()
            .map(|(j, (v, _))| (squared_distance(&feature.slots, v), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = self.k.min(order.len());
        let real_votes = order
            .iter()
            .take(k)
            .filter(|&&(_, j)| self.training[j].1)
            .count();
        vote(real_votes, k)
    }

    /// Persists the model as a flat labeled-vector text file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        let dim = self.training.first().map_or(0, |(v, _)| v.len());
        let _ = writeln!(
            out,
            "k={} dim={} n={} cv_accuracy={}",
            self.k,
            dim,
            self.training.len(),
            self.cv_accuracy
        );
        for (v, label) in &self.training {
            let _ = write!(out, "{}", u8::from(*label));
            for x in v {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<KnnModel> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let err = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| err(1, "empty model file".into()))?;
        let mut k = None;
        let mut dim = None;
        let mut cv_accuracy = 0.0;
        for part in header.split_whitespace() {
            match part.split_once('=') {
                Some(("k", v)) => k = v.parse::<usize>().ok(),
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("cv_accuracy", v)) => {
                    cv_accuracy = v
                        .parse::<f64>()
                        .map_err(|e| err(1, format!("bad cv_accuracy: {e}")))?
                }
                Some(("n", _)) => {}
                _ => return Err(err(1, format!("bad header field {part:?}"))),
            }
        }
        let (k, dim) = match (k, dim) {
            (Some(k), Some(dim)) => (k, dim),
            _ => return Err(err(1, "header must hold k= and dim=".into())),
        };
        let mut training = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let label = match fields.next() {
                Some("0") => false,
                Some("1") => true,
                other => return Err(err(i + 1, format!("bad label {other:?}"))),
            };
            let v: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(i + 1, format!("bad vector entry: {e}")))?;
            if v.len() != dim {
                return Err(err(
                    i + 1,
                    format!("expected {dim} entries, got {}", v.len()),
                ));
            }
            training.push((v, label));
        }
        Ok(KnnModel {
            k,
            training,
            cv_accuracy,
        })
    }
}

/// Quality of predicted labels against ground truth; positive class = real.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Classifies each window and scores the result against its label.
pub fn classify_windows(model: &KnnModel, windows: &[LabeledWindow]) -> (Vec<bool>, WindowMetrics) {
    let predictions: Vec<bool> = windows.iter().map(|w| model.classify(&w.feature)).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut correct = 0usize;
    for (w, &p) in windows.iter().zip(&predictions) {
        match (w.real, p) {
            (true, true) => {
                tp += 1;
                correct += 1;
            }
            (false, false) => correct += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
        }
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let metrics = WindowMetrics {
        accuracy: div(correct, windows.len()),
        precision: div(tp, tp + fp),
        recall: div(tp, tp + fn_),
    };
    (predictions, metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PacketRecord, SizeHistogram, Trace};
    use crate::obfuscation::{stp_shape, PaddingScheme};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> StpParams {
        StpParams::with_cover(SizeHistogram::from_counts([(100, 1), (200, 1)]))
    }

    fn toy_windows(per_class: usize) -> Vec<LabeledWindow> {
        // Two well-separated clusters in a 4-slot space.
        (0..per_class * 2)
            .map(|i| {
                let real = i % 2 == 0;
                let base = if real { 1000.0 } else { 100.0 };
                LabeledWindow {
                    feature: SlotFeature {
                        slots: vec![base + (i / 2) as f64, base, 0.0, base],
                    },
                    real,
                }
            })
            .collect()
    }

    #[test]
    fn slot_features_places_packets() {
        let t = Trace::new(
            vec![
                PacketRecord::real(2.0, 120, None),
                PacketRecord::real(2.5, 300, None),
                PacketRecord::real(2.99, 90, None),
            ],
            10.0,
        )
        .unwrap();
        let p = params();
        let windows = t.split_windows(1.0, 0.0).unwrap();
        let f = slot_features(&windows[2], &p).unwrap();
        assert_eq!(f.slots.len(), 100);
        assert_eq!(f.slots[0], 120.0);
        assert_eq!(f.slots[50], 300.0);
        assert_eq!(f.slots[99], 90.0);
        assert_eq!(f.slots.iter().filter(|&&s| s != 0.0).count(), 3);

        let empty = slot_features(&windows[5], &p).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn slot_features_rejects_double_occupancy() {
        let t = Trace::new(
            vec![
                PacketRecord::real(1.001, 120, None),
                PacketRecord::real(1.002, 130, None),
            ],
            2.0,
        )
        .unwrap();
        let windows = t.split_windows(1.0, 0.0).unwrap();
        assert!(matches!(
            slot_features(&windows[1], &params()),
            Err(Error::MalformedShaping { slot: 0 })
        ));
    }

    #[test]
    fn active_period_fills_every_slot_of_aligned_window() {
        let t = Trace::new(vec![PacketRecord::real(3.2, 100, None)], 10.0).unwrap();
        let mut p = params();
        p.q = 0.0;
        let shaped = stp_shape(
            &t,
            &p,
            &PaddingScheme::random(80),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let windows = shaped.split_windows(1.0, 0.0).unwrap();
        let f = slot_features(&windows[3], &p).unwrap();
        assert!(f.slots.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn half_aligned_window_is_zero_on_the_idle_side() {
        let t = Trace::new(vec![PacketRecord::real(3.2, 100, None)], 10.0).unwrap();
        let mut p = params();
        p.q = 0.0;
        let shaped = stp_shape(
            &t,
            &p,
            &PaddingScheme::random(80),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        // window [2.5, 3.5): left half overlaps idle period 2, right half
        // overlaps active period 3.
        let windows = shaped.split_windows(1.0, 0.5).unwrap();
        let w = &windows[3];
        assert_eq!(w.start, 2.5);
        let f = slot_features(w, &p).unwrap();
        assert!(f.slots[..50].iter().all(|&s| s == 0.0));
        assert!(f.slots[50..].iter().all(|&s| s > 0.0));
    }

    #[test]
    fn labeling_drops_empty_and_partial_windows() {
        let t = Trace::new(vec![PacketRecord::real(3.2, 100, None)], 10.0).unwrap();
        let mut p = params();
        p.q = 0.0;
        let shaped = stp_shape(
            &t,
            &p,
            &PaddingScheme::random(80),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let labeled = label_training_windows(&shaped, &p, 0.5).unwrap();
        // only the two windows overlapping period 3 survive; the real packet
        // sits in the first of them, the second holds cover only
        assert_eq!(labeled.len(), 2);
        assert_eq!(labeled.iter().filter(|w| w.real).count(), 1);
    }

    #[test]
    fn cover_only_windows_label_false() {
        let trace = Trace::empty(50.0).unwrap();
        let p = StpParams { q: 0.5, ..params() };
        let shaped = stp_shape(
            &trace,
            &p,
            &PaddingScheme::random(80),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let labeled = label_training_windows(&shaped, &p, 0.5).unwrap();
        assert!(!labeled.is_empty());
        assert!(labeled.iter().all(|w| !w.real));
    }

    #[test]
    fn knn_perfect_on_separable_data_picks_smallest_k() {
        let model = train_knn(&toy_windows(15), 1, 20, 10).unwrap();
        assert_eq!(model.k, 1);
        assert_eq!(model.cv_accuracy, 1.0);
    }

    #[test]
    fn knn_classifies_training_points_back() {
        let data = toy_windows(12);
        let model = train_knn(&data, 1, 5, 10).unwrap();
        let (predictions, metrics) = classify_windows(&model, &data);
        assert!(predictions.iter().zip(&data).all(|(&p, w)| p == w.real));
        assert_eq!(metrics.accuracy, 1.0);
        assert_eq!(metrics.precision, 1.0);
        assert_eq!(metrics.recall, 1.0);
    }

    #[test]
    fn knn_rejects_degenerate_training_sets() {
        let mut single = toy_windows(12);
        for w in &mut single {
            w.real = true;
        }
        assert!(matches!(
            train_knn(&single, 1, 5, 10),
            Err(Error::SingleClass)
        ));

        let small = toy_windows(4); // 4 per class < 10 folds
        assert!(matches!(
            train_knn(&small, 1, 5, 10),
            Err(Error::NotEnoughData(_))
        ));
    }

    #[test]
    fn knn_tie_votes_real() {
        let data = [
            LabeledWindow {
                feature: SlotFeature {
                    slots: vec![0.0, 0.0],
                },
                real: true,
            },
            LabeledWindow {
                feature: SlotFeature {
                    slots: vec![10.0, 10.0],
                },
                real: false,
            },
        ];
        let model = KnnModel {
            k: 2,
            training: data
                .iter()
                .map(|w| (w.feature.slots.clone(), w.real))
                .collect(),
            cv_accuracy: 0.0,
        };
        // equidistant voters, one per class → tie → real
        assert!(model.classify(&SlotFeature {
            slots: vec![5.0, 5.0]
        }));
    }

    #[test]
    fn model_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        let model = train_knn(&toy_windows(12), 1, 5, 10).unwrap();
        model.save(&path).unwrap();
        let back = KnnModel::load(&path).unwrap();
        assert_eq!(back, model);
    }
}
