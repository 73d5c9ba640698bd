//! Adversarial estimation of the shaping parameters the defense keeps
//! private: the padding bound W and the cover-injection probability q.
//!
//! Both estimators follow the same closed-world recipe: simulate the defense
//! over lab traces of each candidate parameter value, then place the
//! observed traffic on that grid — by global cosine argmin for W, by rate
//! thresholds for q.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{learn_profile, DeviceProfile};
use crate::metrics::cosine_distance;
use crate::model::{size_histogram, DeviceId, SizeHistogram, Trace};
use crate::obfuscation::{stp_shape, PaddingScheme, StpParams};

/// Default W grid: anchored at 10 in steps of 40, capped at 250. The step
/// matches the ±20 target accuracy of the estimator.
pub fn default_w_grid() -> Vec<u32> {
    (0..)
        .map(|i| 10 + 40 * i)
        .take_while(|&w| w <= 250)
        .collect()
}

/// Shaped profiles simulated on a (device × W) grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WGridModels {
    pub grid: Vec<u32>,
    /// One profile per (device, W), device-major order.
    pub models: Vec<(DeviceId, u32, DeviceProfile)>,
}

/// Simulates STP over each lab trace at every candidate W and learns a
/// profile per (device, W) pair. The cover distribution for each device is
/// its own raw histogram, mirroring the defense's configuration.
pub fn build_w_grid(
    device_traces: &[Trace],
    grid: &[u32],
    base: &StpParams,
    rng: &mut impl Rng,
) -> Result<WGridModels> {
    if device_traces.is_empty() || grid.is_empty() {
        return Err(Error::InvalidArgument(
            "W grid needs at least one trace and one grid value".into(),
        ));
    }
    let mut models = Vec::with_capacity(device_traces.len() * grid.len());
    for trace in device_traces {
        let label = crate::fingerprint::trace_label(trace)
            .ok_or_else(|| Error::LabelMismatch("lab trace has no device id".into()))?;
        let cover = size_histogram(trace);
        for &w in grid {
            let params = StpParams {
                pad_window: w,
                cover: cover.clone(),
                ..base.clone()
            };
            let shaped = stp_shape(trace, &params, &PaddingScheme::random(w), rng)?;
            models.push((label.clone(), w, learn_profile(&shaped)?));
        }
    }
    Ok(WGridModels {
        grid: grid.to_vec(),
        models,
    })
}

/// Global argmin over all (device, W) models: the winning model's W is the
/// estimate (to be read as W ± half the grid step) and its device is the
/// best dominating-device candidate.
pub fn estimate_w(models: &WGridModels, test: &SizeHistogram) -> Result<(u32, DeviceId, f64)> {
    if models.models.is_empty() {
        return Err(Error::EmptyProfile);
    }
    if test.is_empty() {
        return Err(Error::EmptyFeature { needed: 1, got: 0 });
    }
    let test_vec = test.to_vector();
    let mut best: Option<(f64, usize)> = None;
    for (i, (_, _, profile)) in models.models.iter().enumerate() {
        let d = cosine_distance(&profile.histogram.to_vector(), &test_vec)?;
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    let (distance, i) = best.expect("models checked non-empty");
    let (device, w, _) = &models.models[i];
    Ok((*w, device.clone(), distance))
}

/// Default q grid: 0.05 to 1.00 in steps of 0.05.
pub fn default_q_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.05).collect()
}

/// Shaped-rate thresholds over the q grid for one device.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QThresholds {
    pub device_id: DeviceId,
    pub grid: Vec<f64>,
    /// Simulated shaped pps at each grid q; monotone non-decreasing.
    pub rates: Vec<f64>,
    /// Midpoints between adjacent rates; length |grid| − 1.
    pub thresholds: Vec<f64>,
}

/// Simulates the device's shaped traffic at every grid q and records the
/// resulting rates. Sampling noise can produce tiny inversions where the
/// rate curve saturates, so rates are clamped to a running maximum to keep
/// the documented monotonicity.
pub fn build_q_thresholds(
    lab_trace: &Trace,
    grid: &[f64],
    base: &StpParams,
    rng: &mut impl Rng,
) -> Result<QThresholds> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument(
            "q grid needs at least two values".into(),
        ));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
        return Err(Error::InvalidArgument(
            "q grid must be strictly increasing within [0, 1]".into(),
        ));
    }
    let device_id = crate::fingerprint::trace_label(lab_trace)
        .ok_or_else(|| Error::LabelMismatch("lab trace has no device id".into()))?;
    let cover = size_histogram(lab_trace);
    let mut rates = Vec::with_capacity(grid.len());
    let mut running_max = 0.0_f64;
    for &q in grid {
        let params = StpParams {
            q,
            cover: cover.clone(),
            ..base.clone()
        };
        let shaped = stp_shape(lab_trace, &params, &params.default_padding(), rng)?;
        running_max = running_max.max(shaped.mean_rate());
        rates.push(running_max);
    }
    let thresholds = rates.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    Ok(QThresholds {
        device_id,
        grid: grid.to_vec(),
        rates,
        thresholds,
    })
}

/// Places an observed shaped rate on the q grid: the number of thresholds
/// strictly below the rate indexes the grid.
pub fn estimate_q(t: &QThresholds, observed_rate: f64) -> f64 {
    let below = t
        .thresholds
        .iter()
        .filter(|&&th| th < observed_rate)
        .count();
    t.grid[below.min(t.grid.len() - 1)]
}

/// Snaps a raw q value (for example an average of per-device estimates) to
/// the nearest grid point; ties resolve to the lower point.
pub fn snap_to_grid(grid: &[f64], q: f64) -> f64 {
    assert!(!grid.is_empty());
    let mut best = grid[0];
    let mut best_d = (grid[0] - q).abs();
    for &g in &grid[1..] {
        let d = (g - q).abs();
        if d < best_d {
            best = g;
            best_d = d;
        }
    }
    best
}
