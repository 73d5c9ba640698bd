//! Synthetic device-traffic generation: parametric device specs and the
//! default 14-device corpus used by the experiments.
//!
//! A device alternates exponentially-distributed active and idle segments
//! (duty cycle = active fraction); inside active segments packets arrive
//! with exponential gaps at the device's mean rate, sizes drawn i.i.d. from
//! its size distribution. A small log-normal day-to-day jitter perturbs the
//! weights (and duty cycle) per generated trace, so two traces of the same
//! device differ the way two capture days would.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_distr::{Exp, Normal};

use crate::error::{Error, Result};
use crate::model::{DeviceId, PacketRecord, SizeHistogram, Trace};

/// Parametric description of one device's traffic.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeviceSpec {
    pub device_id: DeviceId,
    /// Weighted (size, probability); probabilities sum to 1.
    pub size_distribution: Vec<(u32, f64)>,
    /// Mean packets per second while active.
    pub mean_pps: f64,
    /// Mean active-segment length in seconds.
    pub burstiness: f64,
    /// Fraction of time active, in (0, 1].
    pub duty_cycle: f64,
    /// Std-dev of the per-trace log-normal weight jitter (0 = none).
    pub day_jitter: f64,
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size_distribution.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{}: size distribution is empty",
                self.device_id
            )));
        }
        let sum: f64 = self.size_distribution.iter().map(|&(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-9
            || self
                .size_distribution
                .iter()
                .any(|&(s, w)| s == 0 || w <= 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "{}: size probabilities must be positive and sum to 1 (sum {sum})",
                self.device_id
            )));
        }
        if !(self.mean_pps.is_finite() && self.mean_pps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{}: mean rate must be positive",
                self.device_id
            )));
        }
        if !(self.burstiness.is_finite() && self.burstiness > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{}: burstiness must be positive",
                self.device_id
            )));
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{}: duty cycle must lie in (0, 1]",
                self.device_id
            )));
        }
        if !(self.day_jitter.is_finite() && self.day_jitter >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{}: day jitter must be non-negative",
                self.device_id
            )));
        }
        Ok(())
    }

    /// The spec's size distribution as an integer-count histogram (weights
    /// scaled to one million), usable directly as an STP cover distribution.
    pub fn ideal_histogram(&self) -> SizeHistogram {
        SizeHistogram::from_counts(
            self.size_distribution
                .iter()
                .map(|&(s, w)| (s, ((w * 1e6).round() as u64).max(1))),
        )
    }
}

/// Generates one trace of the given duration for a device spec.
pub fn synth_device(spec: &DeviceSpec, duration: f64, rng: &mut impl Rng) -> Result<Trace> {
    spec.validate()?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "duration must be positive, got {duration}"
        )));
    }

    // Day-to-day jitter: perturb weights (and mildly the duty cycle) for
    // this trace only.
    let weights: Vec<f64> = if spec.day_jitter > 0.0 {
        let noise = Normal::new(0.0, spec.day_jitter).expect("validated std-dev");
        spec.size_distribution
            .iter()
            .map(|&(_, w)| w * noise.sample(rng).exp())
            .collect()
    } else {
        spec.size_distribution.iter().map(|&(_, w)| w).collect()
    };
    let duty = if spec.day_jitter > 0.0 {
        let noise = Normal::new(0.0, spec.day_jitter / 2.0).expect("validated std-dev");
        (spec.duty_cycle * noise.sample(rng).exp()).clamp(0.01, 1.0)
    } else {
        spec.duty_cycle
    };

    let sizes: Vec<u32> = spec.size_distribution.iter().map(|&(s, _)| s).collect();
    let pick = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("{}: bad weights: {e}", spec.device_id)))?;
    let gap = Exp::new(spec.mean_pps).expect("validated rate");

    let mut packets = Vec::new();
    let mut emit = |t: f64, rng: &mut dyn RngCore| {
        packets.push(PacketRecord::real(
            t,
            sizes[pick.sample(rng)],
            Some(spec.device_id.clone()),
        ));
    };

    if duty >= 1.0 {
        let mut t = gap.sample(rng);
        while t < duration {
            emit(t, rng);
            t += gap.sample(rng);
        }
    } else {
        let on = Exp::new(1.0 / spec.burstiness).expect("validated burstiness");
        let idle_mean = spec.burstiness * (1.0 / duty - 1.0);
        let off = Exp::new(1.0 / idle_mean).expect("positive idle mean");
        let mut t = 0.0;
        let mut active = rng.random::<f64>() < duty;
        while t < duration {
            if active {
                let end = (t + on.sample(rng)).min(duration);
                let mut at = t + gap.sample(rng);
                while at < end {
                    emit(at, rng);
                    at += gap.sample(rng);
                }
                t = end;
            } else {
                t = (t + off.sample(rng)).min(duration);
            }
            active = !active;
        }
    }
    Trace::new(packets, duration)
}

/// Builds a spec from terse literals.
fn spec(
    id: &str,
    sizes: &[(u32, f64)],
    mean_pps: f64,
    burstiness: f64,
    duty_cycle: f64,
) -> DeviceSpec {
    DeviceSpec {
        device_id: DeviceId::new(id),
        size_distribution: sizes.to_vec(),
        mean_pps,
        burstiness,
        duty_cycle,
        day_jitter: 0.08,
    }
}

/// The default 14-device corpus: five plugs/sensors (small sparse packets),
/// four speakers/hubs (mid sizes), five cameras (large high-rate packets).
/// Every size in the corpus is emitted by exactly one device, so each device
/// has a unique top size; supports avoid the attack-profile sizes.
pub fn default_corpus() -> Vec<DeviceSpec> {
    vec![
        spec(
            "plug-01",
            &[(56, 0.55), (130, 0.30), (251, 0.15)],
            3.0,
            6.0,
            0.20,
        ),
        spec(
            "plug-02",
            &[(68, 0.30), (142, 0.55), (263, 0.15)],
            3.5,
            6.0,
            0.21,
        ),
        spec(
            "plug-03",
            &[(80, 0.15), (154, 0.30), (275, 0.55)],
            2.8,
            6.0,
            0.22,
        ),
        spec(
            "sensor-04",
            &[(94, 0.45), (166, 0.45), (287, 0.10)],
            4.0,
            6.0,
            0.20,
        ),
        spec(
            "sensor-05",
            &[(106, 0.10), (178, 0.45), (299, 0.45)],
            4.0,
            7.0,
            0.23,
        ),
        spec(
            "speaker-06",
            &[(122, 0.50), (236, 0.30), (1410, 0.20)],
            8.0,
            8.0,
            0.21,
        ),
        spec(
            "speaker-07",
            &[(116, 0.40), (228, 0.40), (1420, 0.20)],
            9.0,
            8.0,
            0.22,
        ),
        spec(
            "hub-08",
            &[(62, 0.60), (244, 0.25), (1440, 0.15)],
            7.0,
            8.0,
            0.23,
        ),
        spec(
            "hub-09",
            &[(86, 0.25), (190, 0.50), (1470, 0.25)],
            10.0,
            8.0,
            0.24,
        ),
        spec(
            "camera-10",
            &[(1010, 0.30), (1450, 0.40), (1475, 0.30)],
            25.0,
            10.0,
            0.24,
        ),
        spec(
            "camera-11",
            &[(1070, 0.30), (1490, 0.45), (1505, 0.25)],
            30.0,
            10.0,
            0.22,
        ),
        spec(
            "camera-12",
            &[(1130, 0.30), (1520, 0.40), (1545, 0.30)],
            28.0,
            10.0,
            0.23,
        ),
        spec(
            "camera-13",
            &[(1190, 0.30), (1550, 0.35), (1565, 0.35)],
            32.0,
            10.0,
            0.21,
        ),
        spec(
            "camera-14",
            &[
                (1030, 0.15),
                (1110, 0.15),
                (1430, 0.30),
                (1510, 0.20),
                (1590, 0.20),
            ],
            26.0,
            10.0,
            0.22,
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cosine_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn always_on() -> DeviceSpec {
        DeviceSpec {
            duty_cycle: 1.0,
            day_jitter: 0.0,
            ..spec(
                "test",
                &[(100, 0.5), (200, 0.3), (700, 0.2)],
                20.0,
                5.0,
                0.5,
            )
        }
    }

    #[test]
    fn always_on_rate_concentrates() {
        let t = synth_device(&always_on(), 2000.0, &mut rng(1)).unwrap();
        let expected = 20.0 * 2000.0;
        assert!(
            (t.len() as f64 - expected).abs() < 0.05 * expected,
            "got {} packets",
            t.len()
        );
    }

    #[test]
    fn size_histogram_matches_spec_in_l1() {
        let spec = always_on();
        let t = synth_device(&spec, 1000.0, &mut rng(2)).unwrap();
        assert!(t.len() > 10_000);
        let freq = crate::model::size_histogram(&t).frequencies();
        let l1: f64 = spec
            .size_distribution
            .iter()
            .map(|&(s, w)| (freq.get(&s).copied().unwrap_or(0.0) - w).abs())
            .sum();
        assert!(l1 < 0.05, "L1 distance {l1}");
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = default_corpus().swap_remove(3);
        let a = synth_device(&spec, 500.0, &mut rng(3)).unwrap();
        let b = synth_device(&spec, 500.0, &mut rng(3)).unwrap();
        let c = synth_device(&spec, 500.0, &mut rng(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn duty_cycle_bounds_activity() {
        let mut spec = always_on();
        spec.duty_cycle = 0.2;
        let t = synth_device(&spec, 5000.0, &mut rng(5)).unwrap();
        let full = 20.0 * 5000.0;
        let ratio = t.len() as f64 / full;
        assert!((0.1..=0.35).contains(&ratio), "active ratio {ratio}");
    }

    #[test]
    fn corpus_has_14_distinct_devices() {
        let corpus = default_corpus();
        assert_eq!(corpus.len(), 14);
        for spec in &corpus {
            spec.validate().unwrap();
        }
        let ids: std::collections::BTreeSet<_> =
            corpus.iter().map(|s| s.device_id.clone()).collect();
        assert_eq!(ids.len(), 14);
    }

    #[test]
    fn corpus_sizes_are_globally_unique() {
        let corpus = default_corpus();
        let mut all: Vec<u32> = corpus
            .iter()
            .flat_map(|s| s.size_distribution.iter().map(|&(sz, _)| sz))
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n, "every size must belong to exactly one device");
        // sizes stay in the canonical unpadded range and off the attack sizes
        assert!(all.iter().all(|&s| (54..=1594).contains(&s)));
        for attack in [54, 60, 66, 74, 90, 91, 92] {
            assert!(!all.contains(&attack));
        }
    }

    #[test]
    fn corpus_distributions_are_pairwise_distant() {
        let corpus = default_corpus();
        for (i, a) in corpus.iter().enumerate() {
            for b in corpus.iter().skip(i + 1) {
                let va = a.ideal_histogram().to_vector();
                let vb = b.ideal_histogram().to_vector();
                let d = cosine_distance(&va, &vb).unwrap();
                assert!(d >= 0.2, "{} vs {}: {d}", a.device_id, b.device_id);
            }
        }
    }

    #[test]
    fn ideal_histogram_preserves_weights() {
        let spec = always_on();
        let h = spec.ideal_histogram();
        assert_eq!(h.count(100), 500_000);
        assert_eq!(h.count(200), 300_000);
        assert_eq!(h.count(700), 200_000);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut bad = always_on();
        bad.size_distribution = vec![(100, 0.7)];
        assert!(bad.validate().is_err());
        let mut bad = always_on();
        bad.duty_cycle = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = always_on();
        bad.mean_pps = -1.0;
        assert!(bad.validate().is_err());
    }
}
