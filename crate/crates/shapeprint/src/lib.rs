//! Traffic-analysis toolkit for padded and shaped IoT packet traces.
//!
//! The crate simulates the defense side — random padding, tiered padding,
//! slot-grid stochastic traffic padding (STP) and constant-rate link padding
//! (ILP) — and the analysis side: device fingerprinting from packet-size
//! distributions, device counting and subset identification behind a NAT,
//! defense-parameter estimation, cover-traffic window detection, and
//! distribution-based anomaly detection.
//!
//! All randomness flows through caller-provided seeded generators, so every
//! pipeline is reproducible bit-for-bit from a seed.
//!
//! ```
//! use rand::SeedableRng;
//! use shapeprint::model::size_histogram;
//! use shapeprint::obfuscation::{stp_shape, PaddingScheme, StpParams};
//! use shapeprint::synth::{default_corpus, synth_device};
//!
//! let spec = &default_corpus()[0];
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
//! let raw = synth_device(spec, 600.0, &mut rng).unwrap();
//! let params = StpParams::with_cover(spec.ideal_histogram());
//! let shaped = stp_shape(&raw, &params, &PaddingScheme::random(80), &mut rng).unwrap();
//! assert!(shaped.len() >= raw.len());
//! let hist = size_histogram(&shaped);
//! assert!(hist.total() as usize == shaped.len());
//! ```

pub mod aggregate;
pub mod anomaly;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod fingerprint;
pub mod io;
pub mod metrics;
pub mod model;
pub mod obfuscation;
pub mod report;
pub mod synth;
pub mod windows;

pub use error::{Error, Result};
