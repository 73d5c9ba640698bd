//! Named end-to-end experiment pipelines behind the CLI.
//!
//! Each experiment synthesizes its corpus from device specs, runs one attack
//! or defense evaluation, and writes CSV tables, heatmaps (ASCII + PGM), and
//! a JSON summary embedding the full config and seed; re-running the same
//! config reproduces every report byte-for-byte.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::aggregate::{
    estimate_count, fsbc, full_comparison_check, learn_count_thresholds, subset_metrics,
    CountThresholds,
};
use crate::anomaly::{
    detect, inject_attack, js_scores, lof_scores, select_threshold, window_samples, AnomalyModel,
    AttackProfile, WindowSample, DEFAULT_NEIGHBORHOOD, DEFAULT_WINDOW_LENGTH,
};
use crate::error::{Error, Result};
use crate::estimation::{
    build_q_thresholds, build_w_grid, default_q_grid, default_w_grid, estimate_q, estimate_w,
    snap_to_grid, QThresholds,
};
use crate::fingerprint::{
    assign_unique_sizes, confusion_matrix, diagonal_rate, feature_confusion_matrix, learn_profile,
    ConfusionMatrix, DeviceProfile, Feature,
};
use crate::metrics::chi_squared_independence;
use crate::model::{size_histogram, SizeHistogram, Trace};
use crate::obfuscation::{stp_shape, PaddingScheme, StpParams};
use crate::report;
use crate::synth::{default_corpus, synth_device, DeviceSpec};
use crate::windows::{classify_windows, label_training_windows, train_knn, LabeledWindow};

/// All runnable experiment names.
pub const EXPERIMENTS: &[&str] = &[
    "dominant",
    "local",
    "count",
    "subset-full",
    "subset-fsbc",
    "level100",
    "estimate-w",
    "estimate-q",
    "windows",
    "anomaly",
    "chi2",
];

/// Environment variable the CLI consults for the default output directory.
pub const OUTPUT_DIR_ENV: &str = "SHAPEPRINT_OUT";

/// Windows with fewer packets than this carry too little evidence to score
/// in the anomaly experiment; injected windows always clear it by orders of
/// magnitude, so skipping them costs no recall.
pub const ANOMALY_EVIDENCE_FLOOR: u64 = 100;

/// Everything an experiment needs: defense parameters, corpus, durations,
/// seed, and where to write reports.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Cover-traffic injection probability per period boundary.
    pub q: f64,
    /// Shaping period T in seconds.
    pub period: f64,
    /// Shaping rate R in packets per second.
    pub rate: f64,
    /// Random-padding window W in bytes.
    pub pad_window: u32,
    pub learn_duration: f64,
    pub test_duration: f64,
    /// JSON file of device specs; `None` uses the built-in corpus.
    pub corpus: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            q: 0.1,
            period: 1.0,
            rate: 100.0,
            pad_window: 80,
            learn_duration: 10_800.0,
            test_duration: 1_800.0,
            corpus: None,
            output_dir: PathBuf::from("reports"),
        }
    }
}

impl ExperimentConfig {
    /// Shaping parameters with the given cover distribution.
    pub fn stp_for(&self, cover: SizeHistogram) -> StpParams {
        StpParams {
            q: self.q,
            period: self.period,
            rate: self.rate,
            pad_window: self.pad_window,
            cover,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stp_for(SizeHistogram::from_counts([(1, 1)]))
            .validate()?;
        for (name, d) in [
            ("learn duration", self.learn_duration),
            ("test duration", self.test_duration),
        ] {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {d}"
                )));
            }
        }
        Ok(())
    }

    fn specs(&self) -> Result<Vec<DeviceSpec>> {
        match &self.corpus {
            None => Ok(default_corpus()),
            Some(path) => load_corpus(path),
        }
    }
}

/// Loads device specs from a JSON file (a list of spec objects).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<DeviceSpec>> {
    let specs: Vec<DeviceSpec> = serde_json::from_str(&fs::read_to_string(path)?)?;
    if specs.is_empty() {
        return Err(Error::InvalidArgument(
            "corpus file holds no device specs".into(),
        ));
    }
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

/// Saves device specs as the JSON format `load_corpus` reads.
pub fn save_corpus(specs: &[DeviceSpec], path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(specs)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Statistically independent seed for one named sub-task of an experiment.
fn child_seed(seed: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ splitmix64(h))
}

fn rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, tag))
}

fn synth_corpus(specs: &[DeviceSpec], duration: f64, seed: u64, tag: &str) -> Result<Vec<Trace>> {
    specs
        .iter()
        .map(|s| {
            synth_device(
                s,
                duration,
                &mut rng(seed, &format!("{tag}/{}", s.device_id)),
            )
        })
        .collect()
}

fn shape_corpus(
    raw: &[Trace],
    specs: &[DeviceSpec],
    config: &ExperimentConfig,
    padding: &PaddingScheme,
    seed: u64,
    tag: &str,
) -> Result<Vec<Trace>> {
    raw.iter()
        .zip(specs)
        .map(|(t, s)| {
            let params = config.stp_for(s.ideal_histogram());
            stp_shape(
                t,
                &params,
                padding,
                &mut rng(seed, &format!("{tag}/{}", s.device_id)),
            )
        })
        .collect()
}

fn learn_all(traces: &[Trace]) -> Result<Vec<DeviceProfile>> {
    let mut profiles = traces
        .iter()
        .map(learn_profile)
        .collect::<Result<Vec<_>>>()?;
    assign_unique_sizes(&mut profiles);
    Ok(profiles)
}

/// Output directory for one experiment; tracks every file written.
struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn new(config: &ExperimentConfig, name: &str) -> Result<Out> {
        let dir = config.output_dir.join(name);
        fs::create_dir_all(&dir)?;
        Ok(Out {
            dir,
            files: Vec::new(),
        })
    }

    fn path(&mut self, file: &str) -> PathBuf {
        let p = self.dir.join(file);
        self.files.push(p.clone());
        p
    }
}

/// What an experiment produced: its summary (also written to summary.json)
/// and the paths of every report file.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub name: String,
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

fn finish(
    mut out: Out,
    name: &str,
    config: &ExperimentConfig,
    results: Map<String, Value>,
) -> Result<ExperimentOutcome> {
    let mut root = Map::new();
    root.insert("experiment".into(), json!(name));
    root.insert("config".into(), serde_json::to_value(config)?);
    root.insert("results".into(), Value::Object(results));
    let summary = Value::Object(root);
    report::write_json(out.path("summary.json"), &summary)?;
    Ok(ExperimentOutcome {
        name: name.to_string(),
        summary,
        files: out.files,
    })
}

fn write_matrix(out: &mut Out, stem: &str, m: &ConfusionMatrix) -> Result<()> {
    let labels: Vec<String> = m.labels.iter().map(ToString::to_string).collect();
    report::write_matrix_csv(
        out.path(&format!("{stem}.csv")),
        "model\\test",
        &labels,
        &labels,
        &m.entries,
    )?;
    fs::write(
        out.path(&format!("{stem}.txt")),
        report::ascii_heatmap(&m.entries),
    )?;
    report::write_pgm(out.path(&format!("{stem}.pgm")), &m.entries, 16)?;
    Ok(())
}

/// Runs one named experiment; see [`EXPERIMENTS`] for the catalogue.
pub fn run_experiment(name: &str, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let specs = config.specs()?;
    match name {
        "dominant" => dominant(config, &specs),
        "local" => local(config, &specs),
        "count" => count(config, &specs),
        "subset-full" => subset(config, &specs, "subset-full"),
        "subset-fsbc" => subset(config, &specs, "subset-fsbc"),
        "level100" => level100(config, &specs),
        "estimate-w" => estimate_w_experiment(config, &specs),
        "estimate-q" => estimate_q_experiment(config, &specs),
        "windows" => windows_experiment(config, &specs),
        "anomaly" => anomaly_experiment(config, &specs),
        "chi2" => chi2_experiment(config, &specs),
        other => Err(Error::UnknownExperiment(other.to_string())),
    }
}

/// Shaped learn/test corpus under the default random padding.
fn shaped_corpus_pair(
    config: &ExperimentConfig,
    specs: &[DeviceSpec],
    padding: &PaddingScheme,
    tag: &str,
) -> Result<(Vec<Trace>, Vec<Trace>)> {
    let learn_raw = synth_corpus(
        specs,
        config.learn_duration,
        config.seed,
        &format!("{tag}/learn-raw"),
    )?;
    let test_raw = synth_corpus(
        specs,
        config.test_duration,
        config.seed,
        &format!("{tag}/test-raw"),
    )?;
    let learn = shape_corpus(
        &learn_raw,
        specs,
        config,
        padding,
        config.seed,
        &format!("{tag}/learn-shape"),
    )?;
    let test = shape_corpus(
        &test_raw,
        specs,
        config,
        padding,
        config.seed,
        &format!("{tag}/test-shape"),
    )?;
    Ok((learn, test))
}

/// Dominating-device identification under STP: one shaped learning trace
/// and one shaped test trace per device, packet-size confusion matrix.
fn dominant(config: &ExperimentConfig, specs: &[DeviceSpec]) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, "dominant")?;
    let padding = PaddingScheme::random(config.pad_window);
    let (learn, test) = shaped_corpus_pair(config, specs, &padding, "dominant")?;
    let profiles = learn_all(&learn)?;
    let matrix = confusion_matrix(&profiles, &test)?;
    write_matrix(&mut out, "confusion", &matrix)?;
    let mut results = Map::new();
    results.insert("devices".into(), json!(matrix.n()));
    results.insert("diagonal_rate".into(), json!(diagonal_rate(&matrix)));
    finish(out, "dominant", config, results)
}

/// Local-observer feature comparison: how much identification each feature
/// retains against STP (packet sizes vs inter-arrival times vs joint).
fn local(config: &ExperimentConfig, specs: &[DeviceSpec]) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, "local")?;
    let padding = PaddingScheme::random(config.pad_window);
    let (learn, test) = shaped_corpus_pair(config, specs, &padding, "local")?;
    let features = [
        ("size", Feature::PacketSize),
        ("interarrival", Feature::InterArrival),
        (
            "joint",
            Feature::Joint {
                time_bin_width: config.period,
                size_bin_width: 100,
            },
        ),
    ];
    let mut rates = Map::new();
    for (name, feature) in features {
        let matrix = feature_confusion_matrix(&learn, &test, feature)?;
        write_matrix(&mut out, name, &matrix)?;
        rates.insert(name.into(), json!(diagonal_rate(&matrix)));
    }
    let mut results = Map::new();
    results.insert("diagonal_rates".into(), Value::Object(rates));
    finish(out, "local", config, results)
}

/// Learning-side state shared by the count and subset experiments.
struct NatSetup {
    profiles: Vec<DeviceProfile>,
    thresholds: CountThresholds,
    /// Per-device shaped test histograms; subset aggregates are their sums.
    test_hists: Vec<SizeHistogram>,
}

fn nat_setup(
    config: &ExperimentConfig,
    specs: &[DeviceSpec],
    padding: &PaddingScheme,
    tag: &str,
) -> Result<NatSetup> {
    let (learn, test) = shaped_corpus_pair(config, specs, padding, tag)?;
    let profiles = learn_all(&learn)?;
    let thresholds = learn_count_thresholds(&profiles)?;
    let test_hists = test.iter().map(size_histogram).collect();
    Ok(NatSetup {
        profiles,
        thresholds,
        test_hists,
    })
}

/// One random non-empty device subset per trial, with its aggregate
/// histogram (sum of the members' shaped test histograms).
fn sample_subsets(
    n: usize,
    trials: usize,
    test_hists: &[SizeHistogram],
    seed: u64,
    tag: &str,
) -> Vec<(Vec<usize>, SizeHistogram)> {
    let mut r = rng(seed, tag);
    (0..trials)
        .map(|_| {
            let k = r.random_range(1..=n);
            let mut members = rand::seq::index::sample(&mut r, n, k).into_vec();
            members.sort_unstable();
            let mut hist = SizeHistogram::new();
            for &m in &members {
                hist.merge(&test_hists[m]);
            }
            (members, hist)
        })
        .collect()
}

const SUBSET_TRIALS: usize = 200;

/// Device counting behind the NAT: thresholds from per-device shaped rates,
/// then count estimation over random subsets of the shaped test corpus.
fn count(config: &ExperimentConfig, specs: &[DeviceSpec]) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, "count")?;
    let padding = PaddingScheme::random(config.pad_window);
    let setup = nat_setup(config, specs, &padding, "count")?;
    let subsets = sample_subsets(
        specs.len(),
        SUBSET_TRIALS,
        &setup.test_hists,
        config.seed,
        "count/subsets",
    );

    let mut rows = Vec::new();
    let mut exact = 0usize;
    let mut within_one = 0usize;
    for (trial, (members, hist)) in subsets.iter().enumerate() {
        let rate = hist.total() as f64 / config.test_duration;
        let estimate = estimate_count(rate, &setup.thresholds);
        let truth = members.len();
        exact += usize::from(estimate == truth);
        within_one += usize::from(estimate.abs_diff(truth) <= 1);
        rows.push(vec![
            trial.to_string(),
            truth.to_string(),
            estimate.to_string(),
            format!("{rate}"),
        ]);
    }
    report::write_csv(
        out.path("counts.csv"),
        &["trial", "truth", "estimate", "rate_pps"],
        &rows,
    )?;

    let mut results = Map::new();
    results.insert("trials".into(), json!(SUBSET_TRIALS));
    results.insert("devices".into(), json!(setup.thresholds.device_count()));
    results.insert(
        "exact_rate".into(),
        json!(exact as f64 / SUBSET_TRIALS as f64),
    );
    results.insert(
        "within_one_rate".into(),
        json!(within_one as f64 / SUBSET_TRIALS as f64),
    );
    finish(out, "count", config, results)
}

/// Per-subset-size accumulation of subset-identification quality.
#[derive(Clone, Copy, Default)]
struct SizeStats {
    trials: usize,
    precision: f64,
    recall: f64,
    exact: usize,
}

fn subset_trial_rows(stats: &[SizeStats]) -> Vec<Vec<String>> {
    stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.trials > 0)
        .map(|(k, s)| {
            let n = s.trials as f64;
            vec![
                k.to_string(),
                s.trials.to_string(),
                format!("{}", s.precision / n),
                format!("{}", s.recall / n),
                format!("{}", s.exact as f64 / n),
            ]
        })
        .collect()
}

/// Runs one subset-identification method over sampled subsets and returns
/// (per-size stats, overall precision, recall, exact rate).
fn run_subset_method(
    setup: &NatSetup,
    subsets: &[(Vec<usize>, SizeHistogram)],
    test_duration: f64,
    method: &str,
) -> Result<(Vec<SizeStats>, f64, f64, f64)> {
    let n = setup.profiles.len();
    let mut stats = vec![SizeStats::default(); n + 1];
    let (mut psum, mut rsum, mut esum) = (0.0, 0.0, 0usize);
    for (members, hist) in subsets {
        let estimate = match method {
            "subset-full" => {
                full_comparison_check(&setup.profiles, hist, test_duration, &setup.thresholds)?
            }
            _ => fsbc(
                &setup.profiles,
                hist,
                80.0,
                90.0,
                &setup.thresholds,
                test_duration,
            )?,
        };
        let truth: BTreeSet<_> = members
            .iter()
            .map(|&m| setup.profiles[m].device_id.clone())
            .collect();
        let m = subset_metrics(&truth, &estimate.devices);
        let s = &mut stats[members.len()];
        s.trials += 1;
        s.precision += m.precision;
        s.recall += m.recall;
        s.exact += usize::from(m.exact);
        psum += m.precision;
        rsum += m.recall;
        esum += usize::from(m.exact);
    }
    let t = subsets.len() as f64;
    Ok((stats, psum / t, rsum / t, esum as f64 / t))
}

/// Subset identification behind the NAT under STP with random padding,
/// with either the exhaustive check or FSBC.
fn subset(
    config: &ExperimentConfig,
    specs: &[DeviceSpec],
    name: &str,
) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, name)?;
    let padding = PaddingScheme::random(config.pad_window);
    let setup = nat_setup(config, specs, &padding, "subset")?;
    let subsets = sample_subsets(
        specs.len(),
        SUBSET_TRIALS,
        &setup.test_hists,
        config.seed,
        "subset/subsets",
    );
    let (stats, precision, recall, exact) =
        run_subset_method(&setup, &subsets, config.test_duration, name)?;
    report::write_csv(
        out.path("by_size.csv"),
        &["subset_size", "trials", "precision", "recall", "exact"],
        &subset_trial_rows(&stats),
    )?;
    let mut results = Map::new();
    results.insert("trials".into(), json!(SUBSET_TRIALS));
    results.insert("precision".into(), json!(precision));
    results.insert("recall".into(), json!(recall));
    results.insert("exact_rate".into(), json!(exact));
    if name == "subset-fsbc" {
        results.insert("f1_percent".into(), json!(80.0));
        results.insert("f2_percent".into(), json!(90.0));
    }
    finish(out, name, config, results)
}

/// Level-100 tiered padding vs random padding: dominating-device
/// identification is unaffected, while subset identification collapses.
fn level100(config: &ExperimentConfig, specs: &[DeviceSpec]) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, "level100")?;
    let mut results = Map::new();
    let mut diag = Map::new();
    let mut exact = Map::new();
    let mut size_rows: Vec<Vec<String>> = Vec::new();
    for (pname, padding) in [
        ("random", PaddingScheme::random(config.pad_window)),
        ("level100", PaddingScheme::Level100),
    ] {
        let (learn, test) = shaped_corpus_pair(config, specs, &padding, "level100")?;
        let profiles = learn_all(&learn)?;
        let matrix = confusion_matrix(&profiles, &test)?;
        write_matrix(&mut out, &format!("confusion_{pname}"), &matrix)?;
        diag.insert(pname.into(), json!(diagonal_rate(&matrix)));

        let thresholds = learn_count_thresholds(&profiles)?;
        let test_hists: Vec<SizeHistogram> = test.iter().map(size_histogram).collect();
        let setup = NatSetup {
            profiles,
            thresholds,
            test_hists,
        };
        // identical subsets under both paddings, for a fair comparison
        let subsets = sample_subsets(
            specs.len(),
            SUBSET_TRIALS,
            &setup.test_hists,
            config.seed,
            "level100/subsets",
        );
        let (stats, _, _, exact_rate) =
            run_subset_method(&setup, &subsets, config.test_duration, "subset-full")?;
        for row in subset_trial_rows(&stats) {
            let mut row = row;
            row.insert(0, pname.to_string());
            size_rows.push(row);
        }
        exact.insert(pname.into(), json!(exact_rate));
    }
    report::write_csv(
        out.path("subset_by_size.csv"),
        &[
            "padding",
            "subset_size",
            "trials",
            "precision",
            "recall",
            "exact",
        ],
        &size_rows,
    )?;
    let degradation =
        (exact["random"].as_f64().unwrap() - exact["level100"].as_f64().unwrap()) * 100.0;
    results.insert("diagonal_rate".into(), Value::Object(diag));
    results.insert("subset_exact_rate".into(), Value::Object(exact));
    results.insert("exact_degradation_points".into(), json!(degradation));
    finish(out, "level100", config, results)
}

const W_TRIALS: usize = 100;

/// Padding-window estimation: grid models per device from lab traces, then
/// sweep the true W and read off the nearest-model estimate.
fn estimate_w_experiment(
    config: &ExperimentConfig,
    specs: &[DeviceSpec],
) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, "estimate-w")?;
    let lab = synth_corpus(specs, config.learn_duration, config.seed, "estimate-w/lab")?;
    let grid = default_w_grid();
    let base = config.stp_for(SizeHistogram::new());
    let models = build_w_grid(
        &lab,
        &grid,
        &base,
        &mut rng(config.seed, "estimate-w/models"),
    )?;

    let true_ws: Vec<u32> = (0..13).map(|i| 40 + i * 10).collect(); // 40..160
    let mut rows = Vec::new();
    let mut within_20 = 0usize;
    let mut heat = vec![vec![0.0f64; grid.len()]; true_ws.len()];
    for trial in 0..W_TRIALS {
        let true_w = true_ws[trial % true_ws.len()];
        let spec = &specs[trial % specs.len()];
        let raw = synth_device(
            spec,
            config.test_duration,
            &mut rng(config.seed, &format!("estimate-w/raw/{trial}")),
        )?;
        let params = StpParams {
            pad_window: true_w,
            cover: spec.ideal_histogram(),
            ..base.clone()
        };
        let shaped = stp_shape(
            &raw,
            &params,
            &PaddingScheme::random(true_w),
            &mut rng(config.seed, &format!("estimate-w/shape/{trial}")),
        )?;
        let (est, device, distance) = estimate_w(&models, &size_histogram(&shaped))?;
        within_20 += usize::from(est.abs_diff(true_w) <= 20);
        let row_idx = trial % true_ws.len();
        let col_idx = grid.iter().position(|&g| g == est).unwrap_or(0);
        heat[row_idx][col_idx] += 1.0;
        rows.push(vec![
            trial.to_string(),
            spec.device_id.to_string(),
            true_w.to_string(),
            est.to_string(),
            device.to_string(),
            format!("{distance}"),
        ]);
    }
    report::write_csv(
        out.path("trials.csv"),
        &[
            "trial",
            "device",
            "true_w",
            "estimated_w",
            "matched_device",
            "distance",
        ],
        &rows,
    )?;
    let row_labels: Vec<String> = true_ws.iter().map(|w| format!("W={w}")).collect();
    let col_labels: Vec<String> = grid.iter().map(|w| format!("W={w}")).collect();
    report::write_matrix_csv(
        out.path("sweep.csv"),
        "true\\estimated",
        &col_labels,
        &row_labels,
        &heat,
    )?;
    fs::write(out.path("sweep.txt"), report::ascii_heatmap(&heat))?;
    report::write_pgm(out.path("sweep.pgm"), &heat, 16)?;

    // grid-point recovery: shaping at an exact grid W must find that model
    let mut grid_exact = 0usize;
    let mut grid_max_distance = 0.0f64;
    for (i, &w) in grid.iter().enumerate() {
        let spec = &specs[i % specs.len()];
        let raw = synth_device(
            spec,
            config.test_duration,
            &mut rng(config.seed, &format!("estimate-w/grid-raw/{w}")),
        )?;
        let params = StpParams {
            pad_window: w,
            cover: spec.ideal_histogram(),
            ..base.clone()
        };
        let shaped = stp_shape(
            &raw,
            &params,
            &PaddingScheme::random(w),
            &mut rng(config.seed, &format!("estimate-w/grid-shape/{w}")),
        )?;
        let (est, _, distance) = estimate_w(&models, &size_histogram(&shaped))?;
        grid_exact += usize::from(est == w);
        grid_max_distance = grid_max_distance.max(distance);
    }

    let mut results = Map::new();
    results.insert("trials".into(), json!(W_TRIALS));
    results.insert(
        "within_20_rate".into(),
        json!(within_20 as f64 / W_TRIALS as f64),
    );
    results.insert("grid_exact".into(), json!(grid_exact));
    results.insert("grid_points".into(), json!(grid.len()));
    results.insert("grid_max_distance".into(), json!(grid_max_distance));
    finish(out, "estimate-w", config, results)
}

/// Cover-probability estimation: per-device rate thresholds from lab
/// simulation, estimates averaged across devices and snapped to the grid.
fn estimate_q_experiment(
    config: &ExperimentConfig,
    specs: &[DeviceSpec],
) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, "estimate-q")?;
    let grid = default_q_grid();
    let base = config.stp_for(SizeHistogram::new());
    let thresholds: Vec<QThresholds> = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let lab = synth_device(
                spec,
                config.learn_duration,
                &mut rng(config.seed, &format!("estimate-q/lab/{i}")),
            )?;
            build_q_thresholds(
                &lab,
                &grid,
                &base,
                &mut rng(config.seed, &format!("estimate-q/sim/{i}")),
            )
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut exact = 0usize;
    let mut max_error = 0.0f64;
    for (qi, &true_q) in grid.iter().enumerate() {
        let mut sum = 0.0;
        for (i, spec) in specs.iter().enumerate() {
            let raw = synth_device(
                spec,
                config.test_duration,
                &mut rng(config.seed, &format!("estimate-q/raw/{qi}/{i}")),
            )?;
            let params = StpParams {
                q: true_q,
                cover: spec.ideal_histogram(),
                ..base.clone()
            };
            let shaped = stp_shape(
                &raw,
                &params,
                &params.default_padding(),
                &mut rng(config.seed, &format!("estimate-q/shape/{qi}/{i}")),
            )?;
            sum += estimate_q(&thresholds[i], shaped.mean_rate());
        }
        let mean = sum / specs.len() as f64;
        let snapped = snap_to_grid(&grid, mean);
        exact += usize::from((snapped - true_q).abs() < 1e-9);
        max_error = max_error.max((snapped - true_q).abs());
        rows.push(vec![
            format!("{true_q}"),
            format!("{mean}"),
            format!("{snapped}"),
        ]);
    }
    report::write_csv(
        out.path("estimates.csv"),
        &["true_q", "mean_estimate", "snapped"],
        &rows,
    )?;
    let mut results = Map::new();
    results.insert("grid_points".into(), json!(grid.len()));
    results.insert("exact_rate".into(), json!(exact as f64 / grid.len() as f64));
    results.insert("max_error".into(), json!(max_error));
    finish(out, "estimate-q", config, results)
}

/// Equal-count subsample of real and cover windows, shuffled so fold
/// assignment does not follow trace order.
fn balance(windows: Vec<LabeledWindow>, rng: &mut impl Rng) -> Vec<LabeledWindow> {
    let mut real: Vec<LabeledWindow> = Vec::new();
    let mut cover: Vec<LabeledWindow> = Vec::new();
    for w in windows {
        if w.real {
            real.push(w);
        } else {
            cover.push(w);
        }
    }
    real.shuffle(rng);
    cover.shuffle(rng);
    let n = real.len().min(cover.len());
    let mut out: Vec<LabeledWindow> = real
        .into_iter()
        .take(n)
        .chain(cover.into_iter().take(n))
        .collect();
    out.shuffle(rng);
    out
}

/// Window detector: slot features over offset windows of one device's
/// shaped traffic, KNN with cross-validated k, against a permutation-label
/// control.
fn windows_experiment(
    config: &ExperimentConfig,
    specs: &[DeviceSpec],
) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, "windows")?;
    let spec = &specs[4 % specs.len()];
    let params = config.stp_for(spec.ideal_histogram());
    let padding = PaddingScheme::random(config.pad_window);
    let offset = config.period / 2.0;

    let learn_raw = synth_device(
        spec,
        config.learn_duration,
        &mut rng(config.seed, "windows/learn-raw"),
    )?;
    let learn = stp_shape(
        &learn_raw,
        &params,
        &padding,
        &mut rng(config.seed, "windows/learn-shape"),
    )?;
    let train_windows = label_training_windows(&learn, &params, offset)?;
    let train_periods = label_training_windows(&learn, &params, 0.0)?.len();
    let balanced_train = balance(
        train_windows.clone(),
        &mut rng(config.seed, "windows/balance-train"),
    );
    let model = train_knn(&balanced_train, 1, 150, 10)?;

    let test_raw = synth_device(
        spec,
        config.test_duration,
        &mut rng(config.seed, "windows/test-raw"),
    )?;
    let test = stp_shape(
        &test_raw,
        &params,
        &padding,
        &mut rng(config.seed, "windows/test-shape"),
    )?;
    let test_windows = label_training_windows(&test, &params, offset)?;
    let test_periods = label_training_windows(&test, &params, 0.0)?.len();
    let balanced_test = balance(
        test_windows.clone(),
        &mut rng(config.seed, "windows/balance-test"),
    );
    let (predictions, metrics) = classify_windows(&model, &balanced_test);

    // control: same pipeline with training labels shuffled, averaged over
    // several permutations to keep the estimate near its 0.5 expectation
    const PERMUTATIONS: usize = 5;
    let mut control_accuracy = 0.0;
    for p in 0..PERMUTATIONS {
        let mut permuted = balanced_train.clone();
        let mut labels: Vec<bool> = permuted.iter().map(|w| w.real).collect();
        labels.shuffle(&mut rng(config.seed, &format!("windows/permute/{p}")));
        for (w, l) in permuted.iter_mut().zip(labels) {
            w.real = l;
        }
        let control = train_knn(&permuted, 1, 150, 10)?;
        let (_, control_metrics) = classify_windows(&control, &balanced_test);
        control_accuracy += control_metrics.accuracy / PERMUTATIONS as f64;
    }

    let rows: Vec<Vec<String>> = balanced_test
        .iter()
        .zip(&predictions)
        .enumerate()
        .map(|(i, (w, &p))| {
            vec![
                i.to_string(),
                u8::from(w.real).to_string(),
                u8::from(p).to_string(),
            ]
        })
        .collect();
    report::write_csv(
        out.path("predictions.csv"),
        &["window", "real", "predicted"],
        &rows,
    )?;
    model.save(out.path("knn_model.txt"))?;

    let mut results = Map::new();
    results.insert("device".into(), json!(spec.device_id.to_string()));
    results.insert("k".into(), json!(model.k));
    results.insert("cv_accuracy".into(), json!(model.cv_accuracy));
    results.insert("test_accuracy".into(), json!(metrics.accuracy));
    results.insert("test_precision".into(), json!(metrics.precision));
    results.insert("test_recall".into(), json!(metrics.recall));
    results.insert("control_accuracy".into(), json!(control_accuracy));
    results.insert("train_nonempty_windows".into(), json!(train_windows.len()));
    results.insert("train_nonempty_periods".into(), json!(train_periods));
    results.insert("test_nonempty_windows".into(), json!(test_windows.len()));
    results.insert("test_nonempty_periods".into(), json!(test_periods));
    finish(out, "windows", config, results)
}

/// Windows with enough evidence to score; injected windows always qualify.
fn scored_samples(trace: &Trace) -> Result<Vec<WindowSample>> {
    Ok(window_samples(trace, DEFAULT_WINDOW_LENGTH)?
        .into_iter()
        .filter(|w| w.histogram.total() >= ANOMALY_EVIDENCE_FLOOR)
        .collect())
}

/// Anomaly detection on one device's raw traffic: LOF and JS scoring,
/// thresholds from a 50%-injected validation day, then a clean hold-out
/// (false alarms) and an injected hold-out (recall) per attack profile.
fn anomaly_experiment(
    config: &ExperimentConfig,
    specs: &[DeviceSpec],
) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, "anomaly")?;
    let spec = &specs[9 % specs.len()];
    let learn = synth_device(
        spec,
        config.learn_duration,
        &mut rng(config.seed, "anomaly/learn"),
    )?;
    let validate_raw = synth_device(
        spec,
        config.learn_duration,
        &mut rng(config.seed, "anomaly/validate"),
    )?;
    let clean_hold = synth_device(
        spec,
        config.test_duration,
        &mut rng(config.seed, "anomaly/clean"),
    )?;
    let attack_hold_raw = synth_device(
        spec,
        config.test_duration,
        &mut rng(config.seed, "anomaly/attack"),
    )?;

    let normal_windows: Vec<SizeHistogram> = scored_samples(&learn)?
        .into_iter()
        .map(|w| w.histogram)
        .collect();
    let day = size_histogram(&learn);
    let clean_samples = scored_samples(&clean_hold)?;

    let mut rows = Vec::new();
    let mut score_rows = Vec::new();
    let mut results_by_case = Map::new();
    for profile in AttackProfile::all() {
        let validate = inject_attack(
            &validate_raw,
            &profile,
            DEFAULT_WINDOW_LENGTH,
            0.5,
            &mut rng(config.seed, &format!("anomaly/inject-val/{}", profile.name)),
        )?;
        let attack_hold = inject_attack(
            &attack_hold_raw,
            &profile,
            DEFAULT_WINDOW_LENGTH,
            0.5,
            &mut rng(
                config.seed,
                &format!("anomaly/inject-test/{}", profile.name),
            ),
        )?;
        let val_samples = scored_samples(&validate)?;
        let val_hists: Vec<SizeHistogram> =
            val_samples.iter().map(|w| w.histogram.clone()).collect();
        let attack_samples = scored_samples(&attack_hold)?;

        for method in ["lof", "js"] {
            let scores = match method {
                "lof" => lof_scores(&normal_windows, &val_hists, DEFAULT_NEIGHBORHOOD)?,
                _ => js_scores(&day, &val_hists)?,
            };
            let (flat, labels): (Vec<f64>, Vec<bool>) = scores
                .iter()
                .zip(&val_samples)
                .filter_map(|(s, w)| s.map(|v| (v, w.attacked)))
                .unzip();
            for (i, (&s, &a)) in flat.iter().zip(&labels).enumerate() {
                score_rows.push(vec![
                    method.to_string(),
                    profile.name.to_string(),
                    i.to_string(),
                    format!("{s}"),
                    u8::from(a).to_string(),
                ]);
            }
            let sel = select_threshold(&flat, &labels)?;
            let threshold = sel.deployed(&flat, &labels);
            let model = match method {
                "lof" => AnomalyModel::lof(normal_windows.clone(), DEFAULT_NEIGHBORHOOD, threshold),
                _ => AnomalyModel::js(day.clone(), threshold),
            };
            let clean = detect(&model, &clean_samples)?;
            let attacked = detect(&model, &attack_samples)?;
            let case = format!("{method}/{}", profile.name);
            rows.push(vec![
                method.to_string(),
                profile.name.to_string(),
                format!("{}", sel.auc),
                format!("{}", sel.eer),
                format!("{threshold}"),
                clean.false_alarms.to_string(),
                attacked.recall.map_or("-".into(), |r| format!("{r}")),
                attacked.precision.map_or("-".into(), |p| format!("{p}")),
            ]);
            results_by_case.insert(
                case,
                json!({
                    "auc": sel.auc,
                    "threshold": threshold,
                    "clean_false_alarms": clean.false_alarms,
                    "recall": attacked.recall,
                    "precision": attacked.precision,
                }),
            );
        }
    }
    report::write_csv(
        out.path("detections.csv"),
        &[
            "method",
            "profile",
            "auc",
            "eer",
            "threshold",
            "clean_false_alarms",
            "recall",
            "precision",
        ],
        &rows,
    )?;
    report::write_csv(
        out.path("validation_scores.csv"),
        &["method", "profile", "window", "score", "attacked"],
        &score_rows,
    )?;
    let mut results = Map::new();
    results.insert("device".into(), json!(spec.device_id.to_string()));
    results.insert("evidence_floor".into(), json!(ANOMALY_EVIDENCE_FLOOR));
    results.insert("cases".into(), Value::Object(results_by_case));
    finish(out, "anomaly", config, results)
}

/// Builds a trace from explicit (gap, size) pairs.
fn trace_from_gaps(pairs: impl IntoIterator<Item = (f64, u32)>) -> Result<Trace> {
    let mut t = 0.0;
    let mut packets = Vec::new();
    for (gap, size) in pairs {
        t += gap;
        packets.push(crate::model::PacketRecord::real(t, size, None));
    }
    Trace::new(packets, t + 1.0)
}

/// Size-timing independence: a balanced single-source stream passes, a
/// NAT-style mixture couples gap and size and is rejected, and a shaped
/// realistic device leaves the test nothing to bin.
fn chi2_experiment(config: &ExperimentConfig, specs: &[DeviceSpec]) -> Result<ExperimentOutcome> {
    let mut out = Out::new(config, "chi2")?;
    // gaps straddle the first 5 s time bin; the size pair spans many bins
    let (short, long) = (2.0, 8.0);
    let (small, big) = (100, 1500);
    // perfectly balanced gap × size cycle: statistic is exactly zero
    // (2001 packets give 2000 gap-size pairs, a whole number of cycles)
    let independent = trace_from_gaps((0..2001).map(|i| {
        (
            if i % 2 == 0 { short } else { long },
            if i % 4 < 2 { small } else { big },
        )
    }))?;
    // two interleaved senders: short gaps always carry the small size
    let coupled = trace_from_gaps((0..2000).map(|i| {
        if (i / 100) % 2 == 0 {
            (short, small)
        } else {
            (long, big)
        }
    }))?;
    let camera = &specs[9 % specs.len()];
    let raw = synth_device(
        camera,
        config.test_duration,
        &mut rng(config.seed, "chi2/raw"),
    )?;
    let shaped = stp_shape(
        &raw,
        &config.stp_for(camera.ideal_histogram()),
        &PaddingScheme::random(config.pad_window),
        &mut rng(config.seed, "chi2/shape"),
    )?;

    let mut rows = Vec::new();
    let mut cases = Map::new();
    for (name, trace) in [
        ("independent", &independent),
        ("coupled_mixture", &coupled),
        ("shaped_device", &shaped),
    ] {
        match chi_squared_independence(trace) {
            Ok(r) => {
                rows.push(vec![
                    name.to_string(),
                    format!("{}", r.statistic),
                    r.degrees_of_freedom.to_string(),
                    format!("{}", r.critical_value_95),
                    r.reject_independence.to_string(),
                ]);
                cases.insert(
                    name.into(),
                    json!({
                        "statistic": r.statistic,
                        "df": r.degrees_of_freedom,
                        "critical_95": r.critical_value_95,
                        "reject": r.reject_independence,
                    }),
                );
            }
            Err(e) => {
                rows.push(vec![
                    name.to_string(),
                    "-".into(),
                    "-".into(),
                    "-".into(),
                    format!("untestable: {e}"),
                ]);
                cases.insert(name.into(), json!({ "untestable": format!("{e}") }));
            }
        }
    }
    report::write_csv(
        out.path("chi2.csv"),
        &["case", "statistic", "df", "critical_95", "reject"],
        &rows,
    )?;
    let mut results = Map::new();
    results.insert("cases".into(), Value::Object(cases));
    finish(out, "chi2", config, results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            learn_duration: 600.0,
            test_duration: 300.0,
            output_dir: dir.to_path_buf(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn child_seeds_differ_by_tag_and_seed() {
        assert_ne!(child_seed(1, "a"), child_seed(1, "b"));
        assert_ne!(child_seed(1, "a"), child_seed(2, "a"));
        assert_eq!(child_seed(1, "a"), child_seed(1, "a"));
    }

    #[test]
    fn unknown_experiment_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment("teapot", &tiny_config(dir.path())).unwrap_err();
        assert!(matches!(err, Error::UnknownExperiment(_)));
    }

    #[test]
    fn corpus_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.json");
        let specs = default_corpus();
        save_corpus(&specs, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), specs);

        std::fs::write(&path, "[]").unwrap();
        assert!(load_corpus(&path).is_err());
        assert!(load_corpus(dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn dominant_writes_reports_and_embeds_config() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let outcome = run_experiment("dominant", &config).unwrap();
        assert!(outcome.summary["results"]["diagonal_rate"].is_number());
        assert_eq!(outcome.summary["config"]["seed"], json!(3));
        for file in [
            "summary.json",
            "confusion.csv",
            "confusion.txt",
            "confusion.pgm",
        ] {
            assert!(dir.path().join("dominant").join(file).exists(), "{file}");
        }
    }

    #[test]
    fn reports_are_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        run_experiment("dominant", &config).unwrap();
        let path = dir.path().join("dominant").join("confusion.csv");
        let first = std::fs::read(&path).unwrap();
        let summary_first =
            std::fs::read(dir.path().join("dominant").join("summary.json")).unwrap();
        std::fs::remove_dir_all(dir.path().join("dominant")).unwrap();
        run_experiment("dominant", &config).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert_eq!(
            std::fs::read(dir.path().join("dominant").join("summary.json")).unwrap(),
            summary_first
        );
    }

    #[test]
    fn chi2_experiment_separates_the_three_cases() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_experiment("chi2", &tiny_config(dir.path())).unwrap();
        let cases = outcome.summary["results"]["cases"].as_object().unwrap();
        assert_eq!(cases.len(), 3);
        assert_eq!(cases["independent"]["statistic"], json!(0.0));
        assert_eq!(cases["independent"]["reject"], json!(false));
        assert_eq!(cases["coupled_mixture"]["reject"], json!(true));
    }
}
