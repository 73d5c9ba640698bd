//! Command-line front end: synthesis, shaping, fingerprinting, NAT-aggregate
//! analysis, parameter estimation, window detection, anomaly detection, and
//! the named end-to-end experiments.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use shapeprint::aggregate::{
    estimate_count, fsbc, full_comparison_check, learn_count_thresholds, subset_metrics,
};
use shapeprint::anomaly::{
    detect, inject_attack, js_scores, lof_scores, select_threshold, window_samples, AnomalyModel,
    AttackProfile, DEFAULT_NEIGHBORHOOD, DEFAULT_WINDOW_LENGTH,
};
use shapeprint::estimation::{
    build_q_thresholds, build_w_grid, default_q_grid, default_w_grid, estimate_q, estimate_w,
    snap_to_grid,
};
use shapeprint::experiments::{
    load_corpus, run_experiment, ExperimentConfig, EXPERIMENTS, OUTPUT_DIR_ENV,
};
use shapeprint::fingerprint::{
    assign_unique_sizes, classify_dominant, confusion_matrix, diagonal_rate, learn_profile,
};
use shapeprint::io::{load_profiles, load_trace, save_profiles, save_trace};
use shapeprint::metrics::{chi_squared_independence, cosine_distance};
use shapeprint::model::{size_histogram, DeviceId, SizeHistogram, Trace};
use shapeprint::obfuscation::{ilp_shape, pad_trace, stp_shape, PaddingScheme, StpParams};
use shapeprint::report;
use shapeprint::synth::{default_corpus, synth_device};
use shapeprint::windows::{classify_windows, label_training_windows, train_knn, KnnModel};

#[derive(Parser)]
#[command(
    name = "shapeprint",
    about = "Simulate padding/shaping defenses on IoT traces and run the analysis suites against them",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shaping parameters shared by several subcommands.
#[derive(Args, Clone)]
struct StpArgs {
    /// Cover-traffic probability per period boundary
    #[arg(long, default_value_t = 0.1)]
    q: f64,
    /// Shaping period T in seconds
    #[arg(long, default_value_t = 1.0)]
    period: f64,
    /// Shaping rate R in packets per second
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    /// Random-padding window W in bytes
    #[arg(long, default_value_t = 80)]
    pad_window: u32,
}

impl StpArgs {
    fn params(&self, cover: SizeHistogram) -> StpParams {
        StpParams {
            q: self.q,
            period: self.period,
            rate: self.rate,
            pad_window: self.pad_window,
            cover,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Stp,
    Ilp,
    /// Random padding only; timing is left untouched
    Pad,
    /// Tiered-table padding only; timing is left untouched
    Level100,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetMethod {
    Full,
    Fsbc,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnomalyMethod {
    Lof,
    Js,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic device traces
    Synth {
        /// "default" or a JSON corpus file of device specs
        #[arg(long, default_value = "default")]
        corpus: String,
        /// Trace duration in seconds
        #[arg(long, default_value_t = 10_800.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving one `<device>.trace` per spec
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a shaping defense to a trace file
    Shape {
        #[arg(long, value_enum, default_value_t = Scheme::Stp)]
        scheme: Scheme,
        #[command(flatten)]
        stp: StpArgs,
        /// Cover size distribution source; defaults to the input trace itself
        #[arg(long)]
        cover: Option<PathBuf>,
        /// Fixed wire size for ILP
        #[arg(long, default_value_t = 1600)]
        pad_to: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        input: PathBuf,
        output: PathBuf,
    },
    /// Learn per-device profiles from labeled traces
    Learn {
        /// Labeled trace files, one device each
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Profile store (directory or .json file)
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank profiles against a test trace by packet-size distance
    Classify {
        #[arg(long)]
        profiles: PathBuf,
        trace: PathBuf,
    },
    /// Confusion matrix of a profile store against labeled test traces
    Confusion {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(required = true)]
        tests: Vec<PathBuf>,
        /// Also write CSV/heatmap files here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate how many known devices hide behind an aggregate trace
    Count {
        #[arg(long)]
        profiles: PathBuf,
        trace: PathBuf,
    },
    /// Identify which known devices are active in an aggregate trace
    Subset {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long, value_enum, default_value_t = SubsetMethod::Full)]
        method: SubsetMethod,
        /// FSBC first-pass keep percentage
        #[arg(long, default_value_t = 80.0)]
        f1: f64,
        /// FSBC second-pass keep percentage
        #[arg(long, default_value_t = 90.0)]
        f2: f64,
        /// Comma-separated true member ids; adds recall/precision to the output
        #[arg(long)]
        truth: Option<String>,
        trace: PathBuf,
    },
    /// Estimate the padding window W of a shaped trace
    EstimateW {
        /// Directory of raw lab traces (one per candidate device)
        #[arg(long)]
        lab: PathBuf,
        #[command(flatten)]
        stp: StpArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        trace: PathBuf,
    },
    /// Estimate the cover probability q of a shaped trace
    EstimateQ {
        /// Raw lab trace of the victim device
        #[arg(long)]
        lab: PathBuf,
        #[command(flatten)]
        stp: StpArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        trace: PathBuf,
    },
    /// Train or apply the real-vs-cover window detector
    Windows {
        #[command(flatten)]
        stp: StpArgs,
        /// Train on this shaped trace and write the model
        #[arg(long, conflicts_with = "classify")]
        train: Option<PathBuf>,
        /// Classify this shaped trace with an existing model
        #[arg(long, requires = "model")]
        classify: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Window offset in seconds; defaults to half a period
        #[arg(long)]
        offset: Option<f64>,
    },
    /// Score windows of a trace against a normal day
    Anomaly {
        #[arg(long, value_enum, default_value_t = AnomalyMethod::Lof)]
        method: AnomalyMethod,
        /// Clean reference trace (the learning day)
        #[arg(long)]
        normal: PathBuf,
        /// Inject this attack into the evaluated trace first
        #[arg(long)]
        inject: Option<String>,
        /// Fraction of windows the injection hits
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flag windows scoring above this; defaults to ROC-selected when labels exist
        #[arg(long)]
        threshold: Option<f64>,
        /// Per-window scores CSV destination
        #[arg(long)]
        out: Option<PathBuf>,
        trace: PathBuf,
    },
    /// Chi-squared independence test between gaps and sizes of a trace
    Chi2 { trace: PathBuf },
    /// Run a named end-to-end experiment
    RunExperiment {
        /// One of the experiment names; see --list
        name: Option<String>,
        #[arg(long)]
        list: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        stp: StpArgs,
        #[arg(long, default_value_t = 10_800.0)]
        learn_duration: f64,
        #[arg(long, default_value_t = 1_800.0)]
        test_duration: f64,
        /// JSON corpus file; defaults to the built-in corpus
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory (env SHAPEPRINT_OUT, then "reports")
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    run(Cli::parse())
}

fn emit(value: &serde_json::Value) {
    println!("{value}");
}

fn load_traces(paths: &[PathBuf]) -> Result<Vec<Trace>> {
    paths.iter().map(|p| Ok(load_trace(p)?)).collect()
}

fn trace_dir(dir: &PathBuf) -> Result<Vec<Trace>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "trace"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .trace files in {}", dir.display());
    }
    load_traces(&paths)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            corpus,
            duration,
            seed,
            out,
        } => {
            let specs = if corpus == "default" {
                default_corpus()
            } else {
                load_corpus(&corpus)?
            };
            fs::create_dir_all(&out)?;
            for spec in &specs {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(spec.device_id.as_str()));
                let trace = synth_device(spec, duration, &mut rng)?;
                save_trace(&trace, out.join(format!("{}.trace", spec.device_id)))?;
            }
            emit(&json!({ "devices": specs.len(), "duration_s": duration, "out": out }));
        }
        Command::Shape {
            scheme,
            stp,
            cover,
            pad_to,
            seed,
            input,
            output,
        } => {
            let trace = load_trace(&input)?;
            let shaped = match scheme {
                Scheme::Stp => {
                    let cover_hist = match cover {
                        Some(path) => size_histogram(&load_trace(path)?),
                        None => size_histogram(&trace),
                    };
                    let params = stp.params(cover_hist);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    stp_shape(&trace, &params, &params.default_padding(), &mut rng)?
                }
                Scheme::Ilp => ilp_shape(&trace, stp.rate, pad_to)?,
                Scheme::Pad => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let padding = PaddingScheme::random(stp.pad_window);
                    pad_trace(&trace, &padding, &mut rng)?
                }
                Scheme::Level100 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    pad_trace(&trace, &PaddingScheme::Level100, &mut rng)?
                }
            };
            save_trace(&shaped, &output)?;
            emit(&json!({
                "input_packets": trace.len(),
                "output_packets": shaped.len(),
                "output": output,
            }));
        }
        Command::Learn { traces, out } => {
            let traces = load_traces(&traces)?;
            let mut profiles = traces
                .iter()
                .map(learn_profile)
                .collect::<shapeprint::Result<Vec<_>>>()?;
            assign_unique_sizes(&mut profiles);
            let path = save_profiles(&profiles, &out)?;
            emit(&json!({ "profiles": profiles.len(), "store": path }));
        }
        Command::Classify { profiles, trace } => {
            let profiles = load_profiles(&profiles)?;
            let test = size_histogram(&load_trace(&trace)?);
            let (winner, _) = classify_dominant(&profiles, &test)?;
            let test_vec = test.to_vector();
            let mut ranked: Vec<(String, f64)> = profiles
                .iter()
                .map(|p| {
                    let d = cosine_distance(&p.histogram.to_vector(), &test_vec)?;
                    Ok((p.device_id.to_string(), d))
                })
                .collect::<shapeprint::Result<_>>()?;
            ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
            emit(&json!({
                "dominant": winner.to_string(),
                "ranked": ranked.iter().map(|(id, d)| json!({ "device": id, "distance": d })).collect::<Vec<_>>(),
            }));
        }
        Command::Confusion {
            profiles,
            tests,
            out,
        } => {
            let profiles = load_profiles(&profiles)?;
            let tests = load_traces(&tests)?;
            let matrix = confusion_matrix(&profiles, &tests)?;
            print!("{}", report::ascii_heatmap(&matrix.entries));
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                let labels: Vec<String> = matrix.labels.iter().map(ToString::to_string).collect();
                report::write_matrix_csv(
                    dir.join("confusion.csv"),
                    "model\\test",
                    &labels,
                    &labels,
                    &matrix.entries,
                )?;
                report::write_pgm(dir.join("confusion.pgm"), &matrix.entries, 16)?;
            }
            emit(&json!({ "devices": matrix.n(), "diagonal_rate": diagonal_rate(&matrix) }));
        }
        Command::Count { profiles, trace } => {
            let profiles = load_profiles(&profiles)?;
            let trace = load_trace(&trace)?;
            let thresholds = learn_count_thresholds(&profiles)?;
            let rate = trace.mean_rate();
            emit(&json!({
                "rate_pps": rate,
                "estimate": estimate_count(rate, &thresholds),
            }));
        }
        Command::Subset {
            profiles,
            method,
            f1,
            f2,
            truth,
            trace,
        } => {
            let profiles = load_profiles(&profiles)?;
            let trace = load_trace(&trace)?;
            let thresholds = learn_count_thresholds(&profiles)?;
            let hist = size_histogram(&trace);
            let duration = trace.duration();
            let estimate = match method {
                SubsetMethod::Full => {
                    full_comparison_check(&profiles, &hist, duration, &thresholds)?
                }
                SubsetMethod::Fsbc => fsbc(&profiles, &hist, f1, f2, &thresholds, duration)?,
            };
            let mut result = json!({
                "devices": estimate.devices.iter().map(ToString::to_string).collect::<Vec<_>>(),
                "estimated_count": estimate.estimated_count,
                "best_distance": estimate.best_distance,
                "candidates_evaluated": estimate.candidates_evaluated,
            });
            if let Some(truth) = truth {
                let truth: BTreeSet<DeviceId> =
                    truth.split(',').map(|s| DeviceId::new(s.trim())).collect();
                let m = subset_metrics(&truth, &estimate.devices);
                result["recall"] = json!(m.recall);
                result["precision"] = json!(m.precision);
                result["exact"] = json!(m.exact);
            }
            emit(&result);
        }
        Command::EstimateW {
            lab,
            stp,
            seed,
            trace,
        } => {
            let lab_traces = trace_dir(&lab)?;
            let base = stp.params(SizeHistogram::from_counts([(1, 1)]));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let models = build_w_grid(&lab_traces, &default_w_grid(), &base, &mut rng)?;
            let shaped = load_trace(&trace)?;
            let (w, device, distance) = estimate_w(&models, &size_histogram(&shaped))?;
            emit(&json!({
                "estimated_w": w,
                "matched_device": device.to_string(),
                "distance": distance,
            }));
        }
        Command::EstimateQ {
            lab,
            stp,
            seed,
            trace,
        } => {
            let lab_trace = load_trace(&lab)?;
            let base = stp.params(SizeHistogram::from_counts([(1, 1)]));
            let grid = default_q_grid();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let thresholds = build_q_thresholds(&lab_trace, &grid, &base, &mut rng)?;
            let shaped = load_trace(&trace)?;
            let raw = estimate_q(&thresholds, shaped.mean_rate());
            emit(&json!({
                "observed_rate_pps": shaped.mean_rate(),
                "estimated_q": raw,
                "snapped_q": snap_to_grid(&grid, raw),
            }));
        }
        Command::Windows {
            stp,
            train,
            classify,
            model,
            offset,
        } => {
            let params = stp.params(SizeHistogram::from_counts([(1, 1)]));
            let offset = offset.unwrap_or(params.period / 2.0);
            match (train, classify) {
                (Some(path), None) => {
                    let trace = load_trace(&path)?;
                    let labeled = label_training_windows(&trace, &params, offset)?;
                    let knn = train_knn(&labeled, 1, 150, 10)?;
                    let model = model.context("--model is required with --train")?;
                    knn.save(&model)?;
                    emit(&json!({
                        "windows": labeled.len(),
                        "k": knn.k,
                        "cv_accuracy": knn.cv_accuracy,
                        "model": model,
                    }));
                }
                (None, Some(path)) => {
                    let knn = KnnModel::load(model.expect("clap enforces --model"))?;
                    let trace = load_trace(&path)?;
                    let labeled = label_training_windows(&trace, &params, offset)?;
                    let (predictions, metrics) = classify_windows(&knn, &labeled);
                    emit(&json!({
                        "windows": labeled.len(),
                        "real_predicted": predictions.iter().filter(|&&p| p).count(),
                        "accuracy": metrics.accuracy,
                        "precision": metrics.precision,
                        "recall": metrics.recall,
                    }));
                }
                _ => bail!("pass exactly one of --train <trace> or --classify <trace>"),
            }
        }
        Command::Anomaly {
            method,
            normal,
            inject,
            fraction,
            seed,
            threshold,
            out,
            trace,
        } => {
            let normal_trace = load_trace(&normal)?;
            let mut eval_trace = load_trace(&trace)?;
            if let Some(name) = inject {
                let profile = AttackProfile::named(&name)
                    .with_context(|| format!("unknown attack profile {name:?}"))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                eval_trace = inject_attack(
                    &eval_trace,
                    &profile,
                    DEFAULT_WINDOW_LENGTH,
                    fraction,
                    &mut rng,
                )?;
            }
            let normal_windows: Vec<SizeHistogram> =
                window_samples(&normal_trace, DEFAULT_WINDOW_LENGTH)?
                    .into_iter()
                    .map(|w| w.histogram)
                    .collect();
            let samples = window_samples(&eval_trace, DEFAULT_WINDOW_LENGTH)?;
            let hists: Vec<SizeHistogram> = samples.iter().map(|w| w.histogram.clone()).collect();
            let scores = match method {
                AnomalyMethod::Lof => lof_scores(&normal_windows, &hists, DEFAULT_NEIGHBORHOOD)?,
                AnomalyMethod::Js => js_scores(&size_histogram(&normal_trace), &hists)?,
            };

            let mut rows = Vec::new();
            for (i, (s, w)) in scores.iter().zip(&samples).enumerate() {
                rows.push(vec![
                    i.to_string(),
                    s.map_or("-".into(), |v| format!("{v}")),
                    u8::from(w.attacked).to_string(),
                ]);
            }
            let header = ["window", "score", "attacked"];
            match out {
                Some(path) => report::write_csv(path, &header, &rows)?,
                None => {
                    println!("{}", header.join(","));
                    for row in rows {
                        println!("{}", row.join(","));
                    }
                }
            }

            let (flat, labels): (Vec<f64>, Vec<bool>) = scores
                .iter()
                .zip(&samples)
                .filter_map(|(s, w)| s.map(|v| (v, w.attacked)))
                .unzip();
            let mut result = json!({ "windows": samples.len(), "scored": flat.len() });
            let threshold = match threshold {
                Some(t) => Some(t),
                None if labels.iter().any(|&a| a) && labels.iter().any(|&a| !a) => {
                    let sel = select_threshold(&flat, &labels)?;
                    result["auc"] = json!(sel.auc);
                    result["eer"] = json!(sel.eer);
                    Some(sel.deployed(&flat, &labels))
                }
                None => None,
            };
            if let Some(t) = threshold {
                let model = match method {
                    AnomalyMethod::Lof => {
                        AnomalyModel::lof(normal_windows, DEFAULT_NEIGHBORHOOD, t)
                    }
                    AnomalyMethod::Js => AnomalyModel::js(size_histogram(&normal_trace), t),
                };
                let detection = detect(&model, &samples)?;
                result["threshold"] = json!(t);
                result["flagged"] = json!(detection.labels.iter().filter(|&&f| f).count());
                result["false_alarms"] = json!(detection.false_alarms);
                result["recall"] = json!(detection.recall);
                result["precision"] = json!(detection.precision);
            }
            emit(&result);
        }
        Command::Chi2 { trace } => {
            let trace = load_trace(&trace)?;
            // An untestable trace (degenerate contingency table) is a
            // legitimate outcome of the test, not an operational failure.
            match chi_squared_independence(&trace) {
                Ok(r) => emit(&json!({
                    "testable": true,
                    "statistic": r.statistic,
                    "degrees_of_freedom": r.degrees_of_freedom,
                    "critical_value_95": r.critical_value_95,
                    "reject_independence": r.reject_independence,
                    "time_bin_s": r.final_time_bin_width,
                    "size_bin_bytes": r.final_size_bin_width,
                    "pct_expected_ge_5": r.pct_expected_ge_5,
                })),
                Err(e @ shapeprint::error::Error::IndependenceUntestable { .. }) => {
                    emit(&json!({ "testable": false, "reason": e.to_string() }));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::RunExperiment {
            name,
            list,
            seed,
            stp,
            learn_duration,
            test_duration,
            corpus,
            out,
        } => {
            if list {
                for name in EXPERIMENTS {
                    println!("{name}");
                }
                return Ok(());
            }
            let name = name.context("experiment name required (or --list)")?;
            let output_dir = out
                .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("reports"));
            let config = ExperimentConfig {
                seed,
                q: stp.q,
                period: stp.period,
                rate: stp.rate,
                pad_window: stp.pad_window,
                learn_duration,
                test_duration,
                corpus,
                output_dir,
            };
            let outcome = run_experiment(&name, &config)?;
            emit(&outcome.summary);
            for file in &outcome.files {
                eprintln!("wrote {}", file.display());
            }
        }
    }
    Ok(())
}

/// Stable per-device seed tweak for `synth` so devices get distinct streams.
fn fxhash(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
