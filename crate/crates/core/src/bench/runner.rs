//! Tune-then-train experiment runner with on-disk artifacts.
//!
//! Layout of an output directory:
//!
//! ```text
//! run.json              experiment record with per-seed runs and aggregate
//! seed_<n>/run.json     one seed's record
//! seed_<n>/trials.jsonl search ledger (absent when search is off)
//! seed_<n>/epochs.jsonl per-epoch log
//! seed_<n>/samples.csv  telemetry trace
//! seed_<n>/checkpoint.fwdb
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::compare::MetricSummary;
use crate::bench::config::{dataset_label, ExperimentConfig};
use crate::data::{load_raw, prepare, LabeledBatch, PreparedData};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::search::{random_search, SearchOutcome, TrialParams};
use crate::telemetry::{samples_csv, PhaseMark, RunMetrics, Telemetry};
use crate::train::{train, Architecture, Curves, RunResult, TrainConfig};

/// Streams forked off a seed's root for data preparation and search.
const DATA_STREAM: u64 = 0xDA7A;
const SEARCH_STREAM: u64 = 0x5EA2C4;

/// A trainer with the signature of [`train`]; tests swap in stubs.
pub type TrainFn<'a> = dyn Fn(&Architecture, &PreparedData, &TrainConfig, Telemetry) -> Result<RunResult> + 'a;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub config_hash: String,
    pub seed: u64,
    pub algorithm: String,
    /// Number of epochs run.
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub curves: Curves,
    pub test_acc: f64,
    pub metrics: RunMetrics,
    pub phases: Vec<PhaseMark>,
    pub params: TrialParams,
    pub param_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub completed: usize,
    pub test_acc: Stat,
    pub time_s: Stat,
    pub energy_wh: Stat,
    pub peak_mem_mib: Option<Stat>,
    pub gflops: Stat,
    pub co2e_g: Stat,
}

impl Aggregate {
    pub fn over(runs: &[SeedRecord]) -> Option<Self> {
        let stat = |f: &dyn Fn(&SeedRecord) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        let mem: Option<Vec<f64>> = runs.iter().map(|r| r.metrics.peak_mem_mib).collect();
        Some(Self {
            completed: runs.len(),
            test_acc: stat(&|r| r.test_acc)?,
            time_s: stat(&|r| r.metrics.time_s)?,
            energy_wh: stat(&|r| r.metrics.energy_wh)?,
            peak_mem_mib: mem.and_then(|m| Stat::of(&m)),
            gflops: stat(&|r| r.metrics.gflops)?,
            co2e_g: stat(&|r| r.metrics.co2e_g)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSeed {
    pub seed: u64,
    pub error: String,
}

/// Contents of the top-level `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub config_hash: String,
    pub dataset: String,
    pub architecture: String,
    pub algorithm: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRecord>,
    #[serde(default)]
    pub failed: Vec<FailedSeed>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub aggregate: Option<Aggregate>,
}

impl ExperimentRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = if dir.is_dir() { dir.join("run.json") } else { dir.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Mean metrics, accuracy in percent.
    pub fn summary(&self) -> Result<MetricSummary> {
        let a = self
            .aggregate
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("{} has no completed runs", self.name)))?;
        Ok(MetricSummary {
            accuracy_pct: 100.0 * a.test_acc.mean,
            time_s: a.time_s.mean,
            energy_wh: a.energy_wh.mean,
            peak_mem_mib: a.peak_mem_mib.map(|s| s.mean),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Search, then final training with telemetry.
    Bench,
    /// Final training with the `[train]` settings as given.
    TrainOnly,
}

pub struct RunOptions<'a> {
    pub mode: RunMode,
    /// Write artifacts under `run.output`.
    pub write: bool,
    pub progress: Option<&'a dyn Fn(&str)>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            mode: RunMode::Bench,
            write: true,
            progress: None,
        }
    }
}

impl RunOptions<'_> {
    fn note(&self, msg: &str) {
        if let Some(p) = self.progress {
            p(msg);
        }
    }
}

pub struct ExperimentOutcome {
    pub record: ExperimentRecord,
    /// Completed runs in seed order.
    pub results: Vec<RunResult>,
}

/// Loads the dataset and runs every seed with the built-in trainers.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentOutcome> {
    let (train_set, test_set) = load_dataset(config)?;
    run_experiment_with(config, options, &train_set, &test_set, &train)
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<(LabeledBatch, LabeledBatch)> {
    let spec = config.resolved_dataset();
    if !crate::data::dataset_available(&spec.root, spec.name) {
        return Err(Error::Config(format!(
            "dataset {} not found under {}",
            spec.name.dir_name(),
            spec.root.display()
        )));
    }
    load_raw(&spec)
}

/// Splits and normalizes the raw data the way seed `seed` sees it.
pub fn prepare_for_seed(config: &ExperimentConfig, raw: (&LabeledBatch, &LabeledBatch), seed: u64) -> Result<PreparedData> {
    prepare(raw.0, raw.1, &config.dataset, &mut RngState::new(seed).fork(DATA_STREAM))
}

/// Random search for one seed. Trials run without the sampler.
pub fn tune_seed(
    config: &ExperimentConfig,
    arch: &Architecture,
    data: &PreparedData,
    seed: u64,
    train_fn: &TrainFn,
) -> Result<SearchOutcome<f64>> {
    let base = config.base_train_config(seed);
    let mut rng = RngState::new(seed).fork(SEARCH_STREAM);
    random_search(&config.search.space, config.search.n_trials, &mut rng, |params, trial_seed| {
        let cfg = base.with_trial(params, trial_seed);
        train_fn(arch, data, &cfg, Telemetry::disabled()).map(|r| r.best_val_acc)
    })
}

fn params_of(cfg: &TrainConfig) -> TrialParams {
    TrialParams {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        weight_decay: cfg.weight_decay,
        ff_theta: None,
        mf_layer_epochs: None,
        dfa_epochs: None,
    }
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    options: &RunOptions,
    train_set: &LabeledBatch,
    test_set: &LabeledBatch,
    train_fn: &TrainFn,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let hash = config.hash()?;
    let arch = config.model.architecture(train_set.image_shape, train_set.num_classes)?;
    let out_dir = config.run.output.clone();
    if options.write {
        create_dir(&out_dir)?;
    }
    let mut runs = Vec::new();
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for &seed in &config.run.seeds {
        options.note(&format!("seed {seed}: preparing data"));
        let attempt = (|| -> Result<(SeedRecord, RunResult, Option<String>)> {
            let data = prepare_for_seed(config, (train_set, test_set), seed)?;
            let base = config.base_train_config(seed);
            let (final_cfg, params, ledger) = match options.mode {
                RunMode::Bench if config.search.n_trials > 0 => {
                    options.note(&format!("seed {seed}: {} search trials", config.search.n_trials));
                    let outcome = tune_seed(config, &arch, &data, seed, train_fn)?;
                    let best = outcome
                        .best_trial()
                        .ok_or_else(|| Error::Protocol("every search trial failed".into()))?;
                    options.note(&format!("seed {seed}: best trial {} val_acc {:.4}", best.trial_id, best.objective));
                    (base.with_trial(&best.params, seed), best.params.clone(), Some(outcome.ledger_jsonl()?))
                }
                _ => {
                    let p = params_of(&base);
                    (base, p, None)
                }
            };
            options.note(&format!("seed {seed}: final training"));
            let telemetry = Telemetry::start(config.telemetry.clone())?;
            let result = train_fn(&arch, &data, &final_cfg, telemetry)?;
            let record = SeedRecord {
                config_hash: hash.clone(),
                seed,
                algorithm: final_cfg.algorithm.name().to_string(),
                epochs: result.epochs.len(),
                best_epoch: result.best_epoch,
                best_val_acc: result.best_val_acc,
                curves: result.curves.clone(),
                test_acc: result.test_acc,
                metrics: result.metrics.clone(),
                phases: result.phases.clone(),
                params,
                param_count: result.param_count,
            };
            Ok((record, result, ledger))
        })();
        match attempt {
            Ok((record, result, ledger)) => {
                options.note(&format!("seed {seed}: test_acc {:.4}", record.test_acc));
                if options.write {
                    write_seed(&out_dir.join(format!("seed_{seed}")), &record, &result, ledger.as_deref())?;
                }
                runs.push(record);
                results.push(result);
            }
            Err(e) => {
                options.note(&format!("seed {seed}: failed: {e}"));
                failed.push(FailedSeed {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let mut warnings = Vec::new();
    if !failed.is_empty() {
        warnings.push(format!(
            "{} of {} seeds failed; aggregate covers {} completed runs",
            failed.len(),
            config.run.seeds.len(),
            runs.len()
        ));
    }
    let record = ExperimentRecord {
        name: config.label(),
        config_hash: hash,
        dataset: dataset_label(config.dataset.name).to_string(),
        architecture: arch.label(),
        algorithm: config.train.algorithm.name().to_string(),
        seeds: config.run.seeds.clone(),
        aggregate: Aggregate::over(&runs),
        runs,
        failed,
        warnings,
    };
    if options.write {
        write_file(&out_dir.join("run.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    }
    Ok(ExperimentOutcome { record, results })
}

fn write_seed(dir: &Path, record: &SeedRecord, result: &RunResult, ledger: Option<&str>) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("run.json"), serde_json::to_string_pretty(record)?.as_bytes())?;
    if let Some(l) = ledger {
        write_file(&dir.join("trials.jsonl"), l.as_bytes())?;
    }
    let mut epochs = String::new();
    for e in &result.epochs {
        epochs.push_str(&serde_json::to_string(e)?);
        epochs.push('\n');
    }
    write_file(&dir.join("epochs.jsonl"), epochs.as_bytes())?;
    write_file(&dir.join("samples.csv"), samples_csv(&result.samples).as_bytes())?;
    result.checkpoint.save(&dir.join("checkpoint.fwdb"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: PathBuf::from(path),
        source,
    })
}
