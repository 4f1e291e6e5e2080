//! Hyperparameter search and early stopping, shared by every algorithm.
//!
//! Every trainer drives its epochs through [`fit_with_early_stopping`] and
//! every tuning run goes through [`random_search`]; nothing else decides when
//! training stops or which configuration wins.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::train::{Curves, EpochRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopPolicy {
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Minimum accuracy gain that counts as an improvement.
    #[serde(default)]
    pub min_delta: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
}

fn default_patience() -> usize {
    10
}

fn default_max_epochs() -> usize {
    100
}

impl Default for EarlyStopPolicy {
    fn default() -> Self {
        Self {
            patience: default_patience(),
            min_delta: 0.0,
            max_epochs: default_max_epochs(),
        }
    }
}

impl EarlyStopPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience and max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopStatus {
    pub decision: StopDecision,
    /// Zero-based index of the best epoch so far (earliest on ties).
    pub best_index: usize,
}

thread_local! {
    static EARLY_STOP_CALLS: Cell<u64> = const { Cell::new(0) };
    static FIT_CALLS: Cell<u64> = const { Cell::new(0) };
    static SEARCH_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread counters of calls into the shared protocol functions. Lets a
/// caller confirm that a trainer really went through them.
pub mod probe {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
    pub struct Counts {
        pub early_stop_steps: u64,
        pub fits: u64,
        pub searches: u64,
    }

    pub fn reset() {
        EARLY_STOP_CALLS.with(|c| c.set(0));
        FIT_CALLS.with(|c| c.set(0));
        SEARCH_CALLS.with(|c| c.set(0));
    }

    pub fn counts() -> Counts {
        Counts {
            early_stop_steps: EARLY_STOP_CALLS.with(Cell::get),
            fits: FIT_CALLS.with(Cell::get),
            searches: SEARCH_CALLS.with(Cell::get),
        }
    }
}

fn bump(cell: &'static std::thread::LocalKey<Cell<u64>>) {
    cell.with(|c| c.set(c.get() + 1));
}

/// Stop once `patience` consecutive epochs fail to beat the best significant
/// accuracy by more than `min_delta`, or when `max_epochs` is reached.
pub fn early_stop_step(policy: &EarlyStopPolicy, history: &[f64]) -> Result<StopStatus> {
    bump(&EARLY_STOP_CALLS);
    if history.is_empty() {
        return Err(Error::Protocol("early stopping needs at least one epoch".into()));
    }
    let mut best_index = 0;
    let mut reference = history[0];
    let mut stale = 0;
    for (i, &acc) in history.iter().enumerate().skip(1) {
        if acc > history[best_index] {
            best_index = i;
        }
        if acc > reference + policy.min_delta {
            reference = acc;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    let decision = if stale >= policy.patience || history.len() >= policy.max_epochs {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    };
    Ok(StopStatus { decision, best_index })
}

/// One trainable unit driven epoch by epoch.
pub trait EpochTrainer {
    type Snapshot;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord>;
    fn snapshot(&self) -> Self::Snapshot;
}

#[derive(Debug)]
pub struct FitOutcome<S> {
    pub records: Vec<EpochRecord>,
    pub best_index: usize,
    pub best_val_acc: f64,
    pub best: S,
}

/// Runs epochs until [`early_stop_step`] says stop, keeping the snapshot of
/// the best-validation epoch. A divergence error carries the curves so far.
pub fn fit_with_early_stopping<E: EpochTrainer>(
    policy: &EarlyStopPolicy,
    trainer: &mut E,
) -> Result<FitOutcome<E::Snapshot>> {
    bump(&FIT_CALLS);
    policy.validate()?;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut history = Vec::new();
    let mut best = None;
    loop {
        let rec = match trainer.run_epoch(records.len()) {
            Ok(r) => r,
            Err(Error::Diverged { diagnostic, .. }) => {
                return Err(Error::Diverged {
                    diagnostic,
                    partial: Curves::from_records(&records),
                })
            }
            Err(e) => return Err(e),
        };
        history.push(if rec.val_acc.is_finite() { rec.val_acc } else { f64::NEG_INFINITY });
        records.push(rec);
        let status = early_stop_step(policy, &history)?;
        if status.best_index == history.len() - 1 {
            best = Some(trainer.snapshot());
        }
        if status.decision == StopDecision::Stop {
            return Ok(FitOutcome {
                best_val_acc: history[status.best_index],
                best_index: status.best_index,
                best: best.expect("best epoch snapshot taken"),
                records,
            });
        }
    }
}

/// Log-uniform bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    #[serde(default = "default_lr")]
    pub lr: LogRange,
    #[serde(default = "default_batches")]
    pub batch_sizes: Vec<usize>,
    /// `None` keeps weight decay at zero.
    #[serde(default)]
    pub weight_decay: Option<LogRange>,
    /// FF goodness threshold (uniform).
    #[serde(default)]
    pub ff_theta: Option<(f64, f64)>,
    /// MF per-layer epoch budget (inclusive integer range).
    #[serde(default)]
    pub mf_layer_epochs: Option<(usize, usize)>,
    /// CaFo DFA pretraining epochs (inclusive integer range).
    #[serde(default)]
    pub dfa_epochs: Option<(usize, usize)>,
}

fn default_lr() -> LogRange {
    LogRange { min: 1e-5, max: 1e-1 }
}

fn default_batches() -> Vec<usize> {
    vec![32, 64, 128]
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_sizes: default_batches(),
            weight_decay: None,
            ff_theta: None,
            mf_layer_epochs: None,
            dfa_epochs: None,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ordered = |lo: f64, hi: f64| lo > 0.0 && lo <= hi;
        if !ordered(self.lr.min, self.lr.max) {
            return Err(Error::Config("learning-rate bounds must be positive and ordered".into()));
        }
        if let Some(w) = self.weight_decay {
            if !ordered(w.min, w.max) {
                return Err(Error::Config("weight-decay bounds must be positive and ordered".into()));
            }
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config("batch size choices must be non-empty and positive".into()));
        }
        if let Some((lo, hi)) = self.ff_theta {
            if lo > hi {
                return Err(Error::Config("theta range out of order".into()));
            }
        }
        for (name, r) in [("mf_layer_epochs", self.mf_layer_epochs), ("dfa_epochs", self.dfa_epochs)] {
            if let Some((lo, hi)) = r {
                if lo > hi || (name == "mf_layer_epochs" && lo == 0) {
                    return Err(Error::Config(format!("{name} range invalid")));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut RngState) -> TrialParams {
        let int_in = |rng: &mut RngState, (lo, hi): (usize, usize)| lo + rng.below(hi - lo + 1);
        TrialParams {
            lr: rng.log_uniform(self.lr.min, self.lr.max),
            batch_size: self.batch_sizes[rng.below(self.batch_sizes.len())],
            weight_decay: self
                .weight_decay
                .map_or(0.0, |w| rng.log_uniform(w.min, w.max)),
            ff_theta: self.ff_theta.map(|(lo, hi)| rng.uniform_range(lo, hi)),
            mf_layer_epochs: self.mf_layer_epochs.map(|r| int_in(rng, r)),
            dfa_epochs: self.dfa_epochs.map(|r| int_in(rng, r)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ff_theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mf_layer_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dfa_epochs: Option<usize>,
}

/// Anything a search can rank.
pub trait Objective {
    fn objective(&self) -> f64;
}

impl Objective for f64 {
    fn objective(&self) -> f64 {
        *self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Failed,
}

#[derive(Debug)]
pub struct Trial<R> {
    pub trial_id: usize,
    pub params: TrialParams,
    pub seed: u64,
    /// Validation accuracy; `-inf` for failed trials.
    pub objective: f64,
    pub status: TrialStatus,
    pub error: Option<String>,
    pub result: Option<R>,
}

/// One line of the trial ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLedgerEntry {
    pub trial_id: usize,
    pub params: TrialParams,
    /// `null` for failed trials.
    pub val_acc: Option<f64>,
    pub status: TrialStatus,
}

impl<R> Trial<R> {
    pub fn ledger_entry(&self) -> TrialLedgerEntry {
        TrialLedgerEntry {
            trial_id: self.trial_id,
            params: self.params.clone(),
            val_acc: (self.status == TrialStatus::Completed).then_some(self.objective),
            status: self.status.clone(),
        }
    }
}

#[derive(Debug)]
pub struct SearchOutcome<R> {
    pub trials: Vec<Trial<R>>,
    /// Index of the winning trial; `None` when every trial failed.
    pub best: Option<usize>,
}

impl<R> SearchOutcome<R> {
    pub fn best_trial(&self) -> Option<&Trial<R>> {
        self.best.map(|i| &self.trials[i])
    }

    pub fn ledger_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&serde_json::to_string(&t.ledger_entry())?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Seeded random search. All configurations are drawn up front from `rng`,
/// so the trial sequence depends only on the seed. A failing `train_fn`
/// marks its trial failed and the search moves on.
pub fn random_search<R, F>(
    space: &SearchSpace,
    n_trials: usize,
    rng: &mut RngState,
    mut train_fn: F,
) -> Result<SearchOutcome<R>>
where
    R: Objective,
    F: FnMut(&TrialParams, u64) -> Result<R>,
{
    bump(&SEARCH_CALLS);
    space.validate()?;
    if n_trials == 0 {
        return Err(Error::Config("a search needs at least one trial".into()));
    }
    let plans: Vec<(TrialParams, u64)> = (0..n_trials)
        .map(|i| (space.sample(rng), rng.fork(10_000 + i as u64).seed()))
        .collect();
    let mut trials = Vec::with_capacity(n_trials);
    for (trial_id, (params, seed)) in plans.into_iter().enumerate() {
        let trial = match train_fn(&params, seed) {
            Ok(r) => Trial {
                trial_id,
                objective: {
                    let o = r.objective();
                    if o.is_nan() {
                        f64::NEG_INFINITY
                    } else {
                        o
                    }
                },
                params,
                seed,
                status: TrialStatus::Completed,
                error: None,
                result: Some(r),
            },
            Err(e) => Trial {
                trial_id,
                params,
                seed,
                objective: f64::NEG_INFINITY,
                status: TrialStatus::Failed,
                error: Some(e.to_string()),
                result: None,
            },
        };
        trials.push(trial);
    }
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        if t.status != TrialStatus::Completed {
            continue;
        }
        match best {
            Some(b) if trials[b].objective >= t.objective => {}
            _ => best = Some(i),
        }
    }
    Ok(SearchOutcome { trials, best })
}
