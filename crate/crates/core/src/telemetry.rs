//! Process-level resource measurement: wall time, resident memory, energy
//! and carbon estimates.
//!
//! A background sampler reads resident memory from `/proc/self/status` and
//! asks a [`PowerSource`] for the current draw. Energy is the trapezoid
//! integral of the sampled power (or nominal power times wall time).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIB: f64 = 1024.0 * 1024.0;
pub const MIN_PERIOD_MS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    /// Seconds since the session started (monotonic clock).
    pub t_s: f64,
    /// Resident set size; `None` when the platform probe is unavailable.
    pub rss_bytes: Option<u64>,
    pub power_w: f64,
}

/// Something that reports instantaneous power draw in watts.
pub trait PowerSource: Send {
    fn watts(&mut self) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantPower(pub f64);

impl PowerSource for ConstantPower {
    fn watts(&mut self) -> f64 {
        self.0
    }
}

/// Reads the first Linux powercap (RAPL) package counter and reports the
/// average power since the previous reading. Falls back to `fallback_w` on
/// the first call and whenever the counter is unreadable.
pub struct RaplPower {
    path: std::path::PathBuf,
    last: Option<(Instant, u64)>,
    fallback_w: f64,
}

impl RaplPower {
    pub const DEFAULT_PATH: &'static str = "/sys/class/powercap/intel-rapl:0/energy_uj";

    pub fn new(fallback_w: f64) -> Option<Self> {
        let path = std::path::PathBuf::from(Self::DEFAULT_PATH);
        read_u64(&path)?;
        Some(Self {
            path,
            last: None,
            fallback_w,
        })
    }
}

fn read_u64(path: &Path) -> Option<u64> {
    fs::read_to_string(path).ok()?.trim().parse().ok()
}

impl PowerSource for RaplPower {
    fn watts(&mut self) -> f64 {
        let now = Instant::now();
        let Some(uj) = read_u64(&self.path) else {
            return self.fallback_w;
        };
        let w = match self.last {
            Some((t, prev)) if uj >= prev => {
                let dt = now.duration_since(t).as_secs_f64();
                if dt > 0.0 {
                    (uj - prev) as f64 * 1e-6 / dt
                } else {
                    self.fallback_w
                }
            }
            _ => self.fallback_w,
        };
        self.last = Some((now, uj));
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    #[default]
    Constant,
    SampleDriven,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerModel {
    #[serde(default)]
    pub mode: PowerMode,
    #[serde(default = "default_power")]
    pub nominal_w: f64,
    /// Grams of CO2e per kWh.
    #[serde(default = "default_intensity")]
    pub carbon_intensity: f64,
}

fn default_power() -> f64 {
    15.0
}

fn default_intensity() -> f64 {
    400.0
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            mode: PowerMode::Constant,
            nominal_w: default_power(),
            carbon_intensity: default_intensity(),
        }
    }
}

impl PowerModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_w >= 0.0 && self.carbon_intensity >= 0.0) {
            return Err(Error::Config("power and carbon intensity must be non-negative".into()));
        }
        Ok(())
    }
}

/// Resident set size of this process, from `/proc/self/status`.
pub fn current_rss_bytes() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

enum SamplerState {
    Idle,
    Running {
        stop: Arc<AtomicBool>,
        handle: JoinHandle<Vec<ResourceSample>>,
    },
    Finished,
}

/// Start/stop handle around a background sampling thread.
pub struct Sampler {
    period: Duration,
    source: Option<Box<dyn PowerSource>>,
    state: SamplerState,
}

impl Sampler {
    pub fn new(period_ms: u64, source: Box<dyn PowerSource>) -> Result<Self> {
        if period_ms < MIN_PERIOD_MS {
            return Err(Error::Config(format!(
                "sampling period must be at least {MIN_PERIOD_MS} ms, got {period_ms}"
            )));
        }
        Ok(Self {
            period: Duration::from_millis(period_ms),
            source: Some(source),
            state: SamplerState::Idle,
        })
    }

    pub fn start(&mut self) -> Result<()> {
        if !matches!(self.state, SamplerState::Idle) {
            return Err(Error::Protocol("sampler already started".into()));
        }
        let mut source = self.source.take().expect("power source present while idle");
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let period = self.period;
        let handle = std::thread::spawn(move || {
            let origin = Instant::now();
            let mut samples: Vec<ResourceSample> = Vec::new();
            loop {
                let mut t_s = origin.elapsed().as_secs_f64();
                if let Some(prev) = samples.last() {
                    if t_s <= prev.t_s {
                        t_s = prev.t_s + 1e-9;
                    }
                }
                samples.push(ResourceSample {
                    t_s,
                    rss_bytes: current_rss_bytes(),
                    power_w: source.watts(),
                });
                if flag.load(Ordering::Acquire) {
                    break;
                }
                std::thread::park_timeout(period);
                // A stop request wakes us early; take one final sample.
            }
            samples
        });
        self.state = SamplerState::Running { stop, handle };
        Ok(())
    }

    /// Stops the thread and returns every sample in time order.
    pub fn stop(&mut self) -> Result<Vec<ResourceSample>> {
        match std::mem::replace(&mut self.state, SamplerState::Finished) {
            SamplerState::Running { stop, handle } => {
                stop.store(true, Ordering::Release);
                handle.thread().unpark();
                handle
                    .join()
                    .map_err(|_| Error::Protocol("sampler thread panicked".into()))
            }
            SamplerState::Idle => {
                self.state = SamplerState::Idle;
                Err(Error::Protocol("sampler stopped before it was started".into()))
            }
            SamplerState::Finished => Err(Error::Protocol("sampler already stopped".into())),
        }
    }
}

impl Drop for Sampler {
    fn drop(&mut self) {
        if let SamplerState::Running { .. } = self.state {
            let _ = self.stop();
        }
    }
}

pub fn energy_wh(samples: &[ResourceSample], model: &PowerModel, wall_time_s: f64) -> Result<f64> {
    if !(wall_time_s > 0.0) {
        return Err(Error::Config("wall time must be positive".into()));
    }
    let joules = match model.mode {
        PowerMode::Constant => model.nominal_w * wall_time_s,
        PowerMode::SampleDriven if samples.len() >= 2 => samples
            .windows(2)
            .map(|w| 0.5 * (w[0].power_w + w[1].power_w) * (w[1].t_s - w[0].t_s))
            .sum(),
        PowerMode::SampleDriven => samples.first().map_or(model.nominal_w, |s| s.power_w) * wall_time_s,
    };
    Ok(joules / 3600.0)
}

pub fn co2e_g(energy_wh: f64, intensity_g_per_kwh: f64) -> f64 {
    energy_wh / 1000.0 * intensity_g_per_kwh
}

/// Largest resident size among samples, in MiB; `None` if no sample has one.
pub fn peak_memory_mib(samples: &[ResourceSample]) -> Option<f64> {
    samples.iter().filter_map(|s| s.rss_bytes).max().map(|b| b as f64 / MIB)
}

pub fn samples_csv(samples: &[ResourceSample]) -> String {
    let mut out = String::from("t_s,rss_bytes,power_w\n");
    for s in samples {
        let rss = s.rss_bytes.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{:.6},{},{}", s.t_s, rss, s.power_w);
    }
    out
}

/// A stretch of the memory trace that stays within a tolerance band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub start_s: f64,
    pub end_s: f64,
    pub level_bytes: f64,
    pub samples: usize,
}

/// Groups consecutive samples whose resident size stays within `tolerance`
/// bytes of the running segment median. Segments shorter than `min_samples`
/// are treated as transitions and dropped.
pub fn plateaus(samples: &[ResourceSample], tolerance: f64, min_samples: usize) -> Vec<Plateau> {
    let points: Vec<(f64, f64)> = samples
        .iter()
        .filter_map(|s| s.rss_bytes.map(|b| (s.t_s, b as f64)))
        .collect();
    let mut out = Vec::new();
    let mut seg: Vec<(f64, f64)> = Vec::new();
    let flush = |seg: &mut Vec<(f64, f64)>, out: &mut Vec<Plateau>| {
        if seg.len() >= min_samples.max(1) {
            out.push(Plateau {
                start_s: seg[0].0,
                end_s: seg[seg.len() - 1].0,
                level_bytes: median(seg.iter().map(|p| p.1)),
                samples: seg.len(),
            });
        }
        seg.clear();
    };
    for p in points {
        if !seg.is_empty() {
            let level = median(seg.iter().map(|q| q.1));
            if (p.1 - level).abs() > tolerance {
                flush(&mut seg, &mut out);
            }
        }
        seg.push(p);
    }
    flush(&mut seg, &mut out);
    out
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Level changes between consecutive plateaus whose magnitude exceeds
/// `threshold` bytes.
pub fn level_shifts(plateaus: &[Plateau], threshold: f64) -> Vec<f64> {
    plateaus
        .windows(2)
        .map(|w| w[1].level_bytes - w[0].level_bytes)
        .filter(|d| d.abs() > threshold)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub time_s: f64,
    pub energy_wh: f64,
    /// `None` when memory could not be sampled.
    pub peak_mem_mib: Option<f64>,
    pub gflops: f64,
    pub co2e_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetrySettings {
    /// Run the background sampler; wall time is measured either way.
    #[serde(default = "default_enabled")]
    pub enabled: bool,
    #[serde(default = "default_period")]
    pub period_ms: u64,
    #[serde(default)]
    pub power_mode: PowerMode,
    /// Nominal draw in constant mode and fallback when host counters are missing.
    #[serde(default = "default_power")]
    pub power_w: f64,
    #[serde(default = "default_intensity")]
    pub carbon_intensity: f64,
}

fn default_enabled() -> bool {
    true
}

fn default_period() -> u64 {
    100
}

impl Default for TelemetrySettings {
    fn default() -> Self {
        Self {
            enabled: true,
            period_ms: default_period(),
            power_mode: PowerMode::Constant,
            power_w: default_power(),
            carbon_intensity: default_intensity(),
        }
    }
}

impl TelemetrySettings {
    /// Timing only, no sampler thread.
    pub fn timing_only() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn power_model(&self) -> PowerModel {
        PowerModel {
            mode: self.power_mode,
            nominal_w: self.power_w,
            carbon_intensity: self.carbon_intensity,
        }
    }
}

/// A labelled point in the run timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMark {
    pub phase: String,
    pub t_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub active_layer: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TelemetryReport {
    pub metrics: RunMetrics,
    pub samples: Vec<ResourceSample>,
    pub phases: Vec<PhaseMark>,
}

/// Brackets one training run.
pub struct Telemetry {
    settings: TelemetrySettings,
    started: Instant,
    sampler: Option<Sampler>,
    phases: Vec<PhaseMark>,
}

impl Telemetry {
    pub fn start(settings: TelemetrySettings) -> Result<Self> {
        settings.power_model().validate()?;
        let sampler = if settings.enabled {
            let source: Box<dyn PowerSource> = match settings.power_mode {
                PowerMode::SampleDriven => match RaplPower::new(settings.power_w) {
                    Some(r) => Box::new(r),
                    None => Box::new(ConstantPower(settings.power_w)),
                },
                PowerMode::Constant => Box::new(ConstantPower(settings.power_w)),
            };
            let mut s = Sampler::new(settings.period_ms, source)?;
            s.start()?;
            Some(s)
        } else {
            None
        };
        Ok(Self {
            settings,
            started: Instant::now(),
            sampler,
            phases: Vec::new(),
        })
    }

    /// No sampler; wall time is still measured.
    pub fn disabled() -> Self {
        Self {
            settings: TelemetrySettings::timing_only(),
            started: Instant::now(),
            sampler: None,
            phases: Vec::new(),
        }
    }

    pub fn elapsed_s(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    pub fn mark(&mut self, phase: &str, active_layer: Option<usize>) {
        let t_s = self.elapsed_s();
        self.phases.push(PhaseMark {
            phase: phase.to_string(),
            t_s,
            active_layer,
        });
    }

    pub fn phases(&self) -> &[PhaseMark] {
        &self.phases
    }

    pub fn finish(mut self, forward_flops: f64) -> Result<TelemetryReport> {
        let time_s = self.elapsed_s().max(f64::MIN_POSITIVE);
        let samples = match self.sampler.as_mut() {
            Some(s) => s.stop()?,
            None => Vec::new(),
        };
        let mut peak = peak_memory_mib(&samples);
        if self.sampler.is_some() {
            if let Some(now) = current_rss_bytes() {
                peak = Some(peak.unwrap_or(0.0).max(now as f64 / MIB));
            }
        }
        let model = self.settings.power_model();
        let energy = energy_wh(&samples, &model, time_s)?;
        Ok(TelemetryReport {
            metrics: RunMetrics {
                time_s,
                energy_wh: energy,
                peak_mem_mib: peak,
                gflops: forward_flops / 1e9,
                co2e_g: co2e_g(energy, model.carbon_intensity),
            },
            samples,
            phases: std::mem::take(&mut self.phases),
        })
    }
}
