//! Labelled window datasets assembled straight from traffic profiles.

use std::collections::BTreeMap;

use crate::capture::{apply_capture, CaptureConfig};
use crate::cnn::TrainConfig;
use crate::metrics::{classification_latency, window_sweep, LatencyRow, SweepRow};
use crate::dci::{AppLabel, Rnti};
use crate::error::{Error, Result};
use crate::features::{windows_for_trace, Dataset, FeatureScaling, WindowConfig, WindowSample, DEFAULT_BURST_GAP_MS};
use crate::rng::{derive_seed, mix64};
use crate::synth::{generate, AppProfile, TrafficKind};

/// Upper bound on generated records per synthesis chunk.
const MAX_CHUNK_RECORDS: f64 = 1.5e6;

/// Long-run DCI rate of a profile at full capture, instances per second.
pub fn mean_rate_hz(profile: &AppProfile) -> f64 {
    match profile.kind {
        TrafficKind::BurstStreaming => {
            let n = (profile.instances_per_burst.lo + profile.instances_per_burst.hi) as f64 / 2.0;
            let gap = (profile.burst_interval_s.lo + profile.burst_interval_s.hi) / 2.0;
            n / gap
        }
        TrafficKind::ContinuousVoip => {
            1000.0 / ((profile.voip_period_ms.lo + profile.voip_period_ms.hi) / 2.0)
        }
    }
}

/// Burst-only windows are excluded for streaming sources. Continuous sources
/// have no bursts to exclude.
pub fn burst_gap_for(profile: &AppProfile) -> Option<u64> {
    match profile.kind {
        TrafficKind::BurstStreaming => Some(DEFAULT_BURST_GAP_MS),
        TrafficKind::ContinuousVoip => None,
    }
}

pub fn window_config_for(profile: &AppProfile, window: usize, stride: usize) -> WindowConfig {
    WindowConfig {
        window,
        stride,
        burst_gap_ms: burst_gap_for(profile),
    }
}

/// Stable per-label seed component.
pub fn label_seed(label: &AppLabel) -> u64 {
    label
        .as_str()
        .bytes()
        .fold(0xC0FFEE, |h, b| mix64(h ^ u64::from(b)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub window: usize,
    pub capture_prob: f64,
    /// Disjoint windows to collect per class.
    pub per_class: usize,
    pub seed: u64,
}

/// Generates, captures and windows `profile` traffic until `spec.per_class`
/// disjoint windows exist. Each chunk is an independent UE session.
pub fn build_class_windows(profile: &AppProfile, spec: &CorpusSpec) -> Result<Vec<WindowSample>> {
    if spec.per_class == 0 {
        return Ok(Vec::new());
    }
    let rate = mean_rate_hz(profile) * spec.capture_prob;
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::invalid(format!("profile {} produces no traffic", profile.name)));
    }
    let base = derive_seed(spec.seed, label_seed(&profile.name));
    let cfg = window_config_for(profile, spec.window, spec.window);
    let scaling = FeatureScaling::default();
    let slack_s = match profile.kind {
        TrafficKind::BurstStreaming => 2.0 * profile.burst_interval_s.hi,
        TrafficKind::ContinuousVoip => 1.0,
    };
    let max_chunk_s = MAX_CHUNK_RECORDS / mean_rate_hz(profile);

    let mut out = Vec::with_capacity(spec.per_class);
    let mut chunk = 0u64;
    while out.len() < spec.per_class {
        if chunk > 10_000 {
            return Err(Error::invalid(format!(
                "profile {}: windows too rare to reach {}",
                profile.name, spec.per_class
            )));
        }
        let missing = (spec.per_class - out.len()) as f64;
        let duration = (missing * spec.window as f64 / rate * 1.15 + slack_s).min(max_chunk_s);
        let rnti = Rnti(0x1000 + (chunk % 0xE000) as u16);
        let trace = generate(profile, duration, rnti, derive_seed(base, 2 * chunk))?;
        let captured = apply_capture(&trace, &CaptureConfig::new(spec.capture_prob, derive_seed(base, 2 * chunk + 1)))?;
        out.extend(windows_for_trace(&captured, &cfg, &scaling)?);
        chunk += 1;
    }
    out.truncate(spec.per_class);
    Ok(out)
}

/// One class per profile, in map order.
pub fn build_corpus(profiles: &BTreeMap<AppLabel, AppProfile>, spec: &CorpusSpec) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(profiles.len() * spec.per_class);
    for profile in profiles.values() {
        samples.extend(build_class_windows(profile, spec)?);
    }
    Dataset::new(spec.window, samples)
}

/// Synthetic window-size sweep: class sizes shrink with the window so that
/// every run sees a similar number of DCI instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub windows: Vec<usize>,
    pub capture_prob: f64,
    /// Training windows per class at `W = 100`; scaled by `100 / W`.
    pub per_class_at_100: usize,
    pub max_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl SweepPlan {
    pub fn per_class_for(&self, window: usize) -> usize {
        (self.per_class_at_100 * 100)
            .div_ceil(window.max(1))
            .min(self.max_per_class)
    }
}

/// Runs [`window_sweep`] on corpora synthesised from `profiles`. Training and
/// test corpora come from different seeds and therefore different sessions.
pub fn synthetic_sweep(profiles: &BTreeMap<AppLabel, AppProfile>, plan: &SweepPlan) -> Result<Vec<SweepRow>> {
    window_sweep(
        &plan.windows,
        |w| {
            let base = CorpusSpec {
                window: w,
                capture_prob: plan.capture_prob,
                per_class: plan.per_class_for(w),
                seed: derive_seed(plan.seed, 1),
            };
            let test = CorpusSpec {
                per_class: plan.test_per_class,
                seed: derive_seed(plan.seed, 2),
                ..base
            };
            Ok((build_corpus(profiles, &base)?, build_corpus(profiles, &test)?))
        },
        &plan.train,
    )
}

/// Fill-time statistics per application and window on synthetic traces long
/// enough for `n_trials` windows of the largest size.
pub fn synthetic_latency(
    profiles: &BTreeMap<AppLabel, AppProfile>,
    windows: &[usize],
    capture_prob: f64,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<LatencyRow>> {
    let max_w = windows.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::new();
    for profile in profiles.values() {
        let base = derive_seed(seed, label_seed(&profile.name));
        let rate = mean_rate_hz(profile) * capture_prob;
        let slack_s = match profile.kind {
            TrafficKind::BurstStreaming => 2.0 * profile.burst_interval_s.hi,
            TrafficKind::ContinuousVoip => 1.0,
        };
        let duration = (n_trials * max_w) as f64 / rate * 1.3 + slack_s;
        let trace = generate(profile, duration, Rnti(0x1000), derive_seed(base, 0))?;
        let captured = apply_capture(&trace, &CaptureConfig::new(capture_prob, derive_seed(base, 1)))?;
        for &w in windows {
            rows.push(LatencyRow {
                app: profile.name.clone(),
                window: w,
                stats: classification_latency(&captured, w, n_trials, burst_gap_for(profile))?,
            });
        }
    }
    Ok(rows)
}
