//! Ground-truth DCI traffic synthesis for streaming and VoIP applications.
//!
//! Streaming apps buffer: a sub-second burst of DCIs, then seconds of silence.
//! VoIP apps send small packets continuously in both directions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::dci::{merge_traces, AppLabel, DciRecord, Direction, Rnti, Trace, TraceMeta};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, LabRng};

/// Payload bits carried by one resource block in the synthetic cell.
pub const BITS_PER_RB: u32 = 700;
/// Widest NR carrier (100 MHz at 30 kHz SCS).
pub const MAX_RB: u32 = 273;
/// Largest transport block the generator emits.
pub const MAX_TBS_BITS: u32 = 1_277_992;
/// Smallest transport block the generator emits.
pub const MIN_TBS_BITS: u32 = 24;

/// Closed interval `[lo, hi]`, written as a two-element array in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 2]", into = "[T; 2]")]
pub struct Span<T: Copy> {
    pub lo: T,
    pub hi: T,
}

impl<T: Copy> Span<T> {
    pub const fn new(lo: T, hi: T) -> Self {
        Span { lo, hi }
    }
}

impl<T: Copy> From<[T; 2]> for Span<T> {
    fn from(v: [T; 2]) -> Self {
        Span { lo: v[0], hi: v[1] }
    }
}

impl<T: Copy> From<Span<T>> for [T; 2] {
    fn from(s: Span<T>) -> Self {
        [s.lo, s.hi]
    }
}

impl<T: Copy + PartialOrd> Span<T> {
    fn check(&self, what: &str) -> Result<()> {
        if self.lo <= self.hi {
            Ok(())
        } else {
            Err(Error::invalid(format!("{what}: empty range (lo > hi)")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalParams {
    /// Parameters whose median is `median`.
    pub fn with_median(median: f64, sigma: f64) -> Self {
        LogNormalParams {
            mu: median.ln(),
            sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficKind {
    BurstStreaming,
    ContinuousVoip,
}

/// Generative traffic model of one application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppProfile {
    pub name: AppLabel,
    pub kind: TrafficKind,
    /// Start-to-start spacing of consecutive bursts, seconds.
    pub burst_interval_s: Span<f64>,
    pub burst_duration_ms: Span<u64>,
    pub instances_per_burst: Span<u32>,
    pub tbs_dl: LogNormalParams,
    pub tbs_ul: LogNormalParams,
    pub ul_fraction: f64,
    /// Spacing of consecutive VoIP instances, milliseconds.
    pub voip_period_ms: Span<f64>,
    /// Probability that a burst interval falls outside `burst_interval_s`
    /// (drawn from `[lo/2, 2*hi]` instead). Zero disables the variability model.
    #[serde(default)]
    pub gap_outlier_prob: f64,
}

impl AppProfile {
    pub fn validate(&self) -> Result<()> {
        let ctx = |e: Error| match e {
            Error::Validation(m) => Error::invalid(format!("profile {}: {m}", self.name)),
            other => other,
        };
        (|| {
            if !(0.0..=1.0).contains(&self.ul_fraction) {
                return Err(Error::invalid("ul_fraction outside [0, 1]"));
            }
            if !(0.0..=1.0).contains(&self.gap_outlier_prob) {
                return Err(Error::invalid("gap_outlier_prob outside [0, 1]"));
            }
            for p in [self.tbs_dl, self.tbs_ul] {
                if !(p.sigma >= 0.0 && p.mu.is_finite()) {
                    return Err(Error::invalid("bad log-normal parameters"));
                }
            }
            match self.kind {
                TrafficKind::BurstStreaming => {
                    self.burst_interval_s.check("burst_interval_s")?;
                    self.burst_duration_ms.check("burst_duration_ms")?;
                    self.instances_per_burst.check("instances_per_burst")?;
                    if self.burst_duration_ms.hi >= 1000 {
                        return Err(Error::invalid("bursts must be sub-second"));
                    }
                    if self.instances_per_burst.lo == 0 {
                        return Err(Error::invalid("instances_per_burst must be >= 1"));
                    }
                    // Keeps at least one second of silence between bursts.
                    if self.burst_interval_s.lo * 1000.0
                        < (self.burst_duration_ms.hi + 1000) as f64
                    {
                        return Err(Error::invalid(
                            "burst_interval_s.lo must exceed burst duration by >= 1 s",
                        ));
                    }
                }
                TrafficKind::ContinuousVoip => {
                    self.voip_period_ms.check("voip_period_ms")?;
                    if !(self.voip_period_ms.lo > 0.0 && self.voip_period_ms.lo.is_finite()) {
                        return Err(Error::invalid("voip_period_ms must be positive"));
                    }
                }
            }
            Ok(())
        })()
        .map_err(ctx)
    }
}

fn streaming(
    name: &str,
    interval: (f64, f64),
    duration_ms: (u64, u64),
    instances: (u32, u32),
    dl_median: f64,
    ul_median: f64,
    ul_fraction: f64,
) -> AppProfile {
    AppProfile {
        name: AppLabel::from(name),
        kind: TrafficKind::BurstStreaming,
        burst_interval_s: Span::new(interval.0, interval.1),
        burst_duration_ms: Span::new(duration_ms.0, duration_ms.1),
        instances_per_burst: Span::new(instances.0, instances.1),
        tbs_dl: LogNormalParams::with_median(dl_median, 0.7),
        tbs_ul: LogNormalParams::with_median(ul_median, 0.6),
        ul_fraction,
        voip_period_ms: Span::new(20.0, 20.0),
        gap_outlier_prob: 0.0,
    }
}

fn voip(name: &str, period_ms: (f64, f64), dl_median: f64, ul_median: f64) -> AppProfile {
    AppProfile {
        name: AppLabel::from(name),
        kind: TrafficKind::ContinuousVoip,
        burst_interval_s: Span::new(0.0, 0.0),
        burst_duration_ms: Span::new(0, 0),
        instances_per_burst: Span::new(1, 1),
        tbs_dl: LogNormalParams::with_median(dl_median, 0.4),
        tbs_ul: LogNormalParams::with_median(ul_median, 0.4),
        ul_fraction: 0.5,
        voip_period_ms: Span::new(period_ms.0, period_ms.1),
        gap_outlier_prob: 0.0,
    }
}

/// The default eight-application profile set.
///
/// Video burst intervals follow measured values (YouTube 10-15 s, Disney+ and
/// Prime Video 5-10 s, Netflix 50-60 s). Audio apps get 60-120 s with small
/// bursts so that they fill DCI windows slowest; VoIP apps are continuous.
pub fn builtin_profiles() -> BTreeMap<AppLabel, AppProfile> {
    let list = [
        streaming("YouTube", (10.0, 15.0), (300, 800), (300, 500), 40_000.0, 3_000.0, 0.2),
        streaming("Netflix", (50.0, 60.0), (500, 950), (700, 1100), 60_000.0, 3_000.0, 0.12),
        streaming("Disney+", (5.0, 10.0), (300, 800), (500, 800), 30_000.0, 3_000.0, 0.2),
        streaming("PrimeVideo", (5.0, 10.0), (300, 800), (800, 1200), 45_000.0, 3_000.0, 0.15),
        streaming("YTMusic", (60.0, 120.0), (200, 700), (250, 450), 16_000.0, 2_500.0, 0.2),
        streaming("Spotify", (60.0, 120.0), (200, 700), (150, 250), 11_000.0, 2_500.0, 0.25),
        voip("WhatsApp", (4.0, 11.0), 1_200.0, 1_100.0),
        voip("Telegram", (2.0, 5.0), 900.0, 800.0),
    ];
    list.into_iter().map(|p| (p.name.clone(), p)).collect()
}

pub fn builtin_profile(name: &str) -> Result<AppProfile> {
    builtin_profiles()
        .remove(&AppLabel::from(name))
        .ok_or_else(|| Error::Config(format!("no builtin profile named {name:?}")))
}

/// Profile set as TOML text: one table per application.
pub fn profiles_to_toml(profiles: &BTreeMap<AppLabel, AppProfile>) -> Result<String> {
    let table: BTreeMap<&str, &AppProfile> =
        profiles.iter().map(|(k, v)| (k.as_str(), v)).collect();
    toml::to_string_pretty(&table).map_err(|e| Error::Config(e.to_string()))
}

pub fn profiles_from_toml(text: &str) -> Result<BTreeMap<AppLabel, AppProfile>> {
    let table: BTreeMap<String, AppProfile> =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (key, profile) in table {
        if profile.name.as_str() != key {
            return Err(Error::Config(format!(
                "table [{key}] has name {:?}",
                profile.name.as_str()
            )));
        }
        profile.validate()?;
        out.insert(profile.name.clone(), profile);
    }
    Ok(out)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<BTreeMap<AppLabel, AppProfile>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    profiles_from_toml(&text)
}

struct Sampler {
    rng: LabRng,
    tbs_dl: LogNormal<f64>,
    tbs_ul: LogNormal<f64>,
    ul_fraction: f64,
    rnti: Rnti,
}

impl Sampler {
    fn new(profile: &AppProfile, rnti: Rnti, seed: u64) -> Result<Self> {
        let ln = |p: LogNormalParams| {
            LogNormal::new(p.mu, p.sigma).map_err(|e| Error::invalid(format!("log-normal: {e}")))
        };
        Ok(Sampler {
            rng: seeded(seed),
            tbs_dl: ln(profile.tbs_dl)?,
            tbs_ul: ln(profile.tbs_ul)?,
            ul_fraction: profile.ul_fraction,
            rnti,
        })
    }

    fn record(&mut self, t_ms: u64) -> DciRecord {
        let direction = if self.rng.random::<f64>() < self.ul_fraction {
            Direction::Uplink
        } else {
            Direction::Downlink
        };
        let raw = match direction {
            Direction::Downlink => self.tbs_dl.sample(&mut self.rng),
            Direction::Uplink => self.tbs_ul.sample(&mut self.rng),
        };
        let tbs = (raw.round() as u64).clamp(MIN_TBS_BITS as u64, MAX_TBS_BITS as u64) as u32;
        DciRecord::new(t_ms, self.rnti, direction, tbs, rb_for_tbs(tbs))
    }
}

/// Resource blocks needed for a transport block in the synthetic cell.
pub fn rb_for_tbs(tbs_bits: u32) -> u32 {
    tbs_bits.div_ceil(BITS_PER_RB).clamp(1, MAX_RB)
}

/// Synthesises `duration_s` seconds of one UE running `profile`.
pub fn generate(profile: &AppProfile, duration_s: f64, rnti: Rnti, seed: u64) -> Result<Trace> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid("duration_s must be positive"));
    }
    profile.validate()?;
    let end_ms = (duration_s * 1000.0).round() as u64;
    let mut s = Sampler::new(profile, rnti, seed)?;
    let mut records = Vec::new();

    match profile.kind {
        TrafficKind::BurstStreaming => {
            let iv = profile.burst_interval_s;
            // Random phase: the capture starts somewhere inside an interval.
            let mut start_ms = (s.rng.random_range(0.0..=iv.lo) * 1000.0) as u64;
            let mut offsets = Vec::new();
            while start_ms < end_ms {
                let n = s
                    .rng
                    .random_range(profile.instances_per_burst.lo..=profile.instances_per_burst.hi);
                let span = s
                    .rng
                    .random_range(profile.burst_duration_ms.lo..=profile.burst_duration_ms.hi)
                    .max(1);
                offsets.clear();
                offsets.extend((0..n).map(|_| s.rng.random_range(0..span)));
                offsets.sort_unstable();
                for &off in &offsets {
                    let t = start_ms + off;
                    if t >= end_ms {
                        break;
                    }
                    let rec = s.record(t);
                    records.push(rec);
                }
                let gap_s = if profile.gap_outlier_prob > 0.0
                    && s.rng.random::<f64>() < profile.gap_outlier_prob
                {
                    let lo = (iv.lo / 2.0).max((profile.burst_duration_ms.hi + 1000) as f64 / 1000.0);
                    s.rng.random_range(lo..=iv.hi * 2.0)
                } else {
                    s.rng.random_range(iv.lo..=iv.hi)
                };
                start_ms += (gap_s * 1000.0).round() as u64;
            }
        }
        TrafficKind::ContinuousVoip => {
            let p = profile.voip_period_ms;
            let mut t = s.rng.random_range(0.0..p.lo.max(f64::MIN_POSITIVE));
            while (t as u64) < end_ms {
                let rec = s.record(t as u64);
                records.push(rec);
                t += s.rng.random_range(p.lo..=p.hi);
            }
        }
    }

    Ok(Trace {
        records,
        meta: TraceMeta {
            label: Some(profile.name.clone()),
            capture_ratio: None,
            seed: Some(seed),
        },
    })
}

/// Synthesises a whole cell: one independent UE per entry of `assignment`.
///
/// UE `i` (in RNTI order) is seeded with `derive_seed(seed, i)`.
pub fn generate_cell(
    assignment: &BTreeMap<Rnti, AppProfile>,
    duration_s: f64,
    seed: u64,
) -> Result<Trace> {
    let mut per_ue = Vec::with_capacity(assignment.len());
    for (i, (&rnti, profile)) in assignment.iter().enumerate() {
        per_ue.push(generate(profile, duration_s, rnti, derive_seed(seed, i as u64))?);
    }
    let mut cell = merge_traces(&per_ue)?;
    cell.meta.seed = Some(seed);
    Ok(cell)
}

/// Random cell population: `n_ues` distinct RNTIs, each running a profile
/// drawn uniformly from `profiles`.
pub fn random_assignment(
    n_ues: usize,
    profiles: &BTreeMap<AppLabel, AppProfile>,
    seed: u64,
) -> Result<BTreeMap<Rnti, AppProfile>> {
    if n_ues > 0 && profiles.is_empty() {
        return Err(Error::invalid("no profiles to assign"));
    }
    if n_ues > 0xFFEF - 0x0100 {
        return Err(Error::invalid("too many UEs for the C-RNTI range"));
    }
    let mut rng = seeded(derive_seed(seed, u64::MAX));
    let choices: Vec<&AppProfile> = profiles.values().collect();
    let mut out = BTreeMap::new();
    while out.len() < n_ues {
        // C-RNTI range used by most gNBs.
        let rnti = Rnti(rng.random_range(0x0100..=0xFFEF));
        if out.contains_key(&rnti) {
            continue;
        }
        let p = choices[rng.random_range(0..choices.len())];
        out.insert(rnti, p.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_intervals_match_measurements() {
        let p = builtin_profiles();
        let iv = |n: &str| p[&AppLabel::from(n)].burst_interval_s;
        assert_eq!(iv("Netflix"), Span::new(50.0, 60.0));
        assert_eq!(iv("YouTube"), Span::new(10.0, 15.0));
        assert_eq!(iv("Disney+"), Span::new(5.0, 10.0));
        assert_eq!(iv("PrimeVideo"), Span::new(5.0, 10.0));
        assert_eq!(iv("YTMusic"), Span::new(60.0, 120.0));
        assert_eq!(iv("Spotify"), Span::new(60.0, 120.0));
        assert_eq!(p[&AppLabel::from("WhatsApp")].kind, TrafficKind::ContinuousVoip);
        assert_eq!(p[&AppLabel::from("Telegram")].kind, TrafficKind::ContinuousVoip);
        assert_eq!(p.len(), 8);
        for prof in p.values() {
            prof.validate().unwrap();
        }
    }

    #[test]
    fn constant_voip_period_is_exact() {
        let mut p = builtin_profile("WhatsApp").unwrap();
        p.voip_period_ms = Span::new(20.0, 20.0);
        let t = generate(&p, 1.0, Rnti(1), 3).unwrap();
        assert_eq!(t.len(), 50);
        for w in t.records.windows(2) {
            assert_eq!(w[1].t_ms - w[0].t_ms, 20);
        }
    }

    #[test]
    fn degenerate_profile_is_rejected() {
        let mut p = builtin_profile("YouTube").unwrap();
        p.burst_interval_s = Span::new(15.0, 10.0);
        assert!(matches!(generate(&p, 10.0, Rnti(1), 0), Err(Error::Validation(_))));
        let mut p = builtin_profile("YouTube").unwrap();
        p.burst_duration_ms = Span::new(100, 1000);
        assert!(p.validate().is_err());
        let p = builtin_profile("YouTube").unwrap();
        assert!(generate(&p, 0.0, Rnti(1), 0).is_err());
    }

    #[test]
    fn profiles_round_trip_through_toml() {
        let p = builtin_profiles();
        let text = profiles_to_toml(&p).unwrap();
        assert!(text.contains("[Netflix]"));
        assert_eq!(profiles_from_toml(&text).unwrap(), p);
    }

    #[test]
    fn empty_cell_is_empty_trace() {
        let t = generate_cell(&BTreeMap::new(), 60.0, 1).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn rb_scaling() {
        assert_eq!(rb_for_tbs(1), 1);
        assert_eq!(rb_for_tbs(BITS_PER_RB), 1);
        assert_eq!(rb_for_tbs(BITS_PER_RB + 1), 2);
        assert_eq!(rb_for_tbs(MAX_TBS_BITS), MAX_RB);
    }
}
