//! Cell-wide activity scanning and RNTI acquisition by traffic signature.
//!
//! A hunter sends a known schedule of large payloads to the victim and then
//! looks, right after each send, for the RNTI that was allocated an unusual
//! number of resource blocks. The RNTI that lights up after every burst is
//! the victim's.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::ModelBundle;
use crate::dci::{AppLabel, DciRecord, Direction, Rnti, Trace};
use crate::error::{Error, Result};
use crate::features::{extract_features_with, is_single_burst, WindowSample};
use crate::rng::seeded;
use crate::synth::MIN_TBS_BITS;

/// Which RB-rate streams must exceed their threshold for a burst to count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitRule {
    Either,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignatureSpec {
    pub n_bursts: usize,
    /// Start-to-start spacing of consecutive bursts, seconds.
    pub intervals_s: Vec<f64>,
    /// Payload of one burst, bytes.
    pub burst_bytes: u64,
    /// Seconds after each burst start that are inspected.
    pub detect_window_s: f64,
    /// Uplink grant (format 0_0) threshold, RB per second.
    pub rb_per_s_ul: f64,
    /// Downlink assignment (format 1_0) threshold, RB per second.
    pub rb_per_s_dl: f64,
    pub hit_rule: HitRule,
    /// Expected capture ratio of the sniffer. Bursts are enlarged by its
    /// inverse so the captured part still clears the thresholds.
    pub capture_estimate: Option<f64>,
}

impl Default for SignatureSpec {
    /// Seven bursts: five 10 s gaps then one 20 s gap.
    fn default() -> Self {
        SignatureSpec {
            n_bursts: 7,
            intervals_s: vec![10.0, 10.0, 10.0, 10.0, 10.0, 20.0],
            burst_bytes: 150 * 1024,
            detect_window_s: 2.0,
            rb_per_s_ul: 5000.0,
            rb_per_s_dl: 10_000.0,
            hit_rule: HitRule::Either,
            capture_estimate: None,
        }
    }
}

/// Lower bound on the payload of one signature burst.
pub const MIN_BURST_BYTES: u64 = 100 * 1024;
/// Captured RB total aimed for, as a multiple of the downlink threshold budget.
const RB_MARGIN: f64 = 2.0;
const RB_PER_DL: (u32, u32) = (230, 270);
const ACK_EVERY: usize = 8;

impl SignatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_bursts == 0 {
            return Err(Error::invalid("signature needs at least one burst"));
        }
        if self.intervals_s.len() != self.n_bursts - 1 {
            return Err(Error::invalid(format!(
                "{} bursts need {} intervals, got {}",
                self.n_bursts,
                self.n_bursts - 1,
                self.intervals_s.len()
            )));
        }
        if self.intervals_s.iter().any(|&i| !(i > 0.0 && i.is_finite())) {
            return Err(Error::invalid("intervals must be positive"));
        }
        if self.burst_bytes <= MIN_BURST_BYTES {
            return Err(Error::invalid("burst_bytes must exceed 100 KiB"));
        }
        if !(self.detect_window_s > 0.0 && self.detect_window_s.is_finite()) {
            return Err(Error::invalid("detect_window_s must be positive"));
        }
        if !(self.rb_per_s_ul > 0.0 && self.rb_per_s_dl > 0.0) {
            return Err(Error::invalid("thresholds must be positive"));
        }
        if let Some(c) = self.capture_estimate {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::invalid("capture_estimate outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// Burst start offsets relative to `t0`, milliseconds.
    pub fn burst_offsets_ms(&self) -> Vec<u64> {
        let mut acc = 0.0;
        let mut out = vec![0];
        for &i in &self.intervals_s {
            acc += i;
            out.push((acc * 1000.0).round() as u64);
        }
        out
    }

    fn window_ms(&self) -> u64 {
        (self.detect_window_s * 1000.0).round() as u64
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SignatureSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Adds the signature's DCIs for `target` to `cell` and re-sorts.
///
/// Each burst is a run of downlink assignments, two per millisecond, large
/// enough that `RB_MARGIN` times the downlink threshold budget survives the
/// expected capture ratio. Every eighth assignment is acknowledged by a small
/// uplink grant.
pub fn inject_signature(cell: &Trace, target: Rnti, spec: &SignatureSpec, t0_ms: u64, seed: u64) -> Result<Trace> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let capture = spec.capture_estimate.unwrap_or(1.0);
    let window_ms = spec.window_ms();
    let rb_needed = RB_MARGIN * spec.rb_per_s_dl * spec.detect_window_s / capture;
    let mean_rb = f64::from(RB_PER_DL.0 + RB_PER_DL.1) / 2.0;
    let n_dl = (rb_needed / mean_rb).ceil() as usize;
    let per_ms = n_dl.div_ceil((window_ms as usize * 9 / 10).max(1)).max(2);
    let tbs = ((spec.burst_bytes * 8) as f64 / capture / n_dl as f64).ceil().max(MIN_TBS_BITS as f64) as u32;

    let mut records = cell.records.clone();
    records.reserve(spec.n_bursts * (n_dl + n_dl / ACK_EVERY + 1));
    for start in spec.burst_offsets_ms() {
        let base = t0_ms + start;
        for i in 0..n_dl {
            let t = base + (i / per_ms) as u64;
            let rb = rng.random_range(RB_PER_DL.0..=RB_PER_DL.1);
            records.push(DciRecord::new(t, target, Direction::Downlink, tbs, rb));
            if i % ACK_EVERY == ACK_EVERY - 1 {
                let ack_tbs = rng.random_range(200..=600);
                let ack_rb = rng.random_range(1..=3);
                records.push(DciRecord::new(t + 1, target, Direction::Uplink, ack_tbs, ack_rb));
            }
        }
    }
    records.sort_by_key(|r| r.t_ms);
    Ok(Trace {
        records,
        meta: cell.meta.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HuntResult {
    /// Number of bursts each RNTI matched (RNTIs with at least one hit).
    pub candidates: BTreeMap<Rnti, usize>,
    /// RNTIs that matched each burst, in burst order.
    pub per_burst: Vec<BTreeSet<Rnti>>,
    /// Set iff exactly one RNTI matched every burst.
    pub unique_target: Option<Rnti>,
    pub n_bursts: usize,
}

impl HuntResult {
    /// Candidates by descending hit count, then ascending RNTI.
    pub fn ranked(&self) -> Vec<(Rnti, usize)> {
        let mut v: Vec<_> = self.candidates.iter().map(|(&r, &n)| (r, n)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// RNTIs that matched every burst.
    pub fn full_matches(&self) -> Vec<Rnti> {
        self.candidates
            .iter()
            .filter(|(_, &n)| n == self.n_bursts && n > 0)
            .map(|(&r, _)| r)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "unique_target={}",
            self.unique_target.map(|r| r.to_string()).unwrap_or_else(|| "none".into())
        );
        let _ = writeln!(s, "bursts={}", self.n_bursts);
        for (k, hits) in self.per_burst.iter().enumerate() {
            let list: Vec<String> = hits.iter().map(Rnti::to_string).collect();
            let _ = writeln!(s, "burst.{k}={}", list.join(","));
        }
        for (r, n) in self.ranked() {
            let _ = writeln!(s, "candidate.{r}={n}");
        }
        s
    }
}

/// Per-RNTI `(uplink RB, downlink RB)` totals in `[from, to)`.
pub fn rb_totals(records: &[DciRecord], from_ms: u64, to_ms: u64) -> BTreeMap<Rnti, (u64, u64)> {
    let lo = records.partition_point(|r| r.t_ms < from_ms);
    let hi = records.partition_point(|r| r.t_ms < to_ms);
    let mut out: BTreeMap<Rnti, (u64, u64)> = BTreeMap::new();
    for r in &records[lo..hi.max(lo)] {
        let e = out.entry(r.rnti).or_default();
        match r.direction {
            Direction::Uplink => e.0 += u64::from(r.rb_count),
            Direction::Downlink => e.1 += u64::from(r.rb_count),
        }
    }
    out
}

/// Looks for RNTIs whose RB rate clears the thresholds right after every
/// burst of the signature started at `t0_ms`.
pub fn detect_target(captured: &Trace, spec: &SignatureSpec, t0_ms: u64) -> Result<HuntResult> {
    spec.validate()?;
    let window_ms = spec.window_ms();
    let mut result = HuntResult {
        n_bursts: spec.n_bursts,
        ..HuntResult::default()
    };
    for start in spec.burst_offsets_ms() {
        let from = t0_ms + start;
        let mut hits = BTreeSet::new();
        for (rnti, (ul, dl)) in rb_totals(&captured.records, from, from + window_ms) {
            let ul_hit = ul as f64 / spec.detect_window_s > spec.rb_per_s_ul;
            let dl_hit = dl as f64 / spec.detect_window_s > spec.rb_per_s_dl;
            let hit = match spec.hit_rule {
                HitRule::Either => ul_hit || dl_hit,
                HitRule::Both => ul_hit && dl_hit,
            };
            if hit {
                hits.insert(rnti);
                *result.candidates.entry(rnti).or_default() += 1;
            }
        }
        result.per_burst.push(hits);
    }
    let full = result.full_matches();
    if full.len() == 1 {
        result.unique_target = Some(full[0]);
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub label: AppLabel,
    /// Mean confidence of the merged predictions.
    pub confidence: f64,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RntiActivity {
    pub first_seen_ms: u64,
    pub last_seen_ms: u64,
    pub n_dci: usize,
    pub timeline: Vec<Segment>,
    /// `(first, last)` DCI of every contiguous activity span.
    pub presence: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanReport {
    pub window: usize,
    pub min_confidence: f64,
    pub rntis: BTreeMap<Rnti, RntiActivity>,
    /// First second covered by `active_per_second`.
    pub activity_start_s: u64,
    /// Number of RNTIs with at least one DCI in each second.
    pub active_per_second: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub min_confidence: f64,
    /// Same-label predictions further apart than this start a new segment.
    pub segment_gap_ms: u64,
    /// Silence longer than this ends a presence interval.
    pub presence_gap_ms: u64,
    /// Skip windows that sit inside one burst, as training does for
    /// streaming traffic. `None` classifies every window.
    pub burst_gap_ms: Option<u64>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            min_confidence: 0.5,
            segment_gap_ms: 30_000,
            presence_gap_ms: 180_000,
            burst_gap_ms: None,
        }
    }
}

const SCAN_BATCH: usize = 512;

/// Classifies every RNTI of a captured cell trace with `min_confidence`
/// and default gaps.
pub fn cell_scan(captured: &Trace, bundle: &ModelBundle, window: usize, min_confidence: f64) -> Result<ScanReport> {
    let opts = ScanOptions {
        min_confidence,
        ..ScanOptions::default()
    };
    cell_scan_with(captured, bundle, window, &opts)
}

pub fn cell_scan_with(captured: &Trace, bundle: &ModelBundle, window: usize, opts: &ScanOptions) -> Result<ScanReport> {
    if window != bundle.window() {
        return Err(Error::invalid(format!(
            "scan window {window} does not match the model window {}",
            bundle.window()
        )));
    }
    if !(0.0..=1.0).contains(&opts.min_confidence) {
        return Err(Error::invalid("min_confidence outside [0, 1]"));
    }
    let mut report = ScanReport {
        window,
        min_confidence: opts.min_confidence,
        ..ScanReport::default()
    };
    let Some((first, last)) = captured.span_ms() else {
        return Ok(report);
    };
    report.activity_start_s = first / 1000;
    report.active_per_second = vec![0; (last / 1000 - first / 1000 + 1) as usize];

    let scaling = bundle.spec().scaling;
    for (rnti, records) in captured.by_rnti() {
        let mut seconds: Vec<u64> = records.iter().map(|r| r.t_ms / 1000).collect();
        seconds.dedup();
        for s in seconds {
            report.active_per_second[(s - report.activity_start_s) as usize] += 1;
        }

        let rows = extract_features_with(&records, &scaling)?;
        let mut preds: Vec<(u64, u64, usize, f64)> = Vec::new();
        if rows.len() >= window {
            let starts: Vec<usize> = (0..=rows.len() - window)
                .filter(|&s| opts.burst_gap_ms.is_none_or(|g| !is_single_burst(&rows[s..s + window], g, &scaling)))
                .collect();
            for chunk in starts.chunks(SCAN_BATCH) {
                let samples: Vec<WindowSample> = chunk
                    .iter()
                    .map(|&s| WindowSample {
                        rows: rows[s..s + window].to_vec(),
                        label: None,
                        rnti,
                        t_start_ms: records[s].t_ms,
                        t_end_ms: records[s + window - 1].t_ms,
                    })
                    .collect();
                let refs: Vec<&WindowSample> = samples.iter().collect();
                for (s, (class, conf)) in samples.iter().zip(bundle.predict_batch(&refs)?) {
                    preds.push((s.t_start_ms, s.t_end_ms, class, conf));
                }
            }
        }
        report.rntis.insert(
            rnti,
            RntiActivity {
                first_seen_ms: records[0].t_ms,
                last_seen_ms: records[records.len() - 1].t_ms,
                n_dci: records.len(),
                timeline: merge_segments(&preds, bundle, opts),
                presence: presence_intervals(&records, opts.presence_gap_ms),
            },
        );
    }
    Ok(report)
}

/// Folds stride-1 window predictions into non-overlapping labelled segments.
fn merge_segments(preds: &[(u64, u64, usize, f64)], bundle: &ModelBundle, opts: &ScanOptions) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    let mut current: Option<(Segment, usize, f64)> = None;
    for &(t0, t1, class, conf) in preds {
        if conf < opts.min_confidence {
            continue;
        }
        match current.as_mut() {
            Some((seg, c, sum)) if *c == class && t0 <= seg.end_ms + opts.segment_gap_ms => {
                seg.end_ms = seg.end_ms.max(t1);
                seg.n_windows += 1;
                *sum += conf;
            }
            _ => {
                let prev_end = current.as_ref().map(|(s, _, _)| s.end_ms);
                if let Some((mut seg, _, sum)) = current.take() {
                    seg.confidence = sum / seg.n_windows as f64;
                    out.push(seg);
                }
                let start = prev_end.map_or(t0, |e| t0.max(e));
                current = Some((
                    Segment {
                        start_ms: start,
                        end_ms: t1.max(start),
                        label: bundle.classes[class].clone(),
                        confidence: 0.0,
                        n_windows: 1,
                    },
                    class,
                    conf,
                ));
            }
        }
    }
    if let Some((mut seg, _, sum)) = current {
        seg.confidence = sum / seg.n_windows as f64;
        out.push(seg);
    }
    out
}

fn presence_intervals(records: &[DciRecord], gap_ms: u64) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((_, end)) if r.t_ms - *end <= gap_ms => *end = r.t_ms,
            _ => out.push((r.t_ms, r.t_ms)),
        }
    }
    out
}

impl ScanReport {
    /// Milliseconds of `rnti`'s timeline attributed to each label.
    pub fn label_time_ms(&self, rnti: Rnti) -> BTreeMap<AppLabel, u64> {
        let mut out = BTreeMap::new();
        if let Some(a) = self.rntis.get(&rnti) {
            for s in &a.timeline {
                *out.entry(s.label.clone()).or_default() += s.end_ms - s.start_ms;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# window={} min_confidence={}", self.window, self.min_confidence);
        for (rnti, a) in &self.rntis {
            let _ = writeln!(
                s,
                "rnti {rnti} first_ms={} last_ms={} dci={}",
                a.first_seen_ms, a.last_seen_ms, a.n_dci
            );
            for (p0, p1) in &a.presence {
                let _ = writeln!(s, "  presence {p0} {p1}");
            }
            for seg in &a.timeline {
                let _ = writeln!(
                    s,
                    "  segment {} {} {} {:.3} windows={}",
                    seg.start_ms,
                    seg.end_ms,
                    seg.label.as_str(),
                    seg.confidence,
                    seg.n_windows
                );
            }
        }
        let _ = writeln!(s, "# active RNTIs per second from t={}s", self.activity_start_s);
        let counts: Vec<String> = self.active_per_second.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "active {}", counts.join(","));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Seen,
    NotSeen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub rnti: Rnti,
    pub status: TrackStatus,
    pub report: ScanReport,
}

/// [`cell_scan`] restricted to a single RNTI.
pub fn track_target(
    captured: &Trace,
    rnti: Rnti,
    bundle: &ModelBundle,
    window: usize,
    opts: &ScanOptions,
) -> Result<TrackResult> {
    let own = captured.filter_rnti(rnti);
    let report = cell_scan_with(&own, bundle, window, opts)?;
    Ok(TrackResult {
        rnti,
        status: if own.is_empty() {
            TrackStatus::NotSeen
        } else {
            TrackStatus::Seen
        },
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{build_model, Network};
    use crate::dci::TraceMeta;

    fn rec(t: u64, rnti: u16, dir: Direction, rb: u32) -> DciRecord {
        DciRecord::new(t, Rnti(rnti), dir, 1000, rb)
    }

    #[test]
    fn default_pattern_offsets() {
        let s = SignatureSpec::default();
        s.validate().unwrap();
        assert_eq!(s.burst_offsets_ms(), vec![0, 10_000, 20_000, 30_000, 40_000, 50_000, 70_000]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let big = SignatureSpec {
            burst_bytes: 100 * 1024,
            ..SignatureSpec::default()
        };
        assert!(big.validate().is_err());
        let mut s = SignatureSpec::default();
        s.intervals_s.pop();
        assert!(s.validate().is_err());
        let no_rb = SignatureSpec {
            rb_per_s_dl: 0.0,
            ..SignatureSpec::default()
        };
        assert!(no_rb.validate().is_err());
        let blind = SignatureSpec {
            capture_estimate: Some(0.0),
            ..SignatureSpec::default()
        };
        assert!(blind.validate().is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let s = SignatureSpec {
            capture_estimate: Some(0.1),
            hit_rule: HitRule::Both,
            ..SignatureSpec::default()
        };
        assert_eq!(SignatureSpec::from_toml(&s.to_toml().unwrap()).unwrap(), s);
        let partial = SignatureSpec::from_toml("n_bursts = 2\nintervals_s = [5.0]\n").unwrap();
        assert_eq!(partial.rb_per_s_dl, 10_000.0);
    }

    #[test]
    fn injection_into_empty_trace_has_one_cluster_per_burst() {
        let spec = SignatureSpec::default();
        let t = inject_signature(&Trace::default(), Rnti(0x4ABC), &spec, 5_000, 1).unwrap();
        assert!(t.records.iter().all(|r| r.rnti == Rnti(0x4ABC)));
        assert!(crate::dci::is_time_sorted(&t.records));
        // Clusters separated by more than the detect window.
        let mut clusters = 1;
        for w in t.records.windows(2) {
            if w[1].t_ms - w[0].t_ms > 2_000 {
                clusters += 1;
            }
        }
        assert_eq!(clusters, spec.n_bursts);
        assert_eq!(t, inject_signature(&Trace::default(), Rnti(0x4ABC), &spec, 5_000, 1).unwrap());
        t.validate().unwrap();
    }

    #[test]
    fn full_capture_single_ue_hits_every_burst() {
        let spec = SignatureSpec::default();
        let t = inject_signature(&Trace::default(), Rnti(7), &spec, 0, 2).unwrap();
        let h = detect_target(&t, &spec, 0).unwrap();
        assert_eq!(h.unique_target, Some(Rnti(7)));
        assert_eq!(h.candidates[&Rnti(7)], 7);
        assert!(detect_target(&Trace::default(), &spec, 0).unwrap().unique_target.is_none());
    }

    #[test]
    fn hit_rule_uses_strict_rate_per_window() {
        let mut spec = SignatureSpec {
            n_bursts: 1,
            intervals_s: vec![],
            ..SignatureSpec::default()
        };
        // 20000 DL RB over 2 s is exactly 10000 RB/s: not a hit.
        let exact = Trace::new(vec![rec(0, 1, Direction::Downlink, 10_000), rec(1999, 1, Direction::Downlink, 10_000)], TraceMeta::default()).unwrap();
        assert!(detect_target(&exact, &spec, 0).unwrap().candidates.is_empty());
        // One more RB tips it over; a record at the window end does not count.
        let over = Trace::new(
            vec![
                rec(0, 1, Direction::Downlink, 10_001),
                rec(1999, 1, Direction::Downlink, 10_000),
                rec(2000, 2, Direction::Downlink, 60_000),
            ],
            TraceMeta::default(),
        )
        .unwrap();
        let h = detect_target(&over, &spec, 0).unwrap();
        assert_eq!(h.unique_target, Some(Rnti(1)));
        // Uplink alone satisfies Either but not Both.
        let ul = Trace::new(vec![rec(10, 3, Direction::Uplink, 10_001)], TraceMeta::default()).unwrap();
        assert_eq!(detect_target(&ul, &spec, 0).unwrap().unique_target, Some(Rnti(3)));
        spec.hit_rule = HitRule::Both;
        assert_eq!(detect_target(&ul, &spec, 0).unwrap().unique_target, None);
    }

    #[test]
    fn two_full_matches_are_not_unique() {
        let spec = SignatureSpec::default();
        let a = inject_signature(&Trace::default(), Rnti(1), &spec, 0, 1).unwrap();
        let b = inject_signature(&a, Rnti(2), &spec, 0, 2).unwrap();
        let h = detect_target(&b, &spec, 0).unwrap();
        assert_eq!(h.full_matches(), vec![Rnti(1), Rnti(2)]);
        assert_eq!(h.unique_target, None);
        assert_eq!(h.ranked()[0], (Rnti(1), 7));
    }

    fn tiny_bundle(window: usize) -> ModelBundle {
        let net = Network::new(build_model(window, 3, 2).unwrap(), 1).unwrap();
        ModelBundle::new(net, vec![AppLabel::from("A"), AppLabel::from("B")]).unwrap()
    }

    #[test]
    fn scan_edge_cases() {
        let b = tiny_bundle(20);
        let empty = cell_scan(&Trace::default(), &b, 20, 0.0).unwrap();
        assert!(empty.rntis.is_empty() && empty.active_per_second.is_empty());
        assert!(cell_scan(&Trace::default(), &b, 40, 0.0).is_err());

        let recs: Vec<_> = (0..10).map(|i| rec(i * 300, 9, Direction::Downlink, 5)).collect();
        let short = Trace::new(recs, TraceMeta::default()).unwrap();
        let r = cell_scan(&short, &b, 20, 0.0).unwrap();
        let a = &r.rntis[&Rnti(9)];
        assert!(a.timeline.is_empty());
        assert_eq!(a.n_dci, 10);
        assert_eq!(r.active_per_second, vec![1, 1, 1]);
    }

    #[test]
    fn burst_gap_skips_windows_inside_one_burst() {
        let b = tiny_bundle(20);
        // Two 30-record bursts 5 s apart.
        let recs: Vec<_> = (0..60u64)
            .map(|i| rec((i / 30) * 5_000 + (i % 30) * 10, 4, Direction::Downlink, 5))
            .collect();
        let t = Trace::new(recs, TraceMeta::default()).unwrap();
        let windows = |gap| {
            let opts = ScanOptions {
                min_confidence: 0.0,
                burst_gap_ms: gap,
                ..ScanOptions::default()
            };
            let r = cell_scan_with(&t, &b, 20, &opts).unwrap();
            r.rntis[&Rnti(4)].timeline.iter().map(|s| s.n_windows).sum::<usize>()
        };
        assert_eq!(windows(None), 41);
        // Starts 11..=29 straddle the gap at index 30; the other 22 do not.
        assert_eq!(windows(Some(1_000)), 19);
    }

    #[test]
    fn segments_are_disjoint_and_ordered() {
        let b = tiny_bundle(20);
        let mut recs = Vec::new();
        for i in 0..300u64 {
            recs.push(DciRecord::new(i * 700, Rnti(5), if i % 3 == 0 { Direction::Uplink } else { Direction::Downlink }, 500 + (i as u32 * 7919) % 90_000, 3));
        }
        let t = Trace::new(recs, TraceMeta::default()).unwrap();
        let r = cell_scan(&t, &b, 20, 0.0).unwrap();
        let tl = &r.rntis[&Rnti(5)].timeline;
        assert!(!tl.is_empty());
        for s in tl {
            assert!(s.start_ms <= s.end_ms);
        }
        for w in tl.windows(2) {
            assert!(w[0].end_ms <= w[1].start_ms);
        }
        let total: u64 = tl.iter().map(|s| s.end_ms - s.start_ms).sum();
        let (f, l) = t.span_ms().unwrap();
        assert!(total <= l - f);
    }

    #[test]
    fn merge_rules() {
        let b = tiny_bundle(20);
        let opts = ScanOptions {
            min_confidence: 0.6,
            ..ScanOptions::default()
        };
        let preds = [
            (0, 10_000, 0, 0.9),
            (1_000, 11_000, 0, 0.7),
            (2_000, 12_000, 1, 0.55), // below threshold, skipped
            (3_000, 13_000, 1, 0.8),
            (60_000, 70_000, 1, 0.8), // more than 30 s after the last one
        ];
        let segs = merge_segments(&preds, &b, &opts);
        assert_eq!(segs.len(), 3);
        assert_eq!((segs[0].start_ms, segs[0].end_ms, segs[0].n_windows), (0, 11_000, 2));
        assert!((segs[0].confidence - 0.8).abs() < 1e-12);
        assert_eq!((segs[1].start_ms, segs[1].end_ms), (11_000, 13_000));
        assert_eq!((segs[2].start_ms, segs[2].end_ms), (60_000, 70_000));
    }

    #[test]
    fn presence_splits_on_long_silence() {
        let recs = vec![
            rec(0, 1, Direction::Downlink, 1),
            rec(100_000, 1, Direction::Downlink, 1),
            rec(400_000, 1, Direction::Downlink, 1),
        ];
        assert_eq!(presence_intervals(&recs, 180_000), vec![(0, 100_000), (400_000, 400_000)]);
    }

    #[test]
    fn tracking_absent_rnti() {
        let b = tiny_bundle(20);
        let t = Trace::new(vec![rec(0, 1, Direction::Downlink, 1)], TraceMeta::default()).unwrap();
        let r = track_target(&t, Rnti(2), &b, 20, &ScanOptions::default()).unwrap();
        assert_eq!(r.status, TrackStatus::NotSeen);
        assert!(r.report.rntis.is_empty());
        let r = track_target(&t, Rnti(1), &b, 20, &ScanOptions::default()).unwrap();
        assert_eq!(r.status, TrackStatus::Seen);
    }
}
