//! Per-instance feature rows and DCI-instance windows.
//!
//! Each captured DCI becomes one row `(direction, tbs, dt)`: direction 0 for
//! downlink and 1 for uplink, TBS in kilobits, and the gap to the previous
//! captured DCI of the same RNTI in seconds. A classification sample is a run
//! of `W` consecutive rows, however long it took to collect them.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dci::{is_time_sorted, AppLabel, DciRecord, Direction, Rnti, Trace};
use crate::error::{Error, Result};

/// Gap that separates two bursts. Streaming bursts last under a second.
pub const DEFAULT_BURST_GAP_MS: u64 = 1000;

/// Fixed unit conventions applied to raw DCI fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScaling {
    /// TBS bits per feature unit (1000: kilobits).
    pub tbs_bits_per_unit: f64,
    /// Milliseconds per feature unit of `dt` (1000: seconds).
    pub ms_per_unit: f64,
}

impl Default for FeatureScaling {
    fn default() -> Self {
        FeatureScaling {
            tbs_bits_per_unit: 1000.0,
            ms_per_unit: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRow {
    pub direction: f64,
    pub tbs_kb: f64,
    pub dt_s: f64,
}

impl FeatureRow {
    pub const N_FEATURES: usize = 3;

    pub fn as_array(&self) -> [f64; 3] {
        [self.direction, self.tbs_kb, self.dt_s]
    }
}

/// One classification unit.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub rows: Vec<FeatureRow>,
    pub label: Option<AppLabel>,
    pub rnti: Rnti,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
}

impl WindowSample {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn fill_time_s(&self) -> f64 {
        (self.t_end_ms - self.t_start_ms) as f64 / 1000.0
    }
}

pub fn extract_features(records: &[DciRecord]) -> Result<Vec<FeatureRow>> {
    extract_features_with(records, &FeatureScaling::default())
}

/// One row per record, in arrival order. The first row has `dt = 0`.
pub fn extract_features_with(records: &[DciRecord], scaling: &FeatureScaling) -> Result<Vec<FeatureRow>> {
    if !is_time_sorted(records) {
        return Err(Error::invalid("records must be sorted by t_ms"));
    }
    let mut prev = records.first().map(|r| r.t_ms);
    Ok(records
        .iter()
        .map(|r| {
            let dt_ms = r.t_ms - prev.unwrap_or(r.t_ms);
            prev = Some(r.t_ms);
            row_for(r, dt_ms, scaling)
        })
        .collect())
}

fn row_for(r: &DciRecord, dt_ms: u64, scaling: &FeatureScaling) -> FeatureRow {
    FeatureRow {
        direction: match r.direction {
            Direction::Downlink => 0.0,
            Direction::Uplink => 1.0,
        },
        tbs_kb: r.tbs_bits as f64 / scaling.tbs_bits_per_unit,
        dt_s: dt_ms as f64 / scaling.ms_per_unit,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub window: usize,
    pub stride: usize,
    /// Drop windows that sit entirely inside one burst. `None` keeps every
    /// window, which is what continuous (VoIP-like) sources need.
    pub burst_gap_ms: Option<u64>,
}

impl WindowConfig {
    /// Disjoint windows with burst-only windows dropped.
    pub fn disjoint(window: usize) -> Self {
        WindowConfig {
            window,
            stride: window,
            burst_gap_ms: Some(DEFAULT_BURST_GAP_MS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("window size must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        Ok(())
    }
}

/// True when every consecutive pair inside `rows` is closer than the burst gap,
/// i.e. the rows were all produced by a single burst.
pub fn is_single_burst(rows: &[FeatureRow], burst_gap_ms: u64, scaling: &FeatureScaling) -> bool {
    let threshold = burst_gap_ms as f64 / scaling.ms_per_unit;
    rows.iter().skip(1).all(|r| r.dt_s < threshold)
}

/// Start indices of the retained windows over `rows`.
///
/// Fewer than `window` rows yield no windows.
pub fn build_windows(rows: &[FeatureRow], cfg: &WindowConfig, scaling: &FeatureScaling) -> Result<Vec<usize>> {
    cfg.validate()?;
    if rows.len() < cfg.window {
        return Ok(Vec::new());
    }
    Ok((0..=rows.len() - cfg.window)
        .step_by(cfg.stride)
        .filter(|&start| match cfg.burst_gap_ms {
            Some(gap) => !is_single_burst(&rows[start..start + cfg.window], gap, scaling),
            None => true,
        })
        .collect())
}

/// Windows over one RNTI's record sequence.
pub fn windows_from_records(
    records: &[DciRecord],
    label: Option<&AppLabel>,
    cfg: &WindowConfig,
    scaling: &FeatureScaling,
) -> Result<Vec<WindowSample>> {
    let rows = extract_features_with(records, scaling)?;
    let starts = build_windows(&rows, cfg, scaling)?;
    Ok(starts
        .into_iter()
        .map(|s| {
            let e = s + cfg.window - 1;
            WindowSample {
                rows: rows[s..=e].to_vec(),
                label: label.cloned(),
                rnti: records[s].rnti,
                t_start_ms: records[s].t_ms,
                t_end_ms: records[e].t_ms,
            }
        })
        .collect())
}

/// Windows for every RNTI of a trace, labelled with the trace label.
pub fn windows_for_trace(trace: &Trace, cfg: &WindowConfig, scaling: &FeatureScaling) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for records in trace.by_rnti().values() {
        out.extend(windows_from_records(records, trace.meta.label.as_ref(), cfg, scaling)?);
    }
    Ok(out)
}

/// Seconds needed to collect each retained disjoint window of `window` DCIs.
pub fn time_to_fill(trace: &Trace, window: usize, burst_gap_ms: Option<u64>) -> Result<Vec<f64>> {
    let cfg = WindowConfig {
        window,
        stride: window,
        burst_gap_ms,
    };
    Ok(windows_for_trace(trace, &cfg, &FeatureScaling::default())?
        .iter()
        .map(WindowSample::fill_time_s)
        .collect())
}

#[derive(Debug, Default)]
struct RntiStream {
    rows: VecDeque<(FeatureRow, u64)>,
    last_t: Option<u64>,
}

/// Per-RNTI ring buffers producing a stride-1 window on every new DCI once
/// `window` DCIs of that RNTI have been seen.
#[derive(Debug)]
pub struct StreamWindower {
    window: usize,
    scaling: FeatureScaling,
    streams: HashMap<Rnti, RntiStream>,
}

impl StreamWindower {
    pub fn new(window: usize, scaling: FeatureScaling) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("window size must be >= 1"));
        }
        Ok(StreamWindower {
            window,
            scaling,
            streams: HashMap::new(),
        })
    }

    pub fn push(&mut self, rec: &DciRecord) -> Result<Option<WindowSample>> {
        let stream = self.streams.entry(rec.rnti).or_default();
        let dt_ms = match stream.last_t {
            Some(prev) if rec.t_ms < prev => {
                return Err(Error::invalid(format!(
                    "RNTI {} went back in time ({} < {prev})",
                    rec.rnti, rec.t_ms
                )))
            }
            Some(prev) => rec.t_ms - prev,
            None => 0,
        };
        stream.last_t = Some(rec.t_ms);
        if stream.rows.len() == self.window {
            stream.rows.pop_front();
        }
        stream.rows.push_back((row_for(rec, dt_ms, &self.scaling), rec.t_ms));
        if stream.rows.len() < self.window {
            return Ok(None);
        }
        Ok(Some(WindowSample {
            rows: stream.rows.iter().map(|(r, _)| *r).collect(),
            label: None,
            rnti: rec.rnti,
            t_start_ms: stream.rows.front().map(|(_, t)| *t).unwrap_or(rec.t_ms),
            t_end_ms: rec.t_ms,
        }))
    }
}

/// A set of equally sized windows, as stored in a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub window: usize,
    pub samples: Vec<WindowSample>,
}

impl Dataset {
    pub fn new(window: usize, samples: Vec<WindowSample>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| s.len() != window) {
            return Err(Error::Shape {
                expected: format!("{window} rows"),
                got: format!("{} rows", bad.len()),
            });
        }
        Ok(Dataset { window, samples })
    }

    /// Text form: a `# window=W` line, then per sample a header line
    /// `label,rnti,t_start_ms,t_end_ms` followed by `W` lines `dir,tbs_kb,dt_s`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# window={}", self.window);
        for s in &self.samples {
            let label = s.label.as_ref().map(AppLabel::as_str).unwrap_or("");
            let _ = writeln!(out, "{label},{},{},{}", s.rnti, s.t_start_ms, s.t_end_ms);
            for r in &s.rows {
                let _ = writeln!(out, "{},{},{}", r.direction, r.tbs_kb, r.dt_s);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut window: Option<usize> = None;
        let mut samples: Vec<WindowSample> = Vec::new();
        let mut current: Option<WindowSample> = None;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let perr = |msg: String| Error::Parse { line: lineno, msg };
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(("window", v)) = rest.trim().split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                    window = Some(v.parse().map_err(|e| perr(format!("window: {e}")))?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            match fields.len() {
                4 => {
                    if let Some(done) = current.take() {
                        samples.push(done);
                    }
                    let label = (!fields[0].is_empty()).then(|| AppLabel::new(fields[0]));
                    let rnti = fields[1].parse::<Rnti>().map_err(|e| perr(e.to_string()))?;
                    let t_start_ms = fields[2].parse().map_err(|e| perr(format!("t_start_ms: {e}")))?;
                    let t_end_ms = fields[3].parse().map_err(|e| perr(format!("t_end_ms: {e}")))?;
                    current = Some(WindowSample {
                        rows: Vec::new(),
                        label,
                        rnti,
                        t_start_ms,
                        t_end_ms,
                    });
                }
                3 => {
                    let Some(cur) = current.as_mut() else {
                        return Err(perr("feature row before any sample header".into()));
                    };
                    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| perr(format!("{s:?}: {e}")));
                    cur.rows.push(FeatureRow {
                        direction: num(fields[0])?,
                        tbs_kb: num(fields[1])?,
                        dt_s: num(fields[2])?,
                    });
                }
                n => return Err(perr(format!("expected 3 or 4 fields, found {n}"))),
            }
        }
        if let Some(done) = current.take() {
            samples.push(done);
        }
        let window = match window {
            Some(w) => w,
            None => samples.first().map(WindowSample::len).unwrap_or(0),
        };
        Dataset::new(window, samples)
    }
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ds.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::parse(&text)
}
