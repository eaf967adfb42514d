//! DCI records, traces and the line-oriented trace file format.
//!
//! A trace file is UTF-8 text with one record per line:
//!
//! ```text
//! # label=Netflix
//! # capture_ratio=0.05
//! # seed=7
//! 1000,4ABC,DL,81928,24,F1_0
//! ```
//!
//! Fields are `t_ms,rnti_hex,direction,tbs_bits,rb_count,dci_format`. Lines
//! starting with `#` carry metadata; unknown `#` lines are treated as comments.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radio Network Temporary Identifier. Rendered as four upper-case hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rnti(pub u16);

impl fmt::Display for Rnti {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04X}", self.0)
    }
}

impl FromStr for Rnti {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let s = s
            .strip_prefix("0x")
            .or_else(|| s.strip_prefix("0X"))
            .unwrap_or(s);
        u16::from_str_radix(s, 16)
            .map(Rnti)
            .map_err(|e| Error::invalid(format!("bad RNTI {s:?}: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "DL")]
    Downlink,
    #[serde(rename = "UL")]
    Uplink,
}

impl Direction {
    pub fn token(self) -> &'static str {
        match self {
            Direction::Downlink => "DL",
            Direction::Uplink => "UL",
        }
    }

    /// The only DCI format that may carry this direction.
    pub fn format(self) -> DciFormat {
        match self {
            Direction::Downlink => DciFormat::F1_0,
            Direction::Uplink => DciFormat::F0_0,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "DL" => Ok(Direction::Downlink),
            "UL" => Ok(Direction::Uplink),
            other => Err(Error::invalid(format!("unknown direction {other:?}"))),
        }
    }
}

/// DCI format: 0_0 is an uplink grant, 1_0 a downlink assignment.
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DciFormat {
    F0_0,
    F1_0,
}

impl DciFormat {
    pub fn token(self) -> &'static str {
        match self {
            DciFormat::F0_0 => "F0_0",
            DciFormat::F1_0 => "F1_0",
        }
    }
}

impl FromStr for DciFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F0_0" => Ok(DciFormat::F0_0),
            "F1_0" => Ok(DciFormat::F1_0),
            other => Err(Error::invalid(format!("unknown DCI format {other:?}"))),
        }
    }
}

/// One captured DCI instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DciRecord {
    pub t_ms: u64,
    pub rnti: Rnti,
    pub direction: Direction,
    pub tbs_bits: u32,
    pub rb_count: u32,
    pub format: DciFormat,
}

impl DciRecord {
    /// Builds a record whose DCI format is implied by `direction`.
    pub fn new(t_ms: u64, rnti: Rnti, direction: Direction, tbs_bits: u32, rb_count: u32) -> Self {
        DciRecord {
            t_ms,
            rnti,
            direction,
            tbs_bits,
            rb_count,
            format: direction.format(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tbs_bits == 0 {
            return Err(Error::invalid("tbs_bits must be > 0"));
        }
        if self.rb_count == 0 {
            return Err(Error::invalid("rb_count must be > 0"));
        }
        if self.direction.format() != self.format {
            return Err(Error::invalid(format!(
                "direction {} does not match format {}",
                self.direction.token(),
                self.format.token()
            )));
        }
        Ok(())
    }

    fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(perr(format!("expected 6 fields, found {}", fields.len())));
        }
        let t_ms = fields[0]
            .parse::<u64>()
            .map_err(|e| perr(format!("t_ms: {e}")))?;
        let rnti = fields[1]
            .parse::<Rnti>()
            .map_err(|e| perr(e.to_string()))?;
        let direction = fields[2]
            .parse::<Direction>()
            .map_err(|e| perr(e.to_string()))?;
        let tbs_bits = fields[3]
            .parse::<u32>()
            .map_err(|e| perr(format!("tbs_bits: {e}")))?;
        let rb_count = fields[4]
            .parse::<u32>()
            .map_err(|e| perr(format!("rb_count: {e}")))?;
        let format = fields[5]
            .parse::<DciFormat>()
            .map_err(|e| perr(e.to_string()))?;
        let rec = DciRecord {
            t_ms,
            rnti,
            direction,
            tbs_bits,
            rb_count,
            format,
        };
        rec.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {lineno}: {msg}")),
            other => other,
        })?;
        Ok(rec)
    }
}

impl fmt::Display for DciRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.t_ms,
            self.rnti,
            self.direction.token(),
            self.tbs_bits,
            self.rb_count,
            self.format.token()
        )
    }
}

/// Application class name, e.g. `Netflix`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AppLabel(pub String);

impl AppLabel {
    pub fn new(name: impl Into<String>) -> Self {
        AppLabel(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AppLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AppLabel {
    fn from(s: &str) -> Self {
        AppLabel(s.to_string())
    }
}

/// The eight applications of the default class set, in canonical order.
pub const DEFAULT_APPS: [&str; 8] = [
    "YouTube",
    "Netflix",
    "Disney+",
    "PrimeVideo",
    "YTMusic",
    "Spotify",
    "WhatsApp",
    "Telegram",
];

pub fn default_classes() -> Vec<AppLabel> {
    DEFAULT_APPS.iter().map(|&s| AppLabel::from(s)).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceMeta {
    pub label: Option<AppLabel>,
    pub capture_ratio: Option<f64>,
    pub seed: Option<u64>,
}

/// A time-ordered sequence of DCI records plus provenance metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<DciRecord>,
    pub meta: TraceMeta,
}

/// Result of parsing a trace: the trace plus whether records had to be re-sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub trace: Trace,
    pub resorted: bool,
}

impl Trace {
    pub fn new(records: Vec<DciRecord>, meta: TraceMeta) -> Result<Self> {
        let trace = Trace { records, meta };
        trace.validate()?;
        Ok(trace)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for rec in &self.records {
            rec.validate()?;
        }
        if !is_time_sorted(&self.records) {
            return Err(Error::invalid("records are not sorted by t_ms"));
        }
        Ok(())
    }

    /// Time span `(first, last)` in ms, or `None` for an empty trace.
    pub fn span_ms(&self) -> Option<(u64, u64)> {
        Some((self.records.first()?.t_ms, self.records.last()?.t_ms))
    }

    /// Sub-trace containing only `rnti`, with the same metadata.
    pub fn filter_rnti(&self, rnti: Rnti) -> Trace {
        Trace {
            records: self
                .records
                .iter()
                .filter(|r| r.rnti == rnti)
                .copied()
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Per-RNTI record sequences, each in trace order.
    pub fn by_rnti(&self) -> BTreeMap<Rnti, Vec<DciRecord>> {
        let mut out: BTreeMap<Rnti, Vec<DciRecord>> = BTreeMap::new();
        for rec in &self.records {
            out.entry(rec.rnti).or_default().push(*rec);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 28 + 64);
        if let Some(label) = &self.meta.label {
            out.push_str(&format!("# label={label}\n"));
        }
        if let Some(ratio) = self.meta.capture_ratio {
            out.push_str(&format!("# capture_ratio={ratio}\n"));
        }
        if let Some(seed) = self.meta.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
        for rec in &self.records {
            use std::fmt::Write;
            let _ = writeln!(out, "{rec}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<ParsedTrace> {
        let mut meta = TraceMeta::default();
        let mut records = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                parse_meta(rest.trim(), lineno, &mut meta)?;
                continue;
            }
            records.push(DciRecord::parse_line(line, lineno)?);
        }
        let resorted = !is_time_sorted(&records);
        if resorted {
            records.sort_by_key(|r| r.t_ms);
        }
        Ok(ParsedTrace {
            trace: Trace { records, meta },
            resorted,
        })
    }
}

fn parse_meta(body: &str, lineno: usize, meta: &mut TraceMeta) -> Result<()> {
    let Some((key, value)) = body.split_once('=') else {
        return Ok(());
    };
    let value = value.trim();
    let perr = |msg: String| Error::Parse { line: lineno, msg };
    match key.trim() {
        "label" => meta.label = Some(AppLabel::new(value)),
        "capture_ratio" => {
            let v = value
                .parse::<f64>()
                .map_err(|e| perr(format!("capture_ratio: {e}")))?;
            meta.capture_ratio = Some(v);
        }
        "seed" => {
            let v = value
                .parse::<u64>()
                .map_err(|e| perr(format!("seed: {e}")))?;
            meta.seed = Some(v);
        }
        _ => {}
    }
    Ok(())
}

pub fn is_time_sorted(records: &[DciRecord]) -> bool {
    records.windows(2).all(|w| w[0].t_ms <= w[1].t_ms)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<ParsedTrace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Trace::parse(&text)
}

pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace.to_text()).map_err(|e| Error::io(path, e))
}

/// Interleaves several traces by timestamp.
///
/// Ties are broken by input position, so every input's (and hence every
/// RNTI's) relative order survives. An RNTI shared by inputs with different
/// labels is rejected rather than remapped.
pub fn merge_traces(traces: &[Trace]) -> Result<Trace> {
    let mut owner: HashMap<Rnti, &Option<AppLabel>> = HashMap::new();
    for trace in traces {
        let mut seen_here: Vec<Rnti> = trace.records.iter().map(|r| r.rnti).collect();
        seen_here.sort_unstable();
        seen_here.dedup();
        for rnti in seen_here {
            match owner.get(&rnti) {
                Some(prev) if **prev != trace.meta.label => {
                    return Err(Error::RntiCollision {
                        rnti: rnti.to_string(),
                        first: prev.as_ref().map(|l| l.0.clone()),
                        second: trace.meta.label.as_ref().map(|l| l.0.clone()),
                    });
                }
                Some(_) => {}
                None => {
                    owner.insert(rnti, &trace.meta.label);
                }
            }
        }
    }

    let total = traces.iter().map(Trace::len).sum();
    let mut records = Vec::with_capacity(total);
    for trace in traces {
        records.extend_from_slice(&trace.records);
    }
    // Stable: equal timestamps keep input order.
    records.sort_by_key(|r| r.t_ms);

    let meta = TraceMeta {
        label: common(traces.iter().map(|t| &t.meta.label)).flatten(),
        capture_ratio: common(traces.iter().map(|t| &t.meta.capture_ratio)).flatten(),
        seed: common(traces.iter().map(|t| &t.meta.seed)).flatten(),
    };
    Ok(Trace { records, meta })
}

fn common<'a, T: PartialEq + Clone + 'a>(mut items: impl Iterator<Item = &'a T>) -> Option<T> {
    let first = items.next()?;
    if items.all(|x| x == first) {
        Some(first.clone())
    } else {
        None
    }
}
