//! Classification metrics, window-size sweeps and time-to-classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::cnn::{train, ModelBundle, TrainConfig};
use crate::dci::{AppLabel, Trace};
use crate::error::{Error, Result};
use crate::features::{time_to_fill, Dataset, WindowSample};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub label: AppLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances of the class.
    pub support: u64,
    /// Instances predicted as the class.
    pub predicted: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<AppLabel>,
    /// `confusion[t][p]`: samples of true class `t` predicted as `p`.
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over classes that have support or predictions.
    pub macro_avg: Averages,
    /// Support-weighted mean over all classes.
    pub weighted_avg: Averages,
    pub accuracy: f64,
    pub n_samples: u64,
    pub window: Option<usize>,
    /// Set when any metric hit a zero denominator and was reported as 0.
    pub zero_division: bool,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from class indices into a class list of size `n_classes`.
pub fn compute_metrics_indexed(truth: &[usize], pred: &[usize], classes: &[AppLabel]) -> Result<EvalReport> {
    let n = classes.len();
    if truth.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    if truth.len() != pred.len() {
        return Err(Error::Shape {
            expected: format!("{} predictions", truth.len()),
            got: format!("{}", pred.len()),
        });
    }
    let mut confusion = vec![vec![0u64; n]; n];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n || p >= n {
            return Err(Error::invalid(format!("class index {} out of range", t.max(p))));
        }
        confusion[t][p] += 1;
    }
    Ok(report_from_confusion(classes, confusion))
}

/// Builds the full report from a confusion matrix.
pub fn report_from_confusion(classes: &[AppLabel], confusion: Vec<Vec<u64>>) -> EvalReport {
    let n = classes.len();
    let total: u64 = confusion.iter().flatten().sum();
    let mut zero_division = false;
    let mut per_class = Vec::with_capacity(n);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    let (mut mp, mut mr, mut mf, mut m_count) = (0.0, 0.0, 0.0, 0usize);
    let mut trace = 0u64;
    for c in 0..n {
        let tp = confusion[c][c];
        trace += tp;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted, &mut zero_division);
        let recall = ratio(tp, support, &mut zero_division);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            if support + predicted > 0 {
                zero_division = true;
            }
            0.0
        };
        // Multiplying the integer support before dividing keeps the recall
        // term an exact integer (`support * tp / support == tp`).
        let s = support as f64;
        if predicted > 0 {
            wp += s * tp as f64 / predicted as f64;
        }
        if support > 0 {
            wr += s * tp as f64 / s;
        }
        wf += s * f1;
        if support > 0 || predicted > 0 {
            mp += precision;
            mr += recall;
            mf += f1;
            m_count += 1;
        }
        per_class.push(ClassMetrics {
            label: classes[c].clone(),
            precision,
            recall,
            f1,
            support,
            predicted,
        });
    }
    let t = total as f64;
    let mc = m_count.max(1) as f64;
    EvalReport {
        classes: classes.to_vec(),
        confusion,
        per_class,
        macro_avg: Averages {
            precision: mp / mc,
            recall: mr / mc,
            f1: mf / mc,
        },
        weighted_avg: Averages {
            precision: wp / t,
            recall: wr / t,
            f1: wf / t,
        },
        accuracy: trace as f64 / t,
        n_samples: total,
        window: None,
        zero_division,
    }
}

/// Metrics for label lists. Every label must occur in `class_order`.
pub fn compute_metrics(truth: &[AppLabel], pred: &[AppLabel], class_order: &[AppLabel]) -> Result<EvalReport> {
    let index: BTreeMap<&AppLabel, usize> = class_order.iter().enumerate().map(|(i, c)| (c, i)).collect();
    if index.len() != class_order.len() {
        return Err(Error::invalid("duplicate class in class order"));
    }
    let lookup = |l: &AppLabel| {
        index
            .get(l)
            .copied()
            .ok_or_else(|| Error::invalid(format!("label {l} not in class order")))
    };
    let t = truth.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    let p = pred.iter().map(lookup).collect::<Result<Vec<_>>>()?;
    compute_metrics_indexed(&t, &p, class_order)
}

/// Rows divided by their sums; all-zero rows stay zero.
pub fn normalized_confusion(report: &EvalReport) -> Vec<Vec<f64>> {
    report
        .confusion
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter()
                .map(|&v| if s == 0 { 0.0 } else { v as f64 / s as f64 })
                .collect()
        })
        .collect()
}

impl EvalReport {
    /// Line-delimited `key=value` form.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        if let Some(w) = self.window {
            let _ = writeln!(s, "window={w}");
        }
        let _ = writeln!(s, "samples={}", self.n_samples);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        for (name, a) in [("macro", self.macro_avg), ("weighted", self.weighted_avg)] {
            let _ = writeln!(s, "{name}.precision={}", a.precision);
            let _ = writeln!(s, "{name}.recall={}", a.recall);
            let _ = writeln!(s, "{name}.f1={}", a.f1);
        }
        let _ = writeln!(s, "zero_division={}", self.zero_division);
        for c in &self.per_class {
            let l = c.label.as_str();
            let _ = writeln!(s, "class.{l}.precision={}", c.precision);
            let _ = writeln!(s, "class.{l}.recall={}", c.recall);
            let _ = writeln!(s, "class.{l}.f1={}", c.f1);
            let _ = writeln!(s, "class.{l}.support={}", c.support);
        }
        for (label, row) in self.classes.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "confusion.{}={}", label.as_str(), cells.join(","));
        }
        s
    }

    /// Aligned per-class table followed by the averages and the confusion matrix.
    pub fn to_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.as_str().len())
            .max()
            .unwrap_or(0)
            .max(12);
        let mut s = String::new();
        if let Some(w) = self.window {
            let _ = writeln!(s, "DCI instance window: {w}");
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}",
            "Class", "Precision", "Recall", "F1", "Support"
        );
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>8}",
                c.label.as_str(),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        for (name, a) in [("macro avg", self.macro_avg), ("weighted avg", self.weighted_avg)] {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>8}",
                name, a.precision, a.recall, a.f1, self.n_samples
            );
        }
        let _ = writeln!(s, "accuracy {:.3} over {} samples", self.accuracy, self.n_samples);
        if self.zero_division {
            let _ = writeln!(s, "note: some metrics had a zero denominator and are reported as 0");
        }
        let _ = writeln!(s, "\nnormalised confusion (rows: true, columns: predicted)");
        let _ = write!(s, "{:<width$}", "");
        for i in 0..self.classes.len() {
            let _ = write!(s, "  {:>6}", i);
        }
        let _ = writeln!(s);
        for (i, row) in normalized_confusion(self).iter().enumerate() {
            let _ = write!(s, "{:<width$}", format!("{i} {}", self.classes[i].as_str()));
            for v in row {
                let _ = write!(s, "  {v:>6.3}");
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Runs `bundle` over a labelled dataset.
pub fn evaluate(bundle: &ModelBundle, samples: &[WindowSample]) -> Result<EvalReport> {
    let truth = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label
                .as_ref()
                .and_then(|l| bundle.class_index(l))
                .ok_or_else(|| Error::invalid(format!("sample {i} has no label known to the model")))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let pred: Vec<usize> = bundle.predict_batch(&refs)?.into_iter().map(|(i, _)| i).collect();
    let mut report = compute_metrics_indexed(&truth, &pred, &bundle.classes)?;
    report.window = Some(bundle.window());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub window: usize,
    pub n_train: usize,
    pub report: EvalReport,
    pub bundle: ModelBundle,
}

/// Trains and evaluates one model per window size. `data(w)` returns the
/// `(train, test)` datasets for window `w`; they should come from disjoint
/// source traces.
pub fn window_sweep<F>(windows: &[usize], mut data: F, cfg: &TrainConfig) -> Result<Vec<SweepRow>>
where
    F: FnMut(usize) -> Result<(Dataset, Dataset)>,
{
    let mut rows = Vec::with_capacity(windows.len());
    for &w in windows {
        let (train_set, test_set) = data(w)?;
        if train_set.window != w || test_set.window != w {
            return Err(Error::Shape {
                expected: format!("datasets of window {w}"),
                got: format!("{} / {}", train_set.window, test_set.window),
            });
        }
        let bundle = train(&train_set.samples, cfg)?;
        let report = evaluate(&bundle, &test_set.samples)?;
        rows.push(SweepRow {
            window: w,
            n_train: train_set.samples.len(),
            report,
            bundle,
        });
    }
    Ok(rows)
}

/// Summary with one line per window: weighted precision, recall, F1 and accuracy.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6}  {:>9}  {:>9}  {:>9}  {:>9}  {:>8}",
        "Window", "Precision", "Recall", "F1", "Accuracy", "Samples"
    );
    for r in rows {
        let a = r.report.weighted_avg;
        let _ = writeln!(
            s,
            "{:>6}  {:>9.3}  {:>9.3}  {:>9.3}  {:>9.3}  {:>8}",
            r.window, a.precision, a.recall, a.f1, r.report.accuracy, r.report.n_samples
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub min_s: f64,
    pub median_s: f64,
    pub max_s: f64,
}

impl LatencyStats {
    pub fn from_samples(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Some(LatencyStats {
            n,
            mean_s: mean,
            std_s: var.sqrt(),
            min_s: sorted[0],
            median_s: median,
            max_s: sorted[n - 1],
        })
    }
}

/// Fill-time statistics over the first `n_trials` disjoint windows of
/// `trace`. `None` when the trace cannot fill a single window.
pub fn classification_latency(
    trace: &Trace,
    window: usize,
    n_trials: usize,
    burst_gap_ms: Option<u64>,
) -> Result<Option<LatencyStats>> {
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be >= 1"));
    }
    let mut fills = time_to_fill(trace, window, burst_gap_ms)?;
    fills.truncate(n_trials);
    Ok(LatencyStats::from_samples(&fills))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub app: AppLabel,
    pub window: usize,
    pub stats: Option<LatencyStats>,
}

/// CSV with one row per (application, window).
pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut s = String::from("app,window,n,mean_s,std_s,min_s,median_s,max_s\n");
    for r in rows {
        match r.stats {
            Some(st) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
                    r.app.as_str(),
                    r.window,
                    st.n,
                    st.mean_s,
                    st.std_s,
                    st.min_s,
                    st.median_s,
                    st.max_s
                );
            }
            None => {
                let _ = writeln!(s, "{},{},0,,,,,", r.app.as_str(), r.window);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dci::{DciRecord, Direction, Rnti};

    fn labels(s: &str) -> Vec<AppLabel> {
        s.chars().map(|c| AppLabel::new(c.to_string())).collect()
    }

    #[test]
    fn perfect_classifier() {
        let r = compute_metrics(&labels("AABB"), &labels("AABB"), &labels("AB")).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.iter().all(|c| c.f1 == 1.0));
        assert!(!r.zero_division);
    }

    #[test]
    fn half_right() {
        let r = compute_metrics(&labels("AABB"), &labels("ABAB"), &labels("AB")).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.per_class[0].precision, 0.5);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert_eq!(r.per_class[0].f1, 0.5);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![1, 1]]);
    }

    #[test]
    fn empty_class_is_zero_and_excluded_from_macro() {
        let r = compute_metrics(&labels("AABB"), &labels("AABB"), &labels("ABC")).unwrap();
        let c = &r.per_class[2];
        assert_eq!((c.precision, c.recall, c.f1), (0.0, 0.0, 0.0));
        assert!(r.zero_division);
        assert_eq!(r.macro_avg.f1, 1.0);
        assert_eq!(r.weighted_avg.f1, 1.0);
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&[], &[], &labels("AB")).is_err());
        assert!(compute_metrics(&labels("A"), &labels("AB"), &labels("AB")).is_err());
        assert!(compute_metrics(&labels("Z"), &labels("A"), &labels("AB")).is_err());
    }

    #[test]
    fn normalisation() {
        let r = report_from_confusion(&labels("AB"), vec![vec![9, 1], vec![0, 0]]);
        assert_eq!(normalized_confusion(&r), vec![vec![0.9, 0.1], vec![0.0, 0.0]]);
        let id = report_from_confusion(&labels("AB"), vec![vec![3, 0], vec![0, 5]]);
        assert_eq!(normalized_confusion(&id), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn weighted_recall_is_accuracy() {
        let r = report_from_confusion(&labels("ABC"), vec![vec![7, 2, 1], vec![3, 11, 0], vec![0, 5, 4]]);
        assert_eq!(r.weighted_avg.recall, r.accuracy);
    }

    #[test]
    fn latency_of_constant_rate_trace() {
        // 4 instances per second for 100 s.
        let records = (0..400)
            .map(|i| DciRecord::new(i * 250, Rnti(1), Direction::Downlink, 100, 1))
            .collect();
        let t = Trace::new(records, Default::default()).unwrap();
        let st = classification_latency(&t, 40, 50, None).unwrap().unwrap();
        assert_eq!(st.n, 10);
        assert!((st.mean_s - 39.0 / 4.0).abs() < 1e-9);
        assert!(classification_latency(&t, 500, 5, None).unwrap().is_none());
        assert!(classification_latency(&t, 40, 0, None).is_err());
    }

    #[test]
    fn report_renderings_mention_every_class() {
        let mut r = compute_metrics(&labels("AABB"), &labels("ABAB"), &labels("AB")).unwrap();
        r.window = Some(40);
        let kv = r.to_kv();
        assert!(kv.contains("window=40\n"));
        assert!(kv.contains("accuracy=0.5\n"));
        assert!(kv.contains("confusion.A=1,1\n"));
        let t = r.to_table();
        assert!(t.contains("Precision"));
        assert!(t.contains("weighted avg"));
    }

    #[test]
    fn csv_has_header_and_empty_rows() {
        let rows = vec![
            LatencyRow {
                app: AppLabel::from("X"),
                window: 40,
                stats: LatencyStats::from_samples(&[1.0, 3.0]),
            },
            LatencyRow {
                app: AppLabel::from("Y"),
                window: 40,
                stats: None,
            },
        ];
        let csv = latency_csv(&rows);
        assert!(csv.starts_with("app,window"));
        assert!(csv.contains("X,40,2,2.000,1.414,1.000,2.000,3.000"));
        assert!(csv.contains("Y,40,0,,,,,"));
    }
}
