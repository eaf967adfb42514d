//! Reference implementations shared by the integration suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use dcilab::attacks::{HitRule, SignatureSpec};
use dcilab::dci::{DciRecord, Direction, Rnti};
use dcilab::metrics::EvalReport;

/// Per-class counts from enumerating every (truth, prediction) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub confusion: Vec<Vec<u64>>,
}

pub fn oracle_counts(truth: &[usize], pred: &[usize], n: usize) -> OracleCounts {
    let mut o = OracleCounts {
        tp: vec![0; n],
        fp: vec![0; n],
        fn_: vec![0; n],
        confusion: vec![vec![0; n]; n],
    };
    for c in 0..n {
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => o.tp[c] += 1,
                (false, true) => o.fp[c] += 1,
                (true, false) => o.fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    for t in 0..n {
        for p in 0..n {
            o.confusion[t][p] = truth.iter().zip(pred).filter(|&(&a, &b)| a == t && b == p).count() as u64;
        }
    }
    o
}

/// Checks a report against the pair-enumeration oracle. Counts must match
/// exactly; derived ratios to 1e-12.
pub fn check_against_oracle(report: &EvalReport, truth: &[usize], pred: &[usize]) -> Result<(), String> {
    let n = report.classes.len();
    let o = oracle_counts(truth, pred, n);
    if report.confusion != o.confusion {
        return Err("confusion matrix differs".into());
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let (mut mp, mut mr, mut mf, mut k) = (0.0, 0.0, 0.0, 0.0);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..n {
        let m = &report.per_class[c];
        let (tp, fp, fnn) = (o.tp[c], o.fp[c], o.fn_[c]);
        if m.support != tp + fnn || m.predicted != tp + fp {
            return Err(format!("class {c}: support/predicted counts differ"));
        }
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fnn == 0 { 0.0 } else { tp as f64 / (tp + fnn) as f64 };
        let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64 };
        if !(close(m.precision, p) && close(m.recall, r) && close(m.f1, f)) {
            return Err(format!("class {c}: ratios differ"));
        }
        let s = (tp + fnn) as f64;
        wp += s * p;
        wr += s * r;
        wf += s * f;
        if tp + fp + fnn > 0 {
            mp += p;
            mr += r;
            mf += f;
            k += 1.0;
        }
    }
    let total = truth.len() as f64;
    let acc = truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / total;
    let k = f64::max(k, 1.0);
    let checks = [
        ("accuracy", report.accuracy, acc),
        ("macro precision", report.macro_avg.precision, mp / k),
        ("macro recall", report.macro_avg.recall, mr / k),
        ("macro f1", report.macro_avg.f1, mf / k),
        ("weighted precision", report.weighted_avg.precision, wp / total),
        ("weighted recall", report.weighted_avg.recall, wr / total),
        ("weighted f1", report.weighted_avg.f1, wf / total),
    ];
    for (name, got, want) in checks {
        if !close(got, want) {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    if report.n_samples != truth.len() as u64 {
        return Err("sample count differs".into());
    }
    Ok(())
}

/// Hits per burst by direct summation over every record.
pub fn hunt_oracle(records: &[DciRecord], spec: &SignatureSpec, t0_ms: u64) -> Vec<Vec<Rnti>> {
    let w = (spec.detect_window_s * 1000.0).round() as u64;
    let mut starts = vec![0.0];
    for i in &spec.intervals_s {
        starts.push(starts.last().unwrap() + i);
    }
    starts
        .iter()
        .map(|s| {
            let from = t0_ms + (s * 1000.0).round() as u64;
            let mut sums: BTreeMap<Rnti, (u64, u64)> = BTreeMap::new();
            for r in records {
                if r.t_ms >= from && r.t_ms < from + w {
                    let e = sums.entry(r.rnti).or_default();
                    match r.direction {
                        Direction::Uplink => e.0 += u64::from(r.rb_count),
                        Direction::Downlink => e.1 += u64::from(r.rb_count),
                    }
                }
            }
            sums.into_iter()
                .filter(|(_, (ul, dl))| {
                    let u = *ul as f64 / spec.detect_window_s > spec.rb_per_s_ul;
                    let d = *dl as f64 / spec.detect_window_s > spec.rb_per_s_dl;
                    match spec.hit_rule {
                        HitRule::Either => u || d,
                        HitRule::Both => u && d,
                    }
                })
                .map(|(r, _)| r)
                .collect()
        })
        .collect()
}
