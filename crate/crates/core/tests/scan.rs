//! Cell scanning and target tracking with a model trained on synthetic
//! traffic at W = 100.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use dcilab::attacks::{cell_scan, cell_scan_with, track_target, ScanOptions, TrackStatus};
use dcilab::capture::{apply_capture, CaptureConfig};
use dcilab::cnn::{train_with_classes, ModelBundle, TrainConfig};
use dcilab::corpus::{build_corpus, CorpusSpec};
use dcilab::dci::{merge_traces, AppLabel, Rnti};
use dcilab::features::DEFAULT_BURST_GAP_MS;
use dcilab::synth::{builtin_profiles, generate, generate_cell, AppProfile};

const W: usize = 100;
const APPS: [&str; 4] = ["Netflix", "PrimeVideo", "Telegram", "YouTube"];

fn profiles() -> BTreeMap<AppLabel, AppProfile> {
    let all = builtin_profiles();
    APPS.iter().map(|a| (AppLabel::from(*a), all[&AppLabel::from(*a)].clone())).collect()
}

fn model() -> &'static ModelBundle {
    static MODEL: OnceLock<ModelBundle> = OnceLock::new();
    MODEL.get_or_init(|| {
        let p = profiles();
        let ds = build_corpus(&p, &CorpusSpec { window: W, capture_prob: 0.1, per_class: 1000, seed: 31 }).unwrap();
        let classes: Vec<AppLabel> = p.keys().cloned().collect();
        let cfg = TrainConfig { epochs: 8, seed: 31, ..TrainConfig::default() };
        train_with_classes(&ds.samples, &classes, &cfg).unwrap()
    })
}

#[test]
fn scan_attributes_each_ue_to_its_app() {
    let p = profiles();
    let assignment: BTreeMap<Rnti, AppProfile> = p.values().enumerate().map(|(i, prof)| (Rnti(0x2000 + i as u16), prof.clone())).collect();
    let cell = generate_cell(&assignment, 900.0, 77).unwrap();
    let captured = apply_capture(&cell, &CaptureConfig::new(0.1, 78)).unwrap();
    let report = cell_scan(&captured, model(), W, 0.5).unwrap();
    assert_eq!(report.rntis.len(), 4);
    for (rnti, prof) in &assignment {
        let times = report.label_time_ms(*rnti);
        let total: u64 = times.values().sum();
        let right = times.get(&prof.name).copied().unwrap_or(0);
        assert!(total > 0, "{rnti} has no timeline");
        let share = right as f64 / total as f64;
        assert!(share >= 0.9, "{rnti} ({}): {share:.3} of {total} ms, {times:?}", prof.name);
        let a = &report.rntis[rnti];
        for w in a.timeline.windows(2) {
            assert!(w[0].end_ms <= w[1].start_ms, "overlapping segments for {rnti}");
        }
    }
}

#[test]
fn tracking_a_netflix_session_then_idle() {
    let all = builtin_profiles();
    let target = Rnti(0x4ABC);
    let session = generate(&all[&AppLabel::from("Netflix")], 600.0, target, 90).unwrap();
    let others: BTreeMap<Rnti, AppProfile> = [("Telegram", 0x3001u16), ("YouTube", 0x3002)]
        .iter()
        .map(|(a, r)| (Rnti(*r), all[&AppLabel::from(*a)].clone()))
        .collect();
    let background = generate_cell(&others, 900.0, 91).unwrap();
    let cell = merge_traces(&[session, background]).unwrap();
    let captured = apply_capture(&cell, &CaptureConfig::new(0.1, 92)).unwrap();

    let opts = ScanOptions {
        burst_gap_ms: Some(DEFAULT_BURST_GAP_MS),
        ..ScanOptions::default()
    };
    let tracked = track_target(&captured, target, model(), W, &opts).unwrap();
    assert_eq!(tracked.status, TrackStatus::Seen);
    let a = &tracked.report.rntis[&target];
    assert_eq!(a.timeline.len(), 1, "{:?}", a.timeline);
    assert_eq!(a.timeline[0].label, AppLabel::from("Netflix"));
    let last = captured.records.iter().filter(|r| r.rnti == target).map(|r| r.t_ms).max().unwrap();
    assert_eq!(a.presence.last().unwrap().1, last);
    assert_eq!(a.last_seen_ms, last);
    assert!(last <= 600_000);

    // Tracking is the cell scan restricted to one RNTI.
    let full = cell_scan_with(&captured, model(), W, &opts).unwrap();
    assert_eq!(&full.rntis[&target], a);

    let absent = track_target(&captured, Rnti(0x0BAD), model(), W, &opts).unwrap();
    assert_eq!(absent.status, TrackStatus::NotSeen);
    assert!(absent.report.rntis.is_empty());
}
