//! Repeated wall-clock timing of full pipeline passes, and the frames-with-detections count.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{filter_by_confidence, DetectionFrame};

pub const DEFAULT_REPEATS: usize = 3;

/// Runs `pass` `warmup` times untimed, then `repeats` times timed, sequentially.
/// Returns the duration of each timed run in seconds. A failure aborts with the
/// 1-based index of the failing timed run.
pub fn time_runs<F, E>(repeats: usize, warmup: usize, mut pass: F) -> Result<Vec<f64>>
where
    F: FnMut() -> std::result::Result<(), E>,
    E: Display,
{
    if repeats == 0 {
        return Err(Error::InvalidParam("repeats must be at least 1".into()));
    }
    for _ in 0..warmup {
        pass().map_err(|e| Error::RunFailed {
            run: 0,
            message: format!("warm-up: {e}"),
        })?;
    }
    let mut runs = Vec::with_capacity(repeats);
    for run in 1..=repeats {
        let start = Instant::now();
        pass().map_err(|e| Error::RunFailed {
            run,
            message: e.to_string(),
        })?;
        runs.push(start.elapsed().as_secs_f64());
    }
    Ok(runs)
}

/// Arithmetic mean of the run durations.
pub fn aggregate(runs: &[f64]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::EmptyRuns);
    }
    Ok(runs.iter().sum::<f64>() / runs.len() as f64)
}

/// Rounds half up to two decimals. The small bias absorbs binary representation
/// error on exact halves such as 0.125.
pub fn round_half_up_2(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-9).floor() / 100.0
}

pub fn present_2dp(x: f64) -> String {
    format!("{:.2}", round_half_up_2(x))
}

pub fn frames_with_detections(frames: &[DetectionFrame], confidence: f64) -> usize {
    frames
        .iter()
        .filter(|f| !filter_by_confidence(f, confidence).detections.is_empty())
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    #[serde(rename = "model")]
    pub model_label: String,
    #[serde(rename = "runs_s")]
    pub runs: Vec<f64>,
    pub mean_s: f64,
    pub fps: f64,
    #[serde(rename = "frames")]
    pub frame_count: usize,
    pub frames_with_detections: usize,
    pub confidence: f64,
    /// Mean busy seconds per pipeline stage across runs.
    #[serde(rename = "stages_s", skip_serializing_if = "BTreeMap::is_empty")]
    pub stage_means: BTreeMap<String, f64>,
}

impl BenchmarkReport {
    pub fn new(
        model_label: impl Into<String>,
        runs: Vec<f64>,
        frame_count: usize,
        frames_with_detections: usize,
        confidence: f64,
    ) -> Result<Self> {
        let mean_s = aggregate(&runs)?;
        if frames_with_detections > frame_count {
            return Err(Error::InvalidParam(format!(
                "{frames_with_detections} frames with detections exceeds {frame_count} frames"
            )));
        }
        Ok(Self {
            model_label: model_label.into(),
            runs,
            mean_s,
            fps: if mean_s > 0.0 { frame_count as f64 / mean_s } else { 0.0 },
            frame_count,
            frames_with_detections,
            confidence,
            stage_means: BTreeMap::new(),
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, Detection, WeedClass};
    use proptest::prelude::*;
    use std::time::Duration;

    fn frame_with(confs: &[f64]) -> DetectionFrame {
        DetectionFrame {
            frame_index: 0,
            timestamp_ms: 0,
            detections: confs
                .iter()
                .map(|&c| Detection {
                    bbox: BoundingBox::full(),
                    cls: WeedClass::High,
                    confidence: c,
                })
                .collect(),
        }
    }

    #[test]
    fn table_means() {
        assert_eq!(present_2dp(aggregate(&[82.98, 86.25, 82.69]).unwrap()), "83.97");
        assert_eq!(present_2dp(aggregate(&[229.71, 223.75, 217.93]).unwrap()), "223.80");
        assert_eq!(present_2dp(aggregate(&[2.0]).unwrap()), "2.00");
        assert!(matches!(aggregate(&[]), Err(Error::EmptyRuns)));
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(present_2dp(0.125), "0.13");
        assert_eq!(present_2dp(1.005), "1.01");
        assert_eq!(present_2dp(2.344), "2.34");
    }

    #[test]
    fn stub_pipeline_timing() {
        let runs = time_runs(2, 0, || -> std::result::Result<(), String> {
            for _ in 0..10 {
                std::thread::sleep(Duration::from_millis(10));
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(runs.len(), 2);
        assert!(runs.iter().all(|&r| (0.1..=0.2).contains(&r)), "{runs:?}");

        assert_eq!(time_runs(1, 0, || Ok::<(), String>(())).unwrap().len(), 1);
        assert!(time_runs(0, 0, || Ok::<(), String>(())).is_err());
    }

    #[test]
    fn failing_run_is_named() {
        let mut n = 0;
        let err = time_runs(3, 0, || {
            n += 1;
            if n == 2 {
                Err("boom")
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::RunFailed { run: 2, .. }));
    }

    #[test]
    fn frames_with_detections_examples() {
        let frames = vec![frame_with(&[0.8]), frame_with(&[0.6]), frame_with(&[])];
        assert_eq!(frames_with_detections(&frames, 0.7), 1);
        assert_eq!(frames_with_detections(&[], 0.7), 0);
        assert_eq!(frames_with_detections(&[frame_with(&[0.7])], 0.7), 1);
    }

    #[test]
    fn report_json_fields() {
        let r = BenchmarkReport::new("replay", vec![0.5, 1.5], 30, 12, 0.7).unwrap();
        assert_eq!(r.fps, 30.0);
        let v: serde_json::Value = serde_json::from_str(&r.to_json_string()).unwrap();
        for key in [
            "model",
            "runs_s",
            "mean_s",
            "fps",
            "frames",
            "frames_with_detections",
            "confidence",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v.get("stages_s").is_none());
        assert!(BenchmarkReport::new("x", vec![1.0], 3, 4, 0.7).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_bounded_and_permutation_invariant(runs in prop::collection::vec(0.0..500.0f64, 1..10)) {
            let m = aggregate(&runs).unwrap();
            let lo = runs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = runs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
            let mut rev = runs.clone();
            rev.reverse();
            prop_assert!((aggregate(&rev).unwrap() - m).abs() < 1e-9);
        }

        #[test]
        fn fwd_monotone(confs in prop::collection::vec(prop::collection::vec(0.0..=1.0f64, 0..4), 0..20),
                        a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let frames: Vec<_> = confs.iter().map(|c| frame_with(c)).collect();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(frames_with_detections(&frames, hi) <= frames_with_detections(&frames, lo));
        }

        #[test]
        fn fps_times_mean_is_frames(runs in prop::collection::vec(0.01..10.0f64, 1..5), n in 0usize..1000) {
            let r = BenchmarkReport::new("m", runs, n, 0, 0.7).unwrap();
            prop_assert!((r.fps * r.mean_s - n as f64).abs() < 1e-9 * (n as f64).max(1.0));
        }
    }
}
