//! Detection backends.
//!
//! [`ReplayDetector`] re-emits a recorded detection log. [`RunnerDetector`] drives an
//! external process that speaks newline-delimited JSON over stdin/stdout: one request
//! `{"i":..,"t_ms":..,"path":".."}` in, one detection-log line for the same `i` out.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{self, FrameEntry, FrameManifest};
use crate::model::{filter_by_confidence, nms, Detection, DetectionFrame, DEFAULT_NMS_IOU};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrameRequest {
    #[serde(rename = "i")]
    pub frame_index: u64,
    #[serde(rename = "t_ms")]
    pub timestamp_ms: u64,
    #[serde(rename = "path")]
    pub image_path: PathBuf,
}

impl From<&FrameEntry> for FrameRequest {
    fn from(e: &FrameEntry) -> Self {
        Self {
            frame_index: e.frame_index,
            timestamp_ms: e.timestamp_ms,
            image_path: e.image_path.clone(),
        }
    }
}

pub trait DetectorBackend: Send {
    /// Returns the detections for one frame. The result echoes the request's
    /// frame index and timestamp.
    fn detect(&mut self, request: &FrameRequest) -> Result<DetectionFrame>;

    fn deterministic(&self) -> bool;
}

/// Replays a recorded log. Cloning is cheap and clones share the recording.
#[derive(Debug, Clone)]
pub struct ReplayDetector {
    frames: Arc<BTreeMap<u64, Vec<Detection>>>,
}

impl ReplayDetector {
    /// `frames` must already be aligned with the manifest, as produced by
    /// [`ingest::parse_detection_log`].
    pub fn new(frames: Vec<DetectionFrame>) -> Self {
        Self {
            frames: Arc::new(frames.into_iter().map(|f| (f.frame_index, f.detections)).collect()),
        }
    }

    pub fn from_log(path: impl AsRef<Path>, manifest: &FrameManifest) -> Result<Self> {
        Ok(Self::new(ingest::parse_detection_log(path, manifest)?))
    }

    pub fn replay(&self, request: &FrameRequest) -> Result<DetectionFrame> {
        let detections = self
            .frames
            .get(&request.frame_index)
            .ok_or(Error::FrameOutOfRange(request.frame_index))?;
        Ok(DetectionFrame {
            frame_index: request.frame_index,
            timestamp_ms: request.timestamp_ms,
            detections: detections.clone(),
        })
    }
}

impl DetectorBackend for ReplayDetector {
    fn detect(&mut self, request: &FrameRequest) -> Result<DetectionFrame> {
        self.replay(request)
    }

    fn deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunnerConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    /// Appended as the last argument when set.
    pub model_path: Option<PathBuf>,
    pub confidence_floor: f64,
    pub io_timeout_ms: u64,
    pub nms_iou: f64,
}

impl RunnerConfig {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            model_path: None,
            confidence_floor: 0.0,
            io_timeout_ms: 10_000,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.command.is_empty() {
            return Err(Error::InvalidParam("runner command is empty".into()));
        }
        if self.io_timeout_ms == 0 {
            return Err(Error::InvalidParam("io_timeout_ms must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::InvalidParam(format!(
                "confidence_floor {} not in [0, 1]",
                self.confidence_floor
            )));
        }
        Ok(())
    }
}

pub struct RunnerDetector {
    config: RunnerConfig,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    broken: bool,
}

impl RunnerDetector {
    pub fn spawn(config: RunnerConfig) -> Result<Self> {
        config.validate()?;
        let mut cmd = Command::new(&config.command[0]);
        cmd.args(&config.command[1..]);
        if let Some(model) = &config.model_path {
            cmd.arg(model);
        }
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(&config.command[0], e))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");

        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("runner-stdout".into())
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let stop = line.is_err();
                    if tx.send(line).is_err() || stop {
                        break;
                    }
                }
            })
            .map_err(|e| Error::io("runner-stdout thread", e))?;

        Ok(Self {
            config,
            child,
            stdin,
            lines: rx,
            broken: false,
        })
    }

    pub fn is_usable(&self) -> bool {
        !self.broken
    }

    fn exchange(&mut self, request: &FrameRequest) -> Result<String> {
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        if self
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .is_err()
        {
            self.broken = true;
            return Err(Error::RunnerExited);
        }
        match self
            .lines
            .recv_timeout(Duration::from_millis(self.config.io_timeout_ms))
        {
            Ok(Ok(resp)) => Ok(resp),
            Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => {
                self.broken = true;
                Err(Error::RunnerExited)
            }
            Err(RecvTimeoutError::Timeout) => {
                // A late answer would be paired with the next request.
                self.broken = true;
                Err(Error::RunnerTimeout(self.config.io_timeout_ms))
            }
        }
    }
}

impl DetectorBackend for RunnerDetector {
    fn detect(&mut self, request: &FrameRequest) -> Result<DetectionFrame> {
        if self.broken {
            return Err(Error::RunnerUnusable);
        }
        let resp = self.exchange(request)?;
        let frame =
            ingest::parse_detection_line(&resp).map_err(|e| Error::MalformedResponse(format!("{e}: {resp:.200}")))?;
        if frame.frame_index != request.frame_index {
            return Err(Error::MalformedResponse(format!(
                "answered frame {} for request {}",
                frame.frame_index, request.frame_index
            )));
        }
        let suppressed = DetectionFrame {
            frame_index: request.frame_index,
            timestamp_ms: request.timestamp_ms,
            detections: nms(&frame.detections, self.config.nms_iou),
        };
        Ok(filter_by_confidence(&suppressed, self.config.confidence_floor))
    }

    fn deterministic(&self) -> bool {
        false
    }
}

impl Drop for RunnerDetector {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, WeedClass};

    fn request(i: u64) -> FrameRequest {
        FrameRequest {
            frame_index: i,
            timestamp_ms: i * 40,
            image_path: format!("f{i}.png").into(),
        }
    }

    fn sh(script: &str) -> RunnerConfig {
        let mut cfg = RunnerConfig::new(vec!["sh".into(), "-c".into(), script.into()]);
        cfg.io_timeout_ms = 2_000;
        cfg
    }

    #[test]
    fn replay_returns_recorded_boxes() {
        let d = Detection {
            bbox: BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap(),
            cls: WeedClass::Medium,
            confidence: 0.75,
        };
        let mut replay = ReplayDetector::new(vec![
            DetectionFrame {
                frame_index: 0,
                timestamp_ms: 0,
                detections: vec![d],
            },
            DetectionFrame::empty(1, 40),
        ]);
        assert!(replay.deterministic());
        let f = replay.detect(&request(0)).unwrap();
        assert_eq!(f.detections, vec![d]);
        assert!(replay.detect(&request(1)).unwrap().detections.is_empty());
        assert!(matches!(replay.detect(&request(2)), Err(Error::FrameOutOfRange(2))));
    }

    #[test]
    fn runner_round_trip_with_canned_response() {
        // Two overlapping boxes: NMS keeps the stronger one; the floor drops the weak one.
        let canned = r#"{"i":0,"t_ms":0,"boxes":[{"cls":"high","conf":0.9,"xyxy":[0.1,0.1,0.5,0.5]},{"cls":"high","conf":0.85,"xyxy":[0.1,0.1,0.5,0.51]},{"cls":"low","conf":0.2,"xyxy":[0.7,0.7,0.8,0.8]}]}"#;
        let mut cfg = sh(&format!("while read -r l; do echo '{canned}'; done"));
        cfg.confidence_floor = 0.5;
        let mut runner = RunnerDetector::spawn(cfg).unwrap();
        let f = runner.detect(&request(0)).unwrap();
        assert_eq!(f.detections.len(), 1);
        assert_eq!(f.detections[0].confidence, 0.9);
        assert!(!runner.deterministic());
    }

    #[test]
    fn runner_garbage_is_malformed() {
        let mut runner = RunnerDetector::spawn(sh("while read -r l; do echo 'not json'; done")).unwrap();
        assert!(matches!(runner.detect(&request(0)), Err(Error::MalformedResponse(_))));
    }

    #[test]
    fn runner_wrong_index_is_malformed() {
        let mut runner =
            RunnerDetector::spawn(sh(r#"while read -r l; do echo '{"i":5,"t_ms":0,"boxes":[]}'; done"#)).unwrap();
        assert!(matches!(runner.detect(&request(0)), Err(Error::MalformedResponse(_))));
    }

    #[test]
    fn runner_silence_times_out() {
        let mut cfg = sh("while read -r l; do :; done");
        cfg.io_timeout_ms = 150;
        let mut runner = RunnerDetector::spawn(cfg).unwrap();
        let start = std::time::Instant::now();
        assert!(matches!(runner.detect(&request(0)), Err(Error::RunnerTimeout(150))));
        assert!(start.elapsed() >= Duration::from_millis(150));
        assert!(matches!(runner.detect(&request(1)), Err(Error::RunnerUnusable)));
    }

    #[test]
    fn runner_exit_is_reported() {
        let mut runner = RunnerDetector::spawn(sh("read -r l; exit 0")).unwrap();
        assert!(matches!(runner.detect(&request(0)), Err(Error::RunnerExited)));
        assert!(!runner.is_usable());
        assert!(matches!(runner.detect(&request(1)), Err(Error::RunnerUnusable)));
    }

    #[test]
    fn runner_config_is_validated() {
        let mut cfg = sh("cat");
        cfg.io_timeout_ms = 0;
        assert!(RunnerDetector::spawn(cfg).is_err());
        assert!(RunnerDetector::spawn(RunnerConfig::new(vec![])).is_err());
    }
}
