//! Files on disk through the parsers and writers.

use grassmap_core::detector::{DetectorBackend, FrameRequest, ReplayDetector};
use grassmap_core::ingest::{load_manifest, parse_detection_log, parse_gps_track, write_detection_log};
use grassmap_core::synth::synthetic_run;

#[test]
fn replay_composed_with_writer_is_identity() {
    let run = synthetic_run(45, (64, 48), 8);
    let dir = tempfile::tempdir().unwrap();
    let paths = run.write_to(dir.path()).unwrap();
    let manifest = load_manifest(&paths.manifest).unwrap();
    let mut replay = ReplayDetector::from_log(&paths.detections, &manifest).unwrap();
    let frames: Vec<_> = manifest
        .entries
        .iter()
        .map(|e| replay.detect(&FrameRequest::from(e)).unwrap())
        .collect();
    let original = std::fs::read_to_string(&paths.detections).unwrap();
    assert_eq!(write_detection_log(&frames), original);
    assert!(replay.deterministic());
}

#[test]
fn header_line_and_gaps_from_disk() {
    let run = synthetic_run(5, (16, 16), 1);
    let dir = tempfile::tempdir().unwrap();
    let paths = run.write_to(dir.path()).unwrap();
    let body = std::fs::read_to_string(&paths.detections).unwrap();
    let kept: Vec<&str> = body
        .lines()
        .enumerate()
        .filter(|(k, _)| k % 2 == 0)
        .map(|(_, l)| l)
        .collect();
    let text = format!(
        "{{\"meta\":{{\"imgsz\":640,\"letterbox\":true}}}}\n{}\n",
        kept.join("\n")
    );
    std::fs::write(&paths.detections, text).unwrap();
    let frames = parse_detection_log(&paths.detections, &run.manifest).unwrap();
    assert_eq!(frames.len(), 5);
    assert_eq!(frames[0], run.detections[0]);
    assert!(frames[1].detections.is_empty());
    assert_eq!(frames[4], run.detections[4]);
    assert_eq!(parse_gps_track(&paths.gps).unwrap(), run.track);
}
