//! Deterministic synthetic inputs for tests, benchmarks and demos.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fsio::write_atomic;
use crate::ingest::{write_detection_log, FrameEntry, FrameManifest, GeoFix, GeoTrack};
use crate::model::{BoundingBox, Detection, DetectionFrame, WeedClass};

#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub manifest: FrameManifest,
    pub detections: Vec<DetectionFrame>,
    pub track: GeoTrack,
}

pub fn random_box(rng: &mut impl Rng) -> BoundingBox {
    let (a, b) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let (c, d) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    BoundingBox::new(f64::min(a, b), f64::min(c, d), f64::max(a, b), f64::max(c, d)).expect("ordered corners")
}

pub fn random_class(rng: &mut impl Rng) -> WeedClass {
    WeedClass::ALL[rng.gen_range(0..WeedClass::ALL.len())]
}

/// A 30 fps capture of `frames` frames with up to four detections each, and a
/// GPS track at 1 Hz moving roughly north at walking pace and covering every frame.
pub fn synthetic_run(frames: u64, image_size: (u32, u32), seed: u64) -> SyntheticRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<FrameEntry> = (0..frames)
        .map(|i| FrameEntry {
            frame_index: i,
            timestamp_ms: i * 1000 / 30,
            image_path: PathBuf::from(format!("frames/{i:06}.png")),
        })
        .collect();
    let detections = entries
        .iter()
        .map(|e| DetectionFrame {
            frame_index: e.frame_index,
            timestamp_ms: e.timestamp_ms,
            detections: (0..rng.gen_range(0..=4))
                .map(|_| Detection {
                    bbox: random_box(&mut rng),
                    cls: random_class(&mut rng),
                    confidence: rng.gen_range(0.3..=1.0),
                })
                .collect(),
        })
        .collect();

    let last_ms = entries.last().map_or(0, |e| e.timestamp_ms);
    let (lat0, lon0) = (52.0 + rng.gen_range(-0.01..0.01), -0.5 + rng.gen_range(-0.01..0.01));
    let fixes = (0..=last_ms / 1000 + 1)
        .map(|s| {
            let lat = lat0 + s as f64 * 9.0e-6;
            let lon = lon0 + rng.gen_range(-2.0e-6..2.0e-6);
            GeoFix::new(s * 1000, lat, lon).expect("synthetic fix in range")
        })
        .collect();

    SyntheticRun {
        manifest: FrameManifest::new(image_size, entries).expect("synthetic manifest is valid"),
        detections,
        track: GeoTrack::new(fixes).expect("synthetic track is valid"),
    }
}

/// File locations written by [`SyntheticRun::write_to`].
#[derive(Debug, Clone)]
pub struct SyntheticPaths {
    pub manifest: PathBuf,
    pub detections: PathBuf,
    pub gps: PathBuf,
}

impl SyntheticRun {
    pub fn write_to(&self, dir: &Path) -> Result<SyntheticPaths> {
        let paths = SyntheticPaths {
            manifest: dir.join("manifest.json"),
            detections: dir.join("detections.jsonl"),
            gps: dir.join("gps.csv"),
        };
        write_atomic(&paths.manifest, self.manifest.to_json_string().as_bytes())?;
        write_atomic(&paths.detections, write_detection_log(&self.detections).as_bytes())?;
        write_atomic(&paths.gps, self.track.to_csv_string().as_bytes())?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomap::interpolate_fix;
    use crate::ingest::{load_manifest, parse_detection_log, parse_gps_track};

    #[test]
    fn deterministic_and_covering() {
        let a = synthetic_run(150, (64, 48), 3);
        let b = synthetic_run(150, (64, 48), 3);
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.track, b.track);
        assert_eq!(a.manifest.entries.last().unwrap().timestamp_ms, 4966);
        for e in &a.manifest.entries {
            interpolate_fix(&a.track, e.timestamp_ms).unwrap();
        }
    }

    #[test]
    fn written_files_parse_back() {
        let run = synthetic_run(20, (16, 16), 1);
        let dir = tempfile::tempdir().unwrap();
        let paths = run.write_to(dir.path()).unwrap();
        let manifest = load_manifest(&paths.manifest).unwrap();
        assert_eq!(manifest, run.manifest);
        assert_eq!(
            parse_detection_log(&paths.detections, &manifest).unwrap(),
            run.detections
        );
        assert_eq!(
            parse_gps_track(&paths.gps).unwrap().fixes().len(),
            run.track.fixes().len()
        );
    }
}
