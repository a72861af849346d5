//! On-disk inputs: frame manifests, interchange detection logs and GPS tracks.
//!
//! The detection log is newline-delimited JSON, one object per frame:
//!
//! ```text
//! {"i":0,"t_ms":0,"boxes":[{"cls":"low","conf":0.91,"xyxy":[0.1,0.2,0.3,0.4]}]}
//! ```
//!
//! Ground-truth files use the same layout with `conf` omitted. A leading
//! object carrying a `meta` key and no `i` is treated as a header and skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruthFrame;
use crate::model::{BoundingBox, Detection, DetectionFrame, LabeledBox, WeedClass};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEntry {
    #[serde(rename = "i")]
    pub frame_index: u64,
    #[serde(rename = "t_ms")]
    pub timestamp_ms: u64,
    #[serde(rename = "path")]
    pub image_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameManifest {
    /// `(width_px, height_px)`.
    pub image_size: (u32, u32),
    #[serde(rename = "frames")]
    pub entries: Vec<FrameEntry>,
}

impl FrameManifest {
    pub fn new(image_size: (u32, u32), entries: Vec<FrameEntry>) -> Result<Self> {
        let m = Self { image_size, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: FrameManifest = serde_json::from_str(s).map_err(|e| Error::schema("frame manifest", e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::schema(
                "frame manifest",
                format!("image_size {:?} must be positive", self.image_size),
            ));
        }
        for w in self.entries.windows(2) {
            if w[1].frame_index <= w[0].frame_index {
                return Err(Error::Ordering(format!(
                    "frame index {} follows {}",
                    w[1].frame_index, w[0].frame_index
                )));
            }
            if w[1].timestamp_ms < w[0].timestamp_ms {
                return Err(Error::Ordering(format!(
                    "timestamp of frame {} goes backwards ({} < {})",
                    w[1].frame_index, w[1].timestamp_ms, w[0].timestamp_ms
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, frame_index: u64) -> Option<&FrameEntry> {
        self.entries
            .binary_search_by_key(&frame_index, |e| e.frame_index)
            .ok()
            .map(|pos| &self.entries[pos])
    }

    /// Joins relative image paths onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for e in &mut self.entries {
            if e.image_path.is_relative() {
                e.image_path = base.join(&e.image_path);
            }
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<FrameManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FrameManifest::from_json_str(&text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogBox {
    cls: WeedClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conf: Option<f64>,
    xyxy: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogLine {
    i: u64,
    t_ms: u64,
    boxes: Vec<LogBox>,
}

/// One decoded log line with its 1-based line number.
struct Record {
    line: usize,
    frame_index: u64,
    timestamp_ms: u64,
    boxes: Vec<(LabeledBox, Option<f64>)>,
}

fn parse_line(line_no: usize, text: &str) -> Result<Option<Record>> {
    let malformed = |message: String| Error::MalformedLine { line: line_no, message };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    if value.get("meta").is_some() && value.get("i").is_none() {
        return Ok(None);
    }
    let raw: LogLine = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    let mut boxes = Vec::with_capacity(raw.boxes.len());
    for b in raw.boxes {
        let [x0, y0, x1, y1] = b.xyxy;
        let bbox = BoundingBox::new(x0, y0, x1, y1).map_err(|_| Error::Coordinate {
            line: line_no,
            coords: b.xyxy,
        })?;
        if let Some(c) = b.conf {
            if !(0.0..=1.0).contains(&c) {
                return Err(malformed(format!("confidence {c} not in [0, 1]")));
            }
        }
        boxes.push((LabeledBox { bbox, cls: b.cls }, b.conf));
    }
    Ok(Some(Record {
        line: line_no,
        frame_index: raw.i,
        timestamp_ms: raw.t_ms,
        boxes,
    }))
}

/// Decodes every line and aligns records with the manifest. Returns one slot per
/// manifest entry, `None` where the log has no line for that frame.
fn align_records(text: &str, manifest: &FrameManifest) -> Result<Vec<Option<Record>>> {
    let positions: BTreeMap<u64, usize> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(pos, e)| (e.frame_index, pos))
        .collect();
    let mut slots: Vec<Option<Record>> = (0..manifest.len()).map(|_| None).collect();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some(rec) = parse_line(line_no, line)? else {
            continue;
        };
        let pos = *positions.get(&rec.frame_index).ok_or(Error::UnknownFrame {
            line: line_no,
            index: rec.frame_index,
        })?;
        if slots[pos].is_some() {
            return Err(Error::MalformedLine {
                line: line_no,
                message: format!("duplicate record for frame {}", rec.frame_index),
            });
        }
        slots[pos] = Some(rec);
    }
    Ok(slots)
}

/// Parses an interchange detection log against `manifest`. The result has one
/// frame per manifest entry, in manifest order; frames missing from the log
/// are empty. Timestamps come from the manifest.
pub fn parse_detection_log_str(text: &str, manifest: &FrameManifest) -> Result<Vec<DetectionFrame>> {
    let slots = align_records(text, manifest)?;
    manifest
        .entries
        .iter()
        .zip(slots)
        .map(|(entry, slot)| {
            let mut frame = DetectionFrame::empty(entry.frame_index, entry.timestamp_ms);
            if let Some(rec) = slot {
                for (lb, conf) in rec.boxes {
                    let confidence = conf.ok_or_else(|| Error::MalformedLine {
                        line: rec.line,
                        message: "detection is missing `conf`".into(),
                    })?;
                    frame.detections.push(Detection {
                        bbox: lb.bbox,
                        cls: lb.cls,
                        confidence,
                    });
                }
            }
            Ok(frame)
        })
        .collect()
}

pub fn parse_detection_log(path: impl AsRef<Path>, manifest: &FrameManifest) -> Result<Vec<DetectionFrame>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detection_log_str(&text, manifest)
}

/// Parses a single detection-log line, e.g. a runner response.
pub fn parse_detection_line(text: &str) -> Result<DetectionFrame> {
    let rec = parse_line(1, text)?.ok_or_else(|| Error::MalformedLine {
        line: 1,
        message: "header line where a frame was expected".into(),
    })?;
    let mut frame = DetectionFrame::empty(rec.frame_index, rec.timestamp_ms);
    for (lb, conf) in rec.boxes {
        let confidence = conf.ok_or_else(|| Error::MalformedLine {
            line: 1,
            message: "detection is missing `conf`".into(),
        })?;
        frame.detections.push(Detection {
            bbox: lb.bbox,
            cls: lb.cls,
            confidence,
        });
    }
    Ok(frame)
}

/// Ground-truth variant of [`parse_detection_log_str`]; any `conf` present is ignored.
pub fn parse_ground_truth_log_str(text: &str, manifest: &FrameManifest) -> Result<Vec<GroundTruthFrame>> {
    let slots = align_records(text, manifest)?;
    Ok(manifest
        .entries
        .iter()
        .zip(slots)
        .map(|(entry, slot)| GroundTruthFrame {
            frame_index: entry.frame_index,
            boxes: slot
                .map(|r| r.boxes.into_iter().map(|(lb, _)| lb).collect())
                .unwrap_or_default(),
        })
        .collect())
}

pub fn parse_ground_truth_log(path: impl AsRef<Path>, manifest: &FrameManifest) -> Result<Vec<GroundTruthFrame>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth_log_str(&text, manifest)
}

pub fn detection_line(frame: &DetectionFrame) -> String {
    let line = LogLine {
        i: frame.frame_index,
        t_ms: frame.timestamp_ms,
        boxes: frame
            .detections
            .iter()
            .map(|d| LogBox {
                cls: d.cls,
                conf: Some(d.confidence),
                xyxy: d.bbox.to_array(),
            })
            .collect(),
    };
    serde_json::to_string(&line).expect("log line serializes")
}

/// Serializes frames as a detection log, one line per frame including empty ones.
pub fn write_detection_log(frames: &[DetectionFrame]) -> String {
    frames.iter().map(|f| detection_line(f) + "\n").collect()
}

/// Annotation lines with `conf` omitted, from `(frame index, t_ms, boxes)` records.
pub fn write_annotation_log<'a>(records: impl IntoIterator<Item = (u64, u64, &'a [LabeledBox])>) -> String {
    let mut out = String::new();
    for (i, t_ms, boxes) in records {
        let line = LogLine {
            i,
            t_ms,
            boxes: boxes
                .iter()
                .map(|b| LogBox {
                    cls: b.cls,
                    conf: None,
                    xyxy: b.bbox.to_array(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("log line serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoFix {
    #[serde(rename = "t_ms")]
    pub timestamp_ms: u64,
    #[serde(rename = "lat")]
    pub lat_deg: f64,
    #[serde(rename = "lon")]
    pub lon_deg: f64,
}

impl GeoFix {
    pub fn new(timestamp_ms: u64, lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat_deg) || !(-180.0..=180.0).contains(&lon_deg) {
            return Err(Error::Range(format!(
                "fix at {timestamp_ms} ms has lat/lon ({lat_deg}, {lon_deg}) out of range"
            )));
        }
        Ok(Self {
            timestamp_ms,
            lat_deg,
            lon_deg,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoTrack {
    fixes: Vec<GeoFix>,
}

impl GeoTrack {
    pub fn new(fixes: Vec<GeoFix>) -> Result<Self> {
        for f in &fixes {
            GeoFix::new(f.timestamp_ms, f.lat_deg, f.lon_deg)?;
        }
        for w in fixes.windows(2) {
            if w[1].timestamp_ms <= w[0].timestamp_ms {
                return Err(Error::Ordering(format!(
                    "GPS timestamp {} does not increase past {}",
                    w[1].timestamp_ms, w[0].timestamp_ms
                )));
            }
        }
        if fixes.len() < 2 {
            return Err(Error::TooFewFixes(fixes.len()));
        }
        Ok(Self { fixes })
    }

    pub fn fixes(&self) -> &[GeoFix] {
        &self.fixes
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::schema("GPS track", e))?;
        if headers.iter().collect::<Vec<_>>() != ["t_ms", "lat", "lon"] {
            return Err(Error::schema(
                "GPS track",
                format!(
                    "expected header `t_ms,lat,lon`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        let fixes = reader
            .deserialize::<GeoFix>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::schema("GPS track", e))?;
        GeoTrack::new(fixes)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for f in &self.fixes {
            w.serialize(f).expect("fix serializes");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }
}

pub fn parse_gps_track(path: impl AsRef<Path>) -> Result<GeoTrack> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GeoTrack::from_csv_str(&text)
}
