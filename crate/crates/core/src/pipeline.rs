//! Staged frame pipeline: ingest -> detect -> render -> map.
//!
//! Stages run on their own threads, joined by bounded FIFO channels. A full
//! channel blocks its producer, and frames leave in the order they entered.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};

use crate::augment::load_png;
use crate::density::{encode_ppm, frame_density_summary, overlay_file_name, rasterize, render_overlay, DensitySummary};
use crate::detector::{DetectorBackend, FrameRequest};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::geomap::{interpolate_fix, DensityGrid, LocalProjection};
use crate::ingest::{FrameManifest, GeoTrack};
use crate::model::{filter_by_confidence, DetectionFrame, DEFAULT_CONFIDENCE};

pub const DEFAULT_CHANNEL_CAPACITY: usize = 16;

/// Where the overlay base image comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BaseImage {
    /// A solid canvas of the manifest's image size.
    Blank([u8; 3]),
    /// The PNG referenced by each manifest entry.
    FromManifest,
}

#[derive(Debug, Clone)]
pub struct GeoConfig {
    pub track: GeoTrack,
    pub cell_size_m: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub confidence: f64,
    pub channel_capacity: usize,
    pub base: BaseImage,
    /// Rendered overlays are written here as `frame_%06d.ppm` when set.
    pub overlay_dir: Option<PathBuf>,
    pub geo: Option<GeoConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            confidence: DEFAULT_CONFIDENCE,
            channel_capacity: DEFAULT_CHANNEL_CAPACITY,
            base: BaseImage::Blank([0, 0, 0]),
            overlay_dir: None,
            geo: None,
        }
    }
}

/// Busy time per stage, excluding time spent blocked on channels.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub ingest: Duration,
    pub detect: Duration,
    pub render: Duration,
    pub map: Duration,
}

impl StageTimings {
    pub fn as_secs_map(&self) -> BTreeMap<String, f64> {
        [
            ("ingest", self.ingest),
            ("detect", self.detect),
            ("render", self.render),
            ("map", self.map),
        ]
        .into_iter()
        .map(|(k, d)| (k.to_string(), d.as_secs_f64()))
        .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Detections after confidence filtering, in manifest order.
    pub frames: Vec<DetectionFrame>,
    pub summaries: Vec<DensitySummary>,
    pub grid: Option<DensityGrid>,
    pub timings: StageTimings,
}

struct Ingested {
    request: FrameRequest,
    base: RgbImage,
}

struct Detected {
    frame: DetectionFrame,
    base: RgbImage,
}

fn timed<T>(busy: &mut Duration, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *busy += start.elapsed();
    out
}

fn ingest_stage(manifest: &FrameManifest, base: &BaseImage, tx: SyncSender<Ingested>) -> Result<Duration> {
    let mut busy = Duration::ZERO;
    let (w, h) = manifest.image_size;
    for entry in &manifest.entries {
        let item = timed(&mut busy, || -> Result<Ingested> {
            let base = match base {
                BaseImage::Blank(rgb) => RgbImage::from_pixel(w, h, Rgb(*rgb)),
                BaseImage::FromManifest => load_png(&entry.image_path)?,
            };
            Ok(Ingested {
                request: FrameRequest::from(entry),
                base,
            })
        })?;
        if tx.send(item).is_err() {
            break;
        }
    }
    Ok(busy)
}

fn detect_stage(
    backend: &mut dyn DetectorBackend,
    confidence: f64,
    rx: Receiver<Ingested>,
    tx: SyncSender<Detected>,
) -> Result<Duration> {
    let mut busy = Duration::ZERO;
    for Ingested { request, base } in rx {
        let frame = timed(&mut busy, || {
            backend.detect(&request).map(|f| filter_by_confidence(&f, confidence))
        })?;
        if tx.send(Detected { frame, base }).is_err() {
            break;
        }
    }
    Ok(busy)
}

fn render_stage(
    image_size: (u32, u32),
    overlay_dir: Option<&PathBuf>,
    rx: Receiver<Detected>,
    tx: SyncSender<(DetectionFrame, DensitySummary)>,
) -> Result<Duration> {
    let mut busy = Duration::ZERO;
    for Detected { frame, base } in rx {
        let summary = timed(&mut busy, || -> Result<DensitySummary> {
            let summary = frame_density_summary(&frame);
            let layer = render_overlay(&frame, image_size)?;
            let raster = rasterize(&base, &layer)?;
            if let Some(dir) = overlay_dir {
                write_atomic(dir.join(overlay_file_name(frame.frame_index)), &encode_ppm(&raster))?;
            }
            Ok(summary)
        })?;
        if tx.send((frame, summary)).is_err() {
            break;
        }
    }
    Ok(busy)
}

type MapResult = (Vec<DetectionFrame>, Vec<DensitySummary>, Option<DensityGrid>, Duration);

fn map_stage(geo: Option<&GeoConfig>, rx: Receiver<(DetectionFrame, DensitySummary)>) -> Result<MapResult> {
    let mut busy = Duration::ZERO;
    let mut grid = match geo {
        Some(g) => {
            let origin = g.track.fixes()[0];
            let projection = LocalProjection::new(origin.lat_deg, origin.lon_deg)?;
            Some((&g.track, DensityGrid::new(projection, g.cell_size_m)?))
        }
        None => None,
    };
    let mut frames = Vec::new();
    let mut summaries = Vec::new();
    for (frame, summary) in rx {
        timed(&mut busy, || -> Result<()> {
            if let Some((track, grid)) = grid.as_mut() {
                let fix = interpolate_fix(track, frame.timestamp_ms)?;
                grid.accumulate(&fix, &frame);
            }
            Ok(())
        })?;
        frames.push(frame);
        summaries.push(summary);
    }
    Ok((frames, summaries, grid.map(|(_, g)| g), busy))
}

fn join<T>(handle: thread::ScopedJoinHandle<'_, Result<T>>, stage: &'static str) -> Result<T> {
    handle.join().map_err(|_| Error::StagePanicked(stage))?
}

/// Runs every manifest frame through the stages. The first error in stage
/// order wins; downstream stages stop as soon as their input closes.
pub fn run_pipeline(
    manifest: &FrameManifest,
    backend: &mut dyn DetectorBackend,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    if !(0.0..=1.0).contains(&config.confidence) {
        return Err(Error::InvalidParam(format!(
            "confidence {} outside [0, 1]",
            config.confidence
        )));
    }
    if config.channel_capacity == 0 {
        return Err(Error::InvalidParam("channel capacity must be positive".into()));
    }
    let cap = config.channel_capacity;
    let (ingest_tx, ingest_rx) = sync_channel(cap);
    let (detect_tx, detect_rx) = sync_channel(cap);
    let (render_tx, render_rx) = sync_channel(cap);

    thread::scope(|s| {
        let ingest = s.spawn(|| ingest_stage(manifest, &config.base, ingest_tx));
        let detect = s.spawn(|| detect_stage(backend, config.confidence, ingest_rx, detect_tx));
        let render = s.spawn(|| render_stage(manifest.image_size, config.overlay_dir.as_ref(), detect_rx, render_tx));
        let map = s.spawn(|| map_stage(config.geo.as_ref(), render_rx));

        let ingest = join(ingest, "ingest");
        let detect = join(detect, "detect");
        let render = join(render, "render");
        let map = join(map, "map");
        let timings = StageTimings {
            ingest: ingest?,
            detect: detect?,
            render: render?,
            map: Duration::ZERO,
        };
        let (frames, summaries, grid, map_busy) = map?;
        if frames.len() != manifest.len() {
            return Err(Error::FrameSetMismatch(format!(
                "pipeline emitted {} of {} frames",
                frames.len(),
                manifest.len()
            )));
        }
        Ok(PipelineOutput {
            frames,
            summaries,
            grid,
            timings: StageTimings {
                map: map_busy,
                ..timings
            },
        })
    })
}
