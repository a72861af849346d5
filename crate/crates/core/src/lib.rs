//! Weed detection post-processing, density mapping, evaluation and dataset tooling.
//!
//! Detections arrive from a [`detector::DetectorBackend`], are filtered by
//! confidence, summarised per frame, rendered as overlays and binned onto a
//! ground-plane grid using GPS. The neural model itself stays outside this crate.

pub mod augment;
pub mod bench;
pub mod density;
pub mod detector;
pub mod error;
pub mod eval;
mod fsio;
pub mod geomap;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use fsio::write_atomic;
pub use model::{
    filter_by_confidence, iou, nms, union_area, BoundingBox, ClassCounts, Detection, DetectionFrame, LabeledBox,
    WeedClass, DEFAULT_CONFIDENCE, DEFAULT_NMS_IOU,
};

/// Raster types used in the public API.
pub use image;
