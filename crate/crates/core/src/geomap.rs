//! Offline ground-plane density mapping.
//!
//! Every detection of a frame is attributed to the rover position interpolated
//! from the GPS track at the frame timestamp. Positions are projected onto a
//! local equirectangular plane around a field origin and binned into square cells.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::ingest::{GeoFix, GeoTrack};
use crate::model::{ClassCounts, DetectionFrame, WeedClass};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const DEFAULT_CELL_SIZE_M: f64 = 1.0;

/// Piecewise-linear interpolation of latitude and longitude in time.
pub fn interpolate_fix(track: &GeoTrack, t_ms: u64) -> Result<GeoFix> {
    let fixes = track.fixes();
    let (first, last) = (fixes[0], fixes[fixes.len() - 1]);
    if t_ms < first.timestamp_ms || t_ms > last.timestamp_ms {
        return Err(Error::OutOfSpan {
            t_ms,
            start_ms: first.timestamp_ms,
            end_ms: last.timestamp_ms,
        });
    }
    let hi = match fixes.binary_search_by_key(&t_ms, |f| f.timestamp_ms) {
        Ok(k) => return Ok(fixes[k]),
        Err(k) => k,
    };
    let (a, b) = (fixes[hi - 1], fixes[hi]);
    let w = (t_ms - a.timestamp_ms) as f64 / (b.timestamp_ms - a.timestamp_ms) as f64;
    Ok(GeoFix {
        timestamp_ms: t_ms,
        lat_deg: a.lat_deg + (b.lat_deg - a.lat_deg) * w,
        lon_deg: a.lon_deg + (b.lon_deg - a.lon_deg) * w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalProjection {
    origin_lat_deg: f64,
    origin_lon_deg: f64,
    cos_lat0: f64,
}

impl LocalProjection {
    pub fn new(origin_lat_deg: f64, origin_lon_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&origin_lat_deg) || !(-180.0..=180.0).contains(&origin_lon_deg) {
            return Err(Error::Range(format!(
                "projection origin ({origin_lat_deg}, {origin_lon_deg}) out of range"
            )));
        }
        Ok(Self {
            origin_lat_deg,
            origin_lon_deg,
            cos_lat0: (origin_lat_deg * PI / 180.0).cos(),
        })
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.origin_lat_deg, self.origin_lon_deg)
    }

    /// Metres east (`x`) and north (`y`) of the origin.
    pub fn project(&self, lat_deg: f64, lon_deg: f64) -> (f64, f64) {
        let x = EARTH_RADIUS_M * (lon_deg - self.origin_lon_deg) * PI / 180.0 * self.cos_lat0;
        let y = EARTH_RADIUS_M * (lat_deg - self.origin_lat_deg) * PI / 180.0;
        (x, y)
    }

    /// Returns `(lat_deg, lon_deg)`.
    pub fn inverse_project(&self, x_m: f64, y_m: f64) -> (f64, f64) {
        let lat = self.origin_lat_deg + y_m / EARTH_RADIUS_M * 180.0 / PI;
        let lon = self.origin_lon_deg + x_m / (EARTH_RADIUS_M * self.cos_lat0) * 180.0 / PI;
        (lat, lon)
    }
}

pub fn project(p: &LocalProjection, fix: &GeoFix) -> (f64, f64) {
    p.project(fix.lat_deg, fix.lon_deg)
}

/// Sparse per-class counts over square ground cells. Absent cells are all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    projection: LocalProjection,
    cell_size_m: f64,
    cells: BTreeMap<(i64, i64), ClassCounts>,
}

impl DensityGrid {
    pub fn new(projection: LocalProjection, cell_size_m: f64) -> Result<Self> {
        if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
            return Err(Error::InvalidParam(format!("cell size {cell_size_m} must be positive")));
        }
        Ok(Self {
            projection,
            cell_size_m,
            cells: BTreeMap::new(),
        })
    }

    pub fn projection(&self) -> &LocalProjection {
        &self.projection
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn cells(&self) -> &BTreeMap<(i64, i64), ClassCounts> {
        &self.cells
    }

    pub fn cell_of(&self, fix: &GeoFix) -> (i64, i64) {
        let (x, y) = project(&self.projection, fix);
        (
            (x / self.cell_size_m).floor() as i64,
            (y / self.cell_size_m).floor() as i64,
        )
    }

    /// Adds one count per detection of `frame` to the cell containing `fix`.
    pub fn accumulate(&mut self, fix: &GeoFix, frame: &DetectionFrame) {
        if frame.detections.is_empty() {
            return;
        }
        let counts = self.cells.entry(self.cell_of(fix)).or_default();
        for d in &frame.detections {
            counts.add(d.cls, 1);
        }
    }

    pub fn total(&self) -> u64 {
        self.cells.values().map(ClassCounts::total).sum()
    }

    /// Lat/lon of a cell corner `(ix, iy)` in cell units.
    fn corner(&self, ix: f64, iy: f64) -> (f64, f64) {
        self.projection
            .inverse_project(ix * self.cell_size_m, iy * self.cell_size_m)
    }
}

fn counts_properties(counts: &ClassCounts) -> serde_json::Map<String, Value> {
    let mut props = serde_json::Map::new();
    for c in WeedClass::ALL {
        props.insert(c.name().into(), json!(counts.get(c)));
    }
    props.insert("total".into(), json!(counts.total()));
    props.insert(
        "dominant".into(),
        counts.dominant().map_or(Value::Null, |c| json!(c.name())),
    );
    props
}

/// RFC 7946 FeatureCollection, one polygon per non-empty cell, `[lon, lat]` order.
pub fn export_geojson(grid: &DensityGrid) -> Value {
    let features: Vec<Value> = grid
        .cells
        .iter()
        .filter(|(_, c)| c.total() > 0)
        .map(|(&(ix, iy), counts)| {
            let (x0, y0) = (ix as f64, iy as f64);
            // Counter-clockwise exterior ring, closed.
            let ring: Vec<Value> = [(x0, y0), (x0 + 1.0, y0), (x0 + 1.0, y0 + 1.0), (x0, y0 + 1.0), (x0, y0)]
                .iter()
                .map(|&(cx, cy)| {
                    let (lat, lon) = grid.corner(cx, cy);
                    json!([lon, lat])
                })
                .collect();
            let mut props = counts_properties(counts);
            props.insert("ix".into(), json!(ix));
            props.insert("iy".into(), json!(iy));
            json!({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": props,
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

/// One row per non-empty cell; `lat`/`lon` locate the cell centre.
pub fn export_csv(grid: &DensityGrid) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["ix", "iy", "lat", "lon", "low", "medium", "high", "seedling", "total"])
        .expect("in-memory write");
    for (&(ix, iy), counts) in grid.cells.iter().filter(|(_, c)| c.total() > 0) {
        let (lat, lon) = grid.corner(ix as f64 + 0.5, iy as f64 + 0.5);
        w.write_record([
            ix.to_string(),
            iy.to_string(),
            lat.to_string(),
            lon.to_string(),
            counts.get(WeedClass::Low).to_string(),
            counts.get(WeedClass::Medium).to_string(),
            counts.get(WeedClass::High).to_string(),
            counts.get(WeedClass::Seedling).to_string(),
            counts.total().to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, Detection};
    use proptest::prelude::*;

    fn track() -> GeoTrack {
        GeoTrack::new(vec![
            GeoFix::new(0, 52.0, -1.0).unwrap(),
            GeoFix::new(1000, 52.0002, -1.0004).unwrap(),
            GeoFix::new(3000, 52.0004, -1.0004).unwrap(),
        ])
        .unwrap()
    }

    fn frame(classes: &[WeedClass]) -> DetectionFrame {
        DetectionFrame {
            frame_index: 0,
            timestamp_ms: 0,
            detections: classes
                .iter()
                .map(|&cls| Detection {
                    bbox: BoundingBox::full(),
                    cls,
                    confidence: 0.9,
                })
                .collect(),
        }
    }

    #[test]
    fn interpolation_examples() {
        let t = track();
        assert_eq!(interpolate_fix(&t, 1000).unwrap(), t.fixes()[1]);
        let mid = interpolate_fix(&t, 500).unwrap();
        assert!((mid.lat_deg - 52.0001).abs() < 1e-12);
        assert!((mid.lon_deg + 1.0002).abs() < 1e-12);
        assert!(matches!(
            interpolate_fix(&t, 3001),
            Err(Error::OutOfSpan { t_ms: 3001, .. })
        ));
        let late = GeoTrack::new(vec![
            GeoFix::new(10, 0.0, 0.0).unwrap(),
            GeoFix::new(20, 1.0, 1.0).unwrap(),
        ])
        .unwrap();
        assert!(interpolate_fix(&late, 5).is_err());
    }

    #[test]
    fn projection_examples() {
        let p = LocalProjection::new(52.0, -1.0).unwrap();
        assert_eq!(p.project(52.0, -1.0), (0.0, 0.0));
        let (_, y) = p.project(52.0 + 1e-5, -1.0);
        let oracle = EARTH_RADIUS_M * 1e-5_f64.to_radians();
        assert!((y - oracle).abs() < 1e-9);
        assert!((y - 1.11195).abs() < 1e-5);

        let p60 = LocalProjection::new(60.0, 10.0).unwrap();
        let (x, _) = p60.project(60.0, 10.0 + 1e-5);
        assert!((x - 0.5 * oracle).abs() < 1e-9);
        assert!((x - 0.55597).abs() < 1e-5);
        assert!(LocalProjection::new(91.0, 0.0).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let p = LocalProjection::new(52.0, -1.0).unwrap();
        let mut g = DensityGrid::new(p, 1.0).unwrap();
        let origin = GeoFix::new(0, 52.0, -1.0).unwrap();
        g.accumulate(&origin, &frame(&[]));
        assert!(g.cells().is_empty());
        g.accumulate(&origin, &frame(&[WeedClass::Low]));
        assert_eq!(g.cells()[&(0, 0)].get(WeedClass::Low), 1);
        // Just south-west of the origin lands in (-1, -1).
        let sw = GeoFix::new(0, 52.0 - 1e-6, -1.0 - 1e-6).unwrap();
        g.accumulate(&sw, &frame(&[WeedClass::High, WeedClass::High]));
        assert_eq!(g.cells()[&(-1, -1)].get(WeedClass::High), 2);
        assert_eq!(g.total(), 3);
        assert!(DensityGrid::new(p, 0.0).is_err());
    }

    #[test]
    fn geojson_shape_and_corner_distances() {
        let p = LocalProjection::new(52.0, -1.0).unwrap();
        let mut g = DensityGrid::new(p, 1.0).unwrap();
        assert_eq!(export_geojson(&g)["features"].as_array().unwrap().len(), 0);

        g.accumulate(
            &GeoFix::new(0, 52.0, -1.0).unwrap(),
            &frame(&[WeedClass::Low, WeedClass::High, WeedClass::High]),
        );
        let doc = export_geojson(&g);
        let feat = &doc["features"][0];
        assert_eq!(feat["properties"]["dominant"], "high");
        assert_eq!(feat["properties"]["total"], 3);
        assert_eq!(feat["properties"]["seedling"], 0);
        let ring = feat["geometry"]["coordinates"][0].as_array().unwrap();
        assert_eq!(ring.len(), 5);
        assert_eq!(ring[0], ring[4]);
        let pt = |k: usize| {
            let c = ring[k].as_array().unwrap();
            p.project(c[1].as_f64().unwrap(), c[0].as_f64().unwrap())
        };
        for k in 0..4 {
            let (a, b) = (pt(k), pt(k + 1));
            let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            assert!((d - 1.0).abs() < 1e-6, "edge {k} is {d} m");
        }

        let csv = export_csv(&g);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "ix,iy,lat,lon,low,medium,high,seedling,total");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!((row[0], row[1], row[4], row[6], row[8]), ("0", "0", "1", "2", "3"));
    }

    proptest! {
        #[test]
        fn projection_round_trip(lat0 in -60.0..60.0f64, lon0 in -170.0..170.0f64,
                                 x in -10_000.0..10_000.0f64, y in -10_000.0..10_000.0f64) {
            let p = LocalProjection::new(lat0, lon0).unwrap();
            let (lat, lon) = p.inverse_project(x, y);
            let (x2, y2) = p.project(lat, lon);
            let scale = x.abs().max(y.abs()).max(1.0);
            prop_assert!((x2 - x).abs() / scale < 1e-9);
            prop_assert!((y2 - y).abs() / scale < 1e-9);
        }

        #[test]
        fn interpolation_monotone(ts in prop::collection::vec(0u64..3000, 2..20)) {
            let t = track();
            let mut ts = ts;
            ts.sort_unstable();
            let lats: Vec<f64> = ts.iter().map(|&s| interpolate_fix(&t, s).unwrap().lat_deg).collect();
            for w in lats.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }

        #[test]
        fn accumulation_order_independent(
            events in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64, prop::collection::vec(0usize..4, 0..4)), 0..30)
        ) {
            let p = LocalProjection::new(52.0, -1.0).unwrap();
            let build = |evs: &[(f64, f64, Vec<usize>)]| {
                let mut g = DensityGrid::new(p, 2.5).unwrap();
                for (x, y, cls) in evs {
                    let (lat, lon) = p.inverse_project(*x, *y);
                    let classes: Vec<WeedClass> = cls.iter().map(|&k| WeedClass::ALL[k]).collect();
                    g.accumulate(&GeoFix::new(0, lat, lon).unwrap(), &frame(&classes));
                }
                g
            };
            let mut rev = events.clone();
            rev.reverse();
            let (a, b) = (build(&events), build(&rev));
            prop_assert_eq!(&a, &b);
            let n: usize = events.iter().map(|e| e.2.len()).sum();
            prop_assert_eq!(a.total(), n as u64);
        }
    }
}
