//! Per-frame density products: class summaries, box-coverage grids and the
//! colour-coded overlay (yellow = low, orange = medium, red = high).

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{union_area, BoundingBox, ClassCounts, DetectionFrame, WeedClass};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DensitySummary {
    pub counts: ClassCounts,
    pub dominant: Option<WeedClass>,
    pub total: u64,
}

pub fn frame_density_summary(frame: &DetectionFrame) -> DensitySummary {
    let counts: ClassCounts = frame.detections.iter().map(|d| d.cls).collect();
    DensitySummary {
        counts,
        dominant: counts.dominant(),
        total: counts.total(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageLevel {
    None,
    Low,
    Medium,
    High,
}

/// Upper (inclusive) coverage bounds of the Low and Medium levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageThresholds {
    pub low_max: f64,
    pub medium_max: f64,
}

impl Default for CoverageThresholds {
    fn default() -> Self {
        Self {
            low_max: 0.25,
            medium_max: 0.6,
        }
    }
}

impl CoverageThresholds {
    pub fn level(&self, coverage: f64) -> CoverageLevel {
        if coverage <= 0.0 {
            CoverageLevel::None
        } else if coverage <= self.low_max {
            CoverageLevel::Low
        } else if coverage <= self.medium_max {
            CoverageLevel::Medium
        } else {
            CoverageLevel::High
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub coverage: f64,
    pub level: CoverageLevel,
}

/// Row-major grid of cells over the normalized image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageGrid {
    pub cols: u32,
    pub rows: u32,
    pub cells: Vec<CoverageCell>,
}

impl CoverageGrid {
    pub fn cell(&self, col: u32, row: u32) -> &CoverageCell {
        &self.cells[(row * self.cols + col) as usize]
    }
}

pub fn coverage_density_grid(frame: &DetectionFrame, cols: u32, rows: u32) -> Result<CoverageGrid> {
    coverage_density_grid_with(frame, cols, rows, &CoverageThresholds::default())
}

pub fn coverage_density_grid_with(
    frame: &DetectionFrame,
    cols: u32,
    rows: u32,
    thresholds: &CoverageThresholds,
) -> Result<CoverageGrid> {
    if cols == 0 || rows == 0 {
        return Err(Error::InvalidParam(format!("grid {cols}x{rows} must be at least 1x1")));
    }
    let boxes: Vec<BoundingBox> = frame.detections.iter().map(|d| d.bbox).collect();
    let mut cells = Vec::with_capacity((cols * rows) as usize);
    let mut clipped = Vec::with_capacity(boxes.len());
    for r in 0..rows {
        for c in 0..cols {
            let cell = BoundingBox::clamped(
                c as f64 / cols as f64,
                r as f64 / rows as f64,
                (c + 1) as f64 / cols as f64,
                (r + 1) as f64 / rows as f64,
            );
            clipped.clear();
            clipped.extend(boxes.iter().filter_map(|b| b.intersection(&cell)));
            let coverage = (union_area(&clipped) / cell.area()).clamp(0.0, 1.0);
            cells.push(CoverageCell {
                coverage,
                level: thresholds.level(coverage),
            });
        }
    }
    Ok(CoverageGrid { cols, rows, cells })
}

pub const OVERLAY_ALPHA: u8 = 96;

pub fn class_rgba(cls: WeedClass) -> [u8; 4] {
    match cls {
        WeedClass::Low | WeedClass::Seedling => [255, 255, 0, OVERLAY_ALPHA],
        WeedClass::Medium => [255, 165, 0, OVERLAY_ALPHA],
        WeedClass::High => [255, 0, 0, OVERLAY_ALPHA],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayCommand {
    /// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    #[serde(rename = "px")]
    pub rect_px: [u32; 4],
    pub rgba: [u8; 4],
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayLayer {
    #[serde(rename = "size")]
    pub target_size: (u32, u32),
    pub cmds: Vec<OverlayCommand>,
}

impl OverlayLayer {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("overlay serializes")
    }
}

pub fn render_overlay(frame: &DetectionFrame, image_size: (u32, u32)) -> Result<OverlayLayer> {
    let (w, h) = image_size;
    if w == 0 || h == 0 {
        return Err(Error::InvalidParam(format!("image size {w}x{h} must be positive")));
    }
    let lo = |v: f64, n: u32| ((v * n as f64).floor().max(0.0) as u32).min(n);
    let hi = |v: f64, n: u32| ((v * n as f64).ceil().max(0.0) as u32).min(n);
    let cmds = frame
        .detections
        .iter()
        .map(|d| OverlayCommand {
            rect_px: [
                lo(d.bbox.x_min(), w),
                lo(d.bbox.y_min(), h),
                hi(d.bbox.x_max(), w),
                hi(d.bbox.y_max(), h),
            ],
            rgba: class_rgba(d.cls),
            label: format!("{} {:.2}", d.cls, d.confidence),
        })
        .collect();
    Ok(OverlayLayer {
        target_size: image_size,
        cmds,
    })
}

/// `(src*a + dst*(255-a)) / 255`, rounded half up.
#[inline]
pub fn blend_channel(src: u8, dst: u8, alpha: u8) -> u8 {
    let a = alpha as u32;
    let num = src as u32 * a + dst as u32 * (255 - a);
    ((2 * num + 255) / 510) as u8
}

const LABEL_RGB: [u8; 3] = [0, 0, 0];
const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

/// 5x7 glyph rows, most significant of the low five bits is the leftmost column.
fn glyph(c: char) -> [u8; GLYPH_H as usize] {
    match c {
        ' ' => [0; GLYPH_H as usize],
        '.' => [0, 0, 0, 0, 0, 0b01100, 0b01100],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11110, 0b00001, 0b00001, 0b01110, 0b00001, 0b00001, 0b11110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        'd' => [0b00001, 0b00001, 0b01101, 0b10011, 0b10001, 0b10011, 0b01101],
        'e' => [0, 0, 0b01110, 0b10001, 0b11111, 0b10000, 0b01110],
        'g' => [0, 0b01111, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'h' => [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        'i' => [0b00100, 0, 0b01100, 0b00100, 0b00100, 0b00100, 0b01110],
        'l' => [0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'm' => [0, 0, 0b11010, 0b10101, 0b10101, 0b10001, 0b10001],
        'n' => [0, 0, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        'o' => [0, 0, 0b01110, 0b10001, 0b10001, 0b10001, 0b01110],
        's' => [0, 0, 0b01110, 0b10000, 0b01110, 0b00001, 0b11110],
        'u' => [0, 0, 0b10001, 0b10001, 0b10001, 0b10011, 0b01101],
        'w' => [0, 0, 0b10001, 0b10001, 0b10101, 0b10101, 0b01010],
        _ => [0b11111, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11111],
    }
}

fn draw_label(img: &mut RgbImage, x: u32, y: u32, text: &str) {
    let (w, h) = img.dimensions();
    for (k, c) in text.chars().enumerate() {
        let gx = x + k as u32 * (GLYPH_W + 1);
        if gx >= w {
            break;
        }
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) == 0 {
                    continue;
                }
                let (px, py) = (gx + col, y + row as u32);
                if px < w && py < h {
                    img.put_pixel(px, py, Rgb(LABEL_RGB));
                }
            }
        }
    }
}

/// Blends each command's fill over `base` in order, then stamps its label in the
/// rectangle's top-left corner.
pub fn rasterize(base: &RgbImage, layer: &OverlayLayer) -> Result<RgbImage> {
    if base.dimensions() != layer.target_size {
        return Err(Error::DimensionMismatch {
            base: base.dimensions(),
            layer: layer.target_size,
        });
    }
    let (w, h) = layer.target_size;
    let mut out = base.clone();
    for cmd in &layer.cmds {
        let [x0, y0, x1, y1] = cmd.rect_px;
        let (x1, y1) = (x1.min(w), y1.min(h));
        let [r, g, b, a] = cmd.rgba;
        if a > 0 {
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = out.get_pixel_mut(x, y);
                    p.0 = [
                        blend_channel(r, p.0[0], a),
                        blend_channel(g, p.0[1], a),
                        blend_channel(b, p.0[2], a),
                    ];
                }
            }
        }
        if x1 > x0 && y1 > y0 && !cmd.label.is_empty() {
            draw_label(&mut out, x0 + 1, y0 + 1, &cmd.label);
        }
    }
    Ok(out)
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let (w, h) = img.dimensions();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(img.as_raw());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |m: &str| Error::schema("PPM", m);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only P6 with maxval 255 is supported"));
    }
    let w: u32 = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: u32 = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
    RgbImage::from_raw(w, h, data.to_vec()).ok_or_else(|| bad("pixel data length mismatch"))
}

pub fn overlay_file_name(frame_index: u64) -> String {
    format!("frame_{frame_index:06}.ppm")
}
