//! Deterministic, box-aware dataset augmentation and train/val/test splitting.
//!
//! Geometric ops move boxes with the pixels; photometric ops never touch boxes.
//! Box coordinates are kept on a 2^-32 grid so that flips and quarter turns are
//! exact involutions in floating point.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use image::{imageops, ImageFormat, Rgb, RgbImage};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::model::{union_area, BoundingBox, LabeledBox};

/// Hard limits on augmentation magnitudes.
pub mod limits {
    pub const CROP_ZOOM: f64 = 0.20;
    pub const ROTATION_DEG: f64 = 15.0;
    pub const SHEAR_DEG: f64 = 15.0;
    pub const HUE_DEG: f64 = 25.0;
    pub const SATURATION: f64 = 0.30;
    pub const BRIGHTNESS: f64 = 0.25;
    pub const EXPOSURE: f64 = 0.14;
    pub const BLUR_PX: f64 = 2.5;
    pub const NOISE_FRAC: f64 = 0.0199;
    pub const CUTOUT_COUNT: u32 = 3;
    pub const CUTOUT_SIZE_FRAC: f64 = 0.10;
    pub const MOSAIC_CENTER: (f64, f64) = (0.3, 0.7);
}

/// Boxes retaining less than this fraction of their area are dropped.
pub const MIN_VISIBLE_FRACTION: f64 = 0.10;

const GRID: f64 = 4_294_967_296.0; // 2^32

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

fn snapped(b: &BoundingBox) -> BoundingBox {
    BoundingBox::clamped(snap(b.x_min()), snap(b.y_min()), snap(b.x_max()), snap(b.y_max()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub pixels: RgbImage,
    pub boxes: Vec<LabeledBox>,
}

impl AnnotatedImage {
    /// Box coordinates are snapped to the 2^-32 grid on construction.
    pub fn new(id: impl Into<String>, pixels: RgbImage, boxes: Vec<LabeledBox>) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::InvalidParam("image must be at least 1x1".into()));
        }
        Ok(Self {
            id: id.into(),
            pixels,
            boxes: boxes
                .into_iter()
                .map(|b| LabeledBox {
                    bbox: snapped(&b.bbox),
                    cls: b.cls,
                })
                .collect(),
        })
    }

    fn with(&self, pixels: RgbImage, boxes: Vec<LabeledBox>) -> Self {
        Self {
            id: self.id.clone(),
            pixels,
            boxes,
        }
    }
}

/// Maps an unclipped normalized box into the frame, applying the visibility drop rule.
fn place_box(x0: f64, y0: f64, x1: f64, y1: f64) -> Option<BoundingBox> {
    let area = (x1 - x0) * (y1 - y0);
    let clipped = BoundingBox::clamped(x0, y0, x1, y1);
    let keep = if area > 0.0 {
        clipped.area() >= MIN_VISIBLE_FRACTION * area
    } else {
        [x0, y0, x1, y1].iter().all(|v| (0.0..=1.0).contains(v))
    };
    keep.then(|| snapped(&clipped))
}

fn check(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("{name} = {v} outside [{lo}, {hi}]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rot90 {
    Cw,
    Ccw,
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometricOp {
    FlipHorizontal,
    FlipVertical,
    Rotate90(Rot90),
    /// Zooms in by `1 + zoom`; the offsets in `[0, 1]` place the crop window
    /// within the available slack.
    Crop {
        zoom: f64,
        offset_x: f64,
        offset_y: f64,
    },
    /// Positive angles turn the picture counter-clockwise on screen.
    Rotate {
        degrees: f64,
    },
    Shear {
        horizontal_deg: f64,
        vertical_deg: f64,
    },
}

impl GeometricOp {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GeometricOp::Crop {
                zoom,
                offset_x,
                offset_y,
            } => {
                check("crop zoom", zoom, 0.0, limits::CROP_ZOOM)?;
                check("crop offset_x", offset_x, 0.0, 1.0)?;
                check("crop offset_y", offset_y, 0.0, 1.0)
            }
            GeometricOp::Rotate { degrees } => check("rotation", degrees, -limits::ROTATION_DEG, limits::ROTATION_DEG),
            GeometricOp::Shear {
                horizontal_deg,
                vertical_deg,
            } => {
                check(
                    "horizontal shear",
                    horizontal_deg,
                    -limits::SHEAR_DEG,
                    limits::SHEAR_DEG,
                )?;
                check("vertical shear", vertical_deg, -limits::SHEAR_DEG, limits::SHEAR_DEG)
            }
            _ => Ok(()),
        }
    }
}

/// `p' = [a b; c d] p + t` in continuous pixel coordinates.
#[derive(Debug, Clone, Copy)]
struct Affine {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    tx: f64,
    ty: f64,
}

impl Affine {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)
    }

    fn inverse(&self) -> Affine {
        let det = self.a * self.d - self.b * self.c;
        let (a, b, c, d) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Affine {
            a,
            b,
            c,
            d,
            tx: -(a * self.tx + b * self.ty),
            ty: -(c * self.tx + d * self.ty),
        }
    }

    /// Linear part `m` applied about the point `(cx, cy)`.
    fn about(m: [f64; 4], cx: f64, cy: f64) -> Affine {
        let [a, b, c, d] = m;
        Affine {
            a,
            b,
            c,
            d,
            tx: cx - a * cx - b * cy,
            ty: cy - c * cx - d * cy,
        }
    }
}

/// Bilinear sample at a continuous pixel position (pixel `k` spans `[k, k+1)`).
/// Points outside the source are black; inside, neighbours clamp to the edge.
fn sample_bilinear(img: &RgbImage, sx: f64, sy: f64) -> [f64; 3] {
    let (w, h) = img.dimensions();
    if !(sx >= 0.0 && sy >= 0.0 && sx <= w as f64 && sy <= h as f64) {
        return [0.0; 3];
    }
    let fx = sx - 0.5;
    let fy = sy - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (ax, ay) = (fx - x0, fy - y0);
    let cx = |v: f64| v.clamp(0.0, (w - 1) as f64) as u32;
    let cy = |v: f64| v.clamp(0.0, (h - 1) as f64) as u32;
    let p00 = img.get_pixel(cx(x0), cy(y0)).0;
    let p10 = img.get_pixel(cx(x0 + 1.0), cy(y0)).0;
    let p01 = img.get_pixel(cx(x0), cy(y0 + 1.0)).0;
    let p11 = img.get_pixel(cx(x0 + 1.0), cy(y0 + 1.0)).0;
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = p00[k] as f64 * (1.0 - ax) + p10[k] as f64 * ax;
        let bottom = p01[k] as f64 * (1.0 - ax) + p11[k] as f64 * ax;
        out[k] = top * (1.0 - ay) + bottom * ay;
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn warp(img: &RgbImage, forward: &Affine) -> RgbImage {
    let inv = forward.inverse();
    RgbImage::from_fn(img.width(), img.height(), |u, v| {
        let (sx, sy) = inv.apply(u as f64 + 0.5, v as f64 + 0.5);
        let s = sample_bilinear(img, sx, sy);
        Rgb([to_u8(s[0]), to_u8(s[1]), to_u8(s[2])])
    })
}

fn map_boxes_affine(boxes: &[LabeledBox], forward: &Affine, w: f64, h: f64) -> Vec<LabeledBox> {
    boxes
        .iter()
        .filter_map(|lb| {
            let b = &lb.bbox;
            let corners = [
                (b.x_min(), b.y_min()),
                (b.x_max(), b.y_min()),
                (b.x_min(), b.y_max()),
                (b.x_max(), b.y_max()),
            ]
            .map(|(x, y)| forward.apply(x * w, y * h));
            let xs = corners.map(|p| p.0 / w);
            let ys = corners.map(|p| p.1 / h);
            let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
            let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
            place_box(min(xs), min(ys), max(xs), max(ys)).map(|bbox| LabeledBox { bbox, cls: lb.cls })
        })
        .collect()
}

fn affine_for(op: &GeometricOp, w: f64, h: f64) -> Option<Affine> {
    let (cx, cy) = (w / 2.0, h / 2.0);
    match *op {
        GeometricOp::Rotate { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            Some(Affine::about([c, s, -s, c], cx, cy))
        }
        GeometricOp::Shear {
            horizontal_deg,
            vertical_deg,
        } => Some(Affine::about(
            [
                1.0,
                horizontal_deg.to_radians().tan(),
                vertical_deg.to_radians().tan(),
                1.0,
            ],
            cx,
            cy,
        )),
        GeometricOp::Crop {
            zoom,
            offset_x,
            offset_y,
        } => {
            let s = 1.0 + zoom;
            let (wx, wy) = (offset_x * (w - w / s), offset_y * (h - h / s));
            Some(Affine {
                a: s,
                b: 0.0,
                c: 0.0,
                d: s,
                tx: -wx * s,
                ty: -wy * s,
            })
        }
        _ => None,
    }
}

pub fn geometric_transform(img: &AnnotatedImage, op: &GeometricOp) -> Result<AnnotatedImage> {
    op.validate()?;
    let flip_box = |lb: &LabeledBox, f: fn(&BoundingBox) -> [f64; 4]| {
        let [x0, y0, x1, y1] = f(&lb.bbox);
        LabeledBox {
            bbox: BoundingBox::clamped(x0, y0, x1, y1),
            cls: lb.cls,
        }
    };
    let exact = |pixels: RgbImage, f: fn(&BoundingBox) -> [f64; 4]| {
        img.with(pixels, img.boxes.iter().map(|lb| flip_box(lb, f)).collect())
    };
    Ok(match op {
        GeometricOp::FlipHorizontal => exact(imageops::flip_horizontal(&img.pixels), |b| {
            [1.0 - b.x_max(), b.y_min(), 1.0 - b.x_min(), b.y_max()]
        }),
        GeometricOp::FlipVertical => exact(imageops::flip_vertical(&img.pixels), |b| {
            [b.x_min(), 1.0 - b.y_max(), b.x_max(), 1.0 - b.y_min()]
        }),
        GeometricOp::Rotate90(Rot90::Cw) => exact(imageops::rotate90(&img.pixels), |b| {
            [1.0 - b.y_max(), b.x_min(), 1.0 - b.y_min(), b.x_max()]
        }),
        GeometricOp::Rotate90(Rot90::Ccw) => exact(imageops::rotate270(&img.pixels), |b| {
            [b.y_min(), 1.0 - b.x_max(), b.y_max(), 1.0 - b.x_min()]
        }),
        GeometricOp::Rotate90(Rot90::Half) => exact(imageops::rotate180(&img.pixels), |b| {
            [1.0 - b.x_max(), 1.0 - b.y_max(), 1.0 - b.x_min(), 1.0 - b.y_min()]
        }),
        _ => {
            let (w, h) = (img.pixels.width() as f64, img.pixels.height() as f64);
            let forward = affine_for(op, w, h).expect("non-exact ops are affine");
            img.with(
                warp(&img.pixels, &forward),
                map_boxes_affine(&img.boxes, &forward, w, h),
            )
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhotometricOp {
    Hue {
        degrees: f64,
    },
    /// Multiplies HSV saturation by `1 + amount`.
    Saturation {
        amount: f64,
    },
    /// Multiplies every channel by `1 + amount`.
    Brightness {
        amount: f64,
    },
    /// Gain of `2^amount` on linear-light channels.
    Exposure {
        amount: f64,
    },
    Blur {
        radius_px: f64,
    },
    /// Salt-and-pepper noise on `fraction` of the pixels.
    Noise {
        fraction: f64,
        seed: u64,
    },
}

impl PhotometricOp {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PhotometricOp::Hue { degrees } => check("hue", degrees, -limits::HUE_DEG, limits::HUE_DEG),
            PhotometricOp::Saturation { amount } => {
                check("saturation", amount, -limits::SATURATION, limits::SATURATION)
            }
            PhotometricOp::Brightness { amount } => {
                check("brightness", amount, -limits::BRIGHTNESS, limits::BRIGHTNESS)
            }
            PhotometricOp::Exposure { amount } => check("exposure", amount, -limits::EXPOSURE, limits::EXPOSURE),
            PhotometricOp::Blur { radius_px } => check("blur", radius_px, 0.0, limits::BLUR_PX),
            PhotometricOp::Noise { fraction, .. } => check("noise", fraction, 0.0, limits::NOISE_FRAC),
        }
    }
}

/// `(h in degrees [0, 360), s, v)` from RGB in `[0, 1]`.
pub(crate) fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(l: f64) -> f64 {
    if l <= 0.003_130_8 {
        l * 12.92
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

fn map_pixels(img: &RgbImage, f: impl Fn([u8; 3]) -> [u8; 3]) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        p.0 = f(p.0);
    }
    out
}

fn map_hsv(img: &RgbImage, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> RgbImage {
    map_pixels(img, |p| {
        let (h, s, v) = rgb_to_hsv(p.map(|c| c as f64 / 255.0));
        let (h, s, v) = f(h, s, v);
        hsv_to_rgb(h, s, v).map(|c| to_u8(c * 255.0))
    })
}

/// Separable box blur with a fractional radius: integer taps within the radius
/// weigh 1, the next tap on each side weighs the fractional part.
fn box_blur(img: &RgbImage, radius: f64) -> RgbImage {
    let n = radius.floor() as i64;
    let frac = radius - n as f64;
    let mut taps: Vec<(i64, f64)> = (-n..=n).map(|k| (k, 1.0)).collect();
    if frac > 0.0 {
        taps.push((-(n + 1), frac));
        taps.push((n + 1, frac));
    }
    let norm = 2.0 * radius + 1.0;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let src: Vec<f64> = img.as_raw().iter().map(|&c| c as f64).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let acc: f64 = taps
                    .iter()
                    .map(|&(dx, wt)| src[(((y * w) + (x + dx).clamp(0, w - 1)) * 3 + k) as usize] * wt)
                    .sum();
                tmp[((y * w + x) * 3 + k) as usize] = acc / norm;
            }
        }
    }
    let mut out = RgbImage::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (k, c) in px.iter_mut().enumerate() {
                let acc: f64 = taps
                    .iter()
                    .map(|&(dy, wt)| tmp[((((y + dy).clamp(0, h - 1)) * w + x) * 3 + k as i64) as usize] * wt)
                    .sum();
                *c = to_u8(acc / norm);
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}

fn salt_and_pepper(img: &RgbImage, fraction: f64, seed: u64) -> RgbImage {
    let total = (img.width() * img.height()) as usize;
    let n = ((fraction * total as f64) + 0.5).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for i in index::sample(&mut rng, total, n.min(total)).into_iter() {
        let v = if rng.gen::<bool>() { 255 } else { 0 };
        out.put_pixel(i as u32 % img.width(), i as u32 / img.width(), Rgb([v; 3]));
    }
    out
}

pub fn photometric_transform(img: &AnnotatedImage, op: &PhotometricOp) -> Result<AnnotatedImage> {
    op.validate()?;
    let pixels = match *op {
        PhotometricOp::Hue { degrees } => map_hsv(&img.pixels, |h, s, v| (h + degrees, s, v)),
        PhotometricOp::Saturation { amount } => {
            map_hsv(&img.pixels, |h, s, v| (h, (s * (1.0 + amount)).clamp(0.0, 1.0), v))
        }
        PhotometricOp::Brightness { amount } => {
            map_pixels(&img.pixels, |p| p.map(|c| to_u8(c as f64 * (1.0 + amount))))
        }
        PhotometricOp::Exposure { amount } => {
            let gain = amount.exp2();
            map_pixels(&img.pixels, |p| {
                p.map(|c| {
                    let lin = (srgb_to_linear(c as f64 / 255.0) * gain).min(1.0);
                    to_u8(linear_to_srgb(lin) * 255.0)
                })
            })
        }
        PhotometricOp::Blur { radius_px } if radius_px > 0.0 => box_blur(&img.pixels, radius_px),
        PhotometricOp::Blur { .. } => img.pixels.clone(),
        PhotometricOp::Noise { fraction, seed } => salt_and_pepper(&img.pixels, fraction, seed),
    };
    Ok(img.with(pixels, img.boxes.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OcclusionOp {
    Cutout {
        count: u32,
        size_frac: f64,
        seed: u64,
    },
    /// Quadrant split point, normalized.
    Mosaic {
        center: (f64, f64),
    },
}

/// Pixel rectangles `[x0, y0, x1, y1)` blacked out by a cutout.
pub fn cutout_regions(width: u32, height: u32, count: u32, size_frac: f64, seed: u64) -> Vec<[u32; 4]> {
    let side = ((size_frac * width.min(height) as f64 + 0.5).floor() as u32).clamp(1, width.min(height));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = rng.gen_range(0..=width - side);
            let y = rng.gen_range(0..=height - side);
            [x, y, x + side, y + side]
        })
        .collect()
}

/// Quadrant pixel rectangles (TL, TR, BL, BR) for a mosaic split.
fn mosaic_quadrants(w: u32, h: u32, center: (f64, f64)) -> [[u32; 4]; 4] {
    let sx = ((center.0 * w as f64 + 0.5).floor() as u32).clamp(1, w - 1);
    let sy = ((center.1 * h as f64 + 0.5).floor() as u32).clamp(1, h - 1);
    [[0, 0, sx, sy], [sx, 0, w, sy], [0, sy, sx, h], [sx, sy, w, h]]
}

pub fn occlusion_transform(imgs: &[AnnotatedImage], op: &OcclusionOp) -> Result<AnnotatedImage> {
    match *op {
        OcclusionOp::Cutout { count, size_frac, seed } => {
            let [img] = imgs else {
                return Err(Error::Arity {
                    op: "cutout",
                    expected: 1,
                    got: imgs.len(),
                });
            };
            if count > limits::CUTOUT_COUNT {
                return Err(Error::InvalidParam(format!(
                    "cutout count {count} exceeds {}",
                    limits::CUTOUT_COUNT
                )));
            }
            if !(size_frac > 0.0 && size_frac <= limits::CUTOUT_SIZE_FRAC) {
                return Err(Error::InvalidParam(format!("cutout size {size_frac} not in (0, 0.1]")));
            }
            let (w, h) = img.pixels.dimensions();
            let regions = cutout_regions(w, h, count, size_frac, seed);
            let mut pixels = img.pixels.clone();
            for &[x0, y0, x1, y1] in &regions {
                for y in y0..y1 {
                    for x in x0..x1 {
                        pixels.put_pixel(x, y, Rgb([0, 0, 0]));
                    }
                }
            }
            let holes: Vec<BoundingBox> = regions
                .iter()
                .map(|r| {
                    BoundingBox::clamped(
                        r[0] as f64 / w as f64,
                        r[1] as f64 / h as f64,
                        r[2] as f64 / w as f64,
                        r[3] as f64 / h as f64,
                    )
                })
                .collect();
            let boxes = img
                .boxes
                .iter()
                .filter(|lb| {
                    let area = lb.bbox.area();
                    if area <= 0.0 {
                        return true;
                    }
                    let hidden: Vec<BoundingBox> = holes.iter().filter_map(|hb| hb.intersection(&lb.bbox)).collect();
                    area - union_area(&hidden) >= MIN_VISIBLE_FRACTION * area
                })
                .copied()
                .collect();
            Ok(img.with(pixels, boxes))
        }
        OcclusionOp::Mosaic { center } => {
            if imgs.len() != 4 {
                return Err(Error::Arity {
                    op: "mosaic",
                    expected: 4,
                    got: imgs.len(),
                });
            }
            let (lo, hi) = limits::MOSAIC_CENTER;
            check("mosaic center x", center.0, lo, hi)?;
            check("mosaic center y", center.1, lo, hi)?;
            let (w, h) = imgs[0].pixels.dimensions();
            if w < 2 || h < 2 {
                return Err(Error::InvalidParam("mosaic canvas must be at least 2x2".into()));
            }
            let mut canvas = RgbImage::new(w, h);
            let mut boxes = Vec::new();
            for (src, q) in imgs.iter().zip(mosaic_quadrants(w, h, center)) {
                let [qx0, qy0, qx1, qy1] = q;
                let (qw, qh) = ((qx1 - qx0) as f64, (qy1 - qy0) as f64);
                let (sw, sh) = (src.pixels.width() as f64, src.pixels.height() as f64);
                for v in qy0..qy1 {
                    for u in qx0..qx1 {
                        let sx = (u as f64 + 0.5 - qx0 as f64) / qw * sw;
                        let sy = (v as f64 + 0.5 - qy0 as f64) / qh * sh;
                        let s = sample_bilinear(&src.pixels, sx, sy);
                        canvas.put_pixel(u, v, Rgb([to_u8(s[0]), to_u8(s[1]), to_u8(s[2])]));
                    }
                }
                let (ox, oy) = (qx0 as f64 / w as f64, qy0 as f64 / h as f64);
                let (kx, ky) = (qw / w as f64, qh / h as f64);
                boxes.extend(src.boxes.iter().filter_map(|lb| {
                    let b = &lb.bbox;
                    place_box(
                        ox + b.x_min() * kx,
                        oy + b.y_min() * ky,
                        ox + b.x_max() * kx,
                        oy + b.y_max() * ky,
                    )
                    .map(|bbox| LabeledBox { bbox, cls: lb.cls })
                }));
            }
            Ok(imgs[0].with(canvas, boxes))
        }
    }
}

/// Magnitude bounds for randomized augmentation; `Default` uses the hard limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rot90: Vec<Rot90>,
    pub crop_zoom_max: f64,
    pub rotation_deg_max: f64,
    pub shear_deg_h_max: f64,
    pub shear_deg_v_max: f64,
    pub hue_deg_max: f64,
    pub saturation_max: f64,
    pub brightness_max: f64,
    pub exposure_max: f64,
    pub blur_px_max: f64,
    pub noise_frac_max: f64,
    pub cutout_count: u32,
    pub cutout_size_frac: f64,
    pub mosaic: bool,
    /// Default training multiplier (original plus variants).
    pub outputs_per_image: u32,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            flip_horizontal: true,
            flip_vertical: true,
            rot90: vec![Rot90::Cw, Rot90::Ccw, Rot90::Half],
            crop_zoom_max: limits::CROP_ZOOM,
            rotation_deg_max: limits::ROTATION_DEG,
            shear_deg_h_max: limits::SHEAR_DEG,
            shear_deg_v_max: limits::SHEAR_DEG,
            hue_deg_max: limits::HUE_DEG,
            saturation_max: limits::SATURATION,
            brightness_max: limits::BRIGHTNESS,
            exposure_max: limits::EXPOSURE,
            blur_px_max: limits::BLUR_PX,
            noise_frac_max: limits::NOISE_FRAC,
            cutout_count: limits::CUTOUT_COUNT,
            cutout_size_frac: limits::CUTOUT_SIZE_FRAC,
            mosaic: true,
            outputs_per_image: 12,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        check("crop_zoom_max", self.crop_zoom_max, 0.0, limits::CROP_ZOOM)?;
        check("rotation_deg_max", self.rotation_deg_max, 0.0, limits::ROTATION_DEG)?;
        check("shear_deg_h_max", self.shear_deg_h_max, 0.0, limits::SHEAR_DEG)?;
        check("shear_deg_v_max", self.shear_deg_v_max, 0.0, limits::SHEAR_DEG)?;
        check("hue_deg_max", self.hue_deg_max, 0.0, limits::HUE_DEG)?;
        check("saturation_max", self.saturation_max, 0.0, limits::SATURATION)?;
        check("brightness_max", self.brightness_max, 0.0, limits::BRIGHTNESS)?;
        check("exposure_max", self.exposure_max, 0.0, limits::EXPOSURE)?;
        check("blur_px_max", self.blur_px_max, 0.0, limits::BLUR_PX)?;
        check("noise_frac_max", self.noise_frac_max, 0.0, limits::NOISE_FRAC)?;
        if self.cutout_count > limits::CUTOUT_COUNT {
            return Err(Error::InvalidParam(format!(
                "cutout_count {} exceeds 3",
                self.cutout_count
            )));
        }
        check("cutout_size_frac", self.cutout_size_frac, 0.0, limits::CUTOUT_SIZE_FRAC)?;
        if self.outputs_per_image == 0 {
            return Err(Error::InvalidParam("outputs_per_image must be positive".into()));
        }
        Ok(())
    }
}

/// The randomized operations chosen for one output variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantPlan {
    /// Partner positions (within the same split) and split point, when mosaicked.
    pub mosaic: Option<([usize; 3], (f64, f64))>,
    pub geometric: Vec<GeometricOp>,
    pub photometric: Vec<PhotometricOp>,
    pub cutout: Option<OcclusionOp>,
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(-max..=max)
    } else {
        0.0
    }
}

fn upto(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(0.0..=max)
    } else {
        0.0
    }
}

/// Draws one variant. `pool` is the number of images mosaic partners can come from.
pub fn draw_variant(spec: &AugmentationSpec, rng: &mut ChaCha8Rng, pool: usize) -> VariantPlan {
    let mosaic = (spec.mosaic && pool > 0 && rng.gen_bool(0.5)).then(|| {
        let partners = [0; 3].map(|_| rng.gen_range(0..pool));
        let (lo, hi) = limits::MOSAIC_CENTER;
        (partners, (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)))
    });

    let mut geometric = Vec::new();
    if spec.flip_horizontal && rng.gen_bool(0.5) {
        geometric.push(GeometricOp::FlipHorizontal);
    }
    if spec.flip_vertical && rng.gen_bool(0.5) {
        geometric.push(GeometricOp::FlipVertical);
    }
    if !spec.rot90.is_empty() {
        // One extra slot for "no quarter turn".
        let k = rng.gen_range(0..=spec.rot90.len());
        if let Some(&r) = spec.rot90.get(k) {
            geometric.push(GeometricOp::Rotate90(r));
        }
    }
    if spec.crop_zoom_max > 0.0 {
        geometric.push(GeometricOp::Crop {
            zoom: upto(rng, spec.crop_zoom_max),
            offset_x: rng.gen_range(0.0..=1.0),
            offset_y: rng.gen_range(0.0..=1.0),
        });
    }
    if spec.rotation_deg_max > 0.0 {
        geometric.push(GeometricOp::Rotate {
            degrees: symmetric(rng, spec.rotation_deg_max),
        });
    }
    if spec.shear_deg_h_max > 0.0 || spec.shear_deg_v_max > 0.0 {
        geometric.push(GeometricOp::Shear {
            horizontal_deg: symmetric(rng, spec.shear_deg_h_max),
            vertical_deg: symmetric(rng, spec.shear_deg_v_max),
        });
    }

    let mut photometric = Vec::new();
    if spec.hue_deg_max > 0.0 {
        photometric.push(PhotometricOp::Hue {
            degrees: symmetric(rng, spec.hue_deg_max),
        });
    }
    if spec.saturation_max > 0.0 {
        photometric.push(PhotometricOp::Saturation {
            amount: symmetric(rng, spec.saturation_max),
        });
    }
    if spec.brightness_max > 0.0 {
        photometric.push(PhotometricOp::Brightness {
            amount: symmetric(rng, spec.brightness_max),
        });
    }
    if spec.exposure_max > 0.0 {
        photometric.push(PhotometricOp::Exposure {
            amount: symmetric(rng, spec.exposure_max),
        });
    }
    if spec.blur_px_max > 0.0 {
        photometric.push(PhotometricOp::Blur {
            radius_px: upto(rng, spec.blur_px_max),
        });
    }
    if spec.noise_frac_max > 0.0 {
        photometric.push(PhotometricOp::Noise {
            fraction: upto(rng, spec.noise_frac_max),
            seed: rng.gen(),
        });
    }

    let cutout = (spec.cutout_count > 0 && spec.cutout_size_frac > 0.0).then(|| OcclusionOp::Cutout {
        count: spec.cutout_count,
        size_frac: spec.cutout_size_frac,
        seed: rng.gen(),
    });

    VariantPlan {
        mosaic,
        geometric,
        photometric,
        cutout,
    }
}

/// Applies a plan to `img`; `pool` supplies mosaic partners.
pub fn apply_variant(img: &AnnotatedImage, plan: &VariantPlan, pool: &[AnnotatedImage]) -> Result<AnnotatedImage> {
    let mut out = match plan.mosaic {
        Some((partners, center)) => {
            let tiles = [
                img.clone(),
                pool[partners[0]].clone(),
                pool[partners[1]].clone(),
                pool[partners[2]].clone(),
            ];
            occlusion_transform(&tiles, &OcclusionOp::Mosaic { center })?
        }
        None => img.clone(),
    };
    for op in &plan.geometric {
        out = geometric_transform(&out, op)?;
    }
    for op in &plan.photometric {
        out = photometric_transform(&out, op)?;
    }
    if let Some(op) = &plan.cutout {
        out = occlusion_transform(std::slice::from_ref(&out), op)?;
    }
    Ok(out)
}

/// FNV-1a over the bytes of `id` followed by `variant`.
fn stream_key(id: &str, variant: u32) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in id.as_bytes().iter().chain(&variant.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator keyed by `(seed, image id, variant index)`, independent of processing order.
pub fn keyed_rng(seed: u64, id: &str, variant: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_key(id, variant));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.20,
            test: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitPlan {
    pub fractions: SplitFractions,
    pub seed: u64,
    pub assignment: BTreeMap<String, Split>,
}

impl SplitPlan {
    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }

    pub fn members(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Seeded shuffle, then `floor(n*val)` validation ids, `floor(n*test)` test ids
/// and the remainder for training.
pub fn split_dataset(ids: &[String], fractions: SplitFractions, seed: u64) -> Result<SplitPlan> {
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| f.is_nan() || *f < 0.0) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!(
            "split fractions {train}/{val}/{test} must be non-negative and sum to 1"
        )));
    }
    let mut shuffled: Vec<&String> = ids.iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    // The epsilon keeps products like 15 * 0.2 = 3.0000000000000004 and
    // 0.2 * 780 on the intended integer.
    let val_n = (n * val + 1e-9).floor() as usize;
    let test_n = (n * test + 1e-9).floor() as usize;

    let mut assignment = BTreeMap::new();
    for (k, id) in shuffled.into_iter().enumerate() {
        let split = if k < val_n {
            Split::Val
        } else if k < val_n + test_n {
            Split::Test
        } else {
            Split::Train
        };
        if assignment.insert(id.clone(), split).is_some() {
            return Err(Error::InvalidParam(format!("duplicate id `{id}`")));
        }
    }
    Ok(SplitPlan {
        fractions,
        seed,
        assignment,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[AnnotatedImage] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<AnnotatedImage> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output images per source image, original included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMultipliers {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitMultipliers {
    fn default() -> Self {
        Self {
            train: 12,
            val: 4,
            test: 4,
        }
    }
}

impl SplitMultipliers {
    pub fn get(&self, s: Split) -> u32 {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn expected_total(&self, train: usize, val: usize, test: usize) -> usize {
        train * self.train as usize + val * self.val as usize + test * self.test as usize
    }
}

pub fn variant_id(id: &str, variant: u32) -> String {
    format!("{id}_aug{variant:02}")
}

/// Emits every source image followed by `multiplier - 1` augmented variants.
pub fn generate_augmented_dataset(
    dataset: &Dataset,
    spec: &AugmentationSpec,
    multipliers: SplitMultipliers,
) -> Result<Dataset> {
    spec.validate()?;
    let mut out = Dataset::default();
    for split in Split::ALL {
        let m = multipliers.get(split);
        if m == 0 {
            return Err(Error::InvalidParam(format!(
                "{} multiplier must be at least 1",
                split.name()
            )));
        }
        let src = dataset.split(split);
        let per_image: Vec<Vec<AnnotatedImage>> = src
            .par_iter()
            .map(|img| {
                let mut group = Vec::with_capacity(m as usize);
                group.push(img.clone());
                for k in 1..m {
                    let mut rng = keyed_rng(spec.seed, &img.id, k);
                    let plan = draw_variant(spec, &mut rng, src.len());
                    let mut v = apply_variant(img, &plan, src)?;
                    v.id = variant_id(&img.id, k);
                    group.push(v);
                }
                Ok(group)
            })
            .collect::<Result<_>>()?;
        out.split_mut(split).extend(per_image.into_iter().flatten());
    }
    Ok(out)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory_with_format(&bytes, ImageFormat::Png)?.to_rgb8())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)?;
    Ok(buf)
}

pub fn save_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}
