//! Deterministic synthetic scene renderer: filled circles, squares and
//! triangles with color jitter on a noisy background.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::types::{BBox, GroundTruth, SceneSpec};
use crate::error::Result;
use crate::matching::iou;
use crate::rng::stream;

/// Pixel-space rectangle actually covered by a rendered shape (for
/// label/geometry consistency checks).
#[derive(Debug, Clone, Copy)]
pub struct PixelExtent {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    fn of_class(class_id: usize) -> Shape {
        match class_id {
            0 => Shape::Circle,
            1 => Shape::Square,
            _ => Shape::Triangle,
        }
    }
}

const BASE_COLORS: [[i32; 3]; 3] = [[205, 70, 70], [70, 185, 90], [80, 100, 210]];

/// Deterministic function of (spec.seed, index). Also returns the rasterized
/// extent of every object for geometry tests.
pub fn generate_scene_with_extents(
    spec: &SceneSpec,
    index: u64,
) -> Result<(RgbImage, GroundTruth, Vec<PixelExtent>)> {
    spec.validate()?;
    let size = spec.image_size as u32;
    let mut rng = stream(spec.seed, "scene", index);

    let mut img = render_background(size, &mut rng);

    let (lo, hi) = spec.objects_per_image;
    let count = rng.gen_range(lo..=hi);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut class_ids = Vec::with_capacity(count);
    let mut extents = Vec::with_capacity(count);

    for obj in 0..count {
        let class_id = rng.gen_range(0..spec.num_classes);
        let side = rng.gen_range(0.12..0.30);
        let bbox = place_box(&mut rng, &boxes, side, spec.crowd_mode && obj > 0);
        let color = jitter_color(class_id, &mut rng);
        let extent = rasterize(&mut img, Shape::of_class(class_id), &bbox, color);
        boxes.push(bbox);
        class_ids.push(class_id);
        extents.push(extent);
    }

    let gt = GroundTruth {
        crowd_density: boxes.len(),
        boxes,
        class_ids,
    };
    Ok((img, gt, extents))
}

/// Deterministic scene generation; see module docs for the shape classes.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(RgbImage, GroundTruth)> {
    let (img, gt, _) = generate_scene_with_extents(spec, index)?;
    Ok((img, gt))
}

fn render_background(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let base = [
        rng.gen_range(95..150) as i32,
        rng.gen_range(95..150) as i32,
        rng.gen_range(95..150) as i32,
    ];
    let mut img = RgbImage::new(size, size);
    for py in 0..size {
        for px in 0..size {
            let n = rng.gen_range(-18..=18);
            let pix = [
                (base[0] + n).clamp(0, 255) as u8,
                (base[1] + n).clamp(0, 255) as u8,
                (base[2] + n).clamp(0, 255) as u8,
            ];
            img.put_pixel(px, py, Rgb(pix));
        }
    }
    img
}

fn place_box(rng: &mut ChaCha8Rng, placed: &[BBox], side: f64, crowd: bool) -> BBox {
    let half = side / 2.0;
    let margin = half + 0.01;
    let sample_center = |rng: &mut ChaCha8Rng| {
        (
            rng.gen_range(margin..=1.0 - margin),
            rng.gen_range(margin..=1.0 - margin),
        )
    };
    if crowd && !placed.is_empty() && rng.gen_bool(0.65) {
        // cluster next to an existing object so the pair overlaps strongly
        let anchor = placed[rng.gen_range(0..placed.len())];
        let dx = rng.gen_range(-0.45..0.45) * (anchor.w + side) / 2.0;
        let dy = rng.gen_range(-0.45..0.45) * (anchor.h + side) / 2.0;
        let cx = (anchor.cx + dx).clamp(margin, 1.0 - margin);
        let cy = (anchor.cy + dy).clamp(margin, 1.0 - margin);
        return BBox::new(cx, cy, side, side);
    }
    // spread placement: prefer low overlap, accept the last try regardless
    let mut candidate = BBox::new(0.5, 0.5, side, side);
    for _ in 0..20 {
        let (cx, cy) = sample_center(rng);
        candidate = BBox::new(cx, cy, side, side);
        if placed.iter().all(|b| iou(b, &candidate) < 0.25) {
            return candidate;
        }
    }
    candidate
}

fn jitter_color(class_id: usize, rng: &mut ChaCha8Rng) -> Rgb<u8> {
    let base = BASE_COLORS[class_id % 3];
    let mut out = [0u8; 3];
    for (o, b) in out.iter_mut().zip(base.iter()) {
        *o = (b + rng.gen_range(-35..=35)).clamp(25, 255) as u8;
    }
    Rgb(out)
}

fn rasterize(img: &mut RgbImage, shape: Shape, bbox: &BBox, color: Rgb<u8>) -> PixelExtent {
    let size = img.width() as f64;
    let (x1, y1, x2, y2) = bbox.corners();
    let px1 = (x1 * size).floor().max(0.0) as u32;
    let py1 = (y1 * size).floor().max(0.0) as u32;
    let px2 = ((x2 * size).ceil() as u32).min(img.width());
    let py2 = ((y2 * size).ceil() as u32).min(img.height());

    let mut ext = PixelExtent {
        x_min: u32::MAX,
        y_min: u32::MAX,
        x_max: 0,
        y_max: 0,
    };
    for py in py1..py2 {
        for px in px1..px2 {
            let x = (px as f64 + 0.5) / size;
            let y = (py as f64 + 0.5) / size;
            if inside(shape, bbox, x, y) {
                img.put_pixel(px, py, color);
                ext.x_min = ext.x_min.min(px);
                ext.y_min = ext.y_min.min(py);
                ext.x_max = ext.x_max.max(px);
                ext.y_max = ext.y_max.max(py);
            }
        }
    }
    ext
}

fn inside(shape: Shape, bbox: &BBox, x: f64, y: f64) -> bool {
    match shape {
        Shape::Circle => {
            let r = bbox.w / 2.0;
            let dx = x - bbox.cx;
            let dy = y - bbox.cy;
            dx * dx + dy * dy <= r * r
        }
        Shape::Square => {
            (x - bbox.cx).abs() <= bbox.w / 2.0 && (y - bbox.cy).abs() <= bbox.h / 2.0
        }
        Shape::Triangle => {
            // isoceles: apex at top center, base at the bottom edge
            let top = bbox.cy - bbox.h / 2.0;
            let bottom = bbox.cy + bbox.h / 2.0;
            if y < top || y > bottom {
                return false;
            }
            let t = (y - top) / (bottom - top);
            (x - bbox.cx).abs() <= t * bbox.w / 2.0
        }
    }
}
