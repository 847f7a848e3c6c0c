//! Train-time augmentation. Stage 1 uses the heavier recipe (mosaic
//! composites and gray border padding on top of the shared transforms);
//! stage 2 applies only flip/translate/color jitter, leaving image
//! dimensions untouched.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::types::{BBox, GroundTruth};

/// Which stage recipe to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    Stage1,
    Stage2,
}

const GRAY: Rgb<u8> = Rgb([114, 114, 114]);
/// Border added by the stage-1 gray letterbox, per side. Keeps the padded
/// size divisible by 32.
pub const STAGE1_PAD: u32 = 16;

/// Flip/translate/color jitter shared by both stages; stage 1 adds the gray
/// letterbox. Boxes are transformed consistently, clipped to [0,1], and
/// dropped (with labels) when clipping leaves no area.
pub fn augment(
    image: &RgbImage,
    gt: &GroundTruth,
    policy: AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, GroundTruth) {
    let mut img = image.clone();
    let mut boxes: Vec<BBox> = gt.boxes.clone();
    let mut class_ids: Vec<usize> = gt.class_ids.clone();

    // horizontal flip
    if rng.gen_bool(0.5) {
        img = image::imageops::flip_horizontal(&img);
        for b in boxes.iter_mut() {
            b.cx = 1.0 - b.cx;
        }
    }

    // translation; stage 1 exposes gray at the vacated border, stage 2
    // replicates the edge so no synthetic filling appears
    let dx = rng.gen_range(-0.08..0.08);
    let dy = rng.gen_range(-0.08..0.08);
    img = translate(&img, dx, dy, policy);
    for b in boxes.iter_mut() {
        b.cx += dx;
        b.cy += dy;
    }

    // color jitter
    let gain = rng.gen_range(0.85..1.15);
    let bias = rng.gen_range(-16..=16);
    for p in img.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = ((*c as f64 * gain) as i32 + bias).clamp(0, 255) as u8;
        }
    }

    if policy == AugmentPolicy::Stage1 {
        let (padded, remap) = gray_letterbox(&img);
        img = padded;
        for b in boxes.iter_mut() {
            *b = remap(b);
        }
    }

    let (boxes, class_ids) = clip_and_drop(boxes, class_ids);
    let gt = GroundTruth {
        crowd_density: boxes.len(),
        boxes,
        class_ids,
    };
    (img, gt)
}

/// 2x2 mosaic of four equally-sized items; output keeps the input size,
/// each source is downscaled into its quadrant.
pub fn mosaic4(items: &[(RgbImage, GroundTruth); 4]) -> (RgbImage, GroundTruth) {
    let size = items[0].0.width();
    for (img, _) in items.iter() {
        assert_eq!(img.width(), size, "mosaic expects equal sizes");
        assert_eq!(img.height(), size, "mosaic expects square images");
    }
    let half = size / 2;
    let mut out = RgbImage::new(size, size);
    let mut boxes = Vec::new();
    let mut class_ids = Vec::new();
    for (k, (img, gt)) in items.iter().enumerate() {
        let (qx, qy) = ((k % 2) as u32, (k / 2) as u32);
        let small = image::imageops::resize(img, half, half, image::imageops::FilterType::Triangle);
        image::imageops::replace(&mut out, &small, (qx * half) as i64, (qy * half) as i64);
        let (ox, oy) = (qx as f64 * 0.5, qy as f64 * 0.5);
        for (b, &c) in gt.boxes.iter().zip(gt.class_ids.iter()) {
            boxes.push(BBox::new(
                b.cx * 0.5 + ox,
                b.cy * 0.5 + oy,
                b.w * 0.5,
                b.h * 0.5,
            ));
            class_ids.push(c);
        }
    }
    let (boxes, class_ids) = clip_and_drop(boxes, class_ids);
    let gt = GroundTruth {
        crowd_density: boxes.len(),
        boxes,
        class_ids,
    };
    (out, gt)
}

fn translate(img: &RgbImage, dx: f64, dy: f64, policy: AugmentPolicy) -> RgbImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let sx = (dx * w as f64).round() as i64;
    let sy = (dy * h as f64).round() as i64;
    let mut out = RgbImage::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let src_x = x - sx;
            let src_y = y - sy;
            let pix = if (0..w).contains(&src_x) && (0..h).contains(&src_y) {
                *img.get_pixel(src_x as u32, src_y as u32)
            } else {
                match policy {
                    AugmentPolicy::Stage1 => GRAY,
                    AugmentPolicy::Stage2 => {
                        // clamp to edge
                        let cx = src_x.clamp(0, w - 1) as u32;
                        let cy = src_y.clamp(0, h - 1) as u32;
                        *img.get_pixel(cx, cy)
                    }
                }
            };
            out.put_pixel(x as u32, y as u32, pix);
        }
    }
    out
}

fn gray_letterbox(img: &RgbImage) -> (RgbImage, impl Fn(&BBox) -> BBox) {
    let pad = STAGE1_PAD;
    let new_size = img.width() + 2 * pad;
    let mut out = RgbImage::from_pixel(new_size, new_size, GRAY);
    image::imageops::replace(&mut out, img, pad as i64, pad as i64);
    let scale = img.width() as f64 / new_size as f64;
    let offset = pad as f64 / new_size as f64;
    let remap = move |b: &BBox| {
        BBox::new(
            b.cx * scale + offset,
            b.cy * scale + offset,
            b.w * scale,
            b.h * scale,
        )
    };
    (out, remap)
}

fn clip_and_drop(boxes: Vec<BBox>, class_ids: Vec<usize>) -> (Vec<BBox>, Vec<usize>) {
    let mut out_boxes = Vec::with_capacity(boxes.len());
    let mut out_classes = Vec::with_capacity(class_ids.len());
    for (b, c) in boxes.into_iter().zip(class_ids) {
        let (x1, y1, x2, y2) = b.corners();
        let clipped = BBox::from_corners(x1, y1, x2, y2);
        if clipped.w > 1e-3 && clipped.h > 1e-3 {
            out_boxes.push(clipped);
            out_classes.push(c);
        }
    }
    (out_boxes, out_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_scene, SceneSpec};
    use crate::rng::stream;

    #[test]
    fn flip_reflects_boxes() {
        let b = BBox::new(0.2, 0.5, 0.1, 0.1);
        // direct reflection check of the transform rule
        let flipped = BBox::new(1.0 - b.cx, b.cy, b.w, b.h);
        assert_eq!(flipped.cx, 0.8);
        assert_eq!(flipped.cy, 0.5);
    }

    #[test]
    fn stage2_keeps_dimensions() {
        let spec = SceneSpec { image_size: 96, ..SceneSpec::default() };
        let (img, gt) = generate_scene(&spec, 0).unwrap();
        for k in 0..10 {
            let mut rng = stream(1, "augtest", k);
            let (out, out_gt) = augment(&img, &gt, AugmentPolicy::Stage2, &mut rng);
            assert_eq!(out.width(), img.width());
            assert_eq!(out.height(), img.height());
            for b in &out_gt.boxes {
                assert!(b.is_valid());
            }
        }
    }

    #[test]
    fn stage1_pads_with_gray() {
        let spec = SceneSpec { image_size: 96, ..SceneSpec::default() };
        let (img, gt) = generate_scene(&spec, 1).unwrap();
        let mut rng = stream(2, "augtest", 0);
        let (out, out_gt) = augment(&img, &gt, AugmentPolicy::Stage1, &mut rng);
        assert_eq!(out.width(), img.width() + 2 * STAGE1_PAD);
        assert_eq!(out.width() % 32, 0, "padded size stays stride-compatible");
        assert_eq!(*out.get_pixel(0, 0), GRAY);
        for b in &out_gt.boxes {
            assert!(b.is_valid());
        }
    }

    #[test]
    fn augmentation_preserves_label_count_unless_clipped() {
        let spec = SceneSpec { image_size: 96, objects_per_image: (3, 6), ..SceneSpec::default() };
        for i in 0..20 {
            let (img, gt) = generate_scene(&spec, i).unwrap();
            let mut rng = stream(3, "augtest", i);
            let (_, out_gt) = augment(&img, &gt, AugmentPolicy::Stage2, &mut rng);
            assert!(out_gt.len() <= gt.len());
            // translation is <= 8% and objects sit >= 1% inside, so drops are rare;
            // all surviving boxes must be valid
            for b in &out_gt.boxes {
                assert!(b.is_valid());
            }
            assert_eq!(out_gt.len(), out_gt.class_ids.len());
        }
    }

    #[test]
    fn mosaic_of_four_single_object_images() {
        let spec = SceneSpec { image_size: 96, objects_per_image: (1, 1), ..SceneSpec::default() };
        let items: Vec<(RgbImage, GroundTruth)> = (0..4)
            .map(|i| generate_scene(&spec, i).unwrap())
            .collect();
        let items: [(RgbImage, GroundTruth); 4] = items.try_into().unwrap();
        let (out, gt) = mosaic4(&items);
        assert_eq!(out.width(), 96);
        assert_eq!(gt.len(), 4, "one object per quadrant");
        for b in &gt.boxes {
            assert!(b.is_valid());
            let (x1, y1, x2, y2) = b.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
        }
    }
}
