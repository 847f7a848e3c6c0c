use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized center-format bounding box; the universal geometry unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// Corner form (x1, y1, x2, y2), clamped to [0, 1].
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let x1 = (self.cx - self.w / 2.0).clamp(0.0, 1.0);
        let y1 = (self.cy - self.h / 2.0).clamp(0.0, 1.0);
        let x2 = (self.cx + self.w / 2.0).clamp(0.0, 1.0);
        let y2 = (self.cy + self.h / 2.0).clamp(0.0, 1.0);
        (x1, y1, x2.max(x1), y2.max(y1))
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn area(&self) -> f64 {
        let (x1, y1, x2, y2) = self.corners();
        (x2 - x1) * (y2 - y1)
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }
}

/// Per-image labels for both matching regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub class_ids: Vec<usize>,
    /// Object count of the scene.
    pub crowd_density: usize,
}

impl GroundTruth {
    pub fn empty() -> Self {
        GroundTruth {
            boxes: vec![],
            class_ids: vec![],
            crowd_density: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::data(format!(
                "label mismatch: {} boxes vs {} class ids",
                self.boxes.len(),
                self.class_ids.len()
            )));
        }
        for &c in &self.class_ids {
            if c >= num_classes {
                return Err(Error::UnknownClass {
                    id: c as i64,
                    num_classes,
                });
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic shapes dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Square image side in pixels; must be divisible by 32 (largest stride).
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Cluster objects so a sizable share of pairs overlap (dense scenes).
    pub crowd_mode: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 160,
            num_classes: 3,
            objects_per_image: (1, 8),
            crowd_mode: false,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.num_classes == 0 || self.num_classes > 3 {
            return Err(Error::config(format!(
                "num_classes {} out of supported range 1..=3 (circle/square/triangle)",
                self.num_classes
            )));
        }
        let (lo, hi) = self.objects_per_image;
        if lo < 1 || hi < lo {
            return Err(Error::config(format!(
                "objects_per_image ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        Ok(())
    }
}
