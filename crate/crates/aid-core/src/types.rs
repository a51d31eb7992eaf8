//! Shared geometric and data-model primitives.
//!
//! Boxes are axis-aligned corner rectangles in continuous pixel coordinates.
//! Validity (x2 > x1, y2 > y1, finite) is enforced at construction so the
//! geometric operations themselves are infallible.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2}): requires finite coordinates, x2 > x1, y2 > y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box ({x1}, {y1}, {x2}, {y2}) lies outside a {width}x{height} image")]
    BoxOutsideImage { x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64 },
    #[error("detection score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("image dimensions must be positive")]
    EmptyImage,
}

/// Axis-aligned box in `(x1, y1, x2, y2)` corner form.
///
/// Serialized as a 4-element array; center/size forms are converted at the
/// detector head boundary only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;
    fn try_from(v: [f64; 4]) -> Result<Self, GeometryError> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> [f64; 4] {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn longest_side(&self) -> f64 {
        self.width().max(self.height())
    }
}

/// Geometric area of a valid box.
pub fn box_area(b: &BoundingBox) -> f64 {
    b.width() * b.height()
}

/// Intersection-over-union of two valid boxes. Symmetric, in [0, 1],
/// 0 when disjoint.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (box_area(a) + box_area(b) - inter)
}

/// Clamp a box to `[0, width] × [0, height]`.
///
/// Fails with [`GeometryError::BoxOutsideImage`] when the clipped box has
/// zero area (the box lies entirely outside the image).
pub fn clip_box(b: &BoundingBox, width: f64, height: f64) -> Result<BoundingBox, GeometryError> {
    assert!(width > 0.0 && height > 0.0, "image dimensions must be positive");
    let x1 = b.x1.clamp(0.0, width);
    let y1 = b.y1.clamp(0.0, height);
    let x2 = b.x2.clamp(0.0, width);
    let y2 = b.y2.clamp(0.0, height);
    BoundingBox::new(x1, y1, x2, y2).map_err(|_| GeometryError::BoxOutsideImage {
        x1: b.x1,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
        width,
        height,
    })
}

/// One ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: u32,
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// An image with its ground-truth instances. Pixels are `[3, h, w]` in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image_id: String,
    pub pixels: Tensor,
    pub instances: Vec<Instance>,
}

impl ImageSample {
    /// Builds a sample, clipping instance boxes to the image bounds. Instances
    /// entirely outside the image are rejected.
    pub fn new(
        image_id: String,
        pixels: Tensor,
        instances: Vec<Instance>,
    ) -> Result<Self, GeometryError> {
        if pixels.h == 0 || pixels.w == 0 {
            return Err(GeometryError::EmptyImage);
        }
        assert_eq!(pixels.c, 3, "pixels must be [3, h, w]");
        let (w, h) = (pixels.w as f64, pixels.h as f64);
        let mut clipped = Vec::with_capacity(instances.len());
        for mut inst in instances {
            inst.bbox = clip_box(&inst.bbox, w, h)?;
            clipped.push(inst);
        }
        Ok(ImageSample { image_id, pixels, instances: clipped })
    }

    pub fn width(&self) -> usize {
        self.pixels.w
    }

    pub fn height(&self) -> usize {
        self.pixels.h
    }

    /// Mirror the image and its boxes horizontally.
    pub fn flipped_horizontal(&self) -> ImageSample {
        let mut pixels = Tensor::zeros(3, self.pixels.h, self.pixels.w);
        for c in 0..3 {
            for y in 0..self.pixels.h {
                for x in 0..self.pixels.w {
                    pixels.set(c, y, x, self.pixels.get(c, y, self.pixels.w - 1 - x));
                }
            }
        }
        let w = self.pixels.w as f64;
        let instances = self
            .instances
            .iter()
            .map(|inst| Instance {
                bbox: BoundingBox::new(
                    w - inst.bbox.x2(),
                    inst.bbox.y1(),
                    w - inst.bbox.x1(),
                    inst.bbox.y2(),
                )
                .expect("mirrored box stays valid"),
                ..*inst
            })
            .collect();
        ImageSample { image_id: self.image_id.clone(), pixels, instances }
    }
}

/// A scored predicted box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl Detection {
    pub fn new(class_id: u32, bbox: BoundingBox, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) || !score.is_finite() {
            return Err(GeometryError::InvalidScore(score));
        }
        Ok(Detection { class_id, bbox, score })
    }
}
