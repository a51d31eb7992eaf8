//! Center-sampling target assignment.
//!
//! A location is foreground for an instance iff its center lies inside the
//! instance's central sub-box (half the width/height) and the instance's
//! longest side falls in the level's size bucket. Overlap ties go to the
//! smaller-area instance, then to the lower instance id.

use super::DetectorSpec;
use crate::types::Instance;

/// Sentinel instance id for background locations.
pub const BACKGROUND: u32 = u32::MAX;

const CENTER_FRACTION: f64 = 0.5;

/// Assignment grid of one FPN level.
#[derive(Debug, Clone)]
pub struct LevelAssignment {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Assigned `instance_id` per location, `BACKGROUND` elsewhere.
    pub instance: Vec<u32>,
    /// Class target per location (valid at foreground locations).
    pub cls: Vec<u32>,
    /// Left/top/right/bottom distance targets in stride units (foreground only).
    pub distances: Vec<[f64; 4]>,
    /// 1.0 at foreground locations, 0.0 elsewhere.
    pub objectness: Vec<f64>,
}

impl LevelAssignment {
    #[inline]
    pub fn loc(&self, y: usize, x: usize) -> usize {
        y * self.w + x
    }

    #[inline]
    pub fn is_foreground(&self, loc: usize) -> bool {
        self.instance[loc] != BACKGROUND
    }
}

/// Per-level target grids for one image.
#[derive(Debug, Clone)]
pub struct TargetAssignment {
    pub levels: Vec<LevelAssignment>,
    pub num_foreground: usize,
}

impl TargetAssignment {
    /// Foreground location count, floored at one for loss normalization.
    pub fn norm(&self) -> f64 {
        self.num_foreground.max(1) as f64
    }

    /// Ids of instances that received at least one location.
    pub fn assigned_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .levels
            .iter()
            .flat_map(|l| l.instance.iter().copied())
            .filter(|&id| id != BACKGROUND)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Assign ground-truth instances to FPN locations for an image of the given
/// (padded) size. An empty instance list yields an all-background assignment.
pub fn assign_targets(
    instances: &[Instance],
    spec: &DetectorSpec,
    image_width: usize,
    image_height: usize,
) -> TargetAssignment {
    let mut levels = Vec::with_capacity(spec.num_levels());
    let mut num_foreground = 0;
    for (li, &stride) in spec.fpn_strides.iter().enumerate() {
        let (h, w) = spec.level_dims(li, image_height, image_width);
        let (lo, hi) = spec.size_bucket(li);
        let candidates: Vec<&Instance> = instances
            .iter()
            .filter(|inst| {
                let side = inst.bbox.longest_side();
                side >= lo && side < hi
            })
            .collect();
        let mut level = LevelAssignment {
            stride,
            h,
            w,
            instance: vec![BACKGROUND; h * w],
            cls: vec![0; h * w],
            distances: vec![[0.0; 4]; h * w],
            objectness: vec![0.0; h * w],
        };
        let s = stride as f64;
        for y in 0..h {
            let cy = (y as f64 + 0.5) * s;
            for x in 0..w {
                let cx = (x as f64 + 0.5) * s;
                let mut best: Option<&Instance> = None;
                for inst in &candidates {
                    let b = &inst.bbox;
                    let (bcx, bcy) = b.center();
                    let half_w = b.width() * CENTER_FRACTION / 2.0;
                    let half_h = b.height() * CENTER_FRACTION / 2.0;
                    if (cx - bcx).abs() <= half_w && (cy - bcy).abs() <= half_h {
                        best = match best {
                            None => Some(inst),
                            Some(cur) => {
                                let (a_cur, a_new) =
                                    (crate::types::box_area(&cur.bbox), crate::types::box_area(b));
                                if a_new < a_cur
                                    || (a_new == a_cur && inst.instance_id < cur.instance_id)
                                {
                                    Some(inst)
                                } else {
                                    Some(cur)
                                }
                            }
                        };
                    }
                }
                if let Some(inst) = best {
                    let loc = level.loc(y, x);
                    level.instance[loc] = inst.instance_id;
                    level.cls[loc] = inst.class_id;
                    level.distances[loc] = [
                        (cx - inst.bbox.x1()) / s,
                        (cy - inst.bbox.y1()) / s,
                        (inst.bbox.x2() - cx) / s,
                        (inst.bbox.y2() - cy) / s,
                    ];
                    level.objectness[loc] = 1.0;
                    num_foreground += 1;
                }
            }
        }
        levels.push(level);
    }
    TargetAssignment { levels, num_foreground }
}
