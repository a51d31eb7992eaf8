//! KITTI 2D label ingestion.
//!
//! One object per line, space-separated:
//! `type truncated occluded alpha x1 y1 x2 y2 h w l tx ty tz ry [score]`.
//! Only the type and the 2-D box (fields 4..8) feed detection; truncation and
//! occlusion are kept as metadata, the 3-D fields are ignored.

use super::DataError;
use crate::types::{BoundingBox, Instance};

/// A parsed KITTI object with the metadata the detector does not consume.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiObject {
    pub type_name: String,
    pub truncated: f64,
    pub occluded: i32,
    pub instance: Instance,
}

/// Parse KITTI label text, keeping lines whose type is in `classes`
/// (case-sensitive; class id = position in the list). `DontCare` and any
/// other types are skipped. Malformed lines fail with their line number.
pub fn parse_kitti_objects(text: &str, classes: &[&str]) -> Result<Vec<KittiObject>, DataError> {
    let mut out = Vec::new();
    for (li, line) in text.lines().enumerate() {
        let line_no = li + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 15 {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected >= 15 fields, got {}", fields.len()),
            });
        }
        let type_name = fields[0];
        let class_id = match classes.iter().position(|c| *c == type_name) {
            Some(p) => p as u32,
            None => continue,
        };
        let num = |idx: usize| -> Result<f64, DataError> {
            fields[idx].parse::<f64>().map_err(|e| DataError::Parse {
                line: line_no,
                message: format!("field {idx} ({:?}): {e}", fields[idx]),
            })
        };
        let truncated = num(1)?;
        let occluded = num(2)? as i32;
        let bbox = BoundingBox::new(num(4)?, num(5)?, num(6)?, num(7)?).map_err(|e| {
            DataError::Parse { line: line_no, message: e.to_string() }
        })?;
        out.push(KittiObject {
            type_name: type_name.to_string(),
            truncated,
            occluded,
            instance: Instance { instance_id: out.len() as u32, class_id, bbox },
        });
    }
    Ok(out)
}

/// Parse KITTI label text into plain instances (see [`parse_kitti_objects`]).
pub fn parse_kitti_labels(text: &str, classes: &[&str]) -> Result<Vec<Instance>, DataError> {
    Ok(parse_kitti_objects(text, classes)?.into_iter().map(|o| o.instance).collect())
}

/// Write objects back in KITTI layout (3-D fields zeroed). Round-trips the
/// type, truncation/occlusion and box fields exactly.
pub fn serialize_kitti_objects(objects: &[KittiObject]) -> String {
    let mut out = String::new();
    for o in objects {
        out.push_str(&format!(
            "{} {} {} 0.00 {} {} {} {} 0 0 0 0 0 0 0\n",
            o.type_name,
            o.truncated,
            o.occluded,
            o.instance.bbox.x1(),
            o.instance.bbox.y1(),
            o.instance.bbox.x2(),
            o.instance.bbox.y2(),
        ));
    }
    out
}

pub const KITTI_CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];
