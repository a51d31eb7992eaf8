//! COCO annotation ingestion filtered to traffic categories.

use serde::Deserialize;

use super::{DataError, DatasetHandle, SampleRecord, Split};
use crate::types::{clip_box, BoundingBox, GeometryError, Instance};

/// The traffic-relevant COCO categories, in canonical id order.
pub const TRAFFIC_CATEGORIES: [&str; 11] = [
    "person",
    "stop sign",
    "traffic light",
    "fire hydrant",
    "parking meter",
    "bus",
    "motorcycle",
    "bicycle",
    "car",
    "train",
    "truck",
];

#[derive(Debug, Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: i64,
    #[allow(dead_code)]
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: i64,
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: i64,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

/// Filter a COCO annotation document down to the named categories.
///
/// Annotation boxes `[x, y, w, h]` become corner boxes, crowd annotations are
/// skipped, images left without annotations are dropped, and category ids are
/// remapped to the position of their name in `category_names`.
pub fn filter_coco_traffic(
    document: &str,
    category_names: &[&str],
) -> Result<DatasetHandle, DataError> {
    let doc: CocoDocument =
        serde_json::from_str(document).map_err(|e| DataError::Schema(e.to_string()))?;

    let remap: std::collections::HashMap<i64, u32> = doc
        .categories
        .iter()
        .filter_map(|c| {
            category_names.iter().position(|n| *n == c.name).map(|p| (c.id, p as u32))
        })
        .collect();

    let mut per_image: std::collections::HashMap<i64, Vec<Instance>> = Default::default();
    let mut order: Vec<i64> = Vec::new();
    let image_dims: std::collections::HashMap<i64, (usize, usize)> =
        doc.images.iter().map(|im| (im.id, (im.width, im.height))).collect();

    for ann in &doc.annotations {
        if ann.iscrowd != 0 {
            continue;
        }
        let Some(&class_id) = remap.get(&ann.category_id) else { continue };
        let Some(&(w, h)) = image_dims.get(&ann.image_id) else {
            return Err(DataError::Schema(format!(
                "annotation {} references unknown image {}",
                ann.id, ann.image_id
            )));
        };
        let [x, y, bw, bh] = ann.bbox;
        let bbox = BoundingBox::new(x, y, x + bw, y + bh).map_err(|e| {
            DataError::Schema(format!("annotation {}: {e}", ann.id))
        })?;
        let bbox = match clip_box(&bbox, w as f64, h as f64) {
            Ok(b) => b,
            Err(GeometryError::BoxOutsideImage { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let list = per_image.entry(ann.image_id).or_default();
        if list.is_empty() {
            order.push(ann.image_id);
        }
        list.push(Instance { instance_id: list.len() as u32, class_id, bbox });
    }

    // keep document image order for ids that survived
    let mut ordered_ids: Vec<i64> =
        doc.images.iter().map(|im| im.id).filter(|id| per_image.contains_key(id)).collect();
    if ordered_ids.len() != order.len() {
        // annotations referencing images outside `images` were already
        // rejected above, so the two sets agree; this keeps image order
        // canonical.
        ordered_ids = order;
    }

    let samples = ordered_ids
        .into_iter()
        .map(|id| {
            let (width, height) = image_dims[&id];
            SampleRecord {
                image_id: id.to_string(),
                width,
                height,
                instances: per_image.remove(&id).expect("id collected above"),
                pixels: None,
                image_path: None,
            }
        })
        .collect();

    DatasetHandle::new(
        samples,
        category_names.iter().map(|s| s.to_string()).collect(),
        Split::Val,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> String {
        serde_json::json!({
            "images": [
                {"id": 1, "file_name": "a.jpg", "width": 100, "height": 80},
                {"id": 2, "file_name": "b.jpg", "width": 100, "height": 80},
                {"id": 3, "file_name": "c.jpg", "width": 100, "height": 80}
            ],
            "annotations": [
                {"id": 10, "image_id": 1, "category_id": 7, "bbox": [10.0, 20.0, 30.0, 40.0], "iscrowd": 0},
                {"id": 11, "image_id": 1, "category_id": 99, "bbox": [0.0, 0.0, 5.0, 5.0], "iscrowd": 0},
                {"id": 12, "image_id": 2, "category_id": 99, "bbox": [0.0, 0.0, 5.0, 5.0], "iscrowd": 0},
                {"id": 13, "image_id": 3, "category_id": 44, "bbox": [1.0, 2.0, 3.0, 4.0], "iscrowd": 0},
                {"id": 14, "image_id": 3, "category_id": 7, "bbox": [5.0, 5.0, 10.0, 10.0], "iscrowd": 1}
            ],
            "categories": [
                {"id": 7, "name": "car"},
                {"id": 44, "name": "person"},
                {"id": 99, "name": "dog"}
            ]
        })
        .to_string()
    }

    #[test]
    fn converts_and_filters() {
        let handle = filter_coco_traffic(&doc(), &TRAFFIC_CATEGORIES).unwrap();
        // image 2 had only dog annotations and is dropped; crowd skipped
        assert_eq!(handle.len(), 2);
        assert_eq!(handle.class_names.len(), 11);

        let img1 = &handle.samples[0];
        assert_eq!(img1.image_id, "1");
        assert_eq!(img1.instances.len(), 1);
        let b = img1.instances[0].bbox;
        assert_eq!((b.x1(), b.y1(), b.x2(), b.y2()), (10.0, 20.0, 40.0, 60.0));
        assert_eq!(img1.instances[0].class_id, 8); // "car" position in the list

        let img3 = &handle.samples[1];
        assert_eq!(img3.instances.len(), 1);
        assert_eq!(img3.instances[0].class_id, 0); // "person"
    }

    #[test]
    fn unrelated_categories_give_empty_dataset() {
        let d = serde_json::json!({
            "images": [{"id": 1, "file_name": "a.jpg", "width": 10, "height": 10}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 5, "bbox": [1.0,1.0,2.0,2.0]}],
            "categories": [{"id": 5, "name": "dog"}]
        })
        .to_string();
        let handle = filter_coco_traffic(&d, &TRAFFIC_CATEGORIES).unwrap();
        assert!(handle.is_empty());
    }

    #[test]
    fn missing_keys_are_schema_errors() {
        assert!(matches!(
            filter_coco_traffic("{\"images\": []}", &TRAFFIC_CATEGORIES),
            Err(DataError::Schema(_))
        ));
    }

    #[test]
    fn kept_counts_match_manual_walkthrough() {
        // Hand enumeration of doc(): image 1 keeps ann 10 (car), loses 11
        // (dog); image 2 loses its only ann; image 3 keeps 13 (person),
        // loses 14 (crowd). Two images, one instance each.
        let handle = filter_coco_traffic(&doc(), &TRAFFIC_CATEGORIES).unwrap();
        let counts: Vec<usize> = handle.samples.iter().map(|s| s.instances.len()).collect();
        assert_eq!(counts, vec![1, 1]);
    }
}
