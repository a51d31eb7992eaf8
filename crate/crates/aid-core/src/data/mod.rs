//! Datasets: a deterministic synthetic generator plus KITTI-label and
//! COCO-annotation ingestion, all funneled into one handle type.

mod coco;
mod kitti;
mod synthetic;

pub use coco::{filter_coco_traffic, TRAFFIC_CATEGORIES};
pub use kitti::{parse_kitti_labels, parse_kitti_objects, serialize_kitti_objects, KittiObject};
pub use synthetic::{generate_synthetic, SyntheticSpec, SHAPE_CLASS_NAMES};

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use crate::types::{GeometryError, ImageSample, Instance};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("image error: {0}")]
    Image(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One dataset entry; pixels are either held in memory (synthetic data) or
/// loaded lazily from `image_path`.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
    pub pixels: Option<Tensor>,
    pub image_path: Option<PathBuf>,
}

impl SampleRecord {
    pub fn load_sample(&self) -> Result<ImageSample, DataError> {
        let pixels = match (&self.pixels, &self.image_path) {
            (Some(p), _) => p.clone(),
            (None, Some(path)) => read_png(path)?,
            (None, None) => {
                return Err(DataError::Inconsistent(format!(
                    "sample {} has neither pixels nor an image path",
                    self.image_id
                )))
            }
        };
        ImageSample::new(self.image_id.clone(), pixels, self.instances.clone())
            .map_err(DataError::from)
    }
}

/// An ordered split of samples with its class-name table.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub samples: Vec<SampleRecord>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl DatasetHandle {
    pub fn new(
        samples: Vec<SampleRecord>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self, DataError> {
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if !seen.insert(s.image_id.as_str()) {
                return Err(DataError::Inconsistent(format!("duplicate image id {}", s.image_id)));
            }
            for inst in &s.instances {
                if inst.class_id as usize >= class_names.len() {
                    return Err(DataError::Inconsistent(format!(
                        "image {}: class id {} out of range ({} classes)",
                        s.image_id,
                        inst.class_id,
                        class_names.len()
                    )));
                }
            }
        }
        Ok(DatasetHandle { samples, class_names, split })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Materialize every sample's pixels.
    pub fn load_all(&self) -> Result<Vec<ImageSample>, DataError> {
        self.samples.iter().map(|s| s.load_sample()).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    image_id: String,
    instances: Vec<LabelInstance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelInstance {
    class_id: u32,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    class_names: Vec<String>,
    split: Split,
    image_size: usize,
}

/// Persist a dataset directory: `images/{id}.png`, `labels.jsonl` (one record
/// per image), and a small manifest. Output bytes are a pure function of the
/// handle, so re-writing the same data is byte-identical.
pub fn save_dataset(handle: &DatasetHandle, dir: &Path) -> Result<(), DataError> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut labels = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.jsonl"))?);
    let mut image_size = 0;
    for s in &handle.samples {
        let pixels = s.load_sample()?.pixels;
        image_size = pixels.w.max(image_size);
        write_png(&pixels, &images_dir.join(format!("{}.png", s.image_id)))?;
        let line = LabelLine {
            image_id: s.image_id.clone(),
            instances: s
                .instances
                .iter()
                .map(|i| LabelInstance { class_id: i.class_id, bbox: i.bbox.into() })
                .collect(),
        };
        serde_json::to_writer(&mut labels, &line)
            .map_err(|e| DataError::Schema(e.to_string()))?;
        labels.write_all(b"\n")?;
    }
    labels.flush()?;
    let manifest = DatasetManifest {
        class_names: handle.class_names.clone(),
        split: handle.split,
        image_size,
    };
    std::fs::write(
        dir.join("dataset.json"),
        serde_json::to_vec_pretty(&manifest).map_err(|e| DataError::Schema(e.to_string()))?,
    )?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`]. Pixels stay on disk
/// until a sample is materialized.
pub fn load_dataset(dir: &Path) -> Result<DatasetHandle, DataError> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("dataset.json"))?)
            .map_err(|e| DataError::Schema(format!("dataset.json: {e}")))?;
    let file = std::fs::File::open(dir.join("labels.jsonl"))?;
    let mut samples = Vec::new();
    for (li, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelLine = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: li + 1, message: e.to_string() })?;
        let instances = rec
            .instances
            .iter()
            .enumerate()
            .map(|(idx, i)| {
                Ok(Instance {
                    instance_id: idx as u32,
                    class_id: i.class_id,
                    bbox: i.bbox.try_into()?,
                })
            })
            .collect::<Result<Vec<_>, GeometryError>>()?;
        let path = dir.join("images").join(format!("{}.png", rec.image_id));
        samples.push(SampleRecord {
            image_id: rec.image_id,
            width: manifest.image_size,
            height: manifest.image_size,
            instances,
            pixels: None,
            image_path: Some(path),
        });
    }
    DatasetHandle::new(samples, manifest.class_names, manifest.split)
}

fn write_png(pixels: &Tensor, path: &Path) -> Result<(), DataError> {
    assert_eq!(pixels.c, 3);
    let (h, w) = (pixels.h, pixels.w);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (pixels.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (pixels.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| DataError::Image(e.to_string()))
}

pub fn read_png(path: &Path) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image(e.to_string()))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.set(c, y, x, px.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}
