//! COCO-style annotation ingestion and scale statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};

use crate::error::DatasetError;
use crate::geometry::{classify_scale, BoundingBox, PerScale, ScaleClass};

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(ImageId);
id_type!(AnnotationId);
id_type!(CategoryId);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub bbox: BoundingBox,
    pub category_id: CategoryId,
    pub iscrowd: bool,
}

impl InstanceAnnotation {
    pub fn scale(&self) -> ScaleClass {
        classify_scale(&self.bbox)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
    pub annotations: Vec<InstanceAnnotation>,
}

/// Immutable in-memory dataset. Image order follows the source file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    images: Vec<ImageRecord>,
    categories: BTreeMap<CategoryId, String>,
    index: HashMap<ImageId, usize>,
    dropped_degenerate: usize,
}

impl Dataset {
    /// Builds a dataset from already-validated records.
    pub fn from_parts(
        images: Vec<ImageRecord>,
        categories: BTreeMap<CategoryId, String>,
    ) -> Result<Self, DatasetError> {
        let mut index = HashMap::with_capacity(images.len());
        let mut ann_ids = HashSet::new();
        for (pos, img) in images.iter().enumerate() {
            if index.insert(img.id, pos).is_some() {
                return Err(DatasetError::DuplicateId {
                    kind: "image",
                    id: img.id.0,
                });
            }
            for a in &img.annotations {
                if a.image_id != img.id {
                    return Err(DatasetError::MalformedRecord {
                        kind: "annotation",
                        id: a.id.to_string(),
                        reason: format!("belongs to image {}, listed under {}", a.image_id, img.id),
                    });
                }
                if !ann_ids.insert(a.id) {
                    return Err(DatasetError::DuplicateId {
                        kind: "annotation",
                        id: a.id.0,
                    });
                }
            }
        }
        Ok(Self {
            images,
            categories,
            index,
            dropped_degenerate: 0,
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn categories(&self) -> &BTreeMap<CategoryId, String> {
        &self.categories
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.index.get(&id).map(|&i| &self.images[i])
    }

    pub fn image_ids(&self) -> Vec<ImageId> {
        self.images.iter().map(|i| i.id).collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn instance_count(&self) -> usize {
        self.images.iter().map(|i| i.annotations.len()).sum()
    }

    /// Annotations dropped at ingestion because their box had no area.
    pub fn dropped_degenerate(&self) -> usize {
        self.dropped_degenerate
    }

    /// Serializes to a COCO document (`images`, `annotations`, `categories`).
    pub fn to_coco_json(&self) -> Value {
        let images: Vec<Value> = self
            .images
            .iter()
            .map(|i| {
                json!({
                    "id": i.id,
                    "width": i.width,
                    "height": i.height,
                    "file_name": i.file_name,
                })
            })
            .collect();
        let annotations: Vec<Value> = self
            .images
            .iter()
            .flat_map(|i| i.annotations.iter())
            .map(|a| {
                json!({
                    "id": a.id,
                    "image_id": a.image_id,
                    "bbox": a.bbox.xywh(),
                    "area": a.bbox.area(),
                    "category_id": a.category_id,
                    "iscrowd": u8::from(a.iscrowd),
                })
            })
            .collect();
        let categories: Vec<Value> = self
            .categories
            .iter()
            .map(|(id, name)| json!({ "id": id, "name": name }))
            .collect();
        json!({
            "images": images,
            "annotations": annotations,
            "categories": categories,
        })
    }
}

#[derive(Deserialize)]
struct RawDocument {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    bbox: Vec<f64>,
    category_id: u64,
    #[serde(default, deserialize_with = "crowd_flag")]
    iscrowd: bool,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

fn crowd_flag<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    match Value::deserialize(d)? {
        Value::Bool(b) => Ok(b),
        Value::Number(n) => Ok(n.as_f64().is_some_and(|v| v != 0.0)),
        Value::Null => Ok(false),
        other => Err(serde::de::Error::custom(format!(
            "iscrowd must be 0/1 or a boolean, got {other}"
        ))),
    }
}

/// Reads a COCO annotation file.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_annotations(&text)
}

/// Parses a COCO annotation document held in memory.
///
/// Boxes are read from `bbox` as `[x, y, w, h]`; the stored `area` is ignored.
/// Boxes are clipped to their image, and any box left without area is dropped
/// and counted in [`Dataset::dropped_degenerate`].
pub fn parse_annotations(text: &str) -> Result<Dataset, DatasetError> {
    let raw: RawDocument = match serde_json::from_str(text) {
        Ok(raw) => raw,
        Err(err) => return Err(locate_parse_error(text, err)),
    };

    let mut images = Vec::with_capacity(raw.images.len());
    let mut index = HashMap::with_capacity(raw.images.len());
    for ri in raw.images {
        if ri.width == 0 || ri.height == 0 {
            return Err(DatasetError::MalformedRecord {
                kind: "image",
                id: ri.id.to_string(),
                reason: format!("non-positive size {}x{}", ri.width, ri.height),
            });
        }
        if index.insert(ImageId(ri.id), images.len()).is_some() {
            return Err(DatasetError::DuplicateId {
                kind: "image",
                id: ri.id,
            });
        }
        images.push(ImageRecord {
            id: ImageId(ri.id),
            width: ri.width,
            height: ri.height,
            file_name: ri.file_name,
            annotations: Vec::new(),
        });
    }

    let mut seen = HashSet::with_capacity(raw.annotations.len());
    let mut dropped = 0usize;
    for ra in raw.annotations {
        let malformed = |reason: String| DatasetError::MalformedRecord {
            kind: "annotation",
            id: ra.id.to_string(),
            reason,
        };
        if !seen.insert(ra.id) {
            return Err(DatasetError::DuplicateId {
                kind: "annotation",
                id: ra.id,
            });
        }
        let Some(&pos) = index.get(&ImageId(ra.image_id)) else {
            return Err(malformed(format!("unknown image_id {}", ra.image_id)));
        };
        let [x, y, w, h] = ra.bbox[..] else {
            return Err(malformed(format!(
                "bbox has {} elements, expected 4",
                ra.bbox.len()
            )));
        };
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(malformed("bbox contains a non-finite value".into()));
        }
        let img = &mut images[pos];
        let bbox = if w > 0.0 && h > 0.0 {
            BoundingBox::new(x, y, w, h)
                .map_err(|e| malformed(e.to_string()))?
                .clamp_to(img.width, img.height)
        } else {
            None
        };
        let Some(bbox) = bbox else {
            dropped += 1;
            continue;
        };
        img.annotations.push(InstanceAnnotation {
            id: AnnotationId(ra.id),
            image_id: img.id,
            bbox,
            category_id: CategoryId(ra.category_id),
            iscrowd: ra.iscrowd,
        });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} annotations with degenerate boxes");
    }

    let categories = raw
        .categories
        .into_iter()
        .map(|c| (CategoryId(c.id), c.name))
        .collect();

    Ok(Dataset {
        images,
        categories,
        index,
        dropped_degenerate: dropped,
    })
}

/// Re-reads a document that failed the typed parse to name the offending record.
fn locate_parse_error(text: &str, err: serde_json::Error) -> DatasetError {
    let Ok(doc) = serde_json::from_str::<Value>(text) else {
        return DatasetError::Parse(err);
    };
    fn check<T: serde::de::DeserializeOwned>(
        doc: &Value,
        key: &str,
        kind: &'static str,
    ) -> Option<DatasetError> {
        let items = doc.get(key)?.as_array()?;
        items.iter().enumerate().find_map(|(pos, item)| {
            serde_json::from_value::<T>(item.clone()).err().map(|e| {
                let id = item
                    .get("id")
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| format!("at index {pos}"));
                DatasetError::MalformedRecord {
                    kind,
                    id,
                    reason: e.to_string(),
                }
            })
        })
    }
    check::<RawImage>(&doc, "images", "image")
        .or_else(|| check::<RawAnnotation>(&doc, "annotations", "annotation"))
        .or_else(|| check::<RawCategory>(&doc, "categories", "category"))
        .unwrap_or(DatasetError::Parse(err))
}

/// Per-scale instance counts, instance shares and image coverage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleStats {
    pub images: usize,
    pub instances: u64,
    pub counts: PerScale<u64>,
    pub instance_share: PerScale<f64>,
    pub image_coverage: PerScale<f64>,
}

pub fn dataset_scale_stats(ds: &Dataset) -> Result<ScaleStats, DatasetError> {
    if ds.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut counts = PerScale::<u64>::default();
    let mut covered = PerScale::<u64>::default();
    for img in ds.images() {
        let mut present = PerScale::<bool>::default();
        for a in &img.annotations {
            let c = a.scale();
            counts[c] += 1;
            present[c] = true;
        }
        for c in ScaleClass::ALL {
            covered[c] += u64::from(present[c]);
        }
    }
    let instances = counts.total();
    if instances == 0 {
        return Err(DatasetError::NoInstances);
    }
    let n_images = ds.len() as f64;
    Ok(ScaleStats {
        images: ds.len(),
        instances,
        counts,
        instance_share: counts.map(|n| n as f64 / instances as f64),
        image_coverage: covered.map(|n| n as f64 / n_images),
    })
}
