//! Plant annotations in COCO format: one bounding box per plant, reduced to
//! box centers in plot meters.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::geometry::{pixel_to_meters, Extents, PointSet};

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("COCO document is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("COCO `{path}`: {message}")]
    Malformed { path: String, message: String },
}

fn malformed(path: impl Into<String>, message: impl Into<String>) -> CocoError {
    CocoError::Malformed {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub plants: PointSet,
}

impl CocoImage {
    pub fn count(&self) -> usize {
        self.plants.len()
    }
}

fn field<'a>(obj: &'a Value, path: &str, key: &str) -> Result<&'a Value, CocoError> {
    obj.get(key)
        .ok_or_else(|| malformed(format!("{path}.{key}"), "missing"))
}

fn as_u64(v: &Value, path: String) -> Result<u64, CocoError> {
    v.as_u64()
        .ok_or_else(|| malformed(path, "expected a non-negative integer"))
}

fn array<'a>(doc: &'a Value, key: &str) -> Result<&'a Vec<Value>, CocoError> {
    field(doc, "$", key)?
        .as_array()
        .ok_or_else(|| malformed(format!("$.{key}"), "expected an array"))
}

/// Parses a COCO document; every image gets the same ground extents.
pub fn parse_coco(text: &str, extents: Extents) -> Result<BTreeMap<u64, CocoImage>, CocoError> {
    let doc: Value = serde_json::from_str(text)?;
    let mut images = BTreeMap::new();
    for (i, img) in array(&doc, "images")?.iter().enumerate() {
        let p = format!("$.images[{i}]");
        let id = as_u64(field(img, &p, "id")?, format!("{p}.id"))?;
        let file_name = field(img, &p, "file_name")?
            .as_str()
            .ok_or_else(|| malformed(format!("{p}.file_name"), "expected a string"))?
            .to_string();
        let width = as_u64(field(img, &p, "width")?, format!("{p}.width"))?;
        let height = as_u64(field(img, &p, "height")?, format!("{p}.height"))?;
        if width == 0 || height == 0 || width > u64::from(u32::MAX) || height > u64::from(u32::MAX) {
            return Err(malformed(p, "image size must be positive"));
        }
        let entry = CocoImage {
            id,
            file_name,
            width: width as u32,
            height: height as u32,
            plants: PointSet::empty(extents),
        };
        if images.insert(id, entry).is_some() {
            return Err(malformed(format!("{p}.id"), format!("duplicate image id {id}")));
        }
    }
    for (i, ann) in array(&doc, "annotations")?.iter().enumerate() {
        let p = format!("$.annotations[{i}]");
        let image_id = as_u64(field(ann, &p, "image_id")?, format!("{p}.image_id"))?;
        let bbox = field(ann, &p, "bbox")?
            .as_array()
            .filter(|b| b.len() == 4)
            .ok_or_else(|| malformed(format!("{p}.bbox"), "expected [x, y, width, height]"))?;
        let mut nums = [0.0; 4];
        for (k, v) in bbox.iter().enumerate() {
            nums[k] = v
                .as_f64()
                .ok_or_else(|| malformed(format!("{p}.bbox[{k}]"), "expected a number"))?;
        }
        let [x, y, w, h] = nums;
        let img = images
            .get_mut(&image_id)
            .ok_or_else(|| malformed(format!("{p}.image_id"), format!("no image with id {image_id}")))?;
        let center = pixel_to_meters(x + w / 2.0, y + h / 2.0, img.width, img.height, extents)
            .map_err(|e| malformed(format!("{p}.bbox"), e.to_string()))?;
        img.plants.points.push(center);
    }
    Ok(images)
}

pub fn load_coco(path: &Path, extents: Extents) -> Result<BTreeMap<u64, CocoImage>, CocoError> {
    let text = std::fs::read_to_string(path).map_err(|source| CocoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_coco(&text, extents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    const E: Extents = Extents::new(1.0, 1.0);

    #[test]
    fn box_center_to_meters() {
        let doc = r#"{
          "images": [{"id": 7, "file_name": "plot.png", "width": 100, "height": 100}],
          "annotations": [{"id": 1, "image_id": 7, "bbox": [10, 10, 4, 4], "category_id": 1}],
          "categories": [{"id": 1, "name": "plant"}]
        }"#;
        let imgs = parse_coco(doc, E).unwrap();
        let img = &imgs[&7];
        assert_eq!(img.count(), 1);
        let expected = pixel_to_meters(12.0, 12.0, 100, 100, E).unwrap();
        assert_eq!(img.plants.points[0], expected);
        assert_eq!(expected, Point::new(12.5 / 100.0 - 0.5, 0.5 - 12.5 / 100.0));
    }

    #[test]
    fn counts_per_image() {
        let anns: Vec<String> = (0..14)
            .map(|i| format!(r#"{{"id": {i}, "image_id": 1, "bbox": [{}, 5, 2, 2]}}"#, i * 5))
            .collect();
        let doc = format!(
            r#"{{"images": [{{"id": 1, "file_name": "a.png", "width": 100, "height": 20}},
                           {{"id": 2, "file_name": "b.png", "width": 100, "height": 20}}],
                "annotations": [{}]}}"#,
            anns.join(",")
        );
        let imgs = parse_coco(&doc, E).unwrap();
        assert_eq!(imgs[&1].count(), 14);
        assert!(imgs[&2].plants.is_empty());
    }

    #[test]
    fn malformed_reports_path() {
        let doc = r#"{"images": [{"id": 1, "file_name": "a", "width": 10, "height": 10}],
                      "annotations": [{"image_id": 1, "bbox": [1, 2, "x", 4]}]}"#;
        let err = parse_coco(doc, E).unwrap_err().to_string();
        assert!(err.contains("$.annotations[0].bbox[2]"), "{err}");

        let doc = r#"{"images": [{"id": 1, "width": 10, "height": 10}], "annotations": []}"#;
        let err = parse_coco(doc, E).unwrap_err().to_string();
        assert!(err.contains("$.images[0].file_name"), "{err}");

        let doc = r#"{"images": [], "annotations": [{"image_id": 3, "bbox": [0,0,1,1]}]}"#;
        let err = parse_coco(doc, E).unwrap_err().to_string();
        assert!(err.contains("no image with id 3"), "{err}");
    }
}
