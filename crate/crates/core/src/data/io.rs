use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{Annotation, Scene, CATEGORY_NAMES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub id: u64,
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub category_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryEntry {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    pub categories: Vec<CategoryEntry>,
}

impl DatasetManifest {
    /// Referential and geometric checks beyond what the schema enforces.
    pub fn validate(&self) -> Result<()> {
        let parse = |field: String, reason: String| Err(Error::Parse { field, reason });
        let mut sizes = HashMap::new();
        for (i, im) in self.images.iter().enumerate() {
            if sizes.insert(im.id, (im.width, im.height)).is_some() {
                return parse(format!("images[{i}].id"), format!("duplicate image id {}", im.id));
            }
            if im.width == 0 || im.height == 0 {
                return parse(format!("images[{i}].width"), "image size must be positive".into());
            }
        }
        let cats: HashSet<u32> = self.categories.iter().map(|c| c.id).collect();
        let mut ann_ids = HashSet::new();
        for (i, a) in self.annotations.iter().enumerate() {
            if !ann_ids.insert(a.id) {
                return parse(format!("annotations[{i}].id"), format!("duplicate annotation id {}", a.id));
            }
            let Some(&(w, h)) = sizes.get(&a.image_id) else {
                return parse(format!("annotations[{i}].image_id"), format!("no image with id {}", a.image_id));
            };
            if !cats.contains(&a.category_id) {
                return parse(
                    format!("annotations[{i}].category_id"),
                    format!("no category with id {}", a.category_id),
                );
            }
            let [x, y, bw, bh] = a.bbox;
            let inside = a.bbox.iter().all(|v| v.is_finite())
                && x >= 0.0
                && y >= 0.0
                && bw > 0.0
                && bh > 0.0
                && x + bw <= w as f64
                && y + bh <= h as f64;
            if !inside {
                return parse(format!("annotations[{i}].bbox"), format!("{:?} outside {w}x{h} image", a.bbox));
            }
        }
        Ok(())
    }
}

/// Scenes in manifest order along with their image ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ids: Vec<u64>,
    pub scenes: Vec<Scene>,
    pub categories: Vec<CategoryEntry>,
}

fn image_file(id: u64) -> String {
    format!("{id:06}.png")
}

/// Writes `manifest.json` and `images/{id:06}.png`, with ids starting at 1.
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<DatasetManifest> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut manifest = DatasetManifest {
        images: Vec::with_capacity(scenes.len()),
        annotations: Vec::new(),
        categories: CATEGORY_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| CategoryEntry {
                id: i as u32 + 1,
                name: n.to_string(),
            })
            .collect(),
    };
    for (i, scene) in scenes.iter().enumerate() {
        let id = i as u64 + 1;
        let file_name = image_file(id);
        let path = images_dir.join(&file_name);
        let img = image::RgbImage::from_raw(scene.width as u32, scene.height as u32, scene.pixels.clone())
            .ok_or_else(|| Error::Input(format!("scene {id} pixel buffer does not match its size")))?;
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        manifest.images.push(ImageEntry {
            id,
            file_name,
            width: scene.width,
            height: scene.height,
        });
        for a in &scene.annotations {
            manifest.annotations.push(AnnotationEntry {
                id: manifest.annotations.len() as u64 + 1,
                image_id: id,
                bbox: a.bbox,
                category_id: a.category_id,
            });
        }
    }
    manifest.validate()?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse {
        field: "manifest".into(),
        reason: e.to_string(),
    })?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        field: "manifest.json".into(),
        reason: e.to_string(),
    })?;
    manifest.validate()?;
    let mut by_image: HashMap<u64, Vec<Annotation>> = HashMap::new();
    for a in &manifest.annotations {
        by_image.entry(a.image_id).or_default().push(Annotation {
            bbox: a.bbox,
            category_id: a.category_id,
        });
    }
    let mut scenes = Vec::with_capacity(manifest.images.len());
    for (i, im) in manifest.images.iter().enumerate() {
        let path = dir.join("images").join(&im.file_name);
        let decoded = image::open(&path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::Io(io),
                other => Error::Image {
                    path: path.clone(),
                    reason: other.to_string(),
                },
            })?
            .to_rgb8();
        if decoded.width() as usize != im.width || decoded.height() as usize != im.height {
            return Err(Error::Parse {
                field: format!("images[{i}].width"),
                reason: format!(
                    "manifest says {}x{}, file is {}x{}",
                    im.width,
                    im.height,
                    decoded.width(),
                    decoded.height()
                ),
            });
        }
        scenes.push(Scene {
            width: im.width,
            height: im.height,
            pixels: decoded.into_raw(),
            annotations: by_image.remove(&im.id).unwrap_or_default(),
        });
    }
    Ok(Dataset {
        ids: manifest.images.iter().map(|im| im.id).collect(),
        scenes,
        categories: manifest.categories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_dataset(&DatasetSpec {
            seed: 3,
            count: 4,
            ..DatasetSpec::default()
        })
        .unwrap();
        save_dataset(dir.path(), &scenes).unwrap();
        assert!(dir.path().join("images/000001.png").exists());
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.scenes, scenes);
        assert_eq!(loaded.ids, vec![1, 2, 3, 4]);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &[]).unwrap();
        assert!(load_dataset(dir.path()).unwrap().scenes.is_empty());
    }

    #[test]
    fn dangling_image_id_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            images: vec![],
            annotations: vec![AnnotationEntry {
                id: 1,
                image_id: 9,
                bbox: [0.0, 0.0, 2.0, 2.0],
                category_id: 1,
            }],
            categories: vec![CategoryEntry { id: 1, name: "circle".into() }],
        };
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "annotations[0].image_id"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
