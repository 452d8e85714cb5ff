//! Synthetic shape scenes, augmentation, and the on-disk dataset format.

mod augment;
mod io;
mod scene;

pub use augment::{augment, crop, flip_horizontal, pad_to_multiple, resize, AugmentPolicy};
pub use io::{load_dataset, save_dataset, CategoryEntry, Dataset, DatasetManifest, ImageEntry, AnnotationEntry};
pub use scene::{derive_seed, generate_dataset, generate_scene, Annotation, DatasetSpec, Scene, SceneSpec, Shape, CATEGORY_NAMES};
