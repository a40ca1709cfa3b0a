//! Synthetic corpus, captions and augmentation.

pub mod augment;
pub mod synth;
pub mod vocab;

pub use augment::{augment_two_views, ViewPair};
pub use synth::{generate_synthetic_corpus, patch_labels, DatasetManifest, Record, SceneSpec, Split};
