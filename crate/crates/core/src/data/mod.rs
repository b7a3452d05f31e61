//! Dataset and artifact I/O: portable pixmap images, annotation CSVs,
//! dataset manifests, synthetic scene generation, and binary checkpoints.

pub mod annotations;
pub mod checkpoint;
pub mod manifest;
pub mod ppm;
pub mod synth;

pub use annotations::{parse_annotations, read_annotations, write_annotations};
pub use checkpoint::{
    apply_optimizer_state, load_model, optimizer_state_tensors, read_checkpoint, save_model, write_checkpoint,
};
pub use manifest::{Dataset, Manifest, ManifestEntry};
pub use ppm::{read_pgm, read_ppm, write_pgm_normalized, write_ppm};
pub use synth::{generate_dataset, generate_scene, SceneSpec};
