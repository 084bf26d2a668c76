//! Files: images, checkpoints, run configuration, scene sets and reports.

mod checkpoint;
mod config;
mod image;
pub mod report;
mod scenes;

pub use checkpoint::{
    checkpoint_hash, load_rsc, load_task, load_vfn, save_rsc, save_task, save_vfn, Checkpoint, CheckpointMeta,
    ModuleKind, MAGIC, VERSION,
};
pub use config::{DataConfig, RscSection, RunConfig};
pub use image::{decode_image, encode_image, load_image, save_image, ImageFormat};
pub use scenes::{load_scene, load_scene_set, save_scene, scene_dir_name, scene_dirs, SIDECAR};
