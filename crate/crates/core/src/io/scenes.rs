//! Scene directories: one PGM per image and ground truth plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{load_image, save_image};
use crate::error::{Error, Result};
use crate::tasks::{SceneLatent, SceneSample};
use crate::vfn::ImagePair;

pub const SIDECAR: &str = "scene.json";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    height: usize,
    width: usize,
    config_hash: String,
    latent: SceneLatent,
}

pub fn scene_dir_name(seed: u64) -> String {
    format!("scene_{seed:08}")
}

/// Writes `ir.pgm`, `vi.pgm`, `gt_heat.pgm`, `gt_seg.pgm`, `gt_sal.pgm` and the sidecar.
pub fn save_scene(sample: &SceneSample, dir: impl AsRef<Path>, config_hash: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    save_image(&sample.pair.ir, dir.join("ir.pgm"))?;
    save_image(&sample.pair.vi, dir.join("vi.pgm"))?;
    save_image(&sample.gt_heat, dir.join("gt_heat.pgm"))?;
    save_image(&sample.gt_seg, dir.join("gt_seg.pgm"))?;
    save_image(&sample.gt_sal, dir.join("gt_sal.pgm"))?;
    let sidecar = Sidecar {
        seed: sample.seed,
        height: sample.pair.height(),
        width: sample.pair.width(),
        config_hash: config_hash.into(),
        latent: sample.latent.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(SIDECAR), json)?;
    Ok(())
}

/// Reads a scene written by [`save_scene`]; images carry 8-bit quantization.
pub fn load_scene(dir: impl AsRef<Path>) -> Result<SceneSample> {
    let dir = dir.as_ref();
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(dir.join(SIDECAR))?)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(SIDECAR).display())))?;
    let pair = ImagePair::new(load_image(dir.join("ir.pgm"))?, load_image(dir.join("vi.pgm"))?)?;
    if (pair.height(), pair.width()) != (sidecar.height, sidecar.width) {
        return Err(Error::Format(format!("{}: image size disagrees with sidecar", dir.display())));
    }
    Ok(SceneSample {
        pair,
        gt_heat: load_image(dir.join("gt_heat.pgm"))?,
        gt_seg: load_image(dir.join("gt_seg.pgm"))?,
        gt_sal: load_image(dir.join("gt_sal.pgm"))?,
        seed: sidecar.seed,
        latent: sidecar.latent,
    })
}

/// Subdirectories of `root` holding a scene sidecar, in name order.
pub fn scene_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SIDECAR).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_scene_set(root: impl AsRef<Path>) -> Result<Vec<SceneSample>> {
    let root = root.as_ref();
    let dirs = scene_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::EmptyInput("scene directory"));
    }
    dirs.iter().map(load_scene).collect()
}
