//! Run configuration: one TOML file, `section.key=value` overrides, and a
//! content hash stamped into every artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closed_loop::RscTrainConfig;
use crate::error::{Error, Result};
use crate::rsc::RscConfig;
use crate::tasks::{generate_scenes, SceneSample, TaskConfig, TaskTrainConfig, MIN_SCENE_SIZE};
use crate::vfn::{VfnConfig, VfnTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Side of the square synthetic scenes.
    pub size: usize,
    pub train_scenes: usize,
    /// Leading training scenes used for fusion-network training.
    pub stage1_pairs: usize,
    pub held_out: usize,
    pub held_out_seed: u64,
}

/// Compensation-module widths; channel counts follow the fusion and task networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RscSection {
    pub branches: usize,
    pub e1: usize,
    pub e2: usize,
    pub bank_size: usize,
    pub proj_channels: usize,
    pub hidden: usize,
    pub head_init_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub vfn: VfnConfig,
    pub stage1: VfnTrainConfig,
    pub task_net: TaskConfig,
    pub task_train: TaskTrainConfig,
    pub rsc: RscSection,
    pub stage2: RscTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::smoke()
    }
}

impl RunConfig {
    /// Desk-scale profile: 64x64 scenes, 10 fusion and 5 compensation epochs.
    pub fn smoke() -> Self {
        let vfn = VfnConfig::default();
        let task_net = TaskConfig::default();
        let r = RscConfig::new(&vfn, &task_net);
        Self {
            seed: 7,
            data: DataConfig {
                size: 64,
                train_scenes: 64,
                stage1_pairs: 16,
                held_out: 16,
                held_out_seed: 1_000_000,
            },
            vfn,
            stage1: VfnTrainConfig {
                batch: 4,
                ..VfnTrainConfig::default()
            },
            task_net,
            task_train: TaskTrainConfig::default(),
            rsc: RscSection {
                branches: r.branches,
                e1: r.e1,
                e2: r.e2,
                bank_size: r.bank_size,
                proj_channels: r.proj_channels,
                hidden: r.hidden,
                head_init_std: r.head_init_std,
            },
            stage2: RscTrainConfig::default(),
        }
    }

    /// 100 fusion and 50 compensation epochs at the reference batch sizes.
    pub fn full() -> Self {
        let mut c = Self::smoke();
        c.data.stage1_pairs = c.data.train_scenes;
        c.stage1.batch = 16;
        c.stage1.epochs = 100;
        c.stage2.epochs = 50;
        c
    }

    /// Seconds-scale profile for examples and tests: 32x32 scenes, narrow networks.
    pub fn tiny() -> Self {
        let mut c = Self::smoke();
        c.data = DataConfig {
            size: 32,
            train_scenes: 8,
            stage1_pairs: 8,
            held_out: 4,
            held_out_seed: 1_000_000,
        };
        c.vfn.base_channels = 8;
        c.stage1.epochs = 3;
        c.task_net.width = 8;
        c.task_train.max_epochs = 6;
        c.rsc.e2 = 64;
        c.rsc.bank_size = 8;
        c.rsc.proj_channels = 8;
        c.rsc.hidden = 16;
        c.stage2.epochs = 2;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "smoke" => Ok(Self::smoke()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown profile `{other}` (tiny, smoke, full)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Short form of [`Self::hash`] used in file names and logs.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    /// Applies `section.key=value` assignments. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for a in assignments {
            let a = a.as_ref();
            let (key, raw) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{a}` is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            let mut slot = &mut tree;
            for part in key.trim().split('.') {
                slot = slot
                    .as_table_mut()
                    .and_then(|t| t.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = match (&*slot, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
        }
        let c: Self = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        let d = &self.data;
        if d.size < MIN_SCENE_SIZE {
            return Err(Error::Config(format!("scene size must be at least {MIN_SCENE_SIZE}")));
        }
        if d.train_scenes == 0 || d.held_out == 0 {
            return bad("scene counts");
        }
        if d.stage1_pairs == 0 || d.stage1_pairs > d.train_scenes {
            return Err(Error::Config("stage1_pairs must be in 1..=train_scenes".into()));
        }
        self.vfn.validate()?;
        let rates = [self.stage1.lr, self.task_train.lr, self.stage2.lr];
        if rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning rates");
        }
        let counts = [
            self.stage1.batch,
            self.stage1.epochs,
            self.task_train.batch,
            self.task_train.max_epochs,
            self.stage2.batch,
            self.stage2.epochs,
            self.task_net.width,
        ];
        if counts.contains(&0) {
            return bad("batch sizes, epoch counts and widths");
        }
        if self.task_net.dilations.contains(&0) {
            return bad("task dilations");
        }
        // zero weights are the ablation settings, so only negatives are rejected
        if !(self.stage1.lambda >= 0.0) || !(self.stage2.delta >= 0.0) {
            return Err(Error::Config("lambda and delta must be non-negative".into()));
        }
        self.rsc_config().validate()
    }

    pub fn rsc_config(&self) -> RscConfig {
        let r = &self.rsc;
        RscConfig {
            branches: r.branches,
            e1: r.e1,
            e2: r.e2,
            bank_size: r.bank_size,
            proj_channels: r.proj_channels,
            hidden: r.hidden,
            head_init_std: r.head_init_std,
            ..RscConfig::new(&self.vfn, &self.task_net)
        }
    }

    pub fn vfn_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn task_seed(&self) -> u64 {
        self.seed.wrapping_add(10)
    }

    pub fn rsc_seed(&self) -> u64 {
        self.seed.wrapping_add(20)
    }

    /// Training scenes, seeded from `seed * 100_000`.
    pub fn training_scenes(&self) -> Result<Vec<SceneSample>> {
        let s = self.data.size;
        generate_scenes(self.seed.wrapping_mul(100_000), self.data.train_scenes, s, s)
    }

    pub fn held_out_scenes(&self) -> Result<Vec<SceneSample>> {
        let s = self.data.size;
        generate_scenes(self.data.held_out_seed, self.data.held_out, s, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash() {
        let c = RunConfig::smoke();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::full().hash(), c.hash());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::smoke().with_overrides(&["stage2.delta=0", "data.size = 48"]).unwrap();
        assert_eq!(c.stage2.delta, 0.0);
        assert_eq!(c.data.size, 48);
        assert!(RunConfig::smoke().with_overrides(&["stage2.dleta=1"]).is_err());
        assert!(RunConfig::smoke().with_overrides(&["stage2.delta=-1"]).is_err());
        assert!(RunConfig::smoke().with_overrides(&["vfn.layers=1"]).is_err());
        assert!(RunConfig::smoke().with_overrides(&["stage1.lr"]).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = RunConfig::smoke().to_toml().replace("[stage2]", "[stage2]\nbogus = 1");
        assert!(RunConfig::from_toml(&text).is_err());
    }
}
