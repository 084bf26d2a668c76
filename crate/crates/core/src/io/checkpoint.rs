//! Binary checkpoints of named parameter tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CLDN" | u32 version | u32 module id | u32 meta length | meta (JSON)
//! u32 tensor count
//! per tensor: u32 name length | name | u32 rank | u64 dims[rank] | u64 payload offset
//! payload: f64 values
//! u32 CRC32 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rsc::{Rsc, RscConfig};
use crate::tasks::{TaskConfig, TaskKind, TaskNet};
use crate::tensor::{ParamStore, Tensor};
use crate::vfn::{Vfn, VfnConfig};

pub const MAGIC: &[u8; 4] = b"CLDN";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Vfn,
    Rsc,
    Task,
}

impl ModuleKind {
    pub fn id(self) -> u32 {
        match self {
            ModuleKind::Vfn => 1,
            ModuleKind::Rsc => 2,
            ModuleKind::Task => 3,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            1 => Ok(ModuleKind::Vfn),
            2 => Ok(ModuleKind::Rsc),
            3 => Ok(ModuleKind::Task),
            other => Err(Error::Format(format!("unknown module id {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Vfn => "vfn",
            ModuleKind::Rsc => "rsc",
            ModuleKind::Task => "task",
        }
    }
}

/// Descriptive header stored alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hash of the run configuration that produced the module.
    pub config_hash: String,
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    /// Architecture needed to rebuild the module.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub module: ModuleKind,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(module: ModuleKind, meta: CheckpointMeta, params: &ParamStore) -> Self {
        let tensors = params.entries().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Self { module, meta, tensors }
    }

    /// Tensors as a store, for [`ParamStore::load_from`].
    pub fn params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.add(name.clone(), t.clone(), true);
        }
        store
    }

    pub fn expect_module(&self, expected: ModuleKind) -> Result<()> {
        if self.module != expected {
            return Err(Error::Module {
                expected: expected.name().into(),
                found: self.module.name().into(),
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.module.id().to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let module = ModuleKind::from_id(r.u32()?)?;
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("meta: {e}")))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let payload = &body[r.pos..];
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(n * 8)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Format(format!("tensor `{name}` runs past the payload")))?;
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { module, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.meta.config.clone()).map_err(|e| Error::Format(format!("module config: {e}")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn meta<T: Serialize>(config: &T, config_hash: &str, frozen: bool, task: Option<TaskKind>) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        config_hash: config_hash.into(),
        frozen,
        task,
        config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
    })
}

pub fn save_vfn(vfn: &Vfn, config_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    let meta = meta(vfn.config(), config_hash, vfn.is_frozen(), None)?;
    Checkpoint::from_params(ModuleKind::Vfn, meta, vfn.params()).save(path)
}

pub fn load_vfn(path: impl AsRef<Path>) -> Result<Vfn> {
    let ck = Checkpoint::load(path)?;
    ck.expect_module(ModuleKind::Vfn)?;
    let config: VfnConfig = ck.config()?;
    let mut vfn = Vfn::new(config, 0)?;
    vfn.params_mut()?.load_from(&ck.params())?;
    if ck.meta.frozen {
        vfn.freeze();
    }
    Ok(vfn)
}

pub fn save_task(net: &TaskNet, config_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    let meta = meta(net.config(), config_hash, net.is_frozen(), Some(net.kind()))?;
    Checkpoint::from_params(ModuleKind::Task, meta, net.params()).save(path)
}

pub fn load_task(path: impl AsRef<Path>) -> Result<TaskNet> {
    let ck = Checkpoint::load(path)?;
    ck.expect_module(ModuleKind::Task)?;
    let kind = ck
        .meta
        .task
        .ok_or_else(|| Error::Format("task checkpoint without a task id".into()))?;
    let config: TaskConfig = ck.config()?;
    let mut net = TaskNet::new(kind, config, 0)?;
    net.params_mut()?.load_from(&ck.params())?;
    if ck.meta.frozen {
        net.freeze();
    }
    Ok(net)
}

pub fn save_rsc(rsc: &Rsc, config_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    let meta = meta(rsc.config(), config_hash, false, None)?;
    Checkpoint::from_params(ModuleKind::Rsc, meta, rsc.params()).save(path)
}

pub fn load_rsc(path: impl AsRef<Path>) -> Result<Rsc> {
    let ck = Checkpoint::load(path)?;
    ck.expect_module(ModuleKind::Rsc)?;
    let config: RscConfig = ck.config()?;
    let mut rsc = Rsc::new(config, 0)?;
    rsc.params_mut().load_from(&ck.params())?;
    Ok(rsc)
}

/// Config hash recorded in a checkpoint, without rebuilding the module.
pub fn checkpoint_hash(path: impl AsRef<Path>) -> Result<String> {
    Ok(Checkpoint::load(path)?.meta.config_hash)
}
