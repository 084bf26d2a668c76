//! Save and reload each module, and watch corruption and mix-ups get caught.

use cldyn::io::{self, Checkpoint, RunConfig};
use cldyn::rsc::Rsc;
use cldyn::tasks::{TaskKind, TaskNet};
use cldyn::vfn::Vfn;

fn main() -> cldyn::Result<()> {
    let cfg = RunConfig::tiny();
    let hash = cfg.hash();
    let dir = std::env::temp_dir().join(format!("cldyn_ckpt_{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let vfn = Vfn::new(cfg.vfn, 1)?.frozen();
    let task = TaskNet::new(TaskKind::Saliency, cfg.task_net, 2)?.frozen();
    let rsc = Rsc::new(cfg.rsc_config(), 3)?;
    io::save_vfn(&vfn, &hash, dir.join("vfn.ckpt"))?;
    io::save_task(&task, &hash, dir.join("task.ckpt"))?;
    io::save_rsc(&rsc, &hash, dir.join("rsc.ckpt"))?;

    let vfn2 = io::load_vfn(dir.join("vfn.ckpt"))?;
    let task2 = io::load_task(dir.join("task.ckpt"))?;
    let rsc2 = io::load_rsc(dir.join("rsc.ckpt"))?;
    println!("fusion  {} -> {}", vfn.params().checksum(), vfn2.params().checksum());
    println!("task    {} -> {}", task.params().checksum(), task2.params().checksum());
    println!("rsc     {} -> {}", rsc.params().checksum(), rsc2.params().checksum());

    let ckpt = Checkpoint::load(dir.join("vfn.ckpt"))?;
    println!("meta: {}", serde_json::to_string(&ckpt.meta).unwrap_or_default());

    let mut bytes = std::fs::read(dir.join("vfn.ckpt"))?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(dir.join("corrupt.ckpt"), &bytes)?;
    println!("one flipped bit: {}", io::load_vfn(dir.join("corrupt.ckpt")).err().map_or("accepted?".into(), |e| e.to_string()));
    println!("wrong module:    {}", io::load_vfn(dir.join("rsc.ckpt")).err().map_or("accepted?".into(), |e| e.to_string()));

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
