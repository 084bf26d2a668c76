//! Fuse an infrared/visible pair, natively and customized for each task, and
//! write the results as images.
//!
//! `cargo run --example fuse_images -- [out_dir] [ir.pgm vi.pgm]`

use std::path::PathBuf;

use cldyn::closed_loop::compensate;
use cldyn::io::{self, RunConfig};
use cldyn::pipeline::{train_stage1, train_stage2, train_tasks};
use cldyn::tasks::generate_scene;
use cldyn::vfn::ImagePair;

fn main() -> cldyn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().cloned().unwrap_or_else(|| "fused_out".into()));
    std::fs::create_dir_all(&out)?;

    let cfg = RunConfig::tiny();
    let scenes = cfg.training_scenes()?;
    let (vfn, _) = train_stage1(&cfg, &scenes)?;
    let (tasks, _) = train_tasks(&cfg, &scenes)?;
    let (rsc, _) = train_stage2(&cfg, &scenes, &tasks, &vfn, &mut ())?;

    let pair = match (args.get(1), args.get(2)) {
        (Some(ir), Some(vi)) => ImagePair::new(io::load_image(ir)?, io::load_image(vi)?)?,
        _ => generate_scene(cfg.data.held_out_seed, cfg.data.size, cfg.data.size)?.pair,
    };
    io::save_image(&pair.ir, out.join("ir.pgm"))?;
    io::save_image(&pair.vi, out.join("vi.pgm"))?;

    for task in &tasks {
        let c = compensate(&pair, task, &vfn, &rsc)?;
        if task.kind().id() == 1 {
            io::save_image(&c.fused, out.join("fused.png"))?;
        }
        let name = format!("fused_{}.png", task.kind().name());
        io::save_image(&c.fused_comp, out.join(&name))?;
        let shift = cldyn::tensor::l1_distance(&c.fused, &c.fused_comp)?;
        let kernels: Vec<String> = c.selection.blocks[0]
            .branches
            .iter()
            .map(|b| format!("{}x{}/d{}", b.kernel, b.kernel, b.dilation))
            .collect();
        println!("{name:<14} mean shift {shift:.4}, infrared branches {}", kernels.join(" "));
    }
    println!("images in {}", out.display());
    Ok(())
}
