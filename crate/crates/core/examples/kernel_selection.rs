//! Inside the compensation module: per-branch configuration choice, basis
//! choice and the predicted depthwise kernels for one scene.

use cldyn::rsc::{Rsc, RscConfig, CONFIGS};
use cldyn::tasks::{generate_scene, TaskConfig, TaskKind, TaskNet};
use cldyn::vfn::{Vfn, VfnConfig};

fn main() -> cldyn::Result<()> {
    let vcfg = VfnConfig { layers: 2, base_channels: 8 };
    let tcfg = TaskConfig::default();
    let vfn = Vfn::new(vcfg, 1)?.frozen();
    let task = TaskNet::new(TaskKind::Segmentation, tcfg, 2)?.frozen();
    let mut rcfg = RscConfig::new(&vcfg, &tcfg);
    rcfg.head_init_std = 0.3;
    let rsc = Rsc::new(rcfg, 3)?;
    println!("compensation module: {} trainable parameters", rsc.param_count());

    let scene = generate_scene(9, 32, 32)?;
    let (fused, stack) = vfn.forward(&scene.pair)?;
    let (_, feature) = task.forward(&fused)?;
    let (compensated, selection) = rsc.forward(&stack, &feature)?;

    for block in &selection.blocks {
        println!("layer {} / {}", block.layer, block.modality.name());
        for (m, b) in block.branches.iter().enumerate() {
            println!(
                "  branch {m}: k={} d={} (p={:.3})  basis {:>2} (p={:.3}, cos={:+.3})",
                b.kernel, b.dilation, b.config_prob, b.basis, b.basis_prob, b.similarity
            );
        }
    }
    println!("configurations: {CONFIGS:?}");
    let shift: f64 = compensated.ir[0]
        .data()
        .iter()
        .zip(stack.ir[0].data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / stack.ir[0].len() as f64;
    println!("mean |compensated - original| on the infrared features: {shift:.4}");

    // zero kernel heads leave the features untouched
    let quiet = Rsc::new(RscConfig { head_init_std: 0.0, ..rcfg }, 3)?;
    let (same, _) = quiet.forward(&stack, &feature)?;
    let untouched = same.ir.iter().chain(&same.vi).zip(stack.ir.iter().chain(&stack.vi)).all(|(a, b)| a == b);
    println!("zero kernel heads reproduce the features exactly: {untouched}");
    Ok(())
}
