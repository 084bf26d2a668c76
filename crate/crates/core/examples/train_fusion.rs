//! Stage 1: train the fusion network on synthetic pairs, then freeze it.
//!
//! `cargo run --example train_fusion -- [pairs] [epochs] [size]`

use cldyn::tasks::generate_scenes;
use cldyn::tensor::Tensor;
use cldyn::vfn::{fusion_loss_value, train_vfn, ImagePair, Vfn, VfnConfig, VfnTrainConfig};

fn main() -> cldyn::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let pairs = args.first().copied().unwrap_or(8);
    let epochs = args.get(1).copied().unwrap_or(4);
    let size = args.get(2).copied().unwrap_or(32);

    let data: Vec<ImagePair> = generate_scenes(0, pairs, size, size)?.into_iter().map(|s| s.pair).collect();
    let mut vfn = Vfn::new(VfnConfig { layers: 2, base_channels: 8 }, 1)?;
    println!("fusion network: {} parameters", vfn.param_count());

    let cfg = VfnTrainConfig {
        batch: 4,
        epochs,
        ..VfnTrainConfig::default()
    };
    let report = train_vfn(&mut vfn, &data, &cfg)?;
    println!("initial loss {:.4}", report.initial_loss);
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>2}      {l:.4}", e + 1);
    }
    println!(
        "final loss   {:.4} ({:.0}% lower); frozen: {}",
        report.final_loss,
        100.0 * (1.0 - report.final_loss / report.initial_loss),
        vfn.is_frozen()
    );

    // the per-pixel maximum is the loss minimum when one source dominates
    // both intensity and gradient, e.g. a dimmed copy
    let ir = data[0].ir.clone();
    let pair = ImagePair::new(ir.clone(), ir.map(|v| 0.5 * v))?;
    println!("loss at max(ir, vi) for vi = ir/2: {:.2e}", fusion_loss_value(&pair.max_image(), &pair, 1.0)?);
    let flat = Tensor::full(ir.shape(), 0.5);
    println!("loss of a flat image on the same pair: {:.4}", fusion_loss_value(&flat, &pair, 1.0)?);
    Ok(())
}
