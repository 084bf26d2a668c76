//! The three frozen downstream stand-ins: heat regression, segmentation and
//! saliency, each returning a prediction and a semantic feature map.

use cldyn::tasks::{generate_scenes, pretrain_tasks, TaskConfig, TaskTrainConfig};

fn main() -> cldyn::Result<()> {
    let scenes = generate_scenes(100, 16, 32, 32)?;
    let cfg = TaskTrainConfig {
        max_epochs: 10,
        ..TaskTrainConfig::default()
    };
    let trained = pretrain_tasks(&scenes, &TaskConfig { width: 8, dilations: [1, 2, 3] }, &cfg, 5)?;
    for (net, report) in &trained {
        let (pred, feature) = net.forward(&scenes[0].pair.max_image())?;
        println!(
            "{:<5} {} {:.4} after {} epochs; prediction {:?}, feature {:?}, frozen {}",
            net.kind().name(),
            net.kind().loss_name(),
            report.final_loss,
            report.epoch_losses.len(),
            pred.shape(),
            feature.shape(),
            net.is_frozen()
        );
    }
    Ok(())
}
