//! Synthetic infrared/visible scenes with heat, segmentation and saliency truth.
//!
//! `cargo run --example scenes -- [count] [size] [out_dir]`

use cldyn::io;
use cldyn::tasks::generate_scenes;

fn main() -> cldyn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let count = args.first().and_then(|s| s.parse().ok()).unwrap_or(6);
    let size = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);

    let scenes = generate_scenes(42, count, size, size)?;
    println!("seed  blobs  patches  seg%   sal%   ir mean  vi mean");
    for s in &scenes {
        println!(
            "{:<5} {:<6} {:<8} {:<6.1} {:<6.1} {:<8.3} {:.3}",
            s.seed,
            s.latent.blobs.len(),
            s.latent.patches.len(),
            100.0 * s.gt_seg.mean(),
            100.0 * s.gt_sal.mean(),
            s.pair.ir.mean(),
            s.pair.vi.mean()
        );
    }

    if let Some(dir) = args.get(2) {
        for s in &scenes {
            io::save_scene(s, std::path::Path::new(dir).join(io::scene_dir_name(s.seed)), "example")?;
        }
        println!("wrote {} scene directories under {dir}", scenes.len());
    }
    Ok(())
}
