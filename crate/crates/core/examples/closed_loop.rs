//! Stage 2: the compensation module trained against frozen fusion and task
//! networks, then judged on held-out scenes.
//!
//! `cargo run --release --example closed_loop -- [tiny|smoke|full] [section.key=value ...]`

use cldyn::closed_loop::evaluate_compensation;
use cldyn::io::RunConfig;
use cldyn::pipeline::{train_stage1, train_stage2, train_tasks};

fn main() -> cldyn::Result<()> {
    let mut args = std::env::args().skip(1);
    let profile = args.next().unwrap_or_else(|| "tiny".into());
    let overrides: Vec<String> = args.collect();
    let cfg = RunConfig::profile(&profile)?.with_overrides(&overrides)?;
    println!("profile {profile}, config {}", cfg.short_hash());

    let scenes = cfg.training_scenes()?;
    let (vfn, _) = train_stage1(&cfg, &scenes)?;
    let (tasks, _) = train_tasks(&cfg, &scenes)?;
    let before: Vec<String> = [vfn.params().checksum(), tasks[0].params().checksum()].into();

    let (rsc, report) = train_stage2(&cfg, &scenes, &tasks, &vfn, &mut ())?;
    println!("epoch task  l_r       l_p       l_cl");
    for r in &report.rows {
        println!(
            "{:<5} {:<5} {:<9.5} {:<9.5} {:.5}",
            r.epoch,
            r.task.name(),
            r.reward,
            r.penalty,
            r.closed_loop
        );
    }

    println!("\nheld-out task loss   before    after     change");
    for e in evaluate_compensation(&cfg.held_out_scenes()?, &tasks, &vfn, &rsc)? {
        println!(
            "{:<20} {:<9.5} {:<9.5} {:+.1}%",
            e.task.name(),
            e.loss_pre,
            e.loss_post,
            -100.0 * e.relative_improvement()
        );
    }
    let after: Vec<String> = [vfn.params().checksum(), tasks[0].params().checksum()].into();
    println!("\nfrozen networks untouched: {}", before == after);
    Ok(())
}
