//! Every stage end to end, with configuration, checkpoints, CSV reports and
//! the selection trace written to one directory.
//!
//! `cargo run --release --example full_run -- [out_dir] [tiny|smoke|full] [section.key=value ...]`

use cldyn::io::RunConfig;
use cldyn::pipeline::run_all;

fn main() -> cldyn::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "run_out".into());
    let profile = args.next().unwrap_or_else(|| "tiny".into());
    let overrides: Vec<String> = args.collect();
    let cfg = RunConfig::profile(&profile)?.with_overrides(&overrides)?;

    let start = std::time::Instant::now();
    let run = run_all(&cfg, &out)?;
    println!(
        "stage 1: fusion loss {:.4} -> {:.4}",
        run.stage1.initial_loss, run.stage1.final_loss
    );
    for r in &run.task_reports {
        println!("task {:<5} {} {:.4}", r.kind.name(), r.kind.loss_name(), r.final_loss);
    }
    for e in &run.held_out {
        println!(
            "held-out {:<5} {:.5} -> {:.5}",
            e.task.name(),
            e.loss_pre,
            e.loss_post
        );
    }
    println!(
        "compensation module: {} parameters; {:.0}s; artifacts in {out}",
        run.rsc.param_count(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
