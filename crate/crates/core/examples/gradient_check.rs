//! Finite-difference check of every differentiable operation, the fusion
//! loss, and the closed-loop chain.
//!
//! `cargo run --release --example gradient_check -- [instances] [seed]`

use cldyn::gradcheck::{run_battery, TOLERANCE};

fn main() -> cldyn::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let instances = args.first().copied().unwrap_or(3) as usize;
    let seed = args.get(1).copied().unwrap_or(0);

    let start = std::time::Instant::now();
    let reports = run_battery(instances, seed)?;
    for r in &reports {
        println!(
            "{:<4} {:<20} max rel err {:.2e} over {} coordinates ({} skipped at kinks)",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.checked,
            r.skipped
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!(
        "{} checks, {failed} above {TOLERANCE:e}, {:.1}s",
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
