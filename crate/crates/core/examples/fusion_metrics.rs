//! Reference-free fusion metrics on a few hand-built fusions.

use cldyn::metrics::{evaluate_suite, MetricConfig, Triple};
use cldyn::tasks::generate_scene;

fn main() -> cldyn::Result<()> {
    let pair = generate_scene(3, 64, 64)?.pair;
    let (a, b) = (pair.ir.clone(), pair.vi.clone());
    let triples = vec![
        Triple {
            name: "max".into(),
            fused: pair.max_image(),
            a: a.clone(),
            b: b.clone(),
        },
        Triple {
            name: "average".into(),
            fused: a.zip_map(&b, |x, y| 0.5 * (x + y))?,
            a: a.clone(),
            b: b.clone(),
        },
        Triple {
            name: "infrared only".into(),
            fused: a.clone(),
            a: a.clone(),
            b: b.clone(),
        },
        Triple {
            name: "flat".into(),
            fused: a.map(|_| 0.5),
            a: a.clone(),
            b: b.clone(),
        },
    ];
    let config = MetricConfig::default();
    let report = evaluate_suite(&triples, &config)?;
    print!("{}", report.table());

    let mut csv = Vec::new();
    report.write_csv(&mut csv, "example")?;
    println!("\n{}", String::from_utf8_lossy(&csv));
    Ok(())
}
