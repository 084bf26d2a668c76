//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//!
//! `CLDYN_ACCEPT_ONLY=1,9` restricts the run to the listed criteria;
//! `CLDYN_ACCEPT_STRICT=1` makes any failing criterion fail the process.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use cldyn::closed_loop::{
    closed_loop_loss, compensate, evaluate_compensation, penalty_loss, penalty_value, CompensationEval, LossBundle,
    RscTrainConfig, DEFAULT_DELTA,
};
use cldyn::gradcheck::{run_battery, TOLERANCE};
use cldyn::io::{self, Checkpoint, RunConfig};
use cldyn::metrics::{self, MetricConfig};
use cldyn::pipeline::{run_all, train_stage1, train_stage2, train_tasks};
use cldyn::rsc::{gram_deviation, select_configurations, Rsc, RscConfig, CONFIGS};
use cldyn::tasks::{generate_scene, SceneSample, TaskKind, TaskNet};
use cldyn::tensor::{l1_distance, Graph, Tensor, COSINE_EPS, SOBEL_EPS};
use cldyn::vfn::{fusion_loss_value, ImagePair, Modality, Vfn, VfnTrainReport};
use common::*;
use rand::Rng;
use sha2::{Digest, Sha256};

type Outcome = cldyn::Result<(bool, String)>;

struct Suite {
    only: Option<BTreeSet<u32>>,
    failed: Vec<u32>,
}

impl Suite {
    fn wants(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|s| s.contains(&id))
    }

    fn record(&mut self, id: u32, name: &str, outcome: Outcome) {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("[{}] {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(id);
        }
    }
}

fn gradient_battery() -> Outcome {
    let start = Instant::now();
    let reports = run_battery(20, 0)?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let instances = reports.iter().map(|r| r.instances).min().unwrap_or(0);
    let coords: usize = reports.iter().map(|r| r.checked).sum();
    let skipped: usize = reports.iter().map(|r| r.skipped).sum();
    Ok((
        failed.is_empty() && instances >= 20 && secs < 120.0,
        format!(
            "{} checks x {instances} instances, {coords} coordinates ({skipped} at kinks), max rel err {worst:.2e} \
             (< {TOLERANCE:e}), {secs:.1}s (< 120s){}",
            reports.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    ))
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(2024);
    let mut worst = [0.0f64; 7];
    for _ in 0..10 {
        let (h, w) = (r.gen_range(3..=8), r.gen_range(3..=8));
        let (cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (k, d) = CONFIGS[r.gen_range(0..CONFIGS.len())];
        let x = random(&[cin, h, w], &mut r);
        let ker = random(&[cout, cin, k, k], &mut r);
        let dk = random(&[cin, k, k], &mut r);
        let mut g = Graph::new();
        let (xv, kv, dv) = (g.constant(x.clone()), g.constant(ker.clone()), g.constant(dk.clone()));
        let y = g.conv2d(xv, kv, None, d)?;
        let z = g.depthwise_conv2d(xv, dv, d)?;
        let s = g.sobel(xv)?;
        worst[0] = worst[0]
            .max(max_abs_diff(g.value(y).data(), &conv(&x, &ker, None, d)))
            .max(max_abs_diff(g.value(z).data(), &depthwise(&x, &dk, d)));
        worst[1] = worst[1].max(max_abs_diff(g.value(s).data(), &sobel_magnitude(&x, SOBEL_EPS)));

        let m = random(&[h, w], &mut r).map(|v| 4.0 * v);
        let mv = g.constant(m.clone());
        let sm = g.softmax(mv, 0)?;
        worst[2] = worst[2].max(max_abs_diff(g.value(sm).data(), &softmax_columns(m.data(), h, w)));

        let (a, b) = (random(&[h * w], &mut r), random(&[h * w], &mut r));
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.cosine_similarity(av, bv)?;
        worst[3] = worst[3].max((g.value(c).item() - cosine(a.data(), b.data(), COSINE_EPS)).abs());

        let (f, ia, ib) = (random_image(h, w, &mut r), random_image(h, w, &mut r), random_image(h, w, &mut r));
        let got = metrics::mutual_information(&f, &ia, &ib, 256)?;
        worst[4] = worst[4].max((got - mi(f.data(), ia.data(), 256) - mi(f.data(), ib.data(), 256)).abs());
        let got = metrics::q_cc(&f, &ia, &ib)?.value;
        worst[5] = worst[5].max((got - q_cc(f.data(), ia.data(), ib.data())).abs());
        let got = metrics::q_abf(&f, &ia, &ib, &MetricConfig::default())?.value;
        worst[6] = worst[6].max((got - q_abf(f.data(), ia.data(), ib.data(), h, w)).abs());
    }
    let names = ["conv", "sobel", "softmax", "cosine", "MI", "Q_CC", "Q_AB/F"];
    let tol = [1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-6];
    let ok = worst.iter().zip(tol).all(|(w, t)| *w <= t);
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, format!("max abs diff over 10 fixtures: {detail}")))
}

fn structural_invariants() -> Outcome {
    let cfg = RunConfig::smoke();
    let rsc = Rsc::new(cfg.rsc_config(), cfg.rsc_seed())?;
    let mut gram = gram_deviation(rsc.prototypes());
    for m in [Modality::Ir, Modality::Vi] {
        for c in 0..CONFIGS.len() {
            gram = gram.max(gram_deviation(rsc.bank(m, c)));
        }
    }

    let rc = rsc.config();
    let mut r = rng(3);
    let mut col_err = 0.0f64;
    for _ in 0..100 {
        let v = random(&[rc.e1 * rc.branches], &mut r).map(|x| 10.0 * x);
        let sel = select_configurations(&v, rsc.prototypes(), rc.branches)?;
        for col in 0..rc.branches {
            let sum: f64 = (0..CONFIGS.len()).map(|row| sel.s.data()[row * rc.branches + col]).sum();
            col_err = col_err.max((sum - 1.0).abs());
        }
    }

    let tiny = RunConfig::tiny();
    let vfn = Vfn::new(tiny.vfn, 1)?.frozen();
    let task = TaskNet::new(TaskKind::Segmentation, tiny.task_net, 2)?.frozen();
    let zero = Rsc::new(RscConfig { head_init_std: 0.0, ..tiny.rsc_config() }, 3)?;
    let mut identity = true;
    for seed in 0..3 {
        let pair = generate_scene(seed, 32, 32)?.pair;
        let native = vfn.forward(&pair)?;
        let (_, feature) = task.forward(&native.0)?;
        let (stack, _) = zero.forward(&native.1, &feature)?;
        identity &= stack == native.1;
        identity &= compensate(&pair, &task, &vfn, &zero)?.fused_comp == native.0;
    }

    let mut hinge_ok = true;
    let mut exact = true;
    for _ in 0..1000 {
        let (c_fs, c_f) = (r.gen_range(0.0..4.0), r.gen_range(0.0..4.0));
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(c_fs));
        let p = penalty_loss(&mut g, v, c_f)?;
        let l = closed_loop_loss(&mut g, v, p, RscTrainConfig::default().delta)?;
        let (pv, lv) = (g.value(p).item(), g.value(l).item());
        hinge_ok &= pv >= 0.0 && penalty_value(c_fs, c_f) >= 0.0;
        exact &= lv == c_fs + 5.0 * pv;
        let b = LossBundle::new(c_fs, c_f, DEFAULT_DELTA);
        exact &= b.closed_loop == b.reward + 5.0 * b.penalty;
    }
    Ok((
        gram < 1e-9 && col_err < 1e-9 && identity && hinge_ok && exact && DEFAULT_DELTA == 5.0,
        format!(
            "Gram dev {gram:.1e}, column-sum dev {col_err:.1e}, zero-kernel identity {identity}, \
             penalty >= 0 on 1000 pairs {hinge_ok}, l_cl = l_r + 5 l_p exact {exact}"
        ),
    ))
}

fn file_digest(path: &Path) -> cldyn::Result<String> {
    Ok(format!("{:x}", Sha256::digest(std::fs::read(path)?)))
}

fn determinism(tmp: &Path) -> Outcome {
    let cfg = RunConfig::tiny();
    let (a, b) = (tmp.join("run_a"), tmp.join("run_b"));
    run_all(&cfg, &a)?;
    run_all(&cfg, &b)?;
    let files = ["stage1.csv", "tasks.csv", "stage2.csv", "compensation.csv", "selections.jsonl"];
    let mut same = true;
    for f in files {
        same &= std::fs::read(a.join(f))? == std::fs::read(b.join(f))?;
    }
    for f in ["vfn.ckpt", "rsc.ckpt"] {
        same &= file_digest(&a.join(f))? == file_digest(&b.join(f))?;
    }

    let bytes = std::fs::read(a.join("rsc.ckpt"))?;
    let ckpt = Checkpoint::decode(&bytes)?;
    let rsc = io::load_rsc(a.join("rsc.ckpt"))?;
    let lossless = ckpt.encode()? == bytes && rsc.params().checksum() == ckpt.params().checksum();
    let mut r = rng(9);
    let mut caught = 0;
    let trials = 200;
    for _ in 0..trials {
        let mut bad = bytes.clone();
        let i = r.gen_range(0..bad.len());
        bad[i] ^= 1 << r.gen_range(0..8);
        caught += usize::from(Checkpoint::decode(&bad).is_err());
    }
    Ok((
        same && lossless && caught == trials,
        format!(
            "{} reports and 2 checkpoints byte-identical across runs: {same}; round trip lossless: {lossless}; \
             single-bit flips detected {caught}/{trials}",
            files.len()
        ),
    ))
}

fn worst_regression(evals: &[CompensationEval]) -> f64 {
    evals.iter().map(|e| e.regression()).fold(f64::NEG_INFINITY, f64::max)
}

fn describe(evals: &[CompensationEval]) -> String {
    evals
        .iter()
        .map(|e| format!("{} {:.4}->{:.4}", e.task.name(), e.loss_pre, e.loss_post))
        .collect::<Vec<_>>()
        .join(", ")
}

fn main() {
    let only = std::env::var("CLDYN_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut suite = Suite { only, failed: Vec::new() };
    let tmp = tempfile::tempdir().expect("temporary directory");

    if suite.wants(1) {
        suite.record(1, "gradient battery", gradient_battery());
    }
    if suite.wants(2) {
        suite.record(2, "oracle equivalence", oracle_equivalence());
    }
    if suite.wants(3) {
        suite.record(3, "structural invariants", structural_invariants());
    }
    if suite.wants(9) {
        suite.record(9, "determinism and serialization", determinism(tmp.path()));
    }
    if [4, 5, 6, 7, 8, 10].iter().any(|&c| suite.wants(c)) {
        smoke_criteria(&mut suite, tmp.path());
    }

    if suite.failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: FAILING criteria {:?}", suite.failed);
        if std::env::var_os("CLDYN_ACCEPT_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}

struct SmokeRun {
    scenes: Vec<SceneSample>,
    held_out: Vec<SceneSample>,
    vfn: Vfn,
    stage1: VfnTrainReport,
    tasks: Vec<TaskNet>,
    rsc: Rsc,
    evals: Vec<CompensationEval>,
    frozen_before: Vec<String>,
    frozen_after: Vec<String>,
    /// Seconds for stages 1 and task pretraining, then for stage 2 with evaluation.
    secs: (f64, f64),
}

fn smoke_run(cfg: &RunConfig, tmp: &Path) -> cldyn::Result<SmokeRun> {
    let scenes = cfg.training_scenes()?;
    let held_out = cfg.held_out_scenes()?;
    let t0 = Instant::now();
    let (vfn, stage1) = train_stage1(cfg, &scenes)?;
    let (tasks, _) = train_tasks(cfg, &scenes)?;
    let t1 = Instant::now();
    let hash = cfg.hash();
    let frozen_before = frozen_digests(tmp, "before", &vfn, &tasks, &hash)?;
    let (rsc, _) = train_stage2(cfg, &scenes, &tasks, &vfn, &mut ())?;
    let evals = evaluate_compensation(&held_out, &tasks, &vfn, &rsc)?;
    let secs = ((t1 - t0).as_secs_f64(), t1.elapsed().as_secs_f64());
    let frozen_after = frozen_digests(tmp, "after", &vfn, &tasks, &hash)?;
    Ok(SmokeRun {
        scenes,
        held_out,
        vfn,
        stage1,
        tasks,
        rsc,
        evals,
        frozen_before,
        frozen_after,
        secs,
    })
}

/// Criteria 4-8 and 10 share one smoke-profile run; 7 adds a second
/// compensation run with the penalty switched off.
fn smoke_criteria(suite: &mut Suite, tmp: &Path) {
    let cfg = RunConfig::smoke();
    let run = match smoke_run(&cfg, tmp) {
        Ok(r) => r,
        Err(e) => {
            let all = [
                (4, "frozen contracts"),
                (5, "closed-loop efficacy"),
                (6, "task specificity"),
                (7, "ablation distinguishability"),
                (8, "budget"),
                (10, "fusion-loss optimum"),
            ];
            for (id, name) in all {
                if suite.wants(id) {
                    suite.record(id, name, Err(cldyn::Error::Config(format!("smoke run failed: {e}"))));
                }
            }
            return;
        }
    };
    let SmokeRun {
        scenes,
        held_out,
        vfn,
        stage1,
        tasks,
        rsc,
        evals,
        frozen_before: before,
        frozen_after: after,
        secs,
    } = run;

    if suite.wants(4) {
        suite.record(4, "frozen contracts", Ok((
            before == after,
            format!("fusion and 3 task checkpoints identical after stage 2: {} ({})", before == after, &after[0][..12]),
        )));
    }

    if suite.wants(5) {
        let each = evals.iter().all(|e| e.loss_post <= e.loss_pre);
        let mean = evals.iter().map(|e| e.relative_improvement()).sum::<f64>() / evals.len() as f64;
        let (stage2_secs, total_secs) = (secs.1, secs.0 + secs.1);
        suite.record(5, "closed-loop efficacy", Ok((
            each && mean >= 0.03 && stage2_secs < 900.0,
            format!(
                "{} scenes, {} held out: {}; mean improvement {:.1}% (>= 3%); stage 2 {:.0}s, all stages {:.0}s (< 900s)",
                scenes.len(),
                held_out.len(),
                describe(&evals),
                100.0 * mean,
                stage2_secs,
                total_secs
            ),
        )));
    }

    if suite.wants(6) {
        suite.record(6, "task specificity", task_specificity(&held_out, &tasks, &vfn, &rsc));
    }

    if suite.wants(7) {
        let outcome = (|| -> Outcome {
            let cfg0 = cfg.with_overrides(&["stage2.delta=0"])?;
            let scenes = cfg0.training_scenes()?;
            let (rsc0, _) = train_stage2(&cfg0, &scenes, &tasks, &vfn, &mut ())?;
            let evals0 = evaluate_compensation(&held_out, &tasks, &vfn, &rsc0)?;
            let differ = rsc0.params().checksum() != rsc.params().checksum();
            let (w5, w0) = (worst_regression(&evals), worst_regression(&evals0));
            Ok((
                differ && w5 <= w0,
                format!(
                    "parameters differ: {differ}; worst regression delta=5 {w5:+.5} vs delta=0 {w0:+.5} ({})",
                    describe(&evals0)
                ),
            ))
        })();
        suite.record(7, "ablation distinguishability", outcome);
    }

    if suite.wants(8) {
        let n = rsc.param_count();
        log_line(&format!("rsc_param_count at defaults: {n}"));
        suite.record(8, "budget", Ok((n < 1_000_000, format!("rsc_param_count = {n} (< 1,000,000)"))));
    }

    if suite.wants(10) {
        suite.record(10, "fusion-loss optimum", fusion_optimum(&cfg, &stage1, &scenes));
    }
}

fn log_line(s: &str) {
    println!("       {s}");
}

fn frozen_digests(tmp: &Path, tag: &str, vfn: &Vfn, tasks: &[TaskNet], hash: &str) -> cldyn::Result<Vec<String>> {
    let mut out = Vec::new();
    let p = tmp.join(format!("vfn_{tag}.ckpt"));
    io::save_vfn(vfn, hash, &p)?;
    out.push(file_digest(&p)?);
    for t in tasks {
        let p = tmp.join(format!("task_{}_{tag}.ckpt", t.kind().name()));
        io::save_task(t, hash, &p)?;
        out.push(file_digest(&p)?);
    }
    out.push(vfn.params().checksum());
    out.extend(tasks.iter().map(|t| t.params().checksum()));
    Ok(out)
}

fn choices(s: &cldyn::rsc::Selection) -> Vec<(usize, usize)> {
    s.blocks.iter().flat_map(|b| b.branches.iter().map(|c| (c.config, c.basis))).collect()
}

fn task_specificity(scenes: &[SceneSample], tasks: &[TaskNet], vfn: &Vfn, rsc: &Rsc) -> Outcome {
    let mut min_dist = f64::INFINITY;
    let mut same_native = true;
    let mut collided = 0;
    let mut collisions: Vec<String> = Vec::new();
    for s in scenes {
        let c: Vec<_> = tasks.iter().map(|t| compensate(&s.pair, t, vfn, rsc)).collect::<cldyn::Result<_>>()?;
        same_native &= c.iter().all(|x| x.fused == c[0].fused);
        let mut any = false;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                let d = l1_distance(&c[i].fused_comp, &c[j].fused_comp)?;
                min_dist = min_dist.min(d);
                if d <= 1e-4 {
                    any = true;
                    let same_choice = choices(&c[i].selection) == choices(&c[j].selection);
                    collisions.push(format!(
                        "{}/{}{}",
                        tasks[i].kind().name(),
                        tasks[j].kind().name(),
                        if same_choice { "" } else { " (different kernel choices)" }
                    ));
                }
            }
        }
        collided += usize::from(any);
    }
    collisions.sort();
    collisions.dedup_by(|a, b| a == b);
    Ok((
        min_dist > 1e-4 && same_native,
        format!(
            "{} held-out pairs: smallest pairwise mean l1 between task images {min_dist:.2e} (> 1e-4), \
             {collided} pairs with two indistinguishable task images {collisions:?}; \
             native image bitwise identical across tasks: {same_native}",
            scenes.len()
        ),
    ))
}

fn fusion_optimum(cfg: &RunConfig, stage1: &VfnTrainReport, scenes: &[SceneSample]) -> Outcome {
    let reduction = 1.0 - stage1.final_loss / stage1.initial_loss;
    let lambda = cfg.stage1.lambda;
    // pairs where one source dominates in intensity and in gradient magnitude
    let mut dominated = 0.0f64;
    for s in &scenes[..8] {
        for scale in [1.0, 0.5] {
            let pair = ImagePair::new(s.pair.ir.clone(), s.pair.ir.map(|v| scale * v))?;
            dominated = dominated.max(fusion_loss_value(&pair.max_image(), &pair, lambda)?);
        }
    }
    let synthetic = scenes[..8]
        .iter()
        .map(|s| fusion_loss_value(&s.pair.max_image(), &s.pair, lambda))
        .sum::<cldyn::Result<f64>>()?
        / 8.0;
    Ok((
        reduction >= 0.5 && dominated < 1e-6,
        format!(
            "{} pairs, {} epochs: loss {:.4} -> {:.4} ({:.1}% reduction, >= 50%); loss at max(ir, vi) {dominated:.1e} \
             where one source dominates (< 1e-6); on general synthetic pairs it is {synthetic:.4}",
            cfg.data.stage1_pairs,
            cfg.stage1.epochs,
            stage1.initial_loss,
            stage1.final_loss,
            100.0 * reduction
        ),
    ))
}
