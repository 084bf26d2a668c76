//! The `cldyn` command line.
//!
//! Exit codes: 0 success, 1 invalid arguments or failed checks, 2 file errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::closed_loop::{compensate, evaluate_compensation};
use crate::error::{Error, Result};
use crate::gradcheck::{run_battery, TOLERANCE};
use crate::io::{self, report, RunConfig};
use crate::metrics::{evaluate_suite, MetricConfig, Triple};
use crate::pipeline::{self, RunRecorder};
use crate::tasks::{generate_scenes, SceneSample, TaskKind};
use crate::vfn::ImagePair;

#[derive(Parser, Debug)]
#[command(name = "cldyn", version, about = "Task-customized infrared/visible image fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run configuration (defaults to the selected profile)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile used when no file is given
    #[arg(long, default_value = "smoke")]
    profile: String,
    /// Override a setting, e.g. `--set stage2.delta=0`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::profile(&self.profile)?,
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic scene directories
    GenScenes {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (default: the configured training or held-out count)
        #[arg(long)]
        count: Option<usize>,
        /// Generate the held-out set instead of the training set
        #[arg(long)]
        held_out: bool,
    },
    /// Stage 1: train and freeze the fusion network
    TrainVfn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Scene directory from `gen-scenes` (default: generate from the config)
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Train and freeze the three synthetic task networks
    PretrainTasks {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Stage 2: train the compensation module in the closed loop
    TrainRsc {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        vfn: PathBuf,
        /// Directory holding the task checkpoints
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Fuse one pair, optionally compensated for a task
    Fuse {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vi: PathBuf,
        #[arg(long)]
        vfn: PathBuf,
        #[arg(long, requires = "task")]
        rsc: Option<PathBuf>,
        /// Task id or name: 1/heat, 2/seg, 3/sal
        #[arg(long, requires = "rsc")]
        task: Option<TaskKind>,
        /// Directory holding the task checkpoints (default: next to --rsc)
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Output image (.pgm or .png)
        #[arg(long)]
        out: PathBuf,
        /// Write the branch selections as one JSON line
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Metric suite over a directory of fused/ir/vi triples
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory whose subdirectories each hold a triple
        #[arg(long)]
        dir: PathBuf,
        /// Stem of the fused image in each subdirectory
        #[arg(long, default_value = "fused")]
        fused: String,
        /// CSV report path (the table always goes to stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every recorded gradient
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn scenes_for(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<SceneSample>> {
    match dir {
        Some(d) => io::load_scene_set(d),
        None => cfg.training_scenes(),
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::GenScenes {
            cfg,
            out: dir,
            count,
            held_out,
        } => {
            let cfg = cfg.resolve()?;
            let s = cfg.data.size;
            let scenes = if held_out {
                generate_scenes(cfg.data.held_out_seed, count.unwrap_or(cfg.data.held_out), s, s)?
            } else {
                generate_scenes(cfg.seed.wrapping_mul(100_000), count.unwrap_or(cfg.data.train_scenes), s, s)?
            };
            fs::create_dir_all(&dir)?;
            let hash = cfg.hash();
            for sc in &scenes {
                io::save_scene(sc, dir.join(io::scene_dir_name(sc.seed)), &hash)?;
            }
            writeln!(out, "wrote {} scenes to {}", scenes.len(), dir.display())?;
        }
        Command::TrainVfn { cfg, out: dir, scenes } => {
            let cfg = cfg.resolve()?;
            let scenes = scenes_for(&cfg, scenes.as_deref())?;
            let (vfn, rep) = pipeline::train_stage1(&cfg, &scenes)?;
            fs::create_dir_all(&dir)?;
            let hash = cfg.hash();
            cfg.save(dir.join("config.toml"))?;
            io::save_vfn(&vfn, &hash, dir.join("vfn.ckpt"))?;
            report::write_vfn_report(dir.join("stage1.csv"), &rep, &hash)?;
            writeln!(
                out,
                "fusion loss {:.5} -> {:.5} ({} parameters)",
                rep.initial_loss,
                rep.final_loss,
                vfn.param_count()
            )?;
        }
        Command::PretrainTasks { cfg, out: dir, scenes } => {
            let cfg = cfg.resolve()?;
            let scenes = scenes_for(&cfg, scenes.as_deref())?;
            let (tasks, reps) = pipeline::train_tasks(&cfg, &scenes)?;
            fs::create_dir_all(&dir)?;
            let hash = cfg.hash();
            for t in &tasks {
                io::save_task(t, &hash, dir.join(pipeline::task_checkpoint_name(t.kind())))?;
            }
            report::write_task_report(dir.join("tasks.csv"), &reps, &hash)?;
            for r in &reps {
                writeln!(out, "{:<5} {} {:.5}", r.kind.name(), r.kind.loss_name(), r.final_loss)?;
            }
        }
        Command::TrainRsc {
            cfg,
            vfn,
            tasks,
            out: dir,
            scenes,
        } => {
            let cfg = cfg.resolve()?;
            let vfn = io::load_vfn(&vfn)?;
            let tasks = pipeline::load_tasks(&tasks)?;
            let scenes = scenes_for(&cfg, scenes.as_deref())?;
            fs::create_dir_all(&dir)?;
            let hash = cfg.hash();
            cfg.save(dir.join("config.toml"))?;
            let mut recorder = RunRecorder::new(&hash)
                .trace_to(dir.join("selections.jsonl"))?
                .checkpoints_in(&dir);
            let (rsc, rep) = pipeline::train_stage2(&cfg, &scenes, &tasks, &vfn, &mut recorder)?;
            recorder.finish()?;
            io::save_rsc(&rsc, &hash, dir.join("rsc.ckpt"))?;
            report::write_rsc_report(dir.join("stage2.csv"), &rep.rows, &hash)?;
            let evals = evaluate_compensation(&cfg.held_out_scenes()?, &tasks, &vfn, &rsc)?;
            report::write_compensation(dir.join("compensation.csv"), &evals, &hash)?;
            writeln!(out, "compensation module: {} parameters", rsc.param_count())?;
            for e in &evals {
                writeln!(
                    out,
                    "{:<5} held-out loss {:.5} -> {:.5} ({:+.2}%)",
                    e.task.name(),
                    e.loss_pre,
                    e.loss_post,
                    100.0 * e.relative_improvement()
                )?;
            }
        }
        Command::Fuse {
            ir,
            vi,
            vfn,
            rsc,
            task,
            tasks,
            out: path,
            trace,
        } => {
            let pair = ImagePair::new(io::load_image(&ir)?, io::load_image(&vi)?)?;
            let vfn = io::load_vfn(&vfn)?;
            let image = match (rsc, task) {
                (Some(rsc_path), Some(kind)) => {
                    let rsc = io::load_rsc(&rsc_path)?;
                    let dir = tasks.unwrap_or_else(|| rsc_path.parent().unwrap_or(Path::new(".")).to_path_buf());
                    let net = io::load_task(dir.join(pipeline::task_checkpoint_name(kind)))?;
                    let c = compensate(&pair, &net, &vfn, &rsc)?;
                    if let Some(t) = trace {
                        let line = serde_json::to_string(&c.selection).map_err(std::io::Error::from)?;
                        fs::write(t, line + "\n")?;
                    }
                    c.fused_comp
                }
                _ => vfn.forward(&pair)?.0,
            };
            io::save_image(&image, &path)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Evaluate {
            cfg,
            dir,
            fused,
            out: csv_path,
        } => {
            let cfg = cfg.resolve()?;
            let triples = collect_triples(&dir, &fused)?;
            if triples.is_empty() {
                return Err(Error::EmptyInput("no fused/ir/vi triples found"));
            }
            let rep = evaluate_suite(&triples, &MetricConfig::default())?;
            write!(out, "{}", rep.table())?;
            if let Some(p) = csv_path {
                rep.write_csv(fs::File::create(p)?, &cfg.hash())?;
            }
        }
        Command::Gradcheck { instances, seed } => {
            let reports = run_battery(instances, seed)?;
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                writeln!(
                    out,
                    "{:<22} instances {:>3}  coords {:>6} (skipped {:>3})  max rel err {:.3e}  {}",
                    r.name,
                    r.instances,
                    r.checked,
                    r.skipped,
                    r.max_rel_err,
                    if r.passed() { "ok" } else { "FAIL" }
                )?;
            }
            let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            writeln!(out, "max relative error {worst:.3e} (tolerance {TOLERANCE:e})")?;
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["pgm", "png"].iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

/// Subdirectories of `dir` (name order) with `<fused>`, `ir` and `vi` images.
pub fn collect_triples(dir: &Path, fused: &str) -> Result<Vec<Triple>> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut out = Vec::new();
    for d in subdirs {
        let (Some(f), Some(a), Some(b)) = (find_image(&d, fused), find_image(&d, "ir"), find_image(&d, "vi")) else {
            continue;
        };
        out.push(Triple {
            name: d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            fused: io::load_image(f)?,
            a: io::load_image(a)?,
            b: io::load_image(b)?,
        });
    }
    Ok(out)
}
