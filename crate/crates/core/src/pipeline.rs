//! The three training stages and a full run, driven by a [`RunConfig`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::closed_loop::{
    evaluate_compensation, train_rsc_with, CompensationEval, EpochRow, RscTrainReport, TrainObserver,
};
use crate::error::Result;
use crate::io::{self, report, RunConfig};
use crate::rsc::{Rsc, Selection};
use crate::tasks::{pretrain_tasks, SceneSample, TaskKind, TaskNet, TaskTrainReport};
use crate::vfn::{train_vfn, ImagePair, Vfn, VfnTrainReport};

/// Trains the fusion network on the leading `stage1_pairs` scenes; returns it frozen.
pub fn train_stage1(cfg: &RunConfig, scenes: &[SceneSample]) -> Result<(Vfn, VfnTrainReport)> {
    let n = cfg.data.stage1_pairs.min(scenes.len());
    let pairs: Vec<ImagePair> = scenes[..n].iter().map(|s| s.pair.clone()).collect();
    let mut vfn = Vfn::new(cfg.vfn, cfg.vfn_seed())?;
    let report = train_vfn(&mut vfn, &pairs, &cfg.stage1)?;
    Ok((vfn, report))
}

pub fn train_tasks(cfg: &RunConfig, scenes: &[SceneSample]) -> Result<(Vec<TaskNet>, Vec<TaskTrainReport>)> {
    Ok(pretrain_tasks(scenes, &cfg.task_net, &cfg.task_train, cfg.task_seed())?
        .into_iter()
        .unzip())
}

pub fn train_stage2(
    cfg: &RunConfig,
    scenes: &[SceneSample],
    tasks: &[TaskNet],
    vfn: &Vfn,
    observer: &mut dyn TrainObserver,
) -> Result<(Rsc, RscTrainReport)> {
    let mut rsc = Rsc::new(cfg.rsc_config(), cfg.rsc_seed())?;
    let report = train_rsc_with(scenes, tasks, vfn, &mut rsc, &cfg.stage2, observer)?;
    Ok((rsc, report))
}

#[derive(Serialize)]
struct TraceLine<'a> {
    epoch: usize,
    task: TaskKind,
    scene_seed: u64,
    selection: &'a Selection,
}

/// Observer writing one JSON line per selection and, optionally, a
/// checkpoint after every epoch.
pub struct RunRecorder {
    trace: Option<BufWriter<File>>,
    checkpoint_dir: Option<PathBuf>,
    config_hash: String,
}

impl RunRecorder {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            trace: None,
            checkpoint_dir: None,
            config_hash: config_hash.into(),
        }
    }

    pub fn trace_to(mut self, path: impl AsRef<Path>) -> Result<Self> {
        self.trace = Some(BufWriter::new(File::create(path)?));
        Ok(self)
    }

    /// Writes `rsc_epoch{n}.ckpt` into `dir` after each epoch.
    pub fn checkpoints_in(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(t) = self.trace.as_mut() {
            t.flush()?;
        }
        Ok(())
    }
}

impl TrainObserver for RunRecorder {
    fn on_selection(&mut self, epoch: usize, task: TaskKind, seed: u64, selection: &Selection) -> Result<()> {
        if let Some(t) = self.trace.as_mut() {
            let line = TraceLine {
                epoch,
                task,
                scene_seed: seed,
                selection,
            };
            serde_json::to_writer(&mut *t, &line).map_err(std::io::Error::from)?;
            t.write_all(b"\n")?;
        }
        Ok(())
    }

    fn on_epoch(&mut self, epoch: usize, rsc: &Rsc, _rows: &[EpochRow]) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            io::save_rsc(rsc, &self.config_hash, dir.join(format!("rsc_epoch{}.ckpt", epoch + 1)))?;
        }
        Ok(())
    }
}

pub fn task_checkpoint_name(kind: TaskKind) -> String {
    format!("task_{}.ckpt", kind.name())
}

/// Loads the three task checkpoints written by a run into `dir`.
pub fn load_tasks(dir: impl AsRef<Path>) -> Result<Vec<TaskNet>> {
    TaskKind::ALL
        .iter()
        .map(|&k| io::load_task(dir.as_ref().join(task_checkpoint_name(k))))
        .collect()
}

/// Everything a full run produced.
pub struct RunOutcome {
    pub vfn: Vfn,
    pub tasks: Vec<TaskNet>,
    pub rsc: Rsc,
    pub stage1: VfnTrainReport,
    pub task_reports: Vec<TaskTrainReport>,
    pub stage2: RscTrainReport,
    pub held_out: Vec<CompensationEval>,
}

/// Runs every stage and writes configuration, checkpoints, CSV reports and
/// the selection trace into `out`.
pub fn run_all(cfg: &RunConfig, out: impl AsRef<Path>) -> Result<RunOutcome> {
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let hash = cfg.hash();
    cfg.save(out.join("config.toml"))?;
    let scenes = cfg.training_scenes()?;

    let (vfn, stage1) = train_stage1(cfg, &scenes)?;
    io::save_vfn(&vfn, &hash, out.join("vfn.ckpt"))?;
    report::write_vfn_report(out.join("stage1.csv"), &stage1, &hash)?;

    let (tasks, task_reports) = train_tasks(cfg, &scenes)?;
    for t in &tasks {
        io::save_task(t, &hash, out.join(task_checkpoint_name(t.kind())))?;
    }
    report::write_task_report(out.join("tasks.csv"), &task_reports, &hash)?;

    let mut recorder = RunRecorder::new(&hash).trace_to(out.join("selections.jsonl"))?;
    let (rsc, stage2) = train_stage2(cfg, &scenes, &tasks, &vfn, &mut recorder)?;
    recorder.finish()?;
    io::save_rsc(&rsc, &hash, out.join("rsc.ckpt"))?;
    report::write_rsc_report(out.join("stage2.csv"), &stage2.rows, &hash)?;

    let held_out = evaluate_compensation(&cfg.held_out_scenes()?, &tasks, &vfn, &rsc)?;
    report::write_compensation(out.join("compensation.csv"), &held_out, &hash)?;
    Ok(RunOutcome {
        vfn,
        tasks,
        rsc,
        stage1,
        task_reports,
        stage2,
        held_out,
    })
}
