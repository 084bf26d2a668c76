//! Fuse, feed back, compensate, re-fuse: stage-2 training of the
//! compensation module against the frozen fusion network and tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rsc::{Rsc, Selection};
use crate::tasks::{task_loss, task_loss_value, SceneSample, TaskKind, TaskNet};
use crate::tensor::{Adam, AdamConfig, Bound, GradSet, Graph, Tensor, Var};
use crate::vfn::{check_grads, FeatureStack, FeatureVars, ImagePair, Vfn};

/// Penalty strength used when none is configured.
pub const DEFAULT_DELTA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { delta: DEFAULT_DELTA }
    }
}

/// Scalar values of the reward, penalty and closed-loop losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    pub reward: f64,
    pub penalty: f64,
    pub closed_loop: f64,
    pub delta: f64,
}

impl LossBundle {
    /// Builds the bundle from the compensated and reference task losses.
    pub fn new(c_fs: f64, c_f: f64, delta: f64) -> Self {
        let reward = c_fs;
        let penalty = penalty_value(c_fs, c_f);
        Self {
            reward,
            penalty,
            closed_loop: closed_loop_value(reward, penalty, delta),
            delta,
        }
    }
}

pub fn penalty_value(c_fs: f64, c_f: f64) -> f64 {
    (c_fs - c_f).max(0.0)
}

pub fn closed_loop_value(reward: f64, penalty: f64, delta: f64) -> f64 {
    reward + delta * penalty
}

/// Reward: the task loss of the compensated prediction.
pub fn reward_loss(g: &mut Graph, kind: TaskKind, pred_fs: Var, gt: Var) -> Result<Var> {
    task_loss(g, kind, pred_fs, gt)
}

/// `max(0, c_fs - c_f)`; the reference loss `c_f` is a plain number.
pub fn penalty_loss(g: &mut Graph, c_fs: Var, c_f: f64) -> Result<Var> {
    let reference = g.constant(Tensor::scalar(c_f));
    let diff = g.sub(c_fs, reference)?;
    Ok(g.relu(diff))
}

pub fn closed_loop_loss(g: &mut Graph, reward: Var, penalty: Var, delta: f64) -> Result<Var> {
    if delta < 0.0 {
        return Err(Error::Config(format!("delta must be non-negative, got {delta}")));
    }
    let weighted = g.scale(penalty, delta);
    g.add(reward, weighted)
}

/// Elementwise sum of per-task gradient sets, in the given order.
pub fn combine_task_gradients(grads: &[GradSet]) -> Result<GradSet> {
    let (first, rest) = grads
        .split_first()
        .ok_or(Error::EmptyInput("task gradients"))?;
    let mut total = first.clone();
    for g in rest {
        total.add_assign(g)?;
    }
    Ok(total)
}

/// Frozen fusion output of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct NativePass {
    pub fused: Tensor,
    pub stack: FeatureStack,
}

impl NativePass {
    pub fn compute(vfn: &Vfn, pair: &ImagePair) -> Result<Self> {
        let (fused, stack) = vfn.forward(pair)?;
        Ok(Self { fused, stack })
    }
}

/// Pre-compensation task output on the native fused image.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePass {
    pub pred: Tensor,
    pub feature: Tensor,
    pub loss: f64,
}

impl ReferencePass {
    pub fn compute(native: &NativePass, task: &TaskNet, gt: &Tensor) -> Result<Self> {
        let (pred, feature) = task.forward(&native.fused)?;
        let loss = task_loss_value(task.kind(), &pred, gt)?;
        Ok(Self {
            pred,
            feature,
            loss,
        })
    }
}

/// One sample of a closed-loop batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub pair: &'a ImagePair,
    pub gt: &'a Tensor,
    pub native: &'a NativePass,
    pub reference: &'a ReferencePass,
}

/// Handles of a recorded closed-loop batch.
#[derive(Clone, Debug)]
pub struct BatchObjective {
    pub reward: Var,
    pub penalty: Var,
    pub closed_loop: Var,
    /// Mean reference loss of the batch.
    pub reference_loss: f64,
    pub fused: Vec<Var>,
    pub preds: Vec<Var>,
    pub selections: Vec<Selection>,
}

impl BatchObjective {
    pub fn bundle(&self, g: &Graph, delta: f64) -> LossBundle {
        LossBundle {
            reward: g.value(self.reward).item(),
            penalty: g.value(self.penalty).item(),
            closed_loop: g.value(self.closed_loop).item(),
            delta,
        }
    }
}

/// Records the compensated chain for a batch and its batch-mean losses.
///
/// `fixed` replays earlier selections (one per item) instead of choosing anew.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    g: &mut Graph,
    vfn: &Vfn,
    task: &TaskNet,
    rsc: &Rsc,
    rsc_bound: &Bound,
    batch: &[BatchItem<'_>],
    delta: f64,
    fixed: Option<&[Selection]>,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    if let Some(f) = fixed {
        if f.len() != batch.len() {
            return Err(Error::shape("batch_objective", "one fixed selection per item required"));
        }
    }
    let vp = vfn.bind(g, false);
    let tp = task.bind(g, false);
    let mut fused = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    let mut selections = Vec::with_capacity(batch.len());
    let mut sum: Option<Var> = None;
    for (i, item) in batch.iter().enumerate() {
        let stack = FeatureVars {
            ir: item.native.stack.ir.iter().map(|t| g.constant(t.clone())).collect(),
            vi: item.native.stack.vi.iter().map(|t| g.constant(t.clone())).collect(),
        };
        let f_d = g.constant(item.reference.feature.clone());
        let (comp, sel) = rsc.forward_bound(g, rsc_bound, &stack, f_d, fixed.map(|f| &f[i]))?;
        let i_fs = vfn.inject_bound(g, &vp, item.pair, &comp)?;
        let (pred, _) = task.forward_bound(g, &tp, i_fs)?;
        let gt = g.constant(item.gt.clone());
        let c = reward_loss(g, task.kind(), pred, gt)?;
        sum = Some(match sum {
            Some(s) => g.add(s, c)?,
            None => c,
        });
        fused.push(i_fs);
        preds.push(pred);
        selections.push(sel);
    }
    let n = batch.len() as f64;
    let reward = g.scale(sum.expect("non-empty batch"), 1.0 / n);
    let reference_loss = batch.iter().map(|b| b.reference.loss).sum::<f64>() / n;
    let penalty = penalty_loss(g, reward, reference_loss)?;
    let closed_loop = closed_loop_loss(g, reward, penalty, delta)?;
    Ok(BatchObjective {
        reward,
        penalty,
        closed_loop,
        reference_loss,
        fused,
        preds,
        selections,
    })
}

/// Everything one pass through the chain produced for a (sample, task).
#[derive(Clone, Debug, PartialEq)]
pub struct ChainTrace {
    pub task: TaskKind,
    pub fused: Tensor,
    pub pred: Tensor,
    pub feature: Tensor,
    pub compensated: FeatureStack,
    pub fused_comp: Tensor,
    pub pred_comp: Tensor,
    pub selection: Selection,
    pub loss_pre: f64,
    pub loss_post: f64,
}

/// Inference through the chain; no parameter is touched.
pub fn chain_step(sample: &SceneSample, task: &TaskNet, vfn: &Vfn, rsc: &Rsc) -> Result<ChainTrace> {
    let native = NativePass::compute(vfn, &sample.pair)?;
    chain_step_from(&native, sample, task, vfn, rsc)
}

/// Task-customized fusion of a pair without ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Compensated {
    pub fused: Tensor,
    pub fused_comp: Tensor,
    pub selection: Selection,
}

pub fn compensate(pair: &ImagePair, task: &TaskNet, vfn: &Vfn, rsc: &Rsc) -> Result<Compensated> {
    let native = NativePass::compute(vfn, pair)?;
    let (_, feature) = task.forward(&native.fused)?;
    let (stack, selection) = rsc.forward(&native.stack, &feature)?;
    let fused_comp = vfn.forward_with_injection(pair, &stack)?;
    Ok(Compensated {
        fused: native.fused,
        fused_comp,
        selection,
    })
}

/// [`chain_step`] reusing a precomputed native pass.
pub fn chain_step_from(
    native: &NativePass,
    sample: &SceneSample,
    task: &TaskNet,
    vfn: &Vfn,
    rsc: &Rsc,
) -> Result<ChainTrace> {
    let gt = sample.gt(task.kind());
    let (pred, feature) = task.forward(&native.fused)?;
    let (compensated, selection) = rsc.forward(&native.stack, &feature)?;
    let fused_comp = vfn.forward_with_injection(&sample.pair, &compensated)?;
    let (pred_comp, _) = task.forward(&fused_comp)?;
    Ok(ChainTrace {
        task: task.kind(),
        loss_pre: task_loss_value(task.kind(), &pred, gt)?,
        loss_post: task_loss_value(task.kind(), &pred_comp, gt)?,
        fused: native.fused.clone(),
        pred,
        feature,
        compensated,
        fused_comp,
        pred_comp,
        selection,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RscTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub delta: f64,
}

impl Default for RscTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            batch: 4,
            epochs: 5,
            delta: DEFAULT_DELTA,
        }
    }
}

/// One row of the training report: means over an epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub task: TaskKind,
    pub loss_pre: f64,
    pub loss_post: f64,
    pub reward: f64,
    pub penalty: f64,
    pub closed_loop: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RscTrainReport {
    pub rows: Vec<EpochRow>,
}

/// Hooks called during [`train_rsc_with`].
pub trait TrainObserver {
    fn on_selection(&mut self, _epoch: usize, _task: TaskKind, _seed: u64, _selection: &Selection) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _epoch: usize, _rsc: &Rsc, _rows: &[EpochRow]) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn train_rsc(
    scenes: &[SceneSample],
    tasks: &[TaskNet],
    vfn: &Vfn,
    rsc: &mut Rsc,
    cfg: &RscTrainConfig,
) -> Result<RscTrainReport> {
    train_rsc_with(scenes, tasks, vfn, rsc, cfg, &mut ())
}

/// Stage 2: every step runs all tasks on the batch, sums their gradients
/// and takes one Adam step on the compensation module only.
pub fn train_rsc_with(
    scenes: &[SceneSample],
    tasks: &[TaskNet],
    vfn: &Vfn,
    rsc: &mut Rsc,
    cfg: &RscTrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<RscTrainReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("scenes"));
    }
    if tasks.is_empty() {
        return Err(Error::EmptyInput("tasks"));
    }
    if cfg.batch == 0 || cfg.delta < 0.0 {
        return Err(Error::Config("batch must be positive and delta non-negative".into()));
    }
    if !vfn.is_frozen() {
        return Err(Error::Config("fusion network must be frozen before stage 2".into()));
    }
    if let Some(t) = tasks.iter().find(|t| !t.is_frozen()) {
        return Err(Error::Config(format!("task {} must be frozen before stage 2", t.kind())));
    }
    // the frozen parts of the chain are the same every epoch
    let mut natives = Vec::with_capacity(scenes.len());
    let mut refs: Vec<Vec<ReferencePass>> = Vec::with_capacity(scenes.len());
    for s in scenes {
        let native = NativePass::compute(vfn, &s.pair)?;
        refs.push(
            tasks
                .iter()
                .map(|t| ReferencePass::compute(&native, t, s.gt(t.kind())))
                .collect::<Result<_>>()?,
        );
        natives.push(native);
    }
    let mut opt = Adam::new(rsc.params(), AdamConfig::with_lr(cfg.lr));
    let mut report = RscTrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut sums = vec![[0.0f64; 5]; tasks.len()];
        let mut batches = 0usize;
        for (start, chunk) in (0..scenes.len()).step_by(cfg.batch).zip(scenes.chunks(cfg.batch)) {
            let mut per_task = Vec::with_capacity(tasks.len());
            for (ti, task) in tasks.iter().enumerate() {
                let items: Vec<BatchItem> = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, s)| BatchItem {
                        pair: &s.pair,
                        gt: s.gt(task.kind()),
                        native: &natives[start + i],
                        reference: &refs[start + i][ti],
                    })
                    .collect();
                let mut g = Graph::new();
                let rp = rsc.bind(&mut g, true);
                let obj = batch_objective(&mut g, vfn, task, rsc, &rp, &items, cfg.delta, None)?;
                let b = obj.bundle(&g, cfg.delta);
                if !b.closed_loop.is_finite() {
                    let dump = serde_json::to_string(&obj.selections).unwrap_or_default();
                    return Err(Error::NonFinite {
                        context: format!(
                            "closed-loop loss, epoch {epoch}, task {}, scenes from seed {}; selections {dump}",
                            task.kind(),
                            chunk[0].seed
                        ),
                        value: b.closed_loop,
                    });
                }
                for (s, sel) in chunk.iter().zip(&obj.selections) {
                    observer.on_selection(epoch, task.kind(), s.seed, sel)?;
                }
                let row = &mut sums[ti];
                for (acc, v) in row.iter_mut().zip([obj.reference_loss, b.reward, b.reward, b.penalty, b.closed_loop]) {
                    *acc += v;
                }
                let mut gr = g.backward(obj.closed_loop)?;
                per_task.push(rp.collect(&mut gr, rsc.params()));
            }
            let grads = combine_task_gradients(&per_task)?;
            check_grads(&grads, "closed-loop gradient")?;
            opt.step(rsc.params_mut(), &grads)?;
            batches += 1;
        }
        let rows: Vec<EpochRow> = tasks
            .iter()
            .zip(&sums)
            .map(|(t, s)| {
                let n = batches as f64;
                EpochRow {
                    epoch,
                    task: t.kind(),
                    loss_pre: s[0] / n,
                    loss_post: s[1] / n,
                    reward: s[2] / n,
                    penalty: s[3] / n,
                    closed_loop: s[4] / n,
                }
            })
            .collect();
        for r in &rows {
            log::info!(
                "train_rsc epoch {epoch} {}: pre {:.5} post {:.5} penalty {:.5}",
                r.task,
                r.loss_pre,
                r.loss_post,
                r.penalty
            );
        }
        observer.on_epoch(epoch, rsc, &rows)?;
        report.rows.extend(rows);
    }
    Ok(report)
}

/// Held-out mean task losses before and after compensation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompensationEval {
    pub task: TaskKind,
    pub loss_pre: f64,
    pub loss_post: f64,
}

impl CompensationEval {
    /// `(pre - post) / pre`.
    pub fn relative_improvement(&self) -> f64 {
        (self.loss_pre - self.loss_post) / self.loss_pre
    }

    pub fn regression(&self) -> f64 {
        self.loss_post - self.loss_pre
    }
}

pub fn evaluate_compensation(
    scenes: &[SceneSample],
    tasks: &[TaskNet],
    vfn: &Vfn,
    rsc: &Rsc,
) -> Result<Vec<CompensationEval>> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("scenes"));
    }
    let mut sums = vec![(0.0, 0.0); tasks.len()];
    for s in scenes {
        let native = NativePass::compute(vfn, &s.pair)?;
        for (t, acc) in tasks.iter().zip(sums.iter_mut()) {
            let trace = chain_step_from(&native, s, t, vfn, rsc)?;
            acc.0 += trace.loss_pre;
            acc.1 += trace.loss_post;
        }
    }
    let n = scenes.len() as f64;
    Ok(tasks
        .iter()
        .zip(sums)
        .map(|(t, (pre, post))| CompensationEval {
            task: t.kind(),
            loss_pre: pre / n,
            loss_post: post / n,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_value(0.2, 0.4), 0.0);
        assert_eq!(penalty_value(0.4, 0.4), 0.0);
        assert!((penalty_value(0.9, 0.4) - 0.5).abs() < 1e-15);
        let b = LossBundle::new(0.2, 0.1, 5.0);
        assert!((b.penalty - 0.1).abs() < 1e-15);
        assert_eq!(b.closed_loop, b.reward + 5.0 * b.penalty);
    }

    #[test]
    fn closed_loop_arithmetic() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::scalar(0.2));
        let p = g.constant(Tensor::scalar(0.1));
        let cl = closed_loop_loss(&mut g, r, p, 5.0).unwrap();
        assert!((g.value(cl).item() - 0.7).abs() < 1e-15);
        let zero = g.constant(Tensor::scalar(0.0));
        let cl = closed_loop_loss(&mut g, r, zero, 5.0).unwrap();
        assert_eq!(g.value(cl).item(), 0.2);
    }

    #[test]
    fn gradient_combination() {
        let a = GradSet(vec![Tensor::vector(vec![1.0, -2.0])]);
        let neg = GradSet(vec![Tensor::vector(vec![-1.0, 2.0])]);
        assert_eq!(combine_task_gradients(std::slice::from_ref(&a)).unwrap(), a);
        let z = combine_task_gradients(&[a, neg]).unwrap();
        assert!(z.tensors()[0].data().iter().all(|&v| v == 0.0));
        assert!(combine_task_gradients(&[]).is_err());
        let short = GradSet(vec![]);
        assert!(combine_task_gradients(&[short, GradSet(vec![Tensor::scalar(1.0)])]).is_err());
    }
}
