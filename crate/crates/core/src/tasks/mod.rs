//! Frozen synthetic downstream tasks and the scenes they are trained on.

mod scene;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvLayer, LEAKY_SLOPE};
use crate::tensor::{Adam, AdamConfig, Bound, Graph, ParamStore, Tensor, Var};
use crate::vfn::{bind_checked, check_grads};

pub use scene::{
    generate_scene, generate_scene_with, generate_scenes, Blob, Patch, SceneLatent, SceneParams, SceneSample, Wave,
    MIN_SCENE_SIZE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Thermal hotspot regression, mean squared error.
    Heat,
    /// Warm-region mask, binary cross-entropy.
    Segmentation,
    /// Dominant-object mask, binary cross-entropy.
    Saliency,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Heat, TaskKind::Segmentation, TaskKind::Saliency];

    /// 1-based task number.
    pub fn id(self) -> u32 {
        match self {
            TaskKind::Heat => 1,
            TaskKind::Segmentation => 2,
            TaskKind::Saliency => 3,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == id)
            .ok_or_else(|| Error::Config(format!("task id {id} is not one of 1, 2, 3")))
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Heat => "heat",
            TaskKind::Segmentation => "seg",
            TaskKind::Saliency => "sal",
        }
    }

    pub fn loss_name(self) -> &'static str {
        match self {
            TaskKind::Heat => "mse_heat",
            TaskKind::Segmentation => "bce_seg",
            TaskKind::Saliency => "bce_sal",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "heat" => Ok(TaskKind::Heat),
            "2" | "seg" => Ok(TaskKind::Segmentation),
            "3" | "sal" => Ok(TaskKind::Saliency),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// The task's loss `c` on a prediction.
pub fn task_loss(g: &mut Graph, kind: TaskKind, pred: Var, gt: Var) -> Result<Var> {
    match kind {
        TaskKind::Heat => g.mse(pred, gt),
        TaskKind::Segmentation | TaskKind::Saliency => g.bce(pred, gt),
    }
}

pub fn task_loss_value(kind: TaskKind, pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(gt.clone());
    let loss = task_loss(&mut g, kind, p, t)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub width: usize,
    /// Dilation of each of the three body convolutions.
    pub dilations: [usize; 3],
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            width: 16,
            dilations: [1, 2, 3],
        }
    }
}

impl TaskConfig {
    pub fn tiny() -> Self {
        Self {
            width: 3,
            dilations: [1, 2, 1],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskNet {
    kind: TaskKind,
    config: TaskConfig,
    store: ParamStore,
    body: Vec<ConvLayer>,
    head: ConvLayer,
    frozen: bool,
}

impl TaskNet {
    pub fn new(kind: TaskKind, config: TaskConfig, seed: u64) -> Result<Self> {
        if config.width == 0 || config.dilations.contains(&0) {
            return Err(Error::Config("task width and dilations must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.width;
        let body = config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let cin = if i == 0 { 1 } else { c };
                ConvLayer::new(&mut store, &format!("body{i}"), cin, c, 3, d, &mut rng)
            })
            .collect();
        let head = ConvLayer::new(&mut store, "head", c, 1, 1, 1, &mut rng);
        Ok(Self {
            kind,
            config,
            store,
            body,
            head,
            frozen: false,
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Frozen(format!("task {}", self.kind)));
        }
        Ok(&mut self.store)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bind(&self, g: &mut Graph, train: bool) -> Bound {
        self.store.bind(g, train && !self.frozen)
    }

    pub fn bind_values(&self, _g: &mut Graph, vars: &[Var]) -> Result<Bound> {
        bind_checked(&self.store, vars)
    }

    /// Sigmoid prediction and the penultimate feature map `F_d`.
    pub fn forward_bound(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<(Var, Var)> {
        let mut x = image;
        for layer in &self.body {
            let y = layer.forward(g, p, x)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let logits = self.head.forward(g, p, x)?;
        Ok((g.sigmoid(logits), x))
    }

    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let (pred, feat) = self.forward_bound(&mut g, &p, x)?;
        Ok((g.value(pred).clone(), g.value(feat).clone()))
    }

    pub fn loss(&self, g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
        task_loss(g, self.kind, pred, gt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Mean training-loss targets for heat, segmentation and saliency.
    pub thresholds: [f64; 3],
}

impl Default for TaskTrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            batch: 4,
            max_epochs: 40,
            thresholds: [0.017, 0.14, 0.11],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskTrainReport {
    pub kind: TaskKind,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub reached_threshold: bool,
}

/// Trains one network per task on max-fused scene images and freezes it.
pub fn pretrain_tasks(
    scenes: &[SceneSample],
    config: &TaskConfig,
    train: &TaskTrainConfig,
    seed: u64,
) -> Result<Vec<(TaskNet, TaskTrainReport)>> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("scenes"));
    }
    if train.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let inputs: Vec<Tensor> = scenes.iter().map(|s| s.pair.max_image()).collect();
    let mut out = Vec::with_capacity(3);
    for (i, kind) in TaskKind::ALL.into_iter().enumerate() {
        let mut net = TaskNet::new(kind, *config, seed.wrapping_add(kind.id() as u64))?;
        let mut opt = Adam::new(net.params(), AdamConfig::with_lr(train.lr));
        let threshold = train.thresholds[i];
        let mut epoch_losses = Vec::new();
        for epoch in 0..train.max_epochs {
            let mut sum = 0.0;
            for (chunk, imgs) in scenes.chunks(train.batch).zip(inputs.chunks(train.batch)) {
                let mut grads = net.params().zero_grads();
                for (scene, img) in chunk.iter().zip(imgs) {
                    let mut g = Graph::new();
                    let p = net.bind(&mut g, true);
                    let x = g.constant(img.clone());
                    let (pred, _) = net.forward_bound(&mut g, &p, x)?;
                    let gt = g.constant(scene.gt(kind).clone());
                    let value = task_loss_value(kind, g.value(pred), scene.gt(kind))?;
                    if !value.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("{kind} pretraining, epoch {epoch}"),
                            value,
                        });
                    }
                    sum += value;
                    // cross-entropy against soft targets for every task: squared
                    // error through the output sigmoid stalls once it saturates
                    let loss = g.bce(pred, gt)?;
                    let loss = g.scale(loss, 1.0 / chunk.len() as f64);
                    let mut gr = g.backward(loss)?;
                    grads.add_assign(&p.collect(&mut gr, net.params()))?;
                }
                check_grads(&grads, "task gradient")?;
                opt.step(net.params_mut()?, &grads)?;
            }
            let mean = sum / scenes.len() as f64;
            log::debug!("pretrain {kind} epoch {epoch}: loss {mean:.5}");
            epoch_losses.push(mean);
            if mean < threshold {
                break;
            }
        }
        let final_loss = mean_task_loss(&net, scenes)?;
        let reached_threshold = final_loss < threshold;
        if !reached_threshold {
            log::warn!("task {kind} stopped at loss {final_loss:.5}, above threshold {threshold}; freezing anyway");
        }
        net.freeze();
        out.push((
            net,
            TaskTrainReport {
                kind,
                epoch_losses,
                final_loss,
                reached_threshold,
            },
        ));
    }
    Ok(out)
}

/// Mean loss of `net` on the max-fused images of `scenes`.
pub fn mean_task_loss(net: &TaskNet, scenes: &[SceneSample]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("scenes"));
    }
    let mut total = 0.0;
    for s in scenes {
        let (pred, _) = net.forward(&s.pair.max_image())?;
        total += task_loss_value(net.kind(), &pred, s.gt(net.kind()))?;
    }
    Ok(total / scenes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_match_definitions() {
        let gt = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let half = Tensor::full(&[1, 2, 2], 0.5);
        let bce = task_loss_value(TaskKind::Segmentation, &half, &gt).unwrap();
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(task_loss_value(TaskKind::Heat, &gt, &gt).unwrap(), 0.0);
        assert!(task_loss_value(TaskKind::Heat, &half, &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn forward_contract() {
        let net = TaskNet::new(TaskKind::Saliency, TaskConfig::default(), 9).unwrap().frozen();
        let before = net.params().checksum();
        let img = generate_scene(1, 32, 32).unwrap().pair.max_image();
        let (pred, feat) = net.forward(&img).unwrap();
        assert_eq!(feat.shape(), &[16, 32, 32]);
        assert!(pred.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(net.params().checksum(), before);
    }

    #[test]
    fn ids_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(TaskKind::from_id(k.id()).unwrap(), k);
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
        }
        assert!(TaskKind::from_id(4).is_err());
    }
}
