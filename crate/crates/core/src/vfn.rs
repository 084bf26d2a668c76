//! Fusion network: per-modality feature extraction blocks (FEB) and the
//! fusion-reconstruction block (FRB).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvLayer, ConvStack, LEAKY_SLOPE};
use crate::tensor::{Adam, AdamConfig, Bound, GradSet, Graph, ParamStore, PoolKind, Tensor, Var};

/// Infrared and visible images of equal size, `1 x H x W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub ir: Tensor,
    pub vi: Tensor,
}

impl ImagePair {
    /// Validates shapes and clamps both images to `[0, 1]`.
    pub fn new(ir: Tensor, vi: Tensor) -> Result<Self> {
        let (c, h, w) = ir.dims3()?;
        if c != 1 {
            return Err(Error::shape("image_pair", format!("expected one channel, got {c}")));
        }
        if ir.shape() != vi.shape() {
            return Err(Error::shape(
                "image_pair",
                format!("ir {:?} vs vi {:?}", ir.shape(), vi.shape()),
            ));
        }
        if h < 3 || w < 3 {
            return Err(Error::TooSmall { h, w, min: 3 });
        }
        Ok(Self {
            ir: ir.clamp(0.0, 1.0),
            vi: vi.clamp(0.0, 1.0),
        })
    }

    pub fn height(&self) -> usize {
        self.ir.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.ir.shape()[2]
    }

    /// Pixelwise maximum of the two sources.
    pub fn max_image(&self) -> Tensor {
        self.ir.zip_map(&self.vi, f64::max).expect("shapes checked at construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ir,
    Vi,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Ir, Modality::Vi];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ir => "ir",
            Modality::Vi => "vi",
        }
    }
}

/// Features `F^1 .. F^{L-1}` of both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub ir: Vec<Tensor>,
    pub vi: Vec<Tensor>,
}

impl FeatureStack {
    pub fn get(&self, m: Modality) -> &[Tensor] {
        match m {
            Modality::Ir => &self.ir,
            Modality::Vi => &self.vi,
        }
    }

    pub fn depth(&self) -> usize {
        self.ir.len()
    }
}

/// Graph handles of a [`FeatureStack`].
#[derive(Clone, Debug)]
pub struct FeatureVars {
    pub ir: Vec<Var>,
    pub vi: Vec<Var>,
}

impl FeatureVars {
    pub fn get(&self, m: Modality) -> &[Var] {
        match m {
            Modality::Ir => &self.ir,
            Modality::Vi => &self.vi,
        }
    }

    pub fn values(&self, g: &Graph) -> FeatureStack {
        FeatureStack {
            ir: self.ir.iter().map(|v| g.value(*v).clone()).collect(),
            vi: self.vi.iter().map(|v| g.value(*v).clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VfnConfig {
    /// Number of FEBs per modality (`L`).
    pub layers: usize,
    pub base_channels: usize,
}

impl Default for VfnConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            base_channels: 32,
        }
    }
}

impl VfnConfig {
    /// Narrow variant for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            base_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("vfn needs at least one layer".into()));
        }
        if self.base_channels < 2 {
            return Err(Error::Config("vfn base width must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Vfn {
    config: VfnConfig,
    store: ParamStore,
    feb_ir: Vec<ConvStack>,
    feb_vi: Vec<ConvStack>,
    frb_febs: Vec<ConvStack>,
    recon: [ConvLayer; 3],
    frozen: bool,
}

fn feb_stack(store: &mut ParamStore, prefix: &str, l: usize, cin: usize, c: usize, rng: &mut ChaCha8Rng) -> ConvStack {
    let layers = if l == 1 {
        vec![ConvLayer::new(store, &format!("{prefix}.{l}.conv0"), cin, c, 3, 1, rng)]
    } else {
        (0..3)
            .map(|i| ConvLayer::new(store, &format!("{prefix}.{l}.conv{i}"), c, c, 3, 1, rng))
            .collect()
    };
    ConvStack { layers }
}

impl Vfn {
    pub fn new(config: VfnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let mut feb_ir = Vec::new();
        let mut feb_vi = Vec::new();
        for l in 1..=config.layers {
            feb_ir.push(feb_stack(&mut store, "feb.ir", l, 1, c, &mut rng));
            feb_vi.push(feb_stack(&mut store, "feb.vi", l, 1, c, &mut rng));
        }
        let frb_febs = (1..=config.layers)
            .map(|l| feb_stack(&mut store, "frb.feb", l, 2 * c, 2 * c, &mut rng))
            .collect();
        let recon = [
            ConvLayer::new(&mut store, "frb.recon0", 2 * c, c, 3, 1, &mut rng),
            ConvLayer::new(&mut store, "frb.recon1", c, c / 2, 3, 1, &mut rng),
            ConvLayer::new(&mut store, "frb.recon2", c / 2, 1, 3, 1, &mut rng),
        ];
        log::debug!("vfn: {} parameters", store.trainable_count());
        Ok(Self {
            config,
            store,
            feb_ir,
            feb_vi,
            frb_febs,
            recon,
            frozen: false,
        })
    }

    pub fn config(&self) -> &VfnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Frozen("vfn".into()));
        }
        Ok(&mut self.store)
    }

    pub fn param_count(&self) -> usize {
        self.store.entries().iter().map(|p| p.value.len()).sum()
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

    /// Binds the parameters; a frozen network never requests gradients.
    pub fn bind(&self, g: &mut Graph, train: bool) -> Bound {
        self.store.bind(g, train && !self.frozen)
    }

    /// Binds caller-recorded handles, one per parameter tensor.
    pub fn bind_values(&self, _g: &mut Graph, vars: &[Var]) -> Result<Bound> {
        bind_checked(&self.store, vars)
    }

    /// `F^l` of one modality from its input (the image for `l = 1`).
    pub fn feb_forward(&self, g: &mut Graph, p: &Bound, m: Modality, l: usize, x: Var) -> Result<Var> {
        let febs = match m {
            Modality::Ir => &self.feb_ir,
            Modality::Vi => &self.feb_vi,
        };
        let feb = l
            .checked_sub(1)
            .and_then(|i| febs.get(i))
            .ok_or_else(|| Error::Config(format!("feb layer {l} outside 1..={}", self.config.layers)))?;
        feb.forward(g, p, x)
    }

    /// Attention-weighted fusion of `F^L` of both modalities and reconstruction.
    pub fn frb_forward(&self, g: &mut Graph, p: &Bound, f_ir: Var, f_vi: Var) -> Result<Var> {
        let (_, h, w) = g.value(f_ir).dims3()?;
        let s_ir = g.sobel(f_ir)?;
        let s_vi = g.sobel(f_vi)?;
        let grad = g.concat(s_ir, s_vi)?;
        let gap = g.pool(grad, PoolKind::Gap)?;
        let gap = g.broadcast_spatial(gap, h, w)?;
        let gmp = g.pool(grad, PoolKind::Gmp)?;
        let gmp = g.broadcast_spatial(gmp, h, w)?;
        let meanp = g.pool(grad, PoolKind::MeanP)?;
        let maxp = g.pool(grad, PoolKind::MaxP)?;
        let a = g.mul(gap, gmp)?;
        let a = g.mul(a, meanp)?;
        let a = g.mul(a, maxp)?;
        let attention = g.sigmoid(a);
        let feats = g.concat(f_ir, f_vi)?;
        let mut x = g.mul(attention, feats)?;
        for feb in &self.frb_febs {
            x = feb.forward(g, p, x)?;
        }
        let y = self.recon[0].forward(g, p, x)?;
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        let y = self.recon[1].forward(g, p, y)?;
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        let y = self.recon[2].forward(g, p, y)?;
        Ok(g.sigmoid(y))
    }

    /// Fused image and the exposed features `F^1 .. F^{L-1}`.
    pub fn forward_bound(&self, g: &mut Graph, p: &Bound, pair: &ImagePair) -> Result<(Var, FeatureVars)> {
        let ir = g.constant(pair.ir.clone());
        let vi = g.constant(pair.vi.clone());
        let mut x = [ir, vi];
        let mut stack = FeatureVars { ir: Vec::new(), vi: Vec::new() };
        for l in 1..=self.config.layers {
            for (i, m) in Modality::BOTH.into_iter().enumerate() {
                x[i] = self.feb_forward(g, p, m, l, x[i])?;
            }
            if l < self.config.layers {
                stack.ir.push(x[0]);
                stack.vi.push(x[1]);
            }
        }
        let fused = self.frb_forward(g, p, x[0], x[1])?;
        Ok((fused, stack))
    }

    /// Re-enters the network with `replaced` standing in for the native
    /// features; layers after the deepest replaced one are recomputed.
    pub fn inject_bound(&self, g: &mut Graph, p: &Bound, pair: &ImagePair, replaced: &FeatureVars) -> Result<Var> {
        let depth = self.config.layers - 1;
        if replaced.ir.len() != depth || replaced.vi.len() != depth {
            return Err(Error::shape(
                "vfn_forward_with_injection",
                format!(
                    "expected {depth} replaced layers per modality, got {}/{}",
                    replaced.ir.len(),
                    replaced.vi.len()
                ),
            ));
        }
        let want = [self.config.base_channels, pair.height(), pair.width()];
        for v in replaced.ir.iter().chain(&replaced.vi) {
            if g.shape(*v) != want {
                return Err(Error::shape(
                    "vfn_forward_with_injection",
                    format!("replaced feature {:?}, native {:?}", g.shape(*v), want),
                ));
            }
        }
        if depth == 0 {
            return Ok(self.forward_bound(g, p, pair)?.0);
        }
        let mut x = [replaced.ir[depth - 1], replaced.vi[depth - 1]];
        for (i, m) in Modality::BOTH.into_iter().enumerate() {
            x[i] = self.feb_forward(g, p, m, self.config.layers, x[i])?;
        }
        self.frb_forward(g, p, x[0], x[1])
    }

    pub fn forward(&self, pair: &ImagePair) -> Result<(Tensor, FeatureStack)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (fused, stack) = self.forward_bound(&mut g, &p, pair)?;
        Ok((g.value(fused).clone(), stack.values(&g)))
    }

    pub fn forward_with_injection(&self, pair: &ImagePair, replaced: &FeatureStack) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let vars = FeatureVars {
            ir: replaced.ir.iter().map(|t| g.constant(t.clone())).collect(),
            vi: replaced.vi.iter().map(|t| g.constant(t.clone())).collect(),
        };
        let fused = self.inject_bound(&mut g, &p, pair, &vars)?;
        Ok(g.value(fused).clone())
    }
}

pub(crate) fn bind_checked(store: &ParamStore, vars: &[Var]) -> Result<Bound> {
    if vars.len() != store.len() {
        return Err(Error::shape(
            "bind",
            format!("{} handles for {} parameters", vars.len(), store.len()),
        ));
    }
    Ok(Bound::from_vars(vars.to_vec()))
}

/// `mean|I_f - max(I_ir, I_vi)| + lambda * mean|sobel(I_f) - max(sobel(I_ir), sobel(I_vi))|`.
pub fn fusion_loss(g: &mut Graph, fused: Var, pair: &ImagePair, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let target = g.constant(pair.max_image());
    let pixel = g.l1_distance(fused, target)?;
    let ir = g.constant(pair.ir.clone());
    let vi = g.constant(pair.vi.clone());
    let s_ir = g.sobel(ir)?;
    let s_vi = g.sobel(vi)?;
    let grad_target = g.max(s_ir, s_vi)?;
    let s_f = g.sobel(fused)?;
    let grad = g.l1_distance(s_f, grad_target)?;
    let grad = g.scale(grad, lambda);
    g.add(pixel, grad)
}

pub fn fusion_loss_value(fused: &Tensor, pair: &ImagePair, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(fused.clone());
    let loss = fusion_loss(&mut g, f, pair, lambda)?;
    Ok(g.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VfnTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda: f64,
}

impl Default for VfnTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            epochs: 10,
            lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VfnTrainReport {
    /// Mean loss over the dataset before the first update.
    pub initial_loss: f64,
    /// Mean of the per-batch losses seen during each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the dataset after the last update.
    pub final_loss: f64,
}

/// Mean fusion loss of `vfn` over `data`.
pub fn evaluate_fusion_loss(vfn: &Vfn, data: &[ImagePair], lambda: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("image pairs"));
    }
    let mut total = 0.0;
    for pair in data {
        let (fused, _) = vfn.forward(pair)?;
        total += fusion_loss_value(&fused, pair, lambda)?;
    }
    Ok(total / data.len() as f64)
}

/// Stage-1 training. Batches follow dataset order; the network is frozen on return.
pub fn train_vfn(vfn: &mut Vfn, data: &[ImagePair], cfg: &VfnTrainConfig) -> Result<VfnTrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput("image pairs"));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let initial_loss = evaluate_fusion_loss(vfn, data, cfg.lambda)?;
    let mut opt = Adam::new(vfn.params(), AdamConfig::with_lr(cfg.lr));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for batch in data.chunks(cfg.batch) {
            let mut grads = vfn.params().zero_grads();
            for pair in batch {
                let mut g = Graph::new();
                let p = vfn.bind(&mut g, true);
                let (fused, _) = vfn.forward_bound(&mut g, &p, pair)?;
                let loss = fusion_loss(&mut g, fused, pair, cfg.lambda)?;
                let loss = g.scale(loss, 1.0 / batch.len() as f64);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("fusion loss, epoch {epoch}"),
                        value,
                    });
                }
                sum += value * batch.len() as f64;
                let mut gr = g.backward(loss)?;
                grads.add_assign(&p.collect(&mut gr, vfn.params()))?;
            }
            check_grads(&grads, "fusion loss gradient")?;
            opt.step(vfn.params_mut()?, &grads)?;
        }
        let mean = sum / data.len() as f64;
        log::info!("train_vfn epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let final_loss = evaluate_fusion_loss(vfn, data, cfg.lambda)?;
    vfn.freeze();
    Ok(VfnTrainReport {
        initial_loss,
        epoch_losses,
        final_loss,
    })
}

pub(crate) fn check_grads(grads: &GradSet, context: &str) -> Result<()> {
    if grads.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.into(),
            value: f64::NAN,
        })
    }
}
