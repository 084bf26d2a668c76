//! Task-conditioned compensation of the fusion network's intermediate
//! features with dynamically predicted depthwise kernels.

mod init;
mod select;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvLayer, LinearLayer, LEAKY_SLOPE};
use crate::tasks::TaskConfig;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, PoolKind, Tensor, Var};
use crate::vfn::{bind_checked, FeatureStack, FeatureVars, Modality, VfnConfig};

pub use init::{gram_deviation, init_bank, init_prototypes, orthonormal_rows};
pub use select::{
    argmax, column_argmax, select_basis, select_configurations, BlockSelection, BranchChoice, ConfigSelection,
    Selection,
};

/// Convolution configurations `(k, d)` in prototype-row order.
pub const CONFIGS: [(usize, usize); 4] = [(1, 1), (3, 1), (3, 2), (3, 3)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RscConfig {
    /// Width of the compensated features; equals the fusion network's base width.
    pub channels: usize,
    /// Width of the task feature `F_d`.
    pub task_channels: usize,
    /// Fusion-network depth `L`; compensation covers layers `1..L`.
    pub layers: usize,
    /// Branches per block (`M`).
    pub branches: usize,
    pub e1: usize,
    pub e2: usize,
    /// Basis vectors per sub-bank.
    pub bank_size: usize,
    /// Output width of the convolutional projections.
    pub proj_channels: usize,
    /// Hidden width of every two-layer linear stack.
    pub hidden: usize,
    /// Std of the last prediction-head layer; 0 yields zero kernels.
    pub head_init_std: f64,
}

impl RscConfig {
    pub fn new(vfn: &VfnConfig, task: &TaskConfig) -> Self {
        Self {
            channels: vfn.base_channels,
            task_channels: task.width,
            layers: vfn.layers,
            branches: 4,
            e1: 16,
            e2: 256,
            bank_size: 32,
            proj_channels: 32,
            hidden: 128,
            head_init_std: 0.01,
        }
    }

    /// Narrow variant for finite-difference checks.
    pub fn tiny(vfn: &VfnConfig, task: &TaskConfig) -> Self {
        Self {
            e1: 4,
            e2: 8,
            bank_size: 5,
            proj_channels: 3,
            hidden: 6,
            head_init_std: 0.3,
            ..Self::new(vfn, task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config("compensation needs a fusion network with L >= 2".into()));
        }
        let sizes = [
            self.channels,
            self.task_channels,
            self.branches,
            self.e1,
            self.e2,
            self.bank_size,
            self.proj_channels,
            self.hidden,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("rsc widths must be positive".into()));
        }
        if self.e1 < CONFIGS.len() || self.bank_size > self.e2 {
            return Err(Error::Config(format!(
                "orthonormal init needs e1 >= {} and bank_size <= e2",
                CONFIGS.len()
            )));
        }
        if !(self.head_init_std >= 0.0) {
            return Err(Error::Config("head_init_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Two convolutions with a LeakyReLU between them.
#[derive(Clone, Debug)]
struct ConvProj([ConvLayer; 2]);

impl ConvProj {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.0[0].forward(g, p, x)?;
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        self.0[1].forward(g, p, y)
    }
}

/// Two linear layers with a LeakyReLU between them.
#[derive(Clone, Debug)]
struct LinearProj([LinearLayer; 2]);

impl LinearProj {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.0[0].forward(g, p, x)?;
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        self.0[1].forward(g, p, y)
    }
}

/// Feature projection, task projection and the linear stack of one query path.
#[derive(Clone, Debug)]
struct QueryPath {
    feature: ConvProj,
    task: ConvProj,
    linear: LinearProj,
}

impl QueryPath {
    fn new(store: &mut ParamStore, prefix: &str, names: [&str; 3], c: &RscConfig, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let pc = c.proj_channels;
        let n = |i: usize, j: usize| format!("{prefix}.{}.{j}", names[i]);
        Self {
            feature: ConvProj([
                ConvLayer::new(store, &n(0, 0), c.channels, pc, 3, 1, rng),
                ConvLayer::new(store, &n(0, 1), pc, pc, 3, 1, rng),
            ]),
            task: ConvProj([
                ConvLayer::new(store, &n(1, 0), c.task_channels, pc, 1, 1, rng),
                ConvLayer::new(store, &n(1, 1), pc, pc, 3, 1, rng),
            ]),
            linear: LinearProj([
                LinearLayer::new(store, &n(2, 0), 2 * pc, c.hidden, rng),
                LinearLayer::new(store, &n(2, 1), c.hidden, out, rng),
            ]),
        }
    }

    /// `linear(GAP(concat(feature(F_l), task(F_d))))` as a vector.
    fn forward(&self, g: &mut Graph, p: &Bound, f_l: Var, f_d: Var) -> Result<Var> {
        let a = self.feature.forward(g, p, f_l)?;
        let b = self.task.forward(g, p, f_d)?;
        let cat = g.concat(a, b)?;
        let pooled = g.pool(cat, PoolKind::Gap)?;
        let n = g.value(pooled).len();
        let flat = g.reshape(pooled, &[n])?;
        self.linear.forward(g, p, flat)
    }
}

/// One injection block, bound to a (layer, modality) pair.
#[derive(Clone, Debug)]
pub struct A2si {
    pub layer: usize,
    pub modality: Modality,
    config_path: QueryPath,
    basis_path: QueryPath,
    heads: Vec<LinearProj>,
}

#[derive(Clone, Debug)]
pub struct Rsc {
    config: RscConfig,
    store: ParamStore,
    prototypes: ParamId,
    /// Sub-banks per modality, in [`CONFIGS`] order.
    banks: [[ParamId; 4]; 2],
    blocks: Vec<A2si>,
}

fn modality_index(m: Modality) -> usize {
    match m {
        Modality::Ir => 0,
        Modality::Vi => 1,
    }
}

impl Rsc {
    pub fn new(config: RscConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let prototypes = store.add("prototypes", init_prototypes(rng.gen(), config.e1)?, false);
        let mut banks = [[prototypes; 4]; 2];
        for m in Modality::BOTH {
            for (j, (k, d)) in CONFIGS.into_iter().enumerate() {
                let bank = init_bank(rng.gen(), config.bank_size, config.e2)?;
                banks[modality_index(m)][j] = store.add(format!("bvb.{}.k{k}d{d}", m.name()), bank, true);
            }
        }
        let mut blocks = Vec::new();
        for layer in 1..config.layers {
            for m in Modality::BOTH {
                let prefix = format!("a2si.{layer}.{}", m.name());
                let config_path = QueryPath::new(
                    &mut store,
                    &prefix,
                    ["proj1", "proj2", "proj3"],
                    &config,
                    config.e1 * config.branches,
                    &mut rng,
                );
                let basis_path =
                    QueryPath::new(&mut store, &prefix, ["proj4", "proj5", "proj6"], &config, config.e2, &mut rng);
                let heads = CONFIGS
                    .iter()
                    .map(|&(k, d)| {
                        let name = format!("{prefix}.pred.k{k}d{d}");
                        LinearProj([
                            LinearLayer::new(&mut store, &format!("{name}.0"), config.e2, config.hidden, &mut rng),
                            LinearLayer::with_std(
                                &mut store,
                                &format!("{name}.1"),
                                config.hidden,
                                config.channels * k * k,
                                config.head_init_std,
                                &mut rng,
                            ),
                        ])
                    })
                    .collect();
                blocks.push(A2si {
                    layer,
                    modality: m,
                    config_path,
                    basis_path,
                    heads,
                });
            }
        }
        let rsc = Self {
            config,
            store,
            prototypes,
            banks,
            blocks,
        };
        log::debug!("rsc: {} trainable parameters", rsc.param_count());
        Ok(rsc)
    }

    pub fn config(&self) -> &RscConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Trainable scalars: bank, projections and prediction heads of every block.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn blocks(&self) -> &[A2si] {
        &self.blocks
    }

    pub fn prototypes(&self) -> &Tensor {
        self.store.get(self.prototypes)
    }

    pub fn bank(&self, m: Modality, config: usize) -> &Tensor {
        self.store.get(self.banks[modality_index(m)][config])
    }

    pub fn bind(&self, g: &mut Graph, train: bool) -> Bound {
        self.store.bind(g, train)
    }

    pub fn bind_values(&self, _g: &mut Graph, vars: &[Var]) -> Result<Bound> {
        bind_checked(&self.store, vars)
    }

    /// Configuration query of `block` (length `e1 * M`).
    pub fn config_query(&self, g: &mut Graph, p: &Bound, block: usize, f_l: Var, f_d: Var) -> Result<Var> {
        self.block(block)?.config_path.forward(g, p, f_l, f_d)
    }

    /// Basis query of `block` (length `e2`).
    pub fn basis_query(&self, g: &mut Graph, p: &Bound, block: usize, f_l: Var, f_d: Var) -> Result<Var> {
        self.block(block)?.basis_path.forward(g, p, f_l, f_d)
    }

    /// Depthwise kernel `C x k x k` predicted from a basis vector.
    pub fn predict_kernel(&self, g: &mut Graph, p: &Bound, block: usize, config: usize, row: Var) -> Result<Var> {
        let (k, _) = *CONFIGS
            .get(config)
            .ok_or_else(|| Error::Config(format!("configuration {config} out of range")))?;
        let flat = self.block(block)?.heads[config].forward(g, p, row)?;
        g.reshape(flat, &[self.config.channels, k, k])
    }

    fn block(&self, i: usize) -> Result<&A2si> {
        self.blocks
            .get(i)
            .ok_or_else(|| Error::Config(format!("block {i} out of {}", self.blocks.len())))
    }

    /// Compensates one feature map.
    ///
    /// Selections are hard in the forward pass. Each branch kernel is scaled
    /// by `p / p_ref` for the chosen configuration and basis probabilities,
    /// with `p_ref` the recorded value of `p`; the factor is exactly 1 unless
    /// `fixed` supplies references from another pass, and it carries
    /// gradients back to the query paths.
    pub fn a2si_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        block: usize,
        f_l: Var,
        f_d: Var,
        fixed: Option<&BlockSelection>,
    ) -> Result<(Var, BlockSelection)> {
        let b = self.block(block)?;
        let (c, h, w) = g.value(f_l).dims3()?;
        if c != self.config.channels {
            return Err(Error::shape(
                "a2si_forward",
                format!("feature has {c} channels, expected {}", self.config.channels),
            ));
        }
        let m_branches = self.config.branches;
        if let Some(f) = fixed {
            if f.branches.len() != m_branches {
                return Err(Error::shape("a2si_forward", "fixed selection has the wrong branch count"));
            }
        }
        let f_d = g.resize_bilinear(f_d, h, w)?;
        let v = b.config_path.forward(g, p, f_l, f_d)?;
        let s = select::config_probabilities(g, v, p[self.prototypes], m_branches)?;
        let q = b.basis_path.forward(g, p, f_l, f_d)?;
        let chosen = match fixed {
            Some(f) => f.branches.iter().map(|br| br.config).collect(),
            None => column_argmax(g.value(s)),
        };
        let mut branches = Vec::with_capacity(m_branches);
        let mut total: Option<Var> = None;
        for (m, &j) in chosen.iter().enumerate() {
            let (k, d) = *CONFIGS
                .get(j)
                .ok_or_else(|| Error::Config(format!("configuration {j} out of range")))?;
            let bank = p[self.banks[modality_index(b.modality)][j]];
            let sims = g.cosine_rows(q, bank)?;
            let basis = match fixed {
                Some(f) => f.branches[m].basis,
                None => argmax(g.value(sims).data().iter().copied()),
            };
            let probs = g.softmax(sims, 0)?;
            let p_cfg = g.pick(s, j * m_branches + m)?;
            let p_basis = g.pick(probs, basis)?;
            let choice = BranchChoice {
                config: j,
                kernel: k,
                dilation: d,
                config_prob: g.value(p_cfg).item(),
                basis,
                basis_prob: g.value(p_basis).item(),
                similarity: g.value(sims).data()[basis],
            };
            let (ref_cfg, ref_basis) = match fixed {
                Some(f) => (f.branches[m].config_prob, f.branches[m].basis_prob),
                None => (choice.config_prob, choice.basis_prob),
            };
            let gate_cfg = g.div_const(p_cfg, ref_cfg);
            let gate_basis = g.div_const(p_basis, ref_basis);
            let gate = g.mul(gate_cfg, gate_basis)?;
            let row = g.row(bank, basis)?;
            let kernel = self.predict_kernel(g, p, block, j, row)?;
            let kernel = g.mul_scalar(kernel, gate)?;
            let out = g.depthwise_conv2d(f_l, kernel, d)?;
            total = Some(match total {
                Some(t) => g.add(t, out)?,
                None => out,
            });
            branches.push(choice);
        }
        let total = total.ok_or_else(|| Error::Config("no branches".into()))?;
        let mean = g.scale(total, 1.0 / m_branches as f64);
        let out = g.add(f_l, mean)?;
        Ok((
            out,
            BlockSelection {
                layer: b.layer,
                modality: b.modality,
                branches,
            },
        ))
    }

    /// Replaces every exposed feature map with its compensated version.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        p: &Bound,
        stack: &FeatureVars,
        f_d: Var,
        fixed: Option<&Selection>,
    ) -> Result<(FeatureVars, Selection)> {
        let depth = self.config.layers - 1;
        if stack.ir.len() != depth || stack.vi.len() != depth {
            return Err(Error::shape(
                "rsc_forward",
                format!(
                    "stack holds {}/{} layers, module covers {depth}",
                    stack.ir.len(),
                    stack.vi.len()
                ),
            ));
        }
        if let Some(f) = fixed {
            if f.blocks.len() != self.blocks.len() {
                return Err(Error::shape("rsc_forward", "fixed selection has the wrong block count"));
            }
        }
        let mut out = FeatureVars { ir: Vec::new(), vi: Vec::new() };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let f_l = stack.get(b.modality)[b.layer - 1];
            let (y, sel) = self.a2si_forward(g, p, i, f_l, f_d, fixed.map(|f| &f.blocks[i]))?;
            match b.modality {
                Modality::Ir => out.ir.push(y),
                Modality::Vi => out.vi.push(y),
            }
            blocks.push(sel);
        }
        Ok((out, Selection { blocks }))
    }

    pub fn forward(&self, stack: &FeatureStack, f_d: &Tensor) -> Result<(FeatureStack, Selection)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let vars = FeatureVars {
            ir: stack.ir.iter().map(|t| g.constant(t.clone())).collect(),
            vi: stack.vi.iter().map(|t| g.constant(t.clone())).collect(),
        };
        let fd = g.constant(f_d.clone());
        let (out, sel) = self.forward_bound(&mut g, &p, &vars, fd, None)?;
        Ok((out.values(&g), sel))
    }
}

/// `F_l + (1/M) sum_m depthwise(F_l, W_m, d_m)`.
pub fn residual_injection(g: &mut Graph, f_l: Var, kernels: &[(Var, usize)]) -> Result<Var> {
    if kernels.is_empty() {
        return Err(Error::Config("no branches".into()));
    }
    let mut total: Option<Var> = None;
    for &(k, d) in kernels {
        let out = g.depthwise_conv2d(f_l, k, d)?;
        total = Some(match total {
            Some(t) => g.add(t, out)?,
            None => out,
        });
    }
    let mean = g.scale(total.expect("non-empty"), 1.0 / kernels.len() as f64);
    g.add(f_l, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskConfig;

    fn default_rsc(std: f64) -> Rsc {
        let cfg = RscConfig {
            head_init_std: std,
            ..RscConfig::new(&VfnConfig::default(), &TaskConfig::default())
        };
        Rsc::new(cfg, 5).unwrap()
    }

    #[test]
    fn parameter_budget() {
        let rsc = default_rsc(0.01);
        let bvb: usize = Modality::BOTH
            .iter()
            .flat_map(|&m| (0..4).map(move |j| (m, j)))
            .map(|(m, j)| rsc.bank(m, j).len())
            .sum();
        assert_eq!(bvb, 65_536);
        assert_eq!(rsc.blocks().len(), 2);
        assert!(rsc.param_count() < 1_000_000);
        let wide = Rsc::new(
            RscConfig {
                channels: 64,
                ..*rsc.config()
            },
            5,
        )
        .unwrap();
        assert!(wide.param_count() > rsc.param_count());
    }

    #[test]
    fn initial_banks_and_prototypes_are_orthonormal() {
        let rsc = default_rsc(0.01);
        assert!(gram_deviation(rsc.prototypes()) < 1e-9);
        for m in Modality::BOTH {
            for j in 0..4 {
                assert!(gram_deviation(rsc.bank(m, j)) < 1e-9);
            }
        }
        assert_ne!(rsc.bank(Modality::Ir, 0), rsc.bank(Modality::Vi, 0));
    }

    #[test]
    fn zero_heads_are_an_exact_identity() {
        let rsc = default_rsc(0.0);
        let f = Tensor::full(&[32, 8, 8], 0.25).map(|v| v * 1.5);
        let stack = FeatureStack {
            ir: vec![f.clone()],
            vi: vec![f.map(|v| -v)],
        };
        let fd = Tensor::full(&[16, 8, 8], 0.7);
        let (out, sel) = rsc.forward(&stack, &fd).unwrap();
        assert_eq!(out, stack);
        assert_eq!(sel.blocks.len(), 2);
        assert_eq!(sel.blocks[0].branches.len(), 4);
    }

    #[test]
    fn residual_scaling_case() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap());
        let k = g.constant(Tensor::full(&[2, 1, 1], 1.0));
        let out = residual_injection(&mut g, f, &[(k, 1)]).unwrap();
        let want = g.value(f).map(|v| 2.0 * v);
        assert_eq!(g.value(out), &want);
    }

    #[test]
    fn kernel_sizes_follow_configuration() {
        let rsc = default_rsc(0.01);
        let mut g = Graph::new();
        let p = rsc.bind(&mut g, false);
        let row = g.constant(Tensor::full(&[256], 0.0625));
        for (j, (k, _)) in CONFIGS.iter().enumerate() {
            let kern = rsc.predict_kernel(&mut g, &p, 0, j, row).unwrap();
            assert_eq!(g.value(kern).len(), 32 * k * k);
        }
    }
}
