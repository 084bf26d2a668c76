//! Central finite-difference verification of recorded gradients.
//!
//! [`check_scalar_fn`] differentiates a scalar function through the graph and
//! compares every (or a sampled subset of) input coordinate against
//! `(f(x + h) - f(x - h)) / 2h`. [`run_battery`] applies it to each
//! differentiable operation on seeded random instances and to the two
//! end-to-end training objectives.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::closed_loop::{batch_objective, BatchItem, NativePass, ReferencePass, DEFAULT_DELTA};
use crate::error::Result;
use crate::rsc::{Rsc, RscConfig};
use crate::tasks::{TaskConfig, TaskKind, TaskNet};
use crate::tensor::{Graph, PoolKind, Tensor, Var};
use crate::vfn::{self, ImagePair, Vfn, VfnConfig};

/// Default step of the central difference.
pub const STEP: f64 = 1e-5;
/// Step for the closed-loop chain. Its deeper record accumulates more
/// rounding in the scalar, which a larger step divides down.
pub const CHAIN_STEP: f64 = 1e-4;
/// Acceptance threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the relative-error denominator, so that gradients that are
/// zero up to rounding compare on an absolute scale.
pub const DENOM_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, DENOM_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Result of checking one scalar function.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FnCheck {
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose difference stencil straddled a non-smooth point.
    pub skipped: usize,
}

impl FnCheck {
    fn merge(self, other: FnCheck) -> FnCheck {
        FnCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// Compares recorded gradients of `f` against central differences with
/// respect to each tensor in `inputs`.
///
/// When `max_coords` is set, that many coordinates per input are drawn from
/// `rng`; otherwise every coordinate is checked. A coordinate is skipped when
/// `f(x + h)` or `f(x - h)` takes a different branch of some non-smooth
/// operation than `f(x)`, since the difference quotient then mixes two
/// pieces.
pub fn check_scalar_fn<F, R>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<FnCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = f(&mut g, &vars)?;
    let pattern = g.branch_pattern();
    let mut grads = g.backward(root)?;
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok((g.value(root).item(), g.branch_pattern()))
    };
    let mut out = FnCheck::default();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => sample(rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + step;
            let (fp, pp) = eval(&work)?;
            work[k].data_mut()[i] = x0 - step;
            let (fm, pm) = eval(&work)?;
            work[k].data_mut()[i] = x0;
            if pp != pattern || pm != pattern {
                out.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            out.max_rel_err = out.max_rel_err.max(rel_err(analytic.data()[i], numeric));
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Outcome of one battery entry.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < TOLERANCE
    }
}

fn repeat<F>(name: &'static str, instances: usize, seed: u64, mut one: F) -> Result<CheckReport>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<FnCheck>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = FnCheck::default();
    for _ in 0..instances {
        total = total.merge(one(&mut rng)?);
    }
    Ok(CheckReport {
        name,
        instances,
        max_rel_err: total.max_rel_err,
        checked: total.checked,
        skipped: total.skipped,
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Projects a tensor onto a fixed random direction so that every output
/// element contributes to the scalar under test.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.shape(x), 1.0, &mut rng);
    let wv = g.constant(w);
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}

/// Operation-level checks: every differentiable primitive, `instances` seeded
/// random inputs each.
pub fn op_battery(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    out.push(repeat("conv2d", instances, seed, |rng| {
        let (k, d) = [(1, 1), (3, 1), (3, 2), (3, 3)][rng.gen_range(0..4)];
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = randn(rng, &[cin, 6, 5]);
        let w = randn(rng, &[cout, cin, k, k]);
        let b = randn(rng, &[cout]);
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), d)?;
                weighted_sum(g, y, s)
            },
            &[x, w, b],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("depthwise_conv2d", instances, seed + 1, |rng| {
        let (k, d) = [(1, 1), (3, 1), (3, 2), (3, 3)][rng.gen_range(0..4)];
        let c = rng.gen_range(1..4);
        let x = randn(rng, &[c, 7, 6]);
        let w = randn(rng, &[c, k, k]);
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let y = g.depthwise_conv2d(v[0], v[1], d)?;
                weighted_sum(g, y, s)
            },
            &[x, w],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("linear", instances, seed + 2, |rng| {
        let (n, m) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let (x, w, b) = (randn(rng, &[n]), randn(rng, &[n, m]), randn(rng, &[m]));
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                weighted_sum(g, y, s)
            },
            &[x, w, b],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("matmul", instances, seed + 3, |rng| {
        let (p, q, r) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let (a, b) = (randn(rng, &[p, q]), randn(rng, &[q, r]));
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let t = g.transpose(y)?;
                weighted_sum(g, t, s)
            },
            &[a, b],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("softmax", instances, seed + 4, |rng| {
        let (r, c) = (rng.gen_range(1..5), rng.gen_range(2..5));
        let axis = rng.gen_range(0..2);
        let x = randn(rng, &[r, c]);
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let y = g.softmax(v[0], axis)?;
                weighted_sum(g, y, s)
            },
            &[x],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("sobel", instances, seed + 5, |rng| {
        let c = rng.gen_range(1..3);
        let x = randn(rng, &[c, 5, 6]);
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let y = g.sobel(v[0])?;
                weighted_sum(g, y, s)
            },
            &[x],
            STEP,
            None,
            rng,
        )
    })?);
    for (name, kind, off) in [
        ("pool_gap", PoolKind::Gap, 6),
        ("pool_gmp", PoolKind::Gmp, 7),
        ("pool_meanp", PoolKind::MeanP, 8),
        ("pool_maxp", PoolKind::MaxP, 9),
    ] {
        out.push(repeat(name, instances, seed + off, |rng| {
            let x = randn(rng, &[2, 4, 5]);
            let s = rng.gen();
            check_scalar_fn(
                |g, v| {
                    let y = g.pool(v[0], kind)?;
                    weighted_sum(g, y, s)
                },
                &[x],
                STEP,
                None,
                rng,
            )
        })?);
    }
    out.push(repeat("cosine_similarity", instances, seed + 10, |rng| {
        let n = rng.gen_range(2..8);
        let (a, b) = (randn(rng, &[n]), randn(rng, &[n]));
        check_scalar_fn(|g, v| g.cosine_similarity(v[0], v[1]), &[a, b], STEP, None, rng)
    })?);
    out.push(repeat("cosine_rows", instances, seed + 11, |rng| {
        let (r, n) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let (q, m) = (randn(rng, &[n]), randn(rng, &[r, n]));
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let y = g.cosine_rows(v[0], v[1])?;
                weighted_sum(g, y, s)
            },
            &[q, m],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("elementwise", instances, seed + 12, |rng| {
        let (a, b) = (randn(rng, &[3, 2, 2]), randn(rng, &[3, 2, 2]));
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let p = g.add(v[0], v[1])?;
                let q = g.mul(p, v[1])?;
                let r = g.max(q, v[0])?;
                let t = g.sub(r, v[1])?;
                weighted_sum(g, t, s)
            },
            &[a, b],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("l1_distance", instances, seed + 13, |rng| {
        let (a, b) = (randn(rng, &[2, 3, 3]), randn(rng, &[2, 3, 3]));
        check_scalar_fn(|g, v| g.l1_distance(v[0], v[1]), &[a, b], STEP, None, rng)
    })?);
    out.push(repeat("activations", instances, seed + 14, |rng| {
        let x = randn(rng, &[2, 3, 3]);
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let a = g.leaky_relu(v[0], 0.2);
                let b = g.sigmoid(a);
                let c = g.scale(b, 1.7);
                let r = g.relu(v[0]);
                let d = g.div_const(r, 0.3);
                let e = g.add(c, d)?;
                weighted_sum(g, e, s)
            },
            &[x],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("shape_ops", instances, seed + 15, |rng| {
        let (a, b) = (randn(rng, &[2, 3, 3]), randn(rng, &[1, 3, 3]));
        let f = randn(rng, &[]);
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let c = g.concat(v[0], v[1])?;
                let p = g.pool(c, PoolKind::Gap)?;
                let bc = g.broadcast_spatial(p, 2, 4)?;
                let r = g.reshape(bc, &[3, 8])?;
                let m = g.mul_scalar(r, v[2])?;
                let k = g.pick(m, 5)?;
                let row = g.row(m, 1)?;
                let mr = g.mean(row);
                let w = weighted_sum(g, m, s)?;
                let wk = g.add(w, k)?;
                g.add(wk, mr)
            },
            &[a, b, f],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("resize_bilinear", instances, seed + 16, |rng| {
        let x = randn(rng, &[2, 4, 3]);
        let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
        let s = rng.gen();
        check_scalar_fn(
            |g, v| {
                let y = g.resize_bilinear(v[0], h, w)?;
                weighted_sum(g, y, s)
            },
            &[x],
            STEP,
            None,
            rng,
        )
    })?);
    out.push(repeat("task_losses", instances, seed + 17, |rng| {
        let p = Tensor::uniform(&[1, 3, 3], 0.05, 0.95, rng);
        let t = Tensor::uniform(&[1, 3, 3], 0.0, 1.0, rng);
        check_scalar_fn(
            |g, v| {
                let a = g.mse(v[0], v[1])?;
                let b = g.bce(v[0], v[1])?;
                g.add(a, b)
            },
            &[p, t],
            STEP,
            None,
            rng,
        )
    })?);
    Ok(out)
}

fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<ImagePair> {
    ImagePair::new(
        Tensor::uniform(&[1, h, w], 0.0, 1.0, rng),
        Tensor::uniform(&[1, h, w], 0.0, 1.0, rng),
    )
}

/// Checks the fusion objective with respect to a random sample of VFN
/// parameters and of the fused image itself.
pub fn fusion_loss_check(instances: usize, seed: u64, coords: usize) -> Result<CheckReport> {
    let config = VfnConfig::tiny();
    repeat("e2e_fusion_loss", instances, seed, |rng| {
        let vfn = Vfn::new(config, rng.gen())?;
        let pair = random_pair(rng, 8, 8)?;
        let lambda = 1.0;
        let params: Vec<Tensor> = vfn.params().entries().iter().map(|p| p.value.clone()).collect();
        let n = params.len();
        let on_params = check_scalar_fn(
            |g, v| {
                let bound = vfn.bind_values(g, &v[..n])?;
                let (fused, _) = vfn.forward_bound(g, &bound, &pair)?;
                vfn::fusion_loss(g, fused, &pair, lambda)
            },
            &params,
            STEP,
            Some(coords),
            rng,
        )?;
        let image = Tensor::uniform(&[1, 8, 8], 0.05, 0.95, rng);
        let on_image = check_scalar_fn(
            |g, v| vfn::fusion_loss(g, v[0], &pair, lambda),
            &[image],
            STEP,
            None,
            rng,
        )?;
        Ok(on_params.merge(on_image))
    })
}

/// Checks the closed-loop objective with respect to a random sample of RSC
/// parameters, with selections replayed from the unperturbed pass.
pub fn closed_loop_check(instances: usize, seed: u64, coords: usize) -> Result<CheckReport> {
    repeat("e2e_closed_loop_loss", instances, seed, |rng| {
        let vfn_config = VfnConfig::tiny();
        let vfn = Vfn::new(vfn_config, rng.gen())?.frozen();
        let task_config = TaskConfig::tiny();
        let kind = TaskKind::ALL[rng.gen_range(0..3)];
        let task = TaskNet::new(kind, task_config, rng.gen())?.frozen();
        let rsc = Rsc::new(RscConfig::tiny(&vfn_config, &task_config), rng.gen())?;
        let pair = random_pair(rng, 8, 8)?;
        let gt = Tensor::uniform(&[1, 8, 8], 0.0, 1.0, rng);
        let gt = match kind {
            TaskKind::Heat => gt,
            _ => gt.map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        };
        let delta = DEFAULT_DELTA;
        let native = NativePass::compute(&vfn, &pair)?;
        let mut reference = ReferencePass::compute(&native, &task, &gt)?;

        let mut g = Graph::new();
        let bound = rsc.bind(&mut g, false);
        let item = [BatchItem {
            pair: &pair,
            gt: &gt,
            native: &native,
            reference: &reference,
        }];
        let probe = batch_objective(&mut g, &vfn, &task, &rsc, &bound, &item, delta, None)?;
        let post = g.value(probe.reward).item();
        let selections = probe.selections;
        // move the hinge reference off the kink, on either side
        reference.loss = post + if rng.gen_bool(0.5) { -0.05 } else { 0.05 };

        let params: Vec<Tensor> = rsc.params().entries().iter().map(|p| p.value.clone()).collect();
        let n = params.len();
        check_scalar_fn(
            |g, v| {
                let bound = rsc.bind_values(g, &v[..n])?;
                let item = [BatchItem {
                    pair: &pair,
                    gt: &gt,
                    native: &native,
                    reference: &reference,
                }];
                let obj = batch_objective(g, &vfn, &task, &rsc, &bound, &item, delta, Some(&selections))?;
                Ok(obj.closed_loop)
            },
            &params,
            CHAIN_STEP,
            Some(coords),
            rng,
        )
    })
}

/// The full battery run by the `gradcheck` command and the acceptance suite.
pub fn run_battery(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = op_battery(instances, seed)?;
    out.push(fusion_loss_check(instances, seed + 100, 12)?);
    out.push(closed_loop_check(instances, seed + 200, 12)?);
    Ok(out)
}
