use cldyn::closed_loop::{
    closed_loop_loss, closed_loop_value, compensate, penalty_loss, penalty_value, LossBundle, DEFAULT_DELTA,
};
use cldyn::io::RunConfig;
use cldyn::rsc::{gram_deviation, select_configurations, Rsc, RscConfig, CONFIGS};
use cldyn::tasks::{generate_scene, TaskKind, TaskNet};
use cldyn::tensor::{Graph, Tensor};
use cldyn::vfn::{fusion_loss_value, ImagePair, Modality, Vfn, VfnConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nets(head_std: f64) -> (Vfn, TaskNet, Rsc) {
    let cfg = RunConfig::tiny();
    let vfn = Vfn::new(cfg.vfn, 1).unwrap().frozen();
    let task = TaskNet::new(TaskKind::Saliency, cfg.task_net, 2).unwrap().frozen();
    let rsc = Rsc::new(RscConfig { head_init_std: head_std, ..cfg.rsc_config() }, 3).unwrap();
    (vfn, task, rsc)
}

#[test]
fn prototypes_and_banks_start_orthonormal() {
    let (_, _, rsc) = nets(0.01);
    assert!(gram_deviation(rsc.prototypes()) < 1e-9);
    for m in [Modality::Ir, Modality::Vi] {
        for c in 0..CONFIGS.len() {
            assert!(gram_deviation(rsc.bank(m, c)) < 1e-9);
        }
    }
}

#[test]
fn configuration_probabilities_sum_to_one_per_branch() {
    let (_, _, rsc) = nets(0.01);
    let cfg = rsc.config();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let v = Tensor::new(
            vec![cfg.e1 * cfg.branches],
            (0..cfg.e1 * cfg.branches).map(|_| r.gen_range(-5.0..5.0)).collect(),
        )
        .unwrap();
        let sel = select_configurations(&v, rsc.prototypes(), cfg.branches).unwrap();
        for col in 0..cfg.branches {
            let sum: f64 = (0..CONFIGS.len()).map(|row| sel.s.data()[row * cfg.branches + col]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert_eq!(sel.chosen.len(), cfg.branches);
    }
}

#[test]
fn zero_kernels_leave_features_and_fusion_unchanged() {
    let (vfn, task, rsc) = nets(0.0);
    let pair = generate_scene(11, 32, 32).unwrap().pair;
    let c = compensate(&pair, &task, &vfn, &rsc).unwrap();
    assert_eq!(c.fused, c.fused_comp);
}

#[test]
fn penalty_is_a_hinge() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (c_fs, c_f) = (r.gen_range(0.0..3.0), r.gen_range(0.0..3.0));
        let p = penalty_value(c_fs, c_f);
        assert!(p >= 0.0);
        let b = LossBundle::new(c_fs, c_f, DEFAULT_DELTA);
        assert_eq!(b.closed_loop, b.reward + 5.0 * b.penalty);

        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(c_fs));
        let pv = penalty_loss(&mut g, v, c_f).unwrap();
        assert_eq!(g.value(pv).item(), p);
        let l = closed_loop_loss(&mut g, v, pv, DEFAULT_DELTA).unwrap();
        assert_eq!(g.value(l).item(), closed_loop_value(c_fs, p, 5.0));
    }
    let mut g = Graph::new();
    let v = g.constant(Tensor::scalar(1.0));
    assert!(closed_loop_loss(&mut g, v, v, -1.0).is_err());
}

#[test]
fn fusion_loss_vanishes_where_one_source_dominates() {
    let ir = generate_scene(12, 32, 32).unwrap().pair.ir;
    for scale in [1.0, 0.7, 0.25] {
        let pair = ImagePair::new(ir.clone(), ir.map(|v| scale * v)).unwrap();
        assert!(fusion_loss_value(&pair.max_image(), &pair, 1.0).unwrap() < 1e-6);
    }
    let pair = generate_scene(12, 32, 32).unwrap().pair;
    let other = pair.max_image().map(|v| 0.9 * v);
    assert!(fusion_loss_value(&other, &pair, 1.0).unwrap() > 0.0);
}

#[test]
fn frozen_networks_refuse_parameter_access() {
    let (mut vfn, mut task, _) = nets(0.01);
    assert!(vfn.params_mut().is_err());
    assert!(task.params_mut().is_err());
    let mut fresh = Vfn::new(VfnConfig::tiny(), 0).unwrap();
    assert!(fresh.params_mut().is_ok());
}

#[test]
fn default_budget_stays_under_a_million() {
    let cfg = RunConfig::smoke();
    let rsc = Rsc::new(cfg.rsc_config(), 0).unwrap();
    assert!(rsc.param_count() < 1_000_000);
}

#[test]
fn inputs_are_validated() {
    assert!(ImagePair::new(Tensor::zeros(&[1, 32, 32]), Tensor::zeros(&[1, 32, 31])).is_err());
    assert!(Vfn::new(VfnConfig { layers: 1, base_channels: 4 }, 0).is_ok());
    let cfg = RunConfig::tiny();
    assert!(Rsc::new(RscConfig { layers: 1, ..cfg.rsc_config() }, 0).is_err());
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.conv2d(x, k, None, 1).is_err());
    let y = g.sum(x);
    g.backward(y).unwrap();
    assert!(g.backward(y).is_err());
}
