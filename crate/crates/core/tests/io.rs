use cldyn::io::{self, Checkpoint, ImageFormat, RunConfig};
use cldyn::rsc::Rsc;
use cldyn::tasks::{generate_scene, TaskKind, TaskNet};
use cldyn::tensor::Tensor;
use cldyn::vfn::{Vfn, VfnConfig};
use cldyn::Error;

#[test]
fn image_round_trip_within_one_grey_level() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(5, 32, 40).unwrap();
    for ext in ["pgm", "png"] {
        let p = dir.path().join(format!("ir.{ext}"));
        io::save_image(&scene.pair.ir, &p).unwrap();
        let back = io::load_image(&p).unwrap();
        assert_eq!(back.shape(), scene.pair.ir.shape());
        let worst = back
            .data()
            .iter()
            .zip(scene.pair.ir.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0 + 1e-9, "{ext}: {worst}");
    }
}

#[test]
fn handcrafted_pgm_decodes() {
    let mut bytes = b"P5\n# two by two\n2 2\n255\n".to_vec();
    bytes.extend([0u8, 255, 51, 102]);
    let t = io::decode_image(&bytes).unwrap();
    assert_eq!(t.shape(), &[1, 2, 2]);
    assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.4]);

    let black = io::encode_image(&Tensor::zeros(&[1, 3, 3]), ImageFormat::Pgm).unwrap();
    assert!(io::decode_image(&black).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn bad_images_are_file_errors() {
    assert!(matches!(io::decode_image(b"GIF89a"), Err(Error::UnsupportedFormat(_))));
    let truncated = b"P5 4 4 255 \x00\x01";
    let e = io::decode_image(truncated).unwrap_err();
    assert!(e.is_io());
    assert!(io::load_image("/nonexistent/ir.pgm").unwrap_err().is_io());
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::tiny();
    let vfn = Vfn::new(cfg.vfn, 3).unwrap().frozen();
    let task = TaskNet::new(TaskKind::Heat, cfg.task_net, 4).unwrap().frozen();
    let rsc = Rsc::new(cfg.rsc_config(), 5).unwrap();
    io::save_vfn(&vfn, "h", dir.path().join("v.ckpt")).unwrap();
    io::save_task(&task, "h", dir.path().join("t.ckpt")).unwrap();
    io::save_rsc(&rsc, "h", dir.path().join("r.ckpt")).unwrap();

    let v2 = io::load_vfn(dir.path().join("v.ckpt")).unwrap();
    assert_eq!(v2.params(), vfn.params());
    assert!(v2.is_frozen());
    let t2 = io::load_task(dir.path().join("t.ckpt")).unwrap();
    assert_eq!(t2.params(), task.params());
    assert_eq!(t2.kind(), TaskKind::Heat);
    let r2 = io::load_rsc(dir.path().join("r.ckpt")).unwrap();
    assert_eq!(r2.params(), rsc.params());
    assert_eq!(r2.config(), rsc.config());
}

#[test]
fn every_single_bit_flip_is_detected() {
    let vfn = Vfn::new(VfnConfig::tiny(), 1).unwrap();
    let ckpt = Checkpoint::from_params(
        io::ModuleKind::Vfn,
        io::CheckpointMeta {
            config_hash: "h".into(),
            frozen: false,
            task: None,
            config: serde_json::to_value(vfn.config()).unwrap(),
        },
        vfn.params(),
    );
    let bytes = ckpt.encode().unwrap();
    for i in (0..bytes.len()).step_by(7) {
        for bit in [0, 5] {
            let mut b = bytes.clone();
            b[i] ^= 1 << bit;
            assert!(Checkpoint::decode(&b).is_err(), "byte {i} bit {bit}");
        }
    }
    assert_eq!(Checkpoint::decode(&bytes).unwrap().params(), *vfn.params());
}

#[test]
fn loading_the_wrong_module_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::tiny();
    let rsc = Rsc::new(cfg.rsc_config(), 5).unwrap();
    let p = dir.path().join("r.ckpt");
    io::save_rsc(&rsc, "h", &p).unwrap();
    let e = io::load_vfn(&p).unwrap_err();
    assert!(matches!(e, Error::Module { .. }));
    assert!(io::load_task(&p).is_err());
}

#[test]
fn scenes_survive_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_scene(77, 32, 32).unwrap();
    io::save_scene(&s, dir.path().join(io::scene_dir_name(s.seed)), "h").unwrap();
    let back = io::load_scene_set(dir.path()).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].seed, 77);
    assert_eq!(back[0].latent, s.latent);
    let worst = back[0]
        .pair
        .vi
        .data()
        .iter()
        .zip(s.pair.vi.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1.0 / 255.0 + 1e-9);
    assert!(io::load_scene_set(tempfile::tempdir().unwrap().path()).is_err());
}

#[test]
fn config_files_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.toml");
    let c = RunConfig::smoke();
    c.save(&p).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap(), c);
    let d = c.with_overrides(&["stage2.delta=0", "seed=9"]).unwrap();
    assert_ne!(d.hash(), c.hash());
    assert_eq!(d.rsc_seed(), 29);
    assert!(RunConfig::profile("huge").is_err());
    assert!(RunConfig::from_toml("seed = 1").is_err());
}
