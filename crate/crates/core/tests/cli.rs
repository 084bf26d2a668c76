use std::path::Path;

use cldyn::cli::run;

const TINY: [&str; 2] = ["--profile", "tiny"];

fn cldyn(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("cldyn").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn argument_errors_exit_one() {
    assert_eq!(cldyn(&["frobnicate"]).0, 1);
    assert_eq!(cldyn(&["gradcheck", "--bogus"]).0, 1);
    assert_eq!(cldyn(&["train-vfn"]).0, 1);
    assert_eq!(cldyn(&["gen-scenes", "--out", "/tmp/x", "--profile", "huge"]).0, 1);
    assert_eq!(cldyn(&["gen-scenes", "--out", "/tmp/x", "--set", "stage2.dleta=1"]).0, 1);
    let (code, out, _) = cldyn(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("train-rsc"));
}

#[test]
fn missing_files_exit_two() {
    let (code, _, err) = cldyn(&["fuse", "--ir", "/no/ir.pgm", "--vi", "/no/vi.pgm", "--vfn", "/no/v.ckpt", "--out", "/tmp/o.pgm"]);
    assert_eq!(code, 2, "{err}");
    assert_eq!(cldyn(&["evaluate", "--dir", "/no/such/dir"]).0, 2);
}

#[test]
fn rsc_and_task_go_together() {
    let base = ["fuse", "--ir", "a.pgm", "--vi", "b.pgm", "--vfn", "v.ckpt", "--out", "o.pgm"];
    assert_eq!(cldyn(&[&base[..], &["--rsc", "r.ckpt"]].concat()).0, 1);
    assert_eq!(cldyn(&[&base[..], &["--task", "2"]].concat()).0, 1);
    assert_eq!(cldyn(&[&base[..], &["--rsc", "r.ckpt", "--task", "7"]].concat()).0, 1);
}

#[test]
fn pipeline_through_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (scenes, models, rsc) = (d.join("scenes"), d.join("models"), d.join("rsc"));

    let (code, _, err) = cldyn(&[&["gen-scenes", "--out", s(&scenes), "--count", "4"][..], &TINY].concat());
    assert_eq!(code, 0, "{err}");
    assert_eq!(cldyn::io::scene_dirs(&scenes).unwrap().len(), 4);

    let (code, out, err) = cldyn(&[&["train-vfn", "--out", s(&models), "--scenes", s(&scenes)][..], &TINY].concat());
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("fusion loss"));
    let (code, _, err) = cldyn(&[&["pretrain-tasks", "--out", s(&models), "--scenes", s(&scenes)][..], &TINY].concat());
    assert_eq!(code, 0, "{err}");

    let vfn = models.join("vfn.ckpt");
    let (code, out, err) = cldyn(
        &[
            &["train-rsc", "--vfn", s(&vfn), "--tasks", s(&models), "--out", s(&rsc), "--scenes", s(&scenes)][..],
            &TINY,
            &["--set", "stage2.epochs=1"],
        ]
        .concat(),
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("held-out loss"));
    for f in ["rsc.ckpt", "rsc_epoch1.ckpt", "stage2.csv", "compensation.csv", "selections.jsonl", "config.toml"] {
        assert!(rsc.join(f).is_file(), "{f}");
    }

    // the wrong checkpoint kind is a file error
    assert_eq!(cldyn(&["train-rsc", "--vfn", s(&rsc.join("rsc.ckpt")), "--tasks", s(&models), "--out", s(&rsc)]).0, 2);

    let pair = cldyn::io::scene_dirs(&scenes).unwrap()[0].clone();
    let (ir, vi) = (pair.join("ir.pgm"), pair.join("vi.pgm"));
    let fused = pair.join("fused.pgm");
    let (code, _, err) = cldyn(&["fuse", "--ir", s(&ir), "--vi", s(&vi), "--vfn", s(&vfn), "--out", s(&fused)]);
    assert_eq!(code, 0, "{err}");

    let mut images = Vec::new();
    for task in ["2", "3"] {
        let out = d.join(format!("fused_{task}.pgm"));
        let trace = d.join(format!("trace_{task}.json"));
        let (code, _, err) = cldyn(&[
            "fuse", "--ir", s(&ir), "--vi", s(&vi), "--vfn", s(&vfn), "--rsc", s(&rsc.join("rsc.ckpt")),
            "--tasks", s(&models), "--task", task, "--out", s(&out), "--trace", s(&trace),
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(std::fs::read_to_string(&trace).unwrap().contains("\"blocks\""));
        images.push(std::fs::read(&out).unwrap());
    }
    assert_ne!(images[0], images[1]);

    let csv = d.join("metrics.csv");
    let (code, out, err) = cldyn(&["evaluate", "--dir", s(&scenes), "--out", s(&csv)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("Q_AB/F"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3, "one fused triple plus header and mean");

    // no fused images under this stem
    assert_eq!(cldyn(&["evaluate", "--dir", s(&scenes), "--fused", "nothing"]).0, 1);
}

#[test]
fn gradcheck_command_reports_every_check() {
    let (code, out, _) = cldyn(&["gradcheck", "--instances", "1", "--seed", "3"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("e2e_closed_loop_loss"));
    assert!(out.contains("max relative error"));
}
