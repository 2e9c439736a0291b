use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spsedit::container::Container;
use spsedit::image;
use spsedit_core::scene::{render_intensity, View, VoxelScene};

fn spsedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spsedit")).args(args).output().expect("spawn spsedit")
}

fn ok(args: &[&str]) -> Output {
    let out = spsedit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(stderr.lines().last().expect("an error line")).expect("error line is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny corpus and briefly trained priors, shared by the editing tests.
fn priors(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    ok(&["gen-corpus", "--out", p(&corpus), "--count", "6", "--views", "4"]);
    let priors = dir.join("priors");
    ok(&["train-prior", "--corpus", p(&corpus.join("corpus.spse")), "--out", p(&priors), "--steps", "5"]);
    priors.join("priors.spse")
}

const SHORT: &str = "geometry_steps = 4\ntexture_steps = 3\nphase1_steps = 2\nphase3_steps = 1\nseed = 3\n";

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_and_priors_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let priors = priors(dir.path());
    let c = Container::load(&priors).unwrap();
    assert!(c.get("denoiser.φ.fc1.weight").is_some());
    assert!(c.get("depth_denoiser.φ.fc1.weight").is_some());
    let log = fs::read_to_string(dir.path().join("priors/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 15);
    let corpus = fs::read_to_string(dir.path().join("corpus/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 6);
}

#[test]
fn edit_twice_gives_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    let priors = priors(dir.path());
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, SHORT).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["edit", "--priors", p(&priors), "--config", p(&cfg), "--seed", "7", "--out", p(out)]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    let names: Vec<_> = ta.iter().map(|(n, _)| n.to_str().unwrap().to_string()).collect();
    for want in ["edited.spse", "log.jsonl", "metrics.jsonl", "config.txt", "checkpoints/4_texture.spse"] {
        assert!(names.iter().any(|n| n == want), "missing {want} in {names:?}");
    }
    let config = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(config.contains("seed = 7"));
    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["views"], 100);
}

#[test]
fn sweep_writes_one_directory_per_rate_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let priors = priors(dir.path());
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, SHORT).unwrap();
    let out = dir.path().join("sweep");
    ok(&[
        "sweep", "--priors", p(&priors), "--config", p(&cfg), "--fusion-rates", "0.35,0.6,0.85", "--no-target-enhance",
        "--out", p(&out),
    ]);
    for r in ["r0.35", "r0.6", "r0.85"] {
        assert!(out.join(r).join("edited.spse").is_file());
    }
    let report = fs::read_to_string(out.join("report.jsonl")).unwrap();
    let rates: Vec<f64> =
        report.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["fusion_rate"].as_f64().unwrap()).collect();
    assert_eq!(rates.len() % 3, 0);
    assert!(rates.contains(&0.35) && rates.contains(&0.85));
    let log = fs::read_to_string(out.join("r0.6/log.jsonl")).unwrap();
    let lambdas: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["stage"] == "geometry" && v["phase"] == 1)
        .map(|v| v["lambda"].as_f64().unwrap())
        .collect();
    assert_eq!(lambdas, vec![0.0, 0.0]);
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let priors = priors(dir.path());
    let mve = dir.path().join("mve");
    ok(&["optimize-mve", "--priors", p(&priors), "--single-embedding", "--out", p(&mve)]);
    let c = Container::load(&mve.join("mve.spse")).unwrap();
    assert_eq!(c.get("mve.base.0"), c.get("mve.base.3"));
    let ft = dir.path().join("ft");
    ok(&["finetune", "--priors", p(&priors), "--mve", p(&mve.join("mve.spse")), "--out", p(&ft)]);
    let tuned = Container::load(&ft.join("finetuned.spse")).unwrap();
    assert!(tuned.get("denoiser.φ0.fc1.weight").is_some());
}

#[test]
fn render_matches_in_process_render() {
    let dir = tempfile::tempdir().unwrap();
    let scene = spsedit_core::pipeline::EditTask::cube_to_sphere(16).original_scene(16);
    let ckpt = dir.path().join("scene.spse");
    let mut c = Container::default();
    c.push("scene.density", scene.density().clone());
    c.push("scene.color", scene.color().clone());
    c.save(&ckpt).unwrap();
    let out = dir.path().join("v45.pgm");
    ok(&["render", "--checkpoint", p(&ckpt), "--view", "45", "--out", p(&out)]);
    let img = image::load(&out).unwrap();
    let back = VoxelScene::from_parts(c.get("scene.density").unwrap().clone(), c.get("scene.color").unwrap().clone()).unwrap();
    let expect = render_intensity(&back, &View::new(45.0, 16).unwrap());
    assert_eq!((img.width, img.height, img.channels), (16, 16, 1));
    for (i, &v) in expect.data().iter().enumerate() {
        assert_eq!(img.samples[i], image::quantize(v));
    }
    let color = dir.path().join("v45.ppm");
    ok(&["render", "--checkpoint", p(&ckpt), "--view", "-45", "--channel", "color", "--out", p(&color)]);
    assert_eq!(image::load(&color).unwrap().channels, 3);
}

#[test]
fn eval_reports_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let scene = spsedit_core::pipeline::EditTask::cube_to_sphere(16).original_scene(16);
    let ckpt = dir.path().join("scene.spse");
    let mut c = Container::default();
    c.push("scene.density", scene.density().clone());
    c.push("scene.color", scene.color().clone());
    c.save(&ckpt).unwrap();
    ok(&["eval", "--checkpoint", p(&ckpt), "--views", "4", "--out", p(dir.path())]);
    let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let metrics: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let iou_o = metrics.iter().find(|m| m["metric"] == "voxel_iou_original").unwrap();
    assert_eq!(iou_o["value"], 1.0);
    assert!(metrics.iter().all(|m| m["views"] == 4));
}

#[test]
fn failures_print_a_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.spse");
    let e = error_line(&spsedit(&["render", "--checkpoint", p(&missing), "--view", "0", "--out", p(&dir.path().join("x.pgm"))]));
    assert_eq!(e["error"], "missing_file");

    let future = dir.path().join("future.spse");
    let mut bytes = Container::default().to_bytes();
    bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
    fs::write(&future, bytes).unwrap();
    let e = error_line(&spsedit(&["eval", "--checkpoint", p(&future), "--out", p(dir.path())]));
    assert_eq!(e["error"], "version_mismatch");

    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "fusion_rate = 0.6\nlearning_rate = 1\n").unwrap();
    let e = error_line(&spsedit(&["edit", "--priors", p(&missing), "--config", p(&cfg), "--out", p(dir.path())]));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("line 2"));
}
