use std::path::Path;
use std::process::{Command, Output};

use hdrface::imageio::{load, save_png};
use hdrface::manifest::{RunManifest, RunStatus};
use hdrface_core::synth::toy_face;

fn hdrface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdrface")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn faces(dir: &Path, seeds: std::ops::Range<u64>) {
    for s in seeds {
        save_png(&toy_face(s, 64, 64), &dir.join(format!("face{s}.png"))).unwrap();
    }
}

#[test]
fn help_and_unknown_subcommand() {
    let o = hdrface(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["degrade", "train", "restore", "eval", "fuse-viz", "ablate"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    let o = hdrface(&["transmogrify"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("transmogrify"));
    assert_eq!(hdrface(&[]).status.code(), Some(1));
}

#[test]
fn degrade_writes_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (input, out) = (dir.path().join("in"), dir.path().join("out"));
    faces(&input, 0..1);
    let recipe = dir.path().join("recipe.toml");
    std::fs::write(&recipe, "blur_sigma = [0.5, 2.0]\ndown_factor = 2\nnoise_sigma = 0.02\njpeg_quality = [50, 80]\n").unwrap();
    let o = hdrface(&["degrade", "--in", p(&input), "--out", p(&out), "--recipe", p(&recipe), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let written = out.join("face0.png");
    assert_eq!(load(&written).unwrap().dims(), (64, 64, 3));
    let m = RunManifest::read(&out).unwrap();
    assert_eq!(m.status, RunStatus::Finished);
    assert_eq!(m.seed, 3);
    assert_eq!(m.outputs, vec![written.clone()]);
    assert_eq!(m.config_hash.as_ref().map(String::len), Some(64));
    assert!(m.finished_at.is_some());

    let first = std::fs::read(&written).unwrap();
    let again = dir.path().join("again");
    hdrface(&["degrade", "--in", p(&input), "--out", p(&again), "--recipe", p(&recipe), "--seed", "3"]);
    assert_eq!(std::fs::read(again.join("face0.png")).unwrap(), first);
    let other = dir.path().join("other");
    hdrface(&["degrade", "--in", p(&input), "--out", p(&other), "--recipe", p(&recipe), "--seed", "4"]);
    assert_ne!(std::fs::read(other.join("face0.png")).unwrap(), first);
}

#[test]
fn recipe_errors_name_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    faces(dir.path(), 0..1);
    let recipe = dir.path().join("recipe.toml");
    std::fs::write(&recipe, "blur_sigma = 1.0\nsharpness = 3\n").unwrap();
    let o = hdrface(&["degrade", "--in", p(dir.path()), "--out", p(&dir.path().join("o")), "--recipe", p(&recipe)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("recipe.toml:2") && err.contains("sharpness"), "{err}");
}

#[test]
fn train_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "steps = 2\n[model]\nhiden = 3\n").unwrap();
    let o = hdrface(&["train", "--data", p(dir.path()), "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("run.toml:3") && err.contains("model.hiden"), "{err}");
}

#[test]
fn train_restore_eval_and_fuse_viz() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    faces(&data, 0..2);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "regime = \"rf\"\nsteps = 1\nbatch_size = 2\n[model.generator]\nhidden = 8\n").unwrap();
    let run = dir.path().join("run");
    let o = hdrface(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists() && run.join("metrics.jsonl").exists() && run.join("config.toml").exists());
    assert_eq!(RunManifest::read(&run).unwrap().seed, 5);

    let o = hdrface(&["restore", "--in", p(&data), "--out", p(&dir.path().join("x")), "--checkpoint", p(&ckpt), "--regime", "epsilon"]);
    assert_eq!(o.status.code(), Some(1));
    let restored = dir.path().join("restored");
    let o = hdrface(&["restore", "--in", p(&data), "--out", p(&restored), "--checkpoint", p(&ckpt), "--regime", "rf"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(restored.join("face0.png").exists() && restored.join("face1.png").exists());

    std::fs::remove_file(restored.join("face1.png")).unwrap();
    let report = dir.path().join("eval/report.json");
    let o = hdrface(&["eval", "--pred", p(&restored), "--gt", p(&data), "--out", p(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 1);
    assert_eq!(json["missing"], serde_json::json!(["face1"]));
    assert!(report.with_extension("txt").exists());

    let same = dir.path().join("same.json");
    hdrface(&["eval", "--pred", p(&data), "--gt", p(&data), "--out", p(&same)]);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&same).unwrap()).unwrap();
    assert_eq!(json["mean"]["psnr"], 100.0);
    assert_eq!(json["mean"]["ssim"], 1.0);

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = hdrface(&["eval", "--pred", p(&empty), "--gt", p(&data), "--out", p(&dir.path().join("none.json"))]);
    assert_eq!(o.status.code(), Some(1));

    let viz = dir.path().join("viz");
    let o = hdrface(&["fuse-viz", "--in", p(&data), "--out", p(&viz), "--checkpoint", p(&ckpt), "--scale", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(load(&viz.join("face0_gate.png")).unwrap().dims(), (32, 32, 3));
}

#[test]
fn ablate_validates_variants_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, held) = (dir.path().join("train"), dir.path().join("held"));
    faces(&data, 0..2);
    faces(&held, 10..11);
    let o = hdrface(&["ablate", "--data", p(&data), "--heldout", p(&held), "--out", p(&dir.path().join("a")), "--variants", "sdfm,clip"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("clip"));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "steps = 1\nbatch_size = 2\n[model.generator]\nhidden = 8\n").unwrap();
    let out = dir.path().join("abl");
    let o = hdrface(&["ablate", "--data", p(&data), "--heldout", p(&held), "--config", p(&cfg), "--out", p(&out), "--variants", "raw", "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.contains("degraded") && table.contains("raw"));

    let streams = dir.path().join("streams");
    let o = hdrface(&["ablate", "--data", p(&data), "--heldout", p(&held), "--config", p(&cfg), "--out", p(&streams), "--streams", "lr,face", "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(streams.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["table"].as_array().unwrap().len(), 2);
}
