use std::path::{Path, PathBuf};

use hdrface::checkpoint;
use hdrface::config::parse;
use hdrface::imageio::save_png;
use hdrface::metrics;
use hdrface::run::{restorer_for, train, Backends, TrainOptions};
use hdrface_core::synth::toy_face;
use hdrface_core::train::TrainState;
use tempfile::TempDir;

const SMALL: &str = "batch_size = 2\ncheckpoint_every = 2\n[model.generator]\nhidden = 8\n";

fn dataset(n: u64) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for s in 0..n {
        save_png(&toy_face(s, 64, 64), &dir.path().join(format!("face{s}.png"))).unwrap();
    }
    dir
}

fn run_config(extra: &str) -> hdrface::config::RunConfig {
    parse(&format!("{extra}\n{SMALL}"), Path::new("t.toml")).unwrap()
}

fn opts(data: &Path, out: &Path, resume: Option<PathBuf>) -> TrainOptions {
    TrainOptions { data: data.to_path_buf(), out: out.to_path_buf(), seed: None, resume }
}

#[test]
fn zero_steps_checkpoints_the_initialization() {
    let data = dataset(2);
    let out = tempfile::tempdir().unwrap();
    let run = run_config("steps = 0");
    let outcome = train(&run, &opts(data.path(), out.path(), None), &Backends::default()).unwrap();
    assert!(outcome.checkpoint.exists());
    assert!(metrics::read(&outcome.metrics).unwrap().is_empty());
    let ck = checkpoint::load(&outcome.checkpoint).unwrap();
    let fresh = TrainState::new(&run.train).unwrap();
    assert_eq!(ck.state.step, 0);
    assert_eq!(ck.state.model.store, fresh.model.store);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = dataset(2);
    let out = tempfile::tempdir().unwrap();
    let run = run_config("steps = 3\nregime = \"rf\"");
    let backends = Backends::default();
    let outcome = train(&run, &opts(data.path(), out.path(), None), &backends).unwrap();
    assert_eq!(outcome.records.len(), 3);
    let ck = checkpoint::load(&outcome.checkpoint).unwrap();
    assert_eq!(ck.state.step, 3);
    assert_eq!(ck.config, run.train);
    assert_eq!(ck.state.opt_g.step, 3);

    let resaved = out.path().join("again.ckpt");
    checkpoint::save(&resaved, &ck.config, ck.preset, &ck.state, None).unwrap();
    assert_eq!(std::fs::read(&resaved).unwrap(), std::fs::read(&outcome.checkpoint).unwrap());

    let lq = toy_face(40, 64, 64);
    let again = checkpoint::load(&resaved).unwrap();
    let a = ck.state.model.restore(&lq, restorer_for(None).as_ref()).unwrap();
    let b = again.state.model.restore(&lq, restorer_for(None).as_ref()).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"NOTACKPT........").unwrap();
    let err = checkpoint::load(&path).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("magic"), "{err}");

    let data = dataset(2);
    let out = tempfile::tempdir().unwrap();
    let outcome = train(&run_config("steps = 0"), &opts(data.path(), out.path(), None), &Backends::default()).unwrap();
    let bytes = std::fs::read(&outcome.checkpoint).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(checkpoint::load(&path).unwrap_err().to_string().contains("out of range"));
}

#[test]
fn resume_continues_the_metric_stream() {
    let data = dataset(3);
    let backends = Backends::default();
    let run = run_config("steps = 4");

    let full = tempfile::tempdir().unwrap();
    let a = train(&run, &opts(data.path(), full.path(), None), &backends).unwrap();
    let mid = full.path().join("checkpoints/step_000002.ckpt");
    assert!(mid.exists());

    let resumed = tempfile::tempdir().unwrap();
    let b = train(&run, &opts(data.path(), resumed.path(), Some(mid)), &backends).unwrap();
    assert_eq!(b.records, a.records[2..].to_vec());
    let (ca, cb) = (checkpoint::load(&a.checkpoint).unwrap(), checkpoint::load(&b.checkpoint).unwrap());
    assert_eq!(ca.state.model.store, cb.state.model.store);
    assert_eq!(ca.state.opt_d, cb.state.opt_d);

    let twice = tempfile::tempdir().unwrap();
    train(&run, &opts(data.path(), twice.path(), None), &backends).unwrap();
    assert_eq!(std::fs::read(&a.metrics).unwrap(), std::fs::read(twice.path().join("metrics.jsonl")).unwrap());
}

#[test]
fn stage0_restorer_travels_with_the_checkpoint() {
    let data = dataset(2);
    let backends = Backends::default();
    let stage0_dir = tempfile::tempdir().unwrap();
    let s0 = train(&run_config("steps = 1\nmodel.condition = \"placeholder\""), &opts(data.path(), stage0_dir.path(), None), &backends).unwrap();

    let src = format!("intermediate_restorer = {:?}\nsteps = 1\n{SMALL}", s0.checkpoint.display().to_string());
    let run = parse(&src, Path::new("t.toml")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let outcome = train(&run, &opts(data.path(), out.path(), None), &backends).unwrap();
    let ck = checkpoint::load(&outcome.checkpoint).unwrap();
    let stage0 = ck.stage0.expect("stage-0 model embedded");
    assert_eq!(stage0.store, checkpoint::load(&s0.checkpoint).unwrap().state.model.store);
}

#[test]
fn wrong_image_size_is_a_user_error() {
    let data = tempfile::tempdir().unwrap();
    save_png(&toy_face(0, 32, 32), &data.path().join("small.png")).unwrap();
    save_png(&toy_face(1, 32, 32), &data.path().join("small2.png")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = train(&run_config("steps = 1"), &opts(data.path(), out.path(), None), &Backends::default()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("64×64"), "{err}");
}
