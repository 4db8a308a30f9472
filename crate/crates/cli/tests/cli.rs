use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowcritic::train::{Objective, RunState, TrainConfig};
use flowcritic::FlowModel;
use flowcritic_cli::checkpoint::Checkpoint;
use flowcritic_cli::config::DatasetSpec;
use flowcritic_cli::datasets;
use flowcritic_cli::state::{checkpoint_to_state, state_to_checkpoint};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_flowcritic"));
    c.env("FLOWCRITIC_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a small config and returns its path.
fn config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("batch_size = 16\neval_interval = 10\ncritic_hidden = 8\nhidden_width = 8\n{body}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(cfg), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn unknown_config_key_exits_one_and_names_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "learning_rate = 0.1\n");
    let o = train(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn seeded_runs_write_identical_metrics() {
    let dir = TempDir::new().unwrap();
    for objective in ["mle", "wgan_fast"] {
        let cfg = config(dir.path(), &format!("objective = {objective}\ntotal_steps = 20\nseed = 3\n"));
        let (a, b) = (dir.path().join(format!("{objective}_a")), dir.path().join(format!("{objective}_b")));
        assert_eq!(code(&train(&cfg, &a, &[])), 0);
        assert_eq!(code(&train(&cfg, &b, &[])), 0);
        let ma = fs::read(a.join("metrics.csv")).unwrap();
        assert!(ma.len() > 20);
        assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap(), "{objective}");
        assert_eq!(fs::read(a.join("final.rnvp")).unwrap(), fs::read(b.join("final.rnvp")).unwrap());
    }
}

#[test]
fn resuming_through_a_checkpoint_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "objective = wgan\ntotal_steps = 30\nseed = 5\n");
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    assert_eq!(code(&train(&cfg, &straight, &[])), 0);
    assert_eq!(code(&train(&cfg, &split, &["--steps", "10"])), 0);
    assert_eq!(code(&train(&cfg, &split, &["--resume"])), 0);
    assert_eq!(
        fs::read(straight.join("metrics.csv")).unwrap(),
        fs::read(split.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(straight.join("final.rnvp")).unwrap(),
        fs::read(split.join("final.rnvp")).unwrap()
    );
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), b"").unwrap();
    let cfg = config(dir.path(), "total_steps = 2\n");
    let o = train(&cfg, &out, &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("locked"));
    assert!(!out.join("metrics.csv").exists());
}

fn identity_checkpoint(path: &Path, dim: usize) {
    let data = datasets::load(&DatasetSpec::SynthRing, 7).unwrap().train;
    let model = FlowModel::<f64>::build_nvp(1, dim, 4, 0).unwrap();
    let state = RunState::for_config(&TrainConfig::new(Objective::Mle), model, &data).unwrap();
    state_to_checkpoint(&state).save(path).unwrap();
}

fn eval_exit(ck: &Path, dir: &Path) -> Output {
    let cfg = config(dir, "");
    run(&[
        "eval",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.join("ev")),
        "--checkpoint",
        s(ck),
        "--kinds",
        "jrank",
    ])
}

#[test]
fn damaged_checkpoints_map_to_distinct_exit_codes() {
    let dir = TempDir::new().unwrap();
    let good = dir.path().join("good.rnvp");
    identity_checkpoint(&good, 2);
    let bytes = fs::read(&good).unwrap();

    let mut crc = bytes.clone();
    let mid = crc.len() / 2;
    crc[mid] ^= 0x40;
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let mut version = bytes[..bytes.len() - 4].to_vec();
    version[4..8].copy_from_slice(&9u32.to_le_bytes());
    let sum = crc32fast::hash(&version);
    version.extend_from_slice(&sum.to_le_bytes());

    for (name, b, expect) in [("crc", crc, 4), ("magic", magic, 5), ("version", version, 6)] {
        let p = dir.path().join(format!("{name}.rnvp"));
        fs::write(&p, b).unwrap();
        assert_eq!(code(&eval_exit(&p, dir.path())), expect, "{name}");
    }
    assert_eq!(code(&eval_exit(&dir.path().join("missing.rnvp"), dir.path())), 3);
}

#[test]
fn identity_flow_has_unit_singular_values() {
    let dir = TempDir::new().unwrap();
    let ck = dir.path().join("id.rnvp");
    identity_checkpoint(&ck, 2);
    let o = eval_exit(&ck, dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(dir.path().join("ev/eval/jrank.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 10);
    for row in rows {
        assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
        assert_eq!(&row[3], "2");
    }
}

#[test]
fn checkpoint_round_trips_the_run_state() {
    let dir = TempDir::new().unwrap();
    let data = datasets::load(&DatasetSpec::SynthRing, 7).unwrap().train;
    let mut cfg = TrainConfig::new(Objective::WganFast);
    cfg.seed = 11;
    let mut state = RunState::for_config(&cfg, FlowModel::<f32>::build_nvp(1, 2, 4, 3).unwrap(), &data).unwrap();
    state.step = 17;
    let p = dir.path().join("s.rnvp");
    state_to_checkpoint(&state).save(&p).unwrap();
    let back = checkpoint_to_state::<f32>(&Checkpoint::load(&p).unwrap()).unwrap();
    assert_eq!(back, state);
}

#[test]
fn two_dimensional_samples_are_written_as_csv() {
    let dir = TempDir::new().unwrap();
    let ck = dir.path().join("id.rnvp");
    identity_checkpoint(&ck, 2);
    let cfg = config(dir.path(), "seed = 4\n");
    let out = dir.path().join("smp");
    let o = run(&["sample", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&ck), "--n", "25"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(out.join("samples_fresh.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["x", "y", "logprob"]);
    assert_eq!(r.records().count(), 25);

    let o = run(&["sample", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&ck), "--mode", "partial_first"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--input"));
}

#[test]
fn partial_resampling_reads_an_input_batch() {
    let dir = TempDir::new().unwrap();
    let ck = dir.path().join("id.rnvp");
    identity_checkpoint(&ck, 2);
    let input = dir.path().join("batch.fc2d");
    let mut buf = Vec::new();
    flowcritic::data::write_synth(&mut buf, 3, 2, &[0.5, -1.0, 1.5, 2.0, 0.0, 0.25]).unwrap();
    fs::write(&input, buf).unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("smp");
    let o = run(&[
        "sample", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&ck), "--mode", "partial_second", "--input", s(&input),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(csv::Reader::from_path(out.join("samples_partial_second.csv")).unwrap().records().count(), 3);
}

#[test]
fn image_samples_are_a_deterministic_pgm_grid() {
    let dir = TempDir::new().unwrap();
    let n = 60u32;
    let mut idx = vec![0, 0, 8, 3];
    for d in [n, 4, 4] {
        idx.extend_from_slice(&d.to_be_bytes());
    }
    idx.extend((0..n * 16).map(|i| ((i * 37) % 256) as u8));
    let images = dir.path().join("tiny.idx");
    fs::write(&images, idx).unwrap();
    let cfg = config(dir.path(), &format!("dataset = idx:{}\ntotal_steps = 2\n", images.display()));
    let out = dir.path().join("img");
    let o = train(&cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let sample = || {
        let o = run(&["sample", "--config", s(&cfg), "--out", s(&out), "--n", "6"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out.join("samples_fresh.pgm")).unwrap()
    };
    let a = sample();
    assert!(a.starts_with(b"P5\n"));
    assert_eq!(a, sample());
    assert_eq!(csv::Reader::from_path(out.join("samples_fresh_logprob.csv")).unwrap().records().count(), 6);
}

#[test]
fn eval_writes_every_requested_report() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "total_steps = 5\n");
    let out = dir.path().join("out");
    assert_eq!(code(&train(&cfg, &out, &[])), 0);
    let o = run(&["eval", "--config", s(&cfg), "--out", s(&out), "--kinds", "bpd,latents,nllhist"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["bpd.csv", "latents.csv", "latents_grid.csv", "nllhist.csv"] {
        assert!(out.join("eval").join(f).exists(), "{f}");
    }
    let o = run(&["eval", "--config", s(&cfg), "--out", s(&out), "--kinds", "bogus"]);
    assert_eq!(code(&o), 1);
}
