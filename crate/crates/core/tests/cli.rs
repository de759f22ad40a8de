use std::path::Path;
use std::process::Command;

use prosody_hvae::corpus::load_corpus;
use prosody_hvae::model::load_checkpoint;

const DESK: &str = r#"
corpus_size = 4
[corpus]
sample_rate = 8000
frame_length = 256
hop_length = 80
fft_bins = 256
[model]
hidden_dim = 8
proj_dim = 4
phone_embed_dim = 4
[train]
steps = 6
batch_size = 2
log_every = 1
[eval]
n_samples = 10
n_seeds = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prosody-hvae"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, stderr) = run(&["selfcheck", "--out", &s(dir.path())]);
    assert_eq!(code, 0, "{stdout}{stderr}");
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("manifest.toml").exists());
}

#[test]
fn missing_config_is_usage_error_with_schema() {
    let (code, _, stderr) = run(&["train"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("[model]"), "{stderr}");
}

#[test]
fn unknown_flag_and_subcommand_are_usage_errors() {
    assert_eq!(run(&["train", "--bogus"]).0, 1);
    assert_eq!(run(&["launch"]).0, 1);
}

#[test]
fn unknown_config_key_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nstepz = 3\n");
    let (code, _, stderr) = run(&["train", "--config", &cfg]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn bad_range_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DESK);
    let (code, _, _) = run(&["traverse", "--config", &cfg, "--checkpoint", "x.bin", "--range", "1:0:3"]);
    assert_eq!(code, 1);
}

#[test]
fn corrupt_checkpoint_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DESK);
    let ck = dir.path().join("bad.bin");
    std::fs::write(&ck, b"HVCK\x01\x00\x00\x00garbage").unwrap();
    let (code, _, stderr) = run(&["disentangle", "--config", &cfg, "--checkpoint", &s(&ck), "--out", &s(dir.path())]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn gen_corpus_writes_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DESK);
    let out = dir.path().join("c");
    let (code, _, stderr) = run(&["gen-corpus", "--config", &cfg, "--out", &s(&out), "--seed", "3"]);
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(load_corpus(&out.join("corpus.bin")).unwrap().len(), 4);
    let manifest = std::fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"gen-corpus\""));
    assert!(manifest.contains("seed = 3"));
}

#[test]
fn train_twice_gives_identical_trace_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DESK);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        let (code, _, stderr) = run(&["train", "--config", &cfg, "--seed", "7", "--out", &s(o)]);
        assert_eq!(code, 0, "{stderr}");
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a.join("trace.csv")), read(&b.join("trace.csv")));
    assert_eq!(read(&a.join("final.bin")), read(&b.join("final.bin")));
    let trace = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 6);
    assert!(trace.starts_with("step,recon,kl_phone_total,kl_word_total,kl_utt_total,total,active_dims"));
    load_checkpoint(&a.join("final.bin")).unwrap();
}

#[test]
fn eval_traverse_disentangle_on_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DESK);
    let t = dir.path().join("t");
    assert_eq!(run(&["train", "--config", &cfg, "--out", &s(&t), "--steps", "3"]).0, 0);
    let ck = s(&t.join("final.bin"));

    let e = dir.path().join("e");
    let (code, _, stderr) = run(&["eval", "--config", &cfg, "--checkpoint", &ck, "--out", &s(&e)]);
    assert_eq!(code, 0, "{stderr}");
    let metrics = std::fs::read_to_string(e.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("utterance,gpe,vde,ffe,mcd13"));
    assert_eq!(metrics.lines().count(), 5);

    let tr = dir.path().join("tr");
    let (code, _, stderr) = run(&[
        "traverse", "--config", &cfg, "--checkpoint", &ck, "--out", &s(&tr), "--level", "word", "--dim", "2", "--range", "-1:1:5",
    ]);
    assert_eq!(code, 0, "{stderr}");
    let csv = std::fs::read_to_string(tr.join("traversal.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("2,-1,"));

    let d = dir.path().join("d");
    let (code, stdout, stderr) = run(&["disentangle", "--config", &cfg, "--checkpoint", &ck, "--out", &s(&d)]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("Average variance ratio"));
    assert!(d.join("disentangle.csv").exists() && d.join("disentangle.txt").exists());

    let (code, _, _) = run(&["traverse", "--config", &cfg, "--checkpoint", &ck, "--out", &s(&tr), "--dim", "9"]);
    assert_eq!(code, 2);
}

#[test]
fn eval_identity_has_zero_ffe_and_mcd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DESK);
    let (code, _, stderr) = run(&["eval", "--config", &cfg, "--out", &s(dir.path())]);
    assert_eq!(code, 0, "{stderr}");
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    for line in metrics.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[3].parse::<f64>().unwrap(), 0.0, "{line}");
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.0, "{line}");
    }
}
