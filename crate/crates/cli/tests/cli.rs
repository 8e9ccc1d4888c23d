use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ledit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ledit"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("LEDIT_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 16] = [
    "--set", "depth=2", "--set", "hidden=16", "--set", "heads=2", "--set", "freq_dim=16",
    "--set", "train_height=8", "--set", "train_width=8", "--set", "sample_steps=3", "--set", "log_every=0",
];

#[test]
fn flops_prints_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = ledit(dir.path(), &["flops", "--len", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "full=16 causal=10");
}

#[test]
fn validation_errors_are_single_parseable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = ledit(dir.path(), &["--set", "depth=3", "gen-data", "--n-per-class", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=config msg=\""), "{err}");

    let o = ledit(dir.path(), &["flops", "--len", "0"]);
    assert_eq!(o.status.code(), Some(1));

    let o = ledit(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error kind=usage"), "{}", stderr(&o));
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--classes", "2", "--n-per-class", "3", "--height", "8", "--width", "8", "--seed", "4"];
    assert!(ledit(a.path(), &args).status.success());
    assert!(ledit(b.path(), &args).status.success());
    let index = fs::read_to_string(a.path().join("index.txt")).unwrap();
    assert_eq!(index.lines().count(), 6);
    for name in ["class0_0000.ppm", "class1_0002.ppm", "index.txt"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn mask_dump_writes_ascii_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let o = ledit(dir.path(), &["mask-dump", "--variant", "a", "--height", "1", "--width", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ascii = fs::read_to_string(dir.path().join("mask_a_1x3.txt")).unwrap();
    assert_eq!(ascii, "100\n110\n111\n");
    assert!(fs::read(dir.path().join("mask_a_1x3.pgm")).unwrap().starts_with(b"P5"));
}

#[test]
fn train_sample_and_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = ledit(&data, &["gen-data", "--n-per-class", "2", "--height", "8", "--width", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut args: Vec<&str> = TINY.to_vec();
    args.extend(["train", "--data", data.to_str().unwrap(), "--steps", "3", "--batch", "2"]);
    let o = ledit(&run, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("train steps=3"));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let ck = run.join("model.ckpt");
    let sample = |out: &Path| {
        let mut args: Vec<&str> = TINY.to_vec();
        args.extend(["sample", "--checkpoint", ck.to_str().unwrap(), "--label", "1"]);
        ledit(out, &args)
    };
    let first = dir.path().join("s1");
    let second = dir.path().join("s2");
    assert!(sample(&first).status.success());
    assert!(sample(&second).status.success());
    assert_eq!(
        fs::read(first.join("sample_8x8.ppm")).unwrap(),
        fs::read(second.join("sample_8x8.ppm")).unwrap()
    );

    let mut bytes = fs::read(&ck).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&ck, &bytes).unwrap();
    let o = sample(&dir.path().join("s3"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=io_format"), "{}", stderr(&o));
}
