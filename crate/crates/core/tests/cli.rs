use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[data]
n = 12
size = 16
seed = 3

[diffusion]
steps = 5
base_width = 4
time_dim = 8
epochs = 2
sample_count = 3
trajectory_stride = 2

[prototypes]
m = 3
epochs = 10
feature_depth = 4
extractor_width = 4
extractor_epochs = 2
";

fn protodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protodiff")).args(args).output().expect("binary runs")
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    (dir, cfg, out)
}

fn run(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    protodiff(&args)
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout.clone()).unwrap();
    assert_eq!(stdout.lines().count(), 1, "one summary line: {stdout}");
    stdout
}

#[test]
fn missing_prerequisite_has_its_own_exit_code() {
    let (_dir, cfg, out) = setup(TINY);
    let o = run("train-diffusion", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));
}

#[test]
fn config_errors_exit_with_two() {
    let (_dir, cfg, out) = setup("[data]\nnn = 3\n");
    assert_eq!(run("gen-data", &cfg, &out, &[]).status.code(), Some(2));
    let (_dir, cfg, out) = setup("[nope]\n");
    assert_eq!(run("gen-data", &cfg, &out, &[]).status.code(), Some(2));
    assert_eq!(protodiff(&["gen-data"]).status.code(), Some(2));
    assert_eq!(protodiff(&["bogus", "--config", "x"]).status.code(), Some(2));
}

#[test]
fn sample_count_and_metrics_rows_agree() {
    let (_dir, cfg, out) = setup(TINY);
    for cmd in ["gen-data", "train-diffusion"] {
        ok(&run(cmd, &cfg, &out, &[]));
    }
    ok(&run("sample", &cfg, &out, &["--count", "4"]));
    let pgms = fs::read_dir(out.join("samples")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")
    });
    assert_eq!(pgms.count(), 4);
    ok(&run("train-proto", &cfg, &out, &["--head", "protopool"]));
    assert!(out.join("banks/protopool.ckpt").exists());
    assert!(!out.join("banks/ppnet.ckpt").exists());
    ok(&run("evaluate", &cfg, &out, &[]));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("image_id,psnr,ssim,lpips,dice"));
    assert_eq!(lines.count(), 4);

    ok(&run("explain", &cfg, &out, &["--head", "protopool", "--ids", "sample_0001,sample_0003"]));
    let mut written: Vec<String> = fs::read_dir(out.join("explanations/protopool"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    written.sort();
    assert_eq!(written, ["sample_0001.json", "sample_0003.json"]);
    let o = run("explain", &cfg, &out, &["--head", "protopool", "--ids", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    // comparing all heads needs the other banks
    assert_eq!(run("compare", &cfg, &out, &[]).status.code(), Some(3));
}

#[test]
fn reruns_are_bit_identical() {
    let (_dir, cfg, out) = setup(TINY);
    let files = ["data/manifest.json", "checkpoints/denoiser.ckpt", "samples/sample_0000.pgm", "trajectory/trajectory.csv"];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        for cmd in ["gen-data", "train-diffusion", "sample", "trajectory"] {
            ok(&run(cmd, &cfg, &out, &[]));
        }
        snapshots.push(files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(snapshots[0], snapshots[1]);

    let other = out.with_file_name("other");
    ok(&run("gen-data", &cfg, &other, &["--seed", "4"]));
    assert_ne!(fs::read(other.join(files[0])).unwrap(), snapshots[0][0]);
}
