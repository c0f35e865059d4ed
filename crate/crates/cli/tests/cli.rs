use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dnl::tensor::read_tensor;

fn dnl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnl")).args(args).output().expect("spawn dnl")
}

fn ok(args: &[&str]) -> String {
    let out = dnl(args);
    assert!(out.status.success(), "dnl {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    dnl(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "\
stem_widths = 4,8,8,8
channels = 8
reduced_channels = 2
head_channels = 8
crop_height = 32
crop_width = 32
batch_size = 4
epochs = 5
";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: tempfile::tempdir().unwrap() };
        fs::write(f.path("spec.txt"), "height = 32\nwidth = 32\nseed = 3\n").unwrap();
        fs::write(f.path("tiny.cfg"), TINY).unwrap();
        ok(&["gen", "--spec", s(&f.path("spec.txt")), "--n", "8", "--out", s(&f.path("data.dnld"))]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let (cfg, data, out) = (self.path("tiny.cfg"), self.path("data.dnld"), self.path(out));
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

#[test]
fn gen_prints_census_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.dnld");
    let b = dir.path().join("b.dnld");
    let out = ok(&["gen", "--n", "8", "--out", s(&a), "--seed", "5"]);
    assert!(out.contains("class  samples"), "{out}");
    assert_eq!(out.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 4);
    ok(&["gen", "--n", "8", "--out", s(&b), "--seed", "5"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gen_rejects_zero_samples() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["gen", "--n", "0", "--out", s(&dir.path().join("x"))]), 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let f = Fixture::new();
    fs::write(f.path("bad.cfg"), "learning_rate = 0.1\n").unwrap();
    let c = code(&["train", "--config", s(&f.path("bad.cfg")), "--data", s(&f.path("data.dnld")), "--out", s(&f.path("o"))]);
    assert_eq!(c, 2);
}

#[test]
fn train_writes_history_and_resume_from_final_is_clean() {
    let f = Fixture::new();
    f.train("run", &[]);
    let history = fs::read_to_string(f.path("run/history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("iter,loss,lp,l1,l2,lgr,lr"));
    assert_eq!(lines.count(), 10);
    let manifest = fs::read_to_string(f.path("run/manifest.txt")).unwrap();
    assert!(manifest.contains("# config_hash: ") && manifest.contains("# data_sha256: "));

    let out = ok(&["train", "--resume", s(&f.path("run/final.ckpt")), "--data", s(&f.path("data.dnld")), "--out", s(&f.path("run"))]);
    assert!(out.contains("nothing to do"), "{out}");
    let after = fs::read_to_string(f.path("run/history.csv")).unwrap();
    assert_eq!(after, history);

    // The manifest is itself a valid config and reproduces the checkpoint.
    let out = ok(&["train", "--config", s(&f.path("run/manifest.txt")), "--data", s(&f.path("data.dnld")), "--out", s(&f.path("again"))]);
    assert!(out.contains("trained 10 steps"));
    assert_eq!(fs::read(f.path("run/final.ckpt")).unwrap(), fs::read(f.path("again/final.ckpt")).unwrap());
}

fn config_hash(manifest: &Path) -> String {
    let text = fs::read_to_string(manifest).unwrap();
    text.lines().find_map(|l| l.strip_prefix("# config_hash: ")).unwrap().to_string()
}

#[test]
fn ablation_flags_change_the_manifest() {
    let f = Fixture::new();
    fs::write(f.path("tiny.cfg"), TINY.replace("epochs = 5", "epochs = 1")).unwrap();
    f.train("full", &[]);
    f.train("nogr", &["--no-gr"]);
    f.train("nolr", &["--no-lr"]);
    let hashes = [config_hash(&f.path("full/manifest.txt")), config_hash(&f.path("nogr/manifest.txt")), config_hash(&f.path("nolr/manifest.txt"))];
    assert_ne!(hashes[0], hashes[1]);
    assert_ne!(hashes[0], hashes[2]);
    assert_ne!(hashes[1], hashes[2]);
    assert!(fs::read_to_string(f.path("nogr/manifest.txt")).unwrap().contains("global_rectify = false"));
}

#[test]
fn eval_and_dump_attention() {
    let f = Fixture::new();
    f.train("run", &[]);
    let ckpt = f.path("run/final.ckpt");
    let report = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&f.path("data.dnld"))]);
    let miou: f64 = report.lines().find_map(|l| l.strip_prefix("miou=")).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let maps = f.path("maps");
    ok(&["dump-attention", "--ckpt", s(&ckpt), "--data", s(&f.path("data.dnld")), "--image", "s00001", "--pixel", "20,9", "--out", s(&maps)]);
    for i in 1..=3 {
        assert!(maps.join(format!("map{i}.pgm")).exists());
    }
    let map1 = read_tensor(maps.join("map1.dnlt")).unwrap();
    assert_eq!(map1.shape(), &[2, 2]);
    assert!((map1.sum() - 1.0).abs() < 1e-12);

    let forced = f.path("forced");
    ok(&[
        "dump-attention", "--ckpt", s(&ckpt), "--data", s(&f.path("data.dnld")), "--image", "s00001", "--pixel", "20,9",
        "--out", s(&forced), "--force-pclass-ones",
    ]);
    let m1 = read_tensor(forced.join("map1.dnlt")).unwrap();
    let m2 = read_tensor(forced.join("map2.dnlt")).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(m1, map1);

    let data = f.path("data.dnld");
    let oob = &["dump-attention", "--ckpt", s(&ckpt), "--data", s(&data), "--image", "s00001", "--pixel", "32,0", "--out", s(&maps)];
    assert_eq!(code(oob), 2);
    let missing = &["dump-attention", "--ckpt", s(&ckpt), "--data", s(&data), "--image", "nope", "--pixel", "1,1", "--out", s(&maps)];
    assert_eq!(code(missing), 2);
}

#[test]
fn eval_rejects_incompatible_dataset() {
    let f = Fixture::new();
    f.train("run", &[]);
    fs::write(f.path("spec3.txt"), "height = 32\nwidth = 32\nnum_classes = 3\n").unwrap();
    ok(&["gen", "--spec", s(&f.path("spec3.txt")), "--n", "2", "--out", s(&f.path("d3.dnld"))]);
    assert_eq!(code(&["eval", "--ckpt", s(&f.path("run/final.ckpt")), "--data", s(&f.path("d3.dnld"))]), 2);
}

fn block_macs(out: &str, name: &str) -> u64 {
    out.lines()
        .find_map(|l| {
            let mut it = l.split_whitespace();
            if it.next()? == name { it.next()?.parse().ok() } else { None }
        })
        .unwrap_or_else(|| panic!("no {name} row in\n{out}"))
}

#[test]
fn flops_scaling() {
    let a = ok(&["flops", "--input", "64x64"]);
    let b = ok(&["flops", "--input", "128x128"]);
    for name in ["attention.affinity", "attention.aggregation"] {
        assert_eq!(block_macs(&b, name), 16 * block_macs(&a, name));
    }
    let dir = tempfile::tempdir().unwrap();
    let k1 = dir.path().join("k1.cfg");
    fs::write(&k1, "window = 1\n").unwrap();
    let one = ok(&["flops", "--config", s(&k1), "--input", "64x64"]);
    for name in ["lr.similarity", "lr.smoothing"] {
        assert_eq!(9 * block_macs(&one, name), block_macs(&a, name));
    }
    assert_eq!(code(&["flops", "--input", "60x64"]), 2);
}

#[test]
fn gradcheck_passes_for_two_seeds_and_catches_corruption() {
    for seed in ["0", "1"] {
        let out = ok(&["gradcheck", "--seed", seed]);
        assert!(out.contains("pass:"), "{out}");
    }
    assert_eq!(code(&["gradcheck", "--corrupt-adjoint", "conv"]), 4);
    assert_eq!(code(&["gradcheck", "--corrupt-adjoint", "sigmoid"]), 4);
}
