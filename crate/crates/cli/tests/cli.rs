//! The `reframe` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reframe::codec::TIMESTAMP_RANGE;

const TINY: &str = "\
model.dim = 8
ase.queries = 3
ase.heads = 2
ase.layers = 1
ase.ff_dim = 16
unet.c1 = 8
unet.c2 = 8
unet.heads = 2
diffusion.T = 100
diffusion.steps = 4
train.batch = 4
train.log_every = 2
eval.seeds = 2
eval.batch = 8
toy.samples_per_cell = 2
";

struct Workdir {
    dir: tempfile::TempDir,
}

impl Workdir {
    fn new() -> Workdir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Workdir { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_reframe"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg("tiny.cfg")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Dataset, backbone and adapter checkpoints.
    fn trained(&self) {
        self.ok(&["gen-data", "--out", "data"]);
        self.ok(&["train", "--phase", "pretrain", "--data", "data", "--out", "pre.rfck", "--steps", "3"]);
        self.ok(&[
            "train", "--phase", "adapter", "--data", "data", "--backbone", "pre.rfck", "--out", "ad.rfck", "--steps", "3",
        ]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn without_timestamp(path: &Path) -> Vec<u8> {
    let mut b = fs::read(path).unwrap();
    b[TIMESTAMP_RANGE].fill(0);
    b
}

fn without_runtime(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with("runtime_s=")).collect::<Vec<_>>().join("\n")
}

#[test]
fn usage_errors_exit_with_one() {
    let w = Workdir::new();
    assert_eq!(code(&w.run(&["--help"])), 0);
    assert_eq!(code(&w.run(&["frobnicate"])), 1);
    assert_eq!(code(&w.run(&["--set", "no.such.key=1", "selftest"])), 1);
    assert_eq!(code(&w.run(&["--set", "fusion.alpha=1.5", "selftest"])), 1);
    w.ok(&["gen-data", "--out", "data"]);
    let out = w.run(&["train", "--phase", "adapter", "--data", "data", "--out", "x.rfck"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--backbone"));
    assert_eq!(code(&w.run(&["sample", "--ckpt", "x", "--caption", "shape dodecagon", "--out", "o.ppm"])), 1);
}

#[test]
fn io_errors_exit_with_two() {
    let w = Workdir::new();
    assert_eq!(code(&w.run(&["eval", "--ckpt", "missing.rfck", "--data", "nowhere"])), 2);
    fs::write(w.path("junk.rfck"), b"not a checkpoint").unwrap();
    w.ok(&["gen-data", "--out", "data"]);
    assert_eq!(code(&w.run(&["eval", "--ckpt", "junk.rfck", "--data", "data"])), 2);
}

#[test]
fn gen_data_is_reproducible_and_seeded() {
    let w = Workdir::new();
    w.ok(&["gen-data", "--out", "a"]);
    w.ok(&["gen-data", "--out", "b"]);
    w.ok(&["--seed", "9", "gen-data", "--out", "c"]);
    let manifest = |d: &str| fs::read(w.path(d).join("manifest.tsv")).unwrap();
    assert_eq!(manifest("a"), manifest("b"));
    let img = |d: &str| fs::read(w.path(d).join("train/s0_c0_000.ppm")).unwrap();
    assert_eq!(img("a"), img("b"));
    assert_ne!(img("a"), img("c"));
}

#[test]
fn training_resumes_to_the_same_checkpoint() {
    let w = Workdir::new();
    w.ok(&["gen-data", "--out", "data"]);
    let pre = |out: &str, steps: &str, resume: Option<&str>| {
        let mut args = vec!["train", "--phase", "pretrain", "--data", "data", "--out", out, "--steps", steps];
        if let Some(r) = resume {
            args.extend(["--resume", r]);
        }
        w.ok(&args)
    };
    pre("full.rfck", "4", None);
    pre("again.rfck", "4", None);
    pre("half.rfck", "2", None);
    pre("resumed.rfck", "4", Some("half.rfck"));
    let full = without_timestamp(&w.path("full.rfck"));
    assert_eq!(full, without_timestamp(&w.path("again.rfck")));
    assert_eq!(full, without_timestamp(&w.path("resumed.rfck")));
    let csv = fs::read_to_string(w.path("full.rfck.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn sample_eval_sweep_and_attention() {
    let w = Workdir::new();
    w.trained();
    let style = "data/train/s2_c1_000.ppm";
    let sample = |out: &str| w.ok(&["sample", "--ckpt", "ad.rfck", "--caption", "circle shape", "--style", style, "--out", out]);
    let line = sample("a.ppm");
    sample("b.ppm");
    assert!(line.contains("style") && line.contains("content"));
    assert_eq!(fs::read(w.path("a.ppm")).unwrap(), fs::read(w.path("b.ppm")).unwrap());

    w.ok(&["eval", "--ckpt", "ad.rfck", "--data", "data", "--cells", "holdout", "--report", "h1.txt"]);
    w.ok(&["eval", "--ckpt", "ad.rfck", "--data", "data", "--cells", "holdout", "--report", "h2.txt"]);
    let h1 = fs::read_to_string(w.path("h1.txt")).unwrap();
    assert_eq!(without_runtime(&h1), without_runtime(&fs::read_to_string(w.path("h2.txt")).unwrap()));
    let cells: Vec<&str> = h1.lines().filter(|l| l.starts_with("cell.") && l.contains(".style_counts=")).collect();
    assert_eq!(cells.len(), 3);
    for cell in ["1:2", "3:0", "0:3"] {
        assert!(h1.contains(&format!("cell.{cell}.")), "{cell} missing");
    }

    let out = w.run(&["eval", "--ckpt", "pre.rfck", "--data", "data"]);
    assert_eq!(code(&out), 1, "a backbone has no adapter to take a reference");
    w.ok(&["eval", "--ckpt", "pre.rfck", "--data", "data", "--cells", "0:0", "--text-only"]);

    w.ok(&["sweep", "--ckpt", "ad.rfck", "--data", "data", "--cells", "0:0,1:1", "--alphas", "0.2,0.4,0.6,0.8,1.0", "--report", "s.txt"]);
    let sweep = fs::read_to_string(w.path("s.txt")).unwrap();
    assert_eq!(sweep.lines().filter(|l| l.starts_with("diversity.")).count(), 5);
    assert!(sweep.contains("trend.spearman="));

    w.ok(&["inspect-attention", "--ckpt", "ad.rfck", "--caption", "square", "--style", style, "--out", "map.csv"]);
    let csv = fs::read_to_string(w.path("map.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows.len() > 1, "{csv}");
}
