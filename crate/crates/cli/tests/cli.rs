use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[scene]
tiles = 5
height = 64
width = 64

[model]
preset = "desk"

[train]
patch = 32
batch = 2
max_epochs = 1
patches_per_tile = 2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paraformer"))
        .args(args)
        .env_remove("PARAFORMER_NUM_WORKERS")
        .output()
        .expect("spawning the binary")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn synth(&self, name: &str, seed: &str) -> PathBuf {
        let out = self.root.join(name);
        ok(&["synth", "--config", s(&self.config), "--seed", seed, "--out", s(&out)]);
        out.join("manifest.json")
    }
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "train", "eval", "predict", "ablate", "report"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn missing_config_is_a_usage_error_and_writes_nothing() {
    let f = Fixture::new();
    let out_dir = f.root.join("out");
    let out = run(&["synth", "--config", s(&f.root.join("absent.toml")), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["synth", "--bogus"]).status.code(), Some(2));
}

#[test]
fn synth_is_reproducible_and_refuses_to_overwrite() {
    let f = Fixture::new();
    let a = f.synth("a", "3");
    let b = f.synth("b", "3");
    let (ta, tb) = (tree(a.parent().unwrap()), tree(b.parent().unwrap()));
    assert!(ta.len() > 5);
    assert_eq!(ta, tb);
    let c = f.synth("c", "4");
    assert_ne!(ta, tree(c.parent().unwrap()));

    let again = run(&["synth", "--config", s(&f.config), "--seed", "3", "--out", s(a.parent().unwrap())]);
    assert_eq!(again.status.code(), Some(2));
    ok(&["synth", "--config", s(&f.config), "--seed", "3", "--out", s(a.parent().unwrap()), "--force"]);
    assert_eq!(tree(a.parent().unwrap()), tb);
}

#[test]
fn pipeline_train_eval_predict_report_resume() {
    let f = Fixture::new();
    let manifest = f.synth("data", "1");
    let cfg = s(&f.config);
    let run_dir = f.root.join("run");
    ok(&["train", "--config", cfg, "--manifest", s(&manifest), "--out", s(&run_dir)]);
    let history = run_dir.join("history.csv");
    let ckpt = run_dir.join("checkpoint.pfm");
    let text = fs::read_to_string(&history).unwrap();
    assert_eq!(text.lines().count(), 2, "header plus one epoch: {text}");
    assert!(text.starts_with("epoch,ce,mce,total,lr,mask_coverage"));

    let stdout = ok(&["eval", "--config", cfg, "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&run_dir)]);
    assert!(stdout.starts_with("mIoU "));
    let eval_json = run_dir.join("eval_test.json");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(&eval_json).unwrap()).unwrap();
    let miou = summary["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert!(run_dir.join("pred_test").read_dir().unwrap().count() >= 1);

    let tiles = manifest.parent().unwrap().join("tiles");
    let image = tiles.join("tile_0000_image.png");
    let band4 = tiles.join("tile_0000_band4.png");
    let pred_dir = f.root.join("pred");
    ok(&[
        "predict", "--config", cfg, "--checkpoint", s(&ckpt), "--image", s(&image), "--band4", s(&band4), "--out",
        s(&pred_dir),
    ]);
    assert!(pred_dir.join("tile_0000_image_pred.png").exists());
    assert!(pred_dir.join("tile_0000_image_pred_color.png").exists());

    let rep_a = f.root.join("report_a");
    let rep_b = f.root.join("report_b");
    for dir in [&rep_a, &rep_b] {
        ok(&["report", "--history", s(&history), "--eval", s(&eval_json), "--out", s(dir)]);
    }
    for name in ["loss.svg", "lr.svg", "mask_coverage.svg", "per_class_iou.svg"] {
        let a = fs::read(rep_a.join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(rep_b.join(name)).unwrap(), "{name} differs between runs");
    }
    assert!(rep_a.join("panels").read_dir().unwrap().count() >= 1);

    let resumed = f.root.join("resumed");
    ok(&["train", "--config", cfg, "--manifest", s(&manifest), "--resume", s(&ckpt), "--epochs", "2", "--out", s(&resumed)]);
    let text = fs::read_to_string(resumed.join("history.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap() == fs::read_to_string(&history).unwrap().lines().nth(1).unwrap());

    let clash = run(&["train", "--config", cfg, "--manifest", s(&manifest), "--out", s(&run_dir)]);
    assert_eq!(clash.status.code(), Some(2));
    let bad_mode = run(&[
        "train", "--config", cfg, "--manifest", s(&manifest), "--resume", s(&ckpt), "--mode", "no-plat", "--out",
        s(&f.root.join("x")),
    ]);
    assert_eq!(bad_mode.status.code(), Some(2));
}

#[test]
fn training_history_is_deterministic_with_one_worker() {
    let f = Fixture::new();
    let manifest = f.synth("data", "2");
    let mut csvs = Vec::new();
    for name in ["r1", "r2"] {
        let dir = f.root.join(name);
        ok(&["train", "--config", s(&f.config), "--manifest", s(&manifest), "--out", s(&dir)]);
        csvs.push(fs::read(dir.join("history.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn ablate_writes_a_table() {
    let f = Fixture::new();
    let manifest = f.synth("data", "5");
    let dir = f.root.join("abl");
    let stdout = ok(&[
        "ablate", "--config", s(&f.config), "--manifest", s(&manifest), "--seeds", "1", "--modes", "cnn-only,full", "--out",
        s(&dir),
    ]);
    assert!(stdout.contains("| cnn_only |"));
    assert!(stdout.contains("| full |"));
    assert!(stdout.contains("upsampled_lr_baseline"));
    assert!(dir.join("ablation.json").exists());
}

#[test]
fn empty_history_is_a_usage_error() {
    let f = Fixture::new();
    let history = f.root.join("history.csv");
    fs::write(&history, "epoch,ce,mce,total,lr,mask_coverage\n").unwrap();
    let out = run(&["report", "--history", s(&history), "--out", s(&f.root.join("rep"))]);
    assert_eq!(out.status.code(), Some(2));
}
