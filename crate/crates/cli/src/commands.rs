use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use paraformer::io::{read_image_png, read_label_png, write_label_png};
use paraformer::train::{read_history_csv, run_ablation, write_history_csv};
use paraformer::{
    build_benchmark, predict_tile, predict_tiles, AblationMode, Checkpoint, DegradeSpec, Error, EvalReport, Manifest,
    Paraformer, Split, Trainer,
};
use serde::{Deserialize, Serialize};

use crate::config::{CliConfig, SceneSection};
use crate::palette::Palette;
use crate::svg::{bar_chart, line_chart, Series};
use crate::{Cli, Command, Usage};

pub const WORKERS_ENV: &str = "PARAFORMER_NUM_WORKERS";

/// What `eval` persists next to its prediction PNGs.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: Split,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub window: usize,
    pub miou: f64,
    /// Tile id to prediction PNG, relative to the summary file.
    pub predictions: BTreeMap<String, PathBuf>,
    pub report: EvalReport,
}

#[derive(Serialize)]
struct SynthEcho<'a> {
    scene: &'a SceneSection,
    degrade: &'a DegradeSpec,
}

struct Out {
    dir: PathBuf,
    force: bool,
}

impl Out {
    /// Fails on any existing target unless `--force`, then creates the directory.
    fn claim(&self, targets: &[&Path]) -> anyhow::Result<()> {
        if !self.force {
            if let Some(p) = targets.iter().find(|p| p.exists()) {
                return Err(Usage(format!("{} already exists (pass --force to overwrite)", p.display())).into());
            }
        }
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Usage(format!("{what} {} not found", path.display())).into())
    }
}

fn remove_if_exists(path: &Path) -> anyhow::Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path).with_context(|| format!("removing {}", path.display()))?;
    }
    Ok(())
}

/// Caps `configured` by the environment's worker limit.
fn workers(configured: usize) -> anyhow::Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .map_err(|_| Usage(format!("{WORKERS_ENV}={v} is not a positive integer")))?;
            if cap == 0 {
                return Err(Usage(format!("{WORKERS_ENV} must be at least 1")).into());
            }
            Ok(configured.min(cap).max(1))
        }
        Err(_) => Ok(configured.max(1)),
    }
}

fn load_model(checkpoint: &Path) -> anyhow::Result<(Paraformer, usize)> {
    require(checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let patch = trainer.config().patch;
    Ok((trainer.into_model(), patch))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    cfg.apply_overrides(cli.seed, cli.preset.map(Into::into));
    let dir = cli.out.ok_or_else(|| Usage("--out is required".into()))?;
    let out = Out { dir, force: cli.force };
    match cli.command {
        Command::Synth => synth(&cfg, &out),
        Command::Train {
            manifest,
            resume,
            epochs,
            mode,
        } => train(&cfg, &out, &manifest, resume.as_deref(), epochs, mode.map(Into::into)),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            window,
        } => eval(&cfg, &out, &checkpoint, &manifest, split.map(Into::into), window),
        Command::Predict {
            checkpoint,
            image,
            band4,
            window,
        } => predict(&cfg, &out, &checkpoint, &image, band4.as_deref(), window),
        Command::Ablate { manifest, seeds, modes } => ablate(
            &cfg,
            &out,
            &manifest,
            seeds,
            modes.map(|m| m.into_iter().map(Into::into).collect()),
        ),
        Command::Report { history, evals } => report(&out, &history, &evals),
    }
}

fn synth(cfg: &CliConfig, out: &Out) -> anyhow::Result<()> {
    let manifest = out.path("manifest.json");
    let tiles = out.path("tiles");
    let echo = out.path("synth.toml");
    out.claim(&[&manifest, &tiles, &echo])?;
    remove_if_exists(&tiles)?;
    let m = build_benchmark(&cfg.scene.specs(), &cfg.degrade, &cfg.scene.plan(), &out.dir)?;
    let text = toml::to_string(&SynthEcho {
        scene: &cfg.scene,
        degrade: &cfg.degrade,
    })?;
    fs::write(&echo, text).with_context(|| format!("writing {}", echo.display()))?;
    eprintln!("wrote {} tiles", m.tiles.len());
    println!("{}", manifest.display());
    Ok(())
}

fn train(
    cfg: &CliConfig,
    out: &Out,
    manifest: &Path,
    resume: Option<&Path>,
    epochs: Option<usize>,
    mode: Option<AblationMode>,
) -> anyhow::Result<()> {
    require(manifest, "manifest")?;
    if let Some(r) = resume {
        require(r, "checkpoint")?;
    }
    let ck_path = out.path("checkpoint.pfm");
    let history = out.path("history.csv");
    out.claim(&[&ck_path, &history])?;
    let m = Manifest::load(manifest)?;
    let mut trainer = match resume {
        Some(r) => {
            if mode.is_some() {
                return Err(Usage("--mode cannot change a resumed run".into()).into());
            }
            Trainer::from_checkpoint(&Checkpoint::load(r)?)?
        }
        None => {
            let mut run = cfg.run_config();
            if let Some(mode) = mode {
                run.mode = mode;
            }
            Trainer::new(run)?
        }
    };
    if let Some(e) = epochs {
        trainer.set_max_epochs(e);
    }
    trainer.set_workers(workers(trainer.config().workers)?)?;
    let tiles = m.load_split(Split::Train)?;
    if tiles.is_empty() {
        bail!("manifest {} has no training tiles", manifest.display());
    }
    while trainer.epoch() < trainer.config().max_epochs {
        match trainer.train_epoch(&tiles) {
            Ok(r) => eprintln!(
                "epoch {:>3}  total {:.4}  ce {:.4}  mce {:.4}  lr {:.6}  coverage {:.3}",
                r.epoch, r.total, r.ce, r.mce, r.lr, r.mask_coverage
            ),
            Err(Error::Diverged { epoch, last_good }) => {
                let saved = out.path("last_good.pfm");
                last_good.save(&saved)?;
                write_history_csv(&history, trainer.history())?;
                bail!("training diverged in epoch {epoch}; last good state saved to {}", saved.display());
            }
            Err(e) => return Err(e.into()),
        }
        trainer.checkpoint()?.save(&ck_path)?;
        write_history_csv(&history, trainer.history())?;
    }
    trainer.checkpoint()?.save(&ck_path)?;
    write_history_csv(&history, trainer.history())?;
    println!("{}", ck_path.display());
    Ok(())
}

fn eval(
    cfg: &CliConfig,
    out: &Out,
    checkpoint: &Path,
    manifest: &Path,
    split: Option<Split>,
    window: Option<usize>,
) -> anyhow::Result<()> {
    require(manifest, "manifest")?;
    let split = split.unwrap_or(cfg.eval.split);
    let report_path = out.path(&format!("eval_{split}.json"));
    let pred_name = format!("pred_{split}");
    let pred_dir = out.path(&pred_name);
    out.claim(&[&report_path, &pred_dir])?;
    let (model, patch) = load_model(checkpoint)?;
    let window = window.or(cfg.eval.window).unwrap_or(patch);
    let m = Manifest::load(manifest)?;
    let p = predict_tiles(&model, &m, split, window)?;
    remove_if_exists(&pred_dir)?;
    let mut predictions = BTreeMap::new();
    for (id, label) in p.ids.iter().zip(&p.labels) {
        let rel = Path::new(&pred_name).join(format!("{id}.png"));
        write_label_png(label, &out.dir.join(&rel))?;
        predictions.insert(id.clone(), rel);
    }
    let summary = EvalSummary {
        split,
        checkpoint: fs::canonicalize(checkpoint)?,
        manifest: fs::canonicalize(manifest)?,
        window,
        miou: p.report.miou,
        predictions,
        report: p.report,
    };
    fs::write(&report_path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!("mIoU {:.4}", summary.miou);
    Ok(())
}

fn predict(
    cfg: &CliConfig,
    out: &Out,
    checkpoint: &Path,
    image: &Path,
    band4: Option<&Path>,
    window: Option<usize>,
) -> anyhow::Result<()> {
    require(image, "image")?;
    if let Some(b) = band4 {
        require(b, "band file")?;
    }
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let label_path = out.path(&format!("{stem}_pred.png"));
    let color_path = out.path(&format!("{stem}_pred_color.png"));
    out.claim(&[&label_path, &color_path])?;
    let (model, patch) = load_model(checkpoint)?;
    let window = window.or(cfg.eval.window).unwrap_or(patch);
    let img = read_image_png(image, band4)?;
    let label = predict_tile(&model, &img, window)?;
    write_label_png(&label, &label_path)?;
    Palette::shipped()?
        .colorize(&label)
        .save(&color_path)
        .with_context(|| format!("writing {}", color_path.display()))?;
    println!("{}", label_path.display());
    Ok(())
}

fn ablate(
    cfg: &CliConfig,
    out: &Out,
    manifest: &Path,
    seeds: Option<usize>,
    modes: Option<Vec<AblationMode>>,
) -> anyhow::Result<()> {
    require(manifest, "manifest")?;
    let n = seeds.unwrap_or(cfg.eval.seeds);
    if n == 0 {
        return Err(Usage("--seeds must be at least 1".into()).into());
    }
    let md = out.path("ablation.md");
    let json = out.path("ablation.json");
    out.claim(&[&md, &json])?;
    let mut base = cfg.run_config();
    base.workers = workers(base.workers)?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| base.seed.wrapping_add(i)).collect();
    let modes = modes.unwrap_or_else(|| AblationMode::ALL.to_vec());
    let m = Manifest::load(manifest)?;
    let table = run_ablation(&base, &m, &seeds, &modes, |mode, seed, miou| {
        eprintln!("{:<16} seed {seed}: mIoU {miou:.4}", mode.name());
    })?;
    let text = table.to_markdown();
    fs::write(&md, &text).with_context(|| format!("writing {}", md.display()))?;
    fs::write(&json, serde_json::to_string_pretty(&table)? + "\n").with_context(|| format!("writing {}", json.display()))?;
    print!("{text}");
    Ok(())
}

const LINE_COLORS: [[u8; 3]; 3] = [[31, 119, 180], [255, 127, 14], [44, 160, 44]];

fn report(out: &Out, history: &Path, evals: &[PathBuf]) -> anyhow::Result<()> {
    require(history, "history")?;
    for e in evals {
        require(e, "eval report")?;
    }
    let records = read_history_csv(history)?;
    if records.is_empty() {
        return Err(Usage(format!("history {} has no epochs", history.display())).into());
    }
    let summaries: Vec<(String, EvalSummary, PathBuf)> = evals
        .iter()
        .map(|p| -> anyhow::Result<_> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let s: EvalSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("eval").to_string();
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((stem, s, base))
        })
        .collect::<anyhow::Result<_>>()?;

    let figures = ["loss.svg", "lr.svg", "mask_coverage.svg", "per_class_iou.svg"];
    let panels = out.path("panels");
    let mut targets: Vec<PathBuf> = figures.iter().map(|f| out.path(f)).collect();
    targets.push(panels.clone());
    out.claim(&targets.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    remove_if_exists(&panels)?;

    let curve = |name: &str, color: [u8; 3], f: fn(&paraformer::EpochRecord) -> f64| Series {
        name: name.to_string(),
        color,
        points: records.iter().map(|r| (r.epoch as f64, f(r))).collect(),
    };
    let write = |name: &str, svg: String| -> anyhow::Result<()> {
        let p = out.path(name);
        fs::write(&p, svg).with_context(|| format!("writing {}", p.display()))
    };
    write(
        "loss.svg",
        line_chart(
            "Training loss",
            "epoch",
            "loss",
            &[
                curve("total", LINE_COLORS[0], |r| r.total),
                curve("ce", LINE_COLORS[1], |r| r.ce),
                curve("mce", LINE_COLORS[2], |r| r.mce),
            ],
        ),
    )?;
    write(
        "lr.svg",
        line_chart("Learning rate", "epoch", "lr", &[curve("lr", LINE_COLORS[0], |r| r.lr)]),
    )?;
    write(
        "mask_coverage.svg",
        line_chart(
            "Mask coverage",
            "epoch",
            "selected / supervised pixels",
            &[curve("coverage", LINE_COLORS[0], |r| r.mask_coverage)],
        ),
    )?;

    let palette = Palette::shipped()?;
    if !summaries.is_empty() {
        let classes = summaries.iter().map(|(_, s, _)| s.report.num_classes).max().unwrap_or(0);
        let categories: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
        let series: Vec<(String, [u8; 3], Vec<Option<f64>>)> = summaries
            .iter()
            .enumerate()
            .map(|(i, (stem, s, _))| {
                let mut v = s.report.per_class_iou.clone();
                v.resize(classes, None);
                (format!("{stem} ({:.4})", s.miou), LINE_COLORS[i % LINE_COLORS.len()], v)
            })
            .collect();
        write("per_class_iou.svg", bar_chart("Per-class IoU", "IoU", &categories, &series))?;
    }

    let mut n_panels = 0;
    for (stem, s, base) in &summaries {
        let m = Manifest::load(&s.manifest)?;
        for (id, rel) in &s.predictions {
            let record = m
                .tiles
                .iter()
                .find(|t| &t.id == id)
                .with_context(|| format!("tile {id} is not in {}", s.manifest.display()))?;
            let tile = m.load_tile(record)?;
            let pred = read_label_png(&base.join(rel))?;
            let img = palette.tri_panel([&tile.lr_label, &pred, &tile.gt], s.report.num_classes);
            let p = panels.join(format!("{stem}_{id}.png"));
            fs::create_dir_all(&panels)?;
            img.save(&p).with_context(|| format!("writing {}", p.display()))?;
            n_panels += 1;
        }
    }
    eprintln!("wrote {} figures and {n_panels} panels", if summaries.is_empty() { 3 } else { 4 });
    Ok(())
}
