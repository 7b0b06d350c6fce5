//! One function per subcommand. Each takes a resolved [`RunConfig`] and
//! writes its artifacts under the config's output directory.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use pgseg::geometry::PointCloud;
use pgseg::io::checkpoint::load_checkpoint;
use pgseg::io::cloud_file::{read_cloud, write_cloud, CloudFormat};
use pgseg::io::synth::{generate_scene, POTHOLE};
use pgseg::io::write_atomic;
use pgseg::metrics::EvalReport;
use pgseg::network::SegmentationNetwork;
use pgseg::train::{evaluate, Trainer, TrainingLog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{io_context, CliError, CliResult};
use crate::plot;

pub const MANIFEST: &str = "manifest.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_LOG: &str = "eval.jsonl";

/// Seed offsets separating the generated splits.
const VAL_SEED_OFFSET: u64 = 1_000_000;
const TEST_SEED_OFFSET: u64 = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(io_context(path))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(io_context(path))
}

/// Detects the format from the file's first line, like the reader does.
pub fn detect_format(path: &Path) -> CliResult<CloudFormat> {
    let text = std::fs::read_to_string(path).map_err(io_context(path))?;
    Ok(if text.trim_start().starts_with("ply") {
        CloudFormat::AsciiPly
    } else {
        CloudFormat::Xyzl
    })
}

/// Cloud files named by `paths`; directories contribute their `.xyzl` and
/// `.ply` files in name order.
pub fn collect_cloud_files(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io_context(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    matches!(
                        f.extension().and_then(|e| e.to_str()),
                        Some("xyzl") | Some("ply")
                    )
                })
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

pub fn synthetic_seed(base: u64, split: Split, index: usize) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Val => VAL_SEED_OFFSET,
        Split::Test => TEST_SEED_OFFSET,
    };
    base.wrapping_add(offset).wrapping_add(index as u64)
}

/// Reads or generates one dataset split.
pub fn load_split(cfg: &RunConfig, split: Split) -> CliResult<Vec<PointCloud>> {
    let d = &cfg.data;
    let (paths, synthetic) = match split {
        Split::Train => (&d.train, d.synthetic_train),
        Split::Val => (&d.val, d.synthetic_val),
        Split::Test => (&d.test, d.synthetic_test),
    };
    let paths = paths.clone().unwrap_or_default();
    if !paths.is_empty() {
        return collect_cloud_files(&paths)?
            .iter()
            .map(|f| read_cloud(f).map_err(CliError::from))
            .collect();
    }
    (0..synthetic.unwrap_or(0))
        .map(|i| {
            let spec = cfg.scene_spec(synthetic_seed(cfg.seed(), split, i))?;
            Ok(generate_scene(&spec)?)
        })
        .collect()
}

fn check_classes(clouds: &[PointCloud], classes: usize, what: &str) -> CliResult<()> {
    for (i, c) in clouds.iter().enumerate() {
        c.validate_labels(classes).map_err(|e| {
            CliError::Data(format!("{what} cloud {i}: {e} (class-count mismatch with the network)"))
        })?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub file: String,
    pub seed: u64,
    pub points: usize,
    pub pothole_fraction: f64,
}

pub fn parse_manifest(text: &str) -> CliResult<Vec<ManifestRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("file,seed,points,pothole_fraction") {
        return Err(CliError::Data("manifest: unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            let bad = || CliError::Data(format!("manifest: malformed row `{l}`"));
            if c.len() != 4 {
                return Err(bad());
            }
            Ok(ManifestRow {
                file: c[0].to_string(),
                seed: c[1].parse().map_err(|_| bad())?,
                points: c[2].parse().map_err(|_| bad())?,
                pothole_fraction: c[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Writes `count` generated clouds and a manifest.
pub fn gen(cfg: &RunConfig, count: Option<usize>, format: Option<&str>) -> CliResult<Vec<ManifestRow>> {
    let count = count.or(cfg.gen.count).unwrap_or(1);
    let format = match format.or(cfg.gen.format.as_deref()).unwrap_or("xyzl") {
        "xyzl" => CloudFormat::Xyzl,
        "ply" => CloudFormat::AsciiPly,
        other => return Err(CliError::Config(format!("unknown cloud format `{other}`"))),
    };
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    cfg.echo()?;
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let seed = synthetic_seed(cfg.seed(), Split::Train, i);
        let cloud = generate_scene(&cfg.scene_spec(seed)?)?;
        let file = format!("cloud_{i:03}.{}", format.extension());
        write_cloud(&cloud, dir.join(&file), format)?;
        rows.push(ManifestRow {
            file,
            seed,
            points: cloud.len(),
            pothole_fraction: cloud.class_fraction(POTHOLE).unwrap_or(0.0),
        });
    }
    let mut manifest = String::from("file,seed,points,pothole_fraction\n");
    for r in &rows {
        let _ = writeln!(manifest, "{},{},{},{}", r.file, r.seed, r.points, r.pothole_fraction);
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub parameter_count: usize,
    pub log: TrainingLog,
    pub checkpoint_dir: PathBuf,
}

pub fn build_network(cfg: &RunConfig) -> CliResult<SegmentationNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    Ok(SegmentationNetwork::build(cfg.network_config()?, &mut rng)?)
}

/// Trains on the configured data, writing the log after every epoch and
/// checkpoints under `<out>/checkpoints`.
pub fn train(cfg: &RunConfig, resume: bool, verbose: bool) -> CliResult<TrainOutcome> {
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    cfg.echo()?;
    let train_set = load_split(cfg, Split::Train)?;
    if train_set.is_empty() {
        return Err(CliError::Data(
            "training dataset is empty: set data.train or data.synthetic_train".into(),
        ));
    }
    let val_set = load_split(cfg, Split::Val)?;
    let classes = cfg.network_config()?.num_classes;
    check_classes(&train_set, classes, "training")?;
    check_classes(&val_set, classes, "validation")?;

    let mut net = build_network(cfg)?;
    let tc = cfg.train_config()?;
    let ck_dir = dir.join(CHECKPOINT_DIR);
    let log_path = dir.join(TRAIN_LOG);
    let mut trainer = if resume {
        let ck = load_checkpoint(ck_dir.join("last.pgck"))?;
        let text = std::fs::read_to_string(&log_path).map_err(io_context(&log_path))?;
        Trainer::resume(tc, &mut net, &ck, TrainingLog::from_csv(&text)?)?
    } else {
        Trainer::new(tc, &net)?
    }
    .with_checkpoints(&ck_dir);

    let parameter_count = net.parameter_count();
    if verbose {
        eprintln!(
            "network: {parameter_count} parameters; {} training clouds, {} validation clouds",
            train_set.len(),
            val_set.len()
        );
    }
    let total = cfg.train_config()?.epochs;
    let val = (!val_set.is_empty()).then_some(&val_set[..]);
    trainer.run_with(&mut net, &train_set, val, |r, t, _| {
        pgseg::io::write_atomic(&log_path, t.log().to_csv().as_bytes())?;
        if verbose {
            let val = match (r.val_oa, r.val_miou) {
                (Some(oa), Some(miou)) => format!(" val_oa {oa:.4} val_miou {miou:.4}"),
                _ => String::new(),
            };
            eprintln!(
                "epoch {}/{total} lr {:.5} loss {:.5} train_oa {:.4}{val}",
                r.epoch, r.lr, r.mean_loss, r.train_oa
            );
        }
        Ok(())
    })?;
    let log = trainer.into_log();
    write_file(&log_path, log.to_csv().as_bytes())?;
    Ok(TrainOutcome {
        parameter_count,
        log,
        checkpoint_dir: ck_dir,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRecord {
    pub checkpoint: String,
    pub clouds: usize,
    pub points: u64,
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "OA    {:.4}", report.oa);
    let _ = writeln!(s, "mAcc  {:.4}", report.macc);
    let _ = writeln!(s, "mIoU  {:.4}", report.miou);
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => {
                let _ = writeln!(s, "IoU[{c}] {v:.4}");
            }
            None => {
                let _ = writeln!(s, "IoU[{c}] n/a");
            }
        }
    }
    s
}

/// Scores a checkpoint on `data` (or the configured test split) and appends
/// a JSON line to `<out>/eval.jsonl`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &[PathBuf]) -> CliResult<EvalReport> {
    if !checkpoint.exists() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let net = load_checkpoint(checkpoint)?.restore()?;
    let clouds = if data.is_empty() {
        load_split(cfg, Split::Test)?
    } else {
        collect_cloud_files(data)?
            .iter()
            .map(|f| read_cloud(f).map_err(CliError::from))
            .collect::<CliResult<Vec<_>>>()?
    };
    if clouds.is_empty() {
        return Err(CliError::Data("evaluation dataset is empty".into()));
    }
    check_classes(&clouds, net.config().num_classes, "evaluation")?;
    let report = evaluate(&net, &clouds, cfg.seed())?;

    let record = EvalRecord {
        checkpoint: checkpoint.display().to_string(),
        clouds: clouds.len(),
        points: report.confusion.total(),
        oa: report.oa,
        macc: report.macc,
        miou: report.miou,
        per_class_iou: report.per_class_iou.clone(),
        per_class_acc: report.per_class_acc.clone(),
        confusion: report.confusion.rows(),
    };
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let path = dir.join(EVAL_LOG);
    let mut bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_context(&path)(e)),
    };
    let line = serde_json::to_string(&record).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(bytes, "{line}").map_err(io_context(&path))?;
    write_file(&path, &bytes)?;
    Ok(report)
}

/// Labels `input` with the network's predictions and writes it to `output`
/// in the input's format.
pub fn segment(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: &Path) -> CliResult<PointCloud> {
    if !checkpoint.exists() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let net = load_checkpoint(checkpoint)?.restore()?;
    let format = detect_format(input)?;
    let cloud = read_cloud(input)?;
    let pred = net.predict(&cloud, cfg.seed())?;
    let labeled = cloud.with_labels(pred)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_cloud(&labeled, output, format)?;
    Ok(labeled)
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub with_fa: TrainOutcome,
    pub without_fa: TrainOutcome,
}

/// Mean training accuracy over the last `n` epochs.
pub fn tail_mean_accuracy(log: &TrainingLog, n: usize) -> f64 {
    let tail = &log.records[log.records.len().saturating_sub(n)..];
    tail.iter().map(|r| r.train_oa).sum::<f64>() / tail.len() as f64
}

/// Population variance of training accuracy over the last `n` epochs.
pub fn tail_accuracy_variance(log: &TrainingLog, n: usize) -> f64 {
    let tail = &log.records[log.records.len().saturating_sub(n)..];
    let mean = tail.iter().map(|r| r.train_oa).sum::<f64>() / tail.len() as f64;
    tail.iter().map(|r| (r.train_oa - mean).powi(2)).sum::<f64>() / tail.len() as f64
}

fn ablation_csv(label: &str, outcome: &TrainOutcome) -> String {
    format!(
        "# feature_augmenter={label} parameters={}\n{}",
        outcome.parameter_count,
        outcome.log.to_csv()
    )
}

/// Two seed-matched trainings that differ only in the feature augmenter.
pub fn ablate(cfg: &RunConfig, svg: bool, verbose: bool) -> CliResult<AblationOutcome> {
    let root = cfg.out_dir();
    create_dir(&root)?;
    cfg.echo()?;
    let run = |fa: bool| -> CliResult<TrainOutcome> {
        let mut c = cfg.clone();
        c.network.feature_augmenter = Some(fa);
        c.out = Some(root.join(if fa { "fa_on" } else { "fa_off" }));
        if verbose {
            eprintln!("ablation run: feature augmenter {}", if fa { "on" } else { "off" });
        }
        train(&c, false, verbose)
    };
    let with_fa = run(true)?;
    let without_fa = run(false)?;

    write_file(&root.join("ablation_fa_on.csv"), ablation_csv("on", &with_fa).as_bytes())?;
    write_file(&root.join("ablation_fa_off.csv"), ablation_csv("off", &without_fa).as_bytes())?;

    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut side = String::from(
        "epoch,fa_on_loss,fa_off_loss,fa_on_train_oa,fa_off_train_oa,fa_on_val_miou,fa_off_val_miou\n",
    );
    let mut dat = format!(
        "# epoch fa_on_train_oa fa_off_train_oa fa_on_loss fa_off_loss\n# parameters: fa_on={} fa_off={}\n",
        with_fa.parameter_count, without_fa.parameter_count
    );
    for (a, b) in with_fa.log.records.iter().zip(&without_fa.log.records) {
        let _ = writeln!(
            side,
            "{},{},{},{},{},{},{}",
            a.epoch,
            a.mean_loss,
            b.mean_loss,
            a.train_oa,
            b.train_oa,
            opt(a.val_miou),
            opt(b.val_miou)
        );
        let _ = writeln!(dat, "{} {} {} {} {}", a.epoch, a.train_oa, b.train_oa, a.mean_loss, b.mean_loss);
    }
    write_file(&root.join("ablation_side_by_side.csv"), side.as_bytes())?;
    write_file(&root.join("ablation.dat"), dat.as_bytes())?;
    if svg {
        let series = |log: &TrainingLog| -> Vec<(f64, f64)> {
            log.records.iter().map(|r| (r.epoch as f64, r.train_oa)).collect()
        };
        let chart = plot::line_chart(
            "Training accuracy with and without feature augmenter",
            "epoch",
            "train OA",
            &[
                ("feature augmenter on", series(&with_fa.log)),
                ("feature augmenter off", series(&without_fa.log)),
            ],
        );
        write_file(&root.join("ablation.svg"), chart.as_bytes())?;
    }
    Ok(AblationOutcome { with_fa, without_fa })
}
