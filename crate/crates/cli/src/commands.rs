//! The five pipeline commands.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use fibresr::data::{
    build_target_domain, extract_input_patches, group_keys, load_frames, split, write_manifest,
    Domain, DomainSources, Frame, FrameRecord, Patch, Role,
};
use fibresr::metrics::{evaluate, EvaluationReport};
use fibresr::models::Checkpoint;
use fibresr::phantom::synthesize_corpus;
use fibresr::trainer::{load_generator, TrainData, TrainSummary, Trainer};
use fibresr::{seed, Error, FibreLayout, Image, NoiseModel, Result};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::RunManifest;

pub const LAYOUT_FILE: &str = "layout.json";
pub const DATA_MANIFEST: &str = "manifest.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Sorted `*.png` files of a directory.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes HR phantoms, their synthetic LR frames, the fibre layout and a
/// frame manifest into `out`.
pub fn synth(config: &RunConfig, out: &Path) -> Result<RunManifest> {
    let corpus = synthesize_corpus(&config.corpus(), config.seed)?;
    let (hr_dir, lr_dir) = (out.join("hr"), out.join("lr"));
    create_dir(&hr_dir)?;
    create_dir(&lr_dir)?;
    let eight = config.synth.eight_bit;
    let mut records = Vec::new();
    for (role, frames, sub) in [
        (Role::InputLr, &corpus.lr, "lr"),
        (Role::EstimatedHr, &corpus.hr, "hr"),
    ] {
        for f in frames {
            let rel = format!("{sub}/{}.png", f.id);
            f.image.save_png(out.join(&rel), eight)?;
            records.push(FrameRecord {
                path: rel,
                video_id: f.video_id.clone(),
                patient_id: f.patient_id.clone(),
                setting: f.setting.clone(),
                role,
            });
        }
    }
    corpus.layout.save(out.join(LAYOUT_FILE))?;
    write_manifest(out.join(DATA_MANIFEST), &records)?;
    info!(
        "wrote {} HR/LR pairs with {} fibres to {}",
        corpus.hr.len(),
        corpus.layout.fibre_count(),
        out.display()
    );
    let mut m = RunManifest::new("synth", config);
    for s in ["layout", "noise", "frame"] {
        m.seed(s);
    }
    m.collect_outputs(out)?;
    m.write(out)?;
    Ok(m)
}

/// Split assignment written next to the training outputs.
#[derive(Debug, Serialize)]
struct SplitRecord {
    mode: String,
    train: BTreeSet<String>,
    validation: BTreeSet<String>,
    test: BTreeSet<String>,
    warnings: Vec<String>,
    input_patches: [usize; 3],
    target_patches: usize,
}

fn load_natural(dir: &Path) -> Result<Vec<Frame>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let id = stem(p);
            Frame::new(&id, Image::load_png(p)?, &id, &id, None, Role::Natural)
        })
        .collect()
}

fn target_pool(
    config: &RunConfig,
    hr_train: &[Frame],
    lr_train: &[Frame],
    layout: &FibreLayout,
) -> Result<Vec<Patch>> {
    let (ps, cov) = (config.data.patch_size, config.data.fov_coverage);
    let frames: Vec<Frame>;
    let (source, noise) = match config.data.target_domain {
        Domain::Orig | Domain::Syn => (hr_train, true),
        Domain::Res => (lr_train, false),
        Domain::Nat => {
            let dir = config.data.natural_dir.as_ref().ok_or_else(|| {
                Error::Config("the nat target domain needs data.natural_dir".into())
            })?;
            frames = load_natural(dir)?;
            (&frames[..], false)
        }
        Domain::Lr => return Err(Error::Config("lr is not a target domain".into())),
    };
    let mut model =
        NoiseModel::from_params(config.noise, seed::derive(config.seed, "syn-noise", 0))?;
    let ds = build_target_domain(
        config.data.target_domain,
        DomainSources {
            frames: source,
            layout: Some(layout),
            noise: noise.then_some(&mut model),
        },
        ps,
        cov,
    )?;
    if ds.is_empty() {
        return Err(Error::Data(format!(
            "the {} target domain produced no {ps}x{ps} patches",
            config.data.target_domain
        )));
    }
    Ok(ds.patches)
}

/// Trains on a directory written by [`synth`] (or laid out the same way).
pub fn train(
    config: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(TrainSummary, RunManifest)> {
    let manifest_path = data_dir.join(DATA_MANIFEST);
    let layout_path = data_dir.join(LAYOUT_FILE);
    for p in [&manifest_path, &layout_path] {
        if !p.is_file() {
            return Err(Error::Data(format!("missing dataset file {}", p.display())));
        }
    }
    let frames = load_frames(&manifest_path)?;
    let layout = FibreLayout::load(&layout_path)?;
    let (lr_frames, hr_frames): (Vec<Frame>, Vec<Frame>) = frames
        .into_iter()
        .filter(|f| matches!(f.role, Role::InputLr | Role::EstimatedHr))
        .partition(|f| f.role == Role::InputLr);
    if lr_frames.is_empty() {
        return Err(Error::Data("the dataset has no input-lr frames".into()));
    }
    let (ps, cov) = (config.data.patch_size, config.data.fov_coverage);
    let mut inputs = Vec::new();
    for f in &lr_frames {
        inputs.extend(extract_input_patches(f, &layout, ps, cov)?);
    }
    let mode = config.data.split;
    let splits = split(&inputs, mode, config.data.fractions, config.seed)?;
    if splits.train.is_empty() || splits.validation.is_empty() {
        return Err(Error::Data(format!(
            "{} input patches are too few for a train/validation split",
            inputs.len()
        )));
    }
    let train_keys = group_keys(&splits.train, mode);
    let in_train = |f: &&Frame| train_keys.contains(mode.key(*f));
    let hr_train: Vec<Frame> = hr_frames.iter().filter(in_train).cloned().collect();
    let lr_train: Vec<Frame> = lr_frames.iter().filter(in_train).cloned().collect();
    let target = target_pool(config, &hr_train, &lr_train, &layout)?;

    create_dir(out)?;
    let record = SplitRecord {
        mode: format!("{mode:?}").to_lowercase(),
        train: train_keys.clone(),
        validation: group_keys(&splits.validation, mode),
        test: group_keys(&splits.test, mode),
        warnings: splits.warnings.clone(),
        input_patches: [
            splits.train.len(),
            splits.validation.len(),
            splits.test.len(),
        ],
        target_patches: target.len(),
    };
    let split_path = out.join("split.json");
    std::fs::write(&split_path, serde_json::to_string_pretty(&record)? + "\n")
        .map_err(|e| Error::io(&split_path, e))?;
    info!(
        "{} train / {} validation input patches, {} {} target patches",
        splits.train.len(),
        splits.validation.len(),
        target.len(),
        config.data.target_domain
    );

    let mut trainer = match resume {
        Some(stem) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(stem)?)?;
            if t.config().seed != config.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, config has {}",
                    t.config().seed,
                    config.seed
                )));
            }
            t.set_max_iterations(config.training.max_iterations);
            t
        }
        None => Trainer::new(
            config.training.clone(),
            config.generator.clone(),
            config.discriminator.clone(),
        )?,
    };
    let summary = trainer.run(
        TrainData {
            train: &splits.train,
            validation: &splits.validation,
            target: &target,
        },
        out,
        |row| {
            if (row.iteration + 1) % 50 == 0 {
                info!(
                    "iteration {} l_vec {:.5} l_adv {:.4} l_reg {:.5} d_loss {:.4}",
                    row.iteration + 1,
                    row.losses.l_vec,
                    row.losses.l_adv,
                    row.losses.l_reg,
                    row.d_loss
                );
            }
        },
    )?;

    let mut m = RunManifest::new("train", config);
    for s in ["init-generator", "init-discriminator", "syn-noise"] {
        m.seed(s);
    }
    m.argument("data", data_dir.display());
    if let Some(r) = resume {
        m.argument("resume", r.display());
    }
    let t = &config.training;
    if t.max_iterations < 50_000 {
        m.deviations.push(format!(
            "max_iterations {} (published runs: 50000-80000)",
            t.max_iterations
        ));
    }
    if t.batch_size != 54 {
        m.deviations
            .push(format!("batch_size {} (published: 54)", t.batch_size));
    }
    let mut data_files = vec![manifest_path.clone(), layout_path.clone()];
    data_files.extend(
        fibresr::data::read_manifest(&manifest_path)?
            .into_iter()
            .map(|r| data_dir.join(r.path)),
    );
    m.add_inputs("data", data_dir, &data_files)?;
    if let Some(r) = resume {
        let (j, b) = Checkpoint::paths(r);
        let root = r.parent().unwrap_or(Path::new(""));
        m.add_inputs("resume", root, &[j, b])?;
    }
    m.collect_outputs(out)?;
    m.write(out)?;
    Ok((summary, m))
}

/// Expands directories to their PNG files; plain files pass through.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(png_files(p)?);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::Data(format!("no such input {}", p.display())));
        }
    }
    Ok(out)
}

/// Full-size super-resolution of each input into `out`, keeping file names.
pub fn infer(
    config: &RunConfig,
    checkpoint: &Path,
    inputs: &[PathBuf],
    out: &Path,
) -> Result<RunManifest> {
    let files = expand_inputs(inputs)?;
    if files.is_empty() {
        return Err(Error::Data("no input images".into()));
    }
    let mut names = BTreeSet::new();
    for f in &files {
        let name = f.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        if !names.insert(name.clone()) {
            return Err(Error::Data(format!(
                "two inputs share the file name {}",
                name.to_string_lossy()
            )));
        }
    }
    let mut generator = load_generator(checkpoint)?;
    create_dir(out)?;
    for f in &files {
        let sr = generator.infer_image(&Image::load_png(f)?)?;
        let target = out.join(f.file_name().expect("file has a name"));
        sr.save_png(&target, config.synth.eight_bit)?;
        info!("{} -> {}", f.display(), target.display());
    }
    let mut m = RunManifest::new("infer", config);
    m.argument("checkpoint", checkpoint.display());
    let (j, b) = Checkpoint::paths(checkpoint);
    let root = checkpoint.parent().unwrap_or(Path::new(""));
    m.add_inputs("checkpoint", root, &[j, b])?;
    for f in &files {
        let root = f.parent().unwrap_or(Path::new(""));
        m.add_inputs("image", root, std::slice::from_ref(f))?;
    }
    m.collect_outputs(out)?;
    m.write(out)?;
    Ok(m)
}

fn load_dir(dir: &Path) -> Result<BTreeMap<String, Image>> {
    png_files(dir)?
        .into_iter()
        .map(|p| Ok((stem(&p), Image::load_png(&p)?)))
        .collect()
}

/// Metric report over SR/HR/LR triples matched by file name.
pub fn eval(
    config: &RunConfig,
    sr: &Path,
    hr: &Path,
    lr: &Path,
    out: &Path,
) -> Result<(EvaluationReport, RunManifest)> {
    let (s, h, l) = (load_dir(sr)?, load_dir(hr)?, load_dir(lr)?);
    let report = evaluate(&s, &h, &l)?;
    report.write(out, config.metrics.plots)?;
    let mut m = RunManifest::new("eval", config);
    for (label, dir) in [("sr", sr), ("hr", hr), ("lr", lr)] {
        m.argument(label, dir.display());
        m.add_inputs(label, dir, &png_files(dir)?)?;
    }
    m.collect_outputs(out)?;
    m.write(out)?;
    Ok((report, m))
}

fn summarise_training(dir: &Path) -> Result<String> {
    let read = |name: &str| -> Result<Vec<Vec<f64>>> {
        let p = dir.join(name);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Data(format!("{}: {e}", p.display())))
                    })
                    .collect()
            })
            .collect()
    };
    let log = read("log.csv")?;
    let mut s = format!("training run {}\n", dir.display());
    s += &format!("  iterations logged: {}\n", log.len());
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        s += &format!("  {:<8} {:>12} {:>12}\n", "term", "first", "last");
        for (i, name) in ["l_vec", "l_adv", "l_reg", "total", "d_loss"]
            .iter()
            .enumerate()
        {
            s += &format!(
                "  {:<8} {:>12.6} {:>12.6}\n",
                name,
                first[i + 1],
                last[i + 1]
            );
        }
    }
    if dir.join("validation.csv").is_file() {
        let v = read("validation.csv")?;
        if let (Some(first), Some(best)) =
            (v.first(), v.iter().min_by(|a, b| a[1].total_cmp(&b[1])))
        {
            s += &format!(
                "  validation l_vec: initial {:.6}, best {:.6} at iteration {}\n",
                first[1], best[1], best[0] as usize
            );
        }
    }
    Ok(s)
}

/// Human-readable summary of training runs and evaluation reports.
pub fn report(paths: &[PathBuf]) -> Result<String> {
    let mut out = String::new();
    for p in paths {
        let mut found = false;
        if p.join("log.csv").is_file() {
            out += &summarise_training(p)?;
            found = true;
        }
        let csv = if p.is_file() {
            p.clone()
        } else {
            p.join("report.csv")
        };
        if csv.is_file() && csv.extension().and_then(|e| e.to_str()) == Some("csv") {
            let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
            let r = EvaluationReport::from_csv(&text)?;
            out += &format!("evaluation {}\n{}", csv.display(), r.text_table());
            found = true;
        }
        if !found {
            return Err(Error::Data(format!(
                "{} holds neither a training log nor an evaluation report",
                p.display()
            )));
        }
        out.push('\n');
    }
    Ok(out)
}
