use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use cor_core::chain::{run_cor, CoRConfig, CoRTrace, Discriminator, DiscriminatorSource, Termination};
use cor_core::complexity::{emit_curves, CurveRow};
use cor_core::discriminator::{
    accuracy, blind_classes, non_blind_classes, synthesize_training_set, train_features, ClassifierModel, DdMode,
};
use cor_core::image::{load_png, save_png};
use cor_core::metrics::{psnr, ssim};
use cor_core::restorers::{RestorerMode, RestorerRegistry};
use cor_core::seed;
use cor_core::synthesis::{build_dataset, category_dir, Manifest, ManifestEntry, SynthesisRecord, MANIFEST_FILE};
use cor_core::{DegradationLabel, Image};

use crate::config::RunConfig;
use crate::report::{mean, write_csv};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn registry(cfg: &RunConfig) -> Result<RestorerRegistry> {
    Ok(RestorerRegistry::new(cfg.registry.mode, cfg.registry.basis_set())?
        .with_params(cfg.registry.classical.clone()))
}

/// Loads the configured model when the trained discriminator is selected.
pub fn load_model(cfg: &RunConfig) -> Result<Option<ClassifierModel>> {
    if cfg.cor.discriminator == DiscriminatorSource::Oracle {
        return Ok(None);
    }
    let path = cfg
        .discriminator
        .model
        .as_ref()
        .ok_or_else(|| anyhow!("the trained discriminator needs a model (discriminator.model or --model)"))?;
    let model = ClassifierModel::load(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(Some(model))
}

fn discriminator<'a>(model: Option<&'a ClassifierModel>) -> Discriminator<'a> {
    model.map_or(Discriminator::Oracle, Discriminator::Trained)
}

fn needs_context(cfg: &RunConfig) -> bool {
    cfg.registry.mode == RestorerMode::Oracle || cfg.cor.discriminator == DiscriminatorSource::Oracle
}

fn cor_config(cfg: &RunConfig, key: &str) -> CoRConfig {
    CoRConfig {
        seed: seed::derive_str(seed::derive(cfg.seed, cfg.cor.seed), key),
        ..cfg.cor.clone()
    }
}

/// `synth`: writes the dataset, its manifest and a config snapshot.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    create_dir(out)?;
    cfg.snapshot(out)?;
    let d = &cfg.dataset;
    Ok(build_dataset(out, &d.categories, d.per_category, cfg.seed, &d.synthesis, &d.source)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub classes: Vec<String>,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub model: PathBuf,
}

/// `train-dd`: synthesizes labelled patches, fits the classifier and writes
/// `model.json`, `train_log.csv` and `train_summary.json`.
pub fn cmd_train_dd(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    cfg.snapshot(out)?;
    let classes = match cfg.cor.mode {
        DdMode::NonBlind => non_blind_classes(&cfg.registry.basis_set()),
        DdMode::Blind => blind_classes(),
    };
    let split = synthesize_training_set(
        &classes,
        &cfg.dataset.categories,
        &cfg.dataset.synthesis,
        &cfg.discriminator.training_set,
        seed::derive_str(cfg.seed, "train-dd"),
    )?;
    let (model, log) = train_features(&split.train, classes, &cfg.discriminator.training)?;

    let model_path = out.join("model.json");
    model.save(&model_path)?;
    write_csv(out.join("train_log.csv"), log.iter().copied())?;
    let summary = TrainSummary {
        classes: model.class_labels.iter().map(|c| c.to_string()).collect(),
        train_samples: split.train.len(),
        holdout_samples: split.holdout.len(),
        train_accuracy: accuracy(&model, &split.train),
        holdout_accuracy: accuracy(&model, &split.holdout),
        model: model_path,
    };
    fs::write(out.join("train_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub input: PathBuf,
    pub output: PathBuf,
    pub restorations: usize,
    pub termination: Termination,
    pub choices: Vec<String>,
    pub psnr: Option<f64>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn manifest_entry<'m>(manifest: &'m Manifest, root: &Path, input: &Path) -> Option<&'m ManifestEntry> {
    let relative = input
        .canonicalize()
        .ok()
        .zip(root.canonicalize().ok())
        .and_then(|(i, r)| i.strip_prefix(r).ok().map(|p| p.to_string_lossy().replace('\\', "/")));
    let parent_and_name = input
        .parent()
        .and_then(Path::file_name)
        .zip(input.file_name())
        .map(|(p, f)| format!("{}/{}", p.to_string_lossy(), f.to_string_lossy()));
    [relative, parent_and_name]
        .into_iter()
        .flatten()
        .find_map(|key| manifest.entries.iter().find(|e| e.degraded == key))
}

/// `run`: restores one PNG or every PNG in a directory, writing the restored
/// image and its trace (plus a step strip with `dump_steps`) into `out`.
pub fn cmd_run(cfg: &RunConfig, input: &Path, out: &Path, dump_steps: bool) -> Result<Vec<RunReport>> {
    let manifest = match &cfg.dataset.manifest {
        Some(p) => Some((Manifest::load(p).with_context(|| format!("loading manifest {}", p.display()))?, p.clone())),
        None if needs_context(cfg) => bail!("oracle mode requires --manifest"),
        None => None,
    };
    let registry = registry(cfg)?;
    let model = load_model(cfg)?;
    let inputs = if input.is_dir() { png_files(input)? } else { vec![input.to_path_buf()] };
    if inputs.is_empty() {
        bail!("no PNG inputs under {}", input.display());
    }
    create_dir(out)?;
    cfg.snapshot(out)?;

    inputs
        .par_iter()
        .map(|path| {
            let stem = path
                .file_stem()
                .ok_or_else(|| anyhow!("input {} has no file name", path.display()))?
                .to_string_lossy()
                .into_owned();
            let img = load_png(path)?;
            let (record, clean) = match &manifest {
                Some((m, mpath)) => {
                    let root = mpath.parent().unwrap_or(Path::new("."));
                    match manifest_entry(m, root, path) {
                        Some(e) => (Some(e.record.clone()), Some(load_png(root.join(&e.clean))?)),
                        None if needs_context(cfg) => {
                            bail!("{} is not listed in the manifest", path.display())
                        }
                        None => (None, None),
                    }
                }
                None => (None, None),
            };
            let context = if needs_context(cfg) { record.as_ref() } else { None };
            let result = run_cor(
                &img,
                &registry,
                discriminator(model.as_ref()),
                &cor_config(cfg, &stem),
                context,
                clean.as_ref(),
            )
            .with_context(|| format!("restoring {}", path.display()))?;

            let output = out.join(format!("{stem}.png"));
            save_png(&result.image, &output)?;
            fs::write(
                out.join(format!("{stem}.trace.json")),
                serde_json::to_string_pretty(&result.trace)? + "\n",
            )?;
            if dump_steps {
                let dir = out.join(format!("{stem}_steps"));
                create_dir(&dir)?;
                for (i, step) in result.intermediates.iter().enumerate() {
                    save_png(step, dir.join(format!("step_{i:02}.png")))?;
                }
            }
            Ok(RunReport {
                input: path.clone(),
                output,
                restorations: result.trace.restorations(),
                termination: result.trace.termination,
                choices: choices(&result.trace),
                psnr: clean.as_ref().map(|c| psnr(&result.image.quantized(), c)).transpose()?,
            })
        })
        .collect()
}

fn choices(trace: &CoRTrace) -> Vec<String> {
    trace.steps.iter().take(trace.restorations()).map(|s| s.choice.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub category: String,
    pub psnr_input: f64,
    pub ssim_input: f64,
    pub psnr_single_pass: f64,
    pub psnr_cor: f64,
    pub ssim_cor: f64,
    pub mean_steps: f64,
}

struct EvalItem {
    key: String,
    degraded: Image,
    clean: Image,
    record: SynthesisRecord,
}

struct ImageScore {
    psnr_input: f64,
    ssim_input: f64,
    single: Vec<f64>,
    psnr_cor: f64,
    ssim_cor: f64,
    steps: usize,
}

fn eval_items(manifest: &Manifest, root: &Path, category: &str) -> Result<Vec<EvalItem>> {
    if category == "clean" {
        let mut refs: Vec<&str> = manifest.entries.iter().map(|e| e.clean.as_str()).collect();
        refs.sort_unstable();
        refs.dedup();
        return refs
            .into_iter()
            .map(|r| {
                let img = load_png(root.join(r))?;
                Ok(EvalItem {
                    key: r.to_string(),
                    degraded: img.clone(),
                    clean: img,
                    record: SynthesisRecord {
                        clean_ref: r.to_string(),
                        applied: Vec::new(),
                    },
                })
            })
            .collect();
    }
    let label: Option<DegradationLabel> = category.parse().ok();
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| category_dir(&e.label) == category || label.as_ref().is_some_and(|l| e.label.equals(l)))
        .collect();
    if entries.is_empty() {
        bail!("category `{category}` has no images in the manifest");
    }
    entries
        .into_iter()
        .map(|e| {
            Ok(EvalItem {
                key: e.degraded.clone(),
                degraded: load_png(root.join(&e.degraded))?,
                clean: load_png(root.join(&e.clean))?,
                record: e.record.clone(),
            })
        })
        .collect()
}

fn eval_categories(cfg: &RunConfig, manifest: &Manifest) -> Vec<String> {
    if !cfg.eval.categories.is_empty() {
        return cfg.eval.categories.clone();
    }
    let mut seen = Vec::new();
    for e in &manifest.entries {
        let dir = category_dir(&e.label);
        if !seen.contains(&dir) {
            seen.push(dir);
        }
    }
    seen
}

/// `eval`: per-category PSNR/SSIM of the input, the best single restorer and
/// the loop, written to `eval.csv` with a trailing mean row.
pub fn cmd_eval(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<Vec<EvalRow>> {
    let manifest_path = cfg.dataset.manifest.clone().unwrap_or_else(|| dataset.join(MANIFEST_FILE));
    let manifest =
        Manifest::load(&manifest_path).with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    let registry = registry(cfg)?;
    let model = load_model(cfg)?;
    let bases: Vec<DegradationLabel> = registry.bases().iter().cloned().collect();
    let with_context = needs_context(cfg);
    create_dir(out)?;
    cfg.snapshot(out)?;

    let mut rows = Vec::new();
    for category in eval_categories(cfg, &manifest) {
        let items = eval_items(&manifest, dataset, &category)?;
        let scores: Vec<ImageScore> = items
            .par_iter()
            .map(|it| {
                let context = with_context.then_some(&it.record);
                let single = bases
                    .iter()
                    .map(|b| Ok(psnr(&registry.restore(&it.degraded, b, context)?.quantized(), &it.clean)?))
                    .collect::<Result<Vec<f64>>>()?;
                let result = run_cor(
                    &it.degraded,
                    &registry,
                    discriminator(model.as_ref()),
                    &cor_config(cfg, &it.key),
                    context,
                    None,
                )
                .with_context(|| format!("restoring {}", it.key))?;
                let restored = result.image.quantized();
                Ok(ImageScore {
                    psnr_input: psnr(&it.degraded, &it.clean)?,
                    ssim_input: ssim(&it.degraded, &it.clean)?,
                    single,
                    psnr_cor: psnr(&restored, &it.clean)?,
                    ssim_cor: ssim(&restored, &it.clean)?,
                    steps: result.trace.restorations(),
                })
            })
            .collect::<Result<_>>()?;
        let best_single = (0..bases.len())
            .map(|j| mean(scores.iter().map(|s| s.single[j])))
            .fold(f64::NEG_INFINITY, f64::max);
        rows.push(EvalRow {
            category,
            psnr_input: mean(scores.iter().map(|s| s.psnr_input)),
            ssim_input: mean(scores.iter().map(|s| s.ssim_input)),
            psnr_single_pass: best_single,
            psnr_cor: mean(scores.iter().map(|s| s.psnr_cor)),
            ssim_cor: mean(scores.iter().map(|s| s.ssim_cor)),
            mean_steps: mean(scores.iter().map(|s| s.steps as f64)),
        });
    }
    let mean_row = EvalRow {
        category: "mean".into(),
        psnr_input: mean(rows.iter().map(|r| r.psnr_input)),
        ssim_input: mean(rows.iter().map(|r| r.ssim_input)),
        psnr_single_pass: mean(rows.iter().map(|r| r.psnr_single_pass)),
        psnr_cor: mean(rows.iter().map(|r| r.psnr_cor)),
        ssim_cor: mean(rows.iter().map(|r| r.ssim_cor)),
        mean_steps: mean(rows.iter().map(|r| r.mean_steps)),
    };
    rows.push(mean_row);
    write_csv(out.join("eval.csv"), rows.iter().cloned())?;
    Ok(rows)
}

/// `complexity`: writes `curves.csv` for `k = 1..=n`.
pub fn cmd_complexity(n: u32, out: &Path) -> Result<Vec<CurveRow>> {
    create_dir(out)?;
    Ok(emit_curves(n, out.join("curves.csv"))?)
}
