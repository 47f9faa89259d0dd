//! Discriminator and basis-set ablations on procedurally generated composites.
//!
//! Every setting of a table restores the same seeded images, so the rows
//! differ only in how the next basis is chosen or which bases exist.

use std::path::Path;

use anyhow::Result;
use rayon::prelude::*;
use serde::Serialize;

use cor_core::chain::{run_cor, CoRConfig, Discriminator};
use cor_core::discriminator::{
    accuracy, low_light_offsets, non_blind_classes, synthesize_training_set, train_features, ClassifierModel, DdMode,
    MarginConfig,
};
use cor_core::labels::enumerate_bases;
use cor_core::metrics::{psnr, ssim};
use cor_core::restorers::RestorerRegistry;
use cor_core::seed;
use cor_core::synthesis::{gen_clean, synthesize};
use cor_core::{BasisSet, BasisSymbol, DegradationLabel};

use crate::config::RunConfig;
use crate::report::{mean, write_csv};

pub const MARGIN_TABLE: &str = "margins";
pub const BASIS_TABLE: &str = "bases";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub table: String,
    pub setting: String,
    pub description: String,
    pub label: String,
    pub bases: String,
    pub dd_holdout_accuracy: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub mean_steps: f64,
}

impl AblationRow {
    pub fn find<'a>(rows: &'a [AblationRow], table: &str, setting: &str) -> Option<&'a AblationRow> {
        rows.iter().find(|r| r.table == table && r.setting == setting)
    }
}

fn join_bases(bases: &BasisSet) -> String {
    bases.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(";")
}

fn train_for(cfg: &RunConfig, bases: &BasisSet, tag: &str) -> Result<(ClassifierModel, f64)> {
    let classes = non_blind_classes(bases);
    let split = synthesize_training_set(
        &classes,
        &[],
        &cfg.dataset.synthesis,
        &cfg.discriminator.training_set,
        seed::derive_str(cfg.seed, tag),
    )?;
    let (model, _) = train_features(&split.train, classes, &cfg.discriminator.training)?;
    let acc = accuracy(&model, &split.holdout);
    Ok((model, acc))
}

struct Scores {
    psnr: f64,
    ssim: f64,
    steps: f64,
}

fn score(
    cfg: &RunConfig,
    label: &DegradationLabel,
    registry: &RestorerRegistry,
    dd: Discriminator<'_>,
    margins: MarginConfig,
) -> Result<Scores> {
    let a = &cfg.ablation;
    let stream = seed::derive_str(cfg.seed, &format!("ablation/{}", label.canonical()));
    let per_image: Vec<(f64, f64, f64)> = (0..a.images as u64)
        .into_par_iter()
        .map(|i| {
            let clean = gen_clean(seed::derive(stream, 2 * i), a.image_size, a.image_size)?.quantized();
            let (mut degraded, record) = synthesize(&clean, label, &cfg.dataset.synthesis, seed::derive(stream, 2 * i + 1))?;
            if a.quantize_inputs {
                degraded = degraded.quantized();
            }
            let config = CoRConfig {
                margins: Some(margins.clone()),
                mode: DdMode::NonBlind,
                seed: seed::derive(stream, i),
                ..cfg.cor.clone()
            };
            let out = run_cor(&degraded, registry, dd, &config, Some(&record), None)?;
            let restored = out.image.quantized();
            Ok((
                psnr(&restored, &clean)?.min(a.psnr_cap),
                ssim(&restored, &clean)?,
                out.trace.restorations() as f64,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Scores {
        psnr: mean(per_image.iter().map(|r| r.0)),
        ssim: mean(per_image.iter().map(|r| r.1)),
        steps: mean(per_image.iter().map(|r| r.2)),
    })
}

/// Margin settings: random choice, classifier alone, order offset only,
/// low-light deferral only, and both.
pub fn margin_table(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let a = &cfg.ablation;
    let mut symbols: Vec<BasisSymbol> = a.margin_label.parts().to_vec();
    symbols.sort();
    symbols.dedup();
    let bases = enumerate_bases(&symbols, a.margin_order)?;
    let registry = RestorerRegistry::new(a.restorers, bases.clone())?.with_params(cfg.registry.classical.clone());
    let (model, acc) = train_for(cfg, &bases, "ablation/margins")?;
    let low = low_light_offsets(bases.iter(), a.low_light_epsilon);

    let settings = [
        ("a", "random basis", Discriminator::Random, MarginConfig::zero()),
        ("b", "classifier only", Discriminator::Trained(&model), MarginConfig::zero()),
        ("c", "order margin", Discriminator::Trained(&model), MarginConfig::order_only(a.epsilon_o)),
        (
            "d",
            "basis margin",
            Discriminator::Trained(&model),
            MarginConfig {
                epsilon_o: 0.0,
                epsilon_b: low.clone(),
            },
        ),
        (
            "e",
            "both margins",
            Discriminator::Trained(&model),
            MarginConfig {
                epsilon_o: a.epsilon_o,
                epsilon_b: low.clone(),
            },
        ),
    ];
    settings
        .into_iter()
        .map(|(name, description, dd, margins)| {
            let s = score(cfg, &a.margin_label, &registry, dd, margins)?;
            Ok(AblationRow {
                table: MARGIN_TABLE.into(),
                setting: name.into(),
                description: description.into(),
                label: a.margin_label.to_string(),
                bases: join_bases(&bases),
                dd_holdout_accuracy: matches!(dd, Discriminator::Trained(_)).then_some(acc),
                psnr: s.psnr,
                ssim: s.ssim,
                mean_steps: s.steps,
            })
        })
        .collect()
}

/// One row per configured basis set, each with its own trained classifier
/// and the default margins.
pub fn basis_table(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let a = &cfg.ablation;
    a.basis_sets
        .iter()
        .map(|set| {
            let bases = BasisSet::new(set.bases.iter().cloned());
            let registry =
                RestorerRegistry::new(a.restorers, bases.clone())?.with_params(cfg.registry.classical.clone());
            let (model, acc) = train_for(cfg, &bases, &format!("ablation/bases/{}", set.name))?;
            let margins = MarginConfig {
                epsilon_o: a.epsilon_o,
                epsilon_b: low_light_offsets(bases.iter(), a.low_light_epsilon),
            };
            let s = score(cfg, &a.basis_label, &registry, Discriminator::Trained(&model), margins)?;
            Ok(AblationRow {
                table: BASIS_TABLE.into(),
                setting: set.name.clone(),
                description: format!("{} bases, max order {}", bases.len(), bases.max_order()),
                label: a.basis_label.to_string(),
                bases: join_bases(&bases),
                dd_holdout_accuracy: Some(acc),
                psnr: s.psnr,
                ssim: s.ssim,
                mean_steps: s.steps,
            })
        })
        .collect()
}

/// `ablate`: both tables, written to `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out)?;
    cfg.snapshot(out)?;
    let mut rows = margin_table(cfg)?;
    rows.extend(basis_table(cfg)?);
    write_csv(out.join("ablation.csv"), rows.iter().cloned())?;
    Ok(rows)
}
