//! Degradation discriminator: patch features, a softmax classifier, patch
//! voting and soft-margin basis selection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CorError, Result};
use crate::filters;
use crate::image::{random_crop, Image};
use crate::labels::{BasisSet, BasisSymbol, DegradationLabel};
use crate::seed;
use crate::synthesis::{gen_clean, synthesize, SynthesisConfig};

pub const FEATURE_COUNT: usize = 8;
pub const MIN_PATCH: usize = 16;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "mean_luma",
    "luma_std",
    "dark_channel_mean",
    "laplacian_energy",
    "horizontal_gradient_share",
    "diagonal_anisotropy",
    "saturation",
    "luma_entropy",
];

pub type FeatureVector = [f64; FEATURE_COUNT];

const DARK_RADIUS: usize = 3;
const ENTROPY_BINS: usize = 32;

/// The eight patch statistics, computed on the clamped patch.
///
/// The gradient share is `E[gx^2] / (E[gx^2] + E[gy^2])`: near 1 for
/// vertical structure (rain), 0.5 for isotropic content. Diagonal anisotropy
/// is the absolute normalized difference of the two diagonal gradient
/// energies, so streaks slanted either way score alike.
pub fn extract_features(patch: &Image) -> Result<FeatureVector> {
    let (h, w) = (patch.height(), patch.width());
    if h < MIN_PATCH || w < MIN_PATCH {
        return Err(CorError::InvalidArgument(format!(
            "feature patches need at least {MIN_PATCH}x{MIN_PATCH}, got {h}x{w}"
        )));
    }
    let x = patch.clamped();
    let luma = x.luma();
    let n = luma.len() as f64;

    let mean = luma.iter().sum::<f64>() / n;
    // shifted by the first sample so a constant patch yields exactly zero
    let shift = luma[0];
    let shifted_mean = luma.iter().map(|v| v - shift).sum::<f64>() / n;
    let std = (luma.iter().map(|v| (v - shift - shifted_mean).powi(2)).sum::<f64>() / n).sqrt();

    let dark = filters::dark_channel(&x, DARK_RADIUS);
    let dark_mean = dark.iter().sum::<f64>() / n;

    let (mut lap, mut gx2, mut gy2, mut d1, mut d2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let at = |y: usize, x: usize| luma[y * w + x];
    for y in 1..h - 1 {
        for xx in 1..w - 1 {
            let c = at(y, xx);
            let l = at(y - 1, xx) + at(y + 1, xx) + at(y, xx - 1) + at(y, xx + 1) - 4.0 * c;
            lap += l * l;
            let gx = at(y, xx + 1) - at(y, xx - 1);
            let gy = at(y + 1, xx) - at(y - 1, xx);
            gx2 += gx * gx;
            gy2 += gy * gy;
            let a = at(y + 1, xx + 1) - at(y - 1, xx - 1);
            let b = at(y + 1, xx - 1) - at(y - 1, xx + 1);
            d1 += a * a;
            d2 += b * b;
        }
    }
    let interior = ((h - 2) * (w - 2)) as f64;
    let lap_energy = lap / interior;
    let grad_share = if gx2 + gy2 > 0.0 { gx2 / (gx2 + gy2) } else { 0.5 };
    let diag = if d1 + d2 > 0.0 { (d1 - d2).abs() / (d1 + d2) } else { 0.0 };

    let saturation = x
        .data()
        .chunks_exact(x.channels())
        .map(|px| {
            let (lo, hi) = px
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .sum::<f64>()
        / n;

    let mut hist = [0usize; ENTROPY_BINS];
    for v in &luma {
        hist[((v * ENTROPY_BINS as f64) as usize).min(ENTROPY_BINS - 1)] += 1;
    }
    let entropy = -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>();

    Ok([mean, std, dark_mean, lap_energy, grad_share, diag, saturation, entropy])
}

/// A class of the discriminator: a basis, the blind "degraded" class, or the
/// terminal clean class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ClassLabel {
    Basis(DegradationLabel),
    Degraded,
    Clean,
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Basis(l) => write!(f, "{l}"),
            ClassLabel::Degraded => f.write_str("degraded"),
            ClassLabel::Clean => f.write_str("clean"),
        }
    }
}

impl FromStr for ClassLabel {
    type Err = CorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "clean" => ClassLabel::Clean,
            "degraded" => ClassLabel::Degraded,
            other => ClassLabel::Basis(other.parse()?),
        })
    }
}

impl TryFrom<String> for ClassLabel {
    type Error = CorError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ClassLabel> for String {
    fn from(c: ClassLabel) -> String {
        c.to_string()
    }
}

/// Class list of a non-blind model over `bases`: bases in set order, then clean.
pub fn non_blind_classes(bases: &BasisSet) -> Vec<ClassLabel> {
    bases
        .iter()
        .cloned()
        .map(ClassLabel::Basis)
        .chain(std::iter::once(ClassLabel::Clean))
        .collect()
}

pub fn blind_classes() -> Vec<ClassLabel> {
    vec![ClassLabel::Degraded, ClassLabel::Clean]
}

/// Multinomial logistic regression over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierModel {
    pub class_labels: Vec<ClassLabel>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    /// `classes x FEATURE_COUNT`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ClassifierModel {
    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.n_classes();
        let ok = k >= 2
            && self.class_labels.last() == Some(&ClassLabel::Clean)
            && self.feature_means.len() == FEATURE_COUNT
            && self.feature_stds.len() == FEATURE_COUNT
            && self.weights.len() == k * FEATURE_COUNT
            && self.biases.len() == k;
        if ok {
            Ok(())
        } else {
            Err(CorError::InvalidArgument(
                "malformed classifier model: shapes disagree or clean is not the last class".into(),
            ))
        }
    }

    pub fn is_blind(&self) -> bool {
        self.class_labels == blind_classes()
    }

    /// Basis labels of the non-clean classes, in class order.
    pub fn basis_labels(&self) -> Vec<DegradationLabel> {
        self.class_labels
            .iter()
            .filter_map(|c| match c {
                ClassLabel::Basis(l) => Some(l.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CorError::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| CorError::io(path, e))
    }

    fn standardize(&self, f: &FeatureVector) -> FeatureVector {
        let mut z = [0.0; FEATURE_COUNT];
        for j in 0..FEATURE_COUNT {
            z[j] = (f[j] - self.feature_means[j]) / self.feature_stds[j];
        }
        z
    }

    pub fn logits(&self, f: &FeatureVector) -> Vec<f64> {
        let z = self.standardize(f);
        (0..self.n_classes())
            .map(|k| {
                let row = &self.weights[k * FEATURE_COUNT..(k + 1) * FEATURE_COUNT];
                self.biases[k] + row.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    pub fn probs(&self, f: &FeatureVector) -> Vec<f64> {
        softmax(&self.logits(f))
    }

    pub fn predict(&self, f: &FeatureVector) -> usize {
        argmax(&self.logits(f))
    }

    /// The same model with classes reordered: class `i` of the result is class
    /// `perm[i]` of `self`. Clean must stay last.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.n_classes();
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(CorError::InvalidArgument("not a permutation of the class indices".into()));
        }
        let model = Self {
            class_labels: perm.iter().map(|&p| self.class_labels[p].clone()).collect(),
            feature_means: self.feature_means.clone(),
            feature_stds: self.feature_stds.clone(),
            weights: perm
                .iter()
                .flat_map(|&p| self.weights[p * FEATURE_COUNT..(p + 1) * FEATURE_COUNT].iter().copied())
                .collect(),
            biases: perm.iter().map(|&p| self.biases[p]).collect(),
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            epochs: 3000,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn loss_and_accuracy(model: &ClassifierModel, z: &[FeatureVector], y: &[usize]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, &c) in z.iter().zip(y) {
        let logits = raw_logits(model, x);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        loss += lse - logits[c];
        if argmax(&logits) == c {
            correct += 1;
        }
    }
    (loss / z.len() as f64, correct as f64 / z.len() as f64)
}

/// Logits on already standardized features.
fn raw_logits(model: &ClassifierModel, z: &FeatureVector) -> Vec<f64> {
    (0..model.n_classes())
        .map(|k| {
            let row = &model.weights[k * FEATURE_COUNT..(k + 1) * FEATURE_COUNT];
            model.biases[k] + row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

/// Trains on precomputed features. Returns the model and one log entry per
/// epoch (full-training-set loss after the epoch).
pub fn train_features(
    samples: &[(FeatureVector, usize)],
    class_labels: Vec<ClassLabel>,
    config: &TrainConfig,
) -> Result<(ClassifierModel, Vec<EpochLog>)> {
    let k = class_labels.len();
    if k < 2 || class_labels.last() != Some(&ClassLabel::Clean) {
        return Err(CorError::InvalidArgument(
            "need at least two classes with clean last".into(),
        ));
    }
    let mut present = vec![false; k];
    for (_, c) in samples {
        if *c >= k {
            return Err(CorError::InvalidArgument(format!("class index {c} out of range")));
        }
        present[*c] = true;
    }
    if let Some(i) = present.iter().position(|p| !p) {
        return Err(CorError::MissingClass(class_labels[i].to_string()));
    }
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(CorError::InvalidArgument(format!("learning rate {} must be positive", config.lr)));
    }

    let n = samples.len() as f64;
    let mut means = [0.0; FEATURE_COUNT];
    for (f, _) in samples {
        for j in 0..FEATURE_COUNT {
            means[j] += f[j] / n;
        }
    }
    let mut stds = [0.0; FEATURE_COUNT];
    for (f, _) in samples {
        for j in 0..FEATURE_COUNT {
            stds[j] += (f[j] - means[j]).powi(2) / n;
        }
    }
    let stds = stds.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });

    let mut model = ClassifierModel {
        class_labels,
        feature_means: means.to_vec(),
        feature_stds: stds.to_vec(),
        weights: vec![0.0; k * FEATURE_COUNT],
        biases: vec![0.0; k],
    };
    let z: Vec<FeatureVector> = samples.iter().map(|(f, _)| model.standardize(f)).collect();
    let y: Vec<usize> = samples.iter().map(|(_, c)| *c).collect();

    let batch = if config.batch == 0 { z.len() } else { config.batch.min(z.len()) };
    let mut order: Vec<usize> = (0..z.len()).collect();
    let mut rng = seed::rng(config.seed);
    let mut log = Vec::with_capacity(config.epochs);
    let mut gw = vec![0.0; k * FEATURE_COUNT];
    let mut gb = vec![0.0; k];

    for epoch in 0..config.epochs {
        if batch < z.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let p = softmax(&raw_logits(&model, &z[i]));
                for c in 0..k {
                    let d = p[c] - if c == y[i] { 1.0 } else { 0.0 };
                    gb[c] += d;
                    for j in 0..FEATURE_COUNT {
                        gw[c * FEATURE_COUNT + j] += d * z[i][j];
                    }
                }
            }
            let scale = config.lr / chunk.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= scale * g;
            }
            for (b, g) in model.biases.iter_mut().zip(&gb) {
                *b -= scale * g;
            }
        }
        let (loss, accuracy) = loss_and_accuracy(&model, &z, &y);
        if !loss.is_finite() {
            return Err(CorError::NonFiniteLoss { epoch, loss });
        }
        log.push(EpochLog { epoch, loss, accuracy });
    }
    Ok((model, log))
}

/// Trains on image patches.
pub fn train(
    samples: &[(Image, usize)],
    class_labels: Vec<ClassLabel>,
    config: &TrainConfig,
) -> Result<(ClassifierModel, Vec<EpochLog>)> {
    let feats = samples
        .par_iter()
        .map(|(p, c)| Ok((extract_features(p)?, *c)))
        .collect::<Result<Vec<_>>>()?;
    train_features(&feats, class_labels, config)
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(model: &ClassifierModel, samples: &[(FeatureVector, usize)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples.iter().filter(|(f, c)| model.predict(f) == *c).count();
    hits as f64 / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchVoting {
    pub patches: usize,
    pub patch_size: usize,
}

impl Default for PatchVoting {
    fn default() -> Self {
        Self {
            patches: 12,
            patch_size: 128,
        }
    }
}

/// Average of the per-patch softmax outputs over `voting.patches` seeded
/// random crops.
pub fn predict_probs(model: &ClassifierModel, img: &Image, voting: &PatchVoting, seed_value: u64) -> Result<Vec<f64>> {
    let n = voting.patches.max(1);
    let mut rng = seed::rng(seed_value);
    let mut acc = vec![0.0; model.n_classes()];
    for _ in 0..n {
        let patch = random_crop(img, voting.patch_size, &mut rng);
        for (a, p) in acc.iter_mut().zip(model.probs(&extract_features(&patch)?)) {
            *a += p;
        }
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Soft margins added to basis probabilities before the argmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    /// Offset per unit of basis order.
    pub epsilon_o: f64,
    /// Per-basis offsets; bases not listed get 0.
    #[serde(default)]
    pub epsilon_b: BTreeMap<DegradationLabel, f64>,
}

pub const DEFAULT_EPSILON_O: f64 = 0.03;
pub const DEFAULT_LOW_LIGHT_EPSILON: f64 = -0.05;

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            epsilon_o: DEFAULT_EPSILON_O,
            epsilon_b: BTreeMap::new(),
        }
    }
}

impl MarginConfig {
    pub fn zero() -> Self {
        Self {
            epsilon_o: 0.0,
            epsilon_b: BTreeMap::new(),
        }
    }

    /// Default order offset plus the low-light deferral offset on every basis
    /// of `bases` that contains low light.
    pub fn defaults_for<'a>(bases: impl IntoIterator<Item = &'a DegradationLabel>) -> Self {
        Self {
            epsilon_o: DEFAULT_EPSILON_O,
            epsilon_b: low_light_offsets(bases, DEFAULT_LOW_LIGHT_EPSILON),
        }
    }

    pub fn order_only(epsilon_o: f64) -> Self {
        Self {
            epsilon_o,
            epsilon_b: BTreeMap::new(),
        }
    }

    pub fn offset(&self, basis: &DegradationLabel) -> f64 {
        self.epsilon_b.get(&basis.canonical()).copied().unwrap_or(0.0)
    }
}

pub fn low_light_offsets<'a>(
    bases: impl IntoIterator<Item = &'a DegradationLabel>,
    value: f64,
) -> BTreeMap<DegradationLabel, f64> {
    bases
        .into_iter()
        .filter(|b| b.contains_symbol(BasisSymbol::Low))
        .map(|b| (b.canonical(), value))
        .collect()
}

/// `v'_i = v_i + order_i * epsilon_o + epsilon_b(basis_i)` for the basis
/// entries; the trailing clean entry passes through unchanged. No
/// renormalization.
pub fn apply_margins(v: &[f64], margins: &MarginConfig, bases: &[DegradationLabel]) -> Result<Vec<f64>> {
    if v.len() != bases.len() + 1 {
        return Err(CorError::DimensionMismatch(format!(
            "{} probabilities for {} bases plus clean",
            v.len(),
            bases.len()
        )));
    }
    let mut out: Vec<f64> = bases
        .iter()
        .zip(v)
        .map(|(b, p)| p + b.order() as f64 * margins.epsilon_o + margins.offset(b))
        .collect();
    out.push(v[bases.len()]);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdMode {
    Blind,
    NonBlind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Clean,
    /// Remove this basis next.
    Continue(DegradationLabel),
    /// Blind verdict: something remains, restorer unspecified.
    Degraded,
}

impl Decision {
    pub fn describe(&self) -> String {
        match self {
            Decision::Clean => "clean".into(),
            Decision::Continue(b) => b.to_string(),
            Decision::Degraded => "degraded".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrimination {
    pub probs: Vec<f64>,
    pub revised: Vec<f64>,
    pub decision: Decision,
}

/// Decision from probabilities already averaged over patches.
pub fn decide(model: &ClassifierModel, probs: Vec<f64>, margins: &MarginConfig, mode: DdMode) -> Result<Discrimination> {
    match mode {
        DdMode::Blind => {
            if !model.is_blind() {
                return Err(CorError::ModeMismatch(format!(
                    "blind mode needs a degraded/clean model, got {} classes",
                    model.n_classes()
                )));
            }
            let decision = if probs[1] > probs[0] { Decision::Clean } else { Decision::Degraded };
            Ok(Discrimination {
                revised: probs.clone(),
                probs,
                decision,
            })
        }
        DdMode::NonBlind => {
            if model.class_labels.contains(&ClassLabel::Degraded) {
                return Err(CorError::ModeMismatch("non-blind mode needs a per-basis model".into()));
            }
            let bases = model.basis_labels();
            let revised = apply_margins(&probs, margins, &bases)?;
            let i = argmax(&revised);
            let decision = if i == bases.len() {
                Decision::Clean
            } else {
                Decision::Continue(bases[i].clone())
            };
            Ok(Discrimination {
                probs,
                revised,
                decision,
            })
        }
    }
}

pub fn discriminate(
    model: &ClassifierModel,
    img: &Image,
    margins: &MarginConfig,
    mode: DdMode,
    voting: &PatchVoting,
    seed_value: u64,
) -> Result<Discrimination> {
    let probs = predict_probs(model, img, voting, seed_value)?;
    decide(model, probs, margins, mode)
}

/// Parameters of a procedurally generated training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSetConfig {
    pub images_per_class: usize,
    pub patches_per_image: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Fraction of source images per class kept out of training.
    pub holdout_fraction: f64,
    /// Quantize degraded images as if stored to PNG.
    pub quantize: bool,
}

impl Default for TrainingSetConfig {
    fn default() -> Self {
        Self {
            images_per_class: 40,
            patches_per_image: 4,
            image_size: 256,
            patch_size: 128,
            holdout_fraction: 0.25,
            quantize: true,
        }
    }
}

/// Labelled feature vectors split into training and held-out parts.
#[derive(Debug, Clone, Default)]
pub struct FeatureSplit {
    pub train: Vec<(FeatureVector, usize)>,
    pub holdout: Vec<(FeatureVector, usize)>,
}

/// Synthesizes a labelled patch set for `classes`. Basis classes degrade a
/// fresh clean image with that basis; the clean class uses the clean image
/// itself; the blind degraded class draws each image's degradation uniformly
/// from `degraded_pool`. Held-out images are disjoint from training images.
pub fn synthesize_training_set(
    classes: &[ClassLabel],
    degraded_pool: &[DegradationLabel],
    synth: &SynthesisConfig,
    set: &TrainingSetConfig,
    seed_value: u64,
) -> Result<FeatureSplit> {
    let holdout_from = ((1.0 - set.holdout_fraction.clamp(0.0, 1.0)) * set.images_per_class as f64).round() as usize;
    let jobs: Vec<(usize, usize)> = (0..classes.len())
        .flat_map(|c| (0..set.images_per_class).map(move |i| (c, i)))
        .collect();
    let per_image = jobs
        .par_iter()
        .map(|&(c, i)| {
            let class_seed = seed::derive_str(seed_value, &classes[c].to_string());
            let img_seed = seed::derive(class_seed, i as u64);
            let clean = gen_clean(seed::derive(img_seed, 1), set.image_size, set.image_size)?;
            let label = match &classes[c] {
                ClassLabel::Basis(b) => Some(b.clone()),
                ClassLabel::Clean => None,
                ClassLabel::Degraded => {
                    if degraded_pool.is_empty() {
                        return Err(CorError::InvalidArgument("blind training needs a degradation pool".into()));
                    }
                    Some(degraded_pool[(seed::derive(img_seed, 2) % degraded_pool.len() as u64) as usize].clone())
                }
            };
            let mut img = match label {
                Some(l) => synthesize(&clean, &l, synth, seed::derive(img_seed, 3))?.0,
                None => clean,
            };
            if set.quantize {
                img = img.quantized();
            }
            let mut rng = seed::rng(seed::derive(img_seed, 4));
            let feats = (0..set.patches_per_image)
                .map(|_| extract_features(&random_crop(&img, set.patch_size, &mut rng)))
                .collect::<Result<Vec<_>>>()?;
            Ok((c, i, feats))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut split = FeatureSplit::default();
    for (c, i, feats) in per_image {
        let dest = if i >= holdout_from { &mut split.holdout } else { &mut split.train };
        dest.extend(feats.into_iter().map(|f| (f, c)));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{apply_haze, apply_noise, Transmission};

    fn l(s: &str) -> DegradationLabel {
        s.parse().unwrap()
    }

    #[test]
    fn constant_patch_features() {
        let f = extract_features(&Image::filled(32, 32, 3, 0.4)).unwrap();
        assert!((f[0] - 0.4).abs() < 1e-12);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[3], 0.0);
        assert_eq!(f[6], 0.0);
        assert_eq!(f[7], 0.0);
        assert!(extract_features(&Image::filled(15, 32, 3, 0.4)).is_err());
    }

    #[test]
    fn noise_raises_laplacian_energy_and_haze_raises_dark_channel() {
        let clean = gen_clean(3, 128, 128).unwrap();
        let fc = extract_features(&clean).unwrap();
        let fn_ = extract_features(&apply_noise(&clean, 25.0, 1)).unwrap();
        assert!(fn_[3] > fc[3]);
        let fh = extract_features(&apply_haze(&clean, 0.9, &Transmission::Uniform { t: 0.5 }).unwrap()).unwrap();
        assert!(fh[2] > fc[2]);
    }

    fn separable() -> Vec<(FeatureVector, usize)> {
        (0..60)
            .map(|i| {
                let c = i % 2;
                let mut f = [0.0; FEATURE_COUNT];
                for (j, v) in f.iter_mut().enumerate() {
                    *v = ((i * 7 + j * 13) % 10) as f64 / 10.0;
                }
                f[0] = if c == 0 { 1.0 + f[1] } else { -1.0 - f[1] };
                (f, c)
            })
            .collect()
    }

    #[test]
    fn separable_data_reaches_full_accuracy() {
        let classes = vec![ClassLabel::Basis(l("h")), ClassLabel::Clean];
        let cfg = TrainConfig {
            epochs: 200,
            batch: 8,
            seed: 1,
            lr: 2e-3,
        };
        let (model, log) = train_features(&separable(), classes.clone(), &cfg).unwrap();
        assert_eq!(accuracy(&model, &separable()), 1.0);
        assert_eq!(log.len(), 200);
        let again = train_features(&separable(), classes, &cfg).unwrap().0;
        assert_eq!(again, model);
    }

    #[test]
    fn full_batch_loss_is_monotone() {
        let classes = vec![ClassLabel::Basis(l("h")), ClassLabel::Clean];
        let cfg = TrainConfig {
            epochs: 100,
            batch: 0,
            seed: 0,
            lr: 2e-3,
        };
        let (_, log) = train_features(&separable(), classes, &cfg).unwrap();
        assert!(log.windows(2).all(|w| w[1].loss <= w[0].loss));
    }

    #[test]
    fn missing_class_is_an_error() {
        let classes = vec![ClassLabel::Basis(l("h")), ClassLabel::Basis(l("r")), ClassLabel::Clean];
        let r = train_features(&separable(), classes, &TrainConfig::default());
        assert!(matches!(r, Err(CorError::MissingClass(c)) if c == "clean"));
    }

    #[test]
    fn non_finite_features_are_reported() {
        let mut s = separable();
        s[0].0[2] = f64::NAN;
        let classes = vec![ClassLabel::Basis(l("h")), ClassLabel::Clean];
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_features(&s, classes, &cfg),
            Err(CorError::NonFiniteLoss { .. })
        ));
    }

    fn toy_model(bases: &[&str]) -> ClassifierModel {
        let k = bases.len() + 1;
        ClassifierModel {
            class_labels: bases
                .iter()
                .map(|b| ClassLabel::Basis(l(b)))
                .chain(std::iter::once(ClassLabel::Clean))
                .collect(),
            feature_means: vec![0.0; FEATURE_COUNT],
            feature_stds: vec![1.0; FEATURE_COUNT],
            weights: (0..k * FEATURE_COUNT).map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.5).collect(),
            biases: (0..k).map(|i| i as f64 * 0.1).collect(),
        }
    }

    #[test]
    fn single_patch_vote_is_plain_softmax() {
        let m = toy_model(&["h", "r"]);
        let img = gen_clean(9, 64, 64).unwrap();
        let v = predict_probs(
            &m,
            &img,
            &PatchVoting {
                patches: 1,
                patch_size: 128,
            },
            5,
        )
        .unwrap();
        assert_eq!(v, m.probs(&extract_features(&img).unwrap()));
    }

    #[test]
    fn margin_examples() {
        let m = MarginConfig::order_only(0.03);
        let v = apply_margins(&[0.40, 0.38, 0.22], &m, &[l("h"), l("r+h")]).unwrap();
        assert!((v[0] - 0.43).abs() < 1e-12 && (v[1] - 0.44).abs() < 1e-12 && v[2] == 0.22);
        assert_eq!(argmax(&v), 1);

        let mut m = MarginConfig::order_only(0.03);
        m.epsilon_b.insert(l("l"), -0.05);
        let v = apply_margins(&[0.40, 0.38, 0.22], &m, &[l("l"), l("h")]).unwrap();
        assert!((v[0] - 0.38).abs() < 1e-12 && (v[1] - 0.41).abs() < 1e-12);
        assert_eq!(argmax(&v), 1);

        let v = apply_margins(&[0.3, 0.5, 0.2], &MarginConfig::zero(), &[l("l"), l("h")]).unwrap();
        assert_eq!(v, vec![0.3, 0.5, 0.2]);
        assert!(apply_margins(&[0.5, 0.5], &m, &[l("l"), l("h")]).is_err());
    }

    #[test]
    fn default_margins_penalize_low_light_bases() {
        let bases = [l("l"), l("h"), l("h+l"), l("r")];
        let m = MarginConfig::defaults_for(&bases);
        assert_eq!(m.offset(&l("low")), -0.05);
        assert_eq!(m.offset(&l("l+h")), -0.05);
        assert_eq!(m.offset(&l("h")), 0.0);
        assert_eq!(m.epsilon_o, 0.03);
    }

    #[test]
    fn decisions() {
        let m = toy_model(&["h", "r"]);
        let margins = MarginConfig::defaults_for(&[l("h"), l("r")]);
        let d = decide(&m, vec![0.10, 0.10, 0.80], &margins, DdMode::NonBlind).unwrap();
        assert_eq!(d.decision, Decision::Clean);
        let d = decide(&m, vec![0.4, 0.4, 0.2], &MarginConfig::zero(), DdMode::NonBlind).unwrap();
        assert_eq!(d.decision, Decision::Continue(l("h")));
        assert!(decide(&m, vec![0.4, 0.4, 0.2], &margins, DdMode::Blind).is_err());

        let mut blind = toy_model(&["h"]);
        blind.class_labels = blind_classes();
        let d = decide(&blind, vec![0.51, 0.49], &margins, DdMode::Blind).unwrap();
        assert_eq!(d.decision, Decision::Degraded);
        assert!(decide(&blind, vec![0.51, 0.49], &margins, DdMode::NonBlind).is_err());
    }

    #[test]
    fn model_json_schema() {
        let m = toy_model(&["h", "r+h"]);
        let v = serde_json::to_value(&m).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 5);
        assert_eq!(v["class_labels"][1], "rain+haze");
        assert_eq!(v["class_labels"][2], "clean");
        assert_eq!(serde_json::from_value::<ClassifierModel>(v).unwrap(), m);
    }

    #[test]
    fn permuted_model_permutes_probabilities() {
        let m = toy_model(&["h", "r", "n1"]);
        let p = m.permuted(&[2, 0, 1, 3]).unwrap();
        let f = extract_features(&gen_clean(2, 64, 64).unwrap()).unwrap();
        let (a, b) = (m.probs(&f), p.probs(&f));
        for (i, &src) in [2, 0, 1, 3].iter().enumerate() {
            assert!((b[i] - a[src]).abs() < 1e-15);
        }
        assert!(m.permuted(&[3, 0, 1, 2]).is_err());
        assert!(m.permuted(&[0, 0, 1, 3]).is_err());
    }
}
