//! The restoration loop: classify, remove one basis, repeat until clean.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::complexity::{self, RatioValue};
use crate::discriminator::{self, ClassifierModel, DdMode, Decision, MarginConfig, PatchVoting};
use crate::error::{CorError, Result};
use crate::image::Image;
use crate::labels::{decompose, BasisSet, DegradationLabel};
use crate::metrics::MetricPair;
use crate::restorers::{RestorerMode, RestorerRegistry};
use crate::seed;
use crate::synthesis::SynthesisRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorSource {
    Trained,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoRConfig {
    /// Restoration step cap; `None` means `2 * |isolated symbols| + 2`.
    pub max_steps: Option<usize>,
    pub no_progress_threshold: f64,
    pub margins: Option<MarginConfig>,
    pub mode: DdMode,
    pub discriminator: DiscriminatorSource,
    pub voting: PatchVoting,
    pub seed: u64,
}

impl Default for CoRConfig {
    fn default() -> Self {
        Self {
            max_steps: None,
            no_progress_threshold: 1e-4,
            margins: None,
            mode: DdMode::NonBlind,
            discriminator: DiscriminatorSource::Trained,
            voting: PatchVoting::default(),
            seed: 0,
        }
    }
}

impl CoRConfig {
    pub fn step_cap(&self, bases: &BasisSet) -> usize {
        self.max_steps.unwrap_or(2 * bases.symbols().len() + 2)
    }

    /// Explicit margins, or the defaults for `bases`.
    pub fn margins_for(&self, bases: &BasisSet) -> MarginConfig {
        self.margins.clone().unwrap_or_else(|| MarginConfig::defaults_for(bases.iter()))
    }
}

/// Source of the per-step decision.
#[derive(Debug, Clone, Copy)]
pub enum Discriminator<'a> {
    Trained(&'a ClassifierModel),
    /// Ground truth read from the synthesis record.
    Oracle,
    /// Uniform choice over the registry bases and stop.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CleanDetected,
    MaxSteps,
    NoProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub index: usize,
    pub probs: Vec<f64>,
    pub revised: Vec<f64>,
    /// Basis label, `clean`, or `degraded` (blind).
    pub choice: String,
    /// SHA-256 of the image the decision was made on.
    pub fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoRTrace {
    /// Class order of `probs` / `revised`.
    pub classes: Vec<String>,
    pub steps: Vec<TraceStep>,
    pub termination: Termination,
}

impl CoRTrace {
    /// Number of restorations performed.
    pub fn restorations(&self) -> usize {
        match self.termination {
            Termination::CleanDetected | Termination::MaxSteps => self.steps.len().saturating_sub(1),
            Termination::NoProgress => self.steps.len(),
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct CoROutput {
    pub image: Image,
    pub trace: CoRTrace,
    /// Images after each restoration, starting with the input.
    pub intermediates: Vec<Image>,
}

/// SHA-256 of the shape and raw sample bits.
pub fn fingerprint(img: &Image) -> String {
    let mut hasher = Sha256::new();
    for d in [img.height(), img.width(), img.channels()] {
        hasher.update((d as u64).to_le_bytes());
    }
    for v in img.data() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn one_hot(len: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[i] = 1.0;
    v
}

/// Ground-truth decision: clean when nothing remains, otherwise the
/// registry basis covering the outermost remaining component.
///
/// Among bases that remove a contiguous run of outermost components while
/// leaving a remainder decomposable in the minimum number of further steps,
/// the highest order wins. If no such basis exists the part of a minimal
/// decomposition holding the outermost component is used.
pub fn oracle_dd(context: &SynthesisRecord, bases: &BasisSet) -> Result<Decision> {
    let Some(remaining) = context.label() else {
        return Ok(Decision::Clean);
    };
    let cover = decompose(&remaining, bases).ok_or_else(|| CorError::Undecomposable(remaining.to_string()))?;
    let symbols = context.symbols();
    let n = symbols.len();
    for take in (1..=n.min(bases.max_order())).rev() {
        let suffix = DegradationLabel::new(symbols[n - take..].to_vec())?;
        if !bases.contains(&suffix) {
            continue;
        }
        let rest_ok = if take == n {
            true
        } else {
            let prefix = DegradationLabel::new(symbols[..n - take].to_vec())?;
            decompose(&prefix, bases).is_some_and(|parts| parts.len() + 1 == cover.len())
        };
        if rest_ok {
            return Ok(Decision::Continue(suffix.canonical()));
        }
    }
    let outermost = symbols[n - 1];
    let part = cover
        .into_iter()
        .filter(|p| p.contains_symbol(outermost))
        .max_by_key(|p| p.order())
        .expect("a cover includes every symbol");
    Ok(Decision::Continue(part))
}

fn class_names(classes: &[DegradationLabel]) -> Vec<String> {
    classes
        .iter()
        .map(|b| b.to_string())
        .chain(std::iter::once("clean".to_string()))
        .collect()
}

/// Runs the loop on `img`.
///
/// Oracle restorers and the oracle discriminator need `context`. With
/// `ground_truth` every step also records PSNR/SSIM against it.
pub fn run_cor(
    img: &Image,
    registry: &RestorerRegistry,
    dd: Discriminator<'_>,
    config: &CoRConfig,
    context: Option<&SynthesisRecord>,
    ground_truth: Option<&Image>,
) -> Result<CoROutput> {
    let bases = registry.bases();
    let max_steps = config.step_cap(bases);
    if max_steps == 0 {
        return Err(CorError::InvalidArgument("max_steps must be at least 1".into()));
    }
    let margins = config.margins_for(bases);
    let basis_list: Vec<DegradationLabel> = bases.iter().cloned().collect();

    let classes = match dd {
        Discriminator::Trained(model) => {
            match config.mode {
                DdMode::NonBlind => {
                    if let Some(b) = model.basis_labels().into_iter().find(|b| !bases.contains(b)) {
                        return Err(CorError::ModeMismatch(format!(
                            "discriminator class `{b}` has no restorer in the registry"
                        )));
                    }
                }
                DdMode::Blind if registry.mode() != RestorerMode::Oracle => {
                    return Err(CorError::ModeMismatch(
                        "blind restoration is only available with oracle restorers".into(),
                    ));
                }
                DdMode::Blind => {}
            }
            model.class_labels.iter().map(|c| c.to_string()).collect()
        }
        Discriminator::Oracle | Discriminator::Random => class_names(&basis_list),
    };
    let needs_context = registry.mode() == RestorerMode::Oracle || matches!(dd, Discriminator::Oracle);
    if needs_context && context.is_none() {
        return Err(CorError::MissingContext);
    }

    let mut record = context.cloned();
    let mut x = img.clone();
    let mut steps = Vec::new();
    let mut intermediates = vec![x.clone()];
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut previous: Option<(String, f64)> = None;
    let mut random = seed::rng(seed::derive(config.seed, 0xA11CE));
    let mut restorations = 0;

    let termination = loop {
        let print = fingerprint(&x);
        let step_seed = seed::derive(config.seed, u64::from_str_radix(&print[..16], 16).expect("hex digest"));
        let (probs, revised, decision) = match dd {
            Discriminator::Trained(model) => {
                let d = discriminator::discriminate(model, &x, &margins, config.mode, &config.voting, step_seed)?;
                (d.probs, d.revised, d.decision)
            }
            Discriminator::Oracle => {
                let d = oracle_dd(record.as_ref().expect("checked above"), bases)?;
                let i = match &d {
                    Decision::Continue(b) => basis_list.iter().position(|x| x == b).expect("registry basis"),
                    _ => basis_list.len(),
                };
                let v = one_hot(basis_list.len() + 1, i);
                (v.clone(), v, d)
            }
            Discriminator::Random => {
                let i = random.random_range(0..=basis_list.len());
                let v = one_hot(basis_list.len() + 1, i);
                let d = if i == basis_list.len() {
                    Decision::Clean
                } else {
                    Decision::Continue(basis_list[i].clone())
                };
                (v.clone(), v, d)
            }
        };
        let choice = decision.describe();

        if let Some((prev, change)) = &previous {
            if *prev == choice && *change < config.no_progress_threshold {
                break Termination::NoProgress;
            }
        }
        if !seen.insert((choice.clone(), print.clone())) {
            break Termination::NoProgress;
        }

        let metrics = match ground_truth {
            Some(gt) => Some(MetricPair::between(&x, gt)?),
            None => None,
        };
        steps.push(TraceStep {
            index: steps.len(),
            probs,
            revised,
            choice: choice.clone(),
            fingerprint: print,
            psnr: metrics.map(|m| m.psnr),
            ssim: metrics.map(|m| m.ssim),
        });

        let basis = match decision {
            Decision::Clean => break Termination::CleanDetected,
            Decision::Continue(b) => b,
            Decision::Degraded => match oracle_dd(record.as_ref().ok_or(CorError::MissingContext)?, bases)? {
                Decision::Continue(b) => b,
                // the blind model saw degradation the record no longer holds
                _ => break Termination::NoProgress,
            },
        };
        if restorations == max_steps {
            break Termination::MaxSteps;
        }
        let (next, next_record) = registry.restore_tracked(&x, &basis, record.as_ref())?;
        let change = next.mean_abs_diff(&x)?;
        x = next;
        record = next_record;
        restorations += 1;
        intermediates.push(x.clone());
        previous = Some((choice, change));
    };

    Ok(CoROutput {
        image: x,
        trace: CoRTrace {
            classes,
            steps,
            termination,
        },
        intermediates,
    })
}

/// Expected steps per composite of a k-order model over `n` isolated
/// degradations, all composites equally likely.
pub fn step_count_expectation(n: u32, k: u32) -> Result<RatioValue> {
    complexity::ir(n, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::enumerate_bases;
    use crate::metrics::psnr;
    use crate::synthesis::{gen_clean, synthesize, SynthesisConfig};

    fn l(s: &str) -> DegradationLabel {
        s.parse().unwrap()
    }

    fn oracle_config() -> CoRConfig {
        CoRConfig {
            discriminator: DiscriminatorSource::Oracle,
            ..CoRConfig::default()
        }
    }

    fn record_of(label: &str) -> SynthesisRecord {
        let clean = gen_clean(1, 64, 64).unwrap();
        synthesize(&clean, &l(label), &SynthesisConfig::default(), 1).unwrap().1
    }

    #[test]
    fn oracle_dd_examples() {
        let one = BasisSet::parse_list(&["n1", "h", "r", "l"]).unwrap();
        assert_eq!(oracle_dd(&record_of("h+n1"), &one).unwrap(), Decision::Continue(l("n1")));
        let mut empty = record_of("h");
        empty.applied.clear();
        assert_eq!(oracle_dd(&empty, &one).unwrap(), Decision::Clean);
        let two = BasisSet::parse_list(&["rain+haze", "low"]).unwrap();
        assert_eq!(oracle_dd(&record_of("l+h+r"), &two).unwrap(), Decision::Continue(l("r+h")));
        let missing = BasisSet::parse_list(&["rain", "haze", "rain+haze"]).unwrap();
        assert!(matches!(
            oracle_dd(&record_of("l+h+r"), &missing),
            Err(CorError::Undecomposable(s)) if s.contains("low")
        ));
    }

    fn run(label: &str, bases: BasisSet, seed: u64) -> (Image, CoROutput) {
        let clean = gen_clean(seed, 96, 96).unwrap();
        let (deg, rec) = synthesize(&clean, &l(label), &SynthesisConfig::default(), seed).unwrap();
        let reg = RestorerRegistry::oracle(bases).unwrap();
        let out = run_cor(&deg, &reg, Discriminator::Oracle, &oracle_config(), Some(&rec), Some(&clean)).unwrap();
        (clean, out)
    }

    #[test]
    fn three_steps_with_one_order_bases() {
        let (clean, out) = run("h+r+n1", BasisSet::parse_list(&["n1", "r", "h"]).unwrap(), 4);
        assert_eq!(out.trace.termination, Termination::CleanDetected);
        assert_eq!(out.trace.restorations(), 3);
        assert_eq!(out.trace.steps.len(), 4);
        assert!(out.image.max_abs_diff(&clean).unwrap() <= 1e-9);
        assert!(psnr(&out.image.quantized(), &clean.quantized()).unwrap() >= 50.0);
        let choices: Vec<&str> = out.trace.steps.iter().map(|s| s.choice.as_str()).collect();
        assert_eq!(choices, ["noise15", "rain", "haze", "clean"]);
    }

    #[test]
    fn two_steps_with_second_order_basis() {
        let (clean, out) = run("h+r+n1", BasisSet::parse_list(&["n1", "r", "h", "r+h"]).unwrap(), 5);
        assert_eq!(out.trace.restorations(), 2);
        assert!(out.image.max_abs_diff(&clean).unwrap() <= 1e-9);
    }

    #[test]
    fn clean_input_stops_immediately() {
        let clean = gen_clean(2, 64, 64).unwrap();
        let (_, mut rec) = synthesize(&clean, &l("h"), &SynthesisConfig::default(), 0).unwrap();
        rec.applied.clear();
        let reg = RestorerRegistry::oracle(BasisSet::parse_list(&["h"]).unwrap()).unwrap();
        let out = run_cor(&clean, &reg, Discriminator::Oracle, &oracle_config(), Some(&rec), None).unwrap();
        assert_eq!(out.trace.termination, Termination::CleanDetected);
        assert_eq!(out.trace.restorations(), 0);
        assert_eq!(out.image, clean);
    }

    #[test]
    fn missing_context_is_rejected() {
        let clean = gen_clean(2, 64, 64).unwrap();
        let reg = RestorerRegistry::oracle(BasisSet::parse_list(&["h"]).unwrap()).unwrap();
        assert!(matches!(
            run_cor(&clean, &reg, Discriminator::Oracle, &oracle_config(), None, None),
            Err(CorError::MissingContext)
        ));
    }

    #[test]
    fn random_selection_respects_step_cap() {
        let clean = gen_clean(3, 64, 64).unwrap();
        let (deg, rec) = synthesize(&clean, &l("l+h+s"), &SynthesisConfig::default(), 3).unwrap();
        let reg = RestorerRegistry::oracle(enumerate_bases(&rec.symbols(), 2).unwrap()).unwrap();
        for s in 0..20 {
            let cfg = CoRConfig {
                seed: s,
                max_steps: Some(3),
                ..CoRConfig::default()
            };
            let out = run_cor(&deg, &reg, Discriminator::Random, &cfg, Some(&rec), None).unwrap();
            assert!(out.trace.steps.len() <= 4);
            assert!(out.trace.restorations() <= 3);
            let pairs: HashSet<_> = out.trace.steps.iter().map(|s| (&s.choice, &s.fingerprint)).collect();
            assert_eq!(pairs.len(), out.trace.steps.len());
        }
    }

    #[test]
    fn trace_json_round_trips() {
        let (_, out) = run("h+n1", BasisSet::parse_list(&["n1", "h"]).unwrap(), 6);
        let text = serde_json::to_string(&out.trace).unwrap();
        assert!(text.contains("\"termination\":\"clean_detected\""));
        assert_eq!(serde_json::from_str::<CoRTrace>(&text).unwrap(), out.trace);
    }

    #[test]
    fn expectation_examples() {
        assert_eq!(step_count_expectation(3, 3).unwrap(), RatioValue::integer(1));
        assert_eq!(step_count_expectation(3, 1).unwrap(), RatioValue::new(12, 7).unwrap());
        assert!(step_count_expectation(3, 4).is_err());
    }

    #[test]
    fn fingerprint_tracks_content_and_shape() {
        let a = Image::filled(4, 4, 1, 0.5);
        let b = Image::filled(2, 8, 1, 0.5);
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        assert_eq!(fingerprint(&a).len(), 64);
    }
}
