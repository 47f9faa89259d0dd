use cor_core::metrics::psnr;
use cor_core::restorers::{classical_restore, ClassicalParams};
use cor_core::synthesis::{gen_clean, synthesize, SynthesisConfig};
use cor_core::{DegradationLabel, Image};
use rayon::prelude::*;

const IMAGES: u64 = 20;

fn pairs(label: &str) -> Vec<(Image, Image)> {
    let label: DegradationLabel = label.parse().unwrap();
    (0..IMAGES)
        .into_par_iter()
        .map(|i| {
            let clean = gen_clean(700 + i, 128, 128).unwrap().quantized();
            let degraded = synthesize(&clean, &label, &SynthesisConfig::default(), 40 + i).unwrap().0.quantized();
            (clean, degraded)
        })
        .collect()
}

/// Mean PSNR of the input and of the restored output.
fn gain(label: &str, basis: &str) -> (f64, f64) {
    let basis: DegradationLabel = basis.parse().unwrap();
    let params = ClassicalParams::default();
    let rows: Vec<(f64, f64)> = pairs(label)
        .par_iter()
        .map(|(c, d)| {
            let out = classical_restore(d, &basis, &params).quantized();
            (psnr(d, c).unwrap(), psnr(&out, c).unwrap())
        })
        .collect();
    let n = rows.len() as f64;
    (rows.iter().map(|r| r.0).sum::<f64>() / n, rows.iter().map(|r| r.1).sum::<f64>() / n)
}

#[test]
fn each_restorer_improves_its_own_degradation() {
    for (label, basis) in [("n1", "n1"), ("n2", "n2"), ("n5", "n5"), ("r", "r"), ("h", "h"), ("l", "l"), ("s", "s")] {
        let (before, after) = gain(label, basis);
        assert!(after > before, "{basis} on {label}: {before:.2} -> {after:.2}");
    }
}

/// A clean input has infinite PSNR, so the absolute floor stands in for the
/// relative bound here; the relative bound is checked off-target below.
#[test]
fn restorers_are_mild_on_clean_images() {
    let params = ClassicalParams::default();
    let cleans: Vec<Image> = (0..IMAGES).map(|i| gen_clean(900 + i, 128, 128).unwrap().quantized()).collect();
    for basis in ["n1", "n2", "n5", "r", "h", "l", "s"] {
        let b: DegradationLabel = basis.parse().unwrap();
        let mean = cleans
            .par_iter()
            .map(|c| psnr(&classical_restore(c, &b, &params).quantized(), c).unwrap())
            .sum::<f64>()
            / IMAGES as f64;
        assert!(mean >= 28.0, "{basis} on clean: {mean:.2} dB");
    }
}

/// Applying a restorer whose degradation is absent costs less than 3 dB.
#[test]
fn off_target_restorers_cost_little() {
    for label in ["n1", "n2", "r", "h", "s"] {
        for basis in ["n1", "n2", "n5", "r", "h", "l", "s"] {
            if label == basis {
                continue;
            }
            let (before, after) = gain(label, basis);
            assert!(before - after < 3.0, "{basis} on {label}: {before:.2} -> {after:.2}");
        }
    }
}
