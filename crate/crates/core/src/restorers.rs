//! Single-basis restorers behind one registry.
//!
//! In oracle mode a restorer inverts the recorded forward operators exactly.
//! In classical mode each 1-order basis maps to a hand-written blind filter
//! and composite bases chain those filters, outermost component first.

use serde::{Deserialize, Serialize};

use crate::error::{CorError, Result};
use crate::filters;
use crate::image::Image;
use crate::labels::{BasisSet, BasisSymbol, DegradationLabel};
use crate::synthesis::{self, SynthesisRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestorerMode {
    Oracle,
    Classical,
}

impl std::str::FromStr for RestorerMode {
    type Err = CorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "classical" => Ok(Self::Classical),
            other => Err(CorError::InvalidArgument(format!(
                "unknown restorer mode `{other}` (expected oracle or classical)"
            ))),
        }
    }
}

/// Constants of the classical restorers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicalParams {
    pub dehaze_omega: f64,
    pub dehaze_t_floor: f64,
    /// Fraction of brightest dark-channel pixels averaged into the airlight.
    pub dehaze_airlight_fraction: f64,
    pub dehaze_patch_radius: usize,
    pub dehaze_guide_radius: usize,
    pub dehaze_guide_eps: f64,
    pub denoise_median_radius: usize,
    pub denoise_bilateral_radius: usize,
    /// Range sigma of the bilateral pass, in units of the noise sigma.
    pub denoise_range_scale: f64,
    pub denoise_spatial_sigma: f64,
    pub derain_radius: usize,
    pub desnow_radius: usize,
    /// Luma percentiles (1st, 99th) a well-exposed clean image is expected
    /// to have.
    pub lowlight_reference: (f64, f64),
}

impl Default for ClassicalParams {
    fn default() -> Self {
        Self {
            dehaze_omega: 0.95,
            dehaze_t_floor: 0.1,
            dehaze_airlight_fraction: 0.001,
            dehaze_patch_radius: 7,
            dehaze_guide_radius: 20,
            dehaze_guide_eps: 1e-3,
            denoise_median_radius: 1,
            denoise_bilateral_radius: 3,
            denoise_range_scale: 2.0,
            denoise_spatial_sigma: 2.0,
            derain_radius: 4,
            desnow_radius: 4,
            lowlight_reference: (0.15, 0.92),
        }
    }
}

/// Restorers keyed by the basis set a model would be trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct RestorerRegistry {
    mode: RestorerMode,
    bases: BasisSet,
    params: ClassicalParams,
}

impl RestorerRegistry {
    pub fn new(mode: RestorerMode, bases: BasisSet) -> Result<Self> {
        if bases.is_empty() {
            return Err(CorError::InvalidArgument("restorer registry needs at least one basis".into()));
        }
        if mode == RestorerMode::Classical {
            if let Some(s) = bases.symbols().into_iter().find(|s| !s.is_concrete()) {
                return Err(CorError::InvalidArgument(format!("no classical restorer for `{s}`")));
            }
        }
        Ok(Self {
            mode,
            bases,
            params: ClassicalParams::default(),
        })
    }

    pub fn oracle(bases: BasisSet) -> Result<Self> {
        Self::new(RestorerMode::Oracle, bases)
    }

    pub fn classical(bases: BasisSet) -> Result<Self> {
        Self::new(RestorerMode::Classical, bases)
    }

    pub fn with_params(mut self, params: ClassicalParams) -> Self {
        self.params = params;
        self
    }

    pub fn mode(&self) -> RestorerMode {
        self.mode
    }

    pub fn bases(&self) -> &BasisSet {
        &self.bases
    }

    pub fn params(&self) -> &ClassicalParams {
        &self.params
    }

    /// Removes `basis` from `img`.
    ///
    /// Oracle mode inverts the components of `basis` that are still present in
    /// `context`, outermost first; components already gone are skipped, so a
    /// basis with nothing left to remove returns the input unchanged.
    pub fn restore(&self, img: &Image, basis: &DegradationLabel, context: Option<&SynthesisRecord>) -> Result<Image> {
        Ok(self.restore_tracked(img, basis, context)?.0)
    }

    /// Like [`restore`](Self::restore), also returning the record with the
    /// removed components deleted.
    pub fn restore_tracked(
        &self,
        img: &Image,
        basis: &DegradationLabel,
        context: Option<&SynthesisRecord>,
    ) -> Result<(Image, Option<SynthesisRecord>)> {
        if !self.bases.contains(basis) {
            return Err(CorError::UnknownBasis(basis.to_string()));
        }
        match self.mode {
            RestorerMode::Oracle => {
                let record = context.ok_or(CorError::MissingContext)?;
                let (out, rec) = oracle_remove_present(img, basis, record)?;
                Ok((out, Some(rec)))
            }
            RestorerMode::Classical => {
                let out = classical_restore(img, basis, &self.params);
                Ok((out, context.map(|r| forget_components(r, basis))))
            }
        }
    }
}

/// Drops the outermost occurrence of each symbol of `basis` that the record
/// still holds.
pub fn forget_components(record: &SynthesisRecord, basis: &DegradationLabel) -> SynthesisRecord {
    let mut rec = record.clone();
    for &s in basis.parts() {
        if let Some(i) = rec.position(s) {
            rec.applied.remove(i);
        }
    }
    rec
}

/// Positions (in `record.applied`) of each symbol of `basis`, matching
/// repeated symbols to distinct occurrences from the outside in.
fn component_positions(record: &SynthesisRecord, basis: &DegradationLabel) -> (Vec<usize>, Vec<BasisSymbol>) {
    let mut taken = vec![false; record.applied.len()];
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for &s in basis.parts() {
        match (0..record.applied.len())
            .rev()
            .find(|&i| !taken[i] && record.applied[i].symbol == s)
        {
            Some(i) => {
                taken[i] = true;
                found.push(i);
            }
            None => missing.push(s),
        }
    }
    found.sort_unstable_by(|a, b| b.cmp(a));
    (found, missing)
}

fn invert_at(img: &Image, record: &SynthesisRecord, positions: &[usize]) -> Result<(Image, SynthesisRecord)> {
    let mut out = img.clone();
    let mut rec = record.clone();
    for &i in positions {
        out = synthesis::invert_params(&out, &record.applied[i].params)?;
    }
    // positions are descending, so earlier removals do not shift later ones
    for &i in positions {
        rec.applied.remove(i);
    }
    Ok((out, rec))
}

fn oracle_remove_present(img: &Image, basis: &DegradationLabel, record: &SynthesisRecord) -> Result<(Image, SynthesisRecord)> {
    let (positions, _) = component_positions(record, basis);
    invert_at(img, record, &positions)
}

/// Exact inverse of the components of `basis`, applied outermost first, with
/// those components removed from the returned record.
///
/// When `basis` covers the outermost remaining components the result equals
/// re-synthesizing the clean image with what remains. Otherwise later
/// components get entangled with the inverse (degradation coupling).
pub fn oracle_remove(img: &Image, basis: &DegradationLabel, record: &SynthesisRecord) -> Result<(Image, SynthesisRecord)> {
    let (positions, missing) = component_positions(record, basis);
    if !missing.is_empty() {
        return Err(CorError::ComponentAbsent(format!(
            "{basis} (missing {})",
            missing.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
        )));
    }
    invert_at(img, record, &positions)
}

/// PSNR in dB between `after_removal` and `clean` re-synthesized with only the
/// components left in `record`, on unclipped values. Returns
/// `f64::INFINITY` when the two agree to within 1e-9 everywhere.
pub fn coupling_gap(
    clean: &Image,
    record: &SynthesisRecord,
    after_removal: &Image,
    remaining: Option<&DegradationLabel>,
) -> Result<f64> {
    let actual = record.label();
    let matches = match (remaining, actual.as_ref()) {
        (None, None) => true,
        (Some(a), Some(b)) => a.equals(b),
        _ => false,
    };
    if !matches {
        return Err(CorError::InvalidArgument(format!(
            "remaining label {} does not match record ({})",
            remaining.map_or("clean".to_string(), |l| l.to_string()),
            actual.map_or("clean".to_string(), |l| l.to_string()),
        )));
    }
    let reference = synthesis::replay(clean, &record.applied)?;
    if after_removal.max_abs_diff(&reference)? <= 1e-9 {
        return Ok(f64::INFINITY);
    }
    let mse = after_removal
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.data().len() as f64;
    Ok(10.0 * (1.0 / mse).log10())
}

/// Chains the 1-order classical restorers of `basis`, outermost first.
pub fn classical_restore(img: &Image, basis: &DegradationLabel, params: &ClassicalParams) -> Image {
    let mut order = basis.composition_order();
    order.reverse();
    order
        .into_iter()
        .fold(img.clone(), |acc, s| classical_single(&acc, s, params))
}

fn classical_single(img: &Image, symbol: BasisSymbol, p: &ClassicalParams) -> Image {
    match symbol {
        BasisSymbol::Noise15 | BasisSymbol::Noise25 | BasisSymbol::Noise50 => {
            denoise(img, symbol.noise_sigma().expect("noise symbol"), p)
        }
        BasisSymbol::Haze => dehaze(img, p),
        BasisSymbol::Rain => derain(img, p),
        BasisSymbol::Low => delowlight(img, p),
        BasisSymbol::Snow => desnow(img, p),
        BasisSymbol::Abstract(_) => img.clone(),
    }
}

/// Median pre-filter followed by a bilateral pass whose range sigma scales
/// with the nominal noise level (`sigma` on the 0..255 scale).
pub fn denoise(img: &Image, sigma: f64, p: &ClassicalParams) -> Image {
    let (h, w) = (img.height(), img.width());
    let r = p.denoise_median_radius;
    let med = filters::per_channel(img, |pl| filters::median_filter(pl, h, w, r));
    let sigma_r = p.denoise_range_scale * sigma / 255.0;
    filters::bilateral(&med, p.denoise_bilateral_radius, p.denoise_spatial_sigma, sigma_r)
}

/// Dark-channel-prior dehazing with a guided-filter refined transmission.
pub fn dehaze(img: &Image, p: &ClassicalParams) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let x = img.clamped();
    let dark = filters::dark_channel(&x, p.dehaze_patch_radius);

    let top = ((h * w) as f64 * p.dehaze_airlight_fraction).ceil().max(1.0) as usize;
    let mut idx: Vec<usize> = (0..h * w).collect();
    idx.select_nth_unstable_by(top - 1, |&a, &b| dark[b].total_cmp(&dark[a]));
    let mut airlight = vec![0.0; ch];
    for &i in &idx[..top] {
        for (c, a) in airlight.iter_mut().enumerate() {
            *a += x.data()[i * ch + c] / top as f64;
        }
    }
    for a in airlight.iter_mut() {
        *a = a.max(1e-3);
    }

    let normalized = x.with_data(
        x.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / airlight[i % ch])
            .collect(),
    );
    let raw_t: Vec<f64> = filters::dark_channel(&normalized, p.dehaze_patch_radius)
        .into_iter()
        .map(|d| 1.0 - p.dehaze_omega * d)
        .collect();
    let guide = x.luma();
    let t = filters::guided_filter(&guide, &raw_t, h, w, p.dehaze_guide_radius, p.dehaze_guide_eps);

    img.with_data(
        img.data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let a = airlight[i % ch];
                (v - a) / t[i / ch].max(p.dehaze_t_floor) + a
            })
            .collect(),
    )
}

/// Dominant gradient orientation of the luma plane in radians, in [0, pi),
/// from a magnitude-squared weighted 36-bin histogram.
pub fn dominant_gradient_orientation(img: &Image) -> f64 {
    const BINS: usize = 36;
    let (h, w) = (img.height(), img.width());
    let l = img.clamped().luma();
    let mut hist = [0.0; BINS];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = (l[y * w + x + 1] - l[y * w + x - 1]) / 2.0;
            let gy = (l[(y + 1) * w + x] - l[(y - 1) * w + x]) / 2.0;
            let mag2 = gx * gx + gy * gy;
            if mag2 == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
            hist[((theta / std::f64::consts::PI * BINS as f64) as usize).min(BINS - 1)] += mag2;
        }
    }
    // smooth circularly so a streak angle on a bin edge is not split
    let smoothed: Vec<f64> = (0..BINS)
        .map(|i| hist[(i + BINS - 1) % BINS] + 2.0 * hist[i] + hist[(i + 1) % BINS])
        .collect();
    let best = (0..BINS)
        .max_by(|&a, &b| smoothed[a].total_cmp(&smoothed[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    (best as f64 + 0.5) * std::f64::consts::PI / BINS as f64
}

/// Streak removal: a 1-D median across the dominant streak direction
/// (i.e. along the dominant gradient), keeping the darker of input and median
/// since rain only adds light.
pub fn derain(img: &Image, p: &ClassicalParams) -> Image {
    let (h, w) = (img.height(), img.width());
    let theta = dominant_gradient_orientation(img);
    let (dy, dx) = theta.sin_cos();
    let med = filters::per_channel(img, |pl| filters::directional_median(pl, h, w, p.derain_radius, dy, dx));
    img.zip_map(&med, f64::min).expect("same shape")
}

/// Removes small bright blobs: keeps the darker of input and a square median.
pub fn desnow(img: &Image, p: &ClassicalParams) -> Image {
    let (h, w) = (img.height(), img.width());
    let med = filters::per_channel(img, |pl| filters::median_filter(pl, h, w, p.desnow_radius));
    img.zip_map(&med, f64::min).expect("same shape")
}

/// Estimated `(gamma, gain)` of a power-law darkening, from the image's 1st
/// and 99th luma percentiles against the reference percentiles.
pub fn estimate_low_light(img: &Image, p: &ClassicalParams) -> (f64, f64) {
    let luma = img.clamped().luma();
    let y1 = filters::quantile(&luma, 0.01).max(1e-3);
    let y99 = filters::quantile(&luma, 0.99).max(y1 + 1e-3);
    let (x1, x99) = p.lowlight_reference;
    let gamma = ((y99 / y1).ln() / (x99 / x1).ln()).clamp(1.0, 5.0);
    let gain = (y99 / x99.powf(gamma)).clamp(1e-3, 1.0);
    (gamma, gain)
}

/// Inverse gamma with the parameters from [`estimate_low_light`].
pub fn delowlight(img: &Image, p: &ClassicalParams) -> Image {
    let (gamma, gain) = estimate_low_light(img, p);
    img.map(|v| {
        let u = v / gain;
        u.signum() * u.abs().powf(1.0 / gamma)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::synthesis::{gen_clean, synthesize, SynthesisConfig, Transmission};

    fn l(s: &str) -> DegradationLabel {
        s.parse().unwrap()
    }

    fn one_order() -> BasisSet {
        BasisSet::parse_list(&["n1", "n2", "n5", "r", "h", "l", "s"]).unwrap()
    }

    fn synth(label: &str, seed: u64) -> (Image, Image, SynthesisRecord) {
        let clean = gen_clean(seed, 96, 96).unwrap();
        let (deg, rec) = synthesize(&clean, &l(label), &SynthesisConfig::default(), seed + 1).unwrap();
        (clean, deg, rec)
    }

    #[test]
    fn oracle_noise_removal_is_exact() {
        let (clean, deg, rec) = synth("n1", 3);
        let reg = RestorerRegistry::oracle(one_order()).unwrap();
        let out = reg.restore(&deg, &l("n1"), Some(&rec)).unwrap();
        assert!(out.max_abs_diff(&clean).unwrap() <= 1e-12);
    }

    #[test]
    fn oracle_haze_inverse_formula() {
        let clean = gen_clean(4, 64, 64).unwrap();
        let tr = Transmission::Uniform { t: 0.6 };
        let hazed = synthesis::apply_haze(&clean, 0.85, &tr).unwrap();
        let manual = hazed.map(|v| (v - 0.85 * 0.4) / 0.6);
        let (deg, rec) = synthesize(&clean, &l("h"), &SynthesisConfig::default(), 9).unwrap();
        let out = oracle_remove(&deg, &l("h"), &rec).unwrap().0;
        assert!(out.max_abs_diff(&clean).unwrap() <= 1e-12);
        assert!(manual.max_abs_diff(&clean).unwrap() <= 1e-12);
    }

    #[test]
    fn registry_errors() {
        let (_, deg, rec) = synth("h", 1);
        let reg = RestorerRegistry::oracle(BasisSet::parse_list(&["h"]).unwrap()).unwrap();
        assert!(matches!(reg.restore(&deg, &l("r"), Some(&rec)), Err(CorError::UnknownBasis(_))));
        assert!(matches!(reg.restore(&deg, &l("h"), None), Err(CorError::MissingContext)));
        assert!(RestorerRegistry::classical(BasisSet::parse_list(&["x0"]).unwrap()).is_err());
        assert!(RestorerRegistry::oracle(BasisSet::default()).is_err());
    }

    #[test]
    fn outermost_first_is_exact() {
        let (clean, deg, rec) = synth("h+n1", 11);
        let (a, rec) = oracle_remove(&deg, &l("n1"), &rec).unwrap();
        let (b, rec) = oracle_remove(&a, &l("h"), &rec).unwrap();
        assert!(rec.is_empty());
        assert!(b.max_abs_diff(&clean).unwrap() <= 1e-9);
        assert!(oracle_remove(&b, &l("h"), &rec).is_err());
    }

    #[test]
    fn low_only_round_trip() {
        let (clean, deg, rec) = synth("l", 12);
        let (out, rec) = oracle_remove(&deg, &l("l"), &rec).unwrap();
        assert!(rec.is_empty());
        assert!(out.max_abs_diff(&clean).unwrap() <= 1e-12);
    }

    #[test]
    fn haze_first_amplifies_noise() {
        let clean = gen_clean(8, 128, 128).unwrap();
        let mut last = f64::INFINITY;
        for t in [0.8, 0.5, 0.3] {
            let hazed = synthesis::apply_haze(&clean, 0.9, &Transmission::Uniform { t }).unwrap();
            let noisy = synthesis::apply_noise(&hazed, 25.0, 5);
            let rec = SynthesisRecord {
                clean_ref: String::new(),
                applied: vec![
                    synthesis::AppliedComponent {
                        symbol: BasisSymbol::Haze,
                        params: synthesis::DegradationParams::Haze {
                            airlight: 0.9,
                            transmission: Transmission::Uniform { t },
                        },
                    },
                    synthesis::AppliedComponent {
                        symbol: BasisSymbol::Noise25,
                        params: synthesis::DegradationParams::Noise { sigma: 25.0, seed: 5 },
                    },
                ],
            };
            let (after, rest) = oracle_remove(&noisy, &l("h"), &rec).unwrap();
            let residual: Vec<f64> = after.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
            let m = residual.iter().sum::<f64>() / residual.len() as f64;
            let sd = (residual.iter().map(|r| (r - m).powi(2)).sum::<f64>() / residual.len() as f64).sqrt();
            let predicted = 25.0 / 255.0 / t;
            assert!((sd / predicted - 1.0).abs() < 0.05, "t {t}: {sd} vs {predicted}");
            let gap = coupling_gap(&clean, &rest, &after, Some(&l("n2"))).unwrap();
            assert!(gap.is_finite() && gap < last, "t {t}: gap {gap}");
            last = gap;
        }
    }

    #[test]
    fn coupling_gap_infinite_for_outermost() {
        let (clean, deg, rec) = synth("h+n1", 2);
        let (after, rest) = oracle_remove(&deg, &l("n1"), &rec).unwrap();
        assert_eq!(coupling_gap(&clean, &rest, &after, Some(&l("h"))).unwrap(), f64::INFINITY);
        assert!(coupling_gap(&clean, &rest, &after, Some(&l("r"))).is_err());
    }

    #[test]
    fn composite_basis_inverts_in_one_call() {
        let (clean, deg, rec) = synth("l+h+r", 6);
        let reg = RestorerRegistry::oracle(BasisSet::parse_list(&["h+r", "l"]).unwrap()).unwrap();
        let (a, rec) = reg.restore_tracked(&deg, &l("r+h"), Some(&rec)).unwrap();
        let rec = rec.unwrap();
        assert_eq!(rec.symbols(), vec![BasisSymbol::Low]);
        let (b, rec) = reg.restore_tracked(&a, &l("l"), Some(&rec)).unwrap();
        assert!(rec.unwrap().is_empty());
        assert!(b.max_abs_diff(&clean).unwrap() <= 1e-9);
    }

    #[test]
    fn absent_component_is_skipped_by_restore() {
        let (_, deg, rec) = synth("h", 7);
        let reg = RestorerRegistry::oracle(one_order()).unwrap();
        assert_eq!(reg.restore(&deg, &l("r"), Some(&rec)).unwrap(), deg);
    }

    #[test]
    fn classical_low_light_brightens() {
        let mut ratios = Vec::new();
        for s in 0..5 {
            let (_, deg, _) = synth("l", 20 + s);
            let out = delowlight(&deg.quantized(), &ClassicalParams::default());
            ratios.push(out.mean() / deg.mean());
        }
        assert!(ratios.iter().all(|&r| r >= 1.5), "{ratios:?}");
    }

    #[test]
    fn classical_restorers_keep_shape() {
        let (_, deg, _) = synth("h+r+n1", 30);
        let reg = RestorerRegistry::classical(one_order()).unwrap();
        for b in one_order().iter() {
            let out = reg.restore(&deg, b, None).unwrap();
            assert!(out.same_shape(&deg));
            assert!(out.all_finite());
            assert_eq!(out, reg.restore(&deg, b, None).unwrap());
        }
    }

    #[test]
    fn denoise_improves_psnr() {
        let (clean, deg, _) = synth("n2", 40);
        let deg = deg.quantized();
        let out = denoise(&deg, 25.0, &ClassicalParams::default());
        assert!(psnr(&out, &clean).unwrap() > psnr(&deg, &clean).unwrap());
    }
}
