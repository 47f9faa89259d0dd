//! Seeded, exactly invertible degradation operators and dataset synthesis.
//!
//! Forward models (all unclipped):
//!
//! * noise: `x + G`, `G ~ N(0, (sigma/255)^2)` i.i.d., regenerated from a seed
//! * haze: `x * t + A * (1 - t)` with a uniform or horizontally ramped `t`
//! * rain / snow: `x + R` with `R >= 0` a seeded layer of oriented streaks or
//!   soft discs, shared by all channels
//! * low light: `gain * x^gamma` (sign-preserving power, so the operator and
//!   its inverse stay finite on negative intermediates)
//!
//! Composites are applied innermost first: low, haze, rain/snow, noise.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CorError, Result};
use crate::image::{self, Image};
use crate::labels::{BasisSymbol, DegradationLabel};
use crate::seed;

/// Transmission map of the scattering model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transmission {
    Uniform { t: f64 },
    /// Linear in the column index, `t_left` at x = 0 and `t_right` at the
    /// last column.
    Ramp { t_left: f64, t_right: f64 },
}

impl Transmission {
    pub fn at(&self, x: usize, width: usize) -> f64 {
        match *self {
            Transmission::Uniform { t } => t,
            Transmission::Ramp { t_left, t_right } => {
                if width <= 1 {
                    t_left
                } else {
                    t_left + (t_right - t_left) * x as f64 / (width - 1) as f64
                }
            }
        }
    }

    pub fn min(&self) -> f64 {
        match *self {
            Transmission::Uniform { t } => t,
            Transmission::Ramp { t_left, t_right } => t_left.min(t_right),
        }
    }

    pub fn max(&self) -> f64 {
        match *self {
            Transmission::Uniform { t } => t,
            Transmission::Ramp { t_left, t_right } => t_left.max(t_right),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "operator", rename_all = "snake_case")]
pub enum DegradationParams {
    Noise {
        /// On the 0..255 scale.
        sigma: f64,
        seed: u64,
    },
    Haze {
        airlight: f64,
        transmission: Transmission,
    },
    Rain {
        streaks: usize,
        angle_deg: f64,
        length: f64,
        intensity: f64,
        blur_sigma: f64,
        seed: u64,
    },
    Low {
        gamma: f64,
        gain: f64,
    },
    Snow {
        flakes: usize,
        radius_min: f64,
        radius_max: f64,
        intensity: f64,
        seed: u64,
    },
}

/// One applied operator in a synthesis record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedComponent {
    pub symbol: BasisSymbol,
    #[serde(flatten)]
    pub params: DegradationParams,
}

/// Full parametric trace of a degraded image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub clean_ref: String,
    /// Composition order, innermost first. Empty once every component has
    /// been removed.
    pub applied: Vec<AppliedComponent>,
}

impl SynthesisRecord {
    pub fn is_empty(&self) -> bool {
        self.applied.is_empty()
    }

    /// Multiset of remaining symbols; `None` when nothing remains.
    pub fn label(&self) -> Option<DegradationLabel> {
        DegradationLabel::new(self.applied.iter().map(|c| c.symbol).collect()).ok()
    }

    pub fn symbols(&self) -> Vec<BasisSymbol> {
        self.applied.iter().map(|c| c.symbol).collect()
    }

    /// Index of the outermost occurrence of `symbol`.
    pub fn position(&self, symbol: BasisSymbol) -> Option<usize> {
        self.applied.iter().rposition(|c| c.symbol == symbol)
    }

    pub fn outermost(&self) -> Option<&AppliedComponent> {
        self.applied.last()
    }
}

/// Closed interval a parameter is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max <= self.min {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransmissionMode {
    Uniform,
    Ramp,
}

/// Parameter ranges used by [`synthesize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub airlight: Range,
    pub transmission_mode: TransmissionMode,
    pub transmission: Range,
    pub ramp_transmission: Range,
    /// Streaks per 256x256 pixels.
    pub rain_density: Range,
    pub rain_angle_deg: Range,
    pub rain_length: Range,
    pub rain_intensity: Range,
    pub rain_blur_sigma: Range,
    pub low_gamma: Range,
    pub low_gain: Range,
    /// Flakes per 256x256 pixels.
    pub snow_density: Range,
    pub snow_radius: Range,
    pub snow_intensity: Range,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            airlight: Range::new(0.8, 1.0),
            transmission_mode: TransmissionMode::Uniform,
            transmission: Range::new(0.4, 0.8),
            ramp_transmission: Range::new(0.3, 0.9),
            rain_density: Range::new(200.0, 400.0),
            rain_angle_deg: Range::new(70.0, 110.0),
            rain_length: Range::new(14.0, 32.0),
            rain_intensity: Range::new(0.3, 0.5),
            rain_blur_sigma: Range::new(0.6, 1.0),
            low_gamma: Range::new(1.5, 3.0),
            low_gain: Range::new(0.3, 0.7),
            snow_density: Range::new(150.0, 300.0),
            snow_radius: Range::new(1.5, 4.0),
            snow_intensity: Range::new(0.5, 0.9),
        }
    }
}

fn scaled_count(density: f64, height: usize, width: usize) -> usize {
    (density * (height * width) as f64 / 65536.0).round() as usize
}

#[inline]
fn signed_pow(v: f64, p: f64) -> f64 {
    v.signum() * v.abs().powf(p)
}

/// Gaussian field with std `sigma / 255`, one sample per image sample.
pub fn noise_field(height: usize, width: usize, channels: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let n = height * width * channels;
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("finite noise sigma");
    let mut rng = seed::rng(seed);
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

pub fn apply_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let field = noise_field(img.height(), img.width(), img.channels(), sigma, seed);
    img.with_data(img.data().iter().zip(&field).map(|(a, g)| a + g).collect())
}

fn validate_haze(airlight: f64, transmission: &Transmission) -> Result<()> {
    if !(airlight > 0.0 && airlight <= 1.0) {
        return Err(CorError::InvalidArgument(format!("airlight {airlight} outside (0, 1]")));
    }
    if !(transmission.min() > 0.0 && transmission.max() <= 1.0) {
        return Err(CorError::InvalidArgument(format!(
            "transmission {transmission:?} must lie in (0, 1]"
        )));
    }
    Ok(())
}

pub fn apply_haze(img: &Image, airlight: f64, transmission: &Transmission) -> Result<Image> {
    validate_haze(airlight, transmission)?;
    let (w, c) = (img.width(), img.channels());
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let t = transmission.at((i / c) % w, w);
        *v = *v * t + airlight * (1.0 - t);
    }
    Ok(out)
}

pub fn invert_haze(img: &Image, airlight: f64, transmission: &Transmission) -> Result<Image> {
    validate_haze(airlight, transmission)?;
    let (w, c) = (img.width(), img.channels());
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let t = transmission.at((i / c) % w, w);
        *v = (*v - airlight * (1.0 - t)) / t;
    }
    Ok(out)
}

fn validate_low(gamma: f64, gain: f64) -> Result<()> {
    if !(gamma >= 1.0 && gain > 0.0 && gain <= 1.0) {
        return Err(CorError::InvalidArgument(format!(
            "low-light needs gamma >= 1 and 0 < gain <= 1, got gamma {gamma}, gain {gain}"
        )));
    }
    Ok(())
}

pub fn apply_low_light(img: &Image, gamma: f64, gain: f64) -> Result<Image> {
    validate_low(gamma, gain)?;
    Ok(img.map(|v| gain * signed_pow(v, gamma)))
}

pub fn invert_low_light(img: &Image, gamma: f64, gain: f64) -> Result<Image> {
    validate_low(gamma, gain)?;
    Ok(img.map(|v| signed_pow(v / gain, 1.0 / gamma)))
}

/// Single-channel rain layer (`height * width`), every entry `>= 0`.
///
/// Each streak is a segment with a Gaussian cross-section of width
/// `blur_sigma` and peak `intensity` (jittered per streak); overlapping
/// streaks add.
#[allow(clippy::too_many_arguments)]
pub fn rain_layer(
    height: usize,
    width: usize,
    streaks: usize,
    angle_deg: f64,
    length: f64,
    intensity: f64,
    blur_sigma: f64,
    seed: u64,
) -> Vec<f64> {
    let mut layer = vec![0.0; height * width];
    if streaks == 0 || intensity <= 0.0 {
        return layer;
    }
    let mut rng = seed::rng(seed);
    let sigma = blur_sigma.max(0.3);
    let reach = 3.0 * sigma;
    for _ in 0..streaks {
        let cy = rng.random_range(-length..height as f64 + length);
        let cx = rng.random_range(-length..width as f64 + length);
        let theta = (angle_deg + rng.random_range(-4.0..=4.0)).to_radians();
        let len = length * rng.random_range(0.7..=1.3);
        let amp = intensity * rng.random_range(0.75..=1.0);
        // direction in image coordinates, y grows downward
        let (dx, dy) = (theta.cos(), theta.sin());
        let (x0, y0) = (cx - dx * len / 2.0, cy - dy * len / 2.0);
        let (x1, y1) = (cx + dx * len / 2.0, cy + dy * len / 2.0);
        let ymin = (y0.min(y1) - reach).floor().max(0.0) as usize;
        let ymax = ((y0.max(y1) + reach).ceil() as isize).min(height as isize - 1);
        let xmin = (x0.min(x1) - reach).floor().max(0.0) as usize;
        let xmax = ((x0.max(x1) + reach).ceil() as isize).min(width as isize - 1);
        if ymax < 0 || xmax < 0 {
            continue;
        }
        for y in ymin..=ymax as usize {
            for x in xmin..=xmax as usize {
                let (px, py) = (x as f64 - x0, y as f64 - y0);
                let along = px * dx + py * dy;
                if along < 0.0 || along > len {
                    continue;
                }
                let across = -px * dy + py * dx;
                if across.abs() > reach {
                    continue;
                }
                // taper the last 15% at each end
                let edge = (along.min(len - along) / (0.15 * len)).min(1.0);
                layer[y * width + x] += amp * edge * (-(across * across) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    layer
}

/// Single-channel snow layer of soft discs, every entry `>= 0`.
pub fn snow_layer(
    height: usize,
    width: usize,
    flakes: usize,
    radius_min: f64,
    radius_max: f64,
    intensity: f64,
    seed: u64,
) -> Vec<f64> {
    let mut layer = vec![0.0; height * width];
    if flakes == 0 || intensity <= 0.0 {
        return layer;
    }
    let mut rng = seed::rng(seed);
    for _ in 0..flakes {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let r = if radius_max > radius_min {
            rng.random_range(radius_min..=radius_max)
        } else {
            radius_min
        };
        let amp = intensity * rng.random_range(0.6..=1.0);
        let reach = 1.5 * r;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(height - 1);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (r * r);
                if d2 < 2.25 {
                    layer[y * width + x] += amp * (-d2 * d2).exp();
                }
            }
        }
    }
    layer
}

fn add_layer(img: &Image, layer: &[f64], sign: f64) -> Image {
    let c = img.channels();
    img.with_data(
        img.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + sign * layer[i / c])
            .collect(),
    )
}

/// The additive layer of a rain or snow component, one value per pixel.
pub fn additive_layer(params: &DegradationParams, height: usize, width: usize) -> Option<Vec<f64>> {
    match *params {
        DegradationParams::Rain {
            streaks,
            angle_deg,
            length,
            intensity,
            blur_sigma,
            seed,
        } => Some(rain_layer(height, width, streaks, angle_deg, length, intensity, blur_sigma, seed)),
        DegradationParams::Snow {
            flakes,
            radius_min,
            radius_max,
            intensity,
            seed,
        } => Some(snow_layer(height, width, flakes, radius_min, radius_max, intensity, seed)),
        _ => None,
    }
}

pub fn apply_rain(img: &Image, params: &DegradationParams) -> Result<Image> {
    match params {
        DegradationParams::Rain { .. } => {
            let layer = additive_layer(params, img.height(), img.width()).expect("rain layer");
            Ok(add_layer(img, &layer, 1.0))
        }
        other => Err(CorError::InvalidArgument(format!("not rain parameters: {other:?}"))),
    }
}

pub fn apply_snow(img: &Image, params: &DegradationParams) -> Result<Image> {
    match params {
        DegradationParams::Snow { .. } => {
            let layer = additive_layer(params, img.height(), img.width()).expect("snow layer");
            Ok(add_layer(img, &layer, 1.0))
        }
        other => Err(CorError::InvalidArgument(format!("not snow parameters: {other:?}"))),
    }
}

/// Forward operator of one recorded component.
pub fn apply_params(img: &Image, params: &DegradationParams) -> Result<Image> {
    match params {
        DegradationParams::Noise { sigma, seed } => Ok(apply_noise(img, *sigma, *seed)),
        DegradationParams::Haze {
            airlight,
            transmission,
        } => apply_haze(img, *airlight, transmission),
        DegradationParams::Rain { .. } => apply_rain(img, params),
        DegradationParams::Snow { .. } => apply_snow(img, params),
        DegradationParams::Low { gamma, gain } => apply_low_light(img, *gamma, *gain),
    }
}

/// Exact inverse of [`apply_params`].
pub fn invert_params(img: &Image, params: &DegradationParams) -> Result<Image> {
    match params {
        DegradationParams::Noise { sigma, seed } => {
            if *sigma == 0.0 {
                return Ok(img.clone());
            }
            let field = noise_field(img.height(), img.width(), img.channels(), *sigma, *seed);
            Ok(img.with_data(img.data().iter().zip(&field).map(|(a, g)| a - g).collect()))
        }
        DegradationParams::Haze {
            airlight,
            transmission,
        } => invert_haze(img, *airlight, transmission),
        DegradationParams::Rain { .. } | DegradationParams::Snow { .. } => {
            let layer = additive_layer(params, img.height(), img.width()).expect("additive layer");
            Ok(add_layer(img, &layer, -1.0))
        }
        DegradationParams::Low { gamma, gain } => invert_low_light(img, *gamma, *gain),
    }
}

/// Applies `components` in order.
pub fn replay(clean: &Image, components: &[AppliedComponent]) -> Result<Image> {
    components
        .iter()
        .try_fold(clean.clone(), |img, c| apply_params(&img, &c.params))
}

/// Draws the parameters of one component. `component_seed` fixes both the
/// parameter draw and the stochastic field.
pub fn draw_params(
    symbol: BasisSymbol,
    config: &SynthesisConfig,
    component_seed: u64,
    height: usize,
    width: usize,
) -> Result<DegradationParams> {
    let mut rng = seed::rng(seed::derive(component_seed, 0));
    let field_seed = seed::derive(component_seed, 1);
    Ok(match symbol {
        BasisSymbol::Noise15 | BasisSymbol::Noise25 | BasisSymbol::Noise50 => DegradationParams::Noise {
            sigma: symbol.noise_sigma().expect("noise symbol"),
            seed: field_seed,
        },
        BasisSymbol::Haze => {
            let airlight = config.airlight.sample(&mut rng);
            let transmission = match config.transmission_mode {
                TransmissionMode::Uniform => Transmission::Uniform {
                    t: config.transmission.sample(&mut rng),
                },
                TransmissionMode::Ramp => Transmission::Ramp {
                    t_left: config.ramp_transmission.sample(&mut rng),
                    t_right: config.ramp_transmission.sample(&mut rng),
                },
            };
            DegradationParams::Haze {
                airlight,
                transmission,
            }
        }
        BasisSymbol::Rain => DegradationParams::Rain {
            streaks: scaled_count(config.rain_density.sample(&mut rng), height, width),
            angle_deg: config.rain_angle_deg.sample(&mut rng),
            length: config.rain_length.sample(&mut rng),
            intensity: config.rain_intensity.sample(&mut rng),
            blur_sigma: config.rain_blur_sigma.sample(&mut rng),
            seed: field_seed,
        },
        BasisSymbol::Low => DegradationParams::Low {
            gamma: config.low_gamma.sample(&mut rng),
            gain: config.low_gain.sample(&mut rng),
        },
        BasisSymbol::Snow => {
            let a = config.snow_radius.sample(&mut rng);
            let b = config.snow_radius.sample(&mut rng);
            DegradationParams::Snow {
                flakes: scaled_count(config.snow_density.sample(&mut rng), height, width),
                radius_min: a.min(b),
                radius_max: a.max(b),
                intensity: config.snow_intensity.sample(&mut rng),
                seed: field_seed,
            }
        }
        BasisSymbol::Abstract(_) => {
            return Err(CorError::InvalidArgument(format!(
                "symbol `{symbol}` has no synthesis operator"
            )))
        }
    })
}

/// Degrades `clean` with every component of `label`, in composition order.
///
/// Component seeds depend on the symbol and its occurrence count, not on the
/// order the label was written in, so permutation-equal labels give identical
/// output.
pub fn synthesize(
    clean: &Image,
    label: &DegradationLabel,
    config: &SynthesisConfig,
    master_seed: u64,
) -> Result<(Image, SynthesisRecord)> {
    synthesize_with_ref(clean, label, config, master_seed, "")
}

pub fn synthesize_with_ref(
    clean: &Image,
    label: &DegradationLabel,
    config: &SynthesisConfig,
    master_seed: u64,
    clean_ref: &str,
) -> Result<(Image, SynthesisRecord)> {
    let mut occurrences: HashMap<BasisSymbol, u64> = HashMap::new();
    let mut applied = Vec::with_capacity(label.order());
    for symbol in label.composition_order() {
        let k = occurrences.entry(symbol).or_default();
        let stream = seed::derive_str(*k, &symbol.name());
        *k += 1;
        let params = draw_params(
            symbol,
            config,
            seed::derive(master_seed, stream),
            clean.height(),
            clean.width(),
        )?;
        applied.push(AppliedComponent { symbol, params });
    }
    let degraded = replay(clean, &applied)?;
    Ok((
        degraded,
        SynthesisRecord {
            clean_ref: clean_ref.to_string(),
            applied,
        },
    ))
}

/// Saturated colours whose smallest channel sits at 0.05, so clean content
/// obeys the dark-channel prior. Gradient endpoints are drawn from the dark and
/// bright groups sharing a minimum channel, which keeps their blends dark in
/// that channel too.
const DARK_BLUE_MIN: [[f64; 3]; 2] = [[0.30, 0.12, 0.05], [0.12, 0.20, 0.05]];
const BRIGHT_BLUE_MIN: [[f64; 3]; 3] = [[0.95, 0.88, 0.05], [0.70, 0.90, 0.05], [0.95, 0.60, 0.05]];
const DARK_RED_MIN: [[f64; 3]; 2] = [[0.05, 0.12, 0.45], [0.05, 0.22, 0.30]];
const BRIGHT_RED_MIN: [[f64; 3]; 2] = [[0.05, 0.85, 0.80], [0.05, 0.90, 0.45]];
const PALETTE: [[f64; 3]; 12] = [
    [0.85, 0.10, 0.05],
    [0.10, 0.70, 0.05],
    [0.05, 0.18, 0.85],
    [0.95, 0.88, 0.05],
    [0.80, 0.05, 0.70],
    [0.05, 0.85, 0.80],
    [0.95, 0.60, 0.05],
    [0.30, 0.12, 0.05],
    [0.35, 0.05, 0.55],
    [0.05, 0.45, 0.40],
    [0.70, 0.90, 0.05],
    [0.05, 0.12, 0.45],
];

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Ellipse { cy: f64, cx: f64, a: f64, b: f64, rot: f64 },
    Rect { cy: f64, cx: f64, hh: f64, hw: f64, rot: f64 },
}

impl Shape {
    /// Signed distance approximation, negative inside.
    fn distance(&self, y: f64, x: f64) -> f64 {
        match *self {
            Shape::Disc { cy, cx, r } => ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r,
            Shape::Ellipse { cy, cx, a, b, rot } => {
                let (s, c) = rot.sin_cos();
                let (u, v) = ((x - cx) * c + (y - cy) * s, -(x - cx) * s + (y - cy) * c);
                let k = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                (k - 1.0) * a.min(b)
            }
            Shape::Rect { cy, cx, hh, hw, rot } => {
                let (s, c) = rot.sin_cos();
                let (u, v) = ((x - cx) * c + (y - cy) * s, -(x - cx) * s + (y - cy) * c);
                (u.abs() - hw).max(v.abs() - hh)
            }
        }
    }
}

/// Jitters every channel but the minimum one.
fn jitter<R: Rng + ?Sized>(base: [f64; 3], rng: &mut R) -> [f64; 3] {
    let lo = base.iter().copied().fold(f64::INFINITY, f64::min);
    base.map(|v| {
        if v == lo {
            v
        } else {
            (v + rng.random_range(-0.05..=0.05)).clamp(0.05, 0.95)
        }
    })
}

fn pick<R: Rng + ?Sized>(set: &[[f64; 3]], rng: &mut R) -> [f64; 3] {
    jitter(set[rng.random_range(0..set.len())], rng)
}

/// Procedural clean image: smooth dark-to-bright gradient, band-limited
/// sinusoidal texture, a handful of anti-aliased shapes and one bright
/// window, clamped to [0.05, 0.95].
pub fn gen_clean(seed_value: u64, height: usize, width: usize) -> Result<Image> {
    if height < 64 || width < 64 {
        return Err(CorError::InvalidArgument(format!(
            "clean images need at least 64x64, got {height}x{width}"
        )));
    }
    let mut rng = seed::rng(seed_value);
    let (hf, wf) = (height as f64, width as f64);

    let (c0, c1) = if rng.random_bool(0.5) {
        (pick(&DARK_BLUE_MIN, &mut rng), pick(&BRIGHT_BLUE_MIN, &mut rng))
    } else {
        (pick(&DARK_RED_MIN, &mut rng), pick(&BRIGHT_RED_MIN, &mut rng))
    };
    let grad_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gs, gc) = grad_angle.sin_cos();

    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let wavelength = rng.random_range(8.0..40.0);
            let dir: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.01..0.03);
            let tint = [
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..1.0),
                rng.random_range(0.5..1.0),
            ];
            (std::f64::consts::TAU / wavelength, dir, phase, amp, tint)
        })
        .collect();

    let scale = hf.min(wf);
    let n_shapes = rng.random_range(4..=8);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let cy = rng.random_range(0.0..hf);
            let cx = rng.random_range(0.0..wf);
            let size = rng.random_range(0.08..0.25) * scale;
            let rot = rng.random_range(0.0..std::f64::consts::PI);
            let shape = match rng.random_range(0..3) {
                0 => Shape::Disc { cy, cx, r: size },
                1 => Shape::Ellipse {
                    cy,
                    cx,
                    a: size,
                    b: size * rng.random_range(0.4..0.9),
                    rot,
                },
                _ => Shape::Rect {
                    cy,
                    cx,
                    hh: size * rng.random_range(0.4..1.0),
                    hw: size,
                    rot,
                },
            };
            (shape, pick(&PALETTE, &mut rng))
        })
        .collect();

    // bright, nearly neutral window drawn over the shapes; it plays the part
    // of sky, the one region where the dark-channel prior does not hold
    let side = (rng.random_range(0.04..0.08) * hf * wf).sqrt();
    let aspect: f64 = rng.random_range(0.6..1.6);
    let (sky_hh, sky_hw) = (side / aspect.sqrt() / 2.0, side * aspect.sqrt() / 2.0);
    let reach = sky_hh.hypot(sky_hw);
    let sky = Shape::Rect {
        cy: rng.random_range(reach.min(hf / 2.0)..=(hf - reach).max(hf / 2.0)),
        cx: rng.random_range(reach.min(wf / 2.0)..=(wf - reach).max(wf / 2.0)),
        hh: sky_hh,
        hw: sky_hw,
        rot: rng.random_range(0.0..std::f64::consts::PI),
    };
    let sky_colour = [
        rng.random_range(0.86..0.95),
        rng.random_range(0.86..0.95),
        rng.random_range(0.86..0.95),
    ];

    let diag = (hf * hf + wf * wf).sqrt();
    Ok(Image::from_fn(height, width, 3, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let s = (((xf - wf / 2.0) * gc + (yf - hf / 2.0) * gs) / diag + 0.5).clamp(0.0, 1.0);
        let mut v = c0[c] * (1.0 - s) + c1[c] * s;
        for (shape, colour) in &shapes {
            // one-pixel anti-aliased edge
            let cover = (0.5 - shape.distance(yf, xf)).clamp(0.0, 1.0);
            v = v * (1.0 - cover) + colour[c] * cover;
        }
        let cover = (0.5 - sky.distance(yf, xf)).clamp(0.0, 1.0);
        v = v * (1.0 - cover) + sky_colour[c] * cover;
        for (k, dir, phase, amp, tint) in &waves {
            let (ds, dc) = dir.sin_cos();
            v += amp * tint[c] * (k * (xf * dc + yf * ds) + phase).sin();
        }
        v.clamp(0.05, 0.95)
    }))
}

/// Where clean sources come from when building a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CleanSource {
    Procedural { height: usize, width: usize },
    /// PNG files from a directory, sorted by name.
    Directory { path: PathBuf },
}

impl Default for CleanSource {
    fn default() -> Self {
        CleanSource::Procedural {
            height: 256,
            width: 256,
        }
    }
}

/// The twelve category labels of the benchmark layout.
pub fn default_categories() -> Vec<DegradationLabel> {
    [
        "n1", "n2", "n5", "r", "h", "h+r", "h+n1", "h+n5", "r+n1", "r+n5", "h+r+n1", "h+r+n5",
    ]
    .iter()
    .map(|s| s.parse().expect("static label"))
    .collect()
}

/// Directory name of a category: short symbols in composition order.
pub fn category_dir(label: &DegradationLabel) -> String {
    DegradationLabel::new(label.composition_order())
        .expect("non-empty label")
        .short()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean: String,
    pub degraded: String,
    pub label: DegradationLabel,
    pub record: SynthesisRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CorError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| CorError::io(path, e))
    }

    /// Entry whose degraded image has the given file name or relative path.
    pub fn find_degraded(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.degraded == name)
            .or_else(|| self.entries.iter().find(|e| e.degraded.ends_with(&format!("/{name}"))))
    }
}

fn clean_sources(source: &CleanSource, count: usize, seed_value: u64) -> Result<Vec<Image>> {
    match source {
        CleanSource::Procedural { height, width } => (0..count)
            .into_par_iter()
            .map(|i| Ok(gen_clean(seed::derive(seed_value, i as u64), *height, *width)?.quantized()))
            .collect(),
        CleanSource::Directory { path } => {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| CorError::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            if files.len() < count {
                return Err(CorError::InvalidArgument(format!(
                    "{} holds {} PNGs, need {count}",
                    path.display(),
                    files.len()
                )));
            }
            files[..count].iter().map(image::load_png).collect()
        }
    }
}

/// Writes `clean/NNNN.png`, `<category>/NNNN.png` and `manifest.json` under
/// `out_dir`. Clean sources are quantized before degradation, so replaying a
/// record on the stored clean PNG reproduces the stored degraded PNG exactly.
pub fn build_dataset(
    out_dir: impl AsRef<Path>,
    categories: &[DegradationLabel],
    per_category: usize,
    seed_value: u64,
    config: &SynthesisConfig,
    source: &CleanSource,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| CorError::io(p, e));
    mkdir(&out_dir.join("clean"))?;

    let cleans = clean_sources(source, per_category, seed::derive(seed_value, 0xC1EA))?;
    for (i, clean) in cleans.iter().enumerate() {
        image::save_png(clean, out_dir.join("clean").join(format!("{i:04}.png")))?;
    }

    let mut entries = Vec::with_capacity(categories.len() * per_category);
    for label in categories {
        let dir = category_dir(label);
        mkdir(&out_dir.join(&dir))?;
        let stream = seed::derive_str(seed_value, &label.canonical().to_string());
        let batch: Vec<ManifestEntry> = cleans
            .par_iter()
            .enumerate()
            .map(|(i, clean)| {
                let clean_rel = format!("clean/{i:04}.png");
                let degraded_rel = format!("{dir}/{i:04}.png");
                let (degraded, record) =
                    synthesize_with_ref(clean, label, config, seed::derive(stream, i as u64), &clean_rel)?;
                image::save_png(&degraded, out_dir.join(&degraded_rel))?;
                Ok(ManifestEntry {
                    clean: clean_rel,
                    degraded: degraded_rel,
                    label: label.clone(),
                    record,
                })
            })
            .collect::<Result<_>>()?;
        entries.extend(batch);
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: seed_value,
        entries,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(s: &str) -> DegradationLabel {
        s.parse().unwrap()
    }

    fn clean() -> Image {
        gen_clean(5, 96, 80).unwrap()
    }

    fn std_dev(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn noise_zero_sigma_identity() {
        let c = clean();
        assert_eq!(apply_noise(&c, 0.0, 3), c);
    }

    #[test]
    fn noise_std_matches_sigma() {
        let c = gen_clean(1, 256, 256).unwrap();
        let out = apply_noise(&c, 25.0, 17);
        let diff: Vec<f64> = out.data().iter().zip(c.data()).map(|(a, b)| a - b).collect();
        let s = std_dev(&diff);
        assert!((s / (25.0 / 255.0) - 1.0).abs() < 0.03, "std {s}");
        assert_eq!(apply_noise(&c, 25.0, 17), out);
    }

    #[test]
    fn haze_formula() {
        let c = clean();
        assert_eq!(apply_haze(&c, 0.8, &Transmission::Uniform { t: 1.0 }).unwrap(), c);
        let black = Image::filled(4, 4, 3, 0.0);
        let out = apply_haze(&black, 0.8, &Transmission::Uniform { t: 0.5 }).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
        assert!(apply_haze(&c, 0.8, &Transmission::Uniform { t: 0.0 }).is_err());
        assert!(apply_haze(&c, 0.0, &Transmission::Uniform { t: 0.5 }).is_err());
    }

    #[test]
    fn haze_mean_moves_toward_airlight() {
        let c = clean();
        let a = 0.9;
        let mut last = (c.mean() - a).abs();
        for t in [0.8, 0.6, 0.4] {
            let m = apply_haze(&c, a, &Transmission::Uniform { t }).unwrap().mean();
            assert!((m - a).abs() < last);
            last = (m - a).abs();
        }
    }

    #[test]
    fn ramp_transmission_inverts() {
        let c = clean();
        let tr = Transmission::Ramp {
            t_left: 0.3,
            t_right: 0.9,
        };
        let h = apply_haze(&c, 0.85, &tr).unwrap();
        assert!(invert_haze(&h, 0.85, &tr).unwrap().max_abs_diff(&c).unwrap() < 1e-12);
        assert_eq!(tr.at(0, 80), 0.3);
        assert!((tr.at(79, 80) - 0.9).abs() < 1e-15);
    }

    fn rain(streaks: usize, seed: u64) -> DegradationParams {
        DegradationParams::Rain {
            streaks,
            angle_deg: 80.0,
            length: 20.0,
            intensity: 0.3,
            blur_sigma: 0.8,
            seed,
        }
    }

    #[test]
    fn rain_is_additive_and_seeded() {
        let c = clean();
        assert_eq!(apply_rain(&c, &rain(0, 1)).unwrap(), c);
        let out = apply_rain(&c, &rain(60, 4)).unwrap();
        let layer = additive_layer(&rain(60, 4), c.height(), c.width()).unwrap();
        assert!(layer.iter().all(|&v| v >= 0.0));
        for y in 0..c.height() {
            for x in 0..c.width() {
                for ch in 0..3 {
                    assert_eq!(out.get(y, x, ch) - c.get(y, x, ch), {
                        let v = c.get(y, x, ch) + layer[y * c.width() + x];
                        v - c.get(y, x, ch)
                    });
                }
            }
        }
        assert_eq!(apply_rain(&c, &rain(60, 4)).unwrap(), out);
    }

    #[test]
    fn rain_mean_grows_with_count() {
        let mut last = 0.0;
        for n in [50, 150, 400] {
            let layer = rain_layer(256, 256, n, 95.0, 20.0, 0.3, 0.8, 9);
            let m = layer.iter().sum::<f64>() / layer.len() as f64;
            assert!(m > last);
            last = m;
        }
    }

    #[test]
    fn snow_layer_non_negative() {
        let layer = snow_layer(64, 64, 40, 1.5, 4.0, 0.8, 2);
        assert!(layer.iter().all(|&v| v >= 0.0));
        assert!(layer.iter().any(|&v| v > 0.1));
        assert!(snow_layer(64, 64, 0, 1.5, 4.0, 0.8, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn low_light_formula() {
        let c = clean();
        assert_eq!(apply_low_light(&c, 1.0, 1.0).unwrap(), c);
        let g = Image::filled(3, 3, 3, 0.81);
        let out = apply_low_light(&g, 2.0, 0.5).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.32805).abs() < 1e-12));
        assert!(apply_low_light(&c, 2.0, 0.5).unwrap().mean() < c.mean());
        assert!(apply_low_light(&c, 0.5, 0.5).is_err());
        assert!(apply_low_light(&c, 2.0, 0.0).is_err());
    }

    #[test]
    fn synthesize_composes_in_physical_order() {
        let c = clean();
        let cfg = SynthesisConfig::default();
        let (out, rec) = synthesize(&c, &l("h+n1"), &cfg, 77).unwrap();
        assert_eq!(rec.symbols(), vec![BasisSymbol::Haze, BasisSymbol::Noise15]);
        let manual = apply_params(&apply_params(&c, &rec.applied[0].params).unwrap(), &rec.applied[1].params).unwrap();
        assert_eq!(out, manual);
        let (_, single) = synthesize(&c, &l("n1"), &cfg, 77).unwrap();
        assert_eq!(single.applied.len(), 1);
        let (swapped, _) = synthesize(&c, &l("n1+h"), &cfg, 77).unwrap();
        assert_eq!(swapped, out);
        assert_eq!(rec.label().unwrap(), l("haze+noise15"));
    }

    #[test]
    fn reverse_inversion_recovers_clean() {
        let c = clean();
        let cfg = SynthesisConfig::default();
        for (i, label) in ["l+h+r+n5", "s+r+h", "l+s+n2", "h+n1+n1"].iter().enumerate() {
            let (out, rec) = synthesize(&c, &l(label), &cfg, i as u64).unwrap();
            assert!(out.all_finite());
            let back = rec
                .applied
                .iter()
                .rev()
                .try_fold(out, |img, comp| invert_params(&img, &comp.params))
                .unwrap();
            assert!(back.max_abs_diff(&c).unwrap() <= 1e-9, "{label}");
        }
    }

    #[test]
    fn abstract_symbols_cannot_be_synthesized() {
        assert!(synthesize(&clean(), &l("x1"), &SynthesisConfig::default(), 0).is_err());
    }

    #[test]
    fn clean_generator_properties() {
        let a = gen_clean(42, 128, 128).unwrap();
        assert_eq!(a, gen_clean(42, 128, 128).unwrap());
        assert!(a.data().iter().all(|&v| (0.05..=0.95).contains(&v)));
        let mut luma = a.luma();
        luma.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let p = |q: f64| luma[((luma.len() - 1) as f64 * q) as usize];
        assert!(gen_clean(1, 32, 128).is_err());
        // spread is checked over many seeds in the integration tests
        assert!(p(0.99) > p(0.01));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<SynthesisConfig>(r#"{"airlite": {"min": 0.1, "max": 0.2}}"#);
        assert!(err.is_err());
        let ok: SynthesisConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(ok, SynthesisConfig::default());
    }

    #[test]
    fn record_serializes_flat() {
        let (_, rec) = synthesize(&clean(), &l("h+r"), &SynthesisConfig::default(), 3).unwrap();
        let v = serde_json::to_value(&rec).unwrap();
        let first = &v["applied"][0];
        assert_eq!(first["symbol"], "haze");
        assert!(first["airlight"].is_number());
        assert_eq!(v["applied"][1]["symbol"], "rain");
        assert!(v["applied"][1]["seed"].is_u64());
        let back: SynthesisRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, rec);
    }
}
