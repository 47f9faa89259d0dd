//! Training and inference cost ratios of k-order models.
//!
//! With `n` isolated degradations, a k-order model is trained on every basis
//! of order at most `k`; `phi(n, k)` counts those bases and `tr(n, k)` is the
//! per-epoch training cost relative to a 1-order model. `varphi(n, k)` is the
//! total number of restoration steps a k-order model needs over all `2^n - 1`
//! composites (each composite of order `t` takes `ceil(t / k)` steps), and
//! `ir(n, k)` is the resulting inference cost relative to an n-order model.
//!
//! The inference ratio assumes every composite is equally likely and that the
//! model always removes the highest-order basis available. All values are
//! exact: integers are `u128` and ratios are reduced fractions.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::path::Path;

use serde::Serialize;

use crate::error::{CorError, Result};

/// Largest `n` supported by the exact arithmetic.
pub const MAX_N: u32 = 64;

/// Reduced fraction with a positive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RatioValue {
    numerator: u128,
    denominator: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl RatioValue {
    pub fn new(numerator: u128, denominator: u128) -> Result<Self> {
        if denominator == 0 {
            return Err(CorError::InvalidArgument("zero denominator".into()));
        }
        let g = gcd(numerator, denominator).max(1);
        Ok(Self {
            numerator: numerator / g,
            denominator: denominator / g,
        })
    }

    pub fn integer(v: u128) -> Self {
        Self {
            numerator: v,
            denominator: 1,
        }
    }

    pub fn numerator(&self) -> u128 {
        self.numerator
    }

    pub fn denominator(&self) -> u128 {
        self.denominator
    }

    pub fn to_f64(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

/// Compares `a/b` with `c/d` through their continued-fraction expansions, so
/// no cross product can overflow.
fn cmp_fractions(mut a: u128, mut b: u128, mut c: u128, mut d: u128) -> Ordering {
    let mut flipped = false;
    loop {
        let (qa, ra) = (a / b, a % b);
        let (qc, rc) = (c / d, c % d);
        let ord = match qa.cmp(&qc) {
            Ordering::Equal => match (ra == 0, rc == 0) {
                (true, true) => Ordering::Equal,
                (true, false) => Ordering::Less,
                (false, true) => Ordering::Greater,
                (false, false) => {
                    // a/b = q + ra/b; compare ra/b vs rc/d  <=>  d/rc vs b/ra
                    (a, b, c, d) = (b, ra, d, rc);
                    flipped = !flipped;
                    continue;
                }
            },
            o => o,
        };
        return if flipped { ord.reverse() } else { ord };
    }
}

impl Ord for RatioValue {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_fractions(self.numerator, self.denominator, other.numerator, other.denominator)
    }
}

impl PartialOrd for RatioValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for RatioValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denominator == 1 {
            write!(f, "{}", self.numerator)
        } else {
            write!(f, "{}/{}", self.numerator, self.denominator)
        }
    }
}

fn check_range(n: u32, k: u32) -> Result<()> {
    if k < 1 || k > n || n > MAX_N {
        return Err(CorError::InvalidArgument(format!(
            "expected 1 <= k <= n <= {MAX_N}, got n = {n}, k = {k}"
        )));
    }
    Ok(())
}

/// `C(n, k)` for `n <= 64`.
pub fn binomial(n: u32, k: u32) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

fn composites(n: u32) -> u128 {
    (1u128 << n) - 1
}

/// Number of bases of order `<= k` over `n` isolated degradations.
pub fn phi(n: u32, k: u32) -> Result<u128> {
    check_range(n, k)?;
    Ok((1..=k).map(|t| binomial(n, t)).sum())
}

/// Training ratio `phi(n, k) / n`.
pub fn tr(n: u32, k: u32) -> Result<RatioValue> {
    RatioValue::new(phi(n, k)?, n as u128)
}

/// Total restoration steps of a k-order model over all composites.
pub fn varphi(n: u32, k: u32) -> Result<u128> {
    check_range(n, k)?;
    Ok((1..=n).map(|t| binomial(n, t) * t.div_ceil(k) as u128).sum())
}

/// Inference ratio `varphi(n, k) / (2^n - 1)`.
pub fn ir(n: u32, k: u32) -> Result<RatioValue> {
    RatioValue::new(varphi(n, k)?, composites(n))
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub k: u32,
    pub tr_exact_num: String,
    pub tr_exact_den: String,
    pub tr_float: f64,
    pub ir_exact_num: String,
    pub ir_exact_den: String,
    pub ir_float: f64,
}

pub fn curves(n: u32) -> Result<Vec<CurveRow>> {
    if n < 2 {
        return Err(CorError::InvalidArgument(format!("curves need n >= 2, got {n}")));
    }
    (1..=n)
        .map(|k| {
            let t = tr(n, k)?;
            let i = ir(n, k)?;
            Ok(CurveRow {
                k,
                tr_exact_num: t.numerator().to_string(),
                tr_exact_den: t.denominator().to_string(),
                tr_float: t.to_f64(),
                ir_exact_num: i.numerator().to_string(),
                ir_exact_den: i.denominator().to_string(),
                ir_float: i.to_f64(),
            })
        })
        .collect()
}

/// Writes the `k = 1..=n` curves as CSV with a header row.
pub fn emit_curves(n: u32, path: impl AsRef<Path>) -> Result<Vec<CurveRow>> {
    let rows = curves(n)?;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CorError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CorError::io(path, e))?;
    Ok(rows)
}
