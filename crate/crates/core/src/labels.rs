//! Degradation labels and basis sets.
//!
//! A label is an ordered sequence of isolated degradation symbols, e.g.
//! `haze+rain+noise15`. Combination is concatenation, and two labels are equal
//! when one is a permutation of the other, so equality, hashing and ordering
//! all go through the sorted multiset of parts (the canonical key).
//!
//! Symbols sort in registry order (`noise15 < noise25 < noise50 < rain < haze
//! < low < snow`, then abstract symbols), which is also the order used to
//! break ties between equally short decompositions.

use std::cmp::{Ordering, Reverse};
use std::collections::BTreeSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CorError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BasisSymbol {
    Noise15,
    Noise25,
    Noise50,
    Rain,
    Haze,
    Low,
    Snow,
    /// Placeholder symbol `x<i>` with no synthesis operator; used for pure
    /// combinatorics over more isolated degradations than the registry has.
    Abstract(u8),
}

impl BasisSymbol {
    /// The concrete registry, in canonical order.
    pub const REGISTRY: [BasisSymbol; 7] = [
        BasisSymbol::Noise15,
        BasisSymbol::Noise25,
        BasisSymbol::Noise50,
        BasisSymbol::Rain,
        BasisSymbol::Haze,
        BasisSymbol::Low,
        BasisSymbol::Snow,
    ];

    pub fn name(&self) -> String {
        match self {
            BasisSymbol::Noise15 => "noise15".into(),
            BasisSymbol::Noise25 => "noise25".into(),
            BasisSymbol::Noise50 => "noise50".into(),
            BasisSymbol::Rain => "rain".into(),
            BasisSymbol::Haze => "haze".into(),
            BasisSymbol::Low => "low".into(),
            BasisSymbol::Snow => "snow".into(),
            BasisSymbol::Abstract(i) => format!("x{i}"),
        }
    }

    /// Short form used by the dataset category names (`n1`, `h`, ...).
    pub fn short(&self) -> String {
        match self {
            BasisSymbol::Noise15 => "n1".into(),
            BasisSymbol::Noise25 => "n2".into(),
            BasisSymbol::Noise50 => "n5".into(),
            BasisSymbol::Rain => "r".into(),
            BasisSymbol::Haze => "h".into(),
            BasisSymbol::Low => "l".into(),
            BasisSymbol::Snow => "s".into(),
            BasisSymbol::Abstract(i) => format!("x{i}"),
        }
    }

    /// Noise standard deviation on the 0..255 scale, for the noise symbols.
    pub fn noise_sigma(&self) -> Option<f64> {
        match self {
            BasisSymbol::Noise15 => Some(15.0),
            BasisSymbol::Noise25 => Some(25.0),
            BasisSymbol::Noise50 => Some(50.0),
            _ => None,
        }
    }

    pub fn is_concrete(&self) -> bool {
        !matches!(self, BasisSymbol::Abstract(_))
    }

    /// Physical layer, innermost first: illumination, atmosphere,
    /// precipitation, sensor.
    pub fn tier(&self) -> u8 {
        match self {
            BasisSymbol::Low => 0,
            BasisSymbol::Haze => 1,
            BasisSymbol::Rain | BasisSymbol::Snow => 2,
            BasisSymbol::Noise15 | BasisSymbol::Noise25 | BasisSymbol::Noise50 => 3,
            BasisSymbol::Abstract(_) => 4,
        }
    }
}

impl fmt::Display for BasisSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for BasisSymbol {
    type Err = CorError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Ok(match t.as_str() {
            "noise15" | "n1" => BasisSymbol::Noise15,
            "noise25" | "n2" => BasisSymbol::Noise25,
            "noise50" | "n5" => BasisSymbol::Noise50,
            "rain" | "r" => BasisSymbol::Rain,
            "haze" | "h" => BasisSymbol::Haze,
            "low" | "l" | "lowlight" | "low-light" => BasisSymbol::Low,
            "snow" | "s" => BasisSymbol::Snow,
            _ => match t.strip_prefix('x').and_then(|d| d.parse::<u8>().ok()) {
                Some(i) => BasisSymbol::Abstract(i),
                None => return Err(CorError::UnknownSymbol(s.to_string())),
            },
        })
    }
}

impl TryFrom<String> for BasisSymbol {
    type Error = CorError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BasisSymbol> for String {
    fn from(s: BasisSymbol) -> String {
        s.name()
    }
}

/// Non-empty sequence of isolated degradations with multiset equality.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DegradationLabel {
    parts: Vec<BasisSymbol>,
}

impl DegradationLabel {
    pub fn new(parts: Vec<BasisSymbol>) -> Result<Self> {
        if parts.is_empty() {
            return Err(CorError::InvalidArgument("degradation labels cannot be empty".into()));
        }
        Ok(Self { parts })
    }

    pub fn single(symbol: BasisSymbol) -> Self {
        Self { parts: vec![symbol] }
    }

    pub fn parts(&self) -> &[BasisSymbol] {
        &self.parts
    }

    pub fn order(&self) -> usize {
        self.parts.len()
    }

    pub fn canonical_key(&self) -> Vec<BasisSymbol> {
        let mut key = self.parts.clone();
        key.sort();
        key
    }

    /// The label written in canonical order, e.g. `rain+haze`.
    pub fn canonical(&self) -> DegradationLabel {
        DegradationLabel {
            parts: self.canonical_key(),
        }
    }

    /// String concatenation with a `+` separator.
    pub fn combine(&self, other: &DegradationLabel) -> DegradationLabel {
        let mut parts = self.parts.clone();
        parts.extend_from_slice(&other.parts);
        DegradationLabel { parts }
    }

    /// Permutation equality.
    pub fn equals(&self, other: &DegradationLabel) -> bool {
        self.canonical_key() == other.canonical_key()
    }

    pub fn contains_symbol(&self, symbol: BasisSymbol) -> bool {
        self.parts.contains(&symbol)
    }

    /// True when `other` is a sub-multiset of `self`.
    pub fn contains(&self, other: &DegradationLabel) -> bool {
        multiset_minus(&self.canonical_key(), &other.canonical_key()).is_some()
    }

    /// Parts in composition (physical) order, innermost first.
    pub fn composition_order(&self) -> Vec<BasisSymbol> {
        let mut parts = self.parts.clone();
        parts.sort_by_key(|s| (s.tier(), *s));
        parts
    }

    /// Short form (`h+r+n1`), in the order the parts were written.
    pub fn short(&self) -> String {
        self.parts.iter().map(|s| s.short()).collect::<Vec<_>>().join("+")
    }
}

/// `a - b` on sorted multisets, `None` unless `b` is contained in `a`.
pub(crate) fn multiset_minus(a: &[BasisSymbol], b: &[BasisSymbol]) -> Option<Vec<BasisSymbol>> {
    let mut out = Vec::with_capacity(a.len());
    let mut j = 0;
    for &s in a {
        if j < b.len() && b[j] == s {
            j += 1;
        } else if j < b.len() && b[j] < s {
            return None;
        } else {
            out.push(s);
        }
    }
    (j == b.len()).then_some(out)
}

impl PartialEq for DegradationLabel {
    fn eq(&self, other: &Self) -> bool {
        self.equals(other)
    }
}

impl Eq for DegradationLabel {}

impl Hash for DegradationLabel {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.canonical_key().hash(state);
    }
}

impl PartialOrd for DegradationLabel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DegradationLabel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical_key().cmp(&other.canonical_key())
    }
}

impl fmt::Display for DegradationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.parts.iter().map(|s| s.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for DegradationLabel {
    type Err = CorError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Err(CorError::InvalidArgument("degradation labels cannot be empty".into()));
        }
        let parts = s.split('+').map(str::parse).collect::<Result<Vec<_>>>()?;
        DegradationLabel::new(parts)
    }
}

impl TryFrom<String> for DegradationLabel {
    type Error = CorError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DegradationLabel> for String {
    fn from(l: DegradationLabel) -> String {
        l.to_string()
    }
}

impl From<BasisSymbol> for DegradationLabel {
    fn from(s: BasisSymbol) -> Self {
        DegradationLabel::single(s)
    }
}

/// Set of bases a model is trained on, deduplicated under permutation
/// equality. Iteration order is canonical.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<DegradationLabel>", into = "Vec<DegradationLabel>")]
pub struct BasisSet {
    bases: BTreeSet<DegradationLabel>,
}

impl BasisSet {
    pub fn new(bases: impl IntoIterator<Item = DegradationLabel>) -> Self {
        Self {
            bases: bases.into_iter().map(|b| b.canonical()).collect(),
        }
    }

    pub fn parse_list<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        Ok(Self::new(
            items
                .iter()
                .map(|s| s.as_ref().parse())
                .collect::<Result<Vec<DegradationLabel>>>()?,
        ))
    }

    pub fn insert(&mut self, label: DegradationLabel) -> bool {
        self.bases.insert(label.canonical())
    }

    pub fn contains(&self, label: &DegradationLabel) -> bool {
        self.bases.contains(label)
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DegradationLabel> {
        self.bases.iter()
    }

    pub fn max_order(&self) -> usize {
        self.bases.iter().map(|b| b.order()).max().unwrap_or(0)
    }

    /// Distinct isolated symbols appearing in any basis.
    pub fn symbols(&self) -> BTreeSet<BasisSymbol> {
        self.bases.iter().flat_map(|b| b.parts().iter().copied()).collect()
    }
}

impl From<Vec<DegradationLabel>> for BasisSet {
    fn from(v: Vec<DegradationLabel>) -> Self {
        BasisSet::new(v)
    }
}

impl From<BasisSet> for Vec<DegradationLabel> {
    fn from(b: BasisSet) -> Self {
        b.bases.into_iter().collect()
    }
}

impl FromIterator<DegradationLabel> for BasisSet {
    fn from_iter<I: IntoIterator<Item = DegradationLabel>>(iter: I) -> Self {
        BasisSet::new(iter)
    }
}

/// Ordering of parts inside a decomposition: higher order first, then
/// canonical key.
fn part_rank(label: &DegradationLabel) -> (Reverse<usize>, Vec<BasisSymbol>) {
    (Reverse(label.order()), label.canonical_key())
}

fn sorted_cover(mut cover: Vec<DegradationLabel>) -> Vec<DegradationLabel> {
    cover.sort_by_key(part_rank);
    cover
}

fn cover_precedes(a: &[DegradationLabel], b: &[DegradationLabel]) -> bool {
    let ka: Vec<_> = a.iter().map(part_rank).collect();
    let kb: Vec<_> = b.iter().map(part_rank).collect();
    ka < kb
}

/// Exact cover of `d` by members of `bases` with the fewest parts.
///
/// Ties between covers of equal length go to the one whose parts, listed by
/// descending order then canonical key, compare lexicographically first. The
/// search is exhaustive over multiset partitions and meant for small orders.
pub fn decompose(d: &DegradationLabel, bases: &BasisSet) -> Option<Vec<DegradationLabel>> {
    let target = d.canonical_key();
    let candidates: Vec<(DegradationLabel, Vec<BasisSymbol>)> = bases
        .iter()
        .filter(|b| multiset_minus(&target, &b.canonical_key()).is_some())
        .map(|b| (b.clone(), b.canonical_key()))
        .collect();

    let mut best: Option<Vec<DegradationLabel>> = None;
    let mut stack = Vec::new();
    search(&target, &candidates, &mut stack, &mut best);
    best
}

fn search(
    remaining: &[BasisSymbol],
    candidates: &[(DegradationLabel, Vec<BasisSymbol>)],
    stack: &mut Vec<DegradationLabel>,
    best: &mut Option<Vec<DegradationLabel>>,
) {
    if remaining.is_empty() {
        let cover = sorted_cover(stack.clone());
        let better = match best {
            None => true,
            Some(b) => cover.len() < b.len() || (cover.len() == b.len() && cover_precedes(&cover, b)),
        };
        if better {
            *best = Some(cover);
        }
        return;
    }
    if let Some(b) = best {
        if stack.len() >= b.len() {
            return;
        }
    }
    // the smallest remaining symbol must be covered by some part
    let first = remaining[0];
    for (label, key) in candidates {
        if !key.contains(&first) {
            continue;
        }
        if let Some(rest) = multiset_minus(remaining, key) {
            stack.push(label.clone());
            search(&rest, candidates, stack, best);
            stack.pop();
        }
    }
}

/// All labels of order `1..=k` drawn without repetition from `symbols`.
pub fn enumerate_bases(symbols: &[BasisSymbol], k: usize) -> Result<BasisSet> {
    let distinct: BTreeSet<BasisSymbol> = symbols.iter().copied().collect();
    let n = distinct.len();
    if k == 0 || k > n {
        return Err(CorError::InvalidArgument(format!(
            "order k must satisfy 1 <= k <= {n}, got {k}"
        )));
    }
    let syms: Vec<BasisSymbol> = distinct.into_iter().collect();
    let mut set = BasisSet::default();
    for mask in 1u64..(1u64 << n) {
        if (mask.count_ones() as usize) <= k {
            let parts = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| syms[i]).collect();
            set.insert(DegradationLabel { parts });
        }
    }
    Ok(set)
}

/// The first `n` abstract symbols `x0..x{n-1}`.
pub fn abstract_symbols(n: usize) -> Vec<BasisSymbol> {
    (0..n).map(|i| BasisSymbol::Abstract(i as u8)).collect()
}
