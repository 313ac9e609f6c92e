//! The interaction set 𝒦, non-resonance margins of a step size, the CFL-type
//! restriction and deliberately resonant step sizes.
//!
//! 𝒦 is the union of two branches:
//!
//! ```text
//! near: max(|j|, μ(k)) < 2K,  k_l = 0 for l >= K
//! tail: k = ±⟨(j - r) mod 2M⟩ + k̄,  |(j - r) mod 2M| >= K,  |r| < K,  μ(k̄) < K
//! ```
//!
//! with `j` ranging over the stored modes `-M..M-1` and `μ(k) = Σ |k_l| e(l)`.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::ops::{Add, Neg, Sub};
use std::str::FromStr;

use rayon::prelude::*;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::spectral::{wrap_mode, EnergyProfile, WaveParams};

/// Margins below `resonance_cutoff · τ` classify a step size as resonant.
pub const DEFAULT_RESONANCE_CUTOFF: f64 = 1e-8;

pub const DEFAULT_GAMMA_THRESHOLD: f64 = 0.1;

/// Margins closer than this to the minimum compete for the witness.
const WITNESS_TIE: f64 = 1e-13;

/// A sparse integer vector `k = (k_0, ..., k_M)` over frequency indices.
///
/// Entries are kept sorted by index with zeros dropped, so equal vectors have
/// equal representations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex {
    entries: SmallVec<[(u32, i32); 4]>,
}

impl MultiIndex {
    pub fn zero() -> Self {
        Self::default()
    }

    /// The unit vector `⟨l⟩`.
    pub fn unit(l: usize) -> Self {
        Self::from_entries([(l, 1)])
    }

    /// `⟨|j|⟩`, the unit vector belonging to mode `j`.
    pub fn unit_of_mode(j: i64) -> Self {
        Self::unit(j.unsigned_abs() as usize)
    }

    /// Builds `Σ c ⟨l⟩` over the pairs; repeated indices are added up.
    pub fn from_entries(pairs: impl IntoIterator<Item = (usize, i64)>) -> Self {
        let mut raw: SmallVec<[(u32, i64); 4]> = pairs.into_iter().map(|(l, c)| (l as u32, c)).collect();
        raw.sort_unstable_by_key(|e| e.0);
        let mut entries: SmallVec<[(u32, i32); 4]> = SmallVec::new();
        for (l, c) in raw {
            match entries.last_mut() {
                Some(last) if last.0 == l => last.1 += c as i32,
                _ => entries.push((l, c as i32)),
            }
        }
        entries.retain(|e| e.1 != 0);
        Self { entries }
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = (usize, i64)> + '_ {
        self.entries.iter().map(|&(l, c)| (l as usize, c as i64))
    }

    pub fn get(&self, l: usize) -> i64 {
        self.entries.binary_search_by_key(&(l as u32), |e| e.0).map_or(0, |i| self.entries[i].1 as i64)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest index with a nonzero entry.
    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|e| e.0 as usize)
    }

    /// `k·ω = Σ k_l ω_l`.
    pub fn dot(&self, params: &WaveParams) -> f64 {
        self.entries.iter().map(|&(l, c)| c as f64 * params.omega(l as i64)).sum()
    }

    pub fn mu(&self, profile: &EnergyProfile) -> u32 {
        mu(self, profile)
    }

    fn merge(&self, other: &Self, sign: i32) -> Self {
        let (a, b) = (&self.entries, &other.entries);
        let mut entries = SmallVec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let next = match (a.get(i), b.get(j)) {
                (Some(x), Some(y)) => match x.0.cmp(&y.0) {
                    Ordering::Less => {
                        i += 1;
                        *x
                    }
                    Ordering::Greater => {
                        j += 1;
                        (y.0, sign * y.1)
                    }
                    Ordering::Equal => {
                        i += 1;
                        j += 1;
                        (x.0, x.1 + sign * y.1)
                    }
                },
                (Some(x), None) => {
                    i += 1;
                    *x
                }
                (None, Some(y)) => {
                    j += 1;
                    (y.0, sign * y.1)
                }
                (None, None) => unreachable!(),
            };
            if next.1 != 0 {
                entries.push(next);
            }
        }
        Self { entries }
    }
}

impl Add for &MultiIndex {
    type Output = MultiIndex;
    fn add(self, rhs: Self) -> MultiIndex {
        self.merge(rhs, 1)
    }
}

impl Sub for &MultiIndex {
    type Output = MultiIndex;
    fn sub(self, rhs: Self) -> MultiIndex {
        self.merge(rhs, -1)
    }
}

impl Neg for &MultiIndex {
    type Output = MultiIndex;
    fn neg(self) -> MultiIndex {
        MultiIndex { entries: self.entries.iter().map(|&(l, c)| (l, -c)).collect() }
    }
}

impl Neg for MultiIndex {
    type Output = MultiIndex;
    fn neg(self) -> MultiIndex {
        -&self
    }
}

/// Canonical form `l1:k1,l2:k2` in increasing `l`; the zero vector is the
/// empty string.
impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, (l, c)) in self.entries().enumerate() {
            if n > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}:{c}")?;
        }
        Ok(())
    }
}

impl FromStr for MultiIndex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "0" {
            return Ok(Self::zero());
        }
        let bad = || Error::Parse(format!("malformed multi-index `{s}`"));
        let pairs = s
            .split(',')
            .map(|part| {
                let (l, c) = part.split_once(':').ok_or_else(bad)?;
                let l: usize = l.trim().parse().map_err(|_| bad())?;
                let c: i64 = c.trim().parse().map_err(|_| bad())?;
                Ok((l, c))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_entries(pairs))
    }
}

/// `μ(k) = Σ_l |k_l| e(l)`.
pub fn mu(k: &MultiIndex, profile: &EnergyProfile) -> u32 {
    k.entries().map(|(l, c)| c.unsigned_abs() as u32 * profile.e(l as i64)).sum()
}

/// Which defining subset of 𝒦 produced a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Near,
    Tail,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Near => "near",
            Branch::Tail => "tail",
        })
    }
}

/// An element `(j, k)` of 𝒦.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InteractionPair {
    pub j: i64,
    pub k: MultiIndex,
    pub branch: Branch,
}

fn check_k_le_m(profile: &EnergyProfile, m: usize) -> Result<i64> {
    let k = profile.truncation() as i64;
    if k > m as i64 {
        return Err(Error::Validation(format!("truncation K = {k} exceeds the degree M = {m}")));
    }
    Ok(k)
}

/// Membership of `(j, k)` in 𝒦, reporting the first branch that contains it.
pub fn set_k_branch(j: i64, k: &MultiIndex, profile: &EnergyProfile, m: usize) -> Option<Branch> {
    let kk = profile.truncation() as i64;
    if j < -(m as i64) || j >= m as i64 || k.max_index().is_some_and(|l| l > m) {
        return None;
    }
    let near = j.abs() < 2 * kk && (mu(k, profile) as i64) < 2 * kk && k.max_index().is_none_or(|l| (l as i64) < kk);
    if near {
        return Some(Branch::Near);
    }
    for r in (1 - kk)..kk {
        let l = wrap_mode(j - r, m);
        if l.abs() < kk {
            continue;
        }
        let unit = MultiIndex::unit_of_mode(l);
        for kbar in [k - &unit, k + &unit] {
            if (mu(&kbar, profile) as i64) < kk {
                return Some(Branch::Tail);
            }
        }
    }
    None
}

pub fn in_set_k(j: i64, k: &MultiIndex, profile: &EnergyProfile, m: usize) -> bool {
    set_k_branch(j, k, profile, m).is_some()
}

/// All `k` supported on `0..support` with `μ(k) < bound`.
fn multi_indices_below(profile: &EnergyProfile, support: usize, bound: u32) -> Vec<MultiIndex> {
    fn rec(
        profile: &EnergyProfile,
        l: usize,
        support: usize,
        budget: u32,
        current: &mut Vec<(usize, i64)>,
        out: &mut Vec<MultiIndex>,
    ) {
        if l == support {
            out.push(MultiIndex::from_entries(current.iter().copied()));
            return;
        }
        let e = profile.e(l as i64);
        let max = (budget - 1) / e;
        for c in -(max as i64)..=(max as i64) {
            let cost = c.unsigned_abs() as u32 * e;
            if c != 0 {
                current.push((l, c));
            }
            rec(profile, l + 1, support, budget - cost, current, out);
            if c != 0 {
                current.pop();
            }
        }
    }
    let mut out = Vec::new();
    if bound > 0 {
        rec(profile, 0, support, bound, &mut Vec::new(), &mut out);
    }
    out
}

/// Enumerates 𝒦 for the stored modes `j = -M..M-1`, each pair once: the near
/// branch first, then the tail pairs not already produced.
pub fn enumerate_set_k(profile: &EnergyProfile, m: usize) -> Result<Vec<InteractionPair>> {
    let kk = check_k_le_m(profile, m)?;
    let mi = m as i64;
    let mut seen: HashSet<(i64, MultiIndex)> = HashSet::new();
    let mut out = Vec::new();
    let near_k = multi_indices_below(profile, kk as usize, 2 * kk as u32);
    let j_lim = (2 * kk - 1).min(mi);
    for j in (-j_lim)..(2 * kk).min(mi) {
        for k in &near_k {
            if seen.insert((j, k.clone())) {
                out.push(InteractionPair { j, k: k.clone(), branch: Branch::Near });
            }
        }
    }
    let kbars = multi_indices_below(profile, kk as usize, kk as u32);
    for j in -mi..mi {
        for r in (1 - kk)..kk {
            let l = wrap_mode(j - r, m);
            if l.abs() < kk {
                continue;
            }
            let unit = MultiIndex::unit_of_mode(l);
            for base in [unit.clone(), -&unit] {
                for kbar in &kbars {
                    let k = &base + kbar;
                    if seen.insert((j, k.clone())) {
                        out.push(InteractionPair { j, k, branch: Branch::Tail });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The sign in `ω_j ± k·ω`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Plus => "+",
            Sign::Minus => "-",
        })
    }
}

/// One sine `|sin(½τ(ω_j ± k·ω))|` together with the index that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Margin {
    pub value: f64,
    pub j: i64,
    pub k: MultiIndex,
    pub sign: Sign,
}

impl Margin {
    fn tie_key(&self) -> (Sign, bool, Vec<(usize, i64)>, i64) {
        (self.sign, self.j < 0, self.k.entries().collect(), self.j.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Nonresonant,
    WeaklyResonant,
    Resonant,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::Nonresonant => "nonresonant",
            Classification::WeaklyResonant => "weakly_resonant",
            Classification::Resonant => "resonant",
        })
    }
}

/// Result of [`check_cfl`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CflCheck {
    pub satisfied: bool,
    /// `τ(M + K) sqrt(1 + ρ)`.
    pub value: f64,
    /// `π - value`.
    pub slack: f64,
}

/// The CFL-type restriction `τ(M + K) sqrt(1 + ρ) < π`.
pub fn check_cfl(tau: f64, params: &WaveParams, profile: &EnergyProfile) -> CflCheck {
    let value = tau * (params.degree() as f64 + profile.truncation() as f64) * (1.0 + params.rho()).sqrt();
    CflCheck { satisfied: value < std::f64::consts::PI, value, slack: std::f64::consts::PI - value }
}

/// `2π / Σ sign·ω_l`.
pub fn resonant_tau(terms: &[(Sign, usize)], params: &WaveParams) -> Result<f64> {
    let denom: f64 = terms.iter().map(|&(s, l)| s.value() * params.omega(l as i64)).sum();
    if !(denom > 0.0) {
        return Err(Error::Validation(format!("frequency combination {denom} is not positive")));
    }
    Ok(2.0 * std::f64::consts::PI / denom)
}

/// Thresholds and scaling used to turn margins into γ values and a class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSettings {
    pub nu: f64,
    pub eps: f64,
    pub gamma_threshold: f64,
    /// A step size is resonant when `min_weak_margin < resonance_cutoff · τ`.
    pub resonance_cutoff: f64,
}

impl Default for MarginSettings {
    fn default() -> Self {
        Self {
            nu: 0.0,
            eps: 1e-3,
            gamma_threshold: DEFAULT_GAMMA_THRESHOLD,
            resonance_cutoff: DEFAULT_RESONANCE_CUTOFF,
        }
    }
}

/// Margins of one step size over 𝒦.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceReport {
    pub tau: f64,
    /// Minimum over the weak condition: all of 𝒦, both signs, `k ≠ ∓⟨j⟩`.
    pub min_weak: Margin,
    /// Minimum over the strong condition: `|j| <= K`, both signs, `k ≠ ±⟨j⟩`.
    pub min_strong: Margin,
    /// Minimum over the weak pairs whose argument `½τ(ω_j ± k·ω)` lies
    /// outside `(-π/2, π/2)`, i.e. whose sine can vanish only through
    /// the time discretisation. `None` when there are no such pairs.
    pub numerical: Option<Margin>,
    pub gamma_weak: f64,
    pub gamma_strong: f64,
    pub gamma_numerical: Option<f64>,
    pub cfl: CflCheck,
    pub classification: Classification,
}

impl ResonanceReport {
    /// Flat `key = value` block.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("tau", format!("{:.16e}", self.tau));
        kv("classification", self.classification.to_string());
        kv("min_weak_margin", format!("{:.16e}", self.min_weak.value));
        kv("witness_j", self.min_weak.j.to_string());
        kv("witness_k", self.min_weak.k.to_string());
        kv("witness_sign", self.min_weak.sign.to_string());
        kv("min_strong_margin", format!("{:.16e}", self.min_strong.value));
        kv("strong_witness_j", self.min_strong.j.to_string());
        kv("strong_witness_k", self.min_strong.k.to_string());
        kv("strong_witness_sign", self.min_strong.sign.to_string());
        kv("gamma_weak", format!("{:.16e}", self.gamma_weak));
        kv("gamma_strong", format!("{:.16e}", self.gamma_strong));
        kv("numerical_margin", self.numerical.as_ref().map_or("none".into(), |m| format!("{:.16e}", m.value)));
        kv("cfl_satisfied", self.cfl.satisfied.to_string());
        kv("cfl_slack", format!("{:.16e}", self.cfl.slack));
        s
    }

    pub const CSV_HEADER: &'static str =
        "tau,min_weak_margin,witness_j,witness_k,min_strong_margin,classification,cfl_slack,gamma_weak,numerical_margin";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.16e},{:.16e},{},\"{}\",{:.16e},{},{:.16e},{:.16e},{}",
            self.tau,
            self.min_weak.value,
            self.min_weak.j,
            self.min_weak.k,
            self.min_strong.value,
            self.classification,
            self.cfl.slack,
            self.gamma_weak,
            self.numerical.as_ref().map_or(String::new(), |m| format!("{:.16e}", m.value)),
        )
    }
}

struct Entry {
    j: i64,
    k: MultiIndex,
    omega_j: f64,
    k_omega: f64,
    /// `k = -⟨j⟩` excluded for `+`, `k = ⟨j⟩` excluded for `-`.
    weak_plus: bool,
    weak_minus: bool,
    strong: bool,
}

/// 𝒦 with its frequency combinations tabulated, for scanning many step sizes.
pub struct ResonanceScanner {
    params: WaveParams,
    profile: EnergyProfile,
    entries: Vec<Entry>,
}

impl ResonanceScanner {
    pub fn new(params: &WaveParams, profile: &EnergyProfile) -> Result<Self> {
        let kk = profile.truncation() as i64;
        let pairs = enumerate_set_k(profile, params.degree())?;
        let entries = pairs
            .into_iter()
            .map(|p| {
                let unit = MultiIndex::unit_of_mode(p.j);
                let is_plus_unit = p.k == unit;
                let is_minus_unit = p.k == -&unit;
                Entry {
                    omega_j: params.omega(p.j),
                    k_omega: p.k.dot(params),
                    weak_plus: !is_minus_unit,
                    weak_minus: !is_plus_unit,
                    strong: p.j.abs() <= kk && !is_plus_unit && !is_minus_unit,
                    j: p.j,
                    k: p.k,
                }
            })
            .collect();
        Ok(Self { params: params.clone(), profile: *profile, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Minimum with deterministic tie-breaking among near-equal values:
    /// `+` before `-`, `j >= 0` before `j < 0`, then the smaller `k`, then `|j|`.
    fn minimum(&self, tau: f64, include: impl Fn(&Entry, Sign) -> bool + Sync) -> Option<Margin> {
        let include = &include;
        let value = |e: &Entry, s: Sign| (0.5 * tau * (e.omega_j + s.value() * e.k_omega)).sin().abs();
        let signs = [Sign::Plus, Sign::Minus];
        let best = self
            .entries
            .par_iter()
            .flat_map_iter(|e| signs.iter().filter(|&&s| include(e, s)).map(move |&s| value(e, s)))
            .reduce(|| f64::INFINITY, f64::min);
        if !best.is_finite() {
            return None;
        }
        self.entries
            .par_iter()
            .flat_map_iter(|e| {
                signs
                    .iter()
                    .filter(move |&&s| include(e, s) && value(e, s) <= best + WITNESS_TIE)
                    .map(move |&s| Margin { value: value(e, s), j: e.j, k: e.k.clone(), sign: s })
            })
            .min_by(|a, b| a.tie_key().cmp(&b.tie_key()))
    }

    pub fn report(&self, tau: f64, settings: &MarginSettings) -> Result<ResonanceReport> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Validation(format!("step size must be positive, got {tau}")));
        }
        let weak = |e: &Entry, s: Sign| match s {
            Sign::Plus => e.weak_plus,
            Sign::Minus => e.weak_minus,
        };
        let min_weak = self.minimum(tau, weak).expect("𝒦 contains (0, 0)");
        let min_strong = self.minimum(tau, |e, _| e.strong).expect("𝒦 contains (0, 0)");
        let half_pi = std::f64::consts::FRAC_PI_2;
        let numerical =
            self.minimum(tau, |e, s| weak(e, s) && (0.5 * tau * (e.omega_j + s.value() * e.k_omega)).abs() >= half_pi);
        let scale = tau * settings.eps.powf(0.5 * settings.nu);
        let gamma_numerical = numerical.as_ref().map(|m| m.value / scale);
        let classification = if min_weak.value < settings.resonance_cutoff * tau {
            Classification::Resonant
        } else if gamma_numerical.is_none_or(|g| g >= settings.gamma_threshold) {
            Classification::Nonresonant
        } else {
            Classification::WeaklyResonant
        };
        Ok(ResonanceReport {
            tau,
            gamma_weak: min_weak.value / scale,
            gamma_strong: min_strong.value / tau,
            min_weak,
            min_strong,
            numerical,
            gamma_numerical,
            cfl: check_cfl(tau, &self.params, &self.profile),
            classification,
        })
    }
}

/// Non-resonance margins of `tau` over 𝒦 for the given parameters.
pub fn nonres_margins(
    tau: f64,
    params: &WaveParams,
    profile: &EnergyProfile,
    settings: &MarginSettings,
) -> Result<ResonanceReport> {
    ResonanceScanner::new(params, profile)?.report(tau, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mi(s: &str) -> MultiIndex {
        s.parse().unwrap()
    }

    #[test]
    fn mu_examples() {
        let p5 = EnergyProfile::new(5).unwrap();
        assert_eq!(mu(&MultiIndex::unit(0), &p5), 2);
        assert_eq!(mu(&MultiIndex::unit(3), &p5), 3);
        assert_eq!(mu(&MultiIndex::unit(7), &p5), 5);
        assert_eq!(mu(&mi("0:-1,2:3,9:-2"), &p5), 2 + 6 + 10);
        assert_eq!(mu(&MultiIndex::zero(), &p5), 0);
    }

    #[test]
    fn multi_index_algebra() {
        let a = mi("1:1,6:1");
        let b = mi("6:-1,2:2");
        assert_eq!((&a + &b).to_string(), "1:1,2:2");
        assert_eq!((&a - &a), MultiIndex::zero());
        assert_eq!((-&a).to_string(), "1:-1,6:-1");
        assert_eq!(MultiIndex::from_entries([(3, 1), (1, 2), (3, -1)]), mi("1:2"));
        assert_eq!(a.get(6), 1);
        assert_eq!(a.get(2), 0);
        assert_eq!(mi(""), MultiIndex::zero());
        assert!("1:x".parse::<MultiIndex>().is_err());
        assert!("3".parse::<MultiIndex>().is_err());
        let p = WaveParams::new(3f64.sqrt(), 8).unwrap();
        assert!((a.dot(&p) - p.omega(1) - p.omega(6)).abs() < 1e-15);
    }

    #[test]
    fn member_examples() {
        let p6 = EnergyProfile::new(6).unwrap();
        assert_eq!(set_k_branch(7, &mi("1:1,6:1"), &p6, 32), Some(Branch::Tail));
        assert_eq!(set_k_branch(0, &MultiIndex::zero(), &p6, 32), Some(Branch::Near));
        assert_eq!(set_k_branch(11, &mi("5:2"), &p6, 32), Some(Branch::Near));
        assert_eq!(set_k_branch(12, &MultiIndex::zero(), &p6, 32), None);
        assert_eq!(set_k_branch(32, &MultiIndex::zero(), &p6, 32), None);
        let p3 = EnergyProfile::new(3).unwrap();
        assert!(in_set_k(7, &mi("1:1,6:1"), &p3, 8));
        assert!(enumerate_set_k(&EnergyProfile::new(9).unwrap(), 8).is_err());
    }

    /// Every `k` with `μ(k) <= 2K` over the full support `0..=M`, for every
    /// stored `j`, filtered by the definition of both branches written out
    /// with plain loops.
    fn brute_force(kk: i64, m: usize) -> HashSet<(i64, MultiIndex)> {
        let e = |l: i64| -> i64 {
            if l == 0 {
                2
            } else if l.abs() < kk {
                l.abs()
            } else {
                kk
            }
        };
        let mu_of = |k: &[i64]| -> i64 { k.iter().enumerate().map(|(l, c)| c.abs() * e(l as i64)).sum() };
        let mut all: Vec<Vec<i64>> = vec![vec![]];
        for l in 0..=m {
            let mut next = Vec::new();
            for k in &all {
                let used = mu_of(k);
                let mut c = 0i64;
                loop {
                    for cc in if c == 0 { vec![0] } else { vec![c, -c] } {
                        if used + cc.abs() * e(l as i64) <= 2 * kk {
                            let mut kk2 = k.clone();
                            kk2.push(cc);
                            next.push(kk2);
                        }
                    }
                    c += 1;
                    if c * e(l as i64) > 2 * kk {
                        break;
                    }
                }
            }
            all = next;
        }
        let mi_len = m as i64;
        let mut out = HashSet::new();
        for k in &all {
            for j in -mi_len..mi_len {
                let support_ok = k.iter().enumerate().all(|(l, &c)| c == 0 || (l as i64) < kk);
                let near = j.abs().max(mu_of(k)) < 2 * kk && support_ok;
                let mut tail = false;
                for r in (1 - kk)..kk {
                    let d = (j - r + mi_len).rem_euclid(2 * mi_len) - mi_len;
                    if d.abs() < kk {
                        continue;
                    }
                    for s in [1i64, -1] {
                        let mut kbar = k.clone();
                        kbar[d.unsigned_abs() as usize] -= s;
                        if mu_of(&kbar) < kk {
                            tail = true;
                        }
                    }
                }
                if near || tail {
                    let entries = k.iter().enumerate().map(|(l, &c)| (l, c));
                    out.insert((j, MultiIndex::from_entries(entries)));
                }
            }
        }
        out
    }

    #[test]
    fn set_k_matches_brute_force() {
        let profile = EnergyProfile::new(3).unwrap();
        let enumerated = enumerate_set_k(&profile, 8).unwrap();
        let as_set: HashSet<(i64, MultiIndex)> = enumerated.iter().map(|p| (p.j, p.k.clone())).collect();
        assert_eq!(as_set.len(), enumerated.len(), "duplicates in enumeration");
        let oracle = brute_force(3, 8);
        assert_eq!(as_set, oracle);
        for p in &enumerated {
            assert_eq!(set_k_branch(p.j, &p.k, &profile, 8), Some(p.branch));
        }
        let first_tail = enumerated.iter().position(|p| p.branch == Branch::Tail).unwrap();
        assert!(enumerated[first_tail..].iter().all(|p| p.branch == Branch::Tail));
    }

    #[test]
    fn set_k_is_symmetric() {
        let profile = EnergyProfile::new(4).unwrap();
        let set = enumerate_set_k(&profile, 8).unwrap();
        for p in &set {
            assert!(in_set_k(wrap_mode(-p.j, 8), &-&p.k, &profile, 8), "({}, {})", p.j, p.k);
        }
    }

    #[test]
    fn cfl_examples() {
        let p = WaveParams::new(3f64.sqrt(), 32).unwrap();
        let prof = EnergyProfile::new(6).unwrap();
        let c = check_cfl(0.05, &p, &prof);
        assert!(c.satisfied);
        assert!((c.value - 3.1404941).abs() < 1e-6);
        assert!((c.slack - 1.0985e-3).abs() < 1e-6);
        assert!(!check_cfl(0.1, &p, &prof).satisfied);
        let tiny = check_cfl(1e-12, &p, &prof);
        assert!(tiny.satisfied && (tiny.slack - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn resonant_tau_examples() {
        let p = WaveParams::new(3f64.sqrt(), 32).unwrap();
        use Sign::*;
        let t = resonant_tau(&[(Plus, 1), (Plus, 6), (Plus, 7)], &p).unwrap();
        assert!((t - 0.42117648).abs() < 1e-8);
        let t = resonant_tau(&[(Minus, 1), (Plus, 6), (Plus, 7)], &p).unwrap();
        assert!((t - 0.54107580).abs() < 1e-8);
        let t = resonant_tau(&[(Plus, 1)], &p).unwrap();
        assert!((t - 3.80132921).abs() < 1e-8);
        assert!(resonant_tau(&[(Minus, 1)], &p).is_err());
        assert!(resonant_tau(&[], &p).is_err());
    }

    #[test]
    fn zero_index_pair_counts_as_margin() {
        // (j = 0, k = 0) gives |sin(τω_0/2)|, a legitimate weak margin.
        let p = WaveParams::new(3f64.sqrt(), 8).unwrap();
        let prof = EnergyProfile::new(3).unwrap();
        let tau = 2.0 * std::f64::consts::PI / p.omega(0);
        let r = nonres_margins(tau, &p, &prof, &MarginSettings::default()).unwrap();
        assert!(r.min_weak.value < 1e-12);
        assert_eq!(r.classification, Classification::Resonant);
    }

    #[test]
    fn classification_of_reference_steps() {
        let p = WaveParams::new(3f64.sqrt(), 32).unwrap();
        let prof = EnergyProfile::new(6).unwrap();
        let scan = ResonanceScanner::new(&p, &prof).unwrap();
        let set = MarginSettings::default();
        let r = scan.report(0.05, &set).unwrap();
        assert_eq!(r.classification, Classification::Nonresonant);
        // |ω_14 + ω_0 - 2ω_1 - ω_12| ≈ 6.05e-5: a near-resonance of the frequencies themselves
        assert!((r.min_weak.value - 1.5135839e-6).abs() < 1e-12);
        assert_eq!((r.min_weak.j, r.min_weak.k.to_string()), (12, "0:-1,1:2,14:-1".to_string()));
        let tiny = scan.report(1e-4, &set).unwrap();
        assert_eq!(tiny.classification, Classification::Nonresonant);
        assert!(tiny.numerical.is_none());
        assert!((tiny.min_weak.value / (0.5e-4 * 6.0543355e-5) - 1.0).abs() < 1e-6);
        let a =
            scan.report(resonant_tau(&[(Sign::Plus, 1), (Sign::Plus, 6), (Sign::Plus, 7)], &p).unwrap(), &set).unwrap();
        assert_eq!(a.classification, Classification::Resonant);
        assert!(a.min_weak.value < 1e-12);
        assert_eq!((a.min_weak.j, a.min_weak.k.clone(), a.min_weak.sign), (7, mi("1:1,6:1"), Sign::Plus));
        let b = scan
            .report(resonant_tau(&[(Sign::Minus, 1), (Sign::Plus, 6), (Sign::Plus, 7)], &p).unwrap(), &set)
            .unwrap();
        assert_eq!(b.classification, Classification::Resonant);
        assert!(b.min_weak.value < 1e-12);
        assert_eq!(scan.report(0.1, &set).unwrap().classification, Classification::WeaklyResonant);
        assert_eq!(scan.report(0.05, &set).unwrap(), r);
    }

    #[test]
    fn report_formats() {
        let p = WaveParams::new(3f64.sqrt(), 8).unwrap();
        let prof = EnergyProfile::new(3).unwrap();
        let r = nonres_margins(0.05, &p, &prof, &MarginSettings::default()).unwrap();
        let kv = r.to_key_value();
        assert!(kv.contains("classification = nonresonant\n"));
        assert_eq!(
            r.to_csv_row().matches(',').count() - r.min_weak.k.to_string().matches(',').count(),
            ResonanceReport::CSV_HEADER.matches(',').count()
        );
        assert!(nonres_margins(0.0, &p, &prof, &MarginSettings::default()).is_err());
    }

    proptest! {
        #[test]
        fn mu_is_subadditive(
            a in proptest::collection::vec((0usize..=12, -3i64..=3), 0..5),
            b in proptest::collection::vec((0usize..=12, -3i64..=3), 0..5),
            kk in 3u32..8,
        ) {
            let profile = EnergyProfile::new(kk).unwrap();
            let (a, b) = (MultiIndex::from_entries(a), MultiIndex::from_entries(b));
            prop_assert!(mu(&(&a + &b), &profile) <= mu(&a, &profile) + mu(&b, &profile));
            prop_assert_eq!(mu(&-&a, &profile), mu(&a, &profile));
        }

        #[test]
        fn margin_is_even_under_negation(
            k in proptest::collection::vec((0usize..=8, -3i64..=3), 0..4),
            j in -8i64..8,
            tau in 1e-3f64..2.0,
        ) {
            let p = WaveParams::new(3f64.sqrt(), 8).unwrap();
            let k = MultiIndex::from_entries(k);
            let w = p.omega(j);
            let plus = (0.5 * tau * (w + k.dot(&p))).sin().abs();
            let minus_neg = (0.5 * tau * (w - (-&k).dot(&p))).sin().abs();
            prop_assert!((plus - minus_neg).abs() < 1e-14);
            let flipped = (0.5 * -tau * (w + k.dot(&p))).sin().abs();
            prop_assert!((plus - flipped).abs() < 1e-14);
        }

        #[test]
        fn display_round_trips(k in proptest::collection::vec((0usize..=40, -9i64..=9), 0..6)) {
            let k = MultiIndex::from_entries(k);
            prop_assert_eq!(k.to_string().parse::<MultiIndex>().unwrap(), k);
        }
    }

    #[test]
    fn e_subadditive_mod_2m() {
        let m = 8usize;
        let profile = EnergyProfile::new(3).unwrap();
        for j1 in -(m as i64)..m as i64 {
            for j2 in -(m as i64)..m as i64 {
                let j = wrap_mode(j1 + j2, m);
                assert!(profile.e(j) <= profile.e(j1) + profile.e(j2), "{j1} + {j2}");
            }
        }
    }
}
