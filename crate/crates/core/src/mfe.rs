//! Modulated Fourier expansions of the numerical solution.
//!
//! The expansion reads
//!
//! ```text
//! u_j^n ≈ Σ_k z_j^k(δ^ν t_n) e^{i(k·ω) t_n},   z_j^k = Σ_m δ^{2m(j,k)ν + m(1-2ν)} z_{j,m}^k
//! ```
//!
//! with `δ = ε^{1/2}`, `(j, k) ∈ 𝒦` and polynomial modulation functions
//! `z_{j,m}^k` of the slow variable `s = δ^ν t`. They are built order by
//! order: with `h = δ^ν τ` and `θ = τ k·ω`, each `z_{j,m}^k` solves
//!
//! ```text
//! Σ_n β_n z^{(n)} = τ² ψ_j Σ φ_{j1} φ_{j2} δ^{2(m(j1,k1) + m(j2,k2) - m(j,k))ν} z_{j1,m1}^{k1} z_{j2,m2}^{k2}
//! β_0 = 4 sin(½τ(ω_j - k·ω)) sin(½τ(ω_j + k·ω)),   β_n = h^n/n! (e^{iθ} + (-1)^n e^{-iθ})
//! ```
//!
//! the sum running over `m1 + m2 = m`, `j1 + j2 ≡ j (mod 2M)` and `k1 + k2 = k`.
//! For `k ≠ ±⟨j⟩` the operator is invertible on polynomials. For the diagonal
//! pairs `k = ±⟨j⟩`, `β_0` vanishes, the equation fixes `ż`, and the two
//! free constants per mode come from the initial position and velocity.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::integrator::FilterPair;
use crate::resonance::{in_set_k, nonres_margins, Classification, MarginSettings, MultiIndex, ResonanceReport};
use crate::spectral::{
    sinc, weighted_norm_of_magnitudes, wrap_mode, EnergyProfile, SpectralVector, WaveParams, WeightScheme,
};

const SINGULAR: f64 = 1e-12;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// A complex polynomial `p(s) = Σ c_i s^i` in the slow variable.
///
/// Trailing zero coefficients are dropped, so the zero polynomial has no
/// coefficients at all.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlowPolynomial {
    coeffs: Vec<Complex64>,
}

impl SlowPolynomial {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: Complex64) -> Self {
        Self::from_coeffs(vec![c])
    }

    pub fn from_coeffs(coeffs: Vec<Complex64>) -> Self {
        let mut p = Self { coeffs };
        p.trim();
        p
    }

    fn trim(&mut self) {
        while self.coeffs.last().is_some_and(|c| *c == Complex64::new(0.0, 0.0)) {
            self.coeffs.pop();
        }
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    /// `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        self.coeffs.len().checked_sub(1)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn eval(&self, s: f64) -> Complex64 {
        self.coeffs.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * s + c)
    }

    pub fn derivative(&self) -> Self {
        Self::from_coeffs(self.coeffs.iter().enumerate().skip(1).map(|(i, &c)| c * i as f64).collect())
    }

    /// The antiderivative vanishing at `s = 0`.
    pub fn integral(&self) -> Self {
        if self.is_zero() {
            return Self::zero();
        }
        let mut coeffs = Vec::with_capacity(self.coeffs.len() + 1);
        coeffs.push(Complex64::new(0.0, 0.0));
        coeffs.extend(self.coeffs.iter().enumerate().map(|(i, &c)| c / (i + 1) as f64));
        Self::from_coeffs(coeffs)
    }

    /// `s ↦ p(s + h)`, by binomial expansion.
    pub fn shifted(&self, h: f64) -> Self {
        let n = self.coeffs.len();
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for (d, &c) in self.coeffs.iter().enumerate() {
            let mut binom = 1.0;
            let mut hp = 1.0;
            // term c (s + h)^d = c Σ_i C(d, i) h^{d-i} s^i, walking i = d, d-1, ..., 0
            for i in (0..=d).rev() {
                out[i] += c * binom * hp;
                binom *= i as f64 / (d - i + 1) as f64;
                hp *= h;
            }
        }
        Self::from_coeffs(out)
    }

    pub fn mul(&self, other: &Self) -> Self {
        if self.is_zero() || other.is_zero() {
            return Self::zero();
        }
        let mut out = vec![Complex64::new(0.0, 0.0); self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Self::from_coeffs(out)
    }

    pub fn add_scaled(&mut self, other: &Self, factor: Complex64) {
        if self.coeffs.len() < other.coeffs.len() {
            self.coeffs.resize(other.coeffs.len(), Complex64::new(0.0, 0.0));
        }
        for (a, &b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += factor * b;
        }
        self.trim();
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Self::from_coeffs(self.coeffs.iter().map(|&c| c * factor).collect())
    }

    pub fn conj(&self) -> Self {
        Self { coeffs: self.coeffs.iter().map(|c| c.conj()).collect() }
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

impl std::ops::Add for &SlowPolynomial {
    type Output = SlowPolynomial;
    fn add(self, rhs: Self) -> SlowPolynomial {
        let mut out = self.clone();
        out.add_scaled(rhs, Complex64::new(1.0, 0.0));
        out
    }
}

/// `m(j, k) = max(e(j), max_{l: k_l ≠ 0} e(l))`.
pub fn m_weight(j: i64, k: &MultiIndex, profile: &EnergyProfile) -> u32 {
    k.entries().map(|(l, _)| profile.e(l as i64)).fold(profile.e(j), u32::max)
}

/// `m - max(e(j), μ(k))`, the largest degree `z_{j,m}^k` can have; negative
/// values force the entry to vanish.
pub fn degree_bound(j: i64, k: &MultiIndex, m: u32, profile: &EnergyProfile) -> i64 {
    m as i64 - profile.e(j).max(k.mu(profile)) as i64
}

/// The parameters an expansion depends on apart from `ε` and the data.
#[derive(Debug, Clone)]
pub struct MfeSetup {
    params: WaveParams,
    profile: EnergyProfile,
    filters: FilterPair,
    tau: f64,
    nu: f64,
    m_max: u32,
    sobolev: f64,
    report: ResonanceReport,
}

impl MfeSetup {
    /// Validates the step size: it must not be velocity-singular and must not
    /// be classified resonant over 𝒦. Defaults: `ν = 0`, `m_max = 2`, `s = 1`.
    pub fn new(params: &WaveParams, profile: &EnergyProfile, filters: &FilterPair, tau: f64) -> Result<Self> {
        let report = nonres_margins(tau, params, profile, &MarginSettings::default())?;
        if report.classification == Classification::Resonant {
            return Err(Error::Resonant { j: report.min_weak.j, k: report.min_weak.k.to_string() });
        }
        let m = params.degree() as i64;
        for j in 0..=m {
            let s = sinc(tau * params.omega(j));
            if s.abs() < SINGULAR {
                return Err(Error::VelocitySingular { j, value: s });
            }
        }
        Ok(Self {
            params: params.clone(),
            profile: *profile,
            filters: filters.clone(),
            tau,
            nu: 0.0,
            m_max: 2,
            sobolev: 1.0,
            report,
        })
    }

    pub fn with_nu(mut self, nu: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&nu) {
            return Err(Error::Validation(format!("nu must lie in [0, 1/2), got {nu}")));
        }
        self.nu = nu;
        Ok(self)
    }

    /// Highest order `m` kept, `1 <= m_max <= 2K - 1`.
    pub fn with_m_max(mut self, m_max: u32) -> Result<Self> {
        if m_max == 0 || m_max > 2 * self.profile.truncation() - 1 {
            return Err(Error::Validation(format!(
                "m_max must lie in 1..={}, got {m_max}",
                2 * self.profile.truncation() - 1
            )));
        }
        self.m_max = m_max;
        Ok(self)
    }

    /// Sobolev exponent `s` of the weights used for defect norms.
    pub fn with_sobolev(mut self, s: f64) -> Result<Self> {
        WeightScheme::new(s, self.nu, 1.0)?;
        self.sobolev = s;
        Ok(self)
    }

    pub fn params(&self) -> &WaveParams {
        &self.params
    }

    pub fn profile(&self) -> &EnergyProfile {
        &self.profile
    }

    pub fn filters(&self) -> &FilterPair {
        &self.filters
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn m_max(&self) -> u32 {
        self.m_max
    }

    pub fn resonance_report(&self) -> &ResonanceReport {
        &self.report
    }

    /// Builds the expansion for initial data `(u⁰, u̇⁰)` of size `ε`.
    pub fn construct(&self, eps: f64, u0: &SpectralVector, udot0: &SpectralVector) -> Result<ModulationTable> {
        construct(self, eps, u0, udot0)
    }
}

type Key = (i64, MultiIndex);

/// The modulation functions `z_{j,m}^k` of one expansion, together with the
/// parameters needed to evaluate it.
#[derive(Debug, Clone)]
pub struct ModulationTable {
    setup: MfeSetup,
    eps: f64,
    delta: f64,
    levels: BTreeMap<Key, BTreeMap<u32, SlowPolynomial>>,
    full: BTreeMap<Key, SlowPolynomial>,
}

/// Per-pair and aggregated defect at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Defect {
    pub per_pair: BTreeMap<(i64, MultiIndex), Complex64>,
    /// `d_j = Σ_k |d_j^k|` in slot order `j = -M..M-1`.
    pub per_mode: Vec<f64>,
    /// `d` in the weighted norm.
    pub norm: f64,
}

/// `ℰ_0..ℰ_M` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct AlmostInvariants {
    pub time: f64,
    pub values: Vec<Complex64>,
}

impl AlmostInvariants {
    pub fn real(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    /// `max_l |Im ℰ_l| / max(|ℰ_l|, tiny)`.
    pub fn max_relative_imag(&self) -> f64 {
        self.values.iter().map(|v| v.im.abs() / v.norm().max(1e-300)).fold(0.0, f64::max)
    }
}

/// `max_t |ℰ_l(t) - ℰ_l(0)|` per `l`, and `Σ_l σ_l ε^{-e(l)}` times those.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantDrift {
    pub per_mode: Vec<f64>,
    pub weighted: f64,
}

struct Level<'a> {
    setup: &'a MfeSetup,
    delta: f64,
    phi: Vec<f64>,
    psi: Vec<f64>,
}

impl Level<'_> {
    fn slot(&self, j: i64) -> usize {
        (j + self.setup.params.degree() as i64) as usize
    }

    fn beta(&self, j: i64, k: &MultiIndex, n_max: usize) -> Vec<Complex64> {
        beta(&self.setup.params, self.setup.tau, self.delta.powf(self.setup.nu), j, k, n_max)
    }

    fn m_of(&self, j: i64, k: &MultiIndex) -> u32 {
        m_weight(j, k, &self.setup.profile)
    }
}

/// `β_0..β_{n_max}` of the operator `Σ_n β_n d^n/ds^n` for the pair `(j, k)`,
/// with `h = δ^ν τ`.
fn beta(params: &WaveParams, tau: f64, dnu: f64, j: i64, k: &MultiIndex, n_max: usize) -> Vec<Complex64> {
    let kw = k.dot(params);
    let wj = params.omega(j);
    let theta = tau * kw;
    let h = dnu * tau;
    let (e_plus, e_minus) = (Complex64::from_polar(1.0, theta), Complex64::from_polar(1.0, -theta));
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(Complex64::new(4.0 * (0.5 * tau * (wj - kw)).sin() * (0.5 * tau * (wj + kw)).sin(), 0.0));
    let mut fac = 1.0;
    for n in 1..=n_max {
        fac *= h / n as f64;
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        out.push((e_plus + e_minus * sign) * fac);
    }
    out
}

/// Solves `Σ_{n>=0} β_n y^{(n)} = p` for a polynomial `y` with `β_0 ≠ 0`.
fn solve_operator(beta: &[Complex64], p: &SlowPolynomial) -> SlowPolynomial {
    let d = match p.degree() {
        Some(d) => d,
        None => return SlowPolynomial::zero(),
    };
    let mut y = vec![Complex64::new(0.0, 0.0); d + 1];
    for i in (0..=d).rev() {
        let mut acc = p.coeffs()[i];
        let mut falling = 1.0;
        for n in 1..=(d - i) {
            falling *= (i + n) as f64;
            acc -= beta[n] * falling * y[i + n];
        }
        y[i] = acc / beta[0];
    }
    SlowPolynomial::from_coeffs(y)
}

/// Applies `Σ_n β_n d^n/ds^n`.
fn apply_operator(beta: &[Complex64], z: &SlowPolynomial) -> SlowPolynomial {
    let mut out = z.scaled(beta[0]);
    let mut der = z.clone();
    for &b in &beta[1..] {
        der = der.derivative();
        if der.is_zero() {
            break;
        }
        out.add_scaled(&der, b);
    }
    out
}

/// Builds `z_{j,m}^k` for `m = 1..=m_max`.
pub fn construct(setup: &MfeSetup, eps: f64, u0: &SpectralVector, udot0: &SpectralVector) -> Result<ModulationTable> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }
    let params = &setup.params;
    let m = params.degree();
    for v in [u0, udot0] {
        if v.degree() != m {
            return Err(Error::Shape { expected: m, found: v.degree() });
        }
    }
    let delta = eps.sqrt();
    let tau = setup.tau;
    let nu = setup.nu;
    let profile = &setup.profile;
    let mi = m as i64;
    let slot_omegas: Vec<f64> = (-mi..mi).map(|j| params.omega(j)).collect();
    let lv = Level {
        setup,
        delta,
        phi: slot_omegas.iter().map(|&w| setup.filters.phi(tau * w)).collect(),
        psi: slot_omegas.iter().map(|&w| setup.filters.psi(tau * w)).collect(),
    };
    let dnu = |power: f64| delta.powf(power * nu);

    let mut levels: BTreeMap<Key, BTreeMap<u32, SlowPolynomial>> = BTreeMap::new();
    let mut by_level: Vec<Vec<(Key, SlowPolynomial)>> = vec![Vec::new(); setup.m_max as usize + 1];
    let mut member: HashMap<Key, bool> = HashMap::new();

    for order in 1..=setup.m_max {
        let mut rhs: BTreeMap<Key, SlowPolynomial> = BTreeMap::new();
        for m1 in 1..order {
            let m2 = order - m1;
            for ((j1, k1), z1) in &by_level[m1 as usize] {
                for ((j2, k2), z2) in &by_level[m2 as usize] {
                    let j = wrap_mode(j1 + j2, m);
                    let k = k1 + k2;
                    let key = (j, k);
                    let inside = *member.entry(key.clone()).or_insert_with(|| in_set_k(key.0, &key.1, profile, m));
                    if !inside {
                        continue;
                    }
                    let exponent = 2.0 * (lv.m_of(*j1, k1) + lv.m_of(*j2, k2)) as f64 - 2.0 * lv.m_of(j, &key.1) as f64;
                    let factor =
                        tau * tau * lv.psi[lv.slot(j)] * lv.phi[lv.slot(*j1)] * lv.phi[lv.slot(*j2)] * dnu(exponent);
                    rhs.entry(key).or_default().add_scaled(&z1.mul(z2), Complex64::new(factor, 0.0));
                }
            }
        }

        let mut fresh: Vec<(Key, SlowPolynomial)> = Vec::new();
        let mut off_by_mode: BTreeMap<i64, Vec<(MultiIndex, SlowPolynomial)>> = BTreeMap::new();
        for ((j, k), p) in &rhs {
            let unit = MultiIndex::unit_of_mode(*j);
            if *k == unit || *k == -&unit || p.is_zero() {
                continue;
            }
            let b = lv.beta(*j, k, p.degree().unwrap_or(0) + 1);
            if b[0].norm() < SINGULAR {
                return Err(Error::Resonant { j: *j, k: k.to_string() });
            }
            let z = solve_operator(&b, p);
            off_by_mode.entry(*j).or_default().push((k.clone(), z.clone()));
            fresh.push(((*j, k.clone()), z));
        }

        let h = dnu(1.0) * tau;
        for j in -mi..mi {
            let unit = MultiIndex::unit_of_mode(j);
            let e_j = profile.e(j);
            let wj = params.omega(j);
            let mut q = [SlowPolynomial::zero(), SlowPolynomial::zero()];
            for (idx, k) in [unit.clone(), -&unit].iter().enumerate() {
                if let Some(p) = rhs.get(&(j, k.clone())) {
                    if !p.is_zero() {
                        let b = lv.beta(j, k, p.degree().unwrap_or(0) + 2);
                        let y = solve_operator(&b[1..], p);
                        q[idx] = y.integral();
                    }
                }
            }
            let (a_m, b_m) = if order == e_j {
                let scale = delta.powi(-(e_j as i32));
                (u0.get(j) * scale, udot0.get(j) * (2.0 * tau * sinc(tau * wj) * scale))
            } else {
                (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0))
            };
            let mut big_a = a_m;
            let mut big_b = b_m;
            if let Some(offs) = off_by_mode.get(&j) {
                for (k, z) in offs {
                    let w = dnu(2.0 * lv.m_of(j, k) as f64 - 2.0 * e_j as f64);
                    let theta = tau * k.dot(params);
                    big_a -= z.eval(0.0) * w;
                    big_b -= (z.eval(h) * Complex64::from_polar(1.0, theta)
                        - z.eval(-h) * Complex64::from_polar(1.0, -theta))
                        * w;
                }
            }
            let (ep, em) = (Complex64::from_polar(1.0, tau * wj), Complex64::from_polar(1.0, -tau * wj));
            big_b -= q[0].eval(h) * ep - q[0].eval(-h) * em + q[1].eval(h) * em - q[1].eval(-h) * ep;
            let zero = Complex64::new(0.0, 0.0);
            if big_a == zero && big_b == zero && q[0].is_zero() && q[1].is_zero() {
                continue;
            }
            let ratio = big_b / (2.0 * I * (tau * wj).sin());
            let x = [(big_a + ratio) * 0.5, (big_a - ratio) * 0.5];
            for (idx, k) in [unit.clone(), -&unit].into_iter().enumerate() {
                let z = &q[idx] + &SlowPolynomial::constant(x[idx]);
                if !z.is_zero() {
                    fresh.push(((j, k), z));
                }
            }
        }

        for (key, z) in &fresh {
            levels.entry(key.clone()).or_default().insert(order, z.clone());
        }
        by_level[order as usize] = fresh;
    }

    Ok(ModulationTable::assemble(setup.clone(), eps, levels))
}

impl ModulationTable {
    fn assemble(setup: MfeSetup, eps: f64, levels: BTreeMap<Key, BTreeMap<u32, SlowPolynomial>>) -> Self {
        let delta = eps.sqrt();
        let nu = setup.nu;
        let mut full = BTreeMap::new();
        for ((j, k), per) in &levels {
            let mjk = m_weight(*j, k, &setup.profile) as f64;
            let mut z = SlowPolynomial::zero();
            for (&m, p) in per {
                let c = delta.powf(2.0 * mjk * nu + m as f64 * (1.0 - 2.0 * nu));
                z.add_scaled(p, Complex64::new(c, 0.0));
            }
            if !z.is_zero() {
                full.insert((*j, k.clone()), z);
            }
        }
        Self { setup, eps, delta, levels, full }
    }

    /// A table from explicitly given `z_{j,m}^k`, for fixtures and round trips.
    pub fn from_levels(
        setup: &MfeSetup,
        eps: f64,
        entries: impl IntoIterator<Item = (i64, MultiIndex, u32, SlowPolynomial)>,
    ) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Validation(format!("eps must be positive, got {eps}")));
        }
        let m = setup.params.degree();
        let mut levels: BTreeMap<Key, BTreeMap<u32, SlowPolynomial>> = BTreeMap::new();
        for (j, k, order, p) in entries {
            if !in_set_k(j, &k, &setup.profile, m) {
                return Err(Error::Validation(format!("({j}, [{k}]) is not in the interaction set")));
            }
            if p.is_zero() {
                continue;
            }
            levels.entry((j, k)).or_default().insert(order, p);
        }
        Ok(Self::assemble(setup.clone(), eps, levels))
    }

    pub fn setup(&self) -> &MfeSetup {
        &self.setup
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of pairs `(j, k)` with a nonzero modulation function.
    pub fn len(&self) -> usize {
        self.full.len()
    }

    pub fn is_empty(&self) -> bool {
        self.full.is_empty()
    }

    /// `z_{j,m}^k`, if nonzero.
    pub fn entry(&self, j: i64, k: &MultiIndex, m: u32) -> Option<&SlowPolynomial> {
        self.levels.get(&(j, k.clone())).and_then(|per| per.get(&m))
    }

    /// Every nonzero `z_{j,m}^k` as `(j, k, m, z)`.
    pub fn levels(&self) -> impl Iterator<Item = (i64, &MultiIndex, u32, &SlowPolynomial)> {
        self.levels.iter().flat_map(|((j, k), per)| per.iter().map(move |(&m, p)| (*j, k, m, p)))
    }

    /// The scaled modulation function `z_j^k(s)` of the expansion.
    pub fn modulation(&self, j: i64, k: &MultiIndex) -> Option<&SlowPolynomial> {
        self.full.get(&(j, k.clone()))
    }

    /// Keeps only the pairs for which `keep(j, k)` holds.
    pub fn retain(&self, mut keep: impl FnMut(i64, &MultiIndex) -> bool) -> Self {
        let levels =
            self.levels.iter().filter(|((j, k), _)| keep(*j, k)).map(|(a, b)| (a.clone(), b.clone())).collect();
        Self::assemble(self.setup.clone(), self.eps, levels)
    }

    fn slow(&self, t: f64) -> f64 {
        self.delta.powf(self.setup.nu) * t
    }

    fn h(&self) -> f64 {
        self.delta.powf(self.setup.nu) * self.setup.tau
    }

    fn m(&self) -> usize {
        self.setup.params.degree()
    }

    /// `û_j(t) = Σ_k z_j^k(δ^ν t) e^{i(k·ω)t}`.
    pub fn evaluate(&self, t: f64) -> SpectralVector {
        let params = &self.setup.params;
        let s = self.slow(t);
        let mut out = SpectralVector::zeros(self.m());
        for ((j, k), z) in &self.full {
            let v = out.get(*j) + z.eval(s) * Complex64::from_polar(1.0, k.dot(params) * t);
            out.set(*j, v);
        }
        out
    }

    /// `(2τ sinc(τω_j))⁻¹ Σ_k [z(s + h) e^{iθ} - z(s - h) e^{-iθ}] e^{i(k·ω)t}`.
    pub fn evaluate_velocity(&self, t: f64) -> Result<SpectralVector> {
        let params = &self.setup.params;
        let tau = self.setup.tau;
        let (s, h) = (self.slow(t), self.h());
        let mut out = SpectralVector::zeros(self.m());
        for ((j, k), z) in &self.full {
            let kw = k.dot(params);
            let denom = 2.0 * tau * self.sinc_j(*j)?;
            let diff = z.eval(s + h) * Complex64::from_polar(1.0, tau * kw)
                - z.eval(s - h) * Complex64::from_polar(1.0, -tau * kw);
            let v = out.get(*j) + diff * Complex64::from_polar(1.0, kw * t) / denom;
            out.set(*j, v);
        }
        Ok(out)
    }

    fn sinc_j(&self, j: i64) -> Result<f64> {
        let s = sinc(self.setup.tau * self.setup.params.omega(j));
        if s.abs() < SINGULAR {
            return Err(Error::VelocitySingular { j, value: s });
        }
        Ok(s)
    }

    fn phi_j(&self, j: i64) -> f64 {
        self.setup.filters.phi(self.setup.tau * self.setup.params.omega(j))
    }

    fn psi_j(&self, j: i64) -> f64 {
        self.setup.filters.psi(self.setup.tau * self.setup.params.omega(j))
    }

    /// `Σ φ_{j1} φ_{j2} z_{j1}^{k1}(s) z_{j2}^{k2}(s)` over pairs landing in
    /// 𝒦, keyed by the target pair. `filter` selects pairs of orders.
    fn products(
        &self,
        s: f64,
        mut include_orders: impl FnMut(u32, u32) -> bool,
        per_level: bool,
    ) -> BTreeMap<Key, Complex64> {
        let m = self.m();
        let profile = &self.setup.profile;
        let mut cache: HashMap<Key, bool> = HashMap::new();
        let mut out: BTreeMap<Key, Complex64> = BTreeMap::new();
        let values: Vec<(i64, &MultiIndex, u32, Complex64)> = if per_level {
            let nu = self.setup.nu;
            self.levels
                .iter()
                .flat_map(|((j, k), per)| {
                    let mjk = m_weight(*j, k, profile) as f64;
                    per.iter().map(move |(&mm, p)| {
                        let c = self.delta.powf(2.0 * mjk * nu + mm as f64 * (1.0 - 2.0 * nu));
                        (*j, k, mm, p.eval(s) * c)
                    })
                })
                .collect()
        } else {
            self.full.iter().map(|((j, k), z)| (*j, k, 0, z.eval(s))).collect()
        };
        for &(j1, k1, m1, z1) in &values {
            for &(j2, k2, m2, z2) in &values {
                if !include_orders(m1, m2) {
                    continue;
                }
                let key = (wrap_mode(j1 + j2, m), k1 + k2);
                let inside = *cache.entry(key.clone()).or_insert_with(|| in_set_k(key.0, &key.1, profile, m));
                if inside {
                    *out.entry(key).or_default() += z1 * z2 * (self.phi_j(j1) * self.phi_j(j2));
                }
            }
        }
        out
    }

    /// Residual of the modulation system,
    /// `d_j^k = (τ² ψ_j)⁻¹ Σ_n β_n z^{(n)}(s) - Σ φφ z z`, over every pair with
    /// a modulation function or a product landing in 𝒦.
    pub fn defect(&self, t: f64) -> Result<Defect> {
        let s = self.slow(t);
        let params = &self.setup.params;
        let tau = self.setup.tau;
        let dnu = self.delta.powf(self.setup.nu);
        let mut per_pair: BTreeMap<Key, Complex64> = self.products(s, |_, _| true, false);
        for v in per_pair.values_mut() {
            *v = -*v;
        }
        for ((j, k), z) in &self.full {
            self.sinc_j(*j)?;
            let b = beta(params, tau, dnu, *j, k, z.degree().unwrap_or(0));
            let lz = apply_operator(&b, z).eval(s) / (tau * tau * self.psi_j(*j));
            *per_pair.entry((*j, k.clone())).or_default() += lz;
        }
        Ok(self.finish_defect(per_pair))
    }

    /// The defect from its closed form: minus the products of orders
    /// `m1 + m2 > m_max` that the construction left out.
    pub fn defect_closed_form(&self, t: f64) -> Result<Defect> {
        let m_max = self.setup.m_max;
        let mut per_pair = self.products(self.slow(t), |a, b| a + b > m_max, true);
        for v in per_pair.values_mut() {
            *v = -*v;
        }
        Ok(self.finish_defect(per_pair))
    }

    fn finish_defect(&self, per_pair: BTreeMap<Key, Complex64>) -> Defect {
        let m = self.m();
        let mut mags = vec![0.0; 2 * m];
        for ((j, _), d) in &per_pair {
            mags[(j + m as i64) as usize] += d.norm();
        }
        let indexed: Vec<(i64, f64)> = mags.iter().enumerate().map(|(i, &a)| (i as i64 - m as i64, a)).collect();
        let weights =
            WeightScheme::with_any_exponent(self.setup.sobolev, self.setup.nu, self.eps).expect("validated at setup");
        let norm = weighted_norm_of_magnitudes(&indexed, &weights, &self.setup.profile);
        Defect { per_pair, per_mode: mags, norm }
    }

    /// `ℰ_l(t) = -(i/2) Σ k_l ω_l / (τ sinc(τω_j)) z_{-j}^{-k}(s) e^{iθ} z_j^k(δ^ν(t + τ))`
    /// for `l = 0..=M`.
    pub fn almost_invariants(&self, t: f64) -> Result<AlmostInvariants> {
        let params = &self.setup.params;
        let tau = self.setup.tau;
        let (s, h) = (self.slow(t), self.h());
        let mut values = vec![Complex64::new(0.0, 0.0); self.m() + 1];
        for ((j, k), z) in &self.full {
            let Some(partner) = self.full.get(&(wrap_mode(-j, self.m()), -k)) else { continue };
            let core = partner.eval(s) * Complex64::from_polar(1.0, tau * k.dot(params)) * z.eval(s + h)
                / (tau * self.sinc_j(*j)?);
            for (l, kl) in k.entries() {
                values[l] += -0.5 * I * core * (kl as f64 * params.omega(l as i64));
            }
        }
        Ok(AlmostInvariants { time: t, values })
    }

    /// The same energies from the expanded form
    ///
    /// ```text
    /// ½ Σ [ k_l ω_l (k·ω) sinc(τk·ω)/sinc(τω_j) |z|²
    ///       - i k_l ω_l / sinc(τω_j) z_{-j}^{-k} e^{iθ} Σ_{n>=1} δ^{nν} τ^{n-1}/n! z^{(n)} ]
    /// ```
    pub fn almost_invariants_alt(&self, t: f64) -> Result<AlmostInvariants> {
        let params = &self.setup.params;
        let tau = self.setup.tau;
        let s = self.slow(t);
        let dnu = self.delta.powf(self.setup.nu);
        let mut values = vec![Complex64::new(0.0, 0.0); self.m() + 1];
        for ((j, k), z) in &self.full {
            let Some(partner) = self.full.get(&(wrap_mode(-j, self.m()), -k)) else { continue };
            let kw = k.dot(params);
            let sj = self.sinc_j(*j)?;
            let zs = z.eval(s);
            let first = kw * sinc(tau * kw) / sj * zs.norm_sqr();
            let mut series = Complex64::new(0.0, 0.0);
            let mut der = z.clone();
            let mut coef = 1.0 / tau;
            for n in 1.. {
                der = der.derivative();
                if der.is_zero() {
                    break;
                }
                coef *= dnu * tau / n as f64;
                series += der.eval(s) * coef;
            }
            let second = -I / sj * partner.eval(s) * Complex64::from_polar(1.0, tau * kw) * series;
            for (l, kl) in k.entries() {
                let w = kl as f64 * params.omega(l as i64);
                values[l] += 0.5 * (first * w + second * w);
            }
        }
        Ok(AlmostInvariants { time: t, values })
    }

    /// `Σ k_l / sinc(τω_j) z_{-j}^{-k}(s) cos(τω_j) z_j^k(s)` for `l = 0..=M`,
    /// which vanishes for conjugate-symmetric tables.
    pub fn derivation_identity(&self, t: f64) -> Result<Vec<Complex64>> {
        let params = &self.setup.params;
        let tau = self.setup.tau;
        let s = self.slow(t);
        let mut values = vec![Complex64::new(0.0, 0.0); self.m() + 1];
        for ((j, k), z) in &self.full {
            let Some(partner) = self.full.get(&(wrap_mode(-j, self.m()), -k)) else { continue };
            let term = partner.eval(s) * z.eval(s) * (tau * params.omega(*j)).cos() / self.sinc_j(*j)?;
            for (l, kl) in k.entries() {
                values[l] += term * kl as f64;
            }
        }
        Ok(values)
    }

    /// `max_{t ∈ grid} |ℰ_l(t) - ℰ_l(0)|` and its `σ_l ε^{-e(l)}`-weighted sum.
    pub fn invariant_drift(&self, t_grid: &[f64]) -> Result<InvariantDrift> {
        let base = self.almost_invariants(0.0)?;
        let mut per_mode = vec![0.0f64; self.m() + 1];
        for &t in t_grid {
            let e = self.almost_invariants(t)?;
            for (d, (a, b)) in per_mode.iter_mut().zip(e.values.iter().zip(&base.values)) {
                *d = d.max((a - b).norm());
            }
        }
        let weights =
            WeightScheme::with_any_exponent(self.setup.sobolev, self.setup.nu, self.eps).expect("validated at setup");
        let profile = &self.setup.profile;
        let weighted = per_mode
            .iter()
            .enumerate()
            .map(|(l, d)| weights.sigma(l as i64) * self.eps.powi(-(profile.e(l as i64) as i32)) * d)
            .sum();
        Ok(InvariantDrift { per_mode, weighted })
    }

    /// Nested text form:
    ///
    /// ```text
    /// {"rho": .., "M": .., "K": .., "tau": .., "filter": "..", "nu": .., "m_max": .., "s": .., "eps": ..,
    ///  "entries": {"<j>": {"<l1:k1,l2:k2>": {"<m>": [[re, im], ...]}}}}
    /// ```
    ///
    /// Reals are written with 17 significant digits.
    pub fn to_text(&self) -> String {
        let st = &self.setup;
        let num = |x: f64| format!("{x:.16e}");
        let mut out = String::new();
        let _ = write!(
            out,
            "{{\n  \"rho\": {},\n  \"M\": {},\n  \"K\": {},\n  \"tau\": {},\n  \"filter\": \"{}\",\n  \"nu\": {},\n  \"m_max\": {},\n  \"s\": {},\n  \"eps\": {},\n  \"entries\": {{",
            num(st.params.rho()),
            st.params.degree(),
            st.profile.truncation(),
            num(st.tau),
            st.filters.name(),
            num(st.nu),
            st.m_max,
            num(st.sobolev),
            num(self.eps),
        );
        let mut by_j: BTreeMap<i64, Vec<(&MultiIndex, &BTreeMap<u32, SlowPolynomial>)>> = BTreeMap::new();
        for ((j, k), per) in &self.levels {
            by_j.entry(*j).or_default().push((k, per));
        }
        for (nj, (j, ks)) in by_j.iter().enumerate() {
            let _ = write!(out, "{}\n    \"{j}\": {{", if nj > 0 { "," } else { "" });
            for (nk, (k, per)) in ks.iter().enumerate() {
                let _ = write!(out, "{}\n      \"{k}\": {{", if nk > 0 { "," } else { "" });
                for (nm, (m, p)) in per.iter().enumerate() {
                    let coeffs: Vec<String> =
                        p.coeffs().iter().map(|c| format!("[{}, {}]", num(c.re), num(c.im))).collect();
                    let _ = write!(out, "{}\"{m}\": [{}]", if nm > 0 { ", " } else { "" }, coeffs.join(", "));
                }
                out.push('}');
            }
            out.push_str("\n    }");
        }
        out.push_str("\n  }\n}\n");
        out
    }

    /// Parses [`ModulationTable::to_text`] output. The filter must be one of
    /// the built-in pairs; the resonance check is repeated.
    pub fn from_text(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let field = |name: &str| v.get(name).ok_or_else(|| Error::Parse(format!("missing field `{name}`")));
        let real = |name: &str| field(name)?.as_f64().ok_or_else(|| Error::Parse(format!("`{name}` is not a number")));
        let int = |name: &str| field(name)?.as_u64().ok_or_else(|| Error::Parse(format!("`{name}` is not an integer")));
        let params = WaveParams::new(real("rho")?, int("M")? as usize)?;
        let profile = EnergyProfile::new(int("K")? as u32)?;
        let filter_name = field("filter")?.as_str().ok_or_else(|| Error::Parse("`filter` is not a string".into()))?;
        let filters = FilterPair::by_name(filter_name)?;
        let setup = MfeSetup::new(&params, &profile, &filters, real("tau")?)?
            .with_nu(real("nu")?)?
            .with_m_max(int("m_max")? as u32)?
            .with_sobolev(real("s")?)?;
        let entries = field("entries")?.as_object().ok_or_else(|| Error::Parse("`entries` is not an object".into()))?;
        let mut list = Vec::new();
        for (j, ks) in entries {
            let j: i64 = j.parse().map_err(|_| Error::Parse(format!("bad mode `{j}`")))?;
            let ks = ks.as_object().ok_or_else(|| Error::Parse(format!("mode {j} is not an object")))?;
            for (k, per) in ks {
                let k: MultiIndex = k.parse()?;
                let per = per.as_object().ok_or_else(|| Error::Parse(format!("({j}, {k}) is not an object")))?;
                for (m, coeffs) in per {
                    let m: u32 = m.parse().map_err(|_| Error::Parse(format!("bad order `{m}`")))?;
                    let coeffs = coeffs
                        .as_array()
                        .ok_or_else(|| Error::Parse("coefficients must be a list".into()))?
                        .iter()
                        .map(|c| {
                            let pair = c.as_array().filter(|a| a.len() == 2);
                            let pair = pair.ok_or_else(|| Error::Parse("coefficient must be [re, im]".into()))?;
                            let re = pair[0].as_f64().ok_or_else(|| Error::Parse("bad real part".into()))?;
                            let im = pair[1].as_f64().ok_or_else(|| Error::Parse("bad imaginary part".into()))?;
                            Ok(Complex64::new(re, im))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    list.push((j, k.clone(), m, SlowPolynomial::from_coeffs(coeffs)));
                }
            }
        }
        Self::from_levels(&setup, real("eps")?, list)
    }
}
