//! Fourier-side building blocks shared by every other module.
//!
//! A trigonometric polynomial of degree `M` is stored through its `2M`
//! coefficients `u_j`, `j = -M..M-1`. Slot `i` of the coefficient vector holds
//! mode `j = i - M`. The mode `j = +M` is never stored; it is identified with
//! `j = -M`, which is what the aliased product on the `2M` collocation points
//! produces anyway.
//!
//! FFT bin `b` (as used by `rustfft`) holds mode `j ≡ b (mod 2M)`, so slot `i`
//! maps to bin `(i + M) mod 2M`. Physical values are stored in the same
//! rotated order: slot `p` holds the value at `x_k = πk/M` with `k = p - M`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// `sin(x)/x`, with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Representative of `j` modulo `2M` in `-M..M-1`.
pub fn wrap_mode(j: i64, m: usize) -> i64 {
    let n = 2 * m as i64;
    (j + m as i64).rem_euclid(n) - m as i64
}

/// Physical and discretisation parameters: the Klein-Gordon constant `rho`
/// and the spectral degree `M`, with the frequencies `ω_j = sqrt(j² + rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveParams {
    rho: f64,
    m: usize,
    omega: Vec<f64>,
}

impl WaveParams {
    pub fn new(rho: f64, m: usize) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Validation(format!("rho must be positive, got {rho}")));
        }
        if m == 0 {
            return Err(Error::Validation("spectral degree M must be at least 1".into()));
        }
        let omega = (0..=m).map(|j| ((j * j) as f64 + rho).sqrt()).collect();
        Ok(Self { rho, m, omega })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Spectral degree `M`.
    pub fn degree(&self) -> usize {
        self.m
    }

    /// Number of stored modes, `2M`.
    pub fn len(&self) -> usize {
        2 * self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `ω_0..ω_M`.
    pub fn omegas(&self) -> &[f64] {
        &self.omega
    }

    /// `ω_j` for any stored mode; negative indices resolve through `|j|`.
    pub fn omega(&self, j: i64) -> f64 {
        self.omega[j.unsigned_abs() as usize]
    }

    pub(crate) fn check(&self, v: &SpectralVector) -> Result<()> {
        if v.degree() != self.m {
            return Err(Error::Shape { expected: self.m, found: v.degree() });
        }
        Ok(())
    }
}

/// Fourier coefficients `u_{-M}, ..., u_{M-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVector {
    m: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralVector {
    pub fn zeros(m: usize) -> Self {
        Self { m, coeffs: vec![Complex64::new(0.0, 0.0); 2 * m] }
    }

    /// Wraps a coefficient vector laid out as `j = -M..M-1`.
    pub fn from_coeffs(coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.is_empty() || !coeffs.len().is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "coefficient vector must have even positive length, got {}",
                coeffs.len()
            )));
        }
        Ok(Self { m: coeffs.len() / 2, coeffs })
    }

    /// Unit coefficient at mode `j`.
    pub fn unit(m: usize, j: i64) -> Self {
        let mut v = Self::zeros(m);
        v.set(j, Complex64::new(1.0, 0.0));
        v
    }

    pub fn degree(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    fn slot(&self, j: i64) -> usize {
        (wrap_mode(j, self.m) + self.m as i64) as usize
    }

    /// Coefficient of mode `j`, taken modulo `2M`.
    pub fn get(&self, j: i64) -> Complex64 {
        self.coeffs[self.slot(j)]
    }

    pub fn set(&mut self, j: i64, value: Complex64) {
        let i = self.slot(j);
        self.coeffs[i] = value;
    }

    /// `(j, u_j)` for `j = -M..M-1`.
    pub fn modes(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        let m = self.m as i64;
        self.coeffs.iter().enumerate().map(move |(i, &c)| (i as i64 - m, c))
    }

    /// Builds a vector mode by mode.
    pub fn from_fn(m: usize, mut f: impl FnMut(i64) -> Complex64) -> Self {
        let coeffs = (0..2 * m).map(|i| f(i as i64 - m as i64)).collect();
        Self { m, coeffs }
    }

    /// Multiplies mode `j` by `f(j)`.
    pub fn scaled_by(&self, mut f: impl FnMut(i64) -> f64) -> Self {
        Self::from_fn(self.m, |j| self.get(j) * f(j))
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Largest `|a_j - b_j|`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// Largest violation of `u_{-j} = conj(u_j)` (with `u_0`, `u_{-M}` real),
    /// relative to the largest coefficient. Zero for a vector of zeros.
    pub fn reality_defect(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let m = self.m as i64;
        let mut worst = self.get(0).im.abs().max(self.get(-m).im.abs());
        for j in 1..m {
            worst = worst.max((self.get(-j) - self.get(j).conj()).norm());
        }
        worst / scale
    }

    pub fn all_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

impl std::ops::Add for &SpectralVector {
    type Output = SpectralVector;

    fn add(self, rhs: &SpectralVector) -> SpectralVector {
        assert_eq!(self.m, rhs.m, "degree mismatch");
        SpectralVector { m: self.m, coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a + b).collect() }
    }
}

impl std::ops::Sub for &SpectralVector {
    type Output = SpectralVector;

    fn sub(self, rhs: &SpectralVector) -> SpectralVector {
        assert_eq!(self.m, rhs.m, "degree mismatch");
        SpectralVector { m: self.m, coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a - b).collect() }
    }
}

/// FFT plans for transforms of length `2M` between Fourier coefficients and
/// values on the collocation grid `x_k = πk/M`, `k = -M..M-1`.
#[derive(Clone)]
pub struct FourierGrid {
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FourierGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FourierGrid").field("m", &self.m).finish()
    }
}

impl FourierGrid {
    pub fn new(m: usize) -> Self {
        assert!(m > 0, "spectral degree must be positive");
        let mut planner = FftPlanner::new();
        Self { m, forward: planner.plan_fft_forward(2 * m), inverse: planner.plan_fft_inverse(2 * m) }
    }

    pub fn degree(&self) -> usize {
        self.m
    }

    /// `u(x_k) = Σ_j u_j e^{ijx_k}` at every collocation point.
    pub fn to_physical(&self, u: &SpectralVector) -> Vec<Complex64> {
        assert_eq!(u.degree(), self.m, "degree mismatch");
        let mut buf = rotate(u.coeffs(), self.m);
        self.inverse.process(&mut buf);
        rotate(&buf, self.m)
    }

    /// Real parts of [`FourierGrid::to_physical`].
    pub fn to_physical_real(&self, u: &SpectralVector) -> Vec<f64> {
        self.to_physical(u).into_iter().map(|c| c.re).collect()
    }

    /// Inverse of [`FourierGrid::to_physical`]: `u_j = (1/2M) Σ_k u(x_k) e^{-ijx_k}`.
    pub fn from_physical(&self, values: &[Complex64]) -> SpectralVector {
        assert_eq!(values.len(), 2 * self.m, "expected {} grid values", 2 * self.m);
        let mut buf = rotate(values, self.m);
        self.forward.process(&mut buf);
        let scale = 1.0 / (2 * self.m) as f64;
        let coeffs = rotate(&buf, self.m).into_iter().map(|c| c * scale).collect();
        SpectralVector { m: self.m, coeffs }
    }

    pub fn from_real(&self, values: &[f64]) -> SpectralVector {
        let complex: Vec<Complex64> = values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.from_physical(&complex)
    }

    /// Aliased discrete convolution `w_j = Σ_{j1+j2 ≡ j mod 2M} u_{j1} v_{j2}`,
    /// evaluated as a pointwise product on the collocation grid.
    pub fn convolve(&self, u: &SpectralVector, v: &SpectralVector) -> Result<SpectralVector> {
        self.convolve_with_residue(u, v).map(|(w, _)| w)
    }

    /// Like [`FourierGrid::convolve`], also returning the imaginary residue of
    /// the physical-space product relative to its largest real part.
    pub fn convolve_with_residue(&self, u: &SpectralVector, v: &SpectralVector) -> Result<(SpectralVector, f64)> {
        for x in [u, v] {
            if x.degree() != self.m {
                return Err(Error::Shape { expected: self.m, found: x.degree() });
            }
        }
        let pu = self.to_physical(u);
        let pv = self.to_physical(v);
        let prod: Vec<Complex64> = pu.iter().zip(&pv).map(|(a, b)| a * b).collect();
        let re = prod.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
        let im = prod.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        let residue = if re > 0.0 {
            im / re
        } else if im > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        Ok((self.from_physical(&prod), residue))
    }
}

fn rotate(values: &[Complex64], m: usize) -> Vec<Complex64> {
    let n = 2 * m;
    (0..n).map(|b| values[(b + m) % n]).collect()
}

/// Aliased convolution with a one-off FFT plan. Prefer keeping a
/// [`FourierGrid`] around when convolving repeatedly.
pub fn convolve(u: &SpectralVector, v: &SpectralVector) -> Result<SpectralVector> {
    if u.degree() != v.degree() {
        return Err(Error::Shape { expected: u.degree(), found: v.degree() });
    }
    FourierGrid::new(u.degree()).convolve(u, v)
}

/// The energy profile `e(j)`: 2 at `j = 0`, `|j|` for `0 < |j| < K`, and `K` beyond.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnergyProfile {
    k: u32,
}

impl EnergyProfile {
    pub fn new(k: u32) -> Result<Self> {
        if k < 3 {
            return Err(Error::Validation(format!("truncation parameter K must be >= 3, got {k}")));
        }
        Ok(Self { k })
    }

    /// The truncation parameter `K`.
    pub fn truncation(&self) -> u32 {
        self.k
    }

    pub fn e(&self, j: i64) -> u32 {
        let a = j.unsigned_abs();
        if a == 0 {
            2
        } else if a < self.k as u64 {
            a as u32
        } else {
            self.k
        }
    }
}

/// Weights `σ_j = max(|j|, 1)^{2s}` and the small-parameter scaling `ε^{-2e(j)ν}`
/// that together define the weighted norm used for defects and remainders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightScheme {
    s: f64,
    nu: f64,
    eps: f64,
}

impl WeightScheme {
    pub fn new(s: f64, nu: f64, eps: f64) -> Result<Self> {
        if !(s > 0.5) {
            return Err(Error::Validation(format!("Sobolev exponent s must exceed 1/2, got {s}")));
        }
        Self::with_any_exponent(s, nu, eps)
    }

    /// Skips the `s > 1/2` check, e.g. `s = 0` for the plain ℓ² norm.
    pub fn with_any_exponent(s: f64, nu: f64, eps: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&nu) {
            return Err(Error::Validation(format!("nu must lie in [0, 1/2), got {nu}")));
        }
        if !(eps > 0.0) {
            return Err(Error::Validation(format!("eps must be positive, got {eps}")));
        }
        if !(s >= 0.0) {
            return Err(Error::Validation(format!("s must be nonnegative, got {s}")));
        }
        Ok(Self { s, nu, eps })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn sigma(&self, j: i64) -> f64 {
        (j.unsigned_abs().max(1) as f64).powf(2.0 * self.s)
    }

    /// `σ_j ε^{-2e(j)ν}`.
    pub fn weight(&self, j: i64, profile: &EnergyProfile) -> f64 {
        self.sigma(j) * self.eps.powf(-2.0 * profile.e(j) as f64 * self.nu)
    }
}

/// `(Σ_j σ_j ε^{-2e(j)ν} |v_j|²)^{1/2}`.
pub fn weighted_norm(v: &SpectralVector, weights: &WeightScheme, profile: &EnergyProfile) -> f64 {
    v.modes().map(|(j, c)| weights.weight(j, profile) * c.norm_sqr()).sum::<f64>().sqrt()
}

/// Same norm applied to per-mode magnitudes (used for defect aggregates).
pub fn weighted_norm_of_magnitudes(magnitudes: &[(i64, f64)], weights: &WeightScheme, profile: &EnergyProfile) -> f64 {
    magnitudes.iter().map(|&(j, a)| weights.weight(j, profile) * a * a).sum::<f64>().sqrt()
}

/// `E_j = ½|ω_j u_j|² + ½|u̇_j|²` for `j = 0..M`; `E_M` is read from mode `-M`.
pub fn mode_energies(u: &SpectralVector, udot: &SpectralVector, params: &WaveParams) -> Result<Vec<f64>> {
    params.check(u)?;
    params.check(udot)?;
    let m = params.degree() as i64;
    Ok((0..=m)
        .map(|j| {
            let idx = if j == m { -m } else { j };
            mode_energy(u.get(idx), udot.get(idx), params.omega(idx))
        })
        .collect())
}

/// `E_j` for every stored mode `j = -M..M-1`.
pub fn mode_energies_signed(u: &SpectralVector, udot: &SpectralVector, params: &WaveParams) -> Result<Vec<f64>> {
    params.check(u)?;
    params.check(udot)?;
    Ok(u.modes().map(|(j, c)| mode_energy(c, udot.get(j), params.omega(j))).collect())
}

fn mode_energy(u: Complex64, udot: Complex64, omega: f64) -> f64 {
    0.5 * (omega * omega * u.norm_sqr() + udot.norm_sqr())
}
