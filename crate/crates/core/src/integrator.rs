//! Symplectic trigonometric integrators for `u_tt - u_xx + rho u = u²`.
//!
//! With `Ω = diag(ω_j)`, filters `Φ = φ(τΩ)`, `Ψ = ψ(τΩ)` and the aliased
//! nonlinearity `g(u) = (Φu) * (Φu)`, the two-step recurrence reads
//!
//! ```text
//! u^{n+1} - 2 cos(τΩ) u^n + u^{n-1} = τ² Ψ g(u^n)
//! u^1 = cos(τΩ) u^0 + τ sinc(τΩ) u̇^0 + ½ τ² Ψ g(u^0)
//! 2τ sinc(τΩ) u̇^n = u^{n+1} - u^{n-1}
//! ```
//!
//! Propagation uses the equivalent one-step map on `(u^n, u̇^n)`, which exists
//! because the filters satisfy `ψ = sinc·φ`. The two-step form is kept as an
//! independent route for cross-checks.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::{mode_energies, sinc, FourierGrid, SpectralVector, WaveParams};

/// Coefficients beyond this magnitude abort a run.
pub const DEFAULT_BLOWUP_THRESHOLD: f64 = 1e6;

/// Relative imaginary residue of the physical-space product above which a
/// warning is logged.
pub const DEFAULT_REALITY_TOLERANCE: f64 = 1e-10;

/// Energy sampling stride used by the experiments.
pub const DEFAULT_SAMPLE_STRIDE: usize = 10;

const SINGULAR_SINC: f64 = 1e-12;

type FilterFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A pair of filter functions `(φ, ψ)` defining one member of the family.
///
/// Only symplectic pairs, `ψ(ξ) = sinc(ξ) φ(ξ)`, can be constructed.
#[derive(Clone)]
pub struct FilterPair {
    name: String,
    phi: FilterFn,
    psi: FilterFn,
}

impl fmt::Debug for FilterPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilterPair").field("name", &self.name).finish()
    }
}

impl FilterPair {
    /// Validates a custom pair on a sample grid of `ξ ∈ [-50, 50]`.
    pub fn new(
        name: impl Into<String>,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        psi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let pair = Self::from_parts(name.into(), Arc::new(phi), Arc::new(psi));
        pair.validate()?;
        Ok(pair)
    }

    pub(crate) fn from_parts(name: String, phi: FilterFn, psi: FilterFn) -> Self {
        Self { name, phi, psi }
    }

    fn validate(&self) -> Result<()> {
        let reject = |reason: String| Err(Error::Filter { name: self.name.clone(), reason });
        if (self.phi(0.0) - 1.0).abs() > 1e-14 || (self.psi(0.0) - 1.0).abs() > 1e-14 {
            return reject("phi(0) and psi(0) must equal 1".into());
        }
        for i in 0..=5000 {
            let xi = i as f64 * 0.01;
            let (phi, psi) = (self.phi(xi), self.psi(xi));
            if !phi.is_finite() || !psi.is_finite() {
                return reject(format!("non-finite value at xi = {xi}"));
            }
            if (phi - self.phi(-xi)).abs() > 1e-14 || (psi - self.psi(-xi)).abs() > 1e-14 {
                return reject(format!("not even at xi = {xi}"));
            }
            if (psi - sinc(xi) * phi).abs() > 1e-12 * (1.0 + psi.abs()) {
                return reject(format!("psi != sinc * phi at xi = {xi}"));
            }
        }
        Ok(())
    }

    /// `φ = 1`, `ψ = sinc`: the impulse method.
    pub fn deuflhard() -> Self {
        Self::from_parts("deuflhard".into(), Arc::new(|_| 1.0), Arc::new(sinc))
    }

    /// `φ = sinc`, `ψ = sinc²`.
    pub fn mollified_impulse() -> Self {
        Self::from_parts("mollified_impulse".into(), Arc::new(sinc), Arc::new(|x| sinc(x) * sinc(x)))
    }

    pub fn by_name(name: &str) -> Result<Self> {
        builtin_filters()
            .into_iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::Validation(format!("unknown filter `{name}`")))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn phi(&self, xi: f64) -> f64 {
        (self.phi)(xi)
    }

    pub fn psi(&self, xi: f64) -> f64 {
        (self.psi)(xi)
    }
}

/// The built-in symplectic filter pairs.
pub fn builtin_filters() -> Vec<FilterPair> {
    vec![FilterPair::deuflhard(), FilterPair::mollified_impulse()]
}

/// The right-hand side of the semi-discrete equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Nonlinearity {
    /// `g(u) = u²`.
    #[default]
    Quadratic,
    /// `g = 0`: the linear Klein-Gordon equation.
    Disabled,
}

/// Positions and velocities at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub u: SpectralVector,
    pub udot: SpectralVector,
    pub n: usize,
    pub tau: f64,
}

impl SpectralState {
    pub fn new(u: SpectralVector, udot: SpectralVector, tau: f64) -> Self {
        Self { u, udot, n: 0, tau }
    }

    pub fn time(&self) -> f64 {
        self.n as f64 * self.tau
    }
}

/// Sampled mode energies `E_0..E_M` along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    /// One row per sample time, columns `E_0..E_M`.
    pub energies: Vec<Vec<f64>>,
    pub sample_stride: usize,
    /// `max_n |E_1^n - E_1^0|` over every step, not only the sampled ones.
    pub max_e1_drift: f64,
}

impl EnergyTrace {
    fn empty(stride: usize) -> Self {
        Self { times: Vec::new(), energies: Vec::new(), sample_stride: stride, max_e1_drift: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of energy columns, `M + 1`.
    pub fn modes(&self) -> usize {
        self.energies.first().map_or(0, Vec::len)
    }

    pub fn column(&self, l: usize) -> Vec<f64> {
        self.energies.iter().map(|row| row[l]).collect()
    }

    /// `sup E_l` over samples with `from <= t <= to`, or `None` if there are none.
    pub fn sup_over(&self, l: usize, from: f64, to: f64) -> Option<f64> {
        self.times
            .iter()
            .zip(&self.energies)
            .filter(|(&t, _)| t >= from && t <= to)
            .map(|(_, row)| row[l])
            .reduce(f64::max)
    }

    /// Replaces the samples by maxima over consecutive windows of `window`
    /// steps, `max_{m < window} E_l^{n+m}` for `n = 0, window, 2 window, ...`.
    /// A trailing partial window is kept.
    pub fn windowed_max(&self, window: usize) -> Result<Self> {
        if window == 0 || !window.is_multiple_of(self.sample_stride) {
            return Err(Error::Validation(format!(
                "window {window} must be a positive multiple of the sample stride {}",
                self.sample_stride
            )));
        }
        let per = window / self.sample_stride;
        let mut out = Self::empty(window);
        out.max_e1_drift = self.max_e1_drift;
        for (times, rows) in self.times.chunks(per).zip(self.energies.chunks(per)) {
            let mut best = rows[0].clone();
            for row in &rows[1..] {
                for (b, &x) in best.iter_mut().zip(row) {
                    *b = b.max(x);
                }
            }
            out.times.push(times[0]);
            out.energies.push(best);
        }
        Ok(out)
    }
}

/// A failed run together with everything sampled before the failure.
#[derive(Debug, Clone)]
pub struct RunError {
    pub error: Error,
    pub partial: EnergyTrace,
    /// Index of the last step whose state was finite and below the threshold.
    pub last_finite_step: usize,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (last finite step {})", self.error, self.last_finite_step)
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// A configured trigonometric integrator: parameters, filters and step size,
/// with the diagonal matrices `cos(τΩ)`, `sin(τΩ)`, `sinc(τΩ)`, `Φ`, `Ψ`
/// tabulated once.
#[derive(Debug, Clone)]
pub struct Integrator {
    params: WaveParams,
    filters: FilterPair,
    tau: f64,
    grid: FourierGrid,
    omega: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    sinc: Vec<f64>,
    phi: Vec<f64>,
    psi: Vec<f64>,
    nonlinearity: Nonlinearity,
    blowup_threshold: f64,
    reality_tolerance: f64,
}

impl Integrator {
    pub fn new(params: &WaveParams, filters: &FilterPair, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Validation(format!("step size must be positive, got {tau}")));
        }
        let m = params.degree() as i64;
        let omega: Vec<f64> = (-m..m).map(|j| params.omega(j)).collect();
        let table = |f: &dyn Fn(f64) -> f64| omega.iter().map(|&w| f(tau * w)).collect::<Vec<_>>();
        Ok(Self {
            cos: table(&f64::cos),
            sin: table(&f64::sin),
            sinc: table(&sinc),
            phi: table(&|x| filters.phi(x)),
            psi: table(&|x| filters.psi(x)),
            omega,
            params: params.clone(),
            filters: filters.clone(),
            tau,
            grid: FourierGrid::new(params.degree()),
            nonlinearity: Nonlinearity::Quadratic,
            blowup_threshold: DEFAULT_BLOWUP_THRESHOLD,
            reality_tolerance: DEFAULT_REALITY_TOLERANCE,
        })
    }

    pub fn with_nonlinearity(mut self, nonlinearity: Nonlinearity) -> Self {
        self.nonlinearity = nonlinearity;
        self
    }

    pub fn with_blowup_threshold(mut self, threshold: f64) -> Self {
        self.blowup_threshold = threshold;
        self
    }

    pub fn with_reality_tolerance(mut self, tolerance: f64) -> Self {
        self.reality_tolerance = tolerance;
        self
    }

    pub fn params(&self) -> &WaveParams {
        &self.params
    }

    pub fn filters(&self) -> &FilterPair {
        &self.filters
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn check(&self, v: &SpectralVector) -> Result<()> {
        if v.degree() != self.params.degree() {
            return Err(Error::Shape { expected: self.params.degree(), found: v.degree() });
        }
        Ok(())
    }

    fn guard(&self, v: &SpectralVector, step: usize) -> Result<()> {
        if !v.all_finite() || v.max_abs() > self.blowup_threshold {
            return Err(Error::BlowUp { step });
        }
        Ok(())
    }

    fn diag(&self, d: &[f64], v: &SpectralVector) -> SpectralVector {
        let mut out = v.clone();
        for (c, &x) in out.coeffs_mut().iter_mut().zip(d) {
            *c *= x;
        }
        out
    }

    /// `g(u) = (Φu) * (Φu)` and the imaginary residue of the physical product.
    pub fn nonlinearity(&self, u: &SpectralVector) -> Result<(SpectralVector, f64)> {
        self.check(u)?;
        match self.nonlinearity {
            Nonlinearity::Disabled => Ok((SpectralVector::zeros(u.degree()), 0.0)),
            Nonlinearity::Quadratic => {
                let fu = self.diag(&self.phi, u);
                self.grid.convolve_with_residue(&fu, &fu)
            }
        }
    }

    /// The starting value `u^1`.
    pub fn start_step(&self, u0: &SpectralVector, udot0: &SpectralVector) -> Result<SpectralVector> {
        self.check(u0)?;
        self.check(udot0)?;
        let (g, _) = self.nonlinearity(u0)?;
        let h = self.tau;
        let mut out = SpectralVector::zeros(u0.degree());
        for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
            *c = self.cos[i] * u0.coeffs()[i]
                + h * self.sinc[i] * udot0.coeffs()[i]
                + 0.5 * h * h * self.psi[i] * g.coeffs()[i];
        }
        self.guard(&out, 1)?;
        Ok(out)
    }

    /// `u^{n+1}` from `u^{n-1}` and `u^n`. `step` is `n + 1`, for error reports.
    pub fn two_step(&self, u_prev: &SpectralVector, u_curr: &SpectralVector, step: usize) -> Result<SpectralVector> {
        self.check(u_prev)?;
        self.check(u_curr)?;
        let (g, _) = self.nonlinearity(u_curr)?;
        let h2 = self.tau * self.tau;
        let mut out = SpectralVector::zeros(u_curr.degree());
        for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
            *c = 2.0 * self.cos[i] * u_curr.coeffs()[i] - u_prev.coeffs()[i] + h2 * self.psi[i] * g.coeffs()[i];
        }
        self.guard(&out, step)?;
        Ok(out)
    }

    /// `u̇^n = (u^{n+1} - u^{n-1}) / (2τ sinc(τΩ))`.
    pub fn velocity(&self, u_next: &SpectralVector, u_prev: &SpectralVector) -> Result<SpectralVector> {
        self.check(u_next)?;
        self.check(u_prev)?;
        self.check_velocity_regular()?;
        let mut out = u_next - u_prev;
        for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
            *c /= 2.0 * self.tau * self.sinc[i];
        }
        Ok(out)
    }

    /// Fails if `|sinc(τω_j)| < 1e-12` for some mode.
    pub fn check_velocity_regular(&self) -> Result<()> {
        let m = self.params.degree() as i64;
        match self.sinc.iter().position(|s| s.abs() < SINGULAR_SINC) {
            Some(i) => Err(Error::VelocitySingular { j: i as i64 - m, value: self.sinc[i] }),
            None => Ok(()),
        }
    }

    /// One step of the map
    ///
    /// ```text
    /// u^{n+1} = cos(τΩ) u^n + Ω⁻¹ sin(τΩ) u̇^n + ½τ² Ψ g^n
    /// u̇^{n+1} = -Ω sin(τΩ) u^n + cos(τΩ) u̇^n + ½τ (cos(τΩ) Φ g^n + Φ g^{n+1})
    /// ```
    pub fn one_step(&self, state: &SpectralState) -> Result<SpectralState> {
        self.step_measured(state).map(|(s, _)| s)
    }

    fn step_measured(&self, state: &SpectralState) -> Result<(SpectralState, f64)> {
        self.check(&state.u)?;
        self.check(&state.udot)?;
        let h = self.tau;
        let (g0, r0) = self.nonlinearity(&state.u)?;
        let mut u = SpectralVector::zeros(state.u.degree());
        for (i, c) in u.coeffs_mut().iter_mut().enumerate() {
            *c = self.cos[i] * state.u.coeffs()[i]
                + h * self.sinc[i] * state.udot.coeffs()[i]
                + 0.5 * h * h * self.psi[i] * g0.coeffs()[i];
        }
        self.guard(&u, state.n + 1)?;
        let (g1, r1) = self.nonlinearity(&u)?;
        let mut udot = SpectralVector::zeros(state.u.degree());
        for (i, c) in udot.coeffs_mut().iter_mut().enumerate() {
            let w = self.omega[i];
            *c = -w * self.sin[i] * state.u.coeffs()[i]
                + self.cos[i] * state.udot.coeffs()[i]
                + 0.5 * h * self.phi[i] * (self.cos[i] * g0.coeffs()[i] + g1.coeffs()[i]);
        }
        self.guard(&udot, state.n + 1)?;
        let next = SpectralState { u, udot, n: state.n + 1, tau: state.tau };
        Ok((next, r0.max(r1)))
    }

    /// Propagates `n_steps` steps with [`Integrator::one_step`], sampling the
    /// mode energies every `sample_stride` steps (and at step 0).
    pub fn run(&self, init: &SpectralState, n_steps: usize, sample_stride: usize) -> Result<EnergyTrace, RunError> {
        let mut trace = EnergyTrace::empty(sample_stride.max(1));
        let fail =
            |error: Error, trace: EnergyTrace, last: usize| RunError { error, partial: trace, last_finite_step: last };
        if sample_stride == 0 {
            return Err(fail(Error::Validation("sample stride must be positive".into()), trace, init.n));
        }
        let mut state = init.clone();
        let energies = |s: &SpectralState| mode_energies(&s.u, &s.udot, &self.params);
        let e0 = match energies(&state) {
            Ok(e) => e,
            Err(err) => return Err(fail(err, trace, init.n)),
        };
        let e1_ref = e0.get(1).copied().unwrap_or(0.0);
        trace.times.push(state.time());
        trace.energies.push(e0);
        let mut warned = false;
        for step in 1..=n_steps {
            let (next, residue) = match self.step_measured(&state) {
                Ok(x) => x,
                Err(err) => return Err(fail(err, trace, state.n)),
            };
            if residue > self.reality_tolerance && !warned {
                log::warn!(
                    "imaginary residue {residue:e} of the physical-space product exceeds {:e} at step {}",
                    self.reality_tolerance,
                    next.n
                );
                warned = true;
            }
            state = next;
            let e = energies(&state).expect("shape checked above");
            trace.max_e1_drift = trace.max_e1_drift.max((e[1] - e1_ref).abs());
            if step % sample_stride == 0 {
                trace.times.push(state.time());
                trace.energies.push(e);
            }
        }
        Ok(trace)
    }

    /// Propagates and returns every intermediate state, `n = 0..=n_steps`.
    pub fn trajectory(&self, init: &SpectralState, n_steps: usize) -> Result<Vec<SpectralState>> {
        let mut out = Vec::with_capacity(n_steps + 1);
        out.push(init.clone());
        for _ in 0..n_steps {
            let next = self.one_step(out.last().expect("nonempty"))?;
            out.push(next);
        }
        Ok(out)
    }
}

/// Initial data `u(x, 0) = a cos(x)`, `∂_t u(x, 0) = 0` with `a = 2 sqrt(2ε)/ω_1`,
/// so that `E_1^0 = ε` and every other mode energy vanishes.
pub fn make_single_mode_init(eps: f64, params: &WaveParams) -> Result<(SpectralVector, SpectralVector)> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }
    let m = params.degree();
    if m < 2 {
        return Err(Error::Validation("single-mode data needs M >= 2".into()));
    }
    let half = Complex64::new((2.0 * eps).sqrt() / params.omega(1), 0.0);
    let mut u = SpectralVector::zeros(m);
    u.set(1, half);
    u.set(-1, half);
    Ok((u, SpectralVector::zeros(m)))
}
