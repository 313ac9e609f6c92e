//! Spectral simulation of the quadratic Klein-Gordon equation
//! `u_tt - u_xx + rho u = u²` on the torus, with symplectic trigonometric
//! integrators, a non-resonance scanner for the step size and a builder for
//! modulated Fourier expansions of the numerical solution.
//!
//! ```
//! use strata::{make_single_mode_init, FilterPair, Integrator, SpectralState, WaveParams};
//!
//! let params = WaveParams::new(3f64.sqrt(), 16)?;
//! let (u, udot) = make_single_mode_init(1e-3, &params)?;
//! let it = Integrator::new(&params, &FilterPair::deuflhard(), 0.05)?;
//! let trace = it.run(&SpectralState::new(u, udot, 0.05), 200, 10).unwrap();
//! assert!((trace.energies[0][1] - 1e-3).abs() < 1e-15);
//! # Ok::<(), strata::Error>(())
//! ```

pub mod error;
pub mod integrator;
pub mod mfe;
pub mod resonance;
pub mod spectral;

pub use error::{Error, Result};
pub use integrator::{
    builtin_filters, make_single_mode_init, EnergyTrace, FilterPair, Integrator, Nonlinearity, RunError, SpectralState,
};
pub use spectral::{
    convolve, mode_energies, mode_energies_signed, sinc, weighted_norm, weighted_norm_of_magnitudes, wrap_mode,
    EnergyProfile, FourierGrid, SpectralVector, WaveParams, WeightScheme,
};
