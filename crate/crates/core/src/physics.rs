//! Closed-form atom-cavity relations: the dressed cavity resonance, per-atom
//! dispersive shifts, free-space scattering and projection-noise scales.
//!
//! All frequencies are angular (rad/s). Atom counts are real-valued.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result, SimError};

/// Fixed constants of the cavity/atom system, angular units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityParams {
    /// Effective single-atom coupling (half the single-photon Rabi frequency).
    pub g: f64,
    /// Total cavity power decay rate.
    pub kappa: f64,
    /// Decay rate from mirror transmission alone.
    pub kappa0: f64,
    /// Cavity-atom detuning ω_c − ω_a (blue detuned, positive).
    pub delta: f64,
    /// Excited-state decay rate.
    pub gamma: f64,
    /// Axial trap frequency.
    pub omega_ax: f64,
    /// Ground hyperfine splitting.
    pub omega_hf: f64,
    /// Heating-induced dressed-frequency shift per free-space photon, Hz.
    pub recoil_shift_per_photon: f64,
}

impl Default for CavityParams {
    fn default() -> Self {
        Self {
            g: TAU * 447e3,
            kappa: TAU * 11.8e6,
            kappa0: TAU * 5.02e6,
            delta: TAU * 200e6,
            gamma: TAU * 6.07e6,
            omega_ax: TAU * 150e3,
            omega_hf: TAU * 6.834e9,
            recoil_shift_per_photon: 1.3,
        }
    }
}

impl CavityParams {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("g", self.g),
            ("kappa", self.kappa),
            ("kappa0", self.kappa0),
            ("delta", self.delta),
            ("gamma", self.gamma),
            ("omega_ax", self.omega_ax),
            ("omega_hf", self.omega_hf),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::ConfigKey {
                    key: format!("cavity.{name}"),
                    msg: format!("must be positive, got {v}"),
                });
            }
        }
        if self.kappa0 > self.kappa {
            return Err(SimError::ConfigKey {
                key: "cavity.kappa0".into(),
                msg: "must not exceed kappa".into(),
            });
        }
        if !(self.recoil_shift_per_photon >= 0.0) {
            return Err(SimError::ConfigKey {
                key: "cavity.recoil_shift_per_photon".into(),
                msg: "must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// Recoil shift magnitude in rad/s per scattered photon.
    pub fn recoil_shift_angular(&self) -> f64 {
        TAU * self.recoil_shift_per_photon
    }
}

/// Atom-number bookkeeping for the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub n_effective: f64,
    pub n_loaded: f64,
    pub coupling_fraction: f64,
    pub initial_contrast: f64,
}

pub const DEFAULT_COUPLING_FRACTION: f64 = 0.663;

impl Default for EnsembleParams {
    fn default() -> Self {
        Self::with_effective(4.8e5)
    }
}

impl EnsembleParams {
    /// Default ensemble rescaled to `n_effective` atoms.
    pub fn with_effective(n_effective: f64) -> Self {
        Self {
            n_effective,
            n_loaded: n_effective / DEFAULT_COUPLING_FRACTION,
            coupling_fraction: DEFAULT_COUPLING_FRACTION,
            initial_contrast: 0.97,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(SimError::ConfigKey {
                key: format!("ensemble.{key}"),
                msg,
            })
        };
        if !(self.n_effective.is_finite() && self.n_effective > 0.0) {
            return bad("n_effective", format!("must be positive, got {}", self.n_effective));
        }
        if !(self.coupling_fraction > 0.0 && self.coupling_fraction <= 1.0) {
            return bad("coupling_fraction", "must lie in (0, 1]".into());
        }
        if !(self.initial_contrast > 0.0 && self.initial_contrast <= 1.0) {
            return bad("initial_contrast", "must lie in (0, 1]".into());
        }
        let expect = self.coupling_fraction * self.n_loaded;
        if ((expect - self.n_effective) / self.n_effective).abs() > 1e-3 {
            return bad(
                "n_loaded",
                format!(
                    "coupling_fraction * n_loaded = {expect} disagrees with n_effective = {}",
                    self.n_effective
                ),
            );
        }
        Ok(())
    }
}

/// Ground states that shift the dressed cavity resonance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomState {
    Up,
    Down,
    One,
}

impl std::str::FromStr for AtomState {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(AtomState::Up),
            "down" => Ok(AtomState::Down),
            "one" => Ok(AtomState::One),
            other => Err(SimError::UnknownState(other.to_string())),
        }
    }
}

fn check_count(n: f64, what: &str) -> Result<()> {
    if n.is_nan() || n < 0.0 {
        return domain(format!("{what} must be non-negative, got {n}"));
    }
    Ok(())
}

/// Shift of the dressed cavity resonance from the bare cavity,
/// `(sqrt(δ² + 4g²·n_up) − δ)/2`.
pub fn dressed_shift(n_up: f64, cav: &CavityParams) -> Result<f64> {
    check_count(n_up, "n_up")?;
    Ok(dressed_shift_unchecked(n_up, cav))
}

// Written as 2g²n/(√(δ²+4g²n)+δ) to stay accurate at small n.
pub(crate) fn dressed_shift_unchecked(n_up: f64, cav: &CavityParams) -> f64 {
    let g2 = cav.g * cav.g;
    let root = (cav.delta * cav.delta + 4.0 * g2 * n_up).sqrt();
    2.0 * g2 * n_up / (root + cav.delta)
}

/// Inverse of [`dressed_shift`]: the ↑ population producing `shift`.
pub fn n_up_from_shift(shift: f64, cav: &CavityParams) -> f64 {
    (shift * shift + shift * cav.delta) / (cav.g * cav.g)
}

/// Per-atom dressed shifts for the three ground states, rad/s per atom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub up: f64,
    pub down: f64,
    pub one: f64,
}

/// Dressed-frequency change per atom added to `state` at ↑ population `n_up`.
///
/// ↑ uses the exact derivative of the dressed shift; ↓ is the far-detuned
/// dispersive shift at δ + ω_hf; |1⟩ is `one_ratio` times the ↑ value.
pub fn alpha_per_atom(state: AtomState, n_up: f64, cav: &CavityParams, one_ratio: f64) -> Result<f64> {
    check_count(n_up, "n_up")?;
    let up = alpha_up_unchecked(n_up, cav);
    Ok(match state {
        AtomState::Up => up,
        AtomState::Down => cav.g * cav.g / (cav.delta + cav.omega_hf),
        AtomState::One => one_ratio * up,
    })
}

pub(crate) fn alpha_up_unchecked(n_up: f64, cav: &CavityParams) -> f64 {
    let g2 = cav.g * cav.g;
    g2 / (cav.delta * cav.delta + 4.0 * g2 * n_up.max(0.0)).sqrt()
}

pub fn alphas(n_up: f64, cav: &CavityParams, one_ratio: f64) -> Result<Alphas> {
    Ok(Alphas {
        up: alpha_per_atom(AtomState::Up, n_up, cav, one_ratio)?,
        down: alpha_per_atom(AtomState::Down, n_up, cav, one_ratio)?,
        one: alpha_per_atom(AtomState::One, n_up, cav, one_ratio)?,
    })
}

/// Standard deviation of the dressed frequency caused by coherent-spin-state
/// projection noise `√n/2` on an equatorial ensemble of `n` atoms.
pub fn qpn_frequency_fluctuation(n: f64, cav: &CavityParams) -> Result<f64> {
    if !(n > 0.0) {
        return domain(format!("atom number must be positive, got {n}"));
    }
    Ok(alpha_up_unchecked(n / 2.0, cav) * n.sqrt() / 2.0)
}

/// Free-space scattered photons per transmitted photon, M_s/M_t.
pub fn scattered_ratio(n_up: f64, cav: &CavityParams) -> Result<f64> {
    check_count(n_up, "n_up")?;
    Ok(scattered_ratio_unchecked(n_up, cav))
}

pub(crate) fn scattered_ratio_unchecked(n_up: f64, cav: &CavityParams) -> f64 {
    let n_up = n_up.max(0.0);
    let g2 = cav.g * cav.g;
    let atom_detuning = cav.delta + dressed_shift_unchecked(n_up, cav);
    (2.0 * cav.gamma / cav.kappa0) * (4.0 * g2 * n_up) / (4.0 * atom_detuning * atom_detuning)
}

/// Atoms that are effectively (uniformly) coupled out of `n_loaded` trapped.
pub fn effective_atom_number(n_loaded: f64, ens: &EnsembleParams) -> Result<f64> {
    check_count(n_loaded, "n_loaded")?;
    Ok(ens.coupling_fraction * n_loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cav() -> CavityParams {
        CavityParams::default()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn dressed_shift_reference_points() {
        let c = cav();
        assert_eq!(dressed_shift(0.0, &c).unwrap(), 0.0);
        // (sqrt(200^2 + 4*0.447^2*2.4e5) - 200)/2 MHz
        let mhz = ((200.0f64.powi(2) + 4.0 * 0.447f64.powi(2) * 2.4e5).sqrt() - 200.0) / 2.0;
        assert!(rel(mhz, 140.8) < 0.01);
        assert!(rel(dressed_shift(2.4e5, &c).unwrap(), TAU * mhz * 1e6) < 1e-9);
        // single atom: g^2/delta = 2π·999 Hz
        let one = dressed_shift(1.0, &c).unwrap();
        assert!(rel(one, TAU * 0.447e6f64.powi(2) / 200e6) < 1e-5);
        assert!(rel(one / TAU, 999.0) < 1e-3);
    }

    #[test]
    fn negative_atoms_rejected() {
        assert!(matches!(dressed_shift(-1.0, &cav()), Err(SimError::Domain(_))));
        assert!(scattered_ratio(-3.0, &cav()).is_err());
    }

    #[test]
    fn alpha_values() {
        let c = cav();
        let up = alpha_per_atom(AtomState::Up, 2.4e5, &c, 2.0 / 3.0).unwrap();
        assert!(rel(up / TAU, 415.0) < 0.02);
        let down = alpha_per_atom(AtomState::Down, 1e5, &c, 2.0 / 3.0).unwrap();
        assert!(rel(down / TAU, 28.0) < 0.05);
        let origin = alpha_per_atom(AtomState::Up, 0.0, &c, 2.0 / 3.0).unwrap();
        assert!(rel(origin, c.g * c.g / c.delta) < 1e-12);
        let one = alpha_per_atom(AtomState::One, 2.4e5, &c, 2.0 / 3.0).unwrap();
        assert!(rel(one, 2.0 / 3.0 * up) < 1e-12);
    }

    #[test]
    fn unknown_state_label() {
        assert!(matches!("sideways".parse::<AtomState>(), Err(SimError::UnknownState(_))));
        assert_eq!("one".parse::<AtomState>().unwrap(), AtomState::One);
    }

    #[test]
    fn qpn_anchor() {
        let c = cav();
        let v = qpn_frequency_fluctuation(4.8e5, &c).unwrap();
        assert!(rel(v, TAU * 144e3) < 0.06);
        let four = qpn_frequency_fluctuation(4.0, &c).unwrap();
        assert!(rel(four, alpha_up_unchecked(2.0, &c)) < 1e-12);
        let n = 1.2e5;
        let law = alpha_up_unchecked(n / 2.0, &c) * n.sqrt() / 2.0;
        assert_eq!(qpn_frequency_fluctuation(n, &c).unwrap(), law);
        assert!(qpn_frequency_fluctuation(0.0, &c).is_err());
    }

    #[test]
    fn scattering_anchor() {
        let c = cav();
        assert!((scattered_ratio(2.4e5, &c).unwrap() - 1.0).abs() < 0.1);
        assert_eq!(scattered_ratio(0.0, &c).unwrap(), 0.0);
        let s5 = scattered_ratio(1.05e5, &c).unwrap();
        assert!(s5 > 0.6 && s5 < 0.7, "{s5}");
    }

    #[test]
    fn effective_number() {
        let e = EnsembleParams::default();
        assert!(rel(effective_atom_number(7.2e5, &e).unwrap(), 4.77e5) < 1e-3);
        assert_eq!(effective_atom_number(0.0, &e).unwrap(), 0.0);
        assert!(rel(effective_atom_number(1e6, &e).unwrap(), 6.63e5) < 1e-12);
    }

    #[test]
    fn derivative_matches_alpha() {
        let c = cav();
        let mut n: f64 = 10.0;
        while n <= 1e7 {
            let fd = (dressed_shift(n + 1.0, &c).unwrap() - dressed_shift(n - 1.0, &c).unwrap()) / 2.0;
            let a = alpha_up_unchecked(n, &c);
            assert!(rel(fd, a) < 1e-6, "n={n} fd={fd} a={a}");
            n *= 3.7;
        }
    }

    #[test]
    fn linear_dispersive_limit() {
        let c = cav();
        let lin = c.g * c.g / c.delta;
        assert!(rel(dressed_shift(1e-3, &c).unwrap() / 1e-3, lin) < 1e-8);
    }

    #[test]
    fn scattering_bounded_and_monotone() {
        let c = cav();
        let bound = 2.0 * c.gamma / c.kappa0;
        let mut prev = 0.0;
        for k in 0..60 {
            let n = 10f64.powf(k as f64 * 0.15);
            let r = scattered_ratio(n, &c).unwrap();
            assert!(r > prev && r < bound);
            prev = r;
        }
    }

    #[test]
    fn inverse_shift_roundtrip() {
        let c = cav();
        for n in [0.0, 3.0, 1e3, 2.4e5, 9e6] {
            let s = dressed_shift(n, &c).unwrap();
            assert!((n_up_from_shift(s, &c) - n).abs() <= 1e-6 * n.max(1.0));
        }
    }

    #[test]
    fn ensemble_invariants() {
        EnsembleParams::default().validate().unwrap();
        let mut e = EnsembleParams::default();
        e.n_effective = -1.0;
        assert!(e.validate().is_err());
        let mut e = EnsembleParams::default();
        e.initial_contrast = 1.2;
        assert!(e.validate().is_err());
        let mut c = CavityParams::default();
        c.kappa0 = c.kappa * 2.0;
        assert!(c.validate().is_err());
    }
}
