//! Parameter bundle shared by the simulator, the budget and the experiments.

use serde::{Deserialize, Serialize};

use crate::budget::{NoiseCoeffs, OptoParams};
use crate::error::{Result, SimError};
use crate::physics::{CavityParams, EnsembleParams};
use crate::spin::{ProbeConfig, TransitionProbs};

/// Noise channels of the probe model that can be switched off one by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Channels {
    pub read_noise: bool,
    pub technical_floor: bool,
    pub raman: bool,
    pub recoil: bool,
    pub optomechanics: bool,
    pub classical_residual: bool,
    pub quantum_residual: bool,
    pub power_fluctuation: bool,
}

impl Default for Channels {
    fn default() -> Self {
        Self::ALL
    }
}

impl Channels {
    pub const ALL: Channels = Channels {
        read_noise: true,
        technical_floor: true,
        raman: true,
        recoil: true,
        optomechanics: true,
        classical_residual: true,
        quantum_residual: true,
        power_fluctuation: true,
    };

    /// Photon shot noise only: the back-action-evading ideal.
    pub const IDEAL: Channels = Channels {
        read_noise: true,
        technical_floor: false,
        raman: false,
        recoil: false,
        optomechanics: false,
        classical_residual: false,
        quantum_residual: false,
        power_fluctuation: false,
    };
}

/// Model knobs that the measured data leave open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelKnobs {
    /// Dressed shift of a |1⟩ atom relative to a ↑ atom.
    pub one_coupling_ratio: f64,
    /// Coefficient `x` of the extra contrast factor `exp(−x·(M_s/N)²)`.
    pub excess_contrast_decay: f64,
    /// Inhomogeneous light-shift phase spread per transmitted photon, rad.
    pub light_shift_per_photon: f64,
    /// Extra per-window R from probe detuning, per (δ_p/(κ/2))². `None` derives
    /// it from the technical floor and the prealign spread.
    pub lineshape_penalty: Option<f64>,
    /// Atom number at which `r_psn` is referenced; the read imprecision in
    /// atoms is held fixed for other ensemble sizes.
    pub psn_reference_atoms: f64,
    /// Fractional rms microwave pulse-area noise.
    pub rotation_amplitude_noise: f64,
    /// Rms microwave phase noise, rad.
    pub rotation_phase_noise: f64,
    /// Atoms reaching |1⟩ are immediately returned to ↑.
    pub repump_one_to_up: bool,
    /// Pass-through R⁻¹ of the laser-linewidth part of the floor.
    pub laser_linewidth_r_inv: f64,
    pub opto: OptoParams,
}

impl Default for ModelKnobs {
    fn default() -> Self {
        Self {
            one_coupling_ratio: 2.0 / 3.0,
            excess_contrast_decay: 0.0,
            light_shift_per_photon: 0.0,
            lineshape_penalty: None,
            psn_reference_atoms: 4.8e5,
            rotation_amplitude_noise: 0.0,
            rotation_phase_noise: 0.0,
            repump_one_to_up: false,
            laser_linewidth_r_inv: 520.0,
            opto: OptoParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimParams {
    pub cavity: CavityParams,
    pub ensemble: EnsembleParams,
    pub probe: ProbeConfig,
    pub transition: TransitionProbs,
    pub noise: NoiseCoeffs,
    pub model: ModelKnobs,
    pub channels: Channels,
}

impl SimParams {
    /// Defaults with a different effective atom number.
    pub fn with_atoms(mut self, n_effective: f64) -> Self {
        let frac = self.ensemble.coupling_fraction;
        self.ensemble.n_effective = n_effective;
        self.ensemble.n_loaded = n_effective / frac;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.cavity.validate()?;
        self.ensemble.validate()?;
        self.probe.validate()?;
        self.transition.validate()?;
        self.noise.validate().map_err(|e| SimError::ConfigKey {
            key: "noise".into(),
            msg: e.to_string(),
        })?;
        let m = &self.model;
        let nonneg = [
            ("model.one_coupling_ratio", m.one_coupling_ratio),
            ("model.excess_contrast_decay", m.excess_contrast_decay),
            ("model.light_shift_per_photon", m.light_shift_per_photon),
            ("model.rotation_amplitude_noise", m.rotation_amplitude_noise),
            ("model.rotation_phase_noise", m.rotation_phase_noise),
            ("model.laser_linewidth_r_inv", m.laser_linewidth_r_inv),
            ("model.lineshape_penalty", m.lineshape_penalty.unwrap_or(0.0)),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0) || v.is_nan() {
                return Err(SimError::ConfigKey {
                    key: key.into(),
                    msg: format!("must be non-negative, got {v}"),
                });
            }
        }
        if !(m.psn_reference_atoms > 0.0) {
            return Err(SimError::ConfigKey {
                key: "model.psn_reference_atoms".into(),
                msg: "must be positive".into(),
            });
        }
        if !(m.opto.tau0 > 0.0) {
            return Err(SimError::ConfigKey {
                key: "model.opto.tau0".into(),
                msg: "must be positive".into(),
            });
        }
        if !(m.opto.r_inv_at_reference > 0.0) {
            return Err(SimError::ConfigKey {
                key: "model.opto.r_inv_at_reference".into(),
                msg: "must be positive".into(),
            });
        }
        Ok(())
    }
}
