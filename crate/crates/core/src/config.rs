//! Run configuration files. Frequencies are given in Hz and converted to
//! angular units when the parameter set is built.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{NoiseCoeffs, OptoParams, REFERENCE_MT};
use crate::error::{Result, SimError};
use crate::experiments::{calibrate_excess_decay, PHASE_ATOMS, RAMAN_ATOMS};
use crate::params::{Channels, ModelKnobs, SimParams};
use crate::physics::{CavityParams, EnsembleParams};
use crate::spin::{ProbeConfig, TransitionProbs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CavitySection {
    pub g_hz: f64,
    pub kappa_hz: f64,
    pub kappa0_hz: f64,
    pub delta_hz: f64,
    pub gamma_hz: f64,
    pub omega_ax_hz: f64,
    pub omega_hf_hz: f64,
    pub recoil_shift_per_photon_hz: f64,
}

impl Default for CavitySection {
    fn default() -> Self {
        let c = CavityParams::default();
        Self {
            g_hz: c.g / TAU,
            kappa_hz: c.kappa / TAU,
            kappa0_hz: c.kappa0 / TAU,
            delta_hz: c.delta / TAU,
            gamma_hz: c.gamma / TAU,
            omega_ax_hz: c.omega_ax / TAU,
            omega_hf_hz: c.omega_hf / TAU,
            recoil_shift_per_photon_hz: c.recoil_shift_per_photon,
        }
    }
}

impl CavitySection {
    fn params(&self) -> CavityParams {
        CavityParams {
            g: TAU * self.g_hz,
            kappa: TAU * self.kappa_hz,
            kappa0: TAU * self.kappa0_hz,
            delta: TAU * self.delta_hz,
            gamma: TAU * self.gamma_hz,
            omega_ax: TAU * self.omega_ax_hz,
            omega_hf: TAU * self.omega_hf_hz,
            recoil_shift_per_photon: self.recoil_shift_per_photon_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_effective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_loaded: Option<f64>,
    pub coupling_fraction: f64,
    pub initial_contrast: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        let e = EnsembleParams::default();
        Self {
            n_effective: None,
            n_loaded: None,
            coupling_fraction: e.coupling_fraction,
            initial_contrast: e.initial_contrast,
        }
    }
}

impl EnsembleSection {
    fn params(&self) -> Result<EnsembleParams> {
        let frac = self.coupling_fraction;
        let (n_effective, n_loaded) = match (self.n_effective, self.n_loaded) {
            (None, None) => {
                let d = EnsembleParams::default();
                (d.n_effective, d.n_effective / frac)
            }
            (Some(e), None) => (e, e / frac),
            (None, Some(l)) => (l * frac, l),
            (Some(e), Some(l)) => {
                if !((l * frac - e).abs() <= 1e-9 * e.abs()) {
                    return Err(SimError::ConfigKey {
                        key: "ensemble.n_loaded".into(),
                        msg: format!("inconsistent with n_effective = {e} at coupling fraction {frac}"),
                    });
                }
                (e, l)
            }
        };
        let p = EnsembleParams {
            n_effective,
            n_loaded,
            coupling_fraction: frac,
            initial_contrast: self.initial_contrast,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub m_t: f64,
    pub window_s: f64,
    pub pulse_s: f64,
    /// Prealignment detuning spread in units of κ/2.
    pub detuning_spread: f64,
    pub ms_classical_frac: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            m_t: p.m_t,
            window_s: p.window,
            pulse_s: p.pulse,
            detuning_spread: 0.045,
            ms_classical_frac: p.ms_classical_frac,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitionSection {
    pub p_ud: f64,
    pub p_du: f64,
    pub p_u1: f64,
    pub p_d1: f64,
}

impl Default for TransitionSection {
    fn default() -> Self {
        let t = TransitionProbs::default();
        Self {
            p_ud: t.p_ud,
            p_du: t.p_du,
            p_u1: t.p_u1,
            p_d1: t.p_d1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub r_psn: f64,
    pub r_tf: f64,
    pub r_q: f64,
    pub r_c: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseCoeffs::default();
        Self {
            r_psn: n.r_psn,
            r_tf: n.r_tf,
            r_q: n.r_q,
            r_c: n.r_c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptoSection {
    pub tau0_s: f64,
    pub damping_asymmetry: f64,
    pub r_inv_at_reference: f64,
}

impl Default for OptoSection {
    fn default() -> Self {
        let o = OptoParams::default();
        Self {
            tau0_s: o.tau0,
            damping_asymmetry: o.damping_asymmetry,
            r_inv_at_reference: o.r_inv_at_reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub one_coupling_ratio: f64,
    pub excess_contrast_decay: f64,
    /// When set, `excess_contrast_decay` is replaced by the value that makes
    /// the analytic W⁻¹ at the reference probe strength equal this target.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excess_calibration_winv: Option<f64>,
    pub light_shift_per_photon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lineshape_penalty: Option<f64>,
    pub psn_reference_atoms: f64,
    pub rotation_amplitude_noise: f64,
    pub rotation_phase_noise: f64,
    pub repump_one_to_up: bool,
    pub laser_linewidth_r_inv: f64,
    pub opto: OptoSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelKnobs::default();
        Self {
            one_coupling_ratio: m.one_coupling_ratio,
            excess_contrast_decay: m.excess_contrast_decay,
            excess_calibration_winv: None,
            light_shift_per_photon: m.light_shift_per_photon,
            lineshape_penalty: m.lineshape_penalty,
            psn_reference_atoms: m.psn_reference_atoms,
            rotation_amplitude_noise: m.rotation_amplitude_noise,
            rotation_phase_noise: m.rotation_phase_noise,
            repump_one_to_up: m.repump_one_to_up,
            laser_linewidth_r_inv: m.laser_linewidth_r_inv,
            opto: OptoSection::default(),
        }
    }
}

/// Settings of the experiment drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub trials: usize,
    pub mt_min: f64,
    pub mt_max: f64,
    pub mt_points: usize,
    pub fringe_mt: f64,
    pub fringe_points: usize,
    pub psi_mrad: f64,
    pub phase_atoms: f64,
    pub phase_trials: usize,
    pub target_winv: f64,
    pub scaling_atoms: Vec<f64>,
    pub scaling_per_decade: usize,
    pub raman_atoms: f64,
    pub raman_mt_grid: Vec<f64>,
    pub raman_trials: usize,
    pub budget_mt: f64,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            trials: 2000,
            mt_min: 1e3,
            mt_max: 1e5,
            mt_points: 15,
            fringe_mt: REFERENCE_MT,
            fringe_points: 12,
            psi_mrad: 2.3,
            phase_atoms: PHASE_ATOMS,
            phase_trials: 10_000,
            target_winv: 7.5,
            scaling_atoms: vec![6e4, 1.2e5, 2.4e5, 4.8e5],
            scaling_per_decade: 20,
            raman_atoms: RAMAN_ATOMS,
            raman_mt_grid: vec![0.0, 2e4, 4e4, 6e4, 8e4, 1e5],
            raman_trials: 1000,
            budget_mt: REFERENCE_MT,
            bootstrap_resamples: 1000,
            confidence: 0.95,
        }
    }
}

impl ExperimentSection {
    fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(SimError::ConfigKey {
                key: format!("experiment.{key}"),
                msg: msg.into(),
            })
        };
        if self.trials < 2 {
            return bad("trials", "must be at least 2");
        }
        if !(self.mt_min > 0.0 && self.mt_max >= self.mt_min) {
            return bad("mt_min", "need 0 < mt_min <= mt_max");
        }
        if self.mt_points == 0 {
            return bad("mt_points", "must be positive");
        }
        if !(self.fringe_mt >= 0.0) {
            return bad("fringe_mt", "must be non-negative");
        }
        if self.fringe_points < 6 {
            return bad("fringe_points", "must be at least 6");
        }
        if !(self.phase_atoms > 0.0) {
            return bad("phase_atoms", "must be positive");
        }
        if !(self.target_winv > 0.0) {
            return bad("target_winv", "must be positive");
        }
        if self.scaling_atoms.iter().any(|n| !(*n > 0.0)) {
            return bad("scaling_atoms", "atom numbers must be positive");
        }
        if self.scaling_per_decade == 0 {
            return bad("scaling_per_decade", "must be positive");
        }
        if !(self.raman_atoms > 0.0) {
            return bad("raman_atoms", "must be positive");
        }
        if self.raman_mt_grid.iter().any(|m| !(*m >= 0.0)) {
            return bad("raman_mt_grid", "photon numbers must be non-negative");
        }
        if !(self.budget_mt > 0.0) {
            return bad("budget_mt", "must be positive");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence", "must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub cavity: CavitySection,
    pub ensemble: EnsembleSection,
    pub probe: ProbeSection,
    pub transition: TransitionSection,
    pub noise: NoiseSection,
    pub model: ModelSection,
    pub channels: Channels,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            output_dir: PathBuf::from("out"),
            cavity: CavitySection::default(),
            ensemble: EnsembleSection::default(),
            probe: ProbeSection::default(),
            transition: TransitionSection::default(),
            noise: NoiseSection::default(),
            model: ModelSection::default(),
            channels: Channels::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.params()?;
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    /// Build the simulator parameter set.
    pub fn params(&self) -> Result<SimParams> {
        let cavity = self.cavity.params();
        cavity.validate()?;
        let ensemble = self.ensemble.params()?;
        let pr = &self.probe;
        let probe = ProbeConfig {
            m_t: pr.m_t,
            window: pr.window_s,
            pulse: pr.pulse_s,
            detuning_spread: pr.detuning_spread * cavity.kappa / 2.0,
            ms_classical_frac: pr.ms_classical_frac,
        };
        let t = &self.transition;
        let m = &self.model;
        let mut p = SimParams {
            cavity,
            ensemble,
            probe,
            transition: TransitionProbs {
                p_ud: t.p_ud,
                p_du: t.p_du,
                p_u1: t.p_u1,
                p_d1: t.p_d1,
            },
            noise: NoiseCoeffs {
                r_psn: self.noise.r_psn,
                r_tf: self.noise.r_tf,
                r_q: self.noise.r_q,
                r_c: self.noise.r_c,
            },
            model: ModelKnobs {
                one_coupling_ratio: m.one_coupling_ratio,
                excess_contrast_decay: m.excess_contrast_decay,
                light_shift_per_photon: m.light_shift_per_photon,
                lineshape_penalty: m.lineshape_penalty,
                psn_reference_atoms: m.psn_reference_atoms,
                rotation_amplitude_noise: m.rotation_amplitude_noise,
                rotation_phase_noise: m.rotation_phase_noise,
                repump_one_to_up: m.repump_one_to_up,
                laser_linewidth_r_inv: m.laser_linewidth_r_inv,
                opto: OptoParams {
                    tau0: m.opto.tau0_s,
                    damping_asymmetry: m.opto.damping_asymmetry,
                    r_inv_at_reference: m.opto.r_inv_at_reference,
                },
            },
            channels: self.channels,
        };
        p.validate()?;
        if let Some(target) = m.excess_calibration_winv {
            p.model.excess_contrast_decay = calibrate_excess_decay(&p, REFERENCE_MT, target).map_err(|e| SimError::ConfigKey {
                key: "model.excess_calibration_winv".into(),
                msg: e.to_string(),
            })?;
        }
        Ok(p)
    }

    /// Full effective configuration as TOML; loading it gives the same run.
    pub fn echo(&self) -> Result<String> {
        let mut full = self.clone();
        let e = self.ensemble.params()?;
        full.ensemble.n_effective = Some(e.n_effective);
        full.ensemble.n_loaded = Some(e.n_loaded);
        toml::to_string(&full).map_err(|e| SimError::Config(format!("cannot serialize config: {e}")))
    }

    /// Hex SHA-256 of the echoed configuration.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.echo()?.as_bytes())))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_toml(&text)
}
