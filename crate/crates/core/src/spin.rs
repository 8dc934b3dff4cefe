//! Collective spin state in a Gaussian-moment representation and the
//! conditional probe measurement.
//!
//! The coherent Bloch vector `bloch` carries the mean polarization (length
//! 𝒞·N₂/2 before light-shift dephasing). Quantum fluctuations live in the plane
//! perpendicular to it with conditional mean `offset_mean` and covariance
//! `cov`. Once a probe has looked at the state, one realization `truth` of the
//! fluctuation is pinned and carried through later operations. Raman
//! population moves are tracked in `incoherent`, which rotates rigidly with
//! microwave pulses.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::budget::{
    pop_noise_classical, pop_noise_quantum, recoil_noise, ringing_window_mean,
};
use crate::error::{domain, Result, SimError};
use crate::params::SimParams;
use crate::physics::{
    alpha_up_unchecked, alphas, dressed_shift_unchecked, n_up_from_shift, scattered_ratio_unchecked,
    AtomState, EnsembleParams,
};

/// Raman transition probabilities per free-space scattered photon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionProbs {
    pub p_ud: f64,
    pub p_du: f64,
    pub p_u1: f64,
    pub p_d1: f64,
}

impl Default for TransitionProbs {
    fn default() -> Self {
        Self {
            p_ud: 8e-4,
            p_du: 7.3e-4,
            p_u1: 3.9e-3,
            p_d1: 3.6e-4,
        }
    }
}

impl TransitionProbs {
    pub const ZERO: TransitionProbs = TransitionProbs {
        p_ud: 0.0,
        p_du: 0.0,
        p_u1: 0.0,
        p_d1: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("p_ud", self.p_ud),
            ("p_du", self.p_du),
            ("p_u1", self.p_u1),
            ("p_d1", self.p_d1),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(SimError::ConfigKey {
                    key: format!("transition.{k}"),
                    msg: format!("must lie in [0, 1), got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Probe settings. `detuning_spread` is in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub m_t: f64,
    /// Averaging window, s.
    pub window: f64,
    /// Full probe pulse length, s. The window is centred in the pulse.
    pub pulse: f64,
    pub detuning_spread: f64,
    pub ms_classical_frac: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let kappa = crate::physics::CavityParams::default().kappa;
        Self {
            m_t: crate::budget::REFERENCE_MT,
            window: 40e-6,
            pulse: 43e-6,
            detuning_spread: 0.045 * kappa / 2.0,
            ms_classical_frac: 0.04,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(SimError::ConfigKey {
                key: format!("probe.{key}"),
                msg: msg.into(),
            })
        };
        if !(self.m_t >= 0.0) || !self.m_t.is_finite() {
            return bad("m_t", "must be non-negative");
        }
        if !(self.window > 0.0) {
            return bad("window", "must be positive");
        }
        if !(self.pulse >= self.window) {
            return bad("pulse", "must be at least the window length");
        }
        if !(self.detuning_spread >= 0.0) {
            return bad("detuning_spread", "must be non-negative");
        }
        if !(self.ms_classical_frac >= 0.0) {
            return bad("ms_classical_frac", "must be non-negative");
        }
        Ok(())
    }

    /// Start and end of the averaging window relative to probe turn-on.
    fn window_span(&self, start: f64) -> (f64, f64) {
        let lead = 0.5 * (self.pulse - self.window);
        (start + lead, start + lead + self.window)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub n_total: f64,
    pub pop_one: f64,
    pub bloch: Vector3<f64>,
    pub offset_mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub truth: Option<Vector3<f64>>,
    pub incoherent: Vector3<f64>,
    /// Polarization left over from optical pumping beyond the coherent length.
    pub frozen_z: f64,
    /// Signed light-shift phase spread, rad.
    pub dephasing: f64,
}

fn unit(v: Vector3<f64>) -> Option<Vector3<f64>> {
    let n = v.norm();
    (n > 0.0).then(|| v / n)
}

impl EnsembleState {
    /// Optically pumped state in `target` (↑ or ↓).
    pub fn pumped(n: f64, target: AtomState, initial_contrast: f64) -> Result<Self> {
        if !(n > 0.0) {
            return domain(format!("atom number must be positive, got {n}"));
        }
        let sign = match target {
            AtomState::Up => 1.0,
            AtomState::Down => -1.0,
            AtomState::One => return Err(SimError::UnknownState("pumping into |1> is not supported".into())),
        };
        let q = n / 4.0;
        Ok(Self {
            n_total: n,
            pop_one: 0.0,
            bloch: Vector3::new(0.0, 0.0, sign * initial_contrast * n / 2.0),
            offset_mean: Vector3::zeros(),
            cov: Matrix3::from_diagonal(&Vector3::new(q, q, 0.0)),
            truth: None,
            incoherent: Vector3::zeros(),
            frozen_z: sign * (1.0 - initial_contrast) * n / 2.0,
            dephasing: 0.0,
        })
    }

    fn base_up(&self) -> f64 {
        0.5 * (self.n_total - self.pop_one) + self.bloch.z + self.incoherent.z + self.frozen_z
    }

    pub fn pop_up(&self) -> f64 {
        self.base_up() + self.offset_mean.z
    }

    pub fn pop_down(&self) -> f64 {
        self.n_total - self.pop_one - self.pop_up()
    }

    pub fn jz_mean(&self) -> f64 {
        self.pop_up() - self.n_total / 2.0
    }

    /// Realized ↑ population (the conditional mean if nothing is pinned yet).
    pub fn true_pop_up(&self) -> f64 {
        self.base_up() + self.truth.unwrap_or(self.offset_mean).z
    }

    /// Coherent Bloch vector after light-shift dephasing.
    pub fn effective_bloch(&self) -> Vector3<f64> {
        let f = (-0.5 * self.dephasing * self.dephasing).exp();
        Vector3::new(self.bloch.x * f, self.bloch.y * f, self.bloch.z)
    }

    pub fn contrast(&self) -> f64 {
        (self.effective_bloch().norm() / (self.n_total / 2.0)).min(1.0)
    }

    pub fn azimuth(&self) -> f64 {
        self.bloch.y.atan2(self.bloch.x)
    }

    /// Polar and azimuthal unit vectors perpendicular to the mean spin.
    fn quadrature_axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let z = Vector3::z();
        if let Some(n) = unit(self.bloch) {
            if let Some(u) = unit(z - n * n.dot(&z)) {
                return (u, n.cross(&u));
            }
        }
        (Vector3::x(), Vector3::y())
    }

    /// Variance of the spin component along the polar direction; equals
    /// Var(J_z) on the equator.
    pub fn jz_var(&self) -> f64 {
        let (u, _) = self.quadrature_axes();
        (u.transpose() * self.cov * u)[(0, 0)]
    }

    pub fn jy_var(&self) -> f64 {
        let (_, w) = self.quadrature_axes();
        (w.transpose() * self.cov * w)[(0, 0)]
    }
}

pub fn prepare_css(n: f64, ens: &EnsembleParams) -> Result<EnsembleState> {
    let pumped = EnsembleState::pumped(n, AtomState::Down, ens.initial_contrast)?;
    Ok(rotate(&pumped, PI / 2.0, 0.0))
}

pub fn heisenberg_check(state: &EnsembleState) -> bool {
    let lhs = (state.jz_var() * state.jy_var()).sqrt();
    let rhs = state.contrast() * state.n_total / 4.0;
    lhs >= rhs * (1.0 - 1e-9)
}

fn rotation_matrix(angle: f64, phase: f64) -> Matrix3<f64> {
    let axis = nalgebra::Unit::new_normalize(Vector3::new(phase.sin(), -phase.cos(), 0.0));
    *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix()
}

pub(crate) fn is_pi_pulse(angle: f64) -> bool {
    let r = angle.rem_euclid(2.0 * PI);
    (r - PI).abs() < 1e-9
}

/// Microwave rotation by `angle` about the equatorial axis `(sin φ, −cos φ, 0)`.
/// With φ = 0 a π/2 pulse takes ↓ to +x̂.
pub fn rotate(state: &EnsembleState, angle: f64, pulse_phase: f64) -> EnsembleState {
    rotate_with_echo(state, angle, pulse_phase, is_pi_pulse(angle))
}

pub(crate) fn rotate_with_echo(state: &EnsembleState, angle: f64, pulse_phase: f64, echo: bool) -> EnsembleState {
    let mut s = state.clone();
    if angle.rem_euclid(2.0 * PI) == 0.0 {
        return s;
    }
    if echo {
        s.dephasing = -s.dephasing;
    } else if s.dephasing != 0.0 {
        s.bloch = s.effective_bloch();
        s.dephasing = 0.0;
    }
    let r = rotation_matrix(angle, pulse_phase);
    s.bloch = r * s.bloch;
    s.offset_mean = r * s.offset_mean;
    s.cov = r * s.cov * r.transpose();
    s.truth = s.truth.map(|t| r * t);
    s.incoherent = r * s.incoherent;
    s.frozen_z = 0.0;
    s
}

/// Scalar Gaussian conditioning: returns posterior `(mean, variance)`.
pub fn gaussian_update(prior_mean: f64, prior_var: f64, obs: f64, noise_var: f64) -> (f64, f64) {
    if prior_var <= 0.0 {
        return (prior_mean, 0.0);
    }
    if noise_var.is_infinite() {
        return (prior_mean, prior_var);
    }
    let gain = prior_var / (prior_var + noise_var);
    (prior_mean + gain * (obs - prior_mean), (1.0 - gain) * prior_var)
}

/// Sample one fluctuation vector from `N(mean, cov)`.
fn sample_gaussian<R: Rng + ?Sized>(mean: &Vector3<f64>, cov: &Matrix3<f64>, rng: &mut R) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let mut out = *mean;
    for i in 0..3 {
        let lam = eig.eigenvalues[i];
        if lam > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            out += eig.eigenvectors.column(i) * (lam.sqrt() * z);
        }
    }
    out
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if mean > 0.0 {
        Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    }
}

/// In-window time average of the effect of `k` events at uniform random times:
/// an event at fractional time u contributes (1 − u).
fn window_average<R: Rng + ?Sized>(k: f64, rng: &mut R) -> f64 {
    if k <= 0.0 {
        0.0
    } else if k <= 64.0 {
        (0..k as usize).map(|_| 1.0 - rng.random::<f64>()).sum()
    } else {
        let z: f64 = rng.sample(StandardNormal);
        (0.5 * k + (k / 12.0).sqrt() * z).clamp(0.0, k)
    }
}

/// Raman population moves of one window: full changes and in-window averages
/// of (↑, ↓, |1⟩).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RamanDraw {
    pub full: [f64; 3],
    pub average: [f64; 3],
}

/// Draw the four Raman channels. Channel means are `p·rate·source` with
/// separate per-atom scattering rates for ↑ and ↓ sources.
pub fn raman_window<R: Rng + ?Sized>(
    pop_up: f64,
    pop_down: f64,
    up_rate: f64,
    down_rate: f64,
    tp: &TransitionProbs,
    repump_one_to_up: bool,
    rng: &mut R,
) -> RamanDraw {
    let mut draw = RamanDraw::default();
    let mut apply = |count: f64, from: usize, to: usize, rng: &mut R| {
        if count <= 0.0 || from == to {
            return;
        }
        let avg = window_average(count, rng);
        draw.full[from] -= count;
        draw.full[to] += count;
        draw.average[from] -= avg;
        draw.average[to] += avg;
    };
    let one = if repump_one_to_up { 0 } else { 2 };
    let up = pop_up.max(0.0);
    let down = pop_down.max(0.0);
    let k_ud = poisson(tp.p_ud * up_rate * up, rng);
    let k_u1 = poisson(tp.p_u1 * up_rate * up, rng);
    let k_du = poisson(tp.p_du * down_rate * down, rng);
    let k_d1 = poisson(tp.p_d1 * down_rate * down, rng);
    let (k_ud, k_u1) = clamp_pair(k_ud, k_u1, up);
    let (k_du, k_d1) = clamp_pair(k_du, k_d1, down);
    apply(k_ud, 0, 1, rng);
    apply(k_u1, 0, one, rng);
    apply(k_du, 1, 0, rng);
    apply(k_d1, 1, one, rng);
    draw
}

fn clamp_pair(a: f64, b: f64, avail: f64) -> (f64, f64) {
    let tot = a + b;
    if tot <= avail || tot == 0.0 {
        (a, b)
    } else {
        (a * avail / tot, b * avail / tot)
    }
}

fn apply_population_change(state: &mut EnsembleState, delta: [f64; 3]) {
    let [d_up, _d_down, d_one] = delta;
    state.pop_one += d_one;
    // N↑ = (N − N₁)/2 + z, so the z bookkeeping absorbs half the |1⟩ change.
    state.incoherent.z += d_up + 0.5 * d_one;
}

/// Single-window Raman diffusion for `m_s` photons scattered at the
/// equatorial reference: both sources scatter `m_s/(N/2)` photons per atom.
pub fn apply_raman_diffusion<R: Rng + ?Sized>(
    state: &EnsembleState,
    m_s: f64,
    tp: &TransitionProbs,
    rng: &mut R,
) -> Result<EnsembleState> {
    if !(m_s >= 0.0) {
        return domain(format!("m_s must be non-negative, got {m_s}"));
    }
    let mut s = state.clone();
    let rate = m_s / (state.n_total / 2.0);
    let draw = raman_window(s.pop_up(), s.pop_down(), rate, rate, tp, false, rng);
    apply_population_change(&mut s, draw.full);
    Ok(s)
}

/// Constants of the probe model that depend only on the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub params: SimParams,
    /// Per-window technical variance coefficient, in units of (N/4)·(δ_p/(κ/2))².
    pub lineshape_penalty: f64,
    /// Ringing amplitude in atoms per transmitted photon per √(N/4).
    pub opto_amplitude: f64,
}

/// Probe timing windows used for the ringing calibration: one at turn-on
/// and one immediately after.
fn ringing_pair(params: &SimParams, delta_p: f64) -> (f64, f64) {
    let pc = &params.probe;
    let tau = params.model.opto.decay_time(delta_p, &params.cavity);
    let w = params.cavity.omega_ax;
    let (a0, a1) = pc.window_span(0.0);
    let (b0, b1) = pc.window_span(pc.pulse);
    (ringing_window_mean(a0, a1, tau, w), ringing_window_mean(b0, b1, tau, w))
}

impl ProbeModel {
    pub fn new(params: &SimParams) -> Result<Self> {
        params.validate()?;
        let spread = params.probe.detuning_spread;
        let spread_rel = spread / (params.cavity.kappa / 2.0);
        let lineshape_penalty = match params.model.lineshape_penalty {
            Some(v) => v,
            None if spread_rel > 0.0 => params.noise.r_tf / (2.0 * spread_rel * spread_rel),
            None => 0.0,
        };
        let opto_amplitude = if spread > 0.0 {
            // Variance over δ_p ~ N(0, spread²) of the differenced window means.
            let npts = 801;
            let lim = 8.0;
            let h = 2.0 * lim / (npts - 1) as f64;
            let (mut w_sum, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for i in 0..npts {
                let x = -lim + h * i as f64;
                let simpson = if i == 0 || i == npts - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let w = simpson * (-0.5 * x * x).exp();
                let (p, f) = ringing_pair(params, x * spread);
                let d = f - p;
                w_sum += w;
                m1 += w * d;
                m2 += w * d * d;
            }
            let var = m2 / w_sum - (m1 / w_sum).powi(2);
            if var > 0.0 {
                (params.model.opto.coefficient() / var).sqrt()
            } else {
                0.0
            }
        } else {
            0.0
        };
        Ok(Self {
            params: *params,
            lineshape_penalty,
            opto_amplitude,
        })
    }

    /// Read-noise variance of one window in atoms².
    pub fn read_variance(&self, m_t: f64) -> f64 {
        let p = &self.params;
        if !p.channels.read_noise {
            return 0.0;
        }
        p.model.psn_reference_atoms / 4.0 * p.noise.r_psn / (2.0 * m_t)
    }

    /// Residual classical and quantum per-window variances in atoms², the
    /// part of the fitted `r_c`, `r_q` not produced by modeled channels.
    pub fn residual_variances(&self, m_t: f64, n: f64) -> (f64, f64) {
        let p = &self.params;
        let ch = &p.channels;
        let m_s = m_t * scattered_ratio_unchecked(n / 2.0, &p.cavity);
        let a = alphas(n / 2.0, &p.cavity, p.model.one_coupling_ratio).ok();
        let frac = if ch.power_fluctuation { p.probe.ms_classical_frac } else { 0.0 };
        let (ext_q, ext_c) = if ch.recoil {
            recoil_noise(m_s, frac, n, p.cavity.recoil_shift_angular(), alpha_up_unchecked(n / 2.0, &p.cavity))
                .unwrap_or((0.0, 0.0))
        } else {
            (0.0, 0.0)
        };
        let (pop_q, pop_c) = match (ch.raman, a) {
            (true, Some(a)) => (
                pop_noise_quantum(m_s, n, &p.transition, &a).unwrap_or(0.0),
                pop_noise_classical(m_s, frac, n, &p.transition, &a).unwrap_or(0.0),
            ),
            _ => (0.0, 0.0),
        };
        let opto = if ch.optomechanics && self.opto_amplitude > 0.0 {
            p.model.opto.coefficient() * m_t * m_t
        } else {
            0.0
        };
        let q = n / 4.0;
        let classical = if ch.classical_residual {
            (p.noise.r_c * m_t * m_t - opto - ext_c - pop_c).max(0.0) * q / 2.0
        } else {
            0.0
        };
        let quantum = if ch.quantum_residual {
            (p.noise.r_q * m_t - ext_q - pop_q).max(0.0) * q / 2.0
        } else {
            0.0
        };
        (classical, quantum)
    }
}

/// Per-trial probe state: things that persist between probe windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeContext {
    /// Residual probe detuning set by the last prealignment, rad/s.
    pub detuning: f64,
    /// Multiplicative probe-power factor of this trial.
    pub power_factor: f64,
    /// Free-space photons scattered so far in the trial.
    pub scattered: f64,
    /// Time since the probe was last switched on, s; `None` when off.
    pub clock: Option<f64>,
}

impl ProbeContext {
    pub fn new<R: Rng + ?Sized>(params: &SimParams, rng: &mut R) -> Self {
        let power_factor = if params.channels.power_fluctuation {
            let z: f64 = rng.sample(StandardNormal);
            (1.0 + params.probe.ms_classical_frac * z).max(0.0)
        } else {
            1.0
        };
        Self {
            detuning: 0.0,
            power_factor,
            scattered: 0.0,
            clock: None,
        }
    }

    pub fn prealign<R: Rng + ?Sized>(&mut self, params: &SimParams, rng: &mut R) {
        let z: f64 = rng.sample(StandardNormal);
        self.detuning = params.probe.detuning_spread * z;
    }

    /// The probe was switched off (any non-probe step).
    pub fn probe_off(&mut self) {
        self.clock = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementOutcome {
    /// Estimated ↑ population, atoms.
    pub n_up: f64,
    /// Measured dressed-cavity shift, Hz.
    pub frequency_hz: f64,
    /// Window-averaged true ↑ population minus N/2, atoms.
    pub true_jz: f64,
}

/// Invert the dispersive model for N↑, assuming the atoms not in ↑ are in ↓
/// (`n_one` known |1⟩ atoms aside).
fn estimate_n_up(omega: f64, n2: f64, n_one: f64, params: &SimParams) -> f64 {
    let cav = &params.cavity;
    let c1 = params.model.one_coupling_ratio;
    let a_down = cav.g * cav.g / (cav.delta + cav.omega_hf);
    let mut x = n_up_from_shift(omega, cav).clamp(0.0, n2.max(1.0));
    for _ in 0..50 {
        let eff = x + c1 * n_one;
        let f = dressed_shift_unchecked(eff, cav) + a_down * (n2 - x) - omega;
        let slope = alpha_up_unchecked(eff, cav) - a_down;
        let step = f / slope;
        x -= step;
        if step.abs() < 1e-9 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

/// One probe window of `m_t` transmitted photons.
pub fn probe_measure<R: Rng + ?Sized>(
    state: &EnsembleState,
    m_t: f64,
    model: &ProbeModel,
    ctx: &mut ProbeContext,
    rng: &mut R,
) -> Result<(MeasurementOutcome, EnsembleState)> {
    if !(m_t > 0.0) || !m_t.is_finite() {
        return Err(SimError::Config(format!(
            "probe needs a positive photon number, got m_t = {m_t}"
        )));
    }
    let p = &model.params;
    let ch = &p.channels;
    let cav = &p.cavity;
    let n = state.n_total;
    let q = n / 4.0;
    let mut s = state.clone();

    let truth = match s.truth {
        Some(t) => t,
        None => sample_gaussian(&s.offset_mean, &s.cov, rng),
    };
    s.truth = Some(truth);
    let true_up = s.base_up() + truth.z;
    let true_down = n - s.pop_one - true_up;

    let start = ctx.clock.unwrap_or(0.0);
    let (t0, t1) = p.probe.window_span(start);
    ctx.clock = Some(start + p.probe.pulse);

    // Scattering and its consequences.
    let f = ctx.power_factor;
    let ms_mean = m_t * scattered_ratio_unchecked(s.pop_up().max(0.0), cav);
    let ms_actual = f * m_t * scattered_ratio_unchecked(true_up.max(0.0), cav);
    let raman = if ch.raman {
        let up_rate = if true_up > 0.0 { ms_actual / true_up } else { 0.0 };
        let down_rate = f * m_t * scattered_ratio_unchecked(n / 2.0, cav) / (n / 2.0);
        raman_window(true_up, true_down, up_rate, down_rate, &p.transition, p.model.repump_one_to_up, rng)
    } else {
        RamanDraw::default()
    };
    let recoil = if ch.recoil {
        let photons = poisson(ms_actual, rng);
        let avg = window_average(photons, rng);
        let shift = -cav.recoil_shift_angular() * (ctx.scattered + avg);
        ctx.scattered += photons;
        shift
    } else {
        0.0
    };

    // Dressed frequency seen during the window.
    let up_avg = true_up + raman.average[0];
    let down_avg = true_down + raman.average[1];
    let one_avg = s.pop_one + raman.average[2];
    let c1 = p.model.one_coupling_ratio;
    let a_down = cav.g * cav.g / (cav.delta + cav.omega_hf);
    let eff_up = (up_avg + c1 * one_avg).max(0.0);
    let mut omega = dressed_shift_unchecked(eff_up, cav) + a_down * down_avg + recoil;

    // Noise specified in atom units enters through the estimator slope.
    let slope = alpha_up_unchecked(eff_up, cav) - a_down;
    let read_var = model.read_variance(m_t);
    let mut atom_var = read_var;
    if ch.technical_floor {
        let x = ctx.detuning / (cav.kappa / 2.0);
        if p.probe.detuning_spread > 0.0 || p.model.lineshape_penalty.is_some() {
            atom_var += q * model.lineshape_penalty * x * x;
        } else {
            atom_var += q * p.noise.r_tf / 2.0;
        }
    }
    let (res_c, res_q) = model.residual_variances(m_t, n);
    atom_var += res_c + res_q;
    let z: f64 = rng.sample(StandardNormal);
    let mut atom_noise = atom_var.sqrt() * z;
    if ch.optomechanics && model.opto_amplitude > 0.0 {
        let tau = p.model.opto.decay_time(ctx.detuning, cav);
        let ring = ringing_window_mean(t0, t1, tau, cav.omega_ax);
        atom_noise += model.opto_amplitude * m_t * q.sqrt() * ring;
    }
    omega += slope * atom_noise;

    // The observer does not see Raman losses to |1⟩.
    let n_up = estimate_n_up(omega, n, 0.0, p);

    // Conditional update of the fluctuation along ẑ.
    let prior_pred = s.pop_up();
    let noise_var = read_var.max(1e-12 * n);
    let prior_zz = s.cov[(2, 2)];
    if prior_zz > 0.0 {
        let (_, post_var) = gaussian_update(0.0, prior_zz, 0.0, noise_var);
        let gain_vec = s.cov.column(2) / (prior_zz + noise_var);
        s.offset_mean += gain_vec * (n_up - prior_pred);
        s.cov -= gain_vec * s.cov.row(2);
        s.cov = 0.5 * (s.cov + s.cov.transpose());
        s.cov[(2, 2)] = post_var;
    }
    apply_population_change(&mut s, raman.full);

    // Contrast collapse and light-shift dephasing.
    let x = ms_mean / n;
    let shrink = (-x - p.model.excess_contrast_decay * x * x).exp();
    s.bloch.x *= shrink;
    s.bloch.y *= shrink;
    s.dephasing += p.model.light_shift_per_photon * m_t;

    // Minimal anti-squeezing: the transverse covariance determinant must
    // stay above (𝒞N/4)², so the product holds along any transverse axes.
    let (u, w) = s.quadrature_axes();
    let cuu = (u.transpose() * s.cov * u)[(0, 0)];
    let cww = (w.transpose() * s.cov * w)[(0, 0)];
    let cuw = (u.transpose() * s.cov * w)[(0, 0)];
    let bound = s.contrast() * n / 4.0;
    let det = cuu * cww - cuw * cuw;
    if det < bound * bound && cuu > 0.0 {
        let extra = (bound * bound - det) / cuu;
        s.cov += w * w.transpose() * extra;
        if let Some(t) = s.truth.as_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *t += w * (extra.sqrt() * z);
        }
    }

    let outcome = MeasurementOutcome {
        n_up,
        frequency_hz: omega / (2.0 * PI),
        true_jz: up_avg - n / 2.0,
    };
    Ok((outcome, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Channels;
    use crate::physics::CavityParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ideal(n: f64) -> SimParams {
        let mut p = SimParams::default().with_atoms(n);
        p.channels = Channels::IDEAL;
        p
    }

    #[test]
    fn css_moments() {
        let s = prepare_css(4.8e5, &EnsembleParams::default()).unwrap();
        assert!((s.pop_up() - 2.4e5).abs() < 1e-6);
        assert!((s.pop_down() - 2.4e5).abs() < 1e-6);
        assert!((s.jz_var() - 1.2e5).abs() < 1e-6);
        assert!((s.jy_var() - 1.2e5).abs() < 1e-6);
        assert!((s.contrast() - 0.97).abs() < 1e-12);
        assert!(heisenberg_check(&s));

        let s = prepare_css(4.0, &EnsembleParams::default()).unwrap();
        assert!((s.jz_var() - 1.0).abs() < 1e-12);
        let s = prepare_css(4.3e5, &EnsembleParams::default()).unwrap();
        assert!((s.jz_var().sqrt() - 327.87).abs() < 0.01);
    }

    #[test]
    fn css_needs_atoms() {
        assert!(prepare_css(0.0, &EnsembleParams::default()).is_err());
    }

    #[test]
    fn pi_pulse_swaps_pumped_populations() {
        let n = 1e5;
        let s = EnsembleState::pumped(n, AtomState::Down, 0.97).unwrap();
        assert!(s.pop_up().abs() < 1e-9);
        let r = rotate(&s, PI, 0.0);
        assert!((r.pop_up() - n * 1.97 / 2.0).abs() < 1e-6);
    }

    #[test]
    fn heisenberg_detects_violation() {
        let mut s = prepare_css(1e4, &EnsembleParams::default()).unwrap();
        s.cov = Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 2500.0));
        assert!(!heisenberg_check(&s));
    }

    #[test]
    fn small_rotation_displaces_jz() {
        let n = 4.3e5;
        let ens = EnsembleParams::with_effective(n);
        let s = prepare_css(n, &ens).unwrap();
        let psi = 2.3e-3;
        let r = rotate(&s, psi, 0.0);
        let expect = 0.97 * n / 2.0 * psi.sin();
        assert!((r.jz_mean() - expect).abs() < 1e-6);
        assert!((r.jz_var() - s.jz_var()).abs() < 1e-6);
    }

    #[test]
    fn gaussian_update_matches_grid_posterior() {
        let (mu, var, obs, nv) = (12.0, 400.0, 55.0, 150.0);
        let (m, v) = gaussian_update(mu, var, obs, nv);
        let sd = var.sqrt();
        let npts = 512;
        let (mut w0, mut w1, mut w2) = (0.0, 0.0, 0.0);
        for i in 0..npts {
            let x = mu - 6.0 * sd + 12.0 * sd * i as f64 / (npts - 1) as f64;
            let w = (-0.5 * (x - mu).powi(2) / var - 0.5 * (obs - x).powi(2) / nv).exp();
            w0 += w;
            w1 += w * x;
            w2 += w * x * x;
        }
        let gm = w1 / w0;
        let gv = w2 / w0 - gm * gm;
        assert!(((m - gm) / gm).abs() < 1e-3);
        assert!(((v - gv) / gv).abs() < 1e-3);
    }

    #[test]
    fn uninformative_update_is_identity() {
        assert_eq!(gaussian_update(3.0, 2.0, 100.0, f64::INFINITY), (3.0, 2.0));
    }

    #[test]
    fn probe_rejects_zero_photons() {
        let p = ideal(1e5);
        let model = ProbeModel::new(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = ProbeContext::new(&p, &mut rng);
        let s = prepare_css(1e5, &p.ensemble).unwrap();
        assert!(matches!(
            probe_measure(&s, 0.0, &model, &mut ctx, &mut rng),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn probe_posterior_and_contrast() {
        let n = 4.8e5;
        let p = ideal(n);
        let model = ProbeModel::new(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ctx = ProbeContext::new(&p, &mut rng);
        let s = prepare_css(n, &p.ensemble).unwrap();
        let (_, post) = probe_measure(&s, 4.1e4, &model, &mut ctx, &mut rng).unwrap();
        let sm2 = model.read_variance(4.1e4);
        let expect = 1.0 / (1.0 / (n / 4.0) + 1.0 / sm2);
        assert!(((post.jz_var() - expect) / expect).abs() < 1e-9);
        let ms = 4.1e4 * scattered_ratio_unchecked(n / 2.0, &p.cavity);
        let c = 0.97 * (-ms / n).exp();
        assert!((post.contrast() - c).abs() < 1e-9);
        assert!(heisenberg_check(&post));
        let total = post.pop_up() + post.pop_down() + post.pop_one;
        assert!((total - n).abs() < 1e-6 * n);
    }

    #[test]
    fn no_raman_probabilities_leave_state_unchanged() {
        let s = prepare_css(1e5, &EnsembleParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = apply_raman_diffusion(&s, 4.1e4, &TransitionProbs::ZERO, &mut rng).unwrap();
        assert_eq!(r, s);
        assert!(apply_raman_diffusion(&s, -1.0, &TransitionProbs::ZERO, &mut rng).is_err());
    }

    #[test]
    fn raman_single_window_variance() {
        let n = 4.8e5;
        let cav = CavityParams::default();
        let tp = TransitionProbs::default();
        let s = prepare_css(n, &EnsembleParams::with_effective(n)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m_s = 4.1e4;
        let trials = 20_000;
        let mut xs = Vec::with_capacity(trials);
        for _ in 0..trials {
            let r = apply_raman_diffusion(&s, m_s, &tp, &mut rng).unwrap();
            xs.push(r.pop_up() - s.pop_up());
        }
        let mean = xs.iter().sum::<f64>() / trials as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        // Population-count variance: every channel moves one atom in or out of ↑,
        // except ↓→1 which leaves ↑ alone.
        let expect = m_s * (tp.p_ud + tp.p_u1 + tp.p_du);
        assert!(((var - expect) / expect).abs() < 0.05, "{var} vs {expect}");
        let _ = cav;
    }

    #[test]
    fn probe_model_calibrations() {
        let p = SimParams::default();
        let model = ProbeModel::new(&p).unwrap();
        assert!((model.lineshape_penalty - (1.0 / 73.0) / (2.0 * 0.045 * 0.045)).abs() < 1e-12);
        assert!(model.opto_amplitude > 0.0);
        let (c, q) = model.residual_variances(4.1e4, 4.8e5);
        assert!(c > 0.0);
        assert_eq!(q, 0.0);
    }

    #[test]
    fn estimator_inverts_model() {
        let p = SimParams::default();
        let cav = &p.cavity;
        let n = 4.8e5;
        let a_down = cav.g * cav.g / (cav.delta + cav.omega_hf);
        for x in [0.0, 1e3, 2.4e5, 4.7e5] {
            let omega = dressed_shift_unchecked(x, cav) + a_down * (n - x);
            let est = estimate_n_up(omega, n, 0.0, &p);
            assert!((est - x).abs() < 1e-6 * n, "{x} -> {est}");
        }
    }
}
