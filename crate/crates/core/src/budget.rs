//! The four-term R(M_t) model and the individually computed contributions to
//! the spin-noise budget (population diffusion and change, photon recoil,
//! optomechanical ringing).

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::params::SimParams;
use crate::physics::{alphas, scattered_ratio_unchecked, Alphas, CavityParams};
use crate::spin::TransitionProbs;

/// Averaging factor for differenced windows of a random-walk signal.
pub const BETA: f64 = 2.0 / 3.0;

/// Coefficients of `R = r_psn/M_t + r_tf + r_q·M_t + r_c·M_t²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCoeffs {
    pub r_psn: f64,
    pub r_tf: f64,
    pub r_q: f64,
    pub r_c: f64,
}

/// Probe strength at which the reference budget is quoted.
pub const REFERENCE_MT: f64 = 4.1e4;

impl Default for NoiseCoeffs {
    /// Coefficients reproducing the budget at M_t = 4.1e4: shot noise limits
    /// R⁻¹ to 32, the floor to 73 and classical back-action to 67.
    fn default() -> Self {
        Self {
            r_psn: REFERENCE_MT / 32.0,
            r_tf: 1.0 / 73.0,
            r_q: 0.0,
            r_c: 1.0 / (67.0 * REFERENCE_MT * REFERENCE_MT),
        }
    }
}

impl NoiseCoeffs {
    pub const ZERO: NoiseCoeffs = NoiseCoeffs {
        r_psn: 0.0,
        r_tf: 0.0,
        r_q: 0.0,
        r_c: 0.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.r_psn, self.r_tf, self.r_q, self.r_c]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            r_psn: a[0],
            r_tf: a[1],
            r_q: a[2],
            r_c: a[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return domain(format!("noise coefficients must be finite and non-negative: {self:?}"));
        }
        Ok(())
    }
}

/// Basis functions of the R model, in coefficient order.
pub fn model_basis(m_t: f64) -> [f64; 4] {
    [1.0 / m_t, 1.0, m_t, m_t * m_t]
}

pub fn model_r(m_t: f64, c: &NoiseCoeffs) -> Result<f64> {
    if !(m_t > 0.0) {
        return domain(format!("m_t must be positive, got {m_t}"));
    }
    let b = model_basis(m_t);
    Ok(c.as_array().iter().zip(b).map(|(c, b)| c * b).sum())
}

fn check_nonneg(v: f64, what: &str) -> Result<()> {
    if v.is_nan() || v < 0.0 {
        return domain(format!("{what} must be non-negative, got {v}"));
    }
    Ok(())
}

/// Quantum population-diffusion contribution to R (frequency noise expressed
/// in ↑-atom units through `alphas.up`).
pub fn pop_noise_quantum(m_s: f64, n: f64, tp: &TransitionProbs, a: &Alphas) -> Result<f64> {
    check_nonneg(m_s, "m_s")?;
    let sq = |x: f64| x * x;
    let bracket = tp.p_ud * sq(a.down - a.up)
        + tp.p_u1 * sq(a.one - a.up)
        + tp.p_du * sq(a.up - a.down)
        + tp.p_d1 * sq(a.one - a.down);
    Ok(BETA * m_s / (n / 4.0) * bracket / sq(a.up))
}

/// Signed sum of mean frequency changes per scattered photon, in ↑-atom units.
pub fn pop_change_per_photon(tp: &TransitionProbs, a: &Alphas) -> f64 {
    (tp.p_ud * (a.down - a.up)
        + tp.p_u1 * (a.one - a.up)
        + tp.p_du * (a.up - a.down)
        + tp.p_d1 * (a.one - a.down))
        / a.up
}

/// Classical population-change contribution to R from rms probe-power
/// fluctuations `frac·m_s`. The signed terms add coherently.
pub fn pop_noise_classical(m_s: f64, frac: f64, n: f64, tp: &TransitionProbs, a: &Alphas) -> Result<f64> {
    check_nonneg(m_s, "m_s")?;
    check_nonneg(frac, "frac")?;
    let dms = frac * m_s;
    let s = pop_change_per_photon(tp, a);
    Ok(dms * dms / (n / 4.0) * s * s)
}

/// Photon-recoil heating contributions `(quantum, classical)` to R.
///
/// `eps` and `alpha_up` must share units (Hz per photon and Hz per atom, or
/// both angular).
pub fn recoil_noise(m_s: f64, frac: f64, n: f64, eps: f64, alpha_up: f64) -> Result<(f64, f64)> {
    check_nonneg(m_s, "m_s")?;
    check_nonneg(frac, "frac")?;
    let norm = alpha_up * alpha_up * n / 4.0;
    let quantum = BETA * m_s * eps * eps / norm;
    let classical = (frac * m_s * eps).powi(2) / norm;
    Ok((quantum, classical))
}

/// Phenomenological optomechanical ringing of the dressed frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptoParams {
    /// Decay constant at zero probe detuning, s.
    pub tau0: f64,
    /// Damping asymmetry versus detuning in units of κ/2.
    pub damping_asymmetry: f64,
    /// R⁻¹ limit of the variable-damping term at `REFERENCE_MT`.
    pub r_inv_at_reference: f64,
}

impl Default for OptoParams {
    fn default() -> Self {
        Self {
            tau0: 10e-6,
            damping_asymmetry: 0.5,
            r_inv_at_reference: 620.0,
        }
    }
}

impl OptoParams {
    /// Decay constant at probe detuning `delta_p`; never below 1% of `tau0`.
    pub fn decay_time(&self, delta_p: f64, cav: &CavityParams) -> f64 {
        let x = delta_p / (cav.kappa / 2.0);
        self.tau0 * (1.0 + self.damping_asymmetry * x).max(0.01)
    }

    /// Coefficient of `M_t²` in the variable-damping term.
    pub fn coefficient(&self) -> f64 {
        if self.r_inv_at_reference.is_infinite() {
            0.0
        } else {
            1.0 / (self.r_inv_at_reference * REFERENCE_MT * REFERENCE_MT)
        }
    }
}

/// `amp·exp(−t/τ(δ_p))·cos(ω_ax·t)` sampled on `t_grid`.
pub fn opto_ringing_trace(delta_p: f64, t_grid: &[f64], cav: &CavityParams, amp: f64, opto: &OptoParams) -> Result<Vec<f64>> {
    if !(opto.tau0 > 0.0) {
        return domain("tau0 must be positive");
    }
    let tau = opto.decay_time(delta_p, cav);
    Ok(t_grid
        .iter()
        .map(|&t| amp * (-t / tau).exp() * (cav.omega_ax * t).cos())
        .collect())
}

/// Mean of the unit-amplitude ringing over `[t0, t1]`.
pub fn ringing_window_mean(t0: f64, t1: f64, tau: f64, omega: f64) -> f64 {
    let a = 1.0 / tau;
    let prim = |t: f64| (-a * t).exp() * (omega * (omega * t).sin() - a * (omega * t).cos()) / (a * a + omega * omega);
    (prim(t1) - prim(t0)) / (t1 - t0)
}

/// Variable-damping contribution `c_o·M_t²`.
pub fn opto_noise_term(m_t: f64, _n: f64, opto: &OptoParams) -> Result<f64> {
    check_nonneg(m_t, "m_t")?;
    Ok(opto.coefficient() * m_t * m_t)
}

/// Spectroscopic enhancement `W⁻¹ = R⁻¹·𝒞²/𝒞ᵢ`.
pub fn spectroscopic_enhancement(r: f64, contrast: f64, initial_contrast: f64) -> Result<f64> {
    if !(r > 0.0) {
        return domain(format!("R must be positive, got {r}"));
    }
    if !(contrast > 0.0 && contrast <= initial_contrast && initial_contrast <= 1.0) {
        return domain(format!(
            "need 0 < C <= C_i <= 1, got C = {contrast}, C_i = {initial_contrast}"
        ));
    }
    Ok(contrast * contrast / (initial_contrast * r))
}

/// One row of the budget table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub term: String,
    pub r_inv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub m_t: f64,
    pub n: f64,
    pub observed_optimum: f64,
    pub photon_shot_noise: f64,
    pub technical_floor: f64,
    pub laser_linewidth: f64,
    pub classical_total: f64,
    pub variable_damping: f64,
    pub recoil_classical: f64,
    pub population_classical: f64,
    pub quantum_total: f64,
    pub recoil_quantum: f64,
    pub population_diffusion: f64,
}

fn inv(x: f64) -> f64 {
    if x > 0.0 {
        1.0 / x
    } else {
        f64::INFINITY
    }
}

impl BudgetReport {
    pub fn compute(m_t: f64, p: &SimParams) -> Result<Self> {
        let n = p.ensemble.n_effective;
        let total = model_r(m_t, &p.noise)?;
        let m_s = m_t * scattered_ratio_unchecked(n / 2.0, &p.cavity);
        let a = alphas(n / 2.0, &p.cavity, p.model.one_coupling_ratio)?;
        let frac = p.probe.ms_classical_frac;
        let (ext_q, ext_c) = recoil_noise(m_s, frac, n, p.cavity.recoil_shift_angular(), a.up)?;
        Ok(Self {
            m_t,
            n,
            observed_optimum: inv(total),
            photon_shot_noise: inv(p.noise.r_psn / m_t),
            technical_floor: inv(p.noise.r_tf),
            laser_linewidth: p.model.laser_linewidth_r_inv,
            classical_total: inv(p.noise.r_c * m_t * m_t),
            variable_damping: inv(opto_noise_term(m_t, n, &p.model.opto)?),
            recoil_classical: inv(ext_c),
            population_classical: inv(pop_noise_classical(m_s, frac, n, &p.transition, &a)?),
            quantum_total: inv(p.noise.r_q * m_t),
            recoil_quantum: inv(ext_q),
            population_diffusion: inv(pop_noise_quantum(m_s, n, &p.transition, &a)?),
        })
    }

    pub fn rows(&self) -> Vec<BudgetRow> {
        let row = |t: &str, v: f64| BudgetRow {
            term: t.to_string(),
            r_inv: v,
        };
        vec![
            row("Observed Optimum", self.observed_optimum),
            row("Photon Shot Noise r_PSN", self.photon_shot_noise),
            row("Technical Noise Floor R_t", self.technical_floor),
            row("  Laser Linewidth", self.laser_linewidth),
            row("Classical Noise r_c", self.classical_total),
            row("  Variable Damping R_o", self.variable_damping),
            row("  Photon Recoil R_ext,c", self.recoil_classical),
            row("  Population Change R_pop,c", self.population_classical),
            row("Quantum Noise r_q", self.quantum_total),
            row("  Photon Recoil R_ext,q", self.recoil_quantum),
            row("  Population Diffusion R_pop,q", self.population_diffusion),
        ]
    }

    /// Two-column `term,R_inv` table.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# m_t={:.6e} n={:.6e}\nterm,R_inv\n", self.m_t, self.n);
        for r in self.rows() {
            out.push_str(&format!("\"{}\",{:.6e}\n", r.term, r.r_inv));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn reference_alphas() -> Alphas {
        alphas(2.4e5, &CavityParams::default(), 2.0 / 3.0).unwrap()
    }

    #[test]
    fn model_r_examples() {
        let c = NoiseCoeffs {
            r_psn: 1281.0,
            r_tf: 1.0 / 73.0,
            r_q: 0.0,
            r_c: 8.9e-12,
        };
        // 1/32 + 1/73 + 1/67, term by term
        let r = model_r(4.1e4, &c).unwrap();
        assert!((1.0 / r - 16.7).abs() < 0.5, "{}", 1.0 / r);
        assert_eq!(model_r(4.1e4, &NoiseCoeffs::ZERO).unwrap(), 0.0);
        let single = NoiseCoeffs { r_psn: 1.0, ..NoiseCoeffs::ZERO };
        assert_eq!(model_r(2.0, &single).unwrap(), 0.5);
        assert!(model_r(0.0, &c).is_err());
        assert!(model_r(-1.0, &c).is_err());
    }

    #[test]
    fn model_is_sum_of_terms() {
        let c = NoiseCoeffs::default();
        for m in [1e3, 4.1e4, 2e5] {
            let sum = c.r_psn / m + c.r_tf + c.r_q * m + c.r_c * m * m;
            assert_eq!(model_r(m, &c).unwrap(), sum);
        }
    }

    #[test]
    fn pop_quantum_in_band() {
        let tp = TransitionProbs::default();
        assert_eq!(pop_noise_quantum(4.1e4, 4.8e5, &TransitionProbs::ZERO, &reference_alphas()).unwrap(), 0.0);
        let r = pop_noise_quantum(4.1e4, 4.8e5, &tp, &reference_alphas()).unwrap();
        assert!((1.1e3..=2.6e3).contains(&(1.0 / r)), "{}", 1.0 / r);
        let r2 = pop_noise_quantum(8.2e4, 4.8e5, &tp, &reference_alphas()).unwrap();
        assert!((r2 / r - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pop_quantum_label_symmetry() {
        // exchanging two states with equal alpha leaves the term unchanged
        let a = Alphas { up: 1.0, down: 0.2, one: 0.2 };
        let tp = TransitionProbs { p_ud: 1e-3, p_du: 2e-3, p_u1: 5e-3, p_d1: 0.0 };
        let swapped = TransitionProbs { p_ud: 5e-3, p_du: 2e-3, p_u1: 1e-3, p_d1: 0.0 };
        let x = pop_noise_quantum(1e4, 1e5, &tp, &a).unwrap();
        let y = pop_noise_quantum(1e4, 1e5, &swapped, &a).unwrap();
        assert!((x - y).abs() < 1e-15);
    }

    #[test]
    fn pop_classical_and_cancellation() {
        let tp = TransitionProbs::default();
        let a = reference_alphas();
        assert_eq!(pop_noise_classical(4.1e4, 0.0, 4.8e5, &tp, &a).unwrap(), 0.0);
        let r = pop_noise_classical(4.1e4, 0.04, 4.8e5, &tp, &a).unwrap();
        assert!((2e4..5e4).contains(&(1.0 / r)), "{}", 1.0 / r);
        // flipping the sign of the down->up term removes the cancellation
        let s = pop_change_per_photon(&tp, &a);
        let flipped = s - 2.0 * tp.p_du * (a.up - a.down) / a.up;
        let ratio = (s * s) / (flipped * flipped);
        assert!(ratio > 1.0 / 8.0 && ratio < 1.0 / 4.0, "ratio {ratio}");
    }

    #[test]
    fn recoil_terms() {
        let (q, c) = recoil_noise(4.1e4, 0.04, 4.8e5, 1.3, 415.0).unwrap();
        assert!((1.0 / q - 4.5e5).abs() / 4.5e5 < 0.02, "{}", 1.0 / q);
        assert!((1.0 / c - 4.5e3).abs() / 4.5e3 < 0.02, "{}", 1.0 / c);
        assert_eq!(recoil_noise(4.1e4, 0.04, 4.8e5, 0.0, 415.0).unwrap(), (0.0, 0.0));
        // angular units give the same ratio
        let (qa, _) = recoil_noise(4.1e4, 0.04, 4.8e5, TAU * 1.3, TAU * 415.0).unwrap();
        assert!((qa - q).abs() / q < 1e-12);
    }

    #[test]
    fn ringing_trace_behaviour() {
        let cav = CavityParams::default();
        let opto = OptoParams::default();
        assert_eq!(opto.decay_time(0.0, &cav), 10e-6);
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.5e-6).collect();
        let flat = opto_ringing_trace(0.0, &t, &cav, 0.0, &opto).unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
        let dp = 0.2 * cav.kappa / 2.0;
        assert!(opto.decay_time(dp, &cav) > opto.decay_time(-dp, &cav));
        // envelope at one axial period: slower decay keeps more amplitude
        let period = std::f64::consts::TAU / cav.omega_ax;
        let up = opto_ringing_trace(dp, &[period], &cav, 1.0, &opto).unwrap()[0];
        let down = opto_ringing_trace(-dp, &[period], &cav, 1.0, &opto).unwrap()[0];
        assert!(up > down);
        let bad = OptoParams { tau0: 0.0, ..opto };
        assert!(opto_ringing_trace(0.0, &t, &cav, 1.0, &bad).is_err());
    }

    #[test]
    fn window_mean_matches_quadrature() {
        let (tau, w) = (10e-6, std::f64::consts::TAU * 150e3);
        let (t0, t1) = (1.5e-6, 41.5e-6);
        let n = 20000;
        let h = (t1 - t0) / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            let t = t0 + (i as f64 + 0.5) * h;
            s += (-t / tau).exp() * (w * t).cos();
        }
        let quad = s * h / (t1 - t0);
        assert!((ringing_window_mean(t0, t1, tau, w) - quad).abs() < 1e-8);
    }

    #[test]
    fn opto_term_calibration() {
        let o = OptoParams::default();
        let r = opto_noise_term(4.1e4, 4.8e5, &o).unwrap();
        assert!((1.0 / r - 620.0).abs() < 1e-9);
        assert_eq!(opto_noise_term(0.0, 4.8e5, &o).unwrap(), 0.0);
        let r2 = opto_noise_term(8.2e4, 4.8e5, &o).unwrap();
        assert!((r2 / r - 4.0).abs() < 1e-12);
    }

    #[test]
    fn enhancement() {
        assert_eq!(spectroscopic_enhancement(1.0 / 16.0, 1.0, 1.0).unwrap(), 16.0);
        // W⁻¹ = 10.5 at R⁻¹ = 16 needs C²/C_i ≈ 0.66
        let ci = 0.97;
        let c = (10.5_f64 / 16.0 * ci).sqrt();
        let w = spectroscopic_enhancement(1.0 / 16.0, c, ci).unwrap();
        assert!((w - 10.5).abs() < 1e-9);
        assert!((c * c / ci - 0.66).abs() < 0.01);
        assert!(spectroscopic_enhancement(0.0, 0.5, 0.9).is_err());
        assert!(spectroscopic_enhancement(0.1, 0.95, 0.9).is_err());
    }

    #[test]
    fn report_matches_reference_budget() {
        let p = SimParams::default();
        let b = BudgetReport::compute(REFERENCE_MT, &p).unwrap();
        assert!((b.photon_shot_noise - 32.0).abs() < 1e-9);
        assert!((b.technical_floor - 73.0).abs() < 1e-9);
        assert!((b.classical_total - 67.0).abs() < 1e-6);
        assert!((b.variable_damping - 620.0).abs() < 1e-6);
        assert!(b.quantum_total.is_infinite());
        assert_eq!(b.rows().len(), 11);
        assert!(b.rows().iter().all(|r| r.r_inv > 0.0));
        assert!(b.to_csv().contains("Population Diffusion"));
    }
}
