//! Scripted experiments built on the trial runner: contrast fringes, the
//! squeezing sweep, single-shot phase detection, atom-number scaling and the
//! Raman calibration.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::budget::{model_r, opto_noise_term, pop_noise_classical, pop_noise_quantum, recoil_noise, spectroscopic_enhancement, NoiseCoeffs};
use crate::error::{Result, SimError};
use crate::params::SimParams;
use crate::physics::{alphas, scattered_ratio_unchecked, AtomState};
use crate::rng::stream_seed;
use crate::sequence::{parse_protocol, run_trials, spin_noise_reduction, Protocol, Step, SQUEEZING_PROTOCOL};
use crate::stats::{linear_fit, mean, sample_variance};

/// Atom number of the Raman calibration runs.
pub const RAMAN_ATOMS: f64 = 2.1e5;
/// Atom number of the phase-detection runs.
pub const PHASE_ATOMS: f64 = 4.3e5;

/// Scattered photons per atom, `M_s/N`, for one probe window on the equator.
pub fn scattered_per_atom(m_t: f64, p: &SimParams) -> f64 {
    let n = p.ensemble.n_effective;
    m_t * scattered_ratio_unchecked(n / 2.0, &p.cavity) / n
}

/// Contrast after one pre-measurement window of `m_t` photons.
pub fn contrast_model(m_t: f64, p: &SimParams) -> f64 {
    let x = scattered_per_atom(m_t, p);
    p.ensemble.initial_contrast * (-x - p.model.excess_contrast_decay * x * x).exp()
}

/// Noise coefficients at the configured atom number. Read imprecision is
/// fixed in atoms, so the shot-noise term scales with `N_ref/N`.
pub fn scaled_coeffs(p: &SimParams) -> NoiseCoeffs {
    let mut c = p.noise;
    c.r_psn *= p.model.psn_reference_atoms / p.ensemble.n_effective;
    c
}

pub fn analytic_r(m_t: f64, p: &SimParams) -> Result<f64> {
    model_r(m_t, &scaled_coeffs(p))
}

/// Analytic `W⁻¹`; zero once the contrast has fully decayed.
pub fn analytic_winv(m_t: f64, p: &SimParams) -> Result<f64> {
    let r = analytic_r(m_t, p)?;
    let c = contrast_model(m_t, p);
    if c <= 0.0 {
        return Ok(0.0);
    }
    spectroscopic_enhancement(r, c, p.ensemble.initial_contrast)
}

/// Excess-decay coefficient that makes the analytic `W⁻¹(m_t)` equal `target`.
/// Zero when scattering alone already brings W⁻¹ below the target.
pub fn calibrate_excess_decay(p: &SimParams, m_t: f64, target: f64) -> Result<f64> {
    if !(target > 0.0) {
        return Err(SimError::Domain(format!("target W^-1 must be positive, got {target}")));
    }
    let r = analytic_r(m_t, p)?;
    let x = scattered_per_atom(m_t, p);
    let k = ((p.ensemble.initial_contrast / (target * r)).ln() - 2.0 * x) / (2.0 * x * x);
    Ok(k.max(0.0))
}

/// Log-spaced grid from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Maximum of the analytic W⁻¹ over `[lo, hi]`, scanned at `per_decade`
/// points per decade and polished by golden-section search.
pub fn optimize_winv(p: &SimParams, lo: f64, hi: f64, per_decade: usize) -> Result<(f64, f64)> {
    let points = ((hi / lo).log10() * per_decade as f64).ceil().max(2.0) as usize + 1;
    let grid = log_grid(lo, hi, points);
    let vals: Vec<f64> = grid.iter().map(|&m| analytic_winv(m, p)).collect::<Result<_>>()?;
    let k = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut a = grid[k.saturating_sub(1)].ln();
    let mut b = grid[(k + 1).min(grid.len() - 1)].ln();
    let f = |u: f64| analytic_winv(u.exp(), p).unwrap_or(f64::NEG_INFINITY);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) >= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let m = (0.5 * (a + b)).exp();
    Ok((m, analytic_winv(m, p)?))
}

/// Probe strength below the W⁻¹ optimum at which the analytic W⁻¹ equals `target`.
pub fn tune_mt_for_winv(p: &SimParams, target: f64) -> Result<f64> {
    let (m_opt, w_opt) = optimize_winv(p, 1e2, 1e7, 20)?;
    if target > w_opt {
        return Err(SimError::Domain(format!(
            "W^-1 = {target} is above the reachable maximum {w_opt:.3}"
        )));
    }
    let (mut lo, mut hi) = (m_opt * 1e-4, m_opt);
    if analytic_winv(lo, p)? > target {
        return Err(SimError::Domain(format!("W^-1 never drops to {target} below the optimum")));
    }
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        if analytic_winv(mid, p)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * hi).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastFit {
    pub contrast: f64,
    pub stderr: f64,
    /// Fitted mean ↑ population, atoms.
    pub offset: f64,
    /// Phase of the fitted fringe maximum, rad.
    pub phase: f64,
}

/// Fit `y = a + b·cos θ + c·sin θ` and return the amplitude as a fraction of `n/2`.
pub fn fit_fringe(theta: &[f64], n_up: &[f64], n: f64) -> Result<ContrastFit> {
    let k = theta.len();
    if k != n_up.len() || k < 4 {
        return Err(SimError::Fit(format!("fringe fit needs at least 4 paired points, got {k}")));
    }
    let x = DMatrix::from_fn(k, 3, |i, j| match j {
        0 => 1.0,
        1 => theta[i].cos(),
        _ => theta[i].sin(),
    });
    let y = DVector::from_column_slice(n_up);
    let xtx = x.transpose() * &x;
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| SimError::Fit("fringe phases do not determine a cosine".into()))?;
    let beta = &inv * x.transpose() * &y;
    let resid = &y - &x * &beta;
    let dof = (k as f64 - 3.0).max(1.0);
    let s2 = resid.norm_squared() / dof;
    let (b, c) = (beta[1], beta[2]);
    let amp = b.hypot(c);
    if !(amp > 0.0) {
        return Err(SimError::Fit("flat fringe".into()));
    }
    let var_amp = s2 * (b * b * inv[(1, 1)] + c * c * inv[(2, 2)] + 2.0 * b * c * inv[(1, 2)]) / (amp * amp);
    let half = n / 2.0;
    Ok(ContrastFit {
        contrast: amp / half,
        stderr: var_amp.sqrt() / half,
        offset: beta[0],
        phase: c.atan2(b),
    })
}

fn probe(label: &str, m_t: f64) -> Step {
    Step::Probe {
        label: label.into(),
        m_t: Some(m_t),
    }
}

fn pulse(angle: f64, phase: f64) -> Step {
    Step::MicrowavePulse { angle, phase }
}

/// Contrast after a pre-measurement of `m_t` photons, from a readout fringe
/// over the final π/2 pulse phase.
pub fn contrast_fringe(p: &SimParams, m_t: f64, theta_grid: &[f64], trials: usize, seed: u64) -> Result<ContrastFit> {
    if theta_grid.len() < 6 {
        return Err(SimError::Domain(format!("need at least 6 fringe phases, got {}", theta_grid.len())));
    }
    let lo = theta_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = theta_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < PI * (1.0 - 1e-9) {
        return Err(SimError::Domain("fringe phases must span at least pi".into()));
    }
    if !(m_t >= 0.0) {
        return Err(SimError::Domain(format!("m_t must be non-negative, got {m_t}")));
    }
    let mut means = Vec::with_capacity(theta_grid.len());
    for (i, &theta) in theta_grid.iter().enumerate() {
        let mut steps = vec![Step::Prealign, Step::OpticalPump(AtomState::Down), pulse(PI / 2.0, 0.0)];
        if m_t > 0.0 {
            steps.push(probe("pre", m_t));
        }
        steps.push(pulse(PI / 2.0, theta));
        steps.push(probe("read", p.probe.m_t));
        let rs = run_trials(&Protocol { steps }, p, trials, stream_seed(seed, i as u64))?;
        means.push(mean(&rs.column("read")?));
    }
    fit_fringe(theta_grid, &means, p.ensemble.n_effective)
}

/// Analytic R contributions at one probe strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub psn: f64,
    pub floor: f64,
    pub quantum: f64,
    pub classical: f64,
    pub opto: f64,
    pub recoil_classical: f64,
    pub population_classical: f64,
    pub recoil_quantum: f64,
    pub population_quantum: f64,
    pub model: f64,
}

impl TermBreakdown {
    pub fn compute(m_t: f64, p: &SimParams) -> Result<Self> {
        let n = p.ensemble.n_effective;
        let c = scaled_coeffs(p);
        let m_s = m_t * scattered_ratio_unchecked(n / 2.0, &p.cavity);
        let a = alphas(n / 2.0, &p.cavity, p.model.one_coupling_ratio)?;
        let frac = p.probe.ms_classical_frac;
        let (ext_q, ext_c) = recoil_noise(m_s, frac, n, p.cavity.recoil_shift_angular(), a.up)?;
        Ok(Self {
            psn: c.r_psn / m_t,
            floor: c.r_tf,
            quantum: c.r_q * m_t,
            classical: c.r_c * m_t * m_t,
            opto: opto_noise_term(m_t, n, &p.model.opto)?,
            recoil_classical: ext_c,
            population_classical: pop_noise_classical(m_s, frac, n, &p.transition, &a)?,
            recoil_quantum: ext_q,
            population_quantum: pop_noise_quantum(m_s, n, &p.transition, &a)?,
            model: model_r(m_t, &c)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m_t: f64,
    pub r: f64,
    pub contrast: f64,
    pub winv: f64,
    pub terms: TermBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub n: f64,
    pub initial_contrast: f64,
    pub master_seed: u64,
    pub trials_per_point: usize,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_COLUMNS: [&str; 14] = [
    "mt", "R", "C", "Winv", "R_psn", "R_tf", "R_q", "R_c", "R_o", "R_ext_c", "R_pop_c", "R_ext_q", "R_pop_q", "R_model",
];

impl SweepResult {
    /// Row with the largest W⁻¹.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().max_by(|a, b| a.winv.total_cmp(&b.winv))
    }

    /// Row with the smallest R.
    pub fn best_r(&self) -> Option<&SweepRow> {
        self.rows.iter().min_by(|a, b| a.r.total_cmp(&b.r))
    }

    pub fn to_csv(&self) -> String {
        let mut out = SWEEP_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let t = &r.terms;
            let vals = [
                r.m_t,
                r.r,
                r.contrast,
                r.winv,
                t.psn,
                t.floor,
                t.quantum,
                t.classical,
                t.opto,
                t.recoil_classical,
                t.population_classical,
                t.recoil_quantum,
                t.population_quantum,
                t.model,
            ];
            let line: Vec<String> = vals.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// R from the squeezing protocol at each probe strength, with the model
/// contrast and the resulting W⁻¹.
pub fn squeezing_sweep(p: &SimParams, m_t_list: &[f64], trials: usize, seed: u64) -> Result<SweepResult> {
    if m_t_list.is_empty() {
        return Err(SimError::Domain("sweep needs at least one probe strength".into()));
    }
    let protocol = parse_protocol(SQUEEZING_PROTOCOL)?;
    let mut grid = m_t_list.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(grid.len());
    for (i, &m_t) in grid.iter().enumerate() {
        let mut q = *p;
        q.probe.m_t = m_t;
        let rs = run_trials(&protocol, &q, trials, stream_seed(seed, i as u64))?;
        let r = spin_noise_reduction(&rs, "Nf", "Np")?;
        let contrast = contrast_model(m_t, &q);
        rows.push(SweepRow {
            m_t,
            r,
            contrast,
            winv: spectroscopic_enhancement(r, contrast, q.ensemble.initial_contrast)?,
            terms: TermBreakdown::compute(m_t, &q)?,
        });
    }
    Ok(SweepResult {
        n: p.ensemble.n_effective,
        initial_contrast: p.ensemble.initial_contrast,
        master_seed: seed,
        trials_per_point: trials,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bin edges, one more than the counts.
    pub edges: Vec<f64>,
    pub applied: Vec<usize>,
    pub null: Vec<usize>,
}

impl Histogram {
    pub fn build(applied: &[f64], null: &[f64], bins: usize) -> Self {
        let all = applied.iter().chain(null);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = bins.max(1);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let count = |xs: &[f64]| {
            let mut c = vec![0usize; bins];
            for x in xs {
                let k = (((x - lo) / width) as usize).min(bins - 1);
                c[k] += 1;
            }
            c
        };
        Self {
            edges,
            applied: count(applied),
            null: count(null),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCase {
    pub premeasure: bool,
    pub m_t: f64,
    pub threshold: f64,
    pub error_rate: f64,
    pub applied: Vec<f64>,
    pub null: Vec<f64>,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDetectionResult {
    pub psi: f64,
    pub n: f64,
    pub css: PhaseCase,
    pub squeezed: PhaseCase,
}

fn phase_protocol(psi: f64, premeasure: bool, m_t: f64) -> Protocol {
    let mut steps = vec![Step::Prealign, Step::OpticalPump(AtomState::Down), pulse(PI / 2.0, 0.0)];
    if premeasure {
        steps.push(probe("Np", m_t));
        steps.push(pulse(psi, 0.0));
        steps.push(probe("Nf", m_t));
    } else {
        steps.push(pulse(psi, 0.0));
        steps.push(probe("A", m_t));
        steps.push(pulse(PI, 0.0));
        steps.push(probe("B", m_t));
    }
    Protocol { steps }
}

/// Misclassification fraction of the midpoint classifier, both populations weighted equally.
pub fn midpoint_error_rate(applied: &[f64], null: &[f64]) -> (f64, f64) {
    let (ma, mn) = (mean(applied), mean(null));
    let t = 0.5 * (ma + mn);
    let up = ma >= mn;
    let wrong_a = applied.iter().filter(|&&x| if up { x < t } else { x > t }).count();
    let wrong_n = null.iter().filter(|&&x| if up { x >= t } else { x <= t }).count();
    let rate = 0.5 * (wrong_a as f64 / applied.len() as f64 + wrong_n as f64 / null.len() as f64);
    (t, rate)
}

/// Single-shot discrimination of a rotation `psi` from no rotation, with or
/// without a collective pre-measurement subtracted.
pub fn phase_detection(p: &SimParams, psi: f64, premeasure: bool, m_t: f64, trials: usize, seed: u64) -> Result<PhaseCase> {
    if trials < 1000 {
        return Err(SimError::Domain(format!("phase detection needs at least 1000 trials, got {trials}")));
    }
    let signal = |angle: f64, stream: u64| -> Result<Vec<f64>> {
        let rs = run_trials(&phase_protocol(angle, premeasure, m_t), p, trials, stream_seed(seed, stream))?;
        if premeasure {
            rs.differences("Nf", "Np")
        } else {
            rs.differences("A", "B")
        }
    };
    let applied = signal(psi, 0)?;
    let null = signal(0.0, 1)?;
    let (threshold, error_rate) = midpoint_error_rate(&applied, &null);
    Ok(PhaseCase {
        premeasure,
        m_t,
        threshold,
        error_rate,
        histogram: Histogram::build(&applied, &null, 40),
        applied,
        null,
    })
}

/// Both phase-detection cases: the unsqueezed one at the configured probe
/// strength and the pre-measured one at the strength giving `target_winv`.
pub fn phase_detection_pair(p: &SimParams, psi: f64, target_winv: f64, trials: usize, seed: u64) -> Result<PhaseDetectionResult> {
    let css = phase_detection(p, psi, false, p.probe.m_t, trials, stream_seed(seed, 0))?;
    let m_sq = tune_mt_for_winv(p, target_winv)?;
    let squeezed = phase_detection(p, psi, true, m_sq, trials, stream_seed(seed, 1))?;
    Ok(PhaseDetectionResult {
        psi,
        n: p.ensemble.n_effective,
        css,
        squeezed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: f64,
    pub m_t: f64,
    pub winv_model: f64,
    pub r: f64,
    pub contrast: f64,
    pub winv: f64,
    /// Squeezed phase variance `W/N`, rad².
    pub dtheta2: f64,
    /// Unentangled phase resolution from the simulated projection noise, rad.
    pub sql_dtheta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub rows: Vec<ScalingRow>,
    pub squeezed_slope: f64,
    pub squeezed_slope_se: f64,
    pub sql_slope: f64,
    pub sql_slope_se: f64,
}

/// Optimized squeezing versus atom number with log-log slopes.
pub fn n_scaling(p: &SimParams, n_list: &[f64], trials: usize, per_decade: usize, seed: u64) -> Result<ScalingResult> {
    let mut ns = n_list.to_vec();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    if ns.len() < 3 {
        return Err(SimError::Fit(format!("slope fit needs at least 3 atom numbers, got {}", ns.len())));
    }
    if ns[ns.len() - 1] < 2.0 * ns[0] {
        return Err(SimError::Domain("atom numbers must span at least a factor of 2".into()));
    }
    let protocol = parse_protocol(SQUEEZING_PROTOCOL)?;
    let mut rows = Vec::with_capacity(ns.len());
    for (i, &n) in ns.iter().enumerate() {
        let mut q = p.with_atoms(n);
        let (m_t, winv_model) = optimize_winv(&q, 1e2, 1e7, per_decade)?;
        q.probe.m_t = m_t;
        let rs = run_trials(&protocol, &q, trials, stream_seed(seed, i as u64))?;
        let r = spin_noise_reduction(&rs, "Nf", "Np")?;
        let contrast = contrast_model(m_t, &q);
        let winv = spectroscopic_enhancement(r, contrast, q.ensemble.initial_contrast)?;
        let jz: Vec<f64> = rs.trials.iter().filter_map(|t| t.get("Nd").map(|o| o.true_jz)).collect();
        let sql_dtheta = sample_variance(&jz)?.sqrt() / (n / 2.0);
        rows.push(ScalingRow {
            n,
            m_t,
            winv_model,
            r,
            contrast,
            winv,
            dtheta2: 1.0 / (winv * n),
            sql_dtheta,
        });
    }
    let ln_n: Vec<f64> = rows.iter().map(|r| r.n.ln()).collect();
    let ln_sq: Vec<f64> = rows.iter().map(|r| r.dtheta2.ln()).collect();
    let ln_sql: Vec<f64> = rows.iter().map(|r| r.sql_dtheta.ln()).collect();
    let (_, squeezed_slope, squeezed_slope_se) = linear_fit(&ln_n, &ln_sq)?;
    let (_, sql_slope, sql_slope_se) = linear_fit(&ln_n, &ln_sql)?;
    Ok(ScalingResult {
        rows,
        squeezed_slope,
        squeezed_slope_se,
        sql_slope,
        sql_slope_se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamanCalibration {
    pub n: f64,
    pub m_t_grid: Vec<f64>,
    /// Mean dressed-frequency readings of the ↓ preparation, Hz.
    pub down_means: Vec<f64>,
    pub up_means: Vec<f64>,
    /// Fitted change per transmitted photon, Hz.
    pub down_slope: f64,
    pub down_slope_se: f64,
    pub up_slope: f64,
    pub up_slope_se: f64,
}

fn raman_protocol(up: bool, m_scatter: f64, m_read: f64) -> Protocol {
    let mut steps = vec![Step::OpticalPump(AtomState::Down)];
    if up {
        steps.push(pulse(PI, 0.0));
    }
    if m_scatter > 0.0 {
        steps.push(probe("scatter", m_scatter));
    }
    if up {
        steps.push(pulse(PI, 0.0));
    } else {
        steps.push(Step::Wait(1e-3));
    }
    steps.push(probe("read", m_read));
    Protocol { steps }
}

/// Dressed-frequency change per transmitted scattering photon for atoms
/// prepared in ↓, and for atoms prepared in ↑ and swapped before readout.
/// Atoms reaching |1⟩ are returned to ↑.
pub fn raman_calibration(p: &SimParams, m_t_grid: &[f64], trials: usize, seed: u64) -> Result<RamanCalibration> {
    if m_t_grid.is_empty() {
        return Err(SimError::Domain("calibration grid is empty".into()));
    }
    if m_t_grid.iter().any(|m| !(*m >= 0.0)) {
        return Err(SimError::Domain("calibration photon numbers must be non-negative".into()));
    }
    let mut q = *p;
    q.model.repump_one_to_up = true;
    let m_read = q.probe.m_t;
    let run = |up: bool| -> Result<Vec<f64>> {
        m_t_grid
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let rs = run_trials(&raman_protocol(up, m, m_read), &q, trials, stream_seed(seed, 2 * i as u64 + up as u64))?;
                let f: Vec<f64> = rs.trials.iter().filter_map(|t| t.get("read").map(|o| o.frequency_hz)).collect();
                Ok(mean(&f))
            })
            .collect()
    };
    let down_means = run(false)?;
    let up_means = run(true)?;
    let (_, down_slope, down_slope_se) = linear_fit(m_t_grid, &down_means)?;
    let (_, up_slope, up_slope_se) = linear_fit(m_t_grid, &up_means)?;
    Ok(RamanCalibration {
        n: q.ensemble.n_effective,
        m_t_grid: m_t_grid.to_vec(),
        down_means,
        up_means,
        down_slope,
        down_slope_se,
        up_slope,
        up_slope_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::REFERENCE_MT;

    #[test]
    fn contrast_model_follows_scattering_law() {
        let p = SimParams::default();
        let c = contrast_model(REFERENCE_MT, &p) / p.ensemble.initial_contrast;
        assert!((c - (-REFERENCE_MT / 4.8e5_f64).exp()).abs() < 0.005, "{c}");
        assert_eq!(contrast_model(0.0, &p), p.ensemble.initial_contrast);
    }

    #[test]
    fn excess_calibration_hits_target() {
        let mut p = SimParams::default();
        p.model.excess_contrast_decay = calibrate_excess_decay(&p, REFERENCE_MT, 10.5).unwrap();
        assert!(p.model.excess_contrast_decay > 0.0);
        assert!((analytic_winv(REFERENCE_MT, &p).unwrap() - 10.5).abs() < 1e-9);
    }

    #[test]
    fn tuned_mt_sits_below_optimum() {
        let p = SimParams::default().with_atoms(PHASE_ATOMS);
        let m = tune_mt_for_winv(&p, 7.5).unwrap();
        let (m_opt, _) = optimize_winv(&p, 1e2, 1e7, 20).unwrap();
        assert!(m < m_opt);
        assert!((analytic_winv(m, &p).unwrap() - 7.5).abs() < 1e-6);
        assert!(tune_mt_for_winv(&p, 1e3).is_err());
    }

    #[test]
    fn optimizer_stable_under_refinement() {
        let p = SimParams::default();
        let (_, w20) = optimize_winv(&p, 1e2, 1e7, 20).unwrap();
        let (_, w80) = optimize_winv(&p, 1e2, 1e7, 80).unwrap();
        assert!((w20 / w80 - 1.0).abs() < 0.05);
    }

    #[test]
    fn fringe_fit_recovers_injected_amplitude() {
        let n = 1e5;
        let th: Vec<f64> = (0..8).map(|i| i as f64 * PI / 4.0).collect();
        let y: Vec<f64> = th.iter().map(|t| n / 2.0 * (1.0 + 0.5 * (t - 0.3).cos())).collect();
        let f = fit_fringe(&th, &y, n).unwrap();
        assert!((f.contrast - 0.5).abs() < 1e-12);
        assert!((f.phase - 0.3).abs() < 1e-12);
        assert!(fit_fringe(&th[..3], &y[..3], n).is_err());
    }

    #[test]
    fn histogram_counts_match() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0, 0.5, 10.0];
        let h = Histogram::build(&a, &b, 5);
        assert_eq!(h.applied.iter().sum::<usize>(), 4);
        assert_eq!(h.null.iter().sum::<usize>(), 3);
        assert_eq!(h.edges.len(), 6);
    }

    #[test]
    fn midpoint_classifier() {
        let (t, e) = midpoint_error_rate(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!((t, e), (1.5, 0.0));
        let (_, e) = midpoint_error_rate(&[0.0, 1.0], &[2.0, 3.0]);
        assert_eq!(e, 0.0);
    }

    #[test]
    fn preconditions() {
        let p = SimParams::default();
        let th = [0.0, 1.0, 2.0];
        assert!(contrast_fringe(&p, 0.0, &th, 10, 1).is_err());
        let narrow: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        assert!(contrast_fringe(&p, 0.0, &narrow, 10, 1).is_err());
        assert!(squeezing_sweep(&p, &[], 10, 1).is_err());
        assert!(phase_detection(&p, 0.0, false, 4e4, 10, 1).is_err());
        assert!(n_scaling(&p, &[4.8e5], 10, 20, 1).is_err());
        assert!(raman_calibration(&p, &[], 10, 1).is_err());
    }
}
