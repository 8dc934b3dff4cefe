//! Acceptance report: one line per criterion with the measured value, the
//! pinned tolerance and the runtime. Exits non-zero on any unexpected failure.

use std::f64::consts::TAU;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use squeezesim::budget::*;
use squeezesim::config::RunConfig;
use squeezesim::experiments::*;
use squeezesim::fit::{fit_coeffs, FitPoint};
use squeezesim::physics::{alphas, qpn_frequency_fluctuation, scattered_ratio};
use squeezesim::sequence::{parse_protocol, run_trials_with_threads, SQUEEZING_PROTOCOL};
use squeezesim::spin::*;
use squeezesim::SimParams;

/// Criteria whose failure is analysed in the decisions ledger.
const KNOWN_FAILURES: &[u32] = &[7];

struct Report {
    unexpected: Vec<u32>,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String, t: Instant) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let note = if !pass && KNOWN_FAILURES.contains(&id) { " (known)" } else { "" };
        println!("[{tag}] {id}. {name}: {detail} [{:.3} s]{note}", t.elapsed().as_secs_f64());
        if !pass && !KNOWN_FAILURES.contains(&id) {
            self.unexpected.push(id);
        }
    }
}

fn within(v: f64, lo: f64, hi: f64) -> bool {
    v >= lo && v <= hi
}

fn criterion_1(r: &mut Report) {
    let t = Instant::now();
    let q = qpn_frequency_fluctuation(4.8e5, &Default::default()).unwrap() / TAU;
    let pass = (q / 144e3 - 1.0).abs() <= 0.06 && t.elapsed().as_secs_f64() < 1e-3;
    r.line(1, "QPN anchor", pass, format!("{:.1} kHz (144 kHz ± 6%, < 1 ms)", q / 1e3), t);
}

fn criterion_2(r: &mut Report) {
    let t = Instant::now();
    let s = scattered_ratio(2.4e5, &Default::default()).unwrap();
    let pass = (s - 1.0).abs() <= 0.1 && t.elapsed().as_secs_f64() < 1e-3;
    r.line(2, "Scattering anchor", pass, format!("M_s/M_t = {s:.4} (1.0 ± 0.1, < 1 ms)"), t);
}

fn criterion_3(r: &mut Report) {
    let t = Instant::now();
    let p = SimParams::default();
    let n = p.ensemble.n_effective;
    let total = 1.0 / model_r(REFERENCE_MT, &p.noise).unwrap();
    let a = alphas(n / 2.0, &p.cavity, p.model.one_coupling_ratio).unwrap();
    let m_s = REFERENCE_MT * scattered_ratio(n / 2.0, &p.cavity).unwrap();
    let (ext_q, ext_c) = recoil_noise(m_s, p.probe.ms_classical_frac, n, p.cavity.recoil_shift_angular(), a.up).unwrap();
    let opto = opto_noise_term(REFERENCE_MT, n, &p.model.opto).unwrap();
    let pop_q = pop_noise_quantum(m_s, n, &p.transition, &a).unwrap();
    let (ext_q, ext_c, opto, pop_q) = (1.0 / ext_q, 1.0 / ext_c, 1.0 / opto, 1.0 / pop_q);
    let pass = (total - 16.7).abs() <= 2.0
        && within(ext_q, 4.3e5, 5.3e5)
        && within(ext_c, 4.0e3, 5.0e3)
        && (opto - 620.0).abs() < 1.0
        && within(pop_q, 1.1e3, 2.6e3)
        && t.elapsed().as_secs_f64() < 1.0;
    r.line(
        3,
        "Budget synthesis",
        pass,
        format!(
            "R^-1 = {total:.2} (16.7 ± 2); R_ext,q^-1 = {ext_q:.3e} ([4.3, 5.3]e5); R_ext,c^-1 = {ext_c:.0} ([4.0, 5.0]e3); \
             R_o^-1 = {opto:.1} (620); R_pop,q^-1 = {pop_q:.0} ([1.1, 2.6]e3)"
        ),
        t,
    );
}

fn criterion_4(r: &mut Report) {
    let t = Instant::now();
    let mut p = SimParams::default();
    p.model.excess_contrast_decay = calibrate_excess_decay(&p, REFERENCE_MT, 10.5).unwrap();
    let sw = squeezing_sweep(&p, &log_grid(1e3, 1e5, 15), 4000, 2024).unwrap();
    let br = sw.best_r().unwrap();
    let bw = sw.best().unwrap();
    let r_inv = 1.0 / br.r;
    let pass = (r_inv - 16.0).abs() <= 3.0
        && within(br.m_t, 2e4, 8e4)
        && within(bw.winv, 9.0, 13.5)
        && t.elapsed().as_secs_f64() < 300.0;
    r.line(
        4,
        "Monte Carlo optimum",
        pass,
        format!(
            "max R^-1 = {r_inv:.2} at M_t = {:.3e} (16 ± 3 near 4e4); max W^-1 = {:.2} at M_t = {:.3e} ([9, 13.5]); \
             excess decay x = {:.2}; 15 points x 4000 trials",
            br.m_t, bw.winv, bw.m_t, p.model.excess_contrast_decay
        ),
        t,
    );
}

fn criterion_5(r: &mut Report) {
    let t = Instant::now();
    let mut p = SimParams::default();
    p.model.excess_contrast_decay = calibrate_excess_decay(&p, REFERENCE_MT, 10.5).unwrap();
    let p = p.with_atoms(PHASE_ATOMS);
    let res = phase_detection_pair(&p, 2.3e-3, 7.5, 10_000, 77).unwrap();
    let (a, b) = (res.css.error_rate, res.squeezed.error_rate);
    let pass = within(a, 0.20, 0.30) && within(b, 0.012, 0.032) && t.elapsed().as_secs_f64() < 120.0;
    r.line(
        5,
        "Phase detection",
        pass,
        format!(
            "error {a:.4} without pre-measurement ([0.20, 0.30]); {b:.4} with, at M_t = {:.3e} for W^-1 = 7.5 \
             ([0.012, 0.032]); 10^4 trials per population",
            res.squeezed.m_t
        ),
        t,
    );
}

fn criterion_6(r: &mut Report) {
    let t = Instant::now();
    let mut p = SimParams::default();
    p.model.excess_contrast_decay = calibrate_excess_decay(&p, REFERENCE_MT, 10.5).unwrap();
    let s = n_scaling(&p, &[6e4, 1.2e5, 2.4e5, 4.8e5], 4000, 20, 606).unwrap();
    let pass = within(s.squeezed_slope, -2.2, -1.7)
        && (s.sql_slope + 0.5).abs() <= 0.05
        && t.elapsed().as_secs_f64() < 900.0;
    r.line(
        6,
        "Scaling",
        pass,
        format!(
            "squeezed variance slope {:.3} ± {:.3} ([-2.2, -1.7]); SQL slope {:.3} ± {:.3} (-0.5 ± 0.05)",
            s.squeezed_slope, s.squeezed_slope_se, s.sql_slope, s.sql_slope_se
        ),
        t,
    );
}

fn criterion_7(r: &mut Report) {
    let t = Instant::now();
    let mut p = SimParams::default();
    p.transition.p_ud = 2.0 / 3.0;
    let n = p.ensemble.n_effective;
    let a = alphas(n / 2.0, &p.cavity, p.model.one_coupling_ratio).unwrap();
    let m_s = REFERENCE_MT * scattered_ratio(n / 2.0, &p.cavity).unwrap();
    let r_inv = 1.0 / pop_noise_quantum(m_s, n, &p.transition, &a).unwrap();
    let pass = (r_inv - 1.9).abs() <= 0.4;
    r.line(
        7,
        "Legacy comparison",
        pass,
        format!("diffusion-limited R^-1 = {r_inv:.2} with p_ud = 2/3 at M_t = 4.1e4 (1.9 ± 0.4)"),
        t,
    );
}

fn random_sequence_checks(model: &ProbeModel, sequences: usize) -> (usize, usize) {
    let p = &model.params;
    let (mut heis_bad, mut pop_bad) = (0, 0);
    for k in 0..sequences as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        let mut ctx = ProbeContext::new(p, &mut rng);
        let mut s = prepare_css(p.ensemble.n_effective, &p.ensemble).unwrap();
        for _ in 0..rng.random_range(1..8) {
            if rng.random::<bool>() {
                s = rotate(&s, rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0));
                ctx.probe_off();
            } else {
                let mt = 10f64.powf(rng.random_range(3.0..5.3));
                s = probe_measure(&s, mt, model, &mut ctx, &mut rng).unwrap().1;
            }
            heis_bad += !heisenberg_check(&s) as usize;
            let total = s.pop_up() + s.pop_down() + s.pop_one;
            pop_bad += ((total - s.n_total).abs() > 1e-9 * s.n_total || s.pop_one < 0.0) as usize;
        }
    }
    (heis_bad, pop_bad)
}

fn grid_oracle_worst(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (m0, v0, obs, vn) = (
            rng.random_range(-50.0..50.0),
            rng.random_range(0.5..400.0),
            rng.random_range(-80.0..80.0),
            rng.random_range(0.5..400.0),
        );
        let (m, v) = gaussian_update(m0, v0, obs, vn);
        let spread = 12.0 * f64::max(v0, vn).sqrt();
        let (lo, hi) = (f64::min(m0, obs) - spread, f64::max(m0, obs) + spread);
        let k = 200_001;
        let h = (hi - lo) / (k - 1) as f64;
        let logp = |x: f64| -0.5 * (x - m0).powi(2) / v0 - 0.5 * (obs - x).powi(2) / vn;
        let peak = (0..k).map(|i| logp(lo + h * i as f64)).fold(f64::NEG_INFINITY, f64::max);
        let (mut w, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for i in 0..k {
            let x = lo + h * i as f64;
            let q = (logp(x) - peak).exp();
            w += q;
            s1 += q * x;
            s2 += q * x * x;
        }
        let gm = s1 / w;
        let gv = s2 / w - gm * gm;
        worst = worst.max((m - gm).abs() / (gm.abs() + v.sqrt())).max((v / gv - 1.0).abs());
    }
    worst
}

fn fit_recovery_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let truth = NoiseCoeffs {
            r_psn: rng.random_range(100.0..5000.0),
            r_tf: rng.random_range(1e-3..0.1),
            r_q: rng.random_range(1e-9..1e-6),
            r_c: rng.random_range(1e-13..1e-10),
        };
        let pts: Vec<FitPoint> = log_grid(1e3, 1e5, 10)
            .into_iter()
            .map(|m| FitPoint::new(m, model_r(m, &truth).unwrap()))
            .collect();
        let got = fit_coeffs(&pts).unwrap();
        for (g, t) in got.as_array().iter().zip(truth.as_array()) {
            worst = worst.max(((g - t) / t).abs());
        }
    }
    worst
}

fn criterion_8(r: &mut Report) {
    let t = Instant::now();
    let model = ProbeModel::new(&SimParams::default()).unwrap();
    let (heis_bad, pop_bad) = random_sequence_checks(&model, 1000);
    let oracle = grid_oracle_worst(200);
    let fit = fit_recovery_worst();

    let proto = parse_protocol(SQUEEZING_PROTOCOL).unwrap();
    let params = SimParams::default();
    let reference = run_trials_with_threads(&proto, &params, 256, 31, Some(1)).unwrap();
    let deterministic = [2, 3, 7, 16]
        .iter()
        .all(|&k| run_trials_with_threads(&proto, &params, 256, 31, Some(k)).unwrap() == reference);

    let cfg = RunConfig::from_toml("master_seed = 4\n[model]\nexcess_calibration_winv = 10.5\n[probe]\nm_t = 3.3e4\n").unwrap();
    let echo = cfg.echo().unwrap();
    let again = RunConfig::from_toml(&echo).unwrap();
    let fixed = again.echo().unwrap() == echo && again.params().unwrap() == cfg.params().unwrap();

    let pass = heis_bad == 0 && pop_bad == 0 && oracle < 1e-3 && fit < 1e-6 && deterministic && fixed;
    r.line(
        8,
        "Property suites",
        pass,
        format!(
            "uncertainty violations {heis_bad}/1000 sequences; conservation violations {pop_bad}; \
             grid-oracle worst rel. error {oracle:.1e} (< 1e-3); fit recovery worst rel. error {fit:.1e}; \
             thread determinism {deterministic}; config fixed point {fixed}"
        ),
        t,
    );
}

fn main() -> ExitCode {
    let mut r = Report { unexpected: Vec::new() };
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);
    criterion_4(&mut r);
    criterion_5(&mut r);
    criterion_6(&mut r);
    criterion_7(&mut r);
    criterion_8(&mut r);
    if r.unexpected.is_empty() {
        println!("acceptance: all criteria met except known failures {KNOWN_FAILURES:?}");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: unexpected failures {:?}", r.unexpected);
        ExitCode::FAILURE
    }
}
