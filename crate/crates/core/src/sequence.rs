//! Timed measurement protocols and the seeded trial runner.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::params::SimParams;
use crate::physics::AtomState;
use crate::rng::{rng_from_seed, trial_seed};
use crate::spin::{is_pi_pulse, probe_measure, rotate_with_echo, EnsembleState, MeasurementOutcome, ProbeContext, ProbeModel};
use crate::stats::sample_variance;

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    OpticalPump(AtomState),
    /// Rotation angle and pulse phase, rad.
    MicrowavePulse { angle: f64, phase: f64 },
    /// `m_t = None` uses the configured probe strength.
    Probe { label: String, m_t: Option<f64> },
    Prealign,
    Wait(f64),
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::OpticalPump(AtomState::Up) => write!(f, "pump up"),
            Step::OpticalPump(_) => write!(f, "pump down"),
            Step::MicrowavePulse { angle, phase } => {
                write!(f, "pulse {} {}", angle.to_degrees(), phase.to_degrees())
            }
            Step::Probe { label, m_t: None } => write!(f, "probe {label}"),
            Step::Probe { label, m_t: Some(m) } => write!(f, "probe {label} mt={m}"),
            Step::Prealign => write!(f, "prealign"),
            Step::Wait(t) => write!(f, "wait {t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Protocol {
    pub steps: Vec<Step>,
}

impl Protocol {
    pub fn labels(&self) -> Vec<String> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Probe { label, .. } => Some(label.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.steps.iter().map(|s| format!("{s}\n")).collect()
    }
}

fn parse_num(tok: &str, line: usize, what: &str) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| SimError::Parse {
            line,
            msg: format!("malformed {what} '{tok}'"),
        })
}

/// Parse the line-based protocol format. A `/` also separates steps on one line.
pub fn parse_protocol(text: &str) -> Result<Protocol> {
    let mut steps = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        for part in content.split('/') {
            let toks: Vec<&str> = part.split_whitespace().collect();
            let Some(&kw) = toks.first() else { continue };
            let err = |msg: String| SimError::Parse { line, msg };
            let arity = |n: usize| -> Result<()> {
                if toks.len() != n {
                    return Err(err(format!("'{kw}' takes {} argument(s), got {}", n - 1, toks.len() - 1)));
                }
                Ok(())
            };
            let step = match kw {
                "pump" => {
                    arity(2)?;
                    match toks[1] {
                        "up" => Step::OpticalPump(AtomState::Up),
                        "down" => Step::OpticalPump(AtomState::Down),
                        other => return Err(err(format!("unknown pump target '{other}'"))),
                    }
                }
                "pulse" => {
                    arity(3)?;
                    Step::MicrowavePulse {
                        angle: parse_num(toks[1], line, "angle")?.to_radians(),
                        phase: parse_num(toks[2], line, "phase")?.to_radians(),
                    }
                }
                "probe" => {
                    if !(2..=3).contains(&toks.len()) {
                        return Err(err("'probe' takes a label and an optional mt=<photons>".into()));
                    }
                    let label = toks[1].to_string();
                    let m_t = match toks.get(2) {
                        Some(t) => {
                            let v = t
                                .strip_prefix("mt=")
                                .ok_or_else(|| err(format!("expected mt=<photons>, got '{t}'")))?;
                            Some(parse_num(v, line, "photon number")?)
                        }
                        None => None,
                    };
                    if !seen.insert(label.clone()) {
                        return Err(err(format!("duplicate probe label '{label}'")));
                    }
                    Step::Probe { label, m_t }
                }
                "prealign" => {
                    arity(1)?;
                    Step::Prealign
                }
                "wait" => {
                    arity(2)?;
                    let t = parse_num(toks[1], line, "duration")?;
                    if t < 0.0 {
                        return Err(err("wait duration must be non-negative".into()));
                    }
                    Step::Wait(t)
                }
                other => return Err(err(format!("unknown step '{other}'"))),
            };
            steps.push(step);
        }
    }
    Ok(Protocol { steps })
}

/// Outcomes of one trial, in protocol order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub outcomes: Vec<(String, MeasurementOutcome)>,
    /// Probe detuning left by the last prealignment, Hz.
    pub detuning_hz: f64,
}

impl TrialRecord {
    pub fn get(&self, label: &str) -> Option<&MeasurementOutcome> {
        self.outcomes.iter().find(|(l, _)| l == label).map(|(_, o)| o)
    }

    pub fn true_jz_trace(&self) -> Vec<f64> {
        self.outcomes.iter().map(|(_, o)| o.true_jz).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub params: SimParams,
    pub master_seed: u64,
    pub labels: Vec<String>,
    pub trials: Vec<TrialRecord>,
}

impl RecordSet {
    pub fn column(&self, label: &str) -> Result<Vec<f64>> {
        self.trials
            .iter()
            .map(|t| {
                t.get(label)
                    .map(|o| o.n_up)
                    .ok_or_else(|| SimError::MissingLabel(label.to_string()))
            })
            .collect()
    }

    /// Per-trial `N_a − N_b`.
    pub fn differences(&self, a: &str, b: &str) -> Result<Vec<f64>> {
        let xa = self.column(a)?;
        let xb = self.column(b)?;
        Ok(xa.iter().zip(&xb).map(|(x, y)| x - y).collect())
    }
}

/// Run a protocol and also return the final state.
pub fn simulate_trial(protocol: &Protocol, model: &ProbeModel, seed: u64) -> Result<(TrialRecord, EnsembleState)> {
    let p = &model.params;
    let mut rng = rng_from_seed(seed);
    let n = p.ensemble.n_effective;
    let ci = p.ensemble.initial_contrast;
    let mut ctx = ProbeContext::new(p, &mut rng);
    let mut state = EnsembleState::pumped(n, AtomState::Down, ci)?;
    let mut outcomes = Vec::new();
    for step in &protocol.steps {
        match step {
            Step::Probe { label, m_t } => {
                let m = m_t.unwrap_or(p.probe.m_t);
                let (out, next) = probe_measure(&state, m, model, &mut ctx, &mut rng)?;
                state = next;
                outcomes.push((label.clone(), out));
                continue;
            }
            Step::OpticalPump(target) => {
                state = EnsembleState::pumped(n, *target, ci)?;
            }
            Step::MicrowavePulse { angle, phase } => {
                let (mut a, mut ph) = (*angle, *phase);
                if p.model.rotation_amplitude_noise > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    a *= 1.0 + p.model.rotation_amplitude_noise * z;
                }
                if p.model.rotation_phase_noise > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    ph += p.model.rotation_phase_noise * z;
                }
                state = rotate_with_echo(&state, a, ph, is_pi_pulse(*angle));
            }
            Step::Prealign => ctx.prealign(p, &mut rng),
            Step::Wait(_) => {}
        }
        ctx.probe_off();
    }
    let record = TrialRecord {
        seed,
        outcomes,
        detuning_hz: ctx.detuning / (2.0 * PI),
    };
    Ok((record, state))
}

pub fn run_trial(protocol: &Protocol, params: &SimParams, seed: u64) -> Result<TrialRecord> {
    let model = ProbeModel::new(params)?;
    Ok(simulate_trial(protocol, &model, seed)?.0)
}

/// Worker count requested through `SQUEEZE_SIM_THREADS`, if any.
pub fn env_threads() -> Option<usize> {
    std::env::var("SQUEEZE_SIM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub fn run_trials(protocol: &Protocol, params: &SimParams, n_trials: usize, master_seed: u64) -> Result<RecordSet> {
    run_trials_with_threads(protocol, params, n_trials, master_seed, env_threads())
}

/// Same as [`run_trials`] on a pool of `threads` workers (`None`: the global pool).
pub fn run_trials_with_threads(
    protocol: &Protocol,
    params: &SimParams,
    n_trials: usize,
    master_seed: u64,
    threads: Option<usize>,
) -> Result<RecordSet> {
    if n_trials == 0 {
        return Err(SimError::Domain("need at least one trial".into()));
    }
    let model = ProbeModel::new(params)?;
    let work = || -> Result<Vec<TrialRecord>> {
        (0..n_trials as u64)
            .into_par_iter()
            .map(|i| simulate_trial(protocol, &model, trial_seed(master_seed, i)).map(|r| r.0))
            .collect()
    };
    let trials = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| SimError::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    Ok(RecordSet {
        params: *params,
        master_seed,
        labels: protocol.labels(),
        trials,
    })
}

/// `Var(N_final − N_pre)/(N/4)`.
pub fn spin_noise_reduction(rs: &RecordSet, final_label: &str, pre_label: &str) -> Result<f64> {
    if rs.trials.len() < 2 {
        return Err(SimError::Domain("spin noise reduction needs at least 2 trials".into()));
    }
    let d = rs.differences(final_label, pre_label)?;
    Ok(sample_variance(&d)? / (rs.params.ensemble.n_effective / 4.0))
}

/// Squeezing protocol with the N↓ reference, π echo and the final measurement.
pub const SQUEEZING_PROTOCOL: &str = "\
prealign
pump down
pulse 90 0
probe Nd
pulse 180 0
probe Np
probe Nf
";
