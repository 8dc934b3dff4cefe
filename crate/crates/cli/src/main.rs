use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use squeezesim::budget::BudgetReport;
use squeezesim::config::{load_config, RunConfig};
use squeezesim::experiments::{
    contrast_fringe, log_grid, n_scaling, phase_detection_pair, raman_calibration, squeezing_sweep, SWEEP_COLUMNS,
};
use squeezesim::fit::{fit_r_with, Bootstrap, FitPoint};
use squeezesim::records::write_records_path;
use squeezesim::sequence::{parse_protocol, run_trials};
use squeezesim::SimParams;

#[derive(Parser)]
#[command(name = "squeezesim", version, about = "Cavity spin-squeezing Monte Carlo simulator", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Trials per point (overrides the config).
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Spin-noise reduction and W⁻¹ versus probe strength.
    Sweep(Common),
    /// Single-shot phase detection with and without pre-measurement.
    PhaseDetect(Common),
    /// Optimized squeezing versus atom number.
    Scaling(Common),
    /// Contrast from a readout fringe.
    Fringe(Common),
    /// Analytic noise budget at the configured probe strength.
    Budget(Common),
    /// Probe-induced population change calibration.
    CalibrateRaman(Common),
    /// Fit the four-term R model to a sweep CSV.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Sweep CSV with `mt` and `R` columns.
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run an arbitrary protocol file and write the trial records.
    Run {
        #[command(flatten)]
        common: Common,
        /// Protocol file.
        #[arg(long)]
        protocol: PathBuf,
    },
}

struct Ctx {
    cfg: RunConfig,
    params: SimParams,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.master_seed = s;
        }
        if let Some(o) = &c.out {
            cfg.output_dir = o.clone();
        }
        if let Some(t) = c.trials {
            if t < 2 {
                bail!("--trials must be at least 2");
            }
            let e = &mut cfg.experiment;
            e.trials = t;
            e.phase_trials = t;
            e.raman_trials = t;
        }
        let params = cfg.params()?;
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            params,
            out,
        })
    }

    fn seed(&self) -> u64 {
        self.cfg.master_seed
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Echoed config plus the JSON sidecar for one command.
    fn finish(&self, command: &str, trials: Option<usize>, result: Value) -> Result<()> {
        let echo = self.cfg.echo()?;
        self.write(&format!("{command}.config.toml"), &echo)?;
        let meta = json!({
            "command": command,
            "master_seed": self.seed(),
            "trials": trials,
            "config_sha256": self.cfg.content_hash()?,
            "params": self.params,
            "result": result,
        });
        let path = self.write(&format!("{command}.json"), &serde_json::to_string_pretty(&meta)?)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn csv_line(vals: &[f64]) -> String {
    let v: Vec<String> = vals.iter().map(|x| format!("{x:.16e}")).collect();
    v.join(",") + "\n"
}

fn sweep(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let e = &ctx.cfg.experiment;
    let trials = e.trials;
    let grid = log_grid(e.mt_min, e.mt_max, e.mt_points);
    let res = squeezing_sweep(&ctx.params, &grid, trials, ctx.seed())?;
    ctx.write("sweep.csv", &res.to_csv())?;
    let best = res.best().context("empty sweep")?;
    let best_r = res.best_r().context("empty sweep")?;
    println!(
        "max W^-1 = {:.2} at M_t = {:.3e}; max R^-1 = {:.2} at M_t = {:.3e}",
        best.winv,
        best.m_t,
        1.0 / best_r.r,
        best_r.m_t
    );
    ctx.finish(
        "sweep",
        Some(trials),
        json!({
            "n": res.n,
            "max_winv": best.winv,
            "max_winv_mt": best.m_t,
            "max_r_inv": 1.0 / best_r.r,
            "max_r_inv_mt": best_r.m_t,
            "excess_contrast_decay": ctx.params.model.excess_contrast_decay,
        }),
    )
}

fn phase_detect(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let e = &ctx.cfg.experiment;
    let trials = e.phase_trials;
    let p = ctx.params.with_atoms(e.phase_atoms);
    let res = phase_detection_pair(&p, e.psi_mrad * 1e-3, e.target_winv, trials, ctx.seed())?;
    let mut csv = String::from("case,bin_lo,bin_hi,applied,null\n");
    for (name, case) in [("css", &res.css), ("squeezed", &res.squeezed)] {
        let h = &case.histogram;
        for k in 0..h.applied.len() {
            csv.push_str(&format!(
                "{name},{:.16e},{:.16e},{},{}\n",
                h.edges[k],
                h.edges[k + 1],
                h.applied[k],
                h.null[k]
            ));
        }
    }
    ctx.write("phase_detect.csv", &csv)?;
    println!(
        "error rate: {:.4} without pre-measurement, {:.4} with (M_t = {:.3e})",
        res.css.error_rate, res.squeezed.error_rate, res.squeezed.m_t
    );
    ctx.finish(
        "phase_detect",
        Some(trials),
        json!({
            "psi": res.psi,
            "n": res.n,
            "css": {"m_t": res.css.m_t, "threshold": res.css.threshold, "error_rate": res.css.error_rate},
            "squeezed": {"m_t": res.squeezed.m_t, "threshold": res.squeezed.threshold, "error_rate": res.squeezed.error_rate},
        }),
    )
}

fn scaling(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let e = &ctx.cfg.experiment;
    let trials = e.trials;
    let res = n_scaling(&ctx.params, &e.scaling_atoms, trials, e.scaling_per_decade, ctx.seed())?;
    let mut csv = String::from("n,mt,Winv_model,R,C,Winv,dtheta2,sql_dtheta\n");
    for r in &res.rows {
        csv.push_str(&csv_line(&[r.n, r.m_t, r.winv_model, r.r, r.contrast, r.winv, r.dtheta2, r.sql_dtheta]));
    }
    ctx.write("scaling.csv", &csv)?;
    println!(
        "slope of squeezed variance: {:.3} ± {:.3}; slope of SQL resolution: {:.3} ± {:.3}",
        res.squeezed_slope, res.squeezed_slope_se, res.sql_slope, res.sql_slope_se
    );
    ctx.finish(
        "scaling",
        Some(trials),
        json!({
            "squeezed_slope": res.squeezed_slope,
            "squeezed_slope_se": res.squeezed_slope_se,
            "sql_slope": res.sql_slope,
            "sql_slope_se": res.sql_slope_se,
        }),
    )
}

fn fringe(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let e = &ctx.cfg.experiment;
    let trials = e.trials;
    let k = e.fringe_points;
    let theta: Vec<f64> = (0..k).map(|i| 2.0 * PI * i as f64 / k as f64).collect();
    let ci = ctx.params.ensemble.initial_contrast;
    let mut csv = String::from("mt,C,C_err,C_over_Ci\n");
    let mut fits = Vec::new();
    for (i, m) in [0.0, e.fringe_mt].into_iter().enumerate() {
        let f = contrast_fringe(&ctx.params, m, &theta, trials, squeezesim::rng::stream_seed(ctx.seed(), i as u64))?;
        csv.push_str(&csv_line(&[m, f.contrast, f.stderr, f.contrast / ci]));
        println!("M_t = {m:.3e}: C = {:.4} ± {:.4}", f.contrast, f.stderr);
        fits.push(json!({"m_t": m, "fit": f}));
    }
    ctx.write("fringe.csv", &csv)?;
    ctx.finish("fringe", Some(trials), json!({ "fits": fits }))
}

fn budget(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let report = BudgetReport::compute(ctx.cfg.experiment.budget_mt, &ctx.params)?;
    ctx.write("budget.csv", &report.to_csv())?;
    for r in report.rows() {
        println!("{:<34} {:>12.4e}", r.term, r.r_inv);
    }
    ctx.finish("budget", None, serde_json::to_value(&report)?)
}

fn calibrate_raman(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let e = &ctx.cfg.experiment;
    let trials = e.raman_trials;
    let p = ctx.params.with_atoms(e.raman_atoms);
    let res = raman_calibration(&p, &e.raman_mt_grid, trials, ctx.seed())?;
    let mut csv = String::from("mt,down_hz,up_hz\n");
    for i in 0..res.m_t_grid.len() {
        csv.push_str(&csv_line(&[res.m_t_grid[i], res.down_means[i], res.up_means[i]]));
    }
    ctx.write("calibrate_raman.csv", &csv)?;
    println!(
        "down preparation: {:.3} ± {:.3} Hz/photon; up preparation: {:.3} ± {:.3} Hz/photon",
        res.down_slope, res.down_slope_se, res.up_slope, res.up_slope_se
    );
    ctx.finish("calibrate_raman", Some(trials), serde_json::to_value(&res)?)
}

/// `(mt, R)` pairs from a sweep CSV.
fn read_sweep(path: &Path) -> Result<Vec<FitPoint>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .with_context(|| format!("{}: missing column `{name}`", path.display()))
    };
    let (im, ir) = (col(SWEEP_COLUMNS[0])?, col(SWEEP_COLUMNS[1])?);
    let mut pts = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let m: f64 = rec[im].trim().parse().context("bad mt value")?;
        let r: f64 = rec[ir].trim().parse().context("bad R value")?;
        pts.push(FitPoint::new(m, r));
    }
    Ok(pts)
}

fn fit(c: &Common, input: &Path) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let e = &ctx.cfg.experiment;
    let pts = read_sweep(input)?;
    let res = fit_r_with(&pts, e.bootstrap_resamples, e.confidence, Bootstrap::Residual, ctx.seed())?;
    let names = ["r_psn", "r_tf", "r_q", "r_c"];
    let (c0, lo, hi) = (res.coeffs.as_array(), res.lower.as_array(), res.upper.as_array());
    for j in 0..4 {
        println!("{:<6} {:>12.4e}  [{:.4e}, {:.4e}]", names[j], c0[j], lo[j], hi[j]);
    }
    ctx.write("fit_coefficients.json", &serde_json::to_string_pretty(&res)?)?;
    ctx.finish("fit", None, serde_json::to_value(&res)?)
}

fn run(c: &Common, protocol: &Path) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let text = fs::read_to_string(protocol).with_context(|| format!("reading {}", protocol.display()))?;
    let proto = parse_protocol(&text)?;
    let trials = ctx.cfg.experiment.trials;
    let rs = run_trials(&proto, &ctx.params, trials, ctx.seed())?;
    let path = ctx.out.join("records.csv");
    write_records_path(&rs, &path)?;
    println!("wrote {} ({} trials)", path.display(), rs.trials.len());
    ctx.finish("run", Some(trials), json!({ "protocol": proto.to_text(), "labels": rs.labels }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Sweep(c) => sweep(c),
        Command::PhaseDetect(c) => phase_detect(c),
        Command::Scaling(c) => scaling(c),
        Command::Fringe(c) => fringe(c),
        Command::Budget(c) => budget(c),
        Command::CalibrateRaman(c) => calibrate_raman(c),
        Command::Fit { common, input } => fit(common, input),
        Command::Run { common, protocol } => run(common, protocol),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
