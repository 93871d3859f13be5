use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use hypokin::constants::{
    check_weight_conditions, fp2_constant, gap_bgk, gap_bound_fermion, measure_constants,
    numeric_gap, select_weights_from, weight_inputs, CoercivityConstants, Metric, WeightInputs,
};
use hypokin::hypocoercivity::{FitResult, HigherOrderWeights, LyapunovWeights};
use hypokin::models::EquilibriumSpec;
use hypokin::solver::{run, RunOutput};
use hypokin::{Model, ModelKind, ModelSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Config, SweepPoint};
use crate::error::CliError;
use crate::output::{csv_field, ensure_dir, fmt_f64, series_csv, write_json, write_text};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
struct RunSummary {
    steps: usize,
    tau_fit: Option<f64>,
    fit: Option<FitResult>,
    fit_inconclusive: bool,
    monotone_violations: usize,
    f2_violations: Option<usize>,
    energy_violations: Option<usize>,
    l2_violations: usize,
    initial_projected: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config: &'a Config,
    equilibrium: &'a EquilibriumSpec,
    constants: &'a CoercivityConstants,
    weights: &'a LyapunovWeights,
    higher_order: Option<&'a HigherOrderWeights>,
    summary: RunSummary,
    wall_clock_seconds: f64,
}

/// Runs one simulation and writes `manifest.json` and `series.csv` to `out`.
pub fn simulate(cfg: &Config, out: &Path) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let result = run(&cfg.run_config())?;
    let elapsed = t0.elapsed().as_secs_f64();
    ensure_dir(out)?;
    let r = &result.report;
    write_text(&out.join("series.csv"), &series_csv(r))?;
    let manifest = Manifest {
        tool: "hypokin",
        version: VERSION,
        command: "simulate",
        seed: cfg.run.seed,
        config: cfg,
        equilibrium: &result.equilibrium,
        constants: &result.constants,
        weights: &result.weights,
        higher_order: result.higher_order.as_ref(),
        summary: RunSummary {
            steps: r.steps,
            tau_fit: r.tau_fit(),
            fit: r.fit,
            fit_inconclusive: r.fit_inconclusive,
            monotone_violations: r.monotone_violations,
            f2_violations: r.f2_violations,
            energy_violations: r.energy_violations,
            l2_violations: r.l2_violations,
            initial_projected: result.initial_projected,
        },
        wall_clock_seconds: elapsed,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(result)
}

pub fn simulate_cmd(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let res = simulate(cfg, out)?;
    if res.initial_projected {
        eprintln!("warning: the initial condition had a kernel component; it was projected out");
    }
    let r = &res.report;
    match (&r.fit, r.fit_inconclusive) {
        (Some(f), false) => println!("tau_fit = {:.6} (r2 = {:.4}, t in [{}, {}])", f.tau, f.r2, f.t_start, f.t_end),
        (Some(f), true) => println!("fit inconclusive: tau = {:.6}, r2 = {:.4}", f.tau, f.r2),
        (None, _) => println!("fit inconclusive: too few positive samples"),
    }
    println!("F1 monotonicity violations: {}", r.monotone_violations);
    if let Some(v) = r.f2_violations {
        println!("F2 monotonicity violations: {v}");
    }
    if let Some(v) = r.energy_violations {
        println!("energy violations: {v}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct GapRow {
    pub model: String,
    pub kind: ModelKind,
    pub kappa: f64,
    pub epsilon: i32,
    pub rho: f64,
    pub metric: Metric,
    pub analytic_bound: Option<f64>,
    pub numeric_gap: f64,
    pub margin: Option<f64>,
    /// Exact value the numeric gap approximates, where known.
    pub reference: Option<f64>,
    /// Measured constant of the Fokker-Planck Dirichlet-form inequality.
    pub fp2_constant: Option<f64>,
    pub fp2_stated: Option<f64>,
}

fn label(m: &ModelSpec) -> String {
    match m.kind {
        ModelKind::Relaxation => format!("relaxation(kappa={})", m.kappa),
        ModelKind::FokkerPlanck => "fokker_planck".into(),
        ModelKind::SemiClassical => {
            let stat = match m.epsilon {
                1 => "fermion",
                -1 => "boson",
                _ => "classical",
            };
            format!("semi_classical {stat}(kappa={}, rho={})", m.kappa, m.rho)
        }
    }
}

pub fn gap_row(spec: &ModelSpec, cfg: &Config) -> Result<GapRow, CliError> {
    let grid = cfg.grid.build()?;
    let model = Model::new(*spec, &grid)?;
    let mut row = GapRow {
        model: label(spec),
        kind: spec.kind,
        kappa: spec.kappa,
        epsilon: spec.epsilon,
        rho: spec.rho,
        metric: Metric::L2,
        analytic_bound: None,
        numeric_gap: 0.0,
        margin: None,
        reference: None,
        fp2_constant: None,
        fp2_stated: None,
    };
    match spec.kind {
        ModelKind::Relaxation => {
            row.analytic_bound = Some(gap_bgk(spec.kappa)?);
            row.reference = row.analytic_bound;
        }
        ModelKind::SemiClassical => match spec.epsilon {
            1 => {
                row.metric = Metric::Lambda;
                row.analytic_bound = Some(gap_bound_fermion(&model)?);
            }
            0 => row.analytic_bound = Some(gap_bgk(spec.kappa)?),
            _ => {}
        },
        ModelKind::FokkerPlanck => {
            row.reference = Some(1.0);
            row.fp2_constant = Some(fp2_constant(&model)?);
            row.fp2_stated = Some(2.0);
        }
    }
    row.numeric_gap = numeric_gap(&model, row.metric)?;
    row.margin = row.analytic_bound.map(|b| row.numeric_gap - b);
    Ok(row)
}

pub fn gap_cmd(cfg: &Config, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let specs = if cfg.gaps.is_empty() { vec![cfg.model] } else { cfg.gaps.clone() };
    let rows = specs
        .iter()
        .map(|s| gap_row(s, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.10}"));
    println!("{:<44} {:>14} {:>14} {:>14}", "model", "bound", "numeric", "margin");
    for r in &rows {
        println!(
            "{:<44} {:>14} {:>14.10} {:>14}",
            r.model,
            opt(r.analytic_bound),
            r.numeric_gap,
            opt(r.margin)
        );
        if let Some(c) = r.fp2_constant {
            println!("  Dirichlet-form constant: measured {c:.10}, stated 2");
        }
    }
    ensure_dir(out)?;
    #[derive(Serialize)]
    struct Gaps<'a> {
        tool: &'static str,
        version: &'static str,
        grid: hypokin::GridSpec,
        rows: &'a [GapRow],
    }
    write_json(
        &out.join("gaps.json"),
        &Gaps {
            tool: "hypokin",
            version: VERSION,
            grid: cfg.grid,
            rows: &rows,
        },
    )?;
    println!("wrote {}", out.join("gaps.json").display());
    Ok(())
}

/// Left-hand side minus right-hand side of each weight condition; the
/// first four must be ≤ −1, the last two < 0 and ≤ 0.
pub fn weight_margins(inp: &WeightInputs, w: &LyapunovWeights) -> [f64; 6] {
    let (a, al, b, g, e) = (w.a, w.alpha, w.beta, w.gamma_mix, w.eta);
    [
        b * inp.c1 - 2.0 * a * inp.lambda,
        inp.c2 * b - g,
        g * inp.c_l / e - b * inp.nu3,
        e * g * inp.c_l - 2.0 * al * inp.lambda,
        g * g - al * b,
        b - al,
    ]
}

pub fn weights_cmd(cfg: &Config, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let (inputs, constants) = match &cfg.weights_input {
        Some(inp) => (*inp, None),
        None => {
            let grid = cfg.grid.build()?;
            let model = Model::new(cfg.model, &grid)?;
            let c = measure_constants(&model, cfg.constants.n_samples, cfg.run.seed)?;
            (weight_inputs(&c), Some(c))
        }
    };
    let w = select_weights_from(&inputs)?;
    let margins = weight_margins(&inputs, &w);
    let checks = check_weight_conditions(&inputs, &w);
    println!("A     = {}", fmt_f64(w.a));
    println!("alpha = {}", fmt_f64(w.alpha));
    println!("beta  = {}", fmt_f64(w.beta));
    println!("gamma = {}", fmt_f64(w.gamma_mix));
    println!("eta   = {}", fmt_f64(w.eta));
    for ((name, ok), m) in checks.iter().zip(margins) {
        println!("{:<40} margin {:>24} {}", name, fmt_f64(m), if *ok { "ok" } else { "VIOLATED" });
    }
    #[derive(Serialize)]
    struct Condition {
        condition: &'static str,
        margin: f64,
        satisfied: bool,
    }
    #[derive(Serialize)]
    struct Weights<'a> {
        tool: &'static str,
        version: &'static str,
        seed: u64,
        inputs: WeightInputs,
        constants: Option<&'a CoercivityConstants>,
        weights: LyapunovWeights,
        conditions: Vec<Condition>,
    }
    let conditions = checks
        .iter()
        .zip(margins)
        .map(|((c, ok), m)| Condition {
            condition: c,
            margin: m,
            satisfied: *ok,
        })
        .collect();
    ensure_dir(out)?;
    write_json(
        &out.join("weights.json"),
        &Weights {
            tool: "hypokin",
            version: VERSION,
            seed: cfg.run.seed,
            inputs,
            constants: constants.as_ref(),
            weights: w,
            conditions,
        },
    )?;
    if checks.iter().all(|(_, ok)| *ok) {
        Ok(())
    } else {
        Err(CliError::Runtime("selected weights violate a condition".into()))
    }
}

struct SweepRow {
    index: usize,
    point: SweepPoint,
    result: Result<(Option<f64>, Option<f64>, usize, bool), String>,
}

pub fn sweep_cmd(cfg: &Config, out: &Path, jobs: Option<usize>) -> Result<(), CliError> {
    let points = cfg.sweep_points()?;
    ensure_dir(out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    let mut rows: Vec<SweepRow> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(index, p)| {
                let dir = out.join(format!("point_{index:03}"));
                let result = simulate(&cfg.at(p), &dir)
                    .map(|o| {
                        let r = o.report;
                        (r.fit.map(|f| f.tau), r.fit.map(|f| f.r2), r.monotone_violations, r.fit_inconclusive)
                    })
                    .map_err(|e| e.to_string());
                SweepRow {
                    index,
                    point: *p,
                    result,
                }
            })
            .collect()
    });
    rows.sort_by_key(|r| r.index);

    let mut csv = String::from("index,kappa,amplitude,n_v,rho,status,tau,r2,fit_inconclusive,monotone_violations,error\n");
    let opt = |x: Option<f64>| x.map_or(String::new(), fmt_f64);
    let mut failed = 0;
    for r in &rows {
        let p = &r.point;
        let head = format!(
            "{},{},{},{},{}",
            r.index,
            fmt_f64(p.kappa),
            fmt_f64(p.amplitude),
            p.n_v,
            fmt_f64(p.rho)
        );
        match &r.result {
            Ok((tau, r2, viol, inconclusive)) => {
                let _ = writeln!(csv, "{head},ok,{},{},{inconclusive},{viol},", opt(*tau), opt(*r2));
            }
            Err(e) => {
                failed += 1;
                eprintln!("point {}: {e}", r.index);
                let _ = writeln!(csv, "{head},failed,,,,,{}", csv_field(e));
            }
        }
    }
    write_text(&out.join("sweep_summary.csv"), &csv)?;
    println!(
        "{} points, {} failed; wrote {}",
        rows.len(),
        failed,
        out.join("sweep_summary.csv").display()
    );
    Ok(())
}
