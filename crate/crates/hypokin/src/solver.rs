//! Time integration of the linear, nonlinear, external-potential and
//! Poisson-coupled equations on the periodic torus.
//!
//! Transport is exact in Fourier: bin `m` at node `v` picks up the phase
//! `e^{−i k_m v dt}`. The Nyquist bin of an even grid carries `k = 0`, so it
//! is never advected; this matches the derivative convention of `grad_x`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constants::{measure_constants, select_weights, CoercivityConstants};
use crate::error::{Error, Result};
use crate::hypocoercivity::{
    fit_rate, higher_order_weights, lambda_norm, lyapunov_f1, lyapunov_fk, DecayReport, FitWindow,
    HigherOrderWeights, LyapunovWeights,
};
use crate::linalg::{expm_w_selfadjoint, sym_gen_eig};
use crate::models::{
    apply_q_nonlinear, kernel_moment, project_global, EquilibriumSpec, Model, ModelKind,
    ModelSpec, PotentialSpec,
};
use crate::phase_grid::{
    inner_unchecked, norm_h1, norm_l2, DistributionField, GridSpec, PhaseGrid,
};

/// Fits with `r²` below this are reported as inconclusive.
pub const MIN_R2: f64 = 0.99;

/// Largest `dt·ρ(L)` accepted by the explicit RK4 collision update.
pub const RK4_STABILITY: f64 = 2.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Strang splitting with exact transport and exact collision exponential.
    #[default]
    StrangExactTransport,
    /// Lie splitting: exact transport, then implicit Euler on the collision.
    ImexEuler,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialRecipe {
    /// `sin(kx)·v·M̂(v)`.
    #[default]
    ModeVelocity,
    /// `cos(kx)·φ(v)` with `φ` the kernel profile.
    ModeDensity,
    /// `φ(v)`, constant in x.
    Kernel,
    /// Seeded sum of low Fourier modes times Hermite-Gaussian profiles.
    RandomBandLimited,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialCondition {
    pub recipe: InitialRecipe,
    /// Wave number of the mode recipes.
    pub k: u32,
    /// Highest Fourier mode of the random recipe.
    pub modes: u32,
    /// `ε₀`: prefactor of the mode recipes, L² norm of the random one.
    pub amplitude: f64,
    /// Remove the `N(T)` component before a linear run.
    pub project: bool,
    /// Smallness bound on the weighted H¹ norm of a nonlinear perturbation.
    pub max_amplitude: f64,
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition {
            recipe: InitialRecipe::ModeVelocity,
            k: 1,
            modes: 3,
            amplitude: 1.0,
            project: true,
            max_amplitude: 0.1,
        }
    }
}

/// Relative tolerances of the per-step checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub monotone: f64,
    pub f2_monotone: f64,
    pub energy: f64,
    pub mass: f64,
    pub fermion_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            monotone: 1e-9,
            f2_monotone: 1e-8,
            energy: 1e-9,
            mass: 1e-10,
            fermion_slack: 1e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunParams {
    pub t_end: f64,
    pub dt: f64,
    pub sample_every: usize,
    pub scheme: Scheme,
    pub nonlinear: bool,
    /// Order of the tracked functional: 1 for `𝓕₁`, 2 adds `𝓕₂`.
    pub order: u32,
    pub seed: u64,
    /// Skip the collision step (free flow only).
    pub transport_only: bool,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            t_end: 20.0,
            dt: 1e-3,
            sample_every: 100,
            scheme: Scheme::StrangExactTransport,
            nonlinear: false,
            order: 1,
            seed: 0,
            transport_only: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsParams {
    /// Random profiles used to certify the measured constants.
    pub n_samples: usize,
}

impl Default for ConstantsParams {
    fn default() -> Self {
        ConstantsParams { n_samples: 200 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub run: RunParams,
    pub initial: InitialCondition,
    pub tolerances: Tolerances,
    pub fit: FitWindow,
    pub constants: ConstantsParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let r = &self.run;
        if !(r.dt > 0.0 && r.dt.is_finite()) {
            return Err(Error::invalid("run.dt", format!("must be positive, got {}", r.dt)));
        }
        if !(r.t_end >= r.dt && r.t_end.is_finite()) {
            return Err(Error::invalid(
                "run.t_end",
                format!("must be at least dt = {}, got {}", r.dt, r.t_end),
            ));
        }
        if r.sample_every == 0 {
            return Err(Error::invalid("run.sample_every", "must be at least 1"));
        }
        if !(1..=2).contains(&r.order) {
            return Err(Error::invalid("run.order", format!("must be 1 or 2, got {}", r.order)));
        }
        let ic = &self.initial;
        if !(ic.amplitude >= 0.0 && ic.amplitude.is_finite()) {
            return Err(Error::invalid(
                "initial.amplitude",
                format!("must be finite and non-negative, got {}", ic.amplitude),
            ));
        }
        if ic.k == 0 {
            return Err(Error::invalid("initial.k", "mode number must be at least 1"));
        }
        if !(ic.max_amplitude > 0.0) {
            return Err(Error::invalid("initial.max_amplitude", "must be positive"));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.monotone", t.monotone),
            ("tolerances.f2_monotone", t.f2_monotone),
            ("tolerances.energy", t.energy),
            ("tolerances.mass", t.mass),
            ("tolerances.fermion_slack", t.fermion_slack),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        self.fit.validate()?;
        if let Some(p) = &self.model.potential {
            if !p.amplitude.is_finite() || !(p.epsilon_max > 0.0) {
                return Err(Error::invalid(
                    "model.potential",
                    "amplitude must be finite and epsilon_max positive",
                ));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.run.t_end / self.run.dt).round().max(1.0) as usize
    }
}

/// A finished run: its report plus everything needed to interpret it.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: DecayReport,
    pub equilibrium: EquilibriumSpec,
    pub constants: CoercivityConstants,
    pub weights: LyapunovWeights,
    pub higher_order: Option<HigherOrderWeights>,
    /// The initial condition had a kernel component that was removed.
    pub initial_projected: bool,
}

/// Runs whichever equation the configuration describes.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.model.poisson {
        if cfg.run.nonlinear {
            run_poisson_nonlinear(cfg)
        } else {
            run_poisson(cfg)
        }
    } else if let Some(p) = &cfg.model.potential {
        let grid = cfg.grid.build()?;
        let pot = PotentialSpec::from_config(p, &grid)?;
        run_with_potential(cfg, &pot)
    } else if cfg.run.nonlinear {
        run_nonlinear_sc(cfg)
    } else {
        run_linear(cfg)
    }
}

// ---------------------------------------------------------------------------
// Building blocks

/// Exact free flow `h(x, v) ↦ h(x − v·dt, v)`.
pub fn transport_step(h: &DistributionField, dt: f64) -> DistributionField {
    let grid = h.grid();
    let phases = transport_phases(grid, dt);
    apply_phases(h, &phases)
}

fn transport_phases(grid: &PhaseGrid, dt: f64) -> Vec<Complex64> {
    let (nx, nv) = (grid.n_x(), grid.n_v());
    let k = grid.wavenumbers();
    let v = grid.v_nodes();
    let mut out = Vec::with_capacity(nx * nv);
    for km in k.iter().take(nx) {
        for vj in v {
            out.push(Complex64::from_polar(1.0, -km * vj * dt));
        }
    }
    out
}

fn apply_phases(h: &DistributionField, phases: &[Complex64]) -> DistributionField {
    let grid = h.grid();
    let mut spec = grid.to_spectrum(h.values());
    for (c, p) in spec.iter_mut().zip(phases) {
        *c *= p;
    }
    DistributionField::from_raw(grid, grid.from_spectrum(&spec))
}

/// One collision update of length `dt`.
///
/// Linear: the exact exponential `e^{dt·L}` (unconditionally stable).
/// Nonlinear: classical RK4 on `Q(f)`, which errors when `dt·ρ(L)` exceeds
/// [`RK4_STABILITY`].
pub fn collision_step(
    model: &Model,
    h: &DistributionField,
    dt: f64,
    linear: bool,
) -> Result<DistributionField> {
    if !(dt.is_finite()) {
        return Err(Error::invalid("dt", "must be finite"));
    }
    if linear {
        let e = expm_w_selfadjoint(model.l_matrix(), model.grid().v_weights(), dt);
        return Ok(h.map_velocity(&e));
    }
    let bound = collision_spectral_radius(model);
    if dt.abs() * bound > RK4_STABILITY {
        return Err(Error::Unstable {
            dt,
            bound: RK4_STABILITY / bound,
        });
    }
    rk4(h, dt, |f| apply_q_nonlinear(model, f))
}

/// Largest `|eig(L)|`, which bounds the stiffness of the collision update.
fn collision_spectral_radius(model: &Model) -> f64 {
    match model.collision_frequency() {
        Some(nu) => nu.iter().cloned().fold(0.0, f64::max),
        None => {
            let w = model.grid().v_weights();
            let n = w.len();
            let l = model.l_matrix();
            let s = DMatrix::from_fn(n, n, |i, j| {
                0.5 * (w[i].sqrt() * l[(i, j)] / w[j].sqrt() + w[j].sqrt() * l[(j, i)] / w[i].sqrt())
            });
            s.symmetric_eigenvalues().iter().fold(0.0f64, |m, x| m.max(x.abs()))
        }
    }
}

fn rk4(
    f: &DistributionField,
    dt: f64,
    rhs: impl Fn(&DistributionField) -> Result<DistributionField>,
) -> Result<DistributionField> {
    let k1 = rhs(f)?;
    let mut y = f.clone();
    y.axpy(0.5 * dt, &k1)?;
    let k2 = rhs(&y)?;
    let mut y = f.clone();
    y.axpy(0.5 * dt, &k2)?;
    let k3 = rhs(&y)?;
    let mut y = f.clone();
    y.axpy(dt, &k3)?;
    let k4 = rhs(&y)?;
    let mut out = f.clone();
    out.axpy(dt / 6.0, &k1)?;
    out.axpy(dt / 3.0, &k2)?;
    out.axpy(dt / 3.0, &k3)?;
    out.axpy(dt / 6.0, &k4)?;
    Ok(out)
}

/// Builds the configured initial perturbation `h₀`.
pub fn initial_field(model: &Model, ic: &InitialCondition, seed: u64) -> Result<DistributionField> {
    let grid = model.grid();
    let kx = 2.0 * PI * ic.k as f64 / grid.length_x();
    let a = ic.amplitude;
    let m_hat = model.m_hat().to_vec();
    let phi = model.kernel().to_vec();
    let nv = grid.n_v();
    let v = grid.v_nodes().to_vec();
    let x = grid.x_nodes().to_vec();
    let mut values = vec![0.0; grid.len()];
    match ic.recipe {
        InitialRecipe::ModeVelocity => {
            for (i, xi) in x.iter().enumerate() {
                for j in 0..nv {
                    values[i * nv + j] = a * (kx * xi).sin() * v[j] * m_hat[j];
                }
            }
        }
        InitialRecipe::ModeDensity => {
            for (i, xi) in x.iter().enumerate() {
                for j in 0..nv {
                    values[i * nv + j] = a * (kx * xi).cos() * phi[j];
                }
            }
        }
        InitialRecipe::Kernel => {
            for i in 0..x.len() {
                values[i * nv..(i + 1) * nv].copy_from_slice(&phi);
                values[i * nv..(i + 1) * nv].iter_mut().for_each(|p| *p *= a);
            }
        }
        InitialRecipe::RandomBandLimited => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k0 = 2.0 * PI / grid.length_x();
            // Hermite-type profiles 1, v, v² − 1, v³ − 3v times M̂
            let profiles: Vec<Vec<f64>> = (0..4)
                .map(|p| {
                    v.iter()
                        .zip(&m_hat)
                        .map(|(&vj, &m)| {
                            let he = match p {
                                0 => 1.0,
                                1 => vj,
                                2 => vj * vj - 1.0,
                                _ => vj * vj * vj - 3.0 * vj,
                            };
                            he * m
                        })
                        .collect()
                })
                .collect();
            for mode in 0..=ic.modes {
                for prof in &profiles {
                    let (c, s) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    let s = if mode == 0 { 0.0 } else { s };
                    for (i, xi) in x.iter().enumerate() {
                        let arg = k0 * mode as f64 * xi;
                        let fx = c * arg.cos() + s * arg.sin();
                        for j in 0..nv {
                            values[i * nv + j] += fx * prof[j];
                        }
                    }
                }
            }
            let h = DistributionField::from_raw(grid, values);
            let n = norm_l2(&h);
            return Ok(if n > 0.0 { h.scaled(a / n) } else { h });
        }
        InitialRecipe::Zero => {}
    }
    Ok(DistributionField::from_raw(grid, values))
}

// ---------------------------------------------------------------------------
// Sampling

struct Recorder {
    report: DecayReport,
    every: usize,
    tol: Tolerances,
    last_f1: Option<f64>,
    last_f2: Option<f64>,
    last_l2: Option<f64>,
    last_energy: Option<f64>,
}

impl Recorder {
    fn new(cfg: &RunConfig, w: &LyapunovWeights) -> Self {
        Recorder {
            report: DecayReport {
                weights: Some(*w),
                ..Default::default()
            },
            every: cfg.run.sample_every,
            tol: cfg.tolerances,
            last_f1: None,
            last_f2: None,
            last_l2: None,
            last_energy: None,
        }
    }

    fn due(&self, step: usize, last: usize) -> bool {
        step % self.every == 0 || step == last
    }

    /// Counts a violation when `new > old·(1 + tol)` (with an absolute floor
    /// at round-off for values that already vanished).
    fn grew(old: Option<f64>, new: f64, tol: f64) -> bool {
        match old {
            Some(o) => new > o + tol * o.abs() + 1e-300,
            None => false,
        }
    }

    fn check_f1(&mut self, v: f64) {
        if Self::grew(self.last_f1, v, self.tol.monotone) {
            self.report.monotone_violations += 1;
        }
        self.last_f1 = Some(v);
    }

    fn check_f2(&mut self, v: f64) {
        if Self::grew(self.last_f2, v, self.tol.f2_monotone) {
            *self.report.f2_violations.get_or_insert(0) += 1;
        } else {
            self.report.f2_violations.get_or_insert(0);
        }
        self.last_f2 = Some(v);
    }

    fn check_l2(&mut self, v: f64) {
        if Self::grew(self.last_l2, v, self.tol.monotone) {
            self.report.l2_violations += 1;
        }
        self.last_l2 = Some(v);
    }

    fn check_energy(&mut self, v: f64) {
        if Self::grew(self.last_energy, v, self.tol.energy) {
            *self.report.energy_violations.get_or_insert(0) += 1;
        } else {
            self.report.energy_violations.get_or_insert(0);
        }
        self.last_energy = Some(v);
    }

    fn sample(&mut self, model: &Model, t: f64, h: &DistributionField, f1: f64, mass: f64) -> Result<()> {
        let r = &mut self.report;
        r.times.push(t);
        r.l2.push(norm_l2(h));
        r.h1.push(norm_h1(h));
        r.lyapunov.push(f1);
        r.lambda.push(lambda_norm(model, h)?);
        r.mass.push(mass);
        Ok(())
    }

    fn push_opt(slot: &mut Option<Vec<f64>>, v: f64) {
        slot.get_or_insert_with(Vec::new).push(v);
    }

    fn finish(mut self, window: &FitWindow, steps: usize) -> DecayReport {
        let r = &mut self.report;
        r.steps = steps;
        match fit_rate(&r.times, &r.h1, window) {
            Ok(fit) => {
                r.fit_inconclusive = !(fit.r2 >= MIN_R2 && fit.tau.is_finite());
                r.fit = Some(fit);
            }
            Err(_) => {
                r.fit = None;
                r.fit_inconclusive = true;
            }
        }
        self.report
    }
}

struct Prepared {
    grid: Arc<PhaseGrid>,
    model: Model,
    constants: CoercivityConstants,
    weights: LyapunovWeights,
    higher: Option<HigherOrderWeights>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let grid = cfg.grid.build()?;
    let model = Model::new(cfg.model, &grid)?;
    let constants = measure_constants(&model, cfg.constants.n_samples, cfg.run.seed)?;
    let mut weights = select_weights(&constants)?;
    weights.order = cfg.run.order;
    let higher = if cfg.run.order == 2 {
        Some(higher_order_weights(&weights, &constants)?)
    } else {
        None
    };
    Ok(Prepared {
        grid,
        model,
        constants,
        weights,
        higher,
    })
}

fn output(p: Prepared, report: DecayReport, initial_projected: bool) -> RunOutput {
    RunOutput {
        report,
        equilibrium: p.model.equilibrium().clone(),
        constants: p.constants,
        weights: p.weights,
        higher_order: p.higher,
        initial_projected,
    }
}

/// Removes the `N(T)` component when configured; reports whether one was
/// present.
fn projected_initial(cfg: &RunConfig, model: &Model) -> Result<(DistributionField, bool)> {
    let h0 = initial_field(model, &cfg.initial, cfg.run.seed)?;
    h0.check_finite(Some(0))?;
    if !cfg.initial.project {
        return Ok((h0, false));
    }
    let pg = project_global(model, &h0)?;
    let present = norm_l2(&pg) > 1e-14 * norm_l2(&h0).max(f64::MIN_POSITIVE);
    let mut h = h0;
    h.axpy(-1.0, &pg)?;
    Ok((h, present))
}

// ---------------------------------------------------------------------------
// Linear runs

/// Per-step propagator of the linear equation `∂ₜh = Lh − v∂ₓh`.
struct LinearStepper {
    transport: Vec<Complex64>,
    collision: Option<DMatrix<f64>>,
    scheme: Scheme,
}

impl LinearStepper {
    fn new(model: &Model, run: &RunParams) -> Result<Self> {
        let grid = model.grid();
        let (tdt, collision) = match run.scheme {
            Scheme::StrangExactTransport => (
                0.5 * run.dt,
                expm_w_selfadjoint(model.l_matrix(), grid.v_weights(), run.dt),
            ),
            Scheme::ImexEuler => {
                let n = grid.n_v();
                let a = DMatrix::identity(n, n) - model.l_matrix() * run.dt;
                let inv = a
                    .try_inverse()
                    .ok_or_else(|| Error::NoConvergence("implicit collision matrix".into()))?;
                (run.dt, inv)
            }
        };
        Ok(LinearStepper {
            transport: transport_phases(grid, tdt),
            collision: (!run.transport_only).then_some(collision),
            scheme: run.scheme,
        })
    }

    fn step(&self, h: &DistributionField) -> DistributionField {
        let mut h = apply_phases(h, &self.transport);
        if let Some(c) = &self.collision {
            h = h.map_velocity(c);
        }
        if self.scheme == Scheme::StrangExactTransport {
            h = apply_phases(&h, &self.transport);
        }
        h
    }
}

/// Linear run `∂ₜh = Lh − v∂ₓh` from the configured initial condition.
pub fn run_linear(cfg: &RunConfig) -> Result<RunOutput> {
    let p = prepare(cfg)?;
    let (h0, projected) = projected_initial(cfg, &p.model)?;
    let report = integrate_linear(cfg, &p, h0)?;
    Ok(output(p, report, projected))
}

fn integrate_linear(cfg: &RunConfig, p: &Prepared, h0: DistributionField) -> Result<DecayReport> {
    let model = &p.model;
    let stepper = LinearStepper::new(model, &cfg.run)?;
    let steps = cfg.steps();
    let mut rec = Recorder::new(cfg, &p.weights);
    let mut h = h0;
    for n in 0..=steps {
        if n > 0 {
            h = stepper.step(&h);
            h.check_finite(Some(n))?;
        }
        let f1 = lyapunov_f1(&h, &p.weights);
        rec.check_f1(f1);
        let f2 = match &p.higher {
            Some(s) => {
                let v = lyapunov_fk(&h, s, 2)?;
                rec.check_f2(v);
                Some(v)
            }
            None => None,
        };
        if rec.due(n, steps) {
            rec.sample(model, n as f64 * cfg.run.dt, &h, f1, kernel_moment(model, &h))?;
            if let Some(v) = f2 {
                Recorder::push_opt(&mut rec.report.f2, v);
            }
        }
    }
    Ok(rec.finish(&cfg.fit, steps))
}

// ---------------------------------------------------------------------------
// Nonlinear semi-classical runs

/// Evolves `f = f∞ + m·h` under the full collision operator plus transport.
///
/// The reported norms are those of `h = (f − f∞)/m`, which is the weighted
/// perturbation `(1 + εκ∞𝓜)(κ∞𝓜)^{−1/2}(f − f∞)`. `mass`, `momentum` and
/// `energy` are the moments `∫∫ f`, `∫∫ v f`, `∫∫ v²f/2`.
pub fn run_nonlinear_sc(cfg: &RunConfig) -> Result<RunOutput> {
    let p = prepare(cfg)?;
    let model = &p.model;
    let grid = &p.grid;
    let h0 = initial_field(model, &cfg.initial, cfg.run.seed)?;
    let size = norm_h1(&h0);
    if size > cfg.initial.max_amplitude {
        return Err(Error::invalid(
            "initial.amplitude",
            format!(
                "weighted H1 norm {size:.4e} of the perturbation exceeds max_amplitude {:.4e}",
                cfg.initial.max_amplitude
            ),
        ));
    }
    let dt = cfg.run.dt;
    let bound = collision_spectral_radius(model);
    if !cfg.run.transport_only && dt * bound > RK4_STABILITY {
        return Err(Error::Unstable {
            dt,
            bound: RK4_STABILITY / bound,
        });
    }

    let nv = grid.n_v();
    let f_inf = DistributionField::from_raw(
        grid,
        (0..grid.len()).map(|idx| model.f_inf()[idx % nv]).collect(),
    );
    let m = model.m_scale().to_vec();
    let inv_m: Vec<f64> = m.iter().map(|x| 1.0 / x).collect();
    let mut f = f_inf.clone();
    f.axpy(1.0, &h0.mul_velocity(&m))?;

    let fermion = model.kind() == ModelKind::SemiClassical && model.spec().epsilon > 0;
    let slack = cfg.tolerances.fermion_slack;
    let ones = vec![1.0; nv];
    let v = grid.v_nodes().to_vec();
    let half_v2: Vec<f64> = v.iter().map(|x| 0.5 * x * x).collect();
    let moment = |f: &DistributionField, g: &[f64]| -> f64 {
        (0..grid.n_x()).map(|i| grid.dot_v(f.row(i), g)).sum::<f64>() * grid.dx()
    };
    let mass0 = moment(&f, &ones);
    let half = transport_phases(grid, 0.5 * dt);
    let steps = cfg.steps();
    let mut rec = Recorder::new(cfg, &p.weights);

    for n in 0..=steps {
        if n > 0 {
            f = apply_phases(&f, &half);
            if !cfg.run.transport_only {
                f = rk4(&f, dt, |g| apply_q_nonlinear(model, g))?;
            }
            f = apply_phases(&f, &half);
            f.check_finite(Some(n))?;
        }
        let mass = moment(&f, &ones);
        let drift = (mass - mass0).abs() / mass0.abs().max(f64::MIN_POSITIVE);
        if drift > cfg.tolerances.mass {
            return Err(Error::MassDrift { step: n, drift });
        }
        let (lo, hi) = f
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
        if fermion && (lo < -slack || hi > 1.0 + slack) {
            return Err(Error::FermionRange {
                step: n,
                min: lo,
                max: hi,
            });
        }
        let mut dh = f.clone();
        dh.axpy(-1.0, &f_inf)?;
        let h = dh.mul_velocity(&inv_m);
        let f1 = lyapunov_f1(&h, &p.weights);
        rec.check_f1(f1);
        if let Some(s) = &p.higher {
            let v2 = lyapunov_fk(&h, s, 2)?;
            rec.check_f2(v2);
            if rec.due(n, steps) {
                Recorder::push_opt(&mut rec.report.f2, v2);
            }
        }
        if rec.due(n, steps) {
            rec.sample(model, n as f64 * dt, &h, f1, mass)?;
            let r = &mut rec.report;
            Recorder::push_opt(&mut r.momentum, moment(&f, &v));
            Recorder::push_opt(&mut r.energy, moment(&f, &half_v2));
            Recorder::push_opt(&mut r.fmin, lo);
            Recorder::push_opt(&mut r.fmax, hi);
        }
    }
    let report = rec.finish(&cfg.fit, steps);
    Ok(output(p, report, false))
}

// ---------------------------------------------------------------------------
// Weak external potential

/// Relaxation model in a weak external potential `V(x)`.
///
/// With `f = F + F^{1/2}h` and `F ∝ e^{−V}𝓜`, the perturbation obeys
/// `∂ₜh = Lh − v∂ₓh + V′(x)∂ᵥh`. The force uses the W-skew part of the
/// velocity derivative, so each sub-step is an exact isometry or
/// contraction and `‖h‖` cannot grow. The kernel direction
/// `ψ ∝ e^{−V/2}M̂` is projected out initially and `mass` reports `∫∫ hψ`.
pub fn run_with_potential(cfg: &RunConfig, potential: &PotentialSpec) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.model.kind != ModelKind::Relaxation {
        return Err(Error::Unsupported {
            model: cfg.model.kind.to_string(),
            reason: "external potentials are implemented for the relaxation model only".into(),
        });
    }
    let eps = cfg.model.potential.map(|p| p.epsilon_max).unwrap_or(0.05);
    if potential.c2_bound > eps {
        return Err(Error::PotentialTooLarge {
            c2_bound: potential.c2_bound,
            epsilon: eps,
        });
    }
    if potential.c2_bound == 0.0 {
        return run_linear(cfg);
    }
    let p = prepare(cfg)?;
    let model = &p.model;
    let grid = &p.grid;
    if potential.values.len() != grid.n_x() {
        return Err(Error::GridMismatch);
    }
    let (nx, nv) = (grid.n_x(), grid.n_v());
    let dv = potential.gradient(grid);

    let mut psi = DistributionField::from_raw(
        grid,
        (0..grid.len())
            .map(|idx| (-0.5 * potential.values[idx / nv]).exp() * model.m_hat()[idx % nv])
            .collect(),
    );
    let pn = norm_l2(&psi);
    psi.scale(1.0 / pn);

    let h0 = initial_field(model, &cfg.initial, cfg.run.seed)?;
    h0.check_finite(Some(0))?;
    let mut h = h0.clone();
    let mut projected = false;
    if cfg.initial.project {
        let c = inner_unchecked(&h, &psi);
        projected = c.abs() > 1e-14 * norm_l2(&h0).max(f64::MIN_POSITIVE);
        h.axpy(-c, &psi)?;
    }

    let dt = cfg.run.dt;
    let half = transport_phases(grid, 0.5 * dt);
    let force = force_propagators(grid, &dv, 0.5 * dt);
    let collision = expm_w_selfadjoint(model.l_matrix(), grid.v_weights(), dt);
    let apply_force = |h: &DistributionField| -> DistributionField {
        let mut out = vec![0.0; h.values().len()];
        for i in 0..nx {
            let r = &force[i] * DVector::from_column_slice(h.row(i));
            out[i * nv..(i + 1) * nv].copy_from_slice(r.as_slice());
        }
        DistributionField::from_raw(grid, out)
    };

    let steps = cfg.steps();
    let mut rec = Recorder::new(cfg, &p.weights);
    for n in 0..=steps {
        if n > 0 {
            h = apply_phases(&h, &half);
            if !cfg.run.transport_only {
                h = apply_force(&h);
                h = h.map_velocity(&collision);
                h = apply_force(&h);
            }
            h = apply_phases(&h, &half);
            h.check_finite(Some(n))?;
        }
        let f1 = lyapunov_f1(&h, &p.weights);
        rec.check_f1(f1);
        rec.check_l2(norm_l2(&h));
        if rec.due(n, steps) {
            rec.sample(model, n as f64 * dt, &h, f1, inner_unchecked(&h, &psi))?;
        }
    }
    let report = rec.finish(&cfg.fit, steps);
    Ok(output(p, report, projected))
}

/// `exp(τ·V′(xᵢ)·D_s)` for every x node, where `D_s = (D − W⁻¹DᵀW)/2` is the
/// W-skew part of the velocity derivative.
fn force_propagators(grid: &PhaseGrid, dv: &[f64], tau: f64) -> Vec<DMatrix<f64>> {
    let n = grid.n_v();
    let w = grid.v_weights();
    let d = grid.dv_matrix();
    // S = W^{1/2} D_s W^{-1/2} is antisymmetric; iS is Hermitian.
    let s = DMatrix::from_fn(n, n, |i, j| {
        let a = w[i].sqrt() * d[(i, j)] / w[j].sqrt();
        let b = w[j].sqrt() * d[(j, i)] / w[i].sqrt();
        0.5 * (a - b)
    });
    let hmat = s.map(|x| Complex64::new(0.0, x));
    let eig = SymmetricEigen::new(hmat);
    let u = eig.eigenvectors;
    let ut = u.adjoint();
    let mu = eig.eigenvalues;
    dv.iter()
        .map(|&g| {
            // exp(τ g S) = U e^{−iτgμ} U*
            let diag = DMatrix::from_diagonal(&mu.map(|m| Complex64::from_polar(1.0, -tau * g * m)));
            let e = &u * diag * &ut;
            DMatrix::from_fn(n, n, |i, j| e[(i, j)].re * w[j].sqrt() / w[i].sqrt())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Poisson coupling

/// Solves `∂ₓ²V = source` on the torus with `∫V = 0`; returns `(V, ∂ₓV)`.
///
/// The source must have zero mean. The Nyquist mode of an even grid is
/// dropped, consistently with the spectral derivative.
pub fn solve_poisson(source: &[f64], grid: &PhaseGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    let nx = grid.n_x();
    if source.len() != nx {
        return Err(Error::GridMismatch);
    }
    if source.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "Poisson source".into(),
            step: None,
        });
    }
    let mean = source.iter().sum::<f64>() / nx as f64;
    let scale = source.iter().fold(1.0f64, |m, s| m.max(s.abs()));
    if mean.abs() > 1e-12 * scale {
        return Err(Error::GaugeViolation { mean });
    }
    let k = grid.wavenumbers();
    let mut buf: Vec<Complex64> = source.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    grid.fft_inplace(&mut buf);
    let mut vhat = vec![Complex64::new(0.0, 0.0); nx];
    let mut dhat = vec![Complex64::new(0.0, 0.0); nx];
    for m in 0..nx {
        if k[m] != 0.0 {
            vhat[m] = -buf[m] / (k[m] * k[m]);
            dhat[m] = vhat[m] * Complex64::new(0.0, k[m]);
        }
    }
    grid.ifft_inplace(&mut vhat);
    grid.ifft_inplace(&mut dhat);
    let s = 1.0 / nx as f64;
    Ok((
        vhat.iter().map(|c| c.re * s).collect(),
        dhat.iter().map(|c| c.re * s).collect(),
    ))
}

/// `∫ h·f∞^{1/2} dv` per x node, with its mean (the conserved mass) removed.
fn poisson_source(model: &Model, h: &DistributionField) -> Vec<f64> {
    let grid = h.grid();
    let root = model.equilibrium().rho_inf.sqrt();
    let mut s: Vec<f64> = (0..grid.n_x())
        .map(|i| root * grid.dot_v(h.row(i), model.m_hat()))
        .collect();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    s.iter_mut().for_each(|x| *x -= mean);
    s
}

/// `‖∂ₓV‖²` of the field generated by `h`.
pub fn field_energy(model: &Model, h: &DistributionField) -> Result<f64> {
    let grid = h.grid();
    let (_, dv) = solve_poisson(&poisson_source(model, h), grid)?;
    Ok(dv.iter().map(|x| x * x).sum::<f64>() * grid.dx())
}

/// Exact per-bin propagators of `∂ₜh = −v∂ₓh + (v∂ₓV)f∞^{1/2}`.
///
/// In bin `k` this is `∂ₜĥ = −iBĥ` with `B` self-adjoint in the energy
/// metric `G = W + (ρ∞/k²)(WM̂)(WM̂)ᵀ`, whose quadratic form is the bin's
/// share of `‖h‖² + ‖∂ₓV‖²`. Writing `GB = S` and solving `Su = μGu`
/// gives `e^{−iBdt} = U e^{−iμdt} Uᵀ G`, a G-unitary matrix. Bins with
/// `k = 0` carry no field and are not advected.
fn poisson_propagators(model: &Model, dt: f64) -> Result<Vec<Option<DMatrix<Complex64>>>> {
    let grid = model.grid();
    let (nx, n) = (grid.n_x(), grid.n_v());
    let w = grid.v_weights();
    let v = grid.v_nodes();
    let m = model.m_hat();
    let rho = model.equilibrium().rho_inf;
    let wm = DVector::from_fn(n, |j, _| w[j] * m[j]);
    let wvm = DVector::from_fn(n, |j, _| w[j] * v[j] * m[j]);
    let k = grid.wavenumbers();
    let mut out: Vec<Option<DMatrix<Complex64>>> = vec![None; nx];
    for mi in 0..nx {
        let km = k[mi];
        if km == 0.0 {
            continue;
        }
        let mirror = nx - mi;
        if mi > nx / 2 && mirror < nx && k[mirror] == -km {
            out[mi] = out[mirror].as_ref().map(|p| p.map(|z| z.conj()));
            continue;
        }
        let g = DMatrix::from_fn(n, n, |i, j| {
            (if i == j { w[i] } else { 0.0 }) + rho / (km * km) * wm[i] * wm[j]
        });
        let s = DMatrix::from_fn(n, n, |i, j| {
            (if i == j { km * w[i] * v[i] } else { 0.0 })
                + rho / km * (wvm[i] * wm[j] + wm[i] * wvm[j])
        });
        let (mu, u) = sym_gen_eig(&s, &g)?;
        let uc = u.map(|x| Complex64::new(x, 0.0));
        let diag = DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            mu.iter().map(|x| Complex64::from_polar(1.0, -x * dt)),
        ));
        let utg = (u.transpose() * &g).map(|x| Complex64::new(x, 0.0));
        out[mi] = Some(uc * diag * utg);
    }
    Ok(out)
}

fn prepare_poisson(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.model.kind != ModelKind::Relaxation {
        return Err(Error::Unsupported {
            model: cfg.model.kind.to_string(),
            reason: "Poisson coupling is implemented for the relaxation model only".into(),
        });
    }
    if cfg.model.potential.is_some() {
        return Err(Error::Unsupported {
            model: cfg.model.kind.to_string(),
            reason: "Poisson coupling and an external potential cannot be combined".into(),
        });
    }
    Ok(())
}

/// Linearized relaxation model with a repulsive self-consistent field,
/// `∂ₜh = Lh − v∂ₓh + (v∂ₓV)f∞^{1/2}`, `∂ₓ²V = ∫ h f∞^{1/2} dv`.
///
/// Strang splitting `C(dt/2)·P(dt)·C(dt/2)` with the exact collision
/// exponential `C` and the exact transport-plus-field propagator `P`; both
/// are non-expansive in `‖h‖² + ‖∂ₓV‖²`.
pub fn run_poisson(cfg: &RunConfig) -> Result<RunOutput> {
    prepare_poisson(cfg)?;
    let p = prepare(cfg)?;
    let model = &p.model;
    let grid = &p.grid;
    let (h0, projected) = projected_initial(cfg, model)?;
    let dt = cfg.run.dt;
    let props = poisson_propagators(model, dt)?;
    let half = (!cfg.run.transport_only)
        .then(|| expm_w_selfadjoint(model.l_matrix(), grid.v_weights(), 0.5 * dt));
    let nv = grid.n_v();
    let transport_field = |h: &DistributionField| -> DistributionField {
        let mut spec = grid.to_spectrum(h.values());
        for (mi, prop) in props.iter().enumerate() {
            if let Some(pm) = prop {
                let block = DVector::from_column_slice(&spec[mi * nv..(mi + 1) * nv]);
                let r = pm * block;
                spec[mi * nv..(mi + 1) * nv].copy_from_slice(r.as_slice());
            }
        }
        DistributionField::from_raw(grid, grid.from_spectrum(&spec))
    };

    let steps = cfg.steps();
    let mut rec = Recorder::new(cfg, &p.weights);
    let mut h = h0;
    for n in 0..=steps {
        if n > 0 {
            if let Some(c) = &half {
                h = h.map_velocity(c);
            }
            h = transport_field(&h);
            if let Some(c) = &half {
                h = h.map_velocity(c);
            }
            h.check_finite(Some(n))?;
        }
        let fe = field_energy(model, &h)?;
        let l2sq = inner_unchecked(&h, &h);
        rec.check_energy(l2sq + fe);
        let f1 = lyapunov_f1(&h, &p.weights);
        rec.check_f1(f1);
        if rec.due(n, steps) {
            rec.sample(model, n as f64 * dt, &h, f1, kernel_moment(model, &h))?;
            Recorder::push_opt(&mut rec.report.field_energy, fe);
        }
    }
    let report = rec.finish(&cfg.fit, steps);
    Ok(output(p, report, projected))
}

/// Experimental: the full nonlinear system `∂ₜf + v∂ₓf + ∂ₓV∂ᵥf = Q(f)`,
/// `∂ₓ²V = ρ − ρ₀`, for the relaxation model. Series are reported for
/// `h = (f − f∞)/f∞^{1/2}`.
pub fn run_poisson_nonlinear(cfg: &RunConfig) -> Result<RunOutput> {
    prepare_poisson(cfg)?;
    let p = prepare(cfg)?;
    let model = &p.model;
    let grid = &p.grid;
    let (h0, projected) = projected_initial(cfg, model)?;
    let size = norm_h1(&h0);
    if size > cfg.initial.max_amplitude {
        return Err(Error::invalid(
            "initial.amplitude",
            format!(
                "H1 norm {size:.4e} of the perturbation exceeds max_amplitude {:.4e}",
                cfg.initial.max_amplitude
            ),
        ));
    }
    let dt = cfg.run.dt;
    let nv = grid.n_v();
    let nx = grid.n_x();
    let f_inf = DistributionField::from_raw(
        grid,
        (0..grid.len()).map(|idx| model.f_inf()[idx % nv]).collect(),
    );
    let m = model.m_scale().to_vec();
    let inv_m: Vec<f64> = m.iter().map(|x| 1.0 / x).collect();
    let mut f = f_inf.clone();
    f.axpy(1.0, &h0.mul_velocity(&m))?;

    let ds = {
        let w = grid.v_weights();
        let d = grid.dv_matrix();
        DMatrix::from_fn(nv, nv, |i, j| 0.5 * (d[(i, j)] - w[j] * d[(j, i)] / w[i]))
    };
    let ones = vec![1.0; nv];
    let rhs = |f: &DistributionField| -> Result<DistributionField> {
        let mut rho: Vec<f64> = (0..nx).map(|i| grid.dot_v(f.row(i), &ones)).collect();
        let mean = rho.iter().sum::<f64>() / nx as f64;
        rho.iter_mut().for_each(|r| *r -= mean);
        let (_, dv) = solve_poisson(&rho, grid)?;
        let df = f.map_velocity(&ds);
        let mut out = if cfg.run.transport_only {
            DistributionField::zeros(grid)
        } else {
            apply_q_nonlinear(model, f)?
        };
        let vals = out.values_mut();
        for i in 0..nx {
            for j in 0..nv {
                vals[i * nv + j] -= dv[i] * df.values()[i * nv + j];
            }
        }
        Ok(out)
    };
    let bound = collision_spectral_radius(model);
    if dt * bound > RK4_STABILITY {
        return Err(Error::Unstable {
            dt,
            bound: RK4_STABILITY / bound,
        });
    }
    let half = transport_phases(grid, 0.5 * dt);
    let moment = |f: &DistributionField| -> f64 {
        (0..nx).map(|i| grid.dot_v(f.row(i), &ones)).sum::<f64>() * grid.dx()
    };
    let mass0 = moment(&f);
    let steps = cfg.steps();
    let mut rec = Recorder::new(cfg, &p.weights);
    for n in 0..=steps {
        if n > 0 {
            f = apply_phases(&f, &half);
            f = rk4(&f, dt, &rhs)?;
            f = apply_phases(&f, &half);
            f.check_finite(Some(n))?;
        }
        let mass = moment(&f);
        let drift = (mass - mass0).abs() / mass0.abs().max(f64::MIN_POSITIVE);
        if drift > cfg.tolerances.mass {
            return Err(Error::MassDrift { step: n, drift });
        }
        let mut dh = f.clone();
        dh.axpy(-1.0, &f_inf)?;
        let h = dh.mul_velocity(&inv_m);
        let fe = field_energy(model, &h)?;
        rec.check_energy(inner_unchecked(&h, &h) + fe);
        let f1 = lyapunov_f1(&h, &p.weights);
        rec.check_f1(f1);
        if rec.due(n, steps) {
            rec.sample(model, n as f64 * dt, &h, f1, mass)?;
            Recorder::push_opt(&mut rec.report.field_energy, fe);
        }
    }
    let report = rec.finish(&cfg.fit, steps);
    Ok(output(p, report, projected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{apply_l, kernel_coefficient, maxwellian_at};
    use crate::phase_grid::{build_grid, Quadrature};
    use approx::assert_abs_diff_eq;

    fn grid(nx: usize, nv: usize, vmax: f64) -> Arc<PhaseGrid> {
        Arc::new(build_grid(nx, 2.0 * PI, nv, vmax, Quadrature::Uniform).unwrap())
    }

    fn small_cfg(model: ModelSpec) -> RunConfig {
        RunConfig {
            model,
            grid: GridSpec {
                n_x: 8,
                n_v: 24,
                v_max: 7.0,
                ..Default::default()
            },
            run: RunParams {
                t_end: 1.0,
                dt: 1e-2,
                sample_every: 10,
                ..Default::default()
            },
            constants: ConstantsParams { n_samples: 100 },
            ..Default::default()
        }
    }

    #[test]
    fn transport_single_mode() {
        let g = grid(16, 12, 5.0);
        let h = DistributionField::from_fn(&g, |x, v| x.sin() * maxwellian_at(v)).unwrap();
        let dt = 0.37;
        let out = transport_step(&h, dt);
        let exact =
            DistributionField::from_fn(&g, |x, v| (x - v * dt).sin() * maxwellian_at(v)).unwrap();
        let mut d = out.clone();
        d.axpy(-1.0, &exact).unwrap();
        assert!(d.max_abs() < 1e-12);
        assert_abs_diff_eq!(norm_l2(&out), norm_l2(&h), epsilon = 1e-12);
        let back = transport_step(&out, -dt);
        let mut d = back;
        d.axpy(-1.0, &h).unwrap();
        assert!(d.max_abs() < 1e-12);
    }

    #[test]
    fn collision_examples() {
        let g = grid(4, 32, 7.0);
        let kappa = 0.7;
        let model = Model::new(ModelSpec::relaxation(kappa), &g).unwrap();
        // odd profile: orthogonal to M̂ at every x
        let h = DistributionField::from_fn(&g, |x, v| (1.0 + x.cos()) * v * (-v * v / 3.0).exp())
            .unwrap();
        let dt = 0.3;
        let out = collision_step(&model, &h, dt, true).unwrap();
        let mut d = out.clone();
        d.axpy(-(-dt / kappa).exp(), &h).unwrap();
        assert!(d.max_abs() < 1e-10);

        let eq = DistributionField::from_fn(&g, |x, _| 2.0 + x.sin())
            .unwrap()
            .mul_velocity(model.kernel());
        let out = collision_step(&model, &eq, dt, true).unwrap();
        let mut d = out;
        d.axpy(-1.0, &eq).unwrap();
        assert!(d.max_abs() < 1e-10);

        for spec in [ModelSpec::relaxation(1.0), ModelSpec::semi_classical(1.0, 1, 1.0)] {
            let model = Model::new(spec, &g).unwrap();
            let f = DistributionField::from_fn(&g, |x, v| {
                0.3 * maxwellian_at(v) * (1.0 + 0.2 * x.cos() + 0.1 * v)
            })
            .unwrap();
            let dt = 1e-2;
            let out = collision_step(&model, &f, dt, false).unwrap();
            let mut d = out;
            d.axpy(-1.0, &f).unwrap();
            for i in 0..g.n_x() {
                let m: f64 = g.dot_v(d.row(i), &vec![1.0; g.n_v()]);
                assert!(m.abs() / dt < 1e-12, "mass rate {m}");
            }
        }
        let err = collision_step(&model, &h, 10.0, false).unwrap_err();
        assert!(matches!(err, Error::Unstable { .. }));
    }

    #[test]
    fn strang_is_second_order() {
        let g = grid(8, 24, 7.0);
        let model = Model::new(ModelSpec::relaxation(0.5), &g).unwrap();
        let h0 = DistributionField::from_fn(&g, |x, v| {
            (x.sin() * v + (2.0 * x).cos() * (v * v - 1.0)) * maxwellian_at(v).sqrt()
        })
        .unwrap();
        let evolve = |dt: f64, t: f64| {
            let run = RunParams {
                dt,
                ..Default::default()
            };
            let s = LinearStepper::new(&model, &run).unwrap();
            let n = (t / dt).round() as usize;
            let mut h = h0.clone();
            for _ in 0..n {
                h = s.step(&h);
            }
            h
        };
        let t = 1.0;
        let reference = evolve(t / 1024.0, t);
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&dt| {
                let mut d = evolve(dt, t);
                d.axpy(-1.0, &reference).unwrap();
                norm_l2(&d)
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.3, "order {order}, errors {errs:?}");
        }
    }

    #[test]
    fn kernel_initial_condition_is_stationary() {
        for spec in [
            ModelSpec::relaxation(1.0),
            ModelSpec::semi_classical(1.0, 1, 1.0),
            ModelSpec::fokker_planck(),
        ] {
            let mut cfg = small_cfg(spec);
            cfg.initial.recipe = InitialRecipe::Kernel;
            cfg.initial.project = false;
            let out = run_linear(&cfg).unwrap();
            let r = &out.report;
            for series in [&r.l2, &r.h1, &r.lambda, &r.lyapunov, &r.mass] {
                let s0 = series[0];
                for s in series {
                    assert!((s - s0).abs() <= 1e-10 * s0.abs().max(1.0), "{spec:?}: {s} vs {s0}");
                }
            }
        }
    }

    #[test]
    fn conservation_and_free_flow() {
        for spec in [
            ModelSpec::relaxation(1.0),
            ModelSpec::semi_classical(1.0, -1, 0.5),
            ModelSpec::fokker_planck(),
        ] {
            let mut cfg = small_cfg(spec);
            cfg.initial.recipe = InitialRecipe::RandomBandLimited;
            cfg.initial.project = false;
            let out = run_linear(&cfg).unwrap();
            let m = &out.report.mass;
            let scale = m[0].abs().max(out.report.l2[0]);
            for v in m {
                assert!((v - m[0]).abs() <= 1e-10 * scale);
            }
            cfg.run.transport_only = true;
            let out = run_linear(&cfg).unwrap();
            let l2 = &out.report.l2;
            for v in l2 {
                assert!((v - l2[0]).abs() <= 1e-12 * l2[0]);
            }
        }
    }

    #[test]
    fn projection_is_reported() {
        let mut cfg = small_cfg(ModelSpec::relaxation(1.0));
        cfg.initial.recipe = InitialRecipe::RandomBandLimited;
        let out = run_linear(&cfg).unwrap();
        assert!(out.initial_projected);
        assert!(out.report.mass[0].abs() < 1e-13);
        cfg.initial.recipe = InitialRecipe::ModeVelocity;
        assert!(!run_linear(&cfg).unwrap().initial_projected);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(ModelSpec::relaxation(1.0));
        cfg.run.dt = 0.0;
        match run(&cfg).unwrap_err() {
            Error::InvalidParameter { name, .. } => assert_eq!(name, "run.dt"),
            e => panic!("{e}"),
        }
        let mut cfg = small_cfg(ModelSpec::relaxation(1.0));
        cfg.run.sample_every = 0;
        assert!(run(&cfg).is_err());
        let mut cfg = small_cfg(ModelSpec::relaxation(1.0));
        cfg.run.t_end = 1e-3;
        assert!(run(&cfg).is_err());
    }

    #[test]
    fn poisson_single_mode() {
        let g = grid(16, 8, 5.0);
        let src: Vec<f64> = g.x_nodes().iter().map(|x| x.cos()).collect();
        let (v, dv) = solve_poisson(&src, &g).unwrap();
        for (i, x) in g.x_nodes().iter().enumerate() {
            assert_abs_diff_eq!(v[i], -x.cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(dv[i], x.sin(), epsilon = 1e-12);
        }
        let bad: Vec<f64> = src.iter().map(|s| s + 0.5).collect();
        assert!(matches!(
            solve_poisson(&bad, &g).unwrap_err(),
            Error::GaugeViolation { .. }
        ));
    }

    #[test]
    fn poisson_runs() {
        let mut cfg = small_cfg(ModelSpec {
            poisson: true,
            ..ModelSpec::relaxation(1.0)
        });
        cfg.initial.recipe = InitialRecipe::ModeDensity;
        let out = run_poisson(&cfg).unwrap();
        assert_eq!(out.report.energy_violations, Some(0));
        let fe = out.report.field_energy.as_ref().unwrap();
        assert!(fe[0] > 0.0);

        // transport plus field alone conserves the energy
        cfg.run.transport_only = true;
        let out = run_poisson(&cfg).unwrap();
        let fe = out.report.field_energy.unwrap();
        let e: Vec<f64> = out.report.l2.iter().zip(&fe).map(|(l, f)| l * l + f).collect();
        for x in &e {
            assert!((x - e[0]).abs() < 1e-12 * e[0]);
        }
        // energy is exchanged with the field
        assert!(fe.iter().any(|f| (f - fe[0]).abs() > 1e-3 * fe[0]));

        cfg.run.transport_only = false;
        cfg.initial.recipe = InitialRecipe::Zero;
        let out = run_poisson(&cfg).unwrap();
        assert!(out.report.field_energy.unwrap().iter().all(|f| *f == 0.0));

        let mut bad = cfg;
        bad.model.kind = ModelKind::FokkerPlanck;
        assert!(matches!(run(&bad).unwrap_err(), Error::Unsupported { .. }));
    }

    #[test]
    fn poisson_nonlinear_small_amplitude() {
        let mut cfg = small_cfg(ModelSpec {
            poisson: true,
            ..ModelSpec::relaxation(1.0)
        });
        cfg.run.nonlinear = true;
        cfg.initial.recipe = InitialRecipe::ModeDensity;
        cfg.initial.amplitude = 1e-3;
        let nl = run(&cfg).unwrap().report;
        cfg.run.nonlinear = false;
        let lin = run(&cfg).unwrap().report;
        for (a, b) in nl.l2.iter().zip(&lin.l2) {
            assert!((a - b).abs() < 1e-2 * lin.l2[0], "{a} vs {b}");
        }
    }

    #[test]
    fn potential_runs() {
        let mut cfg = small_cfg(ModelSpec::relaxation(1.0));
        cfg.model.potential = Some(crate::models::PotentialConfig {
            amplitude: 0.0,
            ..Default::default()
        });
        let zero = run(&cfg).unwrap().report;
        let mut plain = cfg;
        plain.model.potential = None;
        let lin = run(&plain).unwrap().report;
        assert_eq!(zero, lin);

        cfg.model.potential = Some(crate::models::PotentialConfig {
            amplitude: 0.01,
            ..Default::default()
        });
        let out = run(&cfg).unwrap().report;
        assert_eq!(out.l2_violations, 0);

        cfg.model.potential = Some(crate::models::PotentialConfig {
            amplitude: 0.2,
            ..Default::default()
        });
        assert!(matches!(run(&cfg).unwrap_err(), Error::PotentialTooLarge { .. }));
    }

    #[test]
    fn force_propagator_is_isometric() {
        let g = grid(4, 20, 6.0);
        let props = force_propagators(&g, &[0.3, -1.0, 0.0, 2.0], 0.7);
        let w = DMatrix::from_diagonal(&g.weights_vector());
        for p in props {
            let e = p.transpose() * &w * &p - &w;
            assert!(e.abs().max() < 1e-13);
        }
    }

    #[test]
    fn nonlinear_equilibrium_and_reduction() {
        let mut cfg = small_cfg(ModelSpec::semi_classical(1.0, 1, 1.0));
        cfg.run.nonlinear = true;
        cfg.initial.recipe = InitialRecipe::Zero;
        let out = run(&cfg).unwrap().report;
        for s in [&out.l2, &out.h1] {
            assert!(s.iter().all(|x| x.abs() < 1e-13));
        }
        let m = &out.mass;
        assert!(m.iter().all(|x| (x - m[0]).abs() < 1e-13 * m[0]));

        let mut cfg = small_cfg(ModelSpec::semi_classical(1.0, 0, 1.0));
        cfg.initial.amplitude = 1e-2;
        cfg.run.nonlinear = true;
        let nl = run(&cfg).unwrap().report;
        cfg.run.nonlinear = false;
        cfg.model = ModelSpec::relaxation(1.0);
        let lin = run(&cfg).unwrap().report;
        for (a, b) in [(&nl.l2, &lin.l2), (&nl.h1, &lin.h1), (&nl.lambda, &lin.lambda)] {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-8 * b[0], "{x} vs {y}");
            }
        }
    }

    #[test]
    fn nonlinear_guards() {
        let mut cfg = small_cfg(ModelSpec::semi_classical(1.0, 1, 1.0));
        cfg.run.nonlinear = true;
        cfg.initial.amplitude = 1.0;
        assert!(matches!(run(&cfg).unwrap_err(), Error::InvalidParameter { .. }));

        // a large perturbation pushes f outside [0, 1] at once
        cfg.initial.amplitude = 5.0;
        cfg.initial.max_amplitude = 100.0;
        match run(&cfg).unwrap_err() {
            Error::FermionRange { step, .. } => assert_eq!(step, 0),
            e => panic!("{e}"),
        }

        cfg.initial.amplitude = 1e-2;
        cfg.initial.max_amplitude = 0.1;
        cfg.run.dt = 3.0;
        cfg.run.t_end = 3.0;
        assert!(matches!(run(&cfg).unwrap_err(), Error::Unstable { .. }));
    }

    #[test]
    fn fermion_run_stays_in_range() {
        let mut cfg = small_cfg(ModelSpec::semi_classical(1.0, 1, 1.0));
        cfg.run.nonlinear = true;
        cfg.initial.amplitude = 1e-2;
        let out = run(&cfg).unwrap().report;
        let lo = out.fmin.unwrap();
        let hi = out.fmax.unwrap();
        assert!(lo.iter().all(|x| *x >= -1e-12));
        assert!(hi.iter().all(|x| *x <= 1.0 + 1e-12));
        assert!(out.l2.last().unwrap() < &out.l2[0]);
    }

    #[test]
    fn imex_is_consistent() {
        let mut cfg = small_cfg(ModelSpec::fokker_planck());
        cfg.run.scheme = Scheme::ImexEuler;
        cfg.run.dt = 1e-3;
        let imex = run(&cfg).unwrap().report;
        cfg.run.scheme = Scheme::StrangExactTransport;
        let strang = run(&cfg).unwrap().report;
        let (a, b) = (imex.l2.last().unwrap(), strang.l2.last().unwrap());
        assert!((a - b).abs() < 1e-2 * b);
    }

    #[test]
    fn l_preserves_kernel_component_over_a_step() {
        let g = grid(8, 24, 7.0);
        for spec in [ModelSpec::relaxation(1.0), ModelSpec::fokker_planck()] {
            let model = Model::new(spec, &g).unwrap();
            let h = DistributionField::from_fn(&g, |x, v| {
                (1.0 + x.sin()) * (1.0 + v + v * v) * maxwellian_at(v).sqrt()
            })
            .unwrap();
            let s = LinearStepper::new(
                &model,
                &RunParams {
                    dt: 0.05,
                    ..Default::default()
                },
            )
            .unwrap();
            let before = kernel_coefficient(&model, &h);
            let after = kernel_coefficient(&model, &s.step(&h));
            assert!((before - after).abs() < 1e-10 * before.abs());
            let lh = apply_l(&model, &h).unwrap();
            assert!(kernel_coefficient(&model, &lh).abs() < 1e-12);
        }
    }
}
