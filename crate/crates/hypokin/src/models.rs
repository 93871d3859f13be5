//! Collision models in the perturbative variable `h`, their splittings
//! `L = K − Λ`, kernels and projections, the semi-classical equilibrium, and
//! the nonlinear collision operators acting on `f`.
//!
//! Velocity operators are assembled once per (model, grid) as dense
//! `n_v × n_v` matrices. They are self-adjoint in the quadrature inner
//! product, i.e. `W·L` is symmetric with `W = diag(v_weights)`.
//!
//! The Maxwellian used inside the operators is renormalised on the grid
//! (`Σ wⱼ M̂ⱼ² = 1`). Kernels, mass conservation and the `ε = 0` reduction
//! then hold to round-off rather than to truncation error.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase_grid::{gauss_legendre, DistributionField, PhaseGrid, Quadrature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Relaxation,
    SemiClassical,
    FokkerPlanck,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Relaxation => "relaxation",
            ModelKind::SemiClassical => "semi_classical",
            ModelKind::FokkerPlanck => "fokker_planck",
        })
    }
}

/// External potential `V(x) = amplitude · cos(k·2πx/L)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialConfig {
    pub amplitude: f64,
    pub k: u32,
    /// Smallness bound on `‖V‖_{C²}`; larger potentials are refused.
    pub epsilon_max: f64,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        PotentialConfig {
            amplitude: 0.0,
            k: 1,
            epsilon_max: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Knudsen number.
    pub kappa: f64,
    /// Statistics: +1 fermions, −1 bosons, 0 classical.
    pub epsilon: i32,
    /// Mass per unit x-volume.
    pub rho: f64,
    pub potential: Option<PotentialConfig>,
    pub poisson: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Relaxation,
            kappa: 1.0,
            epsilon: 0,
            rho: 1.0,
            potential: None,
            poisson: false,
        }
    }
}

impl ModelSpec {
    pub fn relaxation(kappa: f64) -> Self {
        ModelSpec {
            kappa,
            ..Default::default()
        }
    }

    pub fn semi_classical(kappa: f64, epsilon: i32, rho: f64) -> Self {
        ModelSpec {
            kind: ModelKind::SemiClassical,
            kappa,
            epsilon,
            rho,
            ..Default::default()
        }
    }

    pub fn fokker_planck() -> Self {
        ModelSpec {
            kind: ModelKind::FokkerPlanck,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid("model.kappa", format!("must be positive, got {}", self.kappa)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("model.rho", format!("must be positive, got {}", self.rho)));
        }
        if !(-1..=1).contains(&self.epsilon) {
            return Err(Error::invalid(
                "model.epsilon",
                format!("must be -1, 0 or 1, got {}", self.epsilon),
            ));
        }
        if self.poisson && self.kind == ModelKind::SemiClassical {
            return Err(Error::invalid(
                "model.poisson",
                "self-consistent coupling excludes the semi-classical model",
            ));
        }
        if let Some(p) = &self.potential {
            if self.kind != ModelKind::Relaxation {
                return Err(Error::invalid(
                    "model.potential",
                    "an external potential is only supported for the relaxation model",
                ));
            }
            if self.poisson {
                return Err(Error::invalid(
                    "model.potential",
                    "external and self-consistent potentials cannot be combined",
                ));
            }
            if !p.amplitude.is_finite() || !(p.epsilon_max > 0.0) {
                return Err(Error::invalid(
                    "model.potential",
                    "amplitude must be finite and epsilon_max positive",
                ));
            }
        }
        Ok(())
    }
}

/// Resolved equilibrium parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSpec {
    pub kind: ModelKind,
    /// Lagrange parameter of the semi-classical equilibrium (equals `rho`
    /// for the classical models).
    pub kappa_inf: f64,
    pub rho_inf: f64,
}

/// External potential sampled on the x grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub values: Vec<f64>,
    /// `max(|V|, |V'|, |V''|)` over the grid.
    pub c2_bound: f64,
}

impl PotentialSpec {
    pub fn new(values: Vec<f64>, grid: &PhaseGrid) -> Result<Self> {
        if values.len() != grid.n_x() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "potential.values",
                "need one finite value per x node",
            ));
        }
        let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        if mean.abs() > 1e-12 * scale {
            return Err(Error::invalid(
                "potential.values",
                format!("potential must have zero mean, got {mean:.3e}"),
            ));
        }
        let d1 = grid.dx_scalar(&values);
        let d2 = grid.dx_scalar(&d1);
        let sup = |u: &[f64]| u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let c2_bound = sup(&values).max(sup(&d1)).max(sup(&d2));
        Ok(PotentialSpec { values, c2_bound })
    }

    pub fn from_config(cfg: &PotentialConfig, grid: &PhaseGrid) -> Result<Self> {
        let k = 2.0 * PI * cfg.k as f64 / grid.length_x();
        let mut values: Vec<f64> = grid
            .x_nodes()
            .iter()
            .map(|x| cfg.amplitude * (k * x).cos())
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= mean);
        Self::new(values, grid)
    }

    pub fn gradient(&self, grid: &PhaseGrid) -> Vec<f64> {
        grid.dx_scalar(&self.values)
    }
}

/// The normalized Maxwellian `𝓜(v) = e^{−v²/2}/√(2π)` at the velocity nodes.
pub fn maxwellian(grid: &PhaseGrid) -> Vec<f64> {
    grid.v_nodes().iter().map(|&v| maxwellian_at(v)).collect()
}

pub fn maxwellian_at(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * PI).sqrt()
}

/// A model resolved on a grid: equilibrium plus assembled velocity operators.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    grid: Arc<PhaseGrid>,
    equilibrium: EquilibriumSpec,
    /// `M̂ = 𝓜^{1/2}` renormalised so that `Σ w M̂² = 1`.
    m_hat: Vec<f64>,
    l: DMatrix<f64>,
    k: DMatrix<f64>,
    lambda: DMatrix<f64>,
    /// Multiplicative collision frequency, when Λ is diagonal.
    nu: Option<Vec<f64>>,
    /// Kernel profile, unit norm in the quadrature inner product.
    kernel: Vec<f64>,
    /// Gram matrix of the Λ-norm on one velocity profile.
    lambda_gram: DMatrix<f64>,
    /// Semi-classical equilibrium `f∞` and linearisation scaling `m`.
    f_inf: Vec<f64>,
    m_scale: Vec<f64>,
}

impl Model {
    pub fn new(spec: ModelSpec, grid: &Arc<PhaseGrid>) -> Result<Self> {
        spec.validate()?;
        let n = grid.n_v();
        let w = grid.v_weights();
        let raw: Vec<f64> = maxwellian(grid).iter().map(|m| m.sqrt()).collect();
        let norm = grid.dot_v(&raw, &raw).sqrt();
        let m_hat: Vec<f64> = raw.iter().map(|m| m / norm).collect();
        let big_m: Vec<f64> = m_hat.iter().map(|m| m * m).collect();
        let wm: Vec<f64> = m_hat.iter().zip(w).map(|(m, w)| m * w).collect();
        let rank_one = |scale: f64| DMatrix::from_fn(n, n, |i, j| scale * m_hat[i] * wm[j]);
        let gram_w = DMatrix::from_diagonal(&grid.weights_vector());

        let (equilibrium, l, k, lambda, nu, kernel, gram, f_inf, m_scale) = match spec.kind {
            ModelKind::Relaxation => {
                let k = rank_one(1.0 / spec.kappa);
                let lambda = DMatrix::identity(n, n) / spec.kappa;
                let f_inf: Vec<f64> = big_m.iter().map(|m| spec.rho * m).collect();
                let m_scale: Vec<f64> = m_hat.iter().map(|m| spec.rho.sqrt() * m).collect();
                (
                    EquilibriumSpec {
                        kind: spec.kind,
                        kappa_inf: spec.rho,
                        rho_inf: spec.rho,
                    },
                    &k - &lambda,
                    k,
                    lambda,
                    Some(vec![1.0 / spec.kappa; n]),
                    m_hat.clone(),
                    gram_w,
                    f_inf,
                    m_scale,
                )
            }
            ModelKind::SemiClassical => {
                let eq = solve_kappa_inf_hat(spec.rho, spec.epsilon, grid, &big_m)?;
                let ek = spec.epsilon as f64 * eq.kappa_inf;
                let avg: f64 = big_m
                    .iter()
                    .zip(w)
                    .map(|(m, w)| w * m / (1.0 + ek * m))
                    .sum();
                let nu: Vec<f64> = big_m
                    .iter()
                    .map(|m| (1.0 + ek * m) * avg / spec.kappa)
                    .collect();
                let f_inf: Vec<f64> = big_m
                    .iter()
                    .map(|m| eq.kappa_inf * m / (1.0 + ek * m))
                    .collect();
                let m_scale: Vec<f64> = m_hat
                    .iter()
                    .zip(&big_m)
                    .map(|(mh, m)| mh * eq.kappa_inf.sqrt() / (1.0 + ek * m))
                    .collect();
                let mut kernel: Vec<f64> = f_inf.iter().zip(&m_hat).map(|(f, m)| f / m).collect();
                let kn = grid.dot_v(&kernel, &kernel).sqrt();
                kernel.iter_mut().for_each(|k| *k /= kn);
                let k = rank_one(1.0 / spec.kappa);
                let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&nu));
                (
                    eq,
                    &k - &lambda,
                    k,
                    lambda,
                    Some(nu),
                    kernel,
                    gram_w,
                    f_inf,
                    m_scale,
                )
            }
            ModelKind::FokkerPlanck => {
                let l = fokker_planck_matrix(grid, &m_hat);
                let lambda = -&l;
                let v = DMatrix::from_diagonal(&DVector::from_column_slice(grid.v_nodes()));
                let d = grid.dv_matrix();
                let gram = &v * &gram_w * &v + d.transpose() * &gram_w * d;
                let f_inf: Vec<f64> = big_m.iter().map(|m| spec.rho * m).collect();
                let m_scale: Vec<f64> = m_hat.iter().map(|m| spec.rho.sqrt() * m).collect();
                (
                    EquilibriumSpec {
                        kind: spec.kind,
                        kappa_inf: spec.rho,
                        rho_inf: spec.rho,
                    },
                    l,
                    DMatrix::zeros(n, n),
                    lambda,
                    None,
                    m_hat.clone(),
                    gram,
                    f_inf,
                    m_scale,
                )
            }
        };

        Ok(Model {
            spec,
            grid: Arc::clone(grid),
            equilibrium,
            m_hat,
            l,
            k,
            lambda,
            nu,
            kernel,
            lambda_gram: gram,
            f_inf,
            m_scale,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }
    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }
    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }
    pub fn equilibrium(&self) -> &EquilibriumSpec {
        &self.equilibrium
    }
    /// Assembled `L` acting on one velocity profile.
    pub fn l_matrix(&self) -> &DMatrix<f64> {
        &self.l
    }
    pub fn k_matrix(&self) -> &DMatrix<f64> {
        &self.k
    }
    pub fn lambda_matrix(&self) -> &DMatrix<f64> {
        &self.lambda
    }
    pub fn collision_frequency(&self) -> Option<&[f64]> {
        self.nu.as_deref()
    }
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }
    pub fn m_hat(&self) -> &[f64] {
        &self.m_hat
    }
    pub fn lambda_gram(&self) -> &DMatrix<f64> {
        &self.lambda_gram
    }
    /// Equilibrium distribution `f∞(v)`.
    pub fn f_inf(&self) -> &[f64] {
        &self.f_inf
    }
    /// Linearisation scaling: `f = f∞ + m h`.
    pub fn m_scale(&self) -> &[f64] {
        &self.m_scale
    }

    /// Gram matrix of the weighted metric `⟨Λh, h⟩` used by the fermion
    /// gap estimate; for Fokker-Planck the Λ-norm Gram.
    pub fn lambda_metric(&self) -> DMatrix<f64> {
        match &self.nu {
            Some(nu) => DMatrix::from_fn(nu.len(), nu.len(), |i, j| {
                if i == j {
                    self.grid.v_weights()[i] * nu[i]
                } else {
                    0.0
                }
            }),
            None => self.lambda_gram.clone(),
        }
    }

    /// `‖φ‖²_Λ` for the unit kernel profile.
    pub fn kernel_lambda_norm_sq(&self) -> f64 {
        let phi = DVector::from_column_slice(&self.kernel);
        (phi.transpose() * &self.lambda_gram * &phi)[(0, 0)]
    }
}

/// Fokker-Planck operator in the symmetric variable, written as
/// `L = −W⁻¹ Bᵀ Ω B` with `B h ≈ M ∂ᵥ(h/M)`.
///
/// On uniform nodes `B` uses a staggered fourth-order difference, so the
/// kernel is exactly `M̂` and the centred stencil's odd-even decoupling never
/// enters the Dirichlet form. Gauss nodes use `B = D + v/2` with the spectral
/// differentiation matrix, which avoids dividing by the Maxwellian.
fn fokker_planck_matrix(grid: &PhaseGrid, m_hat: &[f64]) -> DMatrix<f64> {
    let n = grid.n_v();
    let w = grid.v_weights();
    let v = grid.v_nodes();
    let (b, omega) = match grid.quadrature() {
        Quadrature::Uniform => {
            let h = v[1] - v[0];
            let scale = m_hat[0] / maxwellian_at(v[0]).sqrt();
            let mut b = DMatrix::zeros(n - 1, n);
            for j in 0..n - 1 {
                let vm = 0.5 * (v[j] + v[j + 1]);
                let m_mid = maxwellian_at(vm).sqrt() * scale;
                let stencil: Vec<(usize, f64)> = if j == 0 || j == n - 2 {
                    vec![(j, -1.0 / h), (j + 1, 1.0 / h)]
                } else {
                    let c = 1.0 / (24.0 * h);
                    vec![(j - 1, c), (j, -27.0 * c), (j + 1, 27.0 * c), (j + 2, -c)]
                };
                for (col, coef) in stencil {
                    b[(j, col)] = m_mid * coef / m_hat[col];
                }
            }
            (b, vec![h; n - 1])
        }
        Quadrature::Gauss => {
            let mut b = grid.dv_matrix().clone();
            for j in 0..n {
                b[(j, j)] += 0.5 * v[j];
            }
            (b, w.to_vec())
        }
    };
    let omega_b = DMatrix::from_fn(b.nrows(), n, |i, j| omega[i] * b[(i, j)]);
    let mut l = -(b.transpose() * omega_b);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] /= w[i];
        }
    }
    l
}

/// Applies `L` at every x node.
pub fn apply_l(model: &Model, h: &DistributionField) -> Result<DistributionField> {
    check_grid(model, h)?;
    Ok(h.map_velocity(&model.l))
}

/// Returns `(K h, Λ h)`.
pub fn split_k_lambda(
    model: &Model,
    h: &DistributionField,
) -> Result<(DistributionField, DistributionField)> {
    check_grid(model, h)?;
    Ok((h.map_velocity(&model.k), h.map_velocity(&model.lambda)))
}

/// Orthogonal projection on `N(L)` at every x node.
pub fn project_local(model: &Model, h: &DistributionField) -> Result<DistributionField> {
    check_grid(model, h)?;
    let grid = h.grid();
    let phi = &model.kernel;
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..grid.n_x() {
        let c = grid.dot_v(h.row(i), phi);
        out.extend(phi.iter().map(|p| c * p));
    }
    Ok(DistributionField::from_raw(grid, out))
}

/// Projection on the global kernel `N(T)`: the x-averaged local projection.
pub fn project_global(model: &Model, h: &DistributionField) -> Result<DistributionField> {
    check_grid(model, h)?;
    let c = kernel_coefficient(model, h);
    let grid = h.grid();
    let mut out = Vec::with_capacity(grid.len());
    for _ in 0..grid.n_x() {
        out.extend(model.kernel.iter().map(|p| c * p));
    }
    Ok(DistributionField::from_raw(grid, out))
}

/// x-average of `⟨h(x), φ⟩`.
pub fn kernel_coefficient(model: &Model, h: &DistributionField) -> f64 {
    let grid = h.grid();
    (0..grid.n_x())
        .map(|i| grid.dot_v(h.row(i), &model.kernel))
        .sum::<f64>()
        / grid.n_x() as f64
}

/// Conserved quantity `∫∫ h φ dx dv`.
pub fn kernel_moment(model: &Model, h: &DistributionField) -> f64 {
    kernel_coefficient(model, h) * h.grid().length_x()
}

fn check_grid(model: &Model, h: &DistributionField) -> Result<()> {
    if Arc::ptr_eq(&model.grid, h.grid()) || *model.grid == **h.grid() {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// Finds `κ∞` with `∫ κ∞𝓜/(1 + εκ∞𝓜) dv = ρ` under the grid quadrature.
pub fn solve_kappa_inf(rho: f64, epsilon: i32, grid: &PhaseGrid) -> Result<EquilibriumSpec> {
    let raw: Vec<f64> = maxwellian(grid).iter().map(|m| m.sqrt()).collect();
    let norm_sq = grid.dot_v(&raw, &raw);
    let big_m: Vec<f64> = maxwellian(grid).iter().map(|m| m / norm_sq).collect();
    solve_kappa_inf_hat(rho, epsilon, grid, &big_m)
}

fn solve_kappa_inf_hat(
    rho: f64,
    epsilon: i32,
    grid: &PhaseGrid,
    big_m: &[f64],
) -> Result<EquilibriumSpec> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid("model.rho", format!("must be positive, got {rho}")));
    }
    let eq = |kappa_inf| EquilibriumSpec {
        kind: ModelKind::SemiClassical,
        kappa_inf,
        rho_inf: rho,
    };
    let e = epsilon as f64;
    let w = grid.v_weights();
    let mass = |k: f64| -> f64 {
        big_m
            .iter()
            .zip(w)
            .map(|(m, w)| w * k * m / (1.0 + e * k * m))
            .sum()
    };
    let total: f64 = big_m.iter().zip(w).map(|(m, w)| m * w).sum();
    if epsilon == 0 {
        return Ok(eq(rho / total));
    }

    let (mut lo, mut hi) = (0.0, rho / total);
    if epsilon > 0 {
        let mut iters = 0;
        while mass(hi) < rho {
            hi *= 2.0;
            iters += 1;
            if iters > 200 {
                return Err(Error::NoConvergence("fermion equilibrium bracket".into()));
            }
        }
    } else {
        let m_max = big_m.iter().fold(0.0f64, |a, &b| a.max(b));
        let critical = (2.0 * PI).sqrt().min(1.0 / m_max);
        hi = critical * (1.0 - 1e-8);
        if mass(hi) < rho {
            return Err(Error::invalid(
                "model.rho",
                format!(
                    "boson mass {rho} needs kappa_inf at or beyond the regularity bound {critical:.6}"
                ),
            ));
        }
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = if (mass(lo) - rho).abs() < (mass(hi) - rho).abs() {
        lo
    } else {
        hi
    };
    if (mass(k) - rho).abs() > 1e-10 * rho {
        return Err(Error::NoConvergence("equilibrium mass root".into()));
    }
    Ok(eq(k))
}

/// Symmetrised bilinear remainder of the semi-classical model,
/// `Γ(h,h) = (ε√κ∞/κ) h ∫ h′M′(𝓜′ − 𝓜)/(1 + εκ∞𝓜′) dv′`.
/// The linear models have `Γ ≡ 0`.
pub fn gamma_bilinear(
    model: &Model,
    h1: &DistributionField,
    h2: &DistributionField,
) -> Result<DistributionField> {
    check_grid(model, h1)?;
    check_grid(model, h2)?;
    let grid = h1.grid();
    if model.kind() != ModelKind::SemiClassical || model.spec.epsilon == 0 {
        return Ok(DistributionField::zeros(grid));
    }
    let e = model.spec.epsilon as f64;
    let kinf = model.equilibrium.kappa_inf;
    let c = e * kinf.sqrt() / model.spec.kappa;
    let big_m: Vec<f64> = model.m_hat.iter().map(|m| m * m).collect();
    let a: Vec<f64> = model
        .m_hat
        .iter()
        .zip(&big_m)
        .map(|(mh, m)| mh * m / (1.0 + e * kinf * m))
        .collect();
    let b: Vec<f64> = model
        .m_hat
        .iter()
        .zip(&big_m)
        .map(|(mh, m)| mh / (1.0 + e * kinf * m))
        .collect();
    let nv = grid.n_v();
    let mut out = vec![0.0; grid.len()];
    for i in 0..grid.n_x() {
        let (r1, r2) = (h1.row(i), h2.row(i));
        let (a1, b1) = (grid.dot_v(r1, &a), grid.dot_v(r1, &b));
        let (a2, b2) = (grid.dot_v(r2, &a), grid.dot_v(r2, &b));
        for j in 0..nv {
            let g12 = r1[j] * (a2 - big_m[j] * b2);
            let g21 = r2[j] * (a1 - big_m[j] * b1);
            out[i * nv + j] = 0.5 * c * (g12 + g21);
        }
    }
    Ok(DistributionField::from_raw(grid, out))
}

/// Nonlinear collision operator acting on the distribution `f`.
///
/// Output mass vanishes to round-off for every model.
pub fn apply_q_nonlinear(model: &Model, f: &DistributionField) -> Result<DistributionField> {
    check_grid(model, f)?;
    let grid = f.grid();
    let nv = grid.n_v();
    let kappa = model.spec.kappa;
    let big_m: Vec<f64> = model.m_hat.iter().map(|m| m * m).collect();
    let mut out = vec![0.0; grid.len()];
    match model.kind() {
        ModelKind::Relaxation | ModelKind::SemiClassical => {
            let e = if model.kind() == ModelKind::SemiClassical {
                model.spec.epsilon as f64
            } else {
                0.0
            };
            let ones = vec![1.0; nv];
            for i in 0..grid.n_x() {
                let row = f.row(i);
                let rho = grid.dot_v(row, &ones);
                let mf = grid.dot_v(row, &big_m);
                for j in 0..nv {
                    let gain = big_m[j] * (1.0 - e * row[j]) * rho;
                    let loss = row[j] * (1.0 - e * mf);
                    out[i * nv + j] = (gain - loss) / kappa;
                }
            }
        }
        ModelKind::FokkerPlanck => {
            let mut g = vec![0.0; nv];
            for i in 0..grid.n_x() {
                let row = f.row(i);
                for j in 0..nv {
                    g[j] = row[j] / model.m_hat[j];
                }
                let lg = &model.l * DVector::from_column_slice(&g);
                for j in 0..nv {
                    out[i * nv + j] = model.m_hat[j] * lg[j];
                }
            }
        }
    }
    Ok(DistributionField::from_raw(grid, out))
}

/// Collision frequency `ν(v) = C_Φ ∫ |v − v*|^γ 𝓜(v*) dv*` of a hard
/// potential in one dimension.
///
/// The integrand has a kink at `v* = v`, so the integral is split there and
/// each half is integrated with Gauss-Legendre panels graded geometrically
/// toward the kink.
pub fn collision_frequency_boltzmann(gamma_exp: f64, c_phi: f64, v_nodes: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma_exp) {
        return Err(Error::invalid(
            "gamma_exp",
            format!("hard potentials need gamma in [0, 1], got {gamma_exp}"),
        ));
    }
    let (t, w) = gauss_legendre(20);
    let panel = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| -> f64 {
        let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
        t.iter().zip(&w).map(|(t, w)| w * f(c + r * t)).sum::<f64>() * r
    };
    Ok(v_nodes
        .iter()
        .map(|&v| {
            let f = |u: f64| u.powf(gamma_exp) * (maxwellian_at(v - u) + maxwellian_at(v + u));
            let u_max = v.abs() + 14.0;
            let mut edges = vec![0.0];
            let mut a = 1e-3;
            while a < 1.0 {
                edges.push(a);
                a *= 4.0;
            }
            let mut a = 1.0;
            while a < u_max {
                edges.push(a);
                a += 1.0;
            }
            edges.push(u_max);
            // the first panel carries the u^γ singularity; it is tiny
            c_phi * edges.windows(2).map(|e| panel(e[0], e[1], &f)).sum::<f64>()
        })
        .collect())
}
