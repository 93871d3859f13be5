//! Hypothesis constants measured on the assembled velocity operators, the
//! weight-selection recipe for the first-order Lyapunov functional, explicit
//! spectral-gap formulas and dense eigensolve oracles.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypocoercivity::LyapunovWeights;
use crate::linalg::{
    eigenvalues_general, max_real_eigenvalue_complex, restricted_pencil, sym_gen_eig,
    sym_gen_eigenvalues, symmetrize,
};
use crate::models::{maxwellian_at, Model, ModelKind};

/// Relative slack applied to measured constants, in the conservative
/// direction, so that the extremal eigenvectors themselves pass.
const SLACK: f64 = 1e-9;
/// Floor for constants that may vanish on a given model (ν₄).
const FLOOR: f64 = 1e-12;
/// Certification tolerance on relative margins.
const CERT_TOL: f64 = 1e-8;
/// Dense limit for the full transport-collision operator.
pub const ABSCISSA_LIMIT: usize = 8192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisMargin {
    pub inequality: String,
    /// `min (rhs − lhs)/scale` over all tested fields; non-negative means
    /// the inequality held everywhere.
    pub worst_relative_margin: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoercivityConstants {
    pub nu0: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub nu3: f64,
    pub nu4: f64,
    pub nu5: f64,
    pub nu6: f64,
    pub c_l: f64,
    pub lambda_local: f64,
    /// `(δ, C(δ))` pairs, including `δ*`.
    pub c_delta: Vec<(f64, f64)>,
    pub delta_star: f64,
    pub c_delta_star: f64,
    pub c_p: f64,
    /// `‖φ‖²_Λ` of the unit kernel profile.
    pub kernel_lambda_norm_sq: f64,
    pub margins: Vec<HypothesisMargin>,
}

/// Constants `C₁`, `C₂` of the v-gradient differential inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step3Constants {
    pub delta_star: f64,
    pub d: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Inputs of the weight recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightInputs {
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    pub c_l: f64,
    pub nu3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    Lambda,
}

/// Per-velocity operator data shared by the measurements.
struct Assembled {
    w: DMatrix<f64>,
    g: DMatrix<f64>,
    d: DMatrix<f64>,
    wl: DMatrix<f64>,
    wlambda: DMatrix<f64>,
    /// `sym(Λᵀ Dᵀ W D)`: the form `⟨∂ᵥΛh, ∂ᵥh⟩`.
    dlam: DMatrix<f64>,
    /// `sym(Kᵀ Dᵀ W D)`: the form `⟨∂ᵥKh, ∂ᵥh⟩`.
    dk: DMatrix<f64>,
    dwd: DMatrix<f64>,
    dgd: DMatrix<f64>,
    u: DVector<f64>,
}

impl Assembled {
    fn new(model: &Model) -> Self {
        let grid = model.grid();
        let w = DMatrix::from_diagonal(&grid.weights_vector());
        let d = grid.dv_matrix().clone();
        let g = model.lambda_gram().clone();
        let wl = symmetrize(&(&w * model.l_matrix()));
        let wlambda = symmetrize(&(&w * model.lambda_matrix()));
        let dwd = symmetrize(&(d.transpose() * &w * &d));
        let dlam = symmetrize(&(model.lambda_matrix().transpose() * &dwd));
        let dk = symmetrize(&(model.k_matrix().transpose() * &dwd));
        let dgd = symmetrize(&(d.transpose() * &g * &d));
        let u = &w * DVector::from_column_slice(model.kernel());
        Assembled {
            w,
            g,
            d,
            wl,
            wlambda,
            dlam,
            dk,
            dwd,
            dgd,
            u,
        }
    }

    fn q(&self, m: &DMatrix<f64>, p: &DVector<f64>) -> f64 {
        (p.transpose() * m * p)[(0, 0)]
    }
}

fn max_eig(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    Ok(*sym_gen_eigenvalues(a, b)?.last().expect("nonempty"))
}

fn min_eig(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_gen_eigenvalues(a, b)?[0])
}

/// `C(δ) = sup [⟨∂ᵥKh, ∂ᵥh⟩ − δ‖∂ᵥh‖²]/‖h‖²`, clamped at zero.
pub fn c_delta(model: &Model, delta: f64) -> Result<f64> {
    let a = Assembled::new(model);
    c_delta_assembled(&a, delta)
}

fn c_delta_assembled(a: &Assembled, delta: f64) -> Result<f64> {
    if a.dk.iter().all(|x| *x == 0.0) {
        return Ok(0.0);
    }
    let m = &a.dk - &a.dwd * delta;
    Ok(max_eig(&m, &a.w)?.max(0.0) * (1.0 + SLACK))
}

/// Measures the hypothesis constants on the model's velocity grid and
/// certifies them on `n_samples` random smooth profiles plus the extremal
/// eigenvectors.
pub fn measure_constants(model: &Model, n_samples: usize, seed: u64) -> Result<CoercivityConstants> {
    if n_samples < 100 {
        return Err(Error::invalid(
            "constants.n_samples",
            format!("need at least 100 samples, got {n_samples}"),
        ));
    }
    let grid = model.grid();
    let a = Assembled::new(model);

    let (nu1, nu2) = match model.collision_frequency() {
        Some(nu) => (
            nu.iter().cloned().fold(f64::INFINITY, f64::min),
            nu.iter().cloned().fold(0.0, f64::max),
        ),
        None => {
            let (restricted, _) = restricted_pencil(&a.wlambda, &a.g, &a.u)?;
            (restricted[0], max_eig(&a.wlambda, &a.g)?)
        }
    };
    let nu1 = nu1 * (1.0 - SLACK);
    let nu2 = nu2 * (1.0 + SLACK);
    let g_over_w = min_eig(&a.g, &a.w)?;
    let nu0 = nu1 * g_over_w * (1.0 - SLACK);

    let nu3 = nu1 / 2.0;
    let nu4 = max_eig(&(&a.dgd * nu3 - &a.dlam), &a.w)?.max(FLOOR) * (1.0 + SLACK);

    let nu5 = nu1 / 2.0;
    let d2 = &a.d * &a.d;
    let d2gd2 = symmetrize(&(d2.transpose() * &a.g * &d2));
    let d2lam = symmetrize(&(model.lambda_matrix().transpose() * d2.transpose() * &a.w * &d2));
    let h1_metric = &a.w + &a.dwd;
    let nu6_vv = max_eig(&(d2gd2 * nu5 - d2lam), &h1_metric)?;
    let nu6 = nu4.max(nu6_vv.max(FLOOR) * (1.0 + SLACK));

    let (cl_vals, _) = sym_gen_eig(&a.wl, &a.g)?;
    let c_l = cl_vals.iter().fold(0.0f64, |m, v| m.max(v.abs())) * (1.0 + SLACK);

    let (lam_vals, _) = restricted_pencil(&(-&a.wl), &a.g, &a.u)?;
    let lambda_local = lam_vals[0] * (1.0 - SLACK);

    let delta_star = (nu0 / nu1) * (nu3 / 4.0);
    let c_delta_star = c_delta_assembled(&a, delta_star)?;
    let mut c_delta = Vec::new();
    for f in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let d = delta_star * f;
        c_delta.push((d, if f == 1.0 { c_delta_star } else { c_delta_assembled(&a, d)? }));
    }
    let delta_ho = nu5 * nu0 / (2.0 * nu1);
    c_delta.push((delta_ho, c_delta_assembled(&a, delta_ho)?));

    let length = grid.length_x();
    let c_p = (length / (2.0 * PI)).powi(2);

    let mut consts = CoercivityConstants {
        nu0,
        nu1,
        nu2,
        nu3,
        nu4,
        nu5,
        nu6,
        c_l,
        lambda_local,
        c_delta,
        delta_star,
        c_delta_star,
        c_p,
        kernel_lambda_norm_sq: model.kernel_lambda_norm_sq(),
        margins: Vec::new(),
    };
    consts.margins = certify(model, &a, &consts, n_samples, seed)?;
    Ok(consts)
}

/// Random smooth velocity profiles: polynomial times Gaussian envelope.
pub fn random_profiles(v_nodes: &[f64], count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let degree = rng.random_range(0..6usize);
            let coef: Vec<f64> = (0..=degree).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s: f64 = rng.random_range(0.7..1.3);
            let shift: f64 = rng.random_range(-0.5..0.5);
            DVector::from_iterator(
                v_nodes.len(),
                v_nodes.iter().map(|&v| {
                    let p = coef.iter().rev().fold(0.0, |acc, c| acc * v + c);
                    p * (-(v - shift).powi(2) / (4.0 * s * s)).exp()
                }),
            )
        })
        .collect()
}

fn certify(
    model: &Model,
    a: &Assembled,
    c: &CoercivityConstants,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<HypothesisMargin>> {
    let mut profiles = random_profiles(model.grid().v_nodes(), n_samples, seed);
    // extremal directions of each pencil
    for (m, b) in [
        (&a.wlambda, &a.g),
        (&a.g, &a.w),
        (&a.wl, &a.g),
        (&a.dlam, &a.w),
        (&a.dk, &a.w),
    ] {
        let (_, vecs) = sym_gen_eig(m, b)?;
        let n = vecs.ncols();
        profiles.push(vecs.column(0).into_owned());
        profiles.push(vecs.column(n - 1).into_owned());
    }
    let (_, vecs) = restricted_pencil(&(-&a.wl), &a.g, &a.u)?;
    profiles.push(vecs.column(0).into_owned());

    let phi = DVector::from_column_slice(model.kernel());
    let samples = profiles.len();
    // worst margins for: H1a, H1b, H1c, H1d, C^L, H2(δ*), H3
    let worst: Vec<[f64; 7]> = profiles
        .par_iter()
        .map(|p| {
            let l2 = a.q(&a.w, p);
            let lam_norm = a.q(&a.g, p);
            let lam_form = a.q(&a.wlambda, p);
            let dv_l2 = a.q(&a.dwd, p);
            let dv_lam = a.q(&a.dgd, p);
            let dlam = a.q(&a.dlam, p);
            let dk = a.q(&a.dk, p);
            let lform = a.q(&a.wl, p);
            let coef = (phi.transpose() * &a.w * p)[(0, 0)];
            let perp = p - &phi * coef;
            let perp_lam = a.q(&a.g, &perp);
            let perp_form = a.q(&a.wlambda, &perp);
            let rel = |rhs: f64, lhs: f64, scale: f64| (rhs - lhs) / scale.max(f64::MIN_POSITIVE);
            // the ν₁ lower bound only holds off the kernel when K = 0
            // Off-kernel forms are scaled by the full profile so that
            // near-kernel directions do not amplify round-off.
            let h1b = if model.collision_frequency().is_some() {
                rel(lam_form, c.nu1 * lam_norm, lam_form.abs() + lam_norm)
            } else {
                rel(perp_form, c.nu1 * perp_lam, perp_form.abs() + lam_norm)
            };
            [
                rel(c.nu1 * lam_norm, c.nu0 * l2, lam_norm + l2),
                h1b,
                rel(c.nu2 * lam_norm, lam_form, lam_form.abs() + lam_norm),
                rel(dlam, c.nu3 * dv_lam - c.nu4 * l2, dlam.abs() + dv_lam + l2),
                rel(c.c_l * lam_norm, lform.abs(), lform.abs() + lam_norm),
                rel(
                    c.c_delta_star * l2 + c.delta_star * dv_l2,
                    dk,
                    dk.abs() + l2 + dv_l2,
                ),
                rel(-c.lambda_local * perp_lam, lform, lform.abs() + lam_norm),
            ]
        })
        .collect();
    let names = [
        "nu0 |h|^2 <= nu1 |h|_L^2",
        "nu1 |h|_L^2 <= <Lambda h, h>",
        "<Lambda h, h> <= nu2 |h|_L^2",
        "<dv Lambda h, dv h> >= nu3 |dv h|_L^2 - nu4 |h|^2",
        "<L h, h> <= C^L |h|_L^2",
        "<dv K h, dv h> <= C(delta*) |h|^2 + delta* |dv h|^2",
        "<L h, h> <= -lambda |h - Pi h|_L^2",
    ];
    let mut margins = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let m = worst.iter().map(|w| w[k]).fold(f64::INFINITY, f64::min);
        if m < -CERT_TOL {
            return Err(Error::HypothesisViolated {
                inequality: name.to_string(),
                margin: m,
            });
        }
        margins.push(HypothesisMargin {
            inequality: name.to_string(),
            worst_relative_margin: m,
            samples,
        });
    }
    Ok(margins)
}

/// Constants `C₁ = 2D ν₁/ν₀` and `C₂ = 2D C_P + 2ν₁/(ν₀ν₃)` with
/// `D = 2C(δ*) + 2ν₄` and `δ* = (ν₀/ν₁)(ν₃/4)`.
pub fn step3_constants(c: &CoercivityConstants) -> Step3Constants {
    let ratio = c.nu1 / c.nu0;
    let d = 2.0 * c.c_delta_star + 2.0 * c.nu4;
    Step3Constants {
        delta_star: c.delta_star,
        d,
        c1: 2.0 * d * ratio,
        c2: 2.0 * d * c.c_p + 2.0 * ratio / c.nu3,
    }
}

pub fn weight_inputs(c: &CoercivityConstants) -> WeightInputs {
    let s = step3_constants(c);
    WeightInputs {
        lambda: c.lambda_local,
        c1: s.c1,
        c2: s.c2,
        c_l: c.c_l,
        nu3: c.nu3,
    }
}

pub fn select_weights(c: &CoercivityConstants) -> Result<LyapunovWeights> {
    select_weights_from(&weight_inputs(c))
}

/// The weight recipe: `β = 2/ν₃`, then `A`, `γ`, `η`, `α` each twice the
/// least value satisfying its inequality.
pub fn select_weights_from(inp: &WeightInputs) -> Result<LyapunovWeights> {
    let WeightInputs {
        lambda,
        c1,
        c2,
        c_l,
        nu3,
    } = *inp;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(
            "lambda",
            format!("local coercivity constant must be positive, got {lambda}"),
        ));
    }
    for (name, v) in [("c1", c1), ("c2", c2), ("c_l", c_l)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(
                name,
                format!("must be finite and non-negative, got {v}"),
            ));
        }
    }
    if !(nu3 > 0.0) || !nu3.is_finite() {
        return Err(Error::invalid("nu3", format!("must be positive, got {nu3}")));
    }
    let beta = 2.0 / nu3;
    let a = 2.0 * (beta * c1 + 1.0) / (2.0 * lambda);
    let gamma = 2.0 * (c2 * beta + 1.0);
    let eta = 2.0 * gamma * c_l / (beta * nu3 - 1.0);
    let eta = if eta > 0.0 { eta } else { 1.0 };
    let alpha = 2.0
        * ((eta * gamma * c_l + 1.0) / (2.0 * lambda))
            .max(gamma * gamma / beta)
            .max(beta);
    let w = LyapunovWeights {
        a,
        alpha,
        beta,
        gamma_mix: gamma,
        eta,
        order: 1,
    };
    if [a, alpha, beta, gamma, eta].iter().any(|x| !x.is_finite()) {
        return Err(Error::Infeasible(format!("non-finite weights {w:?}")));
    }
    if check_weight_conditions(inp, &w).iter().any(|(_, ok)| !ok) {
        return Err(Error::Infeasible(format!("postcondition failed for {w:?}")));
    }
    Ok(w)
}

/// Evaluates the six weight conditions directly.
pub fn check_weight_conditions(inp: &WeightInputs, w: &LyapunovWeights) -> [(&'static str, bool); 6] {
    let WeightInputs {
        lambda,
        c1,
        c2,
        c_l,
        nu3,
    } = *inp;
    let (a, al, b, g, e) = (w.a, w.alpha, w.beta, w.gamma_mix, w.eta);
    [
        ("beta C1 - 2 A lambda <= -1", b * c1 - 2.0 * a * lambda <= -1.0),
        ("C2 beta - gamma <= -1", c2 * b - g <= -1.0),
        ("gamma C^L / eta - beta nu3 <= -1", g * c_l / e - b * nu3 <= -1.0),
        ("eta gamma C^L - 2 alpha lambda <= -1", e * g * c_l - 2.0 * al * lambda <= -1.0),
        ("gamma^2 < alpha beta", g * g < al * b),
        ("alpha >= beta", al >= b),
    ]
}

/// Spectral gap `1/κ` of the linear relaxation operator.
pub fn gap_bgk(kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::invalid("model.kappa", format!("must be positive, got {kappa}")));
    }
    Ok(1.0 / kappa)
}

/// Lower bound `[1 − ∫f∞³/ρ] / (1 + κ∞𝓜(0))` on the fermion gap measured
/// in the collision-frequency weighted metric.
pub fn gap_bound_fermion(model: &Model) -> Result<f64> {
    if model.kind() != ModelKind::SemiClassical || model.spec().epsilon != 1 {
        return Err(Error::Unsupported {
            model: model.kind().to_string(),
            reason: "the gap bound is stated for fermions only".into(),
        });
    }
    let grid = model.grid();
    let eq = model.equilibrium();
    let f3: Vec<f64> = model.f_inf().iter().map(|f| f * f * f).collect();
    let cubic = grid.dot_v(&f3, &vec![1.0; grid.n_v()]);
    let rho = grid.dot_v(model.f_inf(), &vec![1.0; grid.n_v()]);
    let nu_bar_scaled = 1.0 + eq.kappa_inf * maxwellian_at(0.0);
    Ok((1.0 - cubic / rho) / nu_bar_scaled)
}

/// `(ν₀/ν₁)·λ`.
pub fn lambda_from_local(c: &CoercivityConstants) -> f64 {
    c.nu0 / c.nu1 * c.lambda_local
}

/// Smallest eigenvalue of `−L` on the complement of its kernel, with the
/// Rayleigh quotient taken in the chosen metric.
pub fn numeric_gap(model: &Model, metric: Metric) -> Result<f64> {
    let grid = model.grid();
    if grid.n_v() > 512 {
        return Err(Error::TooLarge {
            size: grid.n_v(),
            limit: 512,
        });
    }
    let w = DMatrix::from_diagonal(&grid.weights_vector());
    let a = symmetrize(&(-(&w * model.l_matrix())));
    let b = match metric {
        Metric::L2 => w.clone(),
        Metric::Lambda => model.lambda_metric(),
    };
    let u = &w * DVector::from_column_slice(model.kernel());
    let (vals, _) = restricted_pencil(&a, &b, &u)?;
    Ok(vals[0])
}

/// Sharp constant of `∫|∂ᵥh + (v/2)h|² ≥ c‖h‖²` on the kernel complement.
pub fn fp2_constant(model: &Model) -> Result<f64> {
    if model.kind() != ModelKind::FokkerPlanck {
        return Err(Error::Unsupported {
            model: model.kind().to_string(),
            reason: "the Dirichlet-form constant is defined for Fokker-Planck".into(),
        });
    }
    numeric_gap(model, Metric::L2)
}

/// Spectral abscissa of `T = L − v∂ₓ` restricted to the complement of its
/// kernel, from a dense real Schur decomposition of the full operator.
///
/// The unresolved Nyquist x-mode is removed together with the kernel; on
/// that mode the discrete derivative vanishes and `T` would reduce to `L`,
/// whose kernel would masquerade as a zero eigenvalue.
pub fn numeric_abscissa(model: &Model) -> Result<f64> {
    abscissa_of(model.l_matrix(), model)
}

pub(crate) fn abscissa_of(l: &DMatrix<f64>, model: &Model) -> Result<f64> {
    let grid = model.grid();
    let (nx, nv) = (grid.n_x(), grid.n_v());
    let size = nx * nv;
    if size > ABSCISSA_LIMIT {
        return Err(Error::TooLarge {
            size,
            limit: ABSCISSA_LIMIT,
        });
    }
    let mut dx = DMatrix::zeros(nx, nx);
    for j in 0..nx {
        let mut e = vec![0.0; nx];
        e[j] = 1.0;
        let col = grid.dx_scalar(&e);
        for i in 0..nx {
            dx[(i, j)] = col[i];
        }
    }
    let v = grid.v_nodes();
    let mut t = DMatrix::zeros(size, size);
    for i in 0..nx {
        for a in 0..nv {
            for b in 0..nv {
                t[(i * nv + a, i * nv + b)] += l[(a, b)];
            }
            for k in 0..nx {
                t[(i * nv + a, k * nv + a)] -= dx[(i, k)] * v[a];
            }
        }
    }
    let norm_inf = (0..size)
        .map(|r| t.row(r).iter().map(|x: &f64| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let sigma = 1.0 + norm_inf;
    let phi = DVector::from_column_slice(model.kernel());
    let wphi = DVector::from_iterator(nv, phi.iter().zip(grid.v_weights()).map(|(p, w)| p * w));
    let kernel_proj = &phi * wphi.transpose();
    let nyquist = grid.nyquist_bin().is_some();
    for i in 0..nx {
        for k in 0..nx {
            let z = 1.0 / nx as f64;
            let n = if nyquist {
                let s = if (i + k) % 2 == 0 { 1.0 } else { -1.0 };
                s / nx as f64
            } else {
                0.0
            };
            for a in 0..nv {
                for b in 0..nv {
                    let mut x = -n * l[(a, b)] - sigma * z * kernel_proj[(a, b)];
                    if a == b {
                        x -= sigma * n;
                    }
                    t[(i * nv + a, k * nv + b)] += x;
                }
            }
        }
    }
    let ev = eigenvalues_general(t)?;
    Ok(ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Abscissa computed mode by mode: `L − ikv` for each resolved wavenumber,
/// plus the kernel-deflated `L` for `k = 0`.
pub fn numeric_abscissa_modes(model: &Model) -> Result<f64> {
    let grid = model.grid();
    let nv = grid.n_v();
    let w = DMatrix::from_diagonal(&grid.weights_vector());
    let a = symmetrize(&(-(&w * model.l_matrix())));
    let u = &w * DVector::from_column_slice(model.kernel());
    let mut best = -restricted_pencil(&a, &w, &u)?.0[0];
    let v = grid.v_nodes();
    for m in 1..grid.n_x() {
        let k = grid.wavenumbers()[m];
        if k <= 0.0 {
            continue;
        }
        let t = DMatrix::from_fn(nv, nv, |i, j| {
            let mut z = Complex64::new(model.l_matrix()[(i, j)], 0.0);
            if i == j {
                z -= Complex64::new(0.0, k * v[i]);
            }
            z
        });
        best = best.max(max_real_eigenvalue_complex(&t)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use crate::phase_grid::{build_grid, PhaseGrid, Quadrature};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn grid(nx: usize, nv: usize, vmax: f64) -> Arc<PhaseGrid> {
        Arc::new(build_grid(nx, 2.0 * PI, nv, vmax, Quadrature::Uniform).unwrap())
    }

    fn unit_inputs() -> WeightInputs {
        WeightInputs {
            lambda: 1.0,
            c1: 1.0,
            c2: 1.0,
            c_l: 1.0,
            nu3: 1.0,
        }
    }

    #[test]
    fn worked_weight_tuple() {
        let w = select_weights_from(&unit_inputs()).unwrap();
        assert_eq!((w.beta, w.a, w.gamma_mix, w.eta, w.alpha), (2.0, 3.0, 6.0, 12.0, 73.0));
        // the least admissible values named for this tuple
        assert!(w.a >= 1.5 && w.gamma_mix >= 3.0 && w.eta >= 3.0 && w.alpha >= 5.0);
        for (name, ok) in check_weight_conditions(&unit_inputs(), &w) {
            assert!(ok, "{name}");
        }
    }

    #[test]
    fn weights_need_a_gap() {
        let mut inp = unit_inputs();
        inp.lambda = 0.0;
        assert!(matches!(select_weights_from(&inp), Err(Error::InvalidParameter { .. })));
        inp.lambda = f64::NAN;
        assert!(select_weights_from(&inp).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn weights_satisfy_all_conditions(
            l in -4.0f64..4.0, c1 in -4.0f64..4.0, c2 in -4.0f64..4.0,
            cl in -4.0f64..4.0, nu3 in -4.0f64..4.0,
        ) {
            let inp = WeightInputs {
                lambda: 10f64.powf(l), c1: 10f64.powf(c1), c2: 10f64.powf(c2),
                c_l: 10f64.powf(cl), nu3: 10f64.powf(nu3),
            };
            let w = select_weights_from(&inp).unwrap();
            for (name, ok) in check_weight_conditions(&inp, &w) {
                prop_assert!(ok, "{}", name);
            }
        }
    }

    #[test]
    fn bgk_gap_formula() {
        assert_eq!(gap_bgk(1.0).unwrap(), 1.0);
        assert_eq!(gap_bgk(0.5).unwrap(), 2.0);
        assert!(gap_bgk(0.0).is_err());
        assert!(gap_bgk(2.0).unwrap() < gap_bgk(1.5).unwrap());
        for kappa in [0.5, 1.0, 3.0] {
            let m = Model::new(ModelSpec::relaxation(kappa), &grid(4, 64, 8.0)).unwrap();
            assert_abs_diff_eq!(numeric_gap(&m, Metric::L2).unwrap(), 1.0 / kappa, epsilon = 1e-10);
        }
    }

    #[test]
    fn relaxation_constants() {
        let m = Model::new(ModelSpec::relaxation(1.0), &grid(4, 48, 8.0)).unwrap();
        let c = measure_constants(&m, 100, 1).unwrap();
        for v in [c.nu0, c.nu1, c.nu2, c.lambda_local, c.c_l] {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-8);
        }
        assert!(c.c_delta_star > 0.0);
        assert!(lambda_from_local(&c) <= numeric_gap(&m, Metric::L2).unwrap() + 1e-10);
        assert_abs_diff_eq!(lambda_from_local(&c), 1.0, epsilon = 1e-8);
        assert!(c.margins.iter().all(|m| m.worst_relative_margin >= -CERT_TOL));
        let w = select_weights(&c).unwrap();
        assert!(w.gamma_mix.powi(2) < w.alpha * w.beta && w.alpha >= w.beta);
    }

    #[test]
    fn lambda_from_local_is_ratio_invariant() {
        let m = Model::new(ModelSpec::relaxation(1.0), &grid(4, 32, 8.0)).unwrap();
        let mut c = measure_constants(&m, 100, 1).unwrap();
        let base = lambda_from_local(&c);
        c.nu0 *= 3.0;
        c.nu1 *= 3.0;
        assert_abs_diff_eq!(lambda_from_local(&c), base, epsilon = 1e-14);
        c.nu0 = c.nu1;
        assert_eq!(lambda_from_local(&c), c.lambda_local);
    }

    #[test]
    fn fokker_planck_constants_and_gap() {
        let m = Model::new(ModelSpec::fokker_planck(), &grid(4, 128, 10.0)).unwrap();
        let gap = numeric_gap(&m, Metric::L2).unwrap();
        assert_abs_diff_eq!(gap, 1.0, epsilon = 1e-3);
        let c = measure_constants(&m, 100, 3).unwrap();
        assert!(c.nu3 > 0.0 && c.nu0 > 0.0 && c.lambda_local > 0.0);
        assert_eq!(c.c_delta_star, 0.0);
        // ‖h‖²_Λ ≥ ‖h‖²: the Gram bound is 1 up to discretisation
        assert!(c.nu0 / c.nu1 > 0.99);
    }

    #[test]
    fn fokker_planck_gap_refinement() {
        let a = numeric_gap(&Model::new(ModelSpec::fokker_planck(), &grid(4, 128, 10.0)).unwrap(), Metric::L2)
            .unwrap();
        let b = numeric_gap(&Model::new(ModelSpec::fokker_planck(), &grid(4, 256, 10.0)).unwrap(), Metric::L2)
            .unwrap();
        assert!((a - b).abs() / b < 1e-3);
    }

    #[test]
    fn semi_classical_constants() {
        let g = grid(4, 64, 8.0);
        let m = Model::new(ModelSpec::semi_classical(1.0, 1, 1.0), &g).unwrap();
        let c = measure_constants(&m, 100, 5).unwrap();
        let nu = m.collision_frequency().unwrap();
        let (lo, hi) = nu.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(c.c_l <= hi / lo);
        let bound = gap_bound_fermion(&m).unwrap();
        assert!(bound > 0.0);
        assert!(numeric_gap(&m, Metric::Lambda).unwrap() >= bound);
        let eps0 = Model::new(ModelSpec::semi_classical(1.0, 0, 1.0), &g).unwrap();
        let bgk = Model::new(ModelSpec::relaxation(1.0), &g).unwrap();
        assert_abs_diff_eq!(
            numeric_gap(&eps0, Metric::L2).unwrap(),
            numeric_gap(&bgk, Metric::L2).unwrap(),
            epsilon = 1e-12
        );
        assert!(gap_bound_fermion(&bgk).is_err());
    }

    #[test]
    fn fermion_bound_small_mass_limit() {
        let g = grid(4, 64, 8.0);
        let mut prev = 0.0;
        let mut gaps = Vec::new();
        for rho in [1.0, 0.3, 0.1, 0.03, 0.01, 0.001] {
            let m = Model::new(ModelSpec::semi_classical(1.0, 1, rho), &g).unwrap();
            let b = gap_bound_fermion(&m).unwrap();
            let limit = 1.0 / (1.0 + m.equilibrium().kappa_inf * maxwellian_at(0.0));
            assert!(b < limit);
            assert!(b > prev);
            prev = b;
            gaps.push(limit - b);
        }
        assert!(gaps.last().unwrap() < &1e-3);
    }

    #[test]
    fn c_delta_of_relaxation() {
        let m = Model::new(ModelSpec::relaxation(1.0), &grid(4, 64, 8.0)).unwrap();
        // K = M⟨·,M⟩ gives ⟨∂K h, ∂h⟩ ≤ |∂M|²|h|²/(4δ) + δ|∂h|², |∂M|² = 1/4
        for delta in [0.05, 0.1, 0.5] {
            let c = c_delta(&m, delta).unwrap();
            assert!(c <= 0.25 / (4.0 * delta) * (1.0 + 1e-6), "{c}");
            assert!(c > 0.0);
        }
    }

    #[test]
    fn step3_replay() {
        let c = CoercivityConstants {
            nu0: 0.5,
            nu1: 1.0,
            nu2: 1.0,
            nu3: 0.5,
            nu4: 0.1,
            nu5: 0.5,
            nu6: 0.1,
            c_l: 1.0,
            lambda_local: 1.0,
            c_delta: vec![],
            delta_star: 0.0625,
            c_delta_star: 0.2,
            c_p: 1.0,
            kernel_lambda_norm_sq: 1.0,
            margins: vec![],
        };
        let s = step3_constants(&c);
        assert_abs_diff_eq!(s.d, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(s.c1, 2.4, epsilon = 1e-15);
        assert_abs_diff_eq!(s.c2, 1.2 + 8.0, epsilon = 1e-15);
    }

    #[test]
    fn abscissa_bgk_and_transport() {
        let g = grid(16, 32, 8.0);
        let m = Model::new(ModelSpec::relaxation(1.0), &g).unwrap();
        let full = numeric_abscissa(&m).unwrap();
        let modes = numeric_abscissa_modes(&m).unwrap();
        assert!(full < 0.0);
        assert_abs_diff_eq!(full, modes, epsilon = 1e-8);
        let zero = DMatrix::zeros(32, 32);
        assert_abs_diff_eq!(abscissa_of(&zero, &m).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn abscissa_rejects_large_problems() {
        let g = grid(128, 128, 8.0);
        let m = Model::new(ModelSpec::relaxation(1.0), &g).unwrap();
        assert!(matches!(numeric_abscissa(&m), Err(Error::TooLarge { .. })));
    }
}
