//! Twisted Lyapunov functionals, Λ-norms, the dissipation inequality and
//! decay-rate extraction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constants::CoercivityConstants;
use crate::error::{Error, Result};
use crate::models::{apply_l, project_global, Model};
use crate::phase_grid::{grad_v, grad_x, inner_l2, inner_unchecked, DistributionField};

/// Weights of `𝓕 = A‖h‖² + α‖∂ₓh‖² + β‖∂ᵥh‖² + γ⟨∂ₓh, ∂ᵥh⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovWeights {
    pub a: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_mix: f64,
    pub eta: f64,
    pub order: u32,
}

impl LyapunovWeights {
    /// Positivity, `γ² < αβ` and `α ≥ β`.
    pub fn validate(&self) -> Result<()> {
        let all = [self.a, self.alpha, self.beta, self.gamma_mix, self.eta];
        if all.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid("weights", "all weights must be positive and finite"));
        }
        if self.gamma_mix * self.gamma_mix >= self.alpha * self.beta {
            return Err(Error::invalid(
                "weights.gamma_mix",
                format!(
                    "gamma^2 = {:.6e} must be below alpha*beta = {:.6e}",
                    self.gamma_mix * self.gamma_mix,
                    self.alpha * self.beta
                ),
            ));
        }
        if self.alpha < self.beta {
            return Err(Error::invalid("weights.alpha", "alpha must be at least beta"));
        }
        Ok(())
    }
}

/// Schedule of the second-order functional
/// `𝓕₂ = ‖∂ᵥ²h‖² + q_weight·(α‖∂ₓ²h‖² + β‖∂ₓ∂ᵥh‖² + γ⟨∂ₓ∂ᵥh, ∂ₓ²h⟩)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HigherOrderWeights {
    pub first: LyapunovWeights,
    /// `ν₀^Λ/ν₁^Λ`, the constant with `‖h‖_Λ ≥ ν₀‖h‖`.
    pub nu0_ratio: f64,
    /// Dissipation constant `K` of the mixed combinations.
    pub k_const: f64,
    /// `(2/K)(ν₀/2)^{−2}`.
    pub q_weight: f64,
    /// `c` and `C` with `c‖h‖²_{Ḣ²} ≤ 𝓕₂ ≤ C‖h‖²_{Ḣ²}`.
    pub equiv_lower: f64,
    pub equiv_upper: f64,
}

/// Builds the second-order schedule from certified first-order weights.
///
/// The mixed combinations reuse `(α, β, γ)`; `K` is the dissipation
/// constant `1/max(2, 2‖φ‖²_Λ)` that the Poincaré step yields for them.
pub fn higher_order_weights(
    w: &LyapunovWeights,
    c: &CoercivityConstants,
) -> Result<HigherOrderWeights> {
    w.validate()?;
    let nu0_ratio = c.nu0 / c.nu1;
    let k_const = 1.0 / (2.0f64).max(2.0 * c.kernel_lambda_norm_sq);
    let q_weight = (2.0 / k_const) * (nu0_ratio / 2.0).powi(-2);
    let q = DMatrix::from_row_slice(
        2,
        2,
        &[w.alpha, w.gamma_mix / 2.0, w.gamma_mix / 2.0, w.beta],
    );
    let ev = q.symmetric_eigenvalues();
    let (qmin, qmax) = (ev.min(), ev.max());
    Ok(HigherOrderWeights {
        first: LyapunovWeights { order: 2, ..*w },
        nu0_ratio,
        k_const,
        q_weight,
        equiv_lower: 1.0f64.min(q_weight * qmin),
        equiv_upper: 1.0f64.max(q_weight * qmax),
    })
}

/// `‖h‖_Λ`: the L² norm for multiplicative models, `(‖vh‖² + ‖∂ᵥh‖²)^{1/2}`
/// for Fokker-Planck.
pub fn lambda_norm(model: &Model, h: &DistributionField) -> Result<f64> {
    Ok(lambda_norm_sq(model, h)?.sqrt())
}

fn lambda_norm_sq(model: &Model, h: &DistributionField) -> Result<f64> {
    if !std::sync::Arc::ptr_eq(model.grid(), h.grid()) && **model.grid() != **h.grid() {
        return Err(Error::GridMismatch);
    }
    let grid = h.grid();
    let g = model.lambda_gram();
    let mut total = 0.0;
    for i in 0..grid.n_x() {
        let r = DVector::from_column_slice(h.row(i));
        total += (r.transpose() * g * &r)[(0, 0)];
    }
    Ok(total * grid.dx())
}

pub fn lyapunov_f1(h: &DistributionField, w: &LyapunovWeights) -> f64 {
    let hx = grad_x(h);
    let hv = grad_v(h);
    w.a * inner_unchecked(h, h)
        + w.alpha * inner_unchecked(&hx, &hx)
        + w.beta * inner_unchecked(&hv, &hv)
        + w.gamma_mix * inner_unchecked(&hx, &hv)
}

/// `𝓕_k` for `k ∈ {1, 2}`. At `k = 1` the functional is the mixed
/// combination alone, `q·(α‖∂ₓh‖² + β‖∂ᵥh‖² + γ⟨∂ₓh, ∂ᵥh⟩)` with
/// `q = 2/K`.
pub fn lyapunov_fk(h: &DistributionField, s: &HigherOrderWeights, k: u32) -> Result<f64> {
    let w = &s.first;
    match k {
        1 => {
            let q = LyapunovWeights { a: 0.0, ..*w };
            Ok(2.0 / s.k_const * lyapunov_f1(h, &q))
        }
        2 => {
            let hx = grad_x(h);
            let hxx = grad_x(&hx);
            let hxv = grad_v(&hx);
            let hvv = grad_v(&grad_v(h));
            let q = w.alpha * inner_unchecked(&hxx, &hxx)
                + w.beta * inner_unchecked(&hxv, &hxv)
                + w.gamma_mix * inner_unchecked(&hxv, &hxx);
            Ok(inner_unchecked(&hvv, &hvv) + s.q_weight * q)
        }
        _ => Err(Error::invalid("run.order", format!("functional order must be 1 or 2, got {k}"))),
    }
}

/// Squared homogeneous `Ḣ²` seminorm.
pub fn hdot2_sq(h: &DistributionField) -> f64 {
    let hx = grad_x(h);
    let hxx = grad_x(&hx);
    let hxv = grad_v(&hx);
    let hvv = grad_v(&grad_v(h));
    inner_unchecked(&hxx, &hxx) + inner_unchecked(&hxv, &hxv) + inner_unchecked(&hvv, &hvv)
}

/// `T h = L h − v ∂ₓh`.
pub fn apply_t(model: &Model, h: &DistributionField) -> Result<DistributionField> {
    let mut t = apply_l(model, h)?;
    let vx = grad_x(h).mul_velocity(h.grid().v_nodes());
    t.axpy(-1.0, &vx)?;
    Ok(t)
}

/// Constant `C_T′` in `⟨Th, h⟩_𝓗 ≤ −C_T′(‖h‖²_Λ + ‖∂ₓh‖²_Λ + ‖∂ᵥh‖²_Λ)`.
///
/// Half of `K = 1/max(2, 4‖φ‖²_Λ·max(C_P, 1))`, the constant produced by the
/// Poincaré step when every bracket coefficient of the weight recipe is at
/// most −1.
pub fn dissipation_constant(c: &CoercivityConstants) -> f64 {
    let k = 1.0 / (2.0f64).max(4.0 * c.kernel_lambda_norm_sq * c.c_p.max(1.0));
    k / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Evaluates the 𝓗¹ pairing of `T h` with `h` against `−C_T′·(Λ bracket)`.
/// The global projection is removed from `h` first.
pub fn dissipation_check(
    model: &Model,
    h: &DistributionField,
    w: &LyapunovWeights,
    c_t_prime: f64,
) -> Result<DissipationCheck> {
    w.validate()?;
    let mut h = h.clone();
    h.axpy(-1.0, &project_global(model, &h)?)?;
    let th = apply_t(model, &h)?;
    let (hx, hv) = (grad_x(&h), grad_v(&h));
    let (thx, thv) = (grad_x(&th), grad_v(&th));
    let lhs = w.a * inner_l2(&th, &h)?
        + w.alpha * inner_l2(&thx, &hx)?
        + w.beta * inner_l2(&thv, &hv)?
        + 0.5 * w.gamma_mix * (inner_l2(&thx, &hv)? + inner_l2(&hx, &thv)?);
    let bracket = lambda_norm_sq(model, &h)? + lambda_norm_sq(model, &hx)? + lambda_norm_sq(model, &hv)?;
    let rhs = -c_t_prime * bracket;
    let tol = 1e-10 * (lhs.abs() + rhs.abs()) + 1e-300;
    Ok(DissipationCheck {
        lhs,
        rhs,
        pass: lhs <= rhs + tol,
    })
}

/// Sample window of the exponential fit, as fractions of the series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitWindow {
    /// Leading fraction discarded as transient.
    pub transient_frac: f64,
    /// Trailing fraction of all samples used for the fit.
    pub window_frac: f64,
}

impl Default for FitWindow {
    fn default() -> Self {
        FitWindow {
            transient_frac: 0.1,
            window_frac: 0.9,
        }
    }
}

impl FitWindow {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.transient_frac) || !ok(self.window_frac) || self.window_frac == 0.0 {
            return Err(Error::invalid("fit", "fractions must lie in [0, 1], window nonzero"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub tau: f64,
    pub r2: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub samples: usize,
}

/// Least-squares fit of `log(values) ≈ c − τ t` over the configured window.
pub fn fit_rate(times: &[f64], values: &[f64], window: &FitWindow) -> Result<FitResult> {
    window.validate()?;
    if times.len() != values.len() {
        return Err(Error::invalid("fit", "times and values differ in length"));
    }
    let n = times.len();
    let skip = (window.transient_frac * n as f64).ceil() as usize;
    let start = skip.max(n - ((window.window_frac * n as f64).floor() as usize).min(n));
    let (t, y) = (&times[start..], &values[start..]);
    if t.len() < 10 {
        return Err(Error::invalid(
            "fit",
            format!("need at least 10 samples in the window, got {}", t.len()),
        ));
    }
    if y.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("fit", "non-positive sample in the fit window"));
    }
    let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = t.len() as f64;
    let tm = t.iter().sum::<f64>() / m;
    let lm = logs.iter().sum::<f64>() / m;
    let stt: f64 = t.iter().map(|x| (x - tm).powi(2)).sum();
    let stl: f64 = t.iter().zip(&logs).map(|(x, l)| (x - tm) * (l - lm)).sum();
    let slope = stl / stt;
    let ss_tot: f64 = logs.iter().map(|l| (l - lm).powi(2)).sum();
    let ss_res: f64 = t
        .iter()
        .zip(&logs)
        .map(|(x, l)| (l - lm - slope * (x - tm)).powi(2))
        .sum();
    let spread = logs.iter().fold(0.0f64, |a, l| a.max((l - lm).abs()));
    let r2 = if spread <= 1e-12 * (1.0 + lm.abs()) {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(FitResult {
        tau: -slope,
        r2,
        t_start: t[0],
        t_end: t[t.len() - 1],
        samples: t.len(),
    })
}

/// Time series and diagnostics of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub l2: Vec<f64>,
    pub h1: Vec<f64>,
    pub lyapunov: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mass: Vec<f64>,
    pub momentum: Option<Vec<f64>>,
    pub energy: Option<Vec<f64>>,
    pub field_energy: Option<Vec<f64>>,
    pub fmin: Option<Vec<f64>>,
    pub fmax: Option<Vec<f64>>,
    pub f2: Option<Vec<f64>>,
    pub fit: Option<FitResult>,
    /// Set when the fit failed or `r² < 0.99`.
    pub fit_inconclusive: bool,
    /// Steps where `𝓕₁` grew beyond the relative tolerance.
    pub monotone_violations: usize,
    pub f2_violations: Option<usize>,
    /// Poisson runs: steps where `‖h‖² + ‖∂ₓV‖²` grew.
    pub energy_violations: Option<usize>,
    /// Steps where `‖h‖` grew (checked for runs with a potential).
    pub l2_violations: usize,
    pub steps: usize,
    pub weights: Option<LyapunovWeights>,
}

impl DecayReport {
    pub fn tau_fit(&self) -> Option<f64> {
        match (&self.fit, self.fit_inconclusive) {
            (Some(f), false) => Some(f.tau),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{measure_constants, select_weights};
    use crate::models::{maxwellian_at, ModelSpec};
    use crate::phase_grid::{build_grid, norm_l2, PhaseGrid, Quadrature};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn grid(nx: usize, nv: usize, vmax: f64) -> Arc<PhaseGrid> {
        Arc::new(build_grid(nx, 2.0 * PI, nv, vmax, Quadrature::Uniform).unwrap())
    }

    pub(crate) fn smooth_field(g: &Arc<PhaseGrid>, rng: &mut ChaCha8Rng) -> DistributionField {
        let c: Vec<f64> = (0..14).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: f64 = rng.random_range(0.7..1.3);
        DistributionField::from_fn(g, |x, v| {
            let e = (-v * v / (4.0 * s * s)).exp();
            let a = c[0] + c[1] * v + c[2] * v * v;
            let b = c[3] + c[4] * v + c[5] * v.powi(3);
            let d = c[6] * v + c[7] * v * v;
            (c[8] * a + b * x.cos() + d * x.sin() + c[9] * (2.0 * x).cos() * (c[10] + v)
                + c[11] * (3.0 * x).sin() * v)
                * e
        })
        .unwrap()
    }

    #[test]
    fn lambda_norms() {
        let g = grid(8, 128, 10.0);
        let bgk = Model::new(ModelSpec::relaxation(2.0), &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = smooth_field(&g, &mut rng);
        assert_abs_diff_eq!(lambda_norm(&bgk, &h).unwrap(), norm_l2(&h), epsilon = 1e-12);
        let fine = grid(8, 257, 10.0);
        let fp = Model::new(ModelSpec::fokker_planck(), &fine).unwrap();
        let m = DistributionField::from_fn(&fine, |_, v| maxwellian_at(v).sqrt()).unwrap();
        // ∫(v²𝓜 + |∂ᵥM|²) = 1 + 1/4 per x, times the torus length
        let exact = (1.25 * 2.0 * PI).sqrt();
        assert_abs_diff_eq!(lambda_norm(&fp, &m).unwrap(), exact, epsilon = 1e-6);
        for _ in 0..50 {
            let h = smooth_field(&fine, &mut rng);
            assert!(lambda_norm(&fp, &h).unwrap().powi(2) >= norm_l2(&h).powi(2) * (1.0 - 1e-8));
        }
    }

    #[test]
    fn f1_reductions_and_sandwich() {
        let g = grid(8, 48, 8.0);
        let w = LyapunovWeights {
            a: 3.0,
            alpha: 73.0,
            beta: 2.0,
            gamma_mix: 6.0,
            eta: 12.0,
            order: 1,
        };
        assert_eq!(lyapunov_f1(&DistributionField::zeros(&g), &w), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let h = smooth_field(&g, &mut rng);
            let hx = grad_x(&h);
            let hv = grad_v(&h);
            let (n0, nx, nv) = (
                inner_unchecked(&h, &h),
                inner_unchecked(&hx, &hx),
                inner_unchecked(&hv, &hv),
            );
            let f = lyapunov_f1(&h, &w);
            assert!(w.a * n0 + w.beta / 2.0 * (nx + nv) <= f);
            assert!(f <= w.a * n0 + 1.5 * w.alpha * (nx + nv));
            let w0 = LyapunovWeights { gamma_mix: 0.0, ..w };
            let plain = w.a * n0 + w.alpha * nx + w.beta * nv;
            assert_abs_diff_eq!(lyapunov_f1(&h, &w0), plain, epsilon = 1e-12 * plain);
        }
    }

    #[test]
    fn weights_validation() {
        let mut w = LyapunovWeights {
            a: 1.0,
            alpha: 2.0,
            beta: 2.0,
            gamma_mix: 2.0,
            eta: 1.0,
            order: 1,
        };
        assert!(w.validate().is_err());
        w.gamma_mix = 1.9;
        assert!(w.validate().is_ok());
        w.alpha = 1.0;
        assert!(w.validate().is_err());
    }

    fn bgk_setup() -> (Model, CoercivityConstants, LyapunovWeights) {
        let g = grid(8, 48, 8.0);
        let m = Model::new(ModelSpec::relaxation(1.0), &g).unwrap();
        let c = measure_constants(&m, 100, 1).unwrap();
        let w = select_weights(&c).unwrap();
        (m, c, w)
    }

    #[test]
    fn second_order_functional() {
        let (m, c, w) = bgk_setup();
        let s = higher_order_weights(&w, &c).unwrap();
        let g = m.grid().clone();
        assert_eq!(lyapunov_fk(&DistributionField::zeros(&g), &s, 2).unwrap(), 0.0);
        assert!(lyapunov_fk(&DistributionField::zeros(&g), &s, 3).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let h = smooth_field(&g, &mut rng);
            let f2 = lyapunov_fk(&h, &s, 2).unwrap();
            let hd = hdot2_sq(&h);
            assert!(s.equiv_lower * hd <= f2 * (1.0 + 1e-12));
            assert!(f2 <= s.equiv_upper * hd * (1.0 + 1e-12));
            // k = 1 is the mixed combination with the 2/K mapping
            let q = LyapunovWeights { a: 0.0, ..w };
            let f1 = lyapunov_fk(&h, &s, 1).unwrap();
            assert_abs_diff_eq!(f1, 2.0 / s.k_const * lyapunov_f1(&h, &q), epsilon = 1e-12 * f1.abs());
        }
    }

    #[test]
    fn dissipation_on_random_fields() {
        let g = grid(8, 48, 8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for spec in [
            ModelSpec::relaxation(1.0),
            ModelSpec::semi_classical(1.0, 1, 1.0),
            ModelSpec::fokker_planck(),
        ] {
            let m = Model::new(spec, &g).unwrap();
            let c = measure_constants(&m, 100, 1).unwrap();
            let w = select_weights(&c).unwrap();
            let ct = dissipation_constant(&c);
            for _ in 0..500 {
                let h = smooth_field(&g, &mut rng);
                let d = dissipation_check(&m, &h, &w, ct).unwrap();
                assert!(d.pass, "{spec:?}: {d:?}");
            }
            let k = DistributionField::separable(&g, &[1.0; 8], m.kernel()).unwrap();
            let d = dissipation_check(&m, &k, &w, ct).unwrap();
            assert!(d.lhs <= 1e-12);
            let bad = LyapunovWeights { gamma_mix: 2.0 * (w.alpha * w.beta).sqrt(), ..w };
            assert!(dissipation_check(&m, &k, &bad, ct).is_err());
        }
    }

    #[test]
    fn v_gradient_inequality_replayed() {
        // d/dt‖∂ᵥh‖² ≤ C₁‖h − Πh‖²_Λ + C₂‖∂ₓh‖² − ν₃‖∂ᵥh‖²_Λ on mean-free fields
        let g = grid(8, 48, 8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for spec in [ModelSpec::relaxation(1.0), ModelSpec::semi_classical(1.0, 1, 1.0)] {
            let m = Model::new(spec, &g).unwrap();
            let c = measure_constants(&m, 100, 1).unwrap();
            let s = crate::constants::step3_constants(&c);
            for _ in 0..200 {
                let mut h = smooth_field(&g, &mut rng);
                h.axpy(-1.0, &project_global(&m, &h).unwrap()).unwrap();
                let th = apply_t(&m, &h).unwrap();
                let hv = grad_v(&h);
                let lhs = 2.0 * inner_unchecked(&grad_v(&th), &hv);
                let perp = h.sub(&crate::models::project_local(&m, &h).unwrap()).unwrap();
                let hx = grad_x(&h);
                let rhs = s.c1 * lambda_norm_sq(&m, &perp).unwrap() + s.c2 * inner_unchecked(&hx, &hx)
                    - c.nu3 * lambda_norm_sq(&m, &hv).unwrap();
                assert!(lhs <= rhs + 1e-10 * rhs.abs(), "{spec:?}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn fit_examples() {
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let y: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp()).collect();
        let f = fit_rate(&t, &y, &FitWindow::default()).unwrap();
        assert_abs_diff_eq!(f.tau, 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(f.r2, 1.0, epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = t
            .iter()
            .map(|t| (-t).exp() + 1e-8 * rng.random_range(-1.0..1.0))
            .collect();
        let f = fit_rate(&t, &y, &FitWindow::default()).unwrap();
        assert_abs_diff_eq!(f.tau, 1.0, epsilon = 1e-3);
        let f = fit_rate(&t, &vec![3.0; 200], &FitWindow::default()).unwrap();
        assert_abs_diff_eq!(f.tau, 0.0, epsilon = 1e-12);
        assert_eq!(f.r2, 1.0);
        let mut y = vec![1.0; 200];
        y[150] = 0.0;
        assert!(fit_rate(&t, &y, &FitWindow::default()).is_err());
        assert!(fit_rate(&t[..5], &y[..5], &FitWindow::default()).is_err());
        let spec_window = FitWindow {
            transient_frac: 0.1,
            window_frac: 0.5,
        };
        assert_eq!(fit_rate(&t, &vec![1.0; 200], &spec_window).unwrap().samples, 100);
    }

    proptest! {
        #[test]
        fn fit_recovers_any_rate(rate in 0.01f64..5.0, c in -3.0f64..3.0) {
            let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
            let y: Vec<f64> = t.iter().map(|t| (c - rate * t).exp()).collect();
            let f = fit_rate(&t, &y, &FitWindow::default()).unwrap();
            prop_assert!((f.tau - rate).abs() < 1e-9 * (1.0 + rate));
        }
    }
}
