//! Lyapunov certificates for the slow, fast and very-fast subsystems and the
//! composite bounds `ε₁*`, `ε₃*` built from them.
//!
//! Everything here works on quadratic forms `wᵀ M w`, so the `λ_min` of a
//! nonsymmetric matrix is always taken on its symmetric part.

use nalgebra::Matrix2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    is_positive_definite, lambda_min_sym, serialize_rows, sigma_max, solve_vec, spectral_abscissa,
    sym_part, Matrix, Vector,
};
use crate::linearize::BlockSystem;
use crate::scalar::Scalar;
use crate::timescale::ReducedModel;

/// Relative Frobenius residual accepted from a Lyapunov solve.
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-8;

/// How `ε₁` is chosen when the composite bound `ε₃*` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Eps1Policy {
    /// The filter constant of the grid.
    Actual,
    /// `ε₁*/2`, the value used to report `ε₃*` for a fixed Lyapunov choice.
    HalfStar,
}

impl std::str::FromStr for Eps1Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actual" => Ok(Self::Actual),
            "half-star" => Ok(Self::HalfStar),
            other => Err(Error::Parse(format!(
                "unknown eps1 policy '{other}' (expected actual or half-star)"
            ))),
        }
    }
}

/// Right-hand sides of the three Lyapunov equations. `None` means identity.
#[derive(Debug, Clone)]
pub struct QChoices<T: Scalar> {
    pub slow: Option<Matrix<T>>,
    pub fast: Option<Matrix<T>>,
    pub xi: Option<Matrix<T>>,
}

impl<T: Scalar> Default for QChoices<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> QChoices<T> {
    pub fn identity() -> Self {
        Self {
            slow: None,
            fast: None,
            xi: None,
        }
    }

    fn pick(q: &Option<Matrix<T>>, n: usize, what: &str) -> Result<Matrix<T>> {
        match q {
            None => Ok(Matrix::identity(n, n)),
            Some(m) if m.nrows() != n || m.ncols() != n => Err(Error::Dimension {
                expected: n,
                got: m.nrows(),
            }),
            Some(m) => {
                let s = sym_part(m);
                if !is_positive_definite(&s) {
                    return Err(Error::CertificateInfeasible(format!(
                        "{what} is not positive definite"
                    )));
                }
                Ok(s)
            }
        }
    }

    fn label(q: &Option<Matrix<T>>) -> String {
        match q {
            None => "identity".into(),
            Some(m) => format!("custom {}x{}", m.nrows(), m.ncols()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct Lyapunov<T: Scalar> {
    #[serde(serialize_with = "serialize_rows")]
    pub p: Matrix<T>,
    /// `‖AᵀP + PA + Q‖_F / ‖Q‖_F`.
    pub residual: T,
}

fn lyapunov_residual<T: Scalar>(a: &Matrix<T>, q: &Matrix<T>, p: &Matrix<T>) -> Matrix<T> {
    a.transpose() * p + p * a + q
}

/// Solves `AᵀP + PA = −Q` through the Kronecker-vectorized linear system,
/// with one step of iterative refinement.
pub fn solve_lyapunov<T: Scalar>(a: &Matrix<T>, q: &Matrix<T>) -> Result<Lyapunov<T>> {
    let n = a.nrows();
    if !a.is_square() || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: q.nrows(),
        });
    }
    let abscissa = spectral_abscissa(a)?;
    if !(abscissa < T::zero()) {
        return Err(Error::CertificateInfeasible(format!(
            "Lyapunov equation needs a Hurwitz matrix (spectral abscissa {:e})",
            abscissa.as_f64()
        )));
    }
    let id = Matrix::<T>::identity(n, n);
    let at = a.transpose();
    let k = id.kronecker(&at) + at.kronecker(&id);
    let rhs = Vector::from_iterator(n * n, q.iter().map(|v| -*v));
    let mut p = Matrix::from_column_slice(n, n, solve_vec(&k, &rhs, "Lyapunov operator")?.as_slice());
    let r = lyapunov_residual(a, q, &p);
    let corr = solve_vec(
        &k,
        &Vector::from_iterator(n * n, r.iter().map(|v| -*v)),
        "Lyapunov operator",
    )?;
    p += Matrix::from_column_slice(n, n, corr.as_slice());
    p = sym_part(&p);
    let qn = q.norm();
    let residual = lyapunov_residual(a, q, &p).norm() / if qn > T::zero() { qn } else { T::one() };
    if residual.as_f64() > LYAPUNOV_RESIDUAL_TOL {
        log::warn!(
            "Lyapunov solve ({n}x{n}) residual {:e} exceeds {:e}",
            residual.as_f64(),
            LYAPUNOV_RESIDUAL_TOL
        );
    }
    if !is_positive_definite(&p) && is_positive_definite(&sym_part(q)) {
        return Err(Error::Consistency(
            "Lyapunov solution is not positive definite".into(),
        ));
    }
    Ok(Lyapunov { p, residual })
}

/// `α₁ = λ_min(Q^(s))`, `β₁ = σ_max((P + Pᵀ) A_xz)`.
pub fn slow_constants<T: Scalar>(a_slow: &Matrix<T>, a_xz: &Matrix<T>, p: &Matrix<T>) -> (T, T) {
    let q = -(a_slow.transpose() * p + p * a_slow);
    let alpha1 = lambda_min_sym(&q);
    let beta1 = sigma_max(&((p + p.transpose()) * a_xz));
    (alpha1, beta1)
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct FastConstants<T: Scalar> {
    pub alpha2: T,
    pub gamma1: T,
    /// `−λ_min(sym Z)` before clamping at zero.
    pub gamma1_raw: T,
    pub beta2: T,
}

/// `α₂ = λ_min(Λ)`, `γ₁ = −λ_min(sym Z)`, `β₂ = σ_max(Z Γ₀)` with
/// `Z = (H + Hᵀ) Γ₀ A_xz`.
pub fn fast_constants<T: Scalar>(
    azz_tilde: &Matrix<T>,
    gamma0: &Matrix<T>,
    a_xz: &Matrix<T>,
    h: &Matrix<T>,
) -> FastConstants<T> {
    let lambda = -(azz_tilde.transpose() * h + h * azz_tilde);
    let z = (h + h.transpose()) * gamma0 * a_xz;
    let gamma1_raw = -lambda_min_sym(&z);
    FastConstants {
        alpha2: lambda_min_sym(&lambda),
        gamma1: gamma1_raw.max(T::zero()),
        gamma1_raw,
        beta2: sigma_max(&(z * gamma0)),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct ReducedBound<T: Scalar> {
    pub alpha1: T,
    pub alpha2: T,
    pub gamma1: T,
    pub beta1: T,
    pub beta2: T,
    pub d1: T,
    pub eps1_star: T,
}

impl<T: Scalar> ReducedBound<T> {
    /// Largest `ε₁` for which `Q_v(d, ε₁)` stays positive definite.
    pub fn eps1_d(&self, d: T) -> T {
        let one = T::one();
        let mix = (one - d) * self.beta1 + d * self.beta2;
        let den = self.alpha1 * self.gamma1 + mix * mix / (T::lit(4.0) * d * (one - d));
        if den > T::zero() {
            self.alpha1 * self.alpha2 / den
        } else {
            T::lit(f64::INFINITY)
        }
    }

    /// The 2×2 matrix bounding `−dv/dt` from below in `(‖x‖, ‖η‖)`.
    pub fn q_v(&self, d: T, eps1: T) -> Matrix2<T> {
        let one = T::one();
        let off = -T::lit(0.5) * ((one - d) * self.beta1 + d * self.beta2);
        Matrix2::new(
            (one - d) * self.alpha1,
            off,
            off,
            d * (self.alpha2 / eps1 - self.gamma1),
        )
    }
}

pub fn reduced_bound<T: Scalar>(alpha1: T, alpha2: T, gamma1: T, beta1: T, beta2: T) -> ReducedBound<T> {
    let bsum = beta1 + beta2;
    let d1 = if bsum > T::zero() { beta1 / bsum } else { T::lit(0.5) };
    let den = alpha1 * gamma1 + beta1 * beta2;
    let eps1_star = if den > T::zero() {
        alpha1 * alpha2 / den
    } else {
        T::lit(f64::INFINITY)
    };
    ReducedBound {
        alpha1,
        alpha2,
        gamma1,
        beta1,
        beta2,
        d1,
        eps1_star,
    }
}

/// `α₃ = ε₁ λ_min(Q_v)`, `β₃ = σ_max((H̄ + H̄ᵀ) A_zy)` with `H̄ = d₁ H`.
pub fn composite_reduced_constants<T: Scalar>(
    q_v: &Matrix2<T>,
    h: &Matrix<T>,
    a_zy: &Matrix<T>,
    d1: T,
    eps1: T,
) -> Result<(T, T)> {
    let qv = Matrix::from_row_slice(2, 2, &[q_v[(0, 0)], q_v[(0, 1)], q_v[(1, 0)], q_v[(1, 1)]]);
    let lmin = lambda_min_sym(&qv);
    if !(lmin > T::zero()) {
        return Err(Error::CertificateInfeasible(format!(
            "Q_v is not positive definite at eps1 = {:e} (lambda_min = {:e})",
            eps1.as_f64(),
            lmin.as_f64()
        )));
    }
    let hbar = h * d1;
    let beta3 = sigma_max(&((&hbar + hbar.transpose()) * a_zy));
    Ok((eps1 * lmin, beta3))
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct VeryFastConstants<T: Scalar> {
    pub alpha4: T,
    pub beta4: T,
    pub gamma2: T,
    pub gamma2_raw: T,
    #[serde(skip)]
    pub theta_xix: Matrix<T>,
    #[serde(skip)]
    pub theta_xieta: Matrix<T>,
    #[serde(skip)]
    pub theta_xixi: Matrix<T>,
}

/// The cross-coupling matrices between the current deviations `ξ` and the
/// slower coordinates, for the full system at filter constant `eps1`.
pub fn veryfast_constants<T: Scalar>(
    b: &BlockSystem<T>,
    r: &ReducedModel<T>,
    p_xi: &Matrix<T>,
    eps1: T,
) -> VeryFastConstants<T> {
    let ayy = r.ayy_tilde.clone();
    let q_xi = -(ayy.transpose() * p_xi + p_xi * &ayy);
    let pp = p_xi + p_xi.transpose();
    let g0 = &r.gamma0;
    let dy0_dx = &r.a0x + &r.a0z * g0;
    let xz_e = &b.a_xz * eps1;

    let inner_x = &dy0_dx * &xz_e * g0
        + &r.a0z * (&b.a_zz * g0 + &b.a_zx - g0 * &xz_e * g0)
        + &r.a0z * &b.a_zy * &dy0_dx;
    let inner_eta = &dy0_dx * &xz_e + &r.a0z * (&b.a_zz - g0 * &xz_e + &b.a_zy * &r.a0z);
    let theta_xix = &pp * inner_x;
    let theta_xieta = &pp * inner_eta;
    let theta_xixi = &pp * &r.a0z * &b.a_zy;

    let gamma2_raw = -lambda_min_sym(&theta_xixi);
    VeryFastConstants {
        alpha4: lambda_min_sym(&q_xi),
        beta4: T::lit(2f64.sqrt()) * sigma_max(&theta_xix).max(sigma_max(&theta_xieta)),
        gamma2: gamma2_raw.max(T::zero()),
        gamma2_raw,
        theta_xix,
        theta_xieta,
        theta_xixi,
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct FullScaleBound<T: Scalar> {
    pub d2: T,
    pub eps3_star: T,
    pub eps3_actual: T,
    pub verdict: bool,
}

pub fn full_scale_bound<T: Scalar>(
    alpha3: T,
    alpha4: T,
    gamma2: T,
    beta3: T,
    beta4: T,
    eps2: T,
    eps1: T,
) -> FullScaleBound<T> {
    let bsum = beta3 + beta4;
    let d2 = if bsum > T::zero() { beta3 / bsum } else { T::lit(0.5) };
    let num = alpha3 * alpha4;
    let den = alpha3 * gamma2 + beta3 * beta4;
    let eps3_star = if num <= T::zero() {
        T::zero()
    } else if den > T::zero() {
        num / den
    } else {
        T::lit(f64::INFINITY)
    };
    let eps3_actual = eps2 / eps1;
    FullScaleBound {
        d2,
        eps3_star,
        eps3_actual,
        verdict: eps3_actual < eps3_star,
    }
}

/// Constants of the full-system bound evaluated at one value of `ε₁`.
#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct FullBound<T: Scalar> {
    pub eps1: T,
    pub alpha3: T,
    pub beta3: T,
    pub very_fast: VeryFastConstants<T>,
    pub d2: T,
    pub eps3_star: T,
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct CertificateSet<T: Scalar> {
    pub q_slow: String,
    pub q_fast: String,
    pub q_xi: String,
    pub slow: Lyapunov<T>,
    pub fast: Lyapunov<T>,
    pub xi: Lyapunov<T>,
    pub alpha1: T,
    pub beta1: T,
    pub fast_constants: FastConstants<T>,
    pub reduced_bound: ReducedBound<T>,
    pub eps1_policy: Eps1Policy,
    pub eps1_actual: T,
    /// Evaluation point of `ε₁` dictated by the policy.
    pub eps1_eval: T,
    pub eps3_actual: T,
    /// Full-system constants at `eps1_eval`; absent when `Q_v` is indefinite there.
    pub at_policy: Option<FullBound<T>>,
    /// Full-system constants at the grid's own `ε₁`; the full verdict uses these.
    pub at_actual: Option<FullBound<T>>,
    pub verdict_reduced: bool,
    pub verdict_full: bool,
}

impl<T: Scalar> CertificateSet<T> {
    pub fn d1(&self) -> T {
        self.reduced_bound.d1
    }
    pub fn eps1_star(&self) -> T {
        self.reduced_bound.eps1_star
    }
    /// `ε₃*` at the policy's `ε₁`, the headline figure.
    pub fn eps3_star(&self) -> Option<T> {
        self.at_policy.as_ref().map(|f| f.eps3_star)
    }
    pub fn max_residual(&self) -> T {
        self.slow.residual.max(self.fast.residual).max(self.xi.residual)
    }
}

fn full_bound<T: Scalar>(
    b: &BlockSystem<T>,
    r: &ReducedModel<T>,
    t1: &ReducedBound<T>,
    h: &Matrix<T>,
    p_xi: &Matrix<T>,
    eps1: T,
) -> Result<FullBound<T>> {
    let q_v = t1.q_v(t1.d1, eps1);
    let (alpha3, beta3) = composite_reduced_constants(&q_v, h, &b.a_zy, t1.d1, eps1)?;
    let vf = veryfast_constants(b, r, p_xi, eps1);
    let t2 = full_scale_bound(alpha3, vf.alpha4, vf.gamma2, beta3, vf.beta4, b.eps2, eps1);
    Ok(FullBound {
        eps1,
        alpha3,
        beta3,
        d2: t2.d2,
        eps3_star: t2.eps3_star,
        very_fast: vf,
    })
}

/// Builds every certificate for a reduced model. `E` and `A^(s)` must be
/// Hurwitz, otherwise the slow or fast Lyapunov solve reports infeasibility.
pub fn certify<T: Scalar>(
    b: &BlockSystem<T>,
    r: &ReducedModel<T>,
    q: &QChoices<T>,
    policy: Eps1Policy,
) -> Result<CertificateSet<T>> {
    let (n, m) = (b.n, b.m);
    let q_slow = QChoices::pick(&q.slow, n, "Q_slow")?;
    let q_fast = QChoices::pick(&q.fast, 2 * n, "Lambda")?;
    let q_xi = QChoices::pick(&q.xi, 2 * m, "Q_xi")?;

    let slow = solve_lyapunov(&r.a_slow, &q_slow)?;
    let fast = solve_lyapunov(&r.azz_tilde, &q_fast)?;
    let xi = solve_lyapunov(&r.ayy_tilde, &q_xi)?;

    let (alpha1, beta1) = slow_constants(&r.a_slow, &b.a_xz, &slow.p);
    let fc = fast_constants(&r.azz_tilde, &r.gamma0, &b.a_xz, &fast.p);
    let t1 = reduced_bound(alpha1, fc.alpha2, fc.gamma1, beta1, fc.beta2);

    let eps1_eval = match policy {
        Eps1Policy::Actual => b.eps1,
        Eps1Policy::HalfStar => t1.eps1_star * T::lit(0.5),
    };
    let at_policy = if eps1_eval.is_finite() {
        full_bound(b, r, &t1, &fast.p, &xi.p, eps1_eval).ok()
    } else {
        None
    };
    let at_actual = if policy == Eps1Policy::Actual {
        at_policy.clone()
    } else {
        full_bound(b, r, &t1, &fast.p, &xi.p, b.eps1).ok()
    };

    let eps3_actual = b.eps3();
    let verdict_reduced = b.eps1 < t1.eps1_star;
    let verdict_full = verdict_reduced
        && at_actual
            .as_ref()
            .is_some_and(|f| eps3_actual < f.eps3_star);

    Ok(CertificateSet {
        q_slow: QChoices::label(&q.slow),
        q_fast: QChoices::label(&q.fast),
        q_xi: QChoices::label(&q.xi),
        slow,
        fast,
        xi,
        alpha1,
        beta1,
        fast_constants: fc,
        reduced_bound: t1,
        eps1_policy: policy,
        eps1_actual: b.eps1,
        eps1_eval,
        eps3_actual,
        at_policy,
        at_actual,
        verdict_reduced,
        verdict_full,
    })
}
