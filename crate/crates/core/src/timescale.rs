//! Quasi-steady-state manifolds and the reduced matrices built on them.
//!
//! Freezing the line currents on `y₀ = A_0z z + A_0x x` yields the reduced
//! fast dynamics `Ã_zz`, `Ã_zx`. Freezing `z` on `z₀ = Γ₀ x` yields the slow
//! matrix `A^(s) = A_xz Γ₀`. In the `(ω, V)` ordering `Ã_zz` is block upper
//! triangular with `−I_N` top-left and the voltage matrix `E` bottom-right.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GridModel, GridSpec, Node, OperatingPoint};
use crate::linalg::{condition_number, inf_norm, max_abs, solve, Matrix};
use crate::linearize::BlockSystem;
use crate::scalar::Scalar;
use nalgebra::SVD;

/// Condition number above which `Ã_zz` is treated as singular.
pub const MAX_AZZ_CONDITION: f64 = 1e12;

/// Absolute tolerance on the triangular structure of `Ã_zz`.
pub const STRUCTURE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ReducedModel<T: Scalar> {
    pub a0z: Matrix<T>,
    pub a0x: Matrix<T>,
    pub azz_tilde: Matrix<T>,
    pub azx_tilde: Matrix<T>,
    pub gamma0: Matrix<T>,
    pub e_matrix: Matrix<T>,
    pub a_slow: Matrix<T>,
    pub ayy_tilde: Matrix<T>,
    pub azz_condition: T,
}

/// `A_0z = −A_yy⁻¹ A_yz`, `A_0x = −A_yy⁻¹ A_yx`.
pub fn very_fast_manifold<T: Scalar>(b: &BlockSystem<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let a0z = -solve(&b.a_yy, &b.a_yz, "A_yy")?;
    let a0x = -solve(&b.a_yy, &b.a_yx, "A_yy")?;
    Ok((a0z, a0x))
}

/// `(Ã_zz, Ã_zx) = (A_zz + A_zy A_0z, A_zx + A_zy A_0x)`.
pub fn reduce_network<T: Scalar>(
    b: &BlockSystem<T>,
    a0z: &Matrix<T>,
    a0x: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>) {
    (&b.a_zz + &b.a_zy * a0z, &b.a_zx + &b.a_zy * a0x)
}

/// `A^(s) = −A_xz Ã_zz⁻¹ Ã_zx` together with `Γ₀ = −Ã_zz⁻¹ Ã_zx`.
///
/// Refuses to proceed when `cond(Ã_zz)` exceeds [`MAX_AZZ_CONDITION`]; the
/// error names the state closest to the null direction.
pub fn slow_matrix<T: Scalar>(
    azz_tilde: &Matrix<T>,
    azx_tilde: &Matrix<T>,
    a_xz: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let cond = condition_number(azz_tilde);
    if !(cond.as_f64() <= MAX_AZZ_CONDITION) {
        return Err(Error::Singular {
            what: format!("reduced fast matrix, near-null mode {}", null_mode_label(azz_tilde)),
            cond: cond.as_f64(),
        });
    }
    let gamma0 = -solve(azz_tilde, azx_tilde, "reduced fast matrix")?;
    let a_slow = a_xz * &gamma0;
    let direct = -(a_xz * solve(azz_tilde, azx_tilde, "reduced fast matrix")?);
    let scale = T::one() + max_abs(&a_slow);
    if max_abs(&(&a_slow - &direct)) > T::lit(1e-12) * scale {
        return Err(Error::Consistency("A_slow differs from A_xz Γ₀".into()));
    }
    Ok((a_slow, gamma0))
}

fn null_mode_label<T: Scalar>(a: &Matrix<T>) -> String {
    let n = a.nrows() / 2;
    let svd = SVD::new(a.clone(), false, true);
    let Some(vt) = svd.v_t else {
        return "unknown".into();
    };
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, T::lit(f64::INFINITY)), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
    let row = vt.row(imin);
    let (j, _) = row
        .iter()
        .enumerate()
        .fold((0, T::zero()), |acc, (j, v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
    if j < n {
        format!("omega_{}", j + 1)
    } else {
        format!("V_{}", j - n + 1)
    }
}

/// Bottom-right block of `Ã_zz` after checking the block-triangular shape.
pub fn e_matrix_extracted<T: Scalar>(azz_tilde: &Matrix<T>, tol: T) -> Result<Matrix<T>> {
    let n = azz_tilde.nrows() / 2;
    let tl = azz_tilde.view((0, 0), (n, n)).clone_owned();
    let bl = azz_tilde.view((n, 0), (n, n)).clone_owned();
    let dev_tl = max_abs(&(tl + Matrix::identity(n, n)));
    let dev_bl = max_abs(&bl);
    let scale = T::one().max(inf_norm(azz_tilde));
    if dev_tl > tol || dev_bl > tol * scale {
        return Err(Error::Consistency(format!(
            "reduced fast matrix lost its triangular form (|TL + I| = {:e}, |BL| = {:e})",
            dev_tl.as_f64(),
            dev_bl.as_f64()
        )));
    }
    Ok(azz_tilde.view((n, n), (n, n)).clone_owned())
}

/// Reactive-power sensitivities `ν_i` (diagonal) and `ν_ij` (neighbors).
#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct NuTerms<T: Scalar> {
    pub nu_diag: Vec<T>,
    /// Dense N×N, row-major; nonzero only for adjacent pairs.
    pub nu_offdiag: Vec<Vec<T>>,
    pub neighbors: Vec<BTreeSet<usize>>,
}

/// Evaluates `ν_i`, `ν_ij` at `w0`. The partial derivatives of `Q` come
/// from [`GridModel::power_partials`], the same source as the Jacobian.
pub fn nu_terms<T: Scalar>(spec: &GridSpec<T>, w0: &OperatingPoint<T>) -> Result<NuTerms<T>> {
    w0.check_dims(spec)?;
    let model = GridModel::new(spec)?;
    let n = model.n();
    let pp = model.power_partials(w0);
    let nodes = spec.line_nodes()?;
    let cos: Vec<T> = w0.delta.iter().map(|d| d.cos()).collect();
    let sin: Vec<T> = w0.delta.iter().map(|d| d.sin()).collect();

    let mut nu_diag: Vec<T> = (0..n).map(|i| -pp.dq_dv[(i, i)]).collect();
    let mut nu_off = vec![vec![T::zero(); n]; n];
    let mut neighbors = vec![BTreeSet::new(); n];

    for (k, (line, &(a, b))) in spec.lines.iter().zip(&nodes).enumerate() {
        let z2 = line.r * line.r + line.x * line.x;
        for (me, other) in [(a, b), (b, a)] {
            let Node::Inverter(i) = me else { continue };
            // +1 when inverter i is the end of line k
            let theta = if me == b { T::one() } else { -T::one() };
            let dqd = pp.dq_did[(i, k)];
            let dqq = pp.dq_diq[(i, k)];
            nu_diag[i] += theta
                * (dqd * (line.r * cos[i] + line.x * sin[i]) / z2
                    - dqq * (line.x * cos[i] - line.r * sin[i]) / z2);
            if let Node::Inverter(j) = other {
                nu_off[i][j] += theta
                    * (-dqd * (line.r * cos[j] + line.x * sin[j]) / z2
                        + dqq * (line.x * cos[j] - line.r * sin[j]) / z2);
                neighbors[i].insert(j);
            }
        }
    }
    Ok(NuTerms {
        nu_diag,
        nu_offdiag: nu_off,
        neighbors,
    })
}

/// `E` assembled entrywise: `e_ii = k_q,i ν_i − 1`, `e_ij = k_q,i ν_ij`.
pub fn e_matrix_closed_form<T: Scalar>(
    spec: &GridSpec<T>,
    w0: &OperatingPoint<T>,
) -> Result<Matrix<T>> {
    let nu = nu_terms(spec, w0)?;
    Ok(e_from_nu(spec, &nu))
}

pub fn e_from_nu<T: Scalar>(spec: &GridSpec<T>, nu: &NuTerms<T>) -> Matrix<T> {
    let n = spec.n_inverters();
    Matrix::from_fn(n, n, |i, j| {
        let kq = spec.inverters[i].k_q;
        if i == j {
            kq * nu.nu_diag[i] - T::one()
        } else if nu.neighbors[i].contains(&j) {
            kq * nu.nu_offdiag[i][j]
        } else {
            T::zero()
        }
    })
}

/// Off-diagonal entries are all `≥ −tol`.
pub fn is_metzler<T: Scalar>(e: &Matrix<T>, tol: T) -> bool {
    (0..e.nrows()).all(|i| (0..e.ncols()).all(|j| i == j || e[(i, j)] >= -tol))
}

/// Runs the full reduction on a standard-form block system.
pub fn reduce<T: Scalar>(b: &BlockSystem<T>, structure_tol: T) -> Result<ReducedModel<T>> {
    let (a0z, a0x) = very_fast_manifold(b)?;
    let (azz_tilde, azx_tilde) = reduce_network(b, &a0z, &a0x);
    let e_matrix = e_matrix_extracted(&azz_tilde, structure_tol)?;
    let azz_condition = condition_number(&azz_tilde);
    let (a_slow, gamma0) = slow_matrix(&azz_tilde, &azx_tilde, &b.a_xz)?;
    Ok(ReducedModel {
        a0z,
        a0x,
        azz_tilde,
        azx_tilde,
        gamma0,
        e_matrix,
        a_slow,
        ayy_tilde: b.ayy_tilde(),
        azz_condition,
    })
}
