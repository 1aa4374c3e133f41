//! Analytic Jacobian and its singular-perturbation block structure.
//!
//! With homogeneous filter constants `ε₁` and line constants `ε₂ᵢ = Lᵢ/ω_b`
//! the linearization splits into slow angles `x = Δδ`, fast inverter states
//! `z = (Δω, ΔV)` and very fast line currents `y = (ΔI_D, ΔI_Q)`:
//!
//! ```text
//!      ẋ = A_xz z
//!   ε₁ ż = A_zz z + A_zx x + A_zy y
//!   E₂ ẏ = A_yz z + A_yx x + A_yy y
//! ```
//!
//! The standard form replaces `E₂` by the geometric mean `ε₂` and a
//! diagonal rescaling `D₂ = ε₂ E₂⁻¹` on the right-hand side.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GridModel, GridSpec, OperatingPoint};
use crate::linalg::{max_abs, Matrix};
use crate::scalar::Scalar;

/// Ratio of the largest to smallest line time constant above which the
/// single-`ε₂` grouping is flagged.
pub const TIMESCALE_OVERLAP_RATIO: f64 = 100.0;

/// Strict default for the filter homogeneity check.
pub const DEFAULT_FILTER_REL_TOL: f64 = 1e-9;

impl<T: Scalar> GridModel<T> {
    /// Analytic Jacobian of [`GridModel::vector_field`] at `x`.
    pub fn jacobian(&self, x: &OperatingPoint<T>) -> Matrix<T> {
        let n = self.n();
        let m = self.m();
        let sp = &self.spec;
        let wb = sp.bases.omega_b;
        let pp = self.power_partials(x);
        let (om, vo, id, iq) = (n, 2 * n, 3 * n, 3 * n + m);
        let mut a = Matrix::zeros(3 * n + 2 * m, 3 * n + 2 * m);

        for i in 0..n {
            a[(i, om + i)] = T::one();
        }
        for (i, inv) in sp.inverters.iter().enumerate() {
            let kp = -inv.k_p / inv.t_p;
            let kq = -inv.k_q / inv.t_q;
            a[(om + i, om + i)] = -T::one() / inv.t_p;
            a[(vo + i, vo + i)] = -T::one() / inv.t_q;
            for j in 0..n {
                a[(om + i, j)] += kp * pp.dp_ddelta[(i, j)];
                a[(om + i, vo + j)] += kp * pp.dp_dv[(i, j)];
                a[(vo + i, j)] += kq * pp.dq_ddelta[(i, j)];
                a[(vo + i, vo + j)] += kq * pp.dq_dv[(i, j)];
            }
            for k in 0..m {
                a[(om + i, id + k)] = kp * pp.dp_did[(i, k)];
                a[(om + i, iq + k)] = kp * pp.dp_diq[(i, k)];
                a[(vo + i, id + k)] = kq * pp.dq_did[(i, k)];
                a[(vo + i, iq + k)] = kq * pp.dq_diq[(i, k)];
            }
        }
        for (k, line) in sp.lines.iter().enumerate() {
            let g = wb / line.l;
            a[(id + k, id + k)] = -g * line.r;
            a[(id + k, iq + k)] = g * line.x;
            a[(iq + k, iq + k)] = -g * line.r;
            a[(iq + k, id + k)] = -g * line.x;
            for j in 0..n {
                let c = self.c_ext[(k, j)];
                if c == T::zero() {
                    continue;
                }
                let (cos, sin) = (x.delta[j].cos(), x.delta[j].sin());
                let v = x.voltage[j];
                a[(id + k, j)] = g * c * (-v * sin);
                a[(id + k, vo + j)] = g * c * cos;
                a[(iq + k, j)] = g * c * (v * cos);
                a[(iq + k, vo + j)] = g * c * sin;
            }
        }
        a
    }
}

/// Jacobian of the vector field at `w0`, state order `(δ, ω, V, I_D, I_Q)`.
pub fn jacobian<T: Scalar>(spec: &GridSpec<T>, w0: &OperatingPoint<T>) -> Result<Matrix<T>> {
    w0.check_dims(spec)?;
    Ok(GridModel::new(spec)?.jacobian(w0))
}

/// Outcome of the filter homogeneity check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct FilterCheck<T> {
    pub eps1: T,
    /// Largest relative deviation from `eps1` over all `T_p`, `T_q`.
    pub max_rel_dev: T,
    /// Constants differed and their mean was substituted.
    pub mean_substituted: bool,
}

/// Verifies all filter constants agree within `rel_tol` and returns the
/// common value `ε₁` (the mean when they differ but are within tolerance).
pub fn check_homogeneous_filters<T: Scalar>(
    spec: &GridSpec<T>,
    rel_tol: T,
) -> Result<FilterCheck<T>> {
    let values: Vec<(usize, T)> = spec
        .inverters
        .iter()
        .enumerate()
        .flat_map(|(i, inv)| [(i, inv.t_p), (i, inv.t_q)])
        .collect();
    let first = values
        .first()
        .map(|v| v.1)
        .ok_or_else(|| Error::Structure("no inverters".into()))?;
    let all_equal = values.iter().all(|(_, v)| *v == first);
    let eps1 = if all_equal {
        first
    } else {
        values.iter().fold(T::zero(), |s, (_, v)| s + *v) / T::lit(values.len() as f64)
    };
    // offenders are reported against the first inverter's T_p
    let mut max_rel_dev = T::zero();
    for &(i, v) in &values {
        if (v - first).abs() / first > rel_tol {
            return Err(Error::HeterogeneousFilters {
                inverter: i,
                bus: spec.inverters[i].bus,
                value: v.as_f64(),
                reference: first.as_f64(),
            });
        }
        let dev = (v - eps1).abs() / eps1;
        if dev > max_rel_dev {
            max_rel_dev = dev;
        }
    }
    Ok(FilterCheck {
        eps1,
        max_rel_dev,
        mean_substituted: !all_equal,
    })
}

/// Block partition of the linearized dynamics.
#[derive(Debug, Clone)]
pub struct BlockSystem<T: Scalar> {
    pub n: usize,
    pub m: usize,
    pub a_xz: Matrix<T>,
    pub a_zz: Matrix<T>,
    pub a_zx: Matrix<T>,
    pub a_zy: Matrix<T>,
    pub a_yz: Matrix<T>,
    pub a_yx: Matrix<T>,
    pub a_yy: Matrix<T>,
    pub eps1: T,
    /// Per-line time constants `Lᵢ/ω_b`.
    pub eps2_list: Vec<T>,
    /// Geometric mean of `eps2_list`.
    pub eps2: T,
    /// `diag(ε₂/ε₂ᵢ)` repeated over the D and Q blocks (2M×2M).
    pub d2: Matrix<T>,
}

impl<T: Scalar> BlockSystem<T> {
    /// `ε₃ = ε₂/ε₁`.
    pub fn eps3(&self) -> T {
        self.eps2 / self.eps1
    }

    /// `max/min` of the line time constants.
    pub fn eps2_spread(&self) -> T {
        let max = self.eps2_list.iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a });
        let min = self
            .eps2_list
            .iter()
            .copied()
            .fold(T::lit(f64::INFINITY), |a, b| if b < a { b } else { a });
        max / min
    }

    pub fn timescale_overlap(&self) -> bool {
        self.eps2_spread() > T::lit(TIMESCALE_OVERLAP_RATIO)
    }

    /// `D₂ A_yy`, the very-fast boundary-layer matrix.
    pub fn ayy_tilde(&self) -> Matrix<T> {
        &self.d2 * &self.a_yy
    }

    /// Rebuilds the monolithic state matrix in `(x, z, y)` order from the
    /// standard form `ε₂ ẏ = D₂(…)`.
    pub fn reassemble(&self) -> Matrix<T> {
        let (n, m) = (self.n, self.m);
        let dim = 3 * n + 2 * m;
        let mut a = Matrix::zeros(dim, dim);
        a.view_mut((0, n), (n, 2 * n)).copy_from(&self.a_xz);
        let inv1 = T::one() / self.eps1;
        a.view_mut((n, 0), (2 * n, n)).copy_from(&(&self.a_zx * inv1));
        a.view_mut((n, n), (2 * n, 2 * n)).copy_from(&(&self.a_zz * inv1));
        a.view_mut((n, 3 * n), (2 * n, 2 * m)).copy_from(&(&self.a_zy * inv1));
        let scale = &self.d2 * (T::one() / self.eps2);
        a.view_mut((3 * n, 0), (2 * m, n)).copy_from(&(&scale * &self.a_yx));
        a.view_mut((3 * n, n), (2 * m, 2 * n)).copy_from(&(&scale * &self.a_yz));
        a.view_mut((3 * n, 3 * n), (2 * m, 2 * m)).copy_from(&(&scale * &self.a_yy));
        a
    }
}

/// Slices the Jacobian into the blocks of the multi-parameter form, with
/// fast rows multiplied by `ε₁` and line rows by `ε₂ᵢ`, then brings the
/// result to standard form.
pub fn extract_blocks<T: Scalar>(
    a: &Matrix<T>,
    spec: &GridSpec<T>,
    filter_rel_tol: T,
) -> Result<BlockSystem<T>> {
    let n = spec.n_inverters();
    let m = spec.n_lines();
    let dim = 3 * n + 2 * m;
    if a.nrows() != dim || a.ncols() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: a.nrows(),
        });
    }
    let eps1 = check_homogeneous_filters(spec, filter_rel_tol)?.eps1;
    let wb = spec.bases.omega_b;
    let eps2_list: Vec<T> = spec.lines.iter().map(|l| l.l / wb).collect();

    // δ̇ = ω − ω_b: no x or y coupling in the slow rows
    let a_xx = a.view((0, 0), (n, n));
    let a_xy = a.view((0, 3 * n), (n, 2 * m));
    if max_abs(&a_xx.clone_owned()) != T::zero() || max_abs(&a_xy.clone_owned()) != T::zero() {
        return Err(Error::Consistency(
            "angle rows depend on angles or currents".into(),
        ));
    }
    let a_xz = a.view((0, n), (n, 2 * n)).clone_owned();

    let zrows = a.view((n, 0), (2 * n, dim)).clone_owned() * eps1;
    let mut yrows = a.view((3 * n, 0), (2 * m, dim)).clone_owned();
    for (k, &e) in eps2_list.iter().enumerate() {
        yrows.row_mut(k).scale_mut(e);
        yrows.row_mut(m + k).scale_mut(e);
    }
    let blocks = BlockSystem {
        n,
        m,
        a_xz,
        a_zz: zrows.view((0, n), (2 * n, 2 * n)).clone_owned(),
        a_zx: zrows.view((0, 0), (2 * n, n)).clone_owned(),
        a_zy: zrows.view((0, 3 * n), (2 * n, 2 * m)).clone_owned(),
        a_yz: yrows.view((0, n), (2 * m, 2 * n)).clone_owned(),
        a_yx: yrows.view((0, 0), (2 * m, n)).clone_owned(),
        a_yy: yrows.view((0, 3 * n), (2 * m, 2 * m)).clone_owned(),
        eps1,
        eps2_list,
        eps2: T::zero(),
        d2: Matrix::identity(2 * m, 2 * m),
    };
    Ok(to_standard_form(blocks))
}

/// Sets `ε₂` to the geometric mean of the line constants and fills `D₂`.
pub fn to_standard_form<T: Scalar>(mut b: BlockSystem<T>) -> BlockSystem<T> {
    let m = b.eps2_list.len();
    let log_mean = b.eps2_list.iter().fold(T::zero(), |s, e| s + e.ln()) / T::lit(m as f64);
    let all_equal = b.eps2_list.iter().all(|e| *e == b.eps2_list[0]);
    b.eps2 = if all_equal { b.eps2_list[0] } else { log_mean.exp() };
    let mut d2 = Matrix::zeros(2 * m, 2 * m);
    for (k, e) in b.eps2_list.iter().enumerate() {
        let r = b.eps2 / *e;
        d2[(k, k)] = r;
        d2[(m + k, m + k)] = r;
    }
    b.d2 = d2;
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bases, Feeder, Inverter, Line};

    fn spec_with_filters(tp: &[(f64, f64)]) -> GridSpec<f64> {
        GridSpec {
            bases: Bases {
                v_b: 1.0,
                s_b: 1.0,
                omega_b: 100.0,
            },
            feeder: Feeder {
                bus: 0,
                v_gd: 1.0,
                v_gq: 0.0,
            },
            inverters: tp
                .iter()
                .enumerate()
                .map(|(i, &(t_p, t_q))| Inverter {
                    bus: i as u32 + 1,
                    k_p: 1.0,
                    k_q: 0.1,
                    t_p,
                    t_q,
                    omega_d: 100.0,
                    v_d: 1.0,
                    p_d: 0.0,
                    q_d: 0.0,
                })
                .collect(),
            lines: (0..tp.len())
                .map(|i| Line {
                    from_bus: i as u32 + 1,
                    to_bus: i as u32,
                    r: 0.1,
                    x: 0.2,
                    l: 0.2,
                })
                .collect(),
            loads: vec![],
        }
    }

    #[test]
    fn homogeneous_filters() {
        let s = spec_with_filters(&[(0.0318, 0.0318); 3]);
        let c = check_homogeneous_filters(&s, 1e-9).unwrap();
        assert_eq!(c.eps1, 0.0318);
        assert!(!c.mean_substituted);

        let s = spec_with_filters(&[(0.0318, 0.0318), (0.03, 0.04)]);
        let err = check_homogeneous_filters(&s, 1e-9).unwrap_err();
        assert!(matches!(err, Error::HeterogeneousFilters { inverter: 1, .. }));

        let s = spec_with_filters(&[(0.030, 0.031)]);
        let c = check_homogeneous_filters(&s, 0.05).unwrap();
        assert!((c.eps1 - 0.0305).abs() < 1e-15);
        assert!(c.mean_substituted);
    }

    #[test]
    fn geometric_mean_and_d2() {
        let mut b = BlockSystem::<f64> {
            n: 1,
            m: 2,
            a_xz: Matrix::zeros(1, 2),
            a_zz: Matrix::zeros(2, 2),
            a_zx: Matrix::zeros(2, 1),
            a_zy: Matrix::zeros(2, 4),
            a_yz: Matrix::zeros(4, 2),
            a_yx: Matrix::zeros(4, 1),
            a_yy: Matrix::zeros(4, 4),
            eps1: 1.0,
            eps2_list: vec![1e-4, 4e-4],
            eps2: 0.0,
            d2: Matrix::zeros(4, 4),
        };
        b = to_standard_form(b);
        assert!((b.eps2 - 2e-4).abs() < 1e-18);
        let d: Vec<f64> = b.d2.diagonal().iter().copied().collect();
        for (got, want) in d.iter().zip([2.0, 0.5, 2.0, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }

        b.eps2_list = vec![3e-5, 3e-5];
        b = to_standard_form(b);
        assert_eq!(b.d2, Matrix::identity(4, 4));
    }
}
