//! Operating point where the inverter/line dynamics are at rest.
//!
//! `δ̇ = ω − ω_b` forces `ω = ω_b` at any equilibrium, so Newton runs on
//! the remaining `(δ, V, I_D, I_Q)` unknowns only. Rows are multiplied by
//! their time constants (`T_p`, `T_q`, `L/ω_b`) so that the residual is
//! measured in the algebraic balance equations rather than in rates, which
//! keeps the tolerance meaningful for very small line inductances.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridModel, GridSpec, OperatingPoint};
use crate::linalg::{condition_number, solve_vec, vec_inf_norm, Matrix, Vector};
use crate::scalar::Scalar;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EquilibriumResult<T> {
    pub point: OperatingPoint<T>,
    /// ∞-norm of the time-constant-weighted residual; the convergence measure.
    pub residual_norm: T,
    /// ∞-norm of the raw vector field at `point`.
    pub field_norm: T,
    pub iterations: usize,
    pub converged: bool,
    /// Residual norm before each Newton step, final value last.
    pub residual_history: Vec<T>,
    /// 2-norm condition estimate of the last Newton matrix.
    pub condition: Option<f64>,
    pub message: Option<String>,
}

impl<T: Scalar> EquilibriumResult<T> {
    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes an operating point as JSON.
pub fn save_point<T: Scalar>(point: &OperatingPoint<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(point)?)?;
    Ok(())
}

/// Reads an operating point written by [`save_point`]; also accepts a full
/// [`EquilibriumResult`] document.
pub fn load_point<T: Scalar>(path: impl AsRef<Path>) -> Result<OperatingPoint<T>> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(p) = serde_json::from_str::<OperatingPoint<T>>(&text) {
        return Ok(p);
    }
    let r: EquilibriumResult<T> = serde_json::from_str(&text)?;
    Ok(r.point)
}

/// `δ = 0`, `ω = ω_b`, `V = V_d` and the line currents that hold those
/// voltages in steady state.
pub fn flat_start<T: Scalar>(spec: &GridSpec<T>) -> Result<OperatingPoint<T>> {
    let model = GridModel::new(spec)?;
    let n = model.n();
    let m = model.m();
    let mut x = OperatingPoint::zeros(n, m);
    x.omega = vec![spec.bases.omega_b; n];
    x.voltage = spec.inverters.iter().map(|i| i.v_d).collect();
    let (i_d, i_q) = steady_currents(&model, &x)?;
    x.i_d = i_d;
    x.i_q = i_q;
    Ok(x)
}

/// Line currents solving `A_yy y + (C^T V̄_D, C^T V̄_Q) = 0` for the voltages in `x`.
pub fn steady_currents<T: Scalar>(
    model: &GridModel<T>,
    x: &OperatingPoint<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let m = model.m();
    let mut a_yy = Matrix::zeros(2 * m, 2 * m);
    for (k, line) in model.spec.lines.iter().enumerate() {
        a_yy[(k, k)] = -line.r;
        a_yy[(k, m + k)] = line.x;
        a_yy[(m + k, k)] = -line.x;
        a_yy[(m + k, m + k)] = -line.r;
    }
    let (vd, vq) = model.extended_voltage(x);
    let drive_d = &model.c_ext * vd;
    let drive_q = &model.c_ext * vq;
    let mut rhs = Vector::zeros(2 * m);
    for k in 0..m {
        rhs[k] = -drive_d[k];
        rhs[m + k] = -drive_q[k];
    }
    let y = solve_vec(&a_yy, &rhs, "A_yy")?;
    Ok((y.rows(0, m).iter().copied().collect(), y.rows(m, m).iter().copied().collect()))
}

struct NewtonSystem<'a, T: Scalar> {
    model: &'a GridModel<T>,
    anchor: Vec<T>,
}

impl<T: Scalar> NewtonSystem<'_, T> {
    fn n(&self) -> usize {
        self.model.n()
    }

    fn m(&self) -> usize {
        self.model.m()
    }

    fn point(&self, u: &Vector<T>) -> OperatingPoint<T> {
        let (n, m) = (self.n(), self.m());
        OperatingPoint {
            delta: u.rows(0, n).iter().copied().collect(),
            omega: vec![self.model.spec.bases.omega_b; n],
            voltage: u.rows(n, n).iter().copied().collect(),
            i_d: u.rows(2 * n, m).iter().copied().collect(),
            i_q: u.rows(2 * n + m, m).iter().copied().collect(),
        }
    }

    fn unknowns(&self, x: &OperatingPoint<T>) -> Vector<T> {
        Vector::from_iterator(
            2 * self.n() + 2 * self.m(),
            x.delta
                .iter()
                .chain(&x.voltage)
                .chain(&x.i_d)
                .chain(&x.i_q)
                .copied(),
        )
    }

    /// Residual solved by Newton. With `k_p = 0` the angle is free; its row
    /// pins δ to the initial guess instead.
    fn residual(&self, u: &Vector<T>) -> Vector<T> {
        let x = self.point(u);
        let mut r = self.model.scaled_residual(&x);
        for (i, inv) in self.model.spec.inverters.iter().enumerate() {
            if inv.k_p == T::zero() {
                r[i] = x.delta[i] - self.anchor[i];
            }
        }
        r
    }

    fn jacobian(&self, u: &Vector<T>) -> Matrix<T> {
        let (n, m) = (self.n(), self.m());
        let x = self.point(u);
        let full = self.model.jacobian(&x);
        let wb = self.model.spec.bases.omega_b;
        let dim = 2 * n + 2 * m;
        // unknown columns in the full state: δ, V, I_D, I_Q
        let cols: Vec<usize> = (0..n).chain(2 * n..3 * n + 2 * m).collect();
        let rows: Vec<usize> = (n..3 * n + 2 * m).collect();
        let mut j = Matrix::zeros(dim, dim);
        for (ri, &r) in rows.iter().enumerate() {
            let scale = if r < 2 * n {
                self.model.spec.inverters[r - n].t_p
            } else if r < 3 * n {
                self.model.spec.inverters[r - 2 * n].t_q
            } else {
                let k = (r - 3 * n) % m;
                self.model.spec.lines[k].l / wb
            };
            for (ci, &c) in cols.iter().enumerate() {
                j[(ri, ci)] = full[(r, c)] * scale;
            }
        }
        for (i, inv) in self.model.spec.inverters.iter().enumerate() {
            if inv.k_p == T::zero() {
                j.row_mut(i).fill(T::zero());
                j[(i, i)] = T::one();
            }
        }
        j
    }
}

/// Damped Newton iteration for the equilibrium near `guess`.
///
/// Never panics on singular or divergent cases; those come back with
/// `converged = false` and a message.
pub fn find_equilibrium<T: Scalar>(
    spec: &GridSpec<T>,
    guess: &OperatingPoint<T>,
    tol: T,
    max_iter: usize,
) -> Result<EquilibriumResult<T>> {
    if !(tol > T::zero()) {
        return Err(Error::Structure("tolerance must be positive".into()));
    }
    guess.check_dims(spec)?;
    let model = GridModel::new(spec)?;
    let sys = NewtonSystem {
        model: &model,
        anchor: guess.delta.clone(),
    };
    let mut u = sys.unknowns(guess);
    let mut r = sys.residual(&u);
    let mut norm = vec_inf_norm(&r);
    let mut history = vec![norm];
    let mut condition = None;
    let mut message = None;
    let mut iterations = 0;

    while !(norm <= tol) {
        if iterations >= max_iter {
            message = Some(format!("no convergence within {max_iter} iterations"));
            break;
        }
        if !norm.is_finite() {
            message = Some("residual is not finite".into());
            break;
        }
        let j = sys.jacobian(&u);
        let step = match solve_vec(&j, &(-&r), "Newton matrix") {
            Ok(s) => s,
            Err(Error::Singular { cond, .. }) => {
                condition = Some(cond);
                message = Some("singular Newton matrix".into());
                break;
            }
            Err(e) => return Err(e),
        };
        iterations += 1;

        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial = &u + &step * t;
            let rt = sys.residual(&trial);
            let nt = vec_inf_norm(&rt);
            if nt.is_finite() && nt < norm {
                u = trial;
                r = rt;
                norm = nt;
                accepted = true;
                break;
            }
            t *= T::lit(0.5);
        }
        history.push(norm);
        if !accepted {
            condition = Some(condition_number(&j).as_f64());
            message = Some("line search stalled".into());
            break;
        }
    }

    let point = sys.point(&u);
    let converged = norm <= tol && model_free_rows_consistent(&model);
    if norm <= tol && !converged {
        message = Some("k_p = 0 requires omega_d = omega_b".into());
    }
    let field_norm = vec_inf_norm(&model.vector_field(&point));
    Ok(EquilibriumResult {
        point,
        residual_norm: norm,
        field_norm,
        iterations,
        converged,
        residual_history: history,
        condition,
        message,
    })
}

/// Inverters with `k_p = 0` have a constant frequency row that must vanish.
fn model_free_rows_consistent<T: Scalar>(model: &GridModel<T>) -> bool {
    let wb = model.spec.bases.omega_b;
    model
        .spec
        .inverters
        .iter()
        .filter(|i| i.k_p == T::zero())
        .all(|i| (i.omega_d - wb).abs() <= T::eps() * wb * T::lit(4.0))
}
