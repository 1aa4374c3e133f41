//! Adaptive Dormand–Prince 5(4) integration of the nonlinear and the
//! linearized dynamics.

use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GridModel, GridSpec, OperatingPoint};
use crate::linalg::{Matrix, Vector};
use crate::scalar::Scalar;

pub const DEFAULT_RTOL: f64 = 1e-8;
pub const DEFAULT_ATOL: f64 = 1e-10;
pub const STEP_FLOOR: f64 = 1e-9;
pub const MAX_FLOOR_STEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct StepControl<T: Scalar> {
    pub rtol: T,
    pub atol: T,
    /// Smallest step; error-test failures at this size are accepted with a warning.
    pub h_min: T,
    pub h_max: Option<T>,
    pub h_init: Option<T>,
    /// Consecutive floor steps tolerated before aborting.
    pub max_floor_steps: usize,
    /// Spacing of recorded samples; every accepted step when absent.
    pub output_dt: Option<T>,
    pub max_steps: usize,
}

impl<T: Scalar> Default for StepControl<T> {
    fn default() -> Self {
        Self {
            rtol: T::lit(DEFAULT_RTOL),
            atol: T::lit(DEFAULT_ATOL),
            h_min: T::lit(STEP_FLOOR),
            h_max: None,
            h_init: None,
            max_floor_steps: MAX_FLOOR_STEPS,
            output_dt: None,
            max_steps: 50_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(bound = "T: Scalar")]
pub struct TrajectoryMeta<T: Scalar> {
    pub method: &'static str,
    pub control: StepControl<T>,
    pub spec_hash: Option<String>,
    pub seed: Option<u64>,
    pub accepted: usize,
    pub rejected: usize,
    pub floor_steps: usize,
    pub stiffness_warning: bool,
    /// Reason the integration stopped before the horizon.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Trajectory<T: Scalar> {
    pub times: Vec<T>,
    pub states: Vec<Vector<T>>,
    pub meta: TrajectoryMeta<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn last(&self) -> Option<(T, &Vector<T>)> {
        self.times.last().copied().zip(self.states.last())
    }

    pub fn completed(&self) -> bool {
        self.meta.aborted.is_none()
    }

    /// Writes `t` followed by the state columns named in `header`.
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[String]) -> Result<()> {
        write!(w, "t")?;
        for h in header {
            write!(w, ",{h}")?;
        }
        writeln!(w)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            write!(w, "{}", t)?;
            for v in x.iter() {
                write!(w, ",{}", v)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Column names in state order: `delta_1.., omega_1.., V_1.., I_D1.., I_Q1..`.
pub fn state_header(n: usize, m: usize) -> Vec<String> {
    let mut h = Vec::with_capacity(3 * n + 2 * m);
    for prefix in ["delta_", "omega_", "V_"] {
        h.extend((1..=n).map(|i| format!("{prefix}{i}")));
    }
    for prefix in ["I_D", "I_Q"] {
        h.extend((1..=m).map(|k| format!("{prefix}{k}")));
    }
    h
}

// Dormand–Prince tableau
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `ẏ = f(t, y)` from `t = 0` to `horizon`.
pub fn integrate<T, F>(
    mut f: F,
    y0: &[T],
    horizon: T,
    ctrl: &StepControl<T>,
) -> Result<Trajectory<T>>
where
    T: Scalar,
    F: FnMut(T, &[T], &mut [T]),
{
    if horizon < T::zero() || !horizon.is_finite() {
        return Err(Error::Integration {
            t: 0.0,
            reason: format!("horizon must be finite and nonnegative, got {}", horizon),
        });
    }
    let n = y0.len();
    let lit = T::lit;
    let mut meta = TrajectoryMeta {
        method: "dormand-prince-5(4)",
        control: *ctrl,
        spec_hash: None,
        seed: None,
        accepted: 0,
        rejected: 0,
        floor_steps: 0,
        stiffness_warning: false,
        aborted: None,
    };
    let mut times = vec![T::zero()];
    let mut states = vec![Vector::from_column_slice(y0)];
    if horizon == T::zero() || n == 0 {
        return Ok(Trajectory { times, states, meta });
    }

    let mut y = y0.to_vec();
    let mut k: Vec<Vec<T>> = vec![vec![T::zero(); n]; 7];
    let mut tmp = vec![T::zero(); n];
    let mut y_new = vec![T::zero(); n];
    f(T::zero(), &y, &mut k[0]);

    let h_max = ctrl.h_max.unwrap_or(horizon);
    let mut h = match ctrl.h_init {
        Some(h) => h,
        None => initial_step(&y, &k[0], ctrl),
    }
    .min(h_max)
    .max(ctrl.h_min);
    let mut t = T::zero();
    let mut next_out = ctrl.output_dt;
    let mut floor_run = 0usize;

    while t < horizon {
        if meta.accepted + meta.rejected >= ctrl.max_steps {
            meta.aborted = Some(format!("step budget of {} exhausted", ctrl.max_steps));
            break;
        }
        let last = t + h >= horizon;
        if last {
            h = horizon - t;
        }
        for s in 1..7 {
            for i in 0..n {
                let mut acc = T::zero();
                for (j, kj) in k.iter().enumerate().take(s) {
                    let a = A[s][j];
                    if a != 0.0 {
                        acc += lit(a) * kj[i];
                    }
                }
                tmp[i] = y[i] + h * acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            f(t + lit(C[s]) * h, &tmp, &mut tail[0]);
            if s == 6 {
                y_new.copy_from_slice(&tmp);
            }
        }
        let mut err = T::zero();
        for i in 0..n {
            let mut e = T::zero();
            for (j, kj) in k.iter().enumerate() {
                if E[j] != 0.0 {
                    e += lit(E[j]) * kj[i];
                }
            }
            let sc = ctrl.atol + ctrl.rtol * y[i].abs().max(y_new[i].abs());
            let r = (h * e).abs() / sc;
            if r > err {
                err = r;
            }
        }
        if !err.is_finite() && h > ctrl.h_min {
            meta.rejected += 1;
            h = (h * lit(0.1)).max(ctrl.h_min);
            continue;
        }
        let at_floor = h <= ctrl.h_min && !last;
        if err <= T::one() || at_floor {
            if err > T::one() {
                meta.floor_steps += 1;
                floor_run += 1;
                if !meta.stiffness_warning {
                    meta.stiffness_warning = true;
                    log::warn!(
                        "step size collapsed to the floor {:e} at t = {:e}; system is stiff",
                        ctrl.h_min.as_f64(),
                        t.as_f64()
                    );
                }
                if floor_run > ctrl.max_floor_steps {
                    meta.aborted = Some(format!(
                        "{} consecutive steps at the floor",
                        floor_run
                    ));
                    break;
                }
            } else {
                floor_run = 0;
            }
            t = if last { horizon } else { t + h };
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            meta.accepted += 1;
            if y.iter().any(|v| !v.is_finite()) {
                meta.aborted = Some(format!("state became non-finite at t = {}", t));
                break;
            }
            let record = match next_out {
                None => true,
                Some(tn) => t >= tn || t >= horizon,
            };
            if record {
                times.push(t);
                states.push(Vector::from_column_slice(&y));
                if let (Some(tn), Some(dt)) = (next_out.as_mut(), ctrl.output_dt) {
                    while *tn <= t {
                        *tn += dt;
                    }
                }
            }
        } else {
            meta.rejected += 1;
        }
        let factor = if err == T::zero() {
            lit(5.0)
        } else {
            (lit(0.9) * err.powf(lit(-0.2))).min(lit(5.0)).max(lit(0.2))
        };
        h = (h * factor).min(h_max).max(ctrl.h_min);
    }
    if let Some(reason) = &meta.aborted {
        log::warn!("integration aborted: {reason}");
    }
    Ok(Trajectory { times, states, meta })
}

fn initial_step<T: Scalar>(y: &[T], f0: &[T], ctrl: &StepControl<T>) -> T {
    let mut d0 = T::zero();
    let mut d1 = T::zero();
    for (yi, fi) in y.iter().zip(f0) {
        let sc = ctrl.atol + ctrl.rtol * yi.abs();
        d0 = d0.max(yi.abs() / sc);
        d1 = d1.max(fi.abs() / sc);
    }
    if d0 < T::lit(1e-5) || d1 < T::lit(1e-5) {
        T::lit(1e-6)
    } else {
        T::lit(0.01) * d0 / d1
    }
}

/// Seeded perturbation of Euclidean norm `magnitude` in a uniformly drawn
/// direction.
pub fn random_perturbation<T: Scalar>(dim: usize, magnitude: T, seed: u64) -> Vector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v = Vector::<f64>::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| T::lit(x / n) * magnitude);
        }
        if dim == 0 {
            return Vector::zeros(0);
        }
    }
}

/// Integrates the nonlinear dynamics from `x0`.
pub fn simulate_nonlinear<T: Scalar>(
    spec: &GridSpec<T>,
    x0: &OperatingPoint<T>,
    horizon: T,
    ctrl: &StepControl<T>,
) -> Result<Trajectory<T>> {
    x0.check_dims(spec)?;
    let model = GridModel::new(spec)?;
    let (n, m) = (model.n(), model.m());
    let mut traj = integrate(
        |_, y, dy| {
            let x = OperatingPoint::from_slice(n, m, y).expect("integrator keeps the state length");
            let f = model.vector_field(&x);
            dy.copy_from_slice(f.as_slice());
        },
        x0.to_vector().as_slice(),
        horizon,
        ctrl,
    )?;
    traj.meta.spec_hash = Some(spec.fingerprint());
    Ok(traj)
}

/// Integrates `ẇ = A w` from `w0`.
pub fn simulate_linear<T: Scalar>(
    a: &Matrix<T>,
    w0: &[T],
    horizon: T,
    ctrl: &StepControl<T>,
) -> Result<Trajectory<T>> {
    if !a.is_square() || a.nrows() != w0.len() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            got: w0.len(),
        });
    }
    integrate(
        |_, y, dy| {
            for (i, d) in dy.iter_mut().enumerate() {
                let mut s = T::zero();
                for (j, yj) in y.iter().enumerate() {
                    s += a[(i, j)] * *yj;
                }
                *d = s;
            }
        },
        w0,
        horizon,
        ctrl,
    )
}

/// Least-squares slope of `log‖x(t) − x_ref‖` over the trailing `window`
/// fraction of the trajectory (1/s). Positive for growing trajectories.
pub fn decay_rate<T: Scalar>(traj: &Trajectory<T>, reference: Option<&[T]>, window: T) -> T {
    let Some(&t_end) = traj.times.last() else {
        return T::zero();
    };
    let t_start = t_end * (T::one() - window.min(T::one()).max(T::zero()));
    let pts: Vec<(T, T)> = traj
        .times
        .iter()
        .zip(&traj.states)
        .filter(|(t, _)| **t >= t_start)
        .filter_map(|(t, x)| {
            let nrm = match reference {
                Some(r) => x.iter().zip(r).fold(T::zero(), |s, (a, b)| s + (*a - *b) * (*a - *b)).sqrt(),
                None => x.norm(),
            };
            (nrm > T::zero() && nrm.is_finite()).then(|| (*t, nrm.ln()))
        })
        .collect();
    if pts.len() < 2 {
        return T::zero();
    }
    let k = T::lit(pts.len() as f64);
    let (st, sl) = pts.iter().fold((T::zero(), T::zero()), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mt, ml) = (st / k, sl / k);
    let (num, den) = pts.iter().fold((T::zero(), T::zero()), |a, p| {
        (a.0 + (p.0 - mt) * (p.1 - ml), a.1 + (p.0 - mt) * (p.0 - mt))
    });
    if den > T::zero() {
        num / den
    } else {
        T::zero()
    }
}
