//! Network description and the nonlinear inverter/line dynamics.
//!
//! State ordering is fixed everywhere as `(δ, ω, V, I_D, I_Q)`: angles,
//! frequencies and voltage amplitudes of the `N` inverters followed by the
//! dq currents of the `M` lines. Every block extraction downstream relies
//! on that order.
//!
//! All electrical quantities are per unit. The feeder is an ideal voltage
//! source `(V_gD, V_gQ)` and carries no state.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::scalar::Scalar;

/// Base quantities of the per-unit system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Bases<T> {
    /// Base voltage (V).
    #[serde(rename = "V_b")]
    pub v_b: T,
    /// Base power (VA).
    #[serde(rename = "S_b")]
    pub s_b: T,
    /// Nominal angular frequency (rad/s).
    pub omega_b: T,
}

impl<T: Scalar> Bases<T> {
    pub fn z_b(&self) -> T {
        self.v_b * self.v_b / self.s_b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Feeder<T> {
    /// Bus id lines use to reference the feeder.
    pub bus: u32,
    #[serde(rename = "V_gD")]
    pub v_gd: T,
    #[serde(rename = "V_gQ")]
    pub v_gq: T,
}

/// Droop-controlled inverter modeled as a voltage source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Inverter<T> {
    pub bus: u32,
    /// Frequency droop gain, rad/s per pu power.
    pub k_p: T,
    /// Voltage droop gain, pu/pu.
    pub k_q: T,
    #[serde(rename = "T_p")]
    pub t_p: T,
    #[serde(rename = "T_q")]
    pub t_q: T,
    pub omega_d: T,
    #[serde(rename = "V_d")]
    pub v_d: T,
    #[serde(rename = "P_d")]
    pub p_d: T,
    #[serde(rename = "Q_d")]
    pub q_d: T,
}

/// R-L line. `from_bus` is the beginning, `to_bus` the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Line<T> {
    pub from_bus: u32,
    pub to_bus: u32,
    #[serde(rename = "R_pu")]
    pub r: T,
    #[serde(rename = "X_pu")]
    pub x: T,
    #[serde(rename = "L_pu")]
    pub l: T,
}

/// Constant-impedance load attached to an inverter bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Load<T> {
    pub bus: u32,
    #[serde(rename = "R_L_pu")]
    pub r: T,
    #[serde(rename = "X_L_pu")]
    pub x: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct GridSpec<T> {
    pub bases: Bases<T>,
    pub feeder: Feeder<T>,
    pub inverters: Vec<Inverter<T>>,
    pub lines: Vec<Line<T>>,
    #[serde(default)]
    pub loads: Vec<Load<T>>,
}

/// Endpoint of a line after resolving bus ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Inverter(usize),
    Feeder,
}

impl<T: Scalar> GridSpec<T> {
    pub fn n_inverters(&self) -> usize {
        self.inverters.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Total state dimension `3N + 2M`.
    pub fn state_dim(&self) -> usize {
        3 * self.n_inverters() + 2 * self.n_lines()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Stable fingerprint of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let mut h = DefaultHasher::new();
        serde_json::to_string(self).unwrap_or_default().hash(&mut h);
        format!("{:016x}", h.finish())
    }

    fn bus_map(&self) -> HashMap<u32, Node> {
        let mut map: HashMap<u32, Node> = self
            .inverters
            .iter()
            .enumerate()
            .map(|(i, inv)| (inv.bus, Node::Inverter(i)))
            .collect();
        map.insert(self.feeder.bus, Node::Feeder);
        map
    }

    pub fn node(&self, bus: u32) -> Option<Node> {
        self.bus_map().get(&bus).copied()
    }

    /// Resolved `(beginning, end)` of every line.
    pub fn line_nodes(&self) -> Result<Vec<(Node, Node)>> {
        let map = self.bus_map();
        self.lines
            .iter()
            .enumerate()
            .map(|(k, line)| {
                let resolve = |bus| {
                    map.get(&bus).copied().ok_or_else(|| {
                        Error::Structure(format!("line {k} references unknown bus {bus}"))
                    })
                };
                Ok((resolve(line.from_bus)?, resolve(line.to_bus)?))
            })
            .collect()
    }

    /// Checks every structural and sign invariant of the model.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_inverters();
        let m = self.n_lines();
        if n == 0 {
            return Err(Error::Structure("at least one inverter is required".into()));
        }
        if m == 0 {
            return Err(Error::Structure("at least one line is required".into()));
        }
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !pos(self.bases.v_b) || !pos(self.bases.s_b) || !pos(self.bases.omega_b) {
            return Err(Error::Structure("bases must be positive".into()));
        }
        let mut buses = BTreeSet::new();
        for (i, inv) in self.inverters.iter().enumerate() {
            if inv.bus == self.feeder.bus || !buses.insert(inv.bus) {
                return Err(Error::Structure(format!(
                    "inverter {i} reuses bus id {}",
                    inv.bus
                )));
            }
            if !pos(inv.t_p) || !pos(inv.t_q) {
                return Err(Error::Structure(format!(
                    "inverter {i}: filter time constants must be positive"
                )));
            }
            let finite = [inv.k_p, inv.k_q, inv.omega_d, inv.v_d, inv.p_d, inv.q_d];
            if finite.iter().any(|v| !v.is_finite()) {
                return Err(Error::Structure(format!("inverter {i}: non-finite parameter")));
            }
        }
        let nodes = self.line_nodes()?;
        for (k, (line, (a, b))) in self.lines.iter().zip(&nodes).enumerate() {
            if a == b {
                return Err(Error::Structure(format!("line {k} is a self-loop")));
            }
            if !pos(line.r) || !pos(line.x) || !pos(line.l) {
                return Err(Error::Structure(format!(
                    "line {k}: R, X and L must be positive"
                )));
            }
        }
        for (k, load) in self.loads.iter().enumerate() {
            match self.node(load.bus) {
                Some(Node::Inverter(_)) => {}
                _ => {
                    return Err(Error::Structure(format!(
                        "load {k} is not on an inverter bus ({})",
                        load.bus
                    )))
                }
            }
            if !load.r.is_finite() || !load.x.is_finite() || load.r < T::zero() {
                return Err(Error::Structure(format!("load {k}: invalid impedance")));
            }
            if load.r * load.r + load.x * load.x <= T::zero() {
                return Err(Error::SingularLoad { bus: load.bus });
            }
        }
        // connectivity of inverters + feeder
        let idx = |nd: Node| match nd {
            Node::Inverter(i) => i,
            Node::Feeder => n,
        };
        let mut adj = vec![Vec::new(); n + 1];
        for &(a, b) in &nodes {
            adj[idx(a)].push(idx(b));
            adj[idx(b)].push(idx(a));
        }
        let mut seen = vec![false; n + 1];
        let mut queue = VecDeque::from([n]);
        seen[n] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Structure(format!(
                "inverter {i} (bus {}) is not connected to the feeder",
                self.inverters[i].bus
            )));
        }
        Ok(())
    }

    /// Casts the spec to another scalar type.
    pub fn cast<U: Scalar>(&self) -> GridSpec<U> {
        let c = |v: T| U::lit(v.as_f64());
        GridSpec {
            bases: Bases {
                v_b: c(self.bases.v_b),
                s_b: c(self.bases.s_b),
                omega_b: c(self.bases.omega_b),
            },
            feeder: Feeder {
                bus: self.feeder.bus,
                v_gd: c(self.feeder.v_gd),
                v_gq: c(self.feeder.v_gq),
            },
            inverters: self
                .inverters
                .iter()
                .map(|i| Inverter {
                    bus: i.bus,
                    k_p: c(i.k_p),
                    k_q: c(i.k_q),
                    t_p: c(i.t_p),
                    t_q: c(i.t_q),
                    omega_d: c(i.omega_d),
                    v_d: c(i.v_d),
                    p_d: c(i.p_d),
                    q_d: c(i.q_d),
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| Line {
                    from_bus: l.from_bus,
                    to_bus: l.to_bus,
                    r: c(l.r),
                    x: c(l.x),
                    l: c(l.l),
                })
                .collect(),
            loads: self
                .loads
                .iter()
                .map(|l| Load {
                    bus: l.bus,
                    r: c(l.r),
                    x: c(l.x),
                })
                .collect(),
        }
    }

    /// Sets every inverter's droop gains.
    pub fn with_gains(mut self, k_p: T, k_q: T) -> Self {
        for inv in &mut self.inverters {
            inv.k_p = k_p;
            inv.k_q = k_q;
        }
        self
    }
}

/// Full state `w = (δ, ω, V, I_D, I_Q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct OperatingPoint<T> {
    pub delta: Vec<T>,
    pub omega: Vec<T>,
    pub voltage: Vec<T>,
    pub i_d: Vec<T>,
    pub i_q: Vec<T>,
}

impl<T: Scalar> OperatingPoint<T> {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            delta: vec![T::zero(); n],
            omega: vec![T::zero(); n],
            voltage: vec![T::zero(); n],
            i_d: vec![T::zero(); m],
            i_q: vec![T::zero(); m],
        }
    }

    pub fn n_inverters(&self) -> usize {
        self.delta.len()
    }

    pub fn n_lines(&self) -> usize {
        self.i_d.len()
    }

    pub fn dim(&self) -> usize {
        3 * self.n_inverters() + 2 * self.n_lines()
    }

    pub fn to_vector(&self) -> Vector<T> {
        Vector::from_iterator(
            self.dim(),
            self.delta
                .iter()
                .chain(&self.omega)
                .chain(&self.voltage)
                .chain(&self.i_d)
                .chain(&self.i_q)
                .copied(),
        )
    }

    pub fn from_slice(n: usize, m: usize, w: &[T]) -> Result<Self> {
        let dim = 3 * n + 2 * m;
        if w.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: w.len(),
            });
        }
        Ok(Self {
            delta: w[0..n].to_vec(),
            omega: w[n..2 * n].to_vec(),
            voltage: w[2 * n..3 * n].to_vec(),
            i_d: w[3 * n..3 * n + m].to_vec(),
            i_q: w[3 * n + m..].to_vec(),
        })
    }

    pub fn from_vector(n: usize, m: usize, w: &Vector<T>) -> Result<Self> {
        Self::from_slice(n, m, w.as_slice())
    }

    pub(crate) fn check_dims(&self, spec: &GridSpec<T>) -> Result<()> {
        let (n, m) = (spec.n_inverters(), spec.n_lines());
        let ok = self.delta.len() == n
            && self.omega.len() == n
            && self.voltage.len() == n
            && self.i_d.len() == m
            && self.i_q.len() == m;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: spec.state_dim(),
                got: self.dim(),
            })
        }
    }
}

/// `C^I` (N×M): +1 where the inverter is the beginning of the line, −1 at the end.
pub fn build_incidence_inverter<T: Scalar>(spec: &GridSpec<T>) -> Result<Matrix<T>> {
    let nodes = spec.line_nodes()?;
    let mut c = Matrix::zeros(spec.n_inverters(), spec.n_lines());
    for (j, (a, b)) in nodes.into_iter().enumerate() {
        if let Node::Inverter(i) = a {
            c[(i, j)] = T::one();
        }
        if let Node::Inverter(i) = b {
            c[(i, j)] = -T::one();
        }
    }
    Ok(c)
}

/// `C^T` (M×(N+1)); the last column is the feeder.
pub fn build_incidence_extended<T: Scalar>(spec: &GridSpec<T>) -> Result<Matrix<T>> {
    let n = spec.n_inverters();
    let nodes = spec.line_nodes()?;
    let col = |nd: Node| match nd {
        Node::Inverter(i) => i,
        Node::Feeder => n,
    };
    let mut c = Matrix::zeros(spec.n_lines(), n + 1);
    for (k, (a, b)) in nodes.into_iter().enumerate() {
        c[(k, col(a))] = T::one();
        c[(k, col(b))] = -T::one();
    }
    Ok(c)
}

/// Load admittance matrices `(C^LD, C^LQ)`, each N×2N, acting on
/// `V_DQ = (V∘cos δ, V∘sin δ)`.
pub fn build_load_matrices<T: Scalar>(spec: &GridSpec<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let n = spec.n_inverters();
    let mut cld = Matrix::zeros(n, 2 * n);
    let mut clq = Matrix::zeros(n, 2 * n);
    for load in &spec.loads {
        let i = match spec.node(load.bus) {
            Some(Node::Inverter(i)) => i,
            _ => {
                return Err(Error::Structure(format!(
                    "load on non-inverter bus {}",
                    load.bus
                )))
            }
        };
        let mag2 = load.r * load.r + load.x * load.x;
        if !(mag2 > T::zero()) {
            return Err(Error::SingularLoad { bus: load.bus });
        }
        let g = load.r / mag2;
        let b = load.x / mag2;
        // several loads on one bus act in parallel
        cld[(i, i)] += g;
        cld[(i, i + n)] += b;
        clq[(i, i)] -= b;
        clq[(i, i + n)] += g;
    }
    Ok((cld, clq))
}

/// First derivatives of the inverter power outputs with respect to the state.
/// Every `∂/∂δ` and `∂/∂V` block is diagonal.
#[derive(Debug, Clone)]
pub struct PowerPartials<T: Scalar> {
    pub dp_ddelta: Matrix<T>,
    pub dp_dv: Matrix<T>,
    pub dp_did: Matrix<T>,
    pub dp_diq: Matrix<T>,
    pub dq_ddelta: Matrix<T>,
    pub dq_dv: Matrix<T>,
    pub dq_did: Matrix<T>,
    pub dq_diq: Matrix<T>,
}

/// Precomputed network matrices for repeated evaluation of the dynamics.
#[derive(Debug, Clone)]
pub struct GridModel<T: Scalar> {
    pub spec: GridSpec<T>,
    pub c_inv: Matrix<T>,
    pub c_ext: Matrix<T>,
    pub c_ld: Matrix<T>,
    pub c_lq: Matrix<T>,
}

struct Injection<T: Scalar> {
    cos: Vector<T>,
    sin: Vector<T>,
    j_d: Vector<T>,
    j_q: Vector<T>,
}

impl<T: Scalar> GridModel<T> {
    pub fn new(spec: &GridSpec<T>) -> Result<Self> {
        spec.validate()?;
        let (c_ld, c_lq) = build_load_matrices(spec)?;
        Ok(Self {
            spec: spec.clone(),
            c_inv: build_incidence_inverter(spec)?,
            c_ext: build_incidence_extended(spec)?,
            c_ld,
            c_lq,
        })
    }

    pub fn n(&self) -> usize {
        self.spec.n_inverters()
    }

    pub fn m(&self) -> usize {
        self.spec.n_lines()
    }

    fn v_dq(&self, x: &OperatingPoint<T>) -> (Vector<T>, Vector<T>, Vector<T>) {
        let n = self.n();
        let cos = Vector::from_iterator(n, x.delta.iter().map(|d| d.cos()));
        let sin = Vector::from_iterator(n, x.delta.iter().map(|d| d.sin()));
        let mut vdq = Vector::zeros(2 * n);
        for i in 0..n {
            vdq[i] = x.voltage[i] * cos[i];
            vdq[i + n] = x.voltage[i] * sin[i];
        }
        (cos, sin, vdq)
    }

    fn injection(&self, x: &OperatingPoint<T>) -> Injection<T> {
        let (cos, sin, vdq) = self.v_dq(x);
        let i_d = Vector::from_column_slice(&x.i_d);
        let i_q = Vector::from_column_slice(&x.i_q);
        let j_d = &self.c_inv * i_d + &self.c_ld * &vdq;
        let j_q = &self.c_inv * i_q + &self.c_lq * &vdq;
        Injection { cos, sin, j_d, j_q }
    }

    /// Real and reactive power output of every inverter.
    pub fn power_injections(&self, x: &OperatingPoint<T>) -> (Vector<T>, Vector<T>) {
        let n = self.n();
        let inj = self.injection(x);
        let mut p = Vector::zeros(n);
        let mut q = Vector::zeros(n);
        for i in 0..n {
            let v = x.voltage[i];
            p[i] = inj.cos[i] * v * inj.j_d[i] + inj.sin[i] * v * inj.j_q[i];
            q[i] = inj.sin[i] * v * inj.j_d[i] - inj.cos[i] * v * inj.j_q[i];
        }
        (p, q)
    }

    pub fn power_partials(&self, x: &OperatingPoint<T>) -> PowerPartials<T> {
        let n = self.n();
        let inj = self.injection(x);
        let (c, s) = (&inj.cos, &inj.sin);
        let v = &x.voltage;

        let mut dvdq_ddelta = Matrix::zeros(2 * n, n);
        let mut dvdq_dv = Matrix::zeros(2 * n, n);
        for i in 0..n {
            dvdq_ddelta[(i, i)] = -v[i] * s[i];
            dvdq_ddelta[(i + n, i)] = v[i] * c[i];
            dvdq_dv[(i, i)] = c[i];
            dvdq_dv[(i + n, i)] = s[i];
        }
        let djd_ddelta = &self.c_ld * &dvdq_ddelta;
        let djq_ddelta = &self.c_lq * &dvdq_ddelta;
        let djd_dv = &self.c_ld * &dvdq_dv;
        let djq_dv = &self.c_lq * &dvdq_dv;

        let vc = Matrix::from_diagonal(&Vector::from_iterator(n, (0..n).map(|i| v[i] * c[i])));
        let vs = Matrix::from_diagonal(&Vector::from_iterator(n, (0..n).map(|i| v[i] * s[i])));

        let diag = |f: &dyn Fn(usize) -> T| Matrix::from_diagonal(&Vector::from_iterator(n, (0..n).map(f)));
        let (jd, jq) = (&inj.j_d, &inj.j_q);

        let dp_ddelta = diag(&|i| v[i] * (c[i] * jq[i] - s[i] * jd[i]))
            + &vc * &djd_ddelta
            + &vs * &djq_ddelta;
        let dp_dv = diag(&|i| c[i] * jd[i] + s[i] * jq[i]) + &vc * &djd_dv + &vs * &djq_dv;
        let dq_ddelta = diag(&|i| v[i] * (c[i] * jd[i] + s[i] * jq[i]))
            + &vs * &djd_ddelta
            - &vc * &djq_ddelta;
        let dq_dv = diag(&|i| s[i] * jd[i] - c[i] * jq[i]) + &vs * &djd_dv - &vc * &djq_dv;

        PowerPartials {
            dp_ddelta,
            dp_dv,
            dp_did: &vc * &self.c_inv,
            dp_diq: &vs * &self.c_inv,
            dq_ddelta,
            dq_dv,
            dq_did: &vs * &self.c_inv,
            dq_diq: -(&vc * &self.c_inv),
        }
    }

    /// Right-hand side of the inverter/line dynamics.
    pub fn vector_field(&self, x: &OperatingPoint<T>) -> Vector<T> {
        let n = self.n();
        let m = self.m();
        let sp = &self.spec;
        let wb = sp.bases.omega_b;
        let (p, q) = self.power_injections(x);
        let mut out = Vector::zeros(3 * n + 2 * m);
        for (i, inv) in sp.inverters.iter().enumerate() {
            out[i] = x.omega[i] - wb;
            out[n + i] = (-x.omega[i] + inv.omega_d - inv.k_p * (p[i] - inv.p_d)) / inv.t_p;
            out[2 * n + i] = (-x.voltage[i] + inv.v_d - inv.k_q * (q[i] - inv.q_d)) / inv.t_q;
        }
        let (vbar_d, vbar_q) = self.extended_voltage(x);
        let drive_d = &self.c_ext * vbar_d;
        let drive_q = &self.c_ext * vbar_q;
        for (k, line) in sp.lines.iter().enumerate() {
            let gain = wb / line.l;
            out[3 * n + k] = gain * (-line.r * x.i_d[k] + line.x * x.i_q[k] + drive_d[k]);
            out[3 * n + m + k] = gain * (-line.r * x.i_q[k] - line.x * x.i_d[k] + drive_q[k]);
        }
        out
    }

    /// Extended voltage vectors `(V̄_D, V̄_Q)`, length N+1 with the feeder last.
    pub fn extended_voltage(&self, x: &OperatingPoint<T>) -> (Vector<T>, Vector<T>) {
        let n = self.n();
        let mut d = Vector::zeros(n + 1);
        let mut q = Vector::zeros(n + 1);
        for i in 0..n {
            d[i] = x.voltage[i] * x.delta[i].cos();
            q[i] = x.voltage[i] * x.delta[i].sin();
        }
        d[n] = self.spec.feeder.v_gd;
        q[n] = self.spec.feeder.v_gq;
        (d, q)
    }

    /// Residual of the equilibrium equations with each row multiplied by its
    /// time constant (`T_p`, `T_q`, `L/ω_b`). Angle rows are omitted.
    pub fn scaled_residual(&self, x: &OperatingPoint<T>) -> Vector<T> {
        let n = self.n();
        let m = self.m();
        let f = self.vector_field(x);
        let wb = self.spec.bases.omega_b;
        let mut r = Vector::zeros(2 * n + 2 * m);
        for (i, inv) in self.spec.inverters.iter().enumerate() {
            r[i] = f[n + i] * inv.t_p;
            r[n + i] = f[2 * n + i] * inv.t_q;
        }
        for (k, line) in self.spec.lines.iter().enumerate() {
            let tau = line.l / wb;
            r[2 * n + k] = f[3 * n + k] * tau;
            r[2 * n + m + k] = f[3 * n + m + k] * tau;
        }
        r
    }
}

pub fn power_injections<T: Scalar>(
    spec: &GridSpec<T>,
    x: &OperatingPoint<T>,
) -> Result<(Vector<T>, Vector<T>)> {
    x.check_dims(spec)?;
    Ok(GridModel::new(spec)?.power_injections(x))
}

pub fn vector_field<T: Scalar>(spec: &GridSpec<T>, x: &OperatingPoint<T>) -> Result<Vector<T>> {
    x.check_dims(spec)?;
    Ok(GridModel::new(spec)?.vector_field(x))
}
