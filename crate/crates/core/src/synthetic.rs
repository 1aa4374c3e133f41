//! Seeded random grids with a known equilibrium.
//!
//! The operating point is drawn first and the setpoints are set to the
//! powers it produces, so the drawn point is an exact equilibrium. Voltage
//! gains are then drawn below the decentralized upper bounds.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conditions::{voltage_gain_bounds, GainBound};
use crate::equilibrium::{flat_start, steady_currents};
use crate::error::{Error, Result};
use crate::grid::{Bases, Feeder, GridModel, GridSpec, Inverter, Line, Load, OperatingPoint};
use crate::timescale::nu_terms;

pub const FEEDER_BUS: u32 = 100;

/// Sampling ranges. Ranges given as `(lo, hi)` on `log10` are log-uniform.
#[derive(Debug, Clone, Serialize)]
pub struct RandomGridConfig {
    pub max_inverters: usize,
    pub r_range: (f64, f64),
    pub x_over_r: (f64, f64),
    /// `log10(L/X)`.
    pub l_ratio_log10: (f64, f64),
    pub load_probability: f64,
    pub load_p: (f64, f64),
    pub angle_spread: f64,
    pub voltage_spread: f64,
    /// `log10(k_p)`.
    pub k_p_log10: (f64, f64),
    /// Fraction of the voltage gain upper bound.
    pub k_q_fraction: (f64, f64),
    /// `log10(k_q)` when the bound is infinite.
    pub k_q_log10: (f64, f64),
    /// `log10(T_p)`, shared by `T_q`.
    pub filter_log10: (f64, f64),
    pub max_attempts: usize,
}

impl Default for RandomGridConfig {
    fn default() -> Self {
        Self {
            max_inverters: 3,
            r_range: (0.02, 0.2),
            x_over_r: (0.5, 3.0),
            l_ratio_log10: (-4.0, 0.0),
            load_probability: 0.7,
            load_p: (0.1, 0.8),
            angle_spread: 0.05,
            voltage_spread: 0.03,
            k_p_log10: (-2.0, 0.0),
            k_q_fraction: (0.05, 0.95),
            k_q_log10: (-2.0, 0.0),
            filter_log10: (-3.5, -1.0),
            max_attempts: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGrid {
    pub seed: u64,
    pub spec: GridSpec<f64>,
    pub equilibrium: OperatingPoint<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    10f64.powf(uniform(rng, range))
}

/// Line endpoints as node indices, the feeder being node `n`. A random
/// tree, plus one extra line for two inverters half of the time.
fn topology(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (0..n)
        .map(|i| {
            let parent = rng.gen_range(0..=i);
            let parent = if parent == i { n } else { parent };
            if rng.gen_bool(0.5) {
                (parent, i)
            } else {
                (i, parent)
            }
        })
        .collect();
    if n == 2 && rng.gen_bool(0.5) {
        let all = [(0, 1), (0, 2), (1, 2)];
        if let Some(&e) = all
            .iter()
            .find(|e| !edges.iter().any(|f| *f == **e || (f.1, f.0) == **e))
        {
            edges.push(e);
        }
    }
    edges
}

fn draw(rng: &mut ChaCha8Rng, seed: u64, cfg: &RandomGridConfig) -> Result<SyntheticGrid> {
    let n = rng.gen_range(1..=cfg.max_inverters.max(1));
    let omega_b = 2.0 * PI * 60.0;
    let bus = |node: usize| if node == n { FEEDER_BUS } else { node as u32 + 1 };

    let lines = topology(rng, n)
        .into_iter()
        .map(|(a, b)| {
            let r = uniform(rng, cfg.r_range);
            let x = r * uniform(rng, cfg.x_over_r);
            Line {
                from_bus: bus(a),
                to_bus: bus(b),
                r,
                x,
                l: x * log_uniform(rng, cfg.l_ratio_log10),
            }
        })
        .collect::<Vec<_>>();

    let mut loads = Vec::new();
    for i in 0..n {
        if rng.gen_bool(cfg.load_probability) {
            let p = uniform(rng, cfg.load_p);
            let q = p * uniform(rng, (0.0, 0.5));
            let s2 = p * p + q * q;
            loads.push(Load {
                bus: bus(i),
                r: p / s2,
                x: q / s2,
            });
        }
    }

    let filter = log_uniform(rng, cfg.filter_log10);
    let inverters = (0..n)
        .map(|i| inverter(bus(i), log_uniform(rng, cfg.k_p_log10), 0.0, filter, omega_b))
        .collect();

    let mut spec = GridSpec {
        bases: Bases {
            v_b: 1.0,
            s_b: 1.0,
            omega_b,
        },
        feeder: Feeder {
            bus: FEEDER_BUS,
            v_gd: 1.0,
            v_gq: 0.0,
        },
        inverters,
        lines,
        loads,
    };
    spec.validate()?;

    let mut x = OperatingPoint::zeros(n, spec.n_lines());
    x.omega = vec![omega_b; n];
    for i in 0..n {
        x.delta[i] = uniform(rng, (-cfg.angle_spread, cfg.angle_spread));
        x.voltage[i] = 1.0 + uniform(rng, (-cfg.voltage_spread, cfg.voltage_spread));
    }
    let model = GridModel::new(&spec)?;
    let (i_d, i_q) = steady_currents(&model, &x)?;
    x.i_d = i_d;
    x.i_q = i_q;
    let (p, q) = model.power_injections(&x);
    for (i, inv) in spec.inverters.iter_mut().enumerate() {
        inv.v_d = x.voltage[i];
        inv.p_d = p[i];
        inv.q_d = q[i];
    }

    let bounds = voltage_gain_bounds(&nu_terms(&spec, &x)?)?;
    for (inv, bound) in spec.inverters.iter_mut().zip(bounds) {
        inv.k_q = match bound {
            GainBound::UpperBounded { upper } => upper * uniform(rng, cfg.k_q_fraction),
            GainBound::UnboundedPositive => log_uniform(rng, cfg.k_q_log10),
        };
    }
    Ok(SyntheticGrid {
        seed,
        spec,
        equilibrium: x,
    })
}

/// Draws a grid from `seed`, redrawing until the voltage-gain bounds apply.
pub fn random_grid(seed: u64, cfg: &RandomGridConfig) -> Result<SyntheticGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..cfg.max_attempts.max(1) {
        match draw(&mut rng, seed, cfg) {
            Ok(g) => return Ok(g),
            Err(e @ Error::NuNotNegative { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Structure("no attempts made".into())))
}

/// Sets `P_d`, `Q_d` to the flat-start injections, making the flat start
/// an equilibrium for every choice of droop gains.
fn dispatch_flat(spec: &mut GridSpec<f64>) -> Result<()> {
    let x = flat_start(spec)?;
    let (p, q) = GridModel::new(spec)?.power_injections(&x);
    for (i, inv) in spec.inverters.iter_mut().enumerate() {
        inv.p_d = p[i];
        inv.q_d = q[i];
    }
    Ok(())
}

fn inverter(bus: u32, k_p: f64, k_q: f64, filter: f64, omega_b: f64) -> Inverter<f64> {
    Inverter {
        bus,
        k_p,
        k_q,
        t_p: filter,
        t_q: filter,
        omega_d: omega_b,
        v_d: 1.0,
        p_d: 0.0,
        q_d: 0.0,
    }
}

/// One inverter feeding a resistive-inductive load through one line, with
/// filters fast enough to certify.
pub fn single_inverter(k_p: f64, k_q: f64) -> GridSpec<f64> {
    let omega_b = 2.0 * PI * 60.0;
    let mut spec = GridSpec {
        bases: Bases {
            v_b: 1.0,
            s_b: 1.0,
            omega_b,
        },
        feeder: Feeder {
            bus: FEEDER_BUS,
            v_gd: 1.0,
            v_gq: 0.0,
        },
        inverters: vec![inverter(1, k_p, k_q, 1e-3, omega_b)],
        lines: vec![Line {
            from_bus: 1,
            to_bus: FEEDER_BUS,
            r: 0.05,
            x: 0.1,
            l: 1e-5,
        }],
        loads: vec![Load {
            bus: 1,
            r: 2.0,
            x: 0.5,
        }],
    };
    dispatch_flat(&mut spec).expect("fixed grid is valid");
    spec
}

/// Feeder, inverter 1 and inverter 2 in a chain, with a capacitor bank of
/// reactance `x_cap` (negative) at bus 2. Large voltage gains destabilize it.
pub fn capacitive_pair(k_p: f64, k_q: f64, x_cap: f64) -> GridSpec<f64> {
    let omega_b = 2.0 * PI * 60.0;
    let line = |from, to| Line {
        from_bus: from,
        to_bus: to,
        r: 0.05,
        x: 0.1,
        l: 1e-5,
    };
    let mut spec = GridSpec {
        bases: Bases {
            v_b: 1.0,
            s_b: 1.0,
            omega_b,
        },
        feeder: Feeder {
            bus: FEEDER_BUS,
            v_gd: 1.0,
            v_gq: 0.0,
        },
        inverters: vec![
            inverter(1, k_p, k_q, 1e-3, omega_b),
            inverter(2, k_p, k_q, 1e-3, omega_b),
        ],
        lines: vec![line(1, FEEDER_BUS), line(2, 1)],
        loads: vec![
            Load {
                bus: 1,
                r: 2.0,
                x: 0.5,
            },
            Load {
                bus: 2,
                r: 0.01,
                x: x_cap,
            },
        ],
    };
    dispatch_flat(&mut spec).expect("fixed grid is valid");
    spec
}
