//! Ten-inverter grid reconstructed from the IEEE 13-bus test feeder.
//!
//! Bus 650 is the substation feeder. Buses 633/634 are merged into 633
//! and 671/692 into 671, which leaves ten inverter buses. Line
//! impedances are the phase-averaged self impedances of the published
//! line configurations. Spot loads are scaled so the aggregate demand
//! equals the aggregate inverter rating and are turned into constant
//! impedances at nominal voltage; each inverter is dispatched to its local
//! load. `data/README.md` lists every choice.

use std::f64::consts::PI;

use crate::grid::{Bases, Feeder, GridSpec, Inverter, Line, Load};
use crate::scalar::Scalar;

pub const FEEDER_BUS: u32 = 650;
pub const V_BASE: f64 = 381.58;
pub const S_BASE: f64 = 1.0e4;
pub const FILTER_TIME_CONSTANT: f64 = 0.0318;

/// Rating of each inverter in kVA.
pub const INVERTER_RATING_KVA: f64 = 10.0;

const FEET_PER_MILE: f64 = 5280.0;

/// Inverter buses in state order.
pub const INVERTER_BUSES: [u32; 10] = [632, 633, 645, 646, 671, 680, 684, 611, 652, 675];

/// Series self impedance (Ω/mile) of a line configuration, averaged over
/// the phases present.
fn config_impedance(config: u32) -> (f64, f64) {
    match config {
        601 => (0.3418, 1.0335),
        602 => (0.7479, 1.1970),
        603 | 604 => (1.3266, 1.3520),
        605 => (1.3292, 1.3475),
        606 => (0.7952, 0.4322),
        607 => (1.3425, 0.5124),
        other => panic!("unknown line configuration {other}"),
    }
}

/// `(from, to, length in feet, configuration)`.
const LINES: [(u32, u32, f64, u32); 10] = [
    (650, 632, 2000.0, 601),
    (632, 633, 500.0, 602),
    (632, 645, 500.0, 603),
    (645, 646, 300.0, 603),
    (632, 671, 2000.0, 601),
    (671, 680, 1000.0, 601),
    (671, 684, 300.0, 604),
    (684, 611, 300.0, 605),
    (684, 652, 800.0, 607),
    (671, 675, 500.0, 606),
];

/// `(bus, kW, kvar)` after merging; the distributed load on 632-671 is
/// split evenly between its ends.
const LOADS: [(u32, f64, f64); 9] = [
    (632, 100.0, 58.0),
    (633, 400.0, 290.0),
    (645, 170.0, 125.0),
    (646, 230.0, 132.0),
    (671, 1425.0, 869.0),
    (611, 170.0, 80.0),
    (652, 128.0, 86.0),
    (675, 843.0, 462.0),
    (680, 0.0, 0.0),
];

pub fn z_base() -> f64 {
    V_BASE * V_BASE / S_BASE
}

/// Factor applied to the spot loads so their total apparent power equals
/// the combined rating of all inverters.
pub fn load_scale() -> f64 {
    let (p, q) = LOADS.iter().fold((0.0, 0.0), |a, l| (a.0 + l.1, a.1 + l.2));
    INVERTER_RATING_KVA * INVERTER_BUSES.len() as f64 / p.hypot(q)
}

/// Local load at nominal voltage in per unit, `(P, Q)`.
pub fn local_load(bus: u32) -> (f64, f64) {
    let k = load_scale() / (S_BASE / 1e3);
    LOADS
        .iter()
        .find(|l| l.0 == bus)
        .map(|&(_, p, q)| (p * k, q * k))
        .unwrap_or((0.0, 0.0))
}

/// Builds the dataset with uniform droop gains.
pub fn build_ieee13<T: Scalar>(k_q: T, k_p: T) -> GridSpec<T> {
    let omega_b = 2.0 * PI * 60.0;
    let zb = z_base();
    let lit = T::lit;

    let lines = LINES
        .iter()
        .map(|&(from, to, feet, config)| {
            let (r, x) = config_impedance(config);
            let miles = feet / FEET_PER_MILE;
            let (r_pu, x_pu) = (r * miles / zb, x * miles / zb);
            Line {
                from_bus: from,
                to_bus: to,
                r: lit(r_pu),
                x: lit(x_pu),
                l: lit(x_pu),
            }
        })
        .collect();

    let inverters = INVERTER_BUSES
        .iter()
        .map(|&bus| {
            let (p, q) = local_load(bus);
            Inverter {
                bus,
                k_p,
                k_q,
                t_p: lit(FILTER_TIME_CONSTANT),
                t_q: lit(FILTER_TIME_CONSTANT),
                omega_d: lit(omega_b),
                v_d: T::one(),
                p_d: lit(p),
                q_d: lit(q),
            }
        })
        .collect();

    let loads = INVERTER_BUSES
        .iter()
        .filter_map(|&bus| {
            let (p, q) = local_load(bus);
            let s2 = p * p + q * q;
            (s2 > 0.0).then(|| Load {
                bus,
                r: lit(p / s2),
                x: lit(q / s2),
            })
        })
        .collect();

    GridSpec {
        bases: Bases {
            v_b: lit(V_BASE),
            s_b: lit(S_BASE),
            omega_b: lit(omega_b),
        },
        feeder: Feeder {
            bus: FEEDER_BUS,
            v_gd: T::one(),
            v_gq: T::zero(),
        },
        inverters,
        lines,
        loads,
    }
}
