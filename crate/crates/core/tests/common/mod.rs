//! Independent reference solvers for cross-checking the library.

#![allow(dead_code)]

use nalgebra::Complex;
use voltgrid::grid::{Controls, Injections, NetworkModel};

type C = Complex<f64>;

/// Complex bus admittance matrix assembled directly from branch records.
pub fn complex_ybus(net: &NetworkModel, controls: &Controls) -> Vec<Vec<C>> {
    let n = net.bus_count();
    let mut y = vec![vec![C::new(0.0, 0.0); n]; n];
    for (k, br) in net.branches.iter().enumerate() {
        let ys = C::new(1.0, 0.0) / C::new(br.resistance, br.reactance);
        let t = controls.tap_ratios[k];
        y[br.from][br.from] += ys * t * t;
        y[br.to][br.to] += ys;
        y[br.from][br.to] -= ys * t;
        y[br.to][br.from] -= ys * t;
    }
    for (i, bus) in net.buses.iter().enumerate() {
        if controls.cb_on[i] {
            y[i][i] += C::new(0.0, bus.shunt_susceptance);
        }
    }
    y
}

pub struct OracleSolution {
    pub v: Vec<C>,
    pub sweeps: usize,
}

impl OracleSolution {
    pub fn v_mag(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.norm()).collect()
    }

    pub fn v_ang(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.arg()).collect()
    }
}

/// Plain Gauss-Seidel iteration to a voltage-update tolerance of 1e-13.
pub fn gauss_seidel(net: &NetworkModel, inj: &Injections, controls: &Controls) -> OracleSolution {
    let y = complex_ybus(net, controls);
    let n = net.bus_count();
    let slack = net.slack_bus();
    let s: Vec<C> = (0..n)
        .map(|i| C::new(inj.p[i], inj.q[i]) / net.base_mva)
        .collect();
    let mut v = vec![C::new(1.0, 0.0); n];
    for sweep in 1..=200_000 {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            if i == slack {
                continue;
            }
            let mut sum = s[i].conj() / v[i].conj();
            for k in 0..n {
                if k != i {
                    sum -= y[i][k] * v[k];
                }
            }
            let updated = sum / y[i][i];
            delta = delta.max((updated - v[i]).norm());
            v[i] = updated;
        }
        if delta < 1e-13 {
            return OracleSolution { v, sweeps: sweep };
        }
    }
    panic!("Gauss-Seidel oracle did not converge");
}

/// Complex power injected at every bus by voltage profile `v`.
pub fn injected_power(net: &NetworkModel, controls: &Controls, v: &[C]) -> Vec<C> {
    let y = complex_ybus(net, controls);
    (0..v.len())
        .map(|i| {
            let current: C = (0..v.len()).map(|k| y[i][k] * v[k]).sum();
            v[i] * current.conj()
        })
        .collect()
}
