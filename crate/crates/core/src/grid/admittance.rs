use nalgebra::DMatrix;

use super::{Controls, NetworkModel};
use crate::error::Result;

/// Bus admittance matrix split into conductance `g` and susceptance `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Admittance {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Admittance {
    pub fn size(&self) -> usize {
        self.g.nrows()
    }
}

/// Assembles `Y = G + jB` for the given tap ratios and capacitor states.
///
/// A regulator branch with ratio `t` is an ideal `t:1` transformer on the
/// `from` side in series with the line impedance, contributing
/// `[t²y, -ty; -ty, y]`. Switched capacitors add their susceptance to the
/// diagonal, so the reactive injection they produce after power flow is
/// `|U_i|² B_i`.
pub fn build_admittance(net: &NetworkModel, controls: &Controls) -> Result<Admittance> {
    controls.validate(net)?;
    let n = net.bus_count();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);

    for (k, br) in net.branches.iter().enumerate() {
        let (gs, bs) = br.series_admittance()?;
        let t = controls.tap_ratios[k];
        let (f, to) = (br.from, br.to);
        g[(f, f)] += t * t * gs;
        b[(f, f)] += t * t * bs;
        g[(to, to)] += gs;
        b[(to, to)] += bs;
        g[(f, to)] -= t * gs;
        b[(f, to)] -= t * bs;
        g[(to, f)] -= t * gs;
        b[(to, f)] -= t * bs;
    }

    for (i, bus) in net.buses.iter().enumerate() {
        if controls.cb_on[i] {
            b[(i, i)] += bus.shunt_susceptance;
        }
    }

    Ok(Admittance { g, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Branch, Bus, BusKind};

    fn bus(id: usize, kind: BusKind, shunt: f64) -> Bus {
        Bus {
            id,
            kind,
            base_load_p: 0.0,
            base_load_q: 0.0,
            shunt_susceptance: shunt,
        }
    }

    fn line(from: usize, to: usize, r: f64, x: f64) -> Branch {
        Branch {
            from,
            to,
            resistance: r,
            reactance: x,
            tap_ratio: 1.0,
            regulator: false,
        }
    }

    fn three_bus() -> NetworkModel {
        NetworkModel {
            buses: vec![
                bus(0, BusKind::Slack, 0.0),
                bus(1, BusKind::Pq, 0.0),
                bus(2, BusKind::Pq, 0.05),
            ],
            branches: vec![line(0, 1, 0.01, 0.02), line(1, 2, 0.03, 0.04)],
            base_mva: 1.0,
            base_kv: 12.47,
        }
    }

    #[test]
    fn pure_reactance_branch() {
        let net = NetworkModel {
            buses: vec![bus(0, BusKind::Slack, 0.0), bus(1, BusKind::Pq, 0.0)],
            branches: vec![line(0, 1, 0.0, 0.1)],
            base_mva: 1.0,
            base_kv: 1.0,
        };
        let y = build_admittance(&net, &Controls::nominal(&net)).unwrap();
        assert!((y.b[(0, 1)] - 10.0).abs() < 1e-12);
        assert_eq!(y.g[(0, 1)], 0.0);
        assert!((y.b[(0, 0)] + 10.0).abs() < 1e-12);
    }

    #[test]
    fn capacitor_adds_exactly_its_susceptance() {
        let net = three_bus();
        let off = build_admittance(&net, &Controls::nominal(&net)).unwrap();
        let mut controls = Controls::nominal(&net);
        controls.cb_on[2] = true;
        let on = build_admittance(&net, &controls).unwrap();

        // Hand-summed diagonal at bus 2: only the 1-2 line touches it.
        let z2 = 0.03f64.powi(2) + 0.04f64.powi(2);
        let b_line = -0.04 / z2;
        assert!((off.b[(2, 2)] - b_line).abs() < 1e-12);
        assert!((on.b[(2, 2)] - (b_line + 0.05)).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                if (i, j) != (2, 2) {
                    assert_eq!(on.b[(i, j)], off.b[(i, j)]);
                }
                assert_eq!(on.g[(i, j)], off.g[(i, j)]);
            }
        }
    }

    #[test]
    fn nominal_taps_give_zero_row_sums() {
        let net = three_bus();
        let y = build_admittance(&net, &Controls::nominal(&net)).unwrap();
        for i in 0..3 {
            let gs: f64 = y.g.row(i).iter().sum();
            let bs: f64 = y.b.row(i).iter().sum();
            assert!(gs.abs() < 1e-9 && bs.abs() < 1e-9, "row {i}: {gs} {bs}");
        }
        assert_eq!(y.g, y.g.transpose());
        assert_eq!(y.b, y.b.transpose());
    }

    #[test]
    fn off_nominal_tap_stays_symmetric() {
        let net = three_bus();
        let mut controls = Controls::nominal(&net);
        controls.tap_ratios[0] = 1.05;
        let y = build_admittance(&net, &controls).unwrap();
        assert_eq!(y.g, y.g.transpose());
        assert_eq!(y.b, y.b.transpose());
    }

    #[test]
    fn rejects_zero_impedance_and_bad_taps() {
        let mut net = three_bus();
        net.branches[1].resistance = 0.0;
        net.branches[1].reactance = 0.0;
        assert!(build_admittance(&net, &Controls::nominal(&net)).is_err());

        let net = three_bus();
        let mut controls = Controls::nominal(&net);
        controls.tap_ratios[0] = 1.2;
        assert!(build_admittance(&net, &controls).is_err());
    }
}
