use nalgebra::{Complex, DMatrix, DVector};

use super::{build_admittance, Admittance, Controls, Injections, NetworkModel, PowerFlowSolution};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Max absolute P/Q mismatch in p.u.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Slack voltage magnitude in p.u.
    pub slack_voltage: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
            slack_voltage: 1.0,
        }
    }
}

/// Newton-Raphson power flow in polar coordinates from a flat start.
///
/// Non-convergence is not an error: the returned solution has
/// `converged == false` and the last iterate. Errors are reserved for
/// malformed inputs.
pub fn solve_power_flow(
    net: &NetworkModel,
    injections: &Injections,
    controls: &Controls,
) -> Result<PowerFlowSolution> {
    solve_power_flow_with(net, injections, controls, &SolverOptions::default())
}

pub fn solve_power_flow_with(
    net: &NetworkModel,
    injections: &Injections,
    controls: &Controls,
    options: &SolverOptions,
) -> Result<PowerFlowSolution> {
    net.validate()?;
    let n = net.bus_count();
    injections.validate(n)?;
    let y = build_admittance(net, controls)?;

    let slack = net.slack_bus();
    let p_spec: Vec<f64> = injections.p.iter().map(|p| p / net.base_mva).collect();
    let q_spec: Vec<f64> = injections.q.iter().map(|q| q / net.base_mva).collect();

    // Unknown ordering: [θ of each PQ bus, |U| of each PQ bus].
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();

    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    vm[slack] = options.slack_voltage;

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut max_mismatch;

    loop {
        let (p_calc, q_calc) = calc_injections(&y, &vm, &va);
        let mut mismatch = DVector::zeros(2 * m);
        for (k, &i) in pq.iter().enumerate() {
            mismatch[k] = p_spec[i] - p_calc[i];
            mismatch[m + k] = q_spec[i] - q_calc[i];
        }
        max_mismatch = mismatch.amax();
        if !max_mismatch.is_finite() {
            break;
        }
        trace.push(max_mismatch);
        if max_mismatch <= options.tolerance {
            converged = true;
            break;
        }
        if iterations >= options.max_iterations || m == 0 {
            break;
        }

        let jac = jacobian(&y, &vm, &va, &p_calc, &q_calc, &pq);
        let Some(dx) = jac.lu().solve(&mismatch) else {
            break;
        };
        for (k, &i) in pq.iter().enumerate() {
            va[i] += dx[k];
            vm[i] += dx[m + k];
        }
        iterations += 1;
        if vm.iter().any(|v| !(v.is_finite() && *v > 0.0)) || va.iter().any(|a| !a.is_finite()) {
            max_mismatch = f64::INFINITY;
            break;
        }
    }

    let (p_calc, q_calc) = calc_injections(&y, &vm, &va);
    let mut solution = PowerFlowSolution {
        v_mag: vm,
        v_ang: va,
        converged,
        iterations,
        p_loss: 0.0,
        slack_p: p_calc[slack] * net.base_mva,
        slack_q: q_calc[slack] * net.base_mva,
        max_mismatch,
        mismatch_trace: trace,
    };
    solution.p_loss = compute_power_loss(&solution, net, controls)?;
    Ok(solution)
}

/// Total series loss `Σ Re{U_ij · conj(I_ij)}` over branches, in MW.
///
/// `U_ij` is the drop across the series impedance (after the ideal tap)
/// and `I_ij = y_ij U_ij`.
pub fn compute_power_loss(
    solution: &PowerFlowSolution,
    net: &NetworkModel,
    controls: &Controls,
) -> Result<f64> {
    controls.validate(net)?;
    let u: Vec<Complex<f64>> = solution
        .v_mag
        .iter()
        .zip(&solution.v_ang)
        .map(|(&m, &a)| Complex::from_polar(m, a))
        .collect();
    let mut loss = 0.0;
    for (k, br) in net.branches.iter().enumerate() {
        let (gs, bs) = br.series_admittance()?;
        let drop = u[br.from] * controls.tap_ratios[k] - u[br.to];
        let current = Complex::new(gs, bs) * drop;
        loss += (drop * current.conj()).re;
    }
    Ok(loss * net.base_mva)
}

/// Per-bus `(ΔP, ΔQ)` of a voltage profile against specified injections, p.u.
pub fn power_mismatch(
    net: &NetworkModel,
    injections: &Injections,
    controls: &Controls,
    v_mag: &[f64],
    v_ang: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let y = build_admittance(net, controls)?;
    let (p_calc, q_calc) = calc_injections(&y, v_mag, v_ang);
    let dp = p_calc
        .iter()
        .zip(&injections.p)
        .map(|(c, s)| s / net.base_mva - c)
        .collect();
    let dq = q_calc
        .iter()
        .zip(&injections.q)
        .map(|(c, s)| s / net.base_mva - c)
        .collect();
    Ok((dp, dq))
}

fn calc_injections(y: &Admittance, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = y.size();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let (mut pi, mut qi) = (0.0, 0.0);
        for j in 0..n {
            let (g, b) = (y.g[(i, j)], y.b[(i, j)]);
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let (s, c) = (va[i] - va[j]).sin_cos();
            pi += vm[j] * (g * c + b * s);
            qi += vm[j] * (g * s - b * c);
        }
        p[i] = vm[i] * pi;
        q[i] = vm[i] * qi;
    }
    (p, q)
}

fn jacobian(
    y: &Admittance,
    vm: &[f64],
    va: &[f64],
    p: &[f64],
    q: &[f64],
    pq: &[usize],
) -> DMatrix<f64> {
    let m = pq.len();
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    for (r, &i) in pq.iter().enumerate() {
        for (c, &k) in pq.iter().enumerate() {
            let (g, b) = (y.g[(i, k)], y.b[(i, k)]);
            if i == k {
                jac[(r, c)] = -q[i] - b * vm[i] * vm[i];
                jac[(r, m + c)] = p[i] / vm[i] + g * vm[i];
                jac[(m + r, c)] = p[i] - g * vm[i] * vm[i];
                jac[(m + r, m + c)] = q[i] / vm[i] - b * vm[i];
            } else if g != 0.0 || b != 0.0 {
                let (s, co) = (va[i] - va[k]).sin_cos();
                jac[(r, c)] = vm[i] * vm[k] * (g * s - b * co);
                jac[(r, m + c)] = vm[i] * (g * co + b * s);
                jac[(m + r, c)] = -vm[i] * vm[k] * (g * co + b * s);
                jac[(m + r, m + c)] = vm[i] * (g * s - b * co);
            }
        }
    }
    jac
}
