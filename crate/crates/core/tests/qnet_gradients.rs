//! Central finite differences against the hand-written backpropagation.

use proptest::prelude::*;
use voltgrid::qnet::{
    input_gradient, surrogate_loss, td_loss_and_gradient, LossSpec, NetConfig, QNetwork, TdSample,
};

const H: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn small_config() -> NetConfig {
    NetConfig {
        hidden_layers: 2,
        hidden_width: 16,
    }
}

fn td_loss(net: &QNetwork, batch: &[TdSample<'_>]) -> f64 {
    td_loss_and_gradient(net, batch).unwrap().0
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let net = QNetwork::new(6, &[5, 2, 7], &small_config(), 11);
    let states = [
        [1.02, 0.98, 0.97, 0.95, 0.5, -0.25],
        [0.99, 1.04, 1.01, 0.93, 0.1, 0.75],
        [1.00, 0.96, 0.94, 0.91, 0.9, 0.0],
    ];
    let actions = [[0usize, 1, 6], [4, 0, 3], [2, 1, 0]];
    let targets = [[-1.0, 0.5, 2.0], [0.3, -0.7, 1.1], [0.0, 0.0, -2.0]];
    let batch: Vec<TdSample> = (0..3)
        .map(|i| TdSample {
            state: &states[i],
            actions: &actions[i],
            targets: &targets[i],
        })
        .collect();

    let (_, grads) = td_loss_and_gradient(&net, &batch).unwrap();
    let analytic = grads.flatten();
    let params = net.flatten_params();
    assert_eq!(analytic.len(), net.param_count());

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, &p) in params.iter().enumerate() {
        let mut plus = net.clone();
        plus.set_param(i, p + H);
        let mut minus = net.clone();
        minus.set_param(i, p - H);
        let numeric = (td_loss(&plus, &batch) - td_loss(&minus, &batch)) / (2.0 * H);
        // Untaken head columns and dead ReLU units carry no gradient.
        if numeric.abs() < 1e-7 && analytic[i].abs() < 1e-7 {
            continue;
        }
        worst = worst.max(rel_err(numeric, analytic[i]));
        checked += 1;
    }
    assert!(checked >= 100, "only {checked} entries checked");
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let net = QNetwork::new(6, &[5, 2, 7], &small_config(), 12);
    let state = [1.02, 0.98, 0.97, 0.95, 0.5, -0.25];
    let spec = LossSpec::new(vec![3, 1, 0]);
    let analytic = input_gradient(&net, &state, &spec).unwrap();
    for i in 0..state.len() {
        let mut plus = state;
        plus[i] += H;
        let mut minus = state;
        minus[i] -= H;
        let numeric = (surrogate_loss(&net, &plus, &spec).unwrap()
            - surrogate_loss(&net, &minus, &spec).unwrap())
            / (2.0 * H);
        assert!(
            rel_err(numeric, analytic[i]) < 1e-4,
            "entry {i}: numeric {numeric} analytic {}",
            analytic[i]
        );
    }
}

#[test]
fn input_gradient_with_temperature() {
    let net = QNetwork::new(4, &[6], &small_config(), 13);
    let state = [0.97, 1.03, 0.2, -0.5];
    let spec = LossSpec {
        targets: vec![5],
        temperature: 0.5,
    };
    let analytic = input_gradient(&net, &state, &spec).unwrap();
    for i in 0..state.len() {
        let mut plus = state;
        plus[i] += H;
        let mut minus = state;
        minus[i] -= H;
        let numeric = (surrogate_loss(&net, &plus, &spec).unwrap()
            - surrogate_loss(&net, &minus, &spec).unwrap())
            / (2.0 * H);
        assert!(rel_err(numeric, analytic[i]) < 1e-4, "entry {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn input_gradient_fd_random_states(
        seed in 0u64..1000,
        state in proptest::collection::vec(0.9f64..1.1, 5),
        t0 in 0usize..4,
        t1 in 0usize..3,
    ) {
        let net = QNetwork::new(5, &[4, 3], &small_config(), seed);
        let spec = LossSpec::new(vec![t0, t1]);
        let analytic = input_gradient(&net, &state, &spec).unwrap();
        for i in 0..state.len() {
            let mut plus = state.clone();
            plus[i] += H;
            let mut minus = state.clone();
            minus[i] -= H;
            let numeric = (surrogate_loss(&net, &plus, &spec).unwrap()
                - surrogate_loss(&net, &minus, &spec).unwrap())
                / (2.0 * H);
            // Absolute slack covers the rare sample that straddles a ReLU kink.
            prop_assert!(
                rel_err(numeric, analytic[i]) < 1e-4 || (numeric - analytic[i]).abs() < 1e-6,
                "entry {}: numeric {} analytic {}", i, numeric, analytic[i]
            );
        }
    }
}
