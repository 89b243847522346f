use fbsde_core::coefficients::CheckOptions;
use fbsde_core::continuation::ContinuationOptions;
use fbsde_core::linalg::{Matrix, Vector};
use fbsde_core::lq::{
    cost_blq, cost_flq, oracle_blq, oracle_flq, solve_blq, solve_flq, BackwardLqData, BackwardLqParts, ControlProcess,
    ForwardLqData, ForwardLqParts,
};
use fbsde_core::tree::{Field, NodeMap, TreeTopology};

fn scalar(value: f64) -> Matrix {
    Matrix::from_element(1, 1, value)
}

fn steps<T: Clone>(horizon: usize, value: T) -> Vec<NodeMap<T>> {
    vec![NodeMap::Uniform(value); horizon]
}

fn hand_instance() -> ForwardLqData {
    let topology = TreeTopology::rademacher(1).unwrap();
    let parts = ForwardLqParts {
        state_dim: 1,
        control_dim: 1,
        state_matrix: steps(1, scalar(1.0)),
        control_matrix: steps(1, scalar(1.0)),
        noise_state_matrix: steps(1, scalar(0.0)),
        noise_control_matrix: steps(1, scalar(0.0)),
        drift_offset: steps(1, Vector::from_element(1, 1.0)),
        noise_offset: steps(1, Vector::zeros(1)),
        initial_weight: scalar(1.0),
        terminal_weight: NodeMap::Uniform(scalar(1.0)),
        state_weight: steps(1, scalar(0.0)),
        control_weight: steps(1, scalar(1.0)),
    };
    ForwardLqData::new(topology, parts).unwrap()
}

fn options() -> (ContinuationOptions, CheckOptions) {
    (
        ContinuationOptions::default(),
        CheckOptions {
            samples: 2_000,
            ..CheckOptions::default()
        },
    )
}

#[test]
fn hand_forward_instance_has_the_closed_form_optimum() {
    let data = hand_instance();
    let (solver, check) = options();
    let solution = solve_flq(&data, &solver, &check).unwrap();
    assert!((solution.initial_state[0] + 1.0 / 3.0).abs() < 1e-10);
    assert!((solution.control.vector(0, 0)[0] + 1.0 / 3.0).abs() < 1e-10);
    assert!((solution.cost - 1.0 / 6.0).abs() < 1e-10);
    assert!(solution.stationarity < 1e-10);
    assert_eq!(solution.conditions.total_violations(), 0);

    let oracle = oracle_flq(&data).unwrap();
    assert!((oracle.initial_state[0] + 1.0 / 3.0).abs() < 1e-12);
    assert!((oracle.cost - 1.0 / 6.0).abs() < 1e-12);
    assert!(oracle.gradient_norm < 1e-10);
}

#[test]
fn homogeneous_forward_problem_has_zero_optimum() {
    let topology = TreeTopology::rademacher(3).unwrap();
    let data = ForwardLqData::random(topology.clone(), 2, 1, 5).unwrap().homogeneous();
    let (solver, check) = options();
    let solution = solve_flq(&data, &solver, &check).unwrap();
    assert!(solution.initial_state.norm() < 1e-12);
    assert!(solution.control.stacked().amax() < 1e-12);
    assert!(solution.cost.abs() < 1e-20);

    let xi = Vector::from_vec(vec![0.3, -0.7]);
    let control = ControlProcess::random(&topology, 1, 1.0, 9).unwrap();
    let once = cost_flq(&data, &xi, &control).unwrap();
    let twice = cost_flq(&data, &(&xi * 2.0), &control.add_scaled(1.0, &control).unwrap()).unwrap();
    assert!((twice - 4.0 * once).abs() <= 1e-12 * twice.abs());
}

#[test]
fn random_forward_instances_match_the_quadratic_program() {
    let (solver, check) = options();
    for seed in 0..5 {
        let topology = TreeTopology::rademacher(4).unwrap();
        let data = ForwardLqData::random(topology.clone(), 2, 1, seed).unwrap();
        let solution = solve_flq(&data, &solver, &check).unwrap();
        let oracle = oracle_flq(&data).unwrap();
        let gap = (&solution.initial_state - &oracle.initial_state).norm()
            + (solution.control.stacked() - oracle.control.stacked()).norm();
        assert!(gap < 1e-8, "seed {seed}: gap {gap}");
        assert!((solution.cost - oracle.cost).abs() < 1e-8);
        assert!(solution.stationarity < 1e-10);
        for trial in 0..20 {
            let shift = ControlProcess::random(&topology, 1, 0.5, 100 + trial).unwrap();
            let xi = &solution.initial_state + Vector::from_vec(vec![0.1, -0.2]);
            let other = cost_flq(&data, &xi, &solution.control.add_scaled(1.0, &shift).unwrap()).unwrap();
            assert!(other - solution.cost >= -1e-10);
        }
    }
}

fn zero_backward(topology: &TreeTopology, control_matrix: f64) -> BackwardLqData {
    let horizon = topology.horizon();
    let parts = BackwardLqParts {
        state_dim: 1,
        control_dim: 1,
        mean_matrix: steps(horizon, scalar(0.9)),
        noise_matrix: steps(horizon, scalar(0.2)),
        control_matrix: steps(horizon, scalar(control_matrix)),
        offset: steps(horizon, Vector::zeros(1)),
        terminal: Field::zeros(topology, horizon, 1),
        initial_weight: scalar(1.0),
        mean_weight: steps(horizon, scalar(0.5)),
        noise_weight: steps(horizon, scalar(0.5)),
        control_weight: steps(horizon, scalar(1.0)),
    };
    BackwardLqData::new(topology.clone(), parts).unwrap()
}

#[test]
fn backward_problem_with_zero_data_has_zero_optimum() {
    let topology = TreeTopology::rademacher(3).unwrap();
    let (solver, check) = options();
    let solution = solve_blq(&zero_backward(&topology, 1.0), &solver, &check).unwrap();
    assert!(solution.control.stacked().amax() < 1e-14);
    assert!(solution.state.sum_mean_square(&topology) < 1e-28);
    assert!(solution.adjoint.sum_mean_square(&topology) < 1e-28);
    assert!(solution.cost.abs() < 1e-20);
}

#[test]
fn backward_problem_without_control_channel_keeps_zero_control() {
    let topology = TreeTopology::rademacher(3).unwrap();
    let mut data = zero_backward(&topology, 0.0);
    let mut parts = data.parts().clone();
    parts.terminal = Field::constant(&topology, 3, &Vector::from_element(1, 1.0));
    data = BackwardLqData::new(topology, parts).unwrap();
    let (solver, check) = options();
    let solution = solve_blq(&data, &solver, &check).unwrap();
    assert_eq!(solution.control.stacked().amax(), 0.0);
}

#[test]
fn random_backward_instances_match_the_quadratic_program() {
    let (solver, check) = options();
    for seed in 0..5 {
        let topology = TreeTopology::rademacher(4).unwrap();
        let data = BackwardLqData::random(topology.clone(), 2, 1, seed).unwrap();
        let solution = solve_blq(&data, &solver, &check).unwrap();
        let oracle = oracle_blq(&data).unwrap();
        let gap = (solution.control.stacked() - oracle.control.stacked()).norm();
        assert!(gap < 1e-8, "seed {seed}: gap {gap}");
        assert!((solution.cost - oracle.cost).abs() < 1e-8);
        assert!(solution.stationarity < 1e-10);
        assert_eq!(solution.conditions.total_violations(), 0);
        for trial in 0..20 {
            let shift = ControlProcess::random(&topology, 1, 0.5, 200 + trial).unwrap();
            let other = cost_blq(&data, &solution.control.add_scaled(1.0, &shift).unwrap()).unwrap();
            assert!(other - solution.cost >= -1e-10);
        }
    }
}
