use fbsde_core::bsde::{solve_bsde, BsdeProblem};
use fbsde_core::coefficients::{blend_alpha, check_conditions, CheckOptions, CoefficientSet, DominationCase, Theta};
use fbsde_core::continuation::{tilde_perturbation, FbsdeSystem, PerturbationData, SolutionPair};
use fbsde_core::family::{make_monotone_family, FamilySpec};
use fbsde_core::linalg::Vector;
use fbsde_core::lq::{cost_flq, ControlProcess, ForwardLqData};
use fbsde_core::tree::{conditional_moment_slacks, random_adapted, random_field, NoiseLaw, TreeTopology};
use proptest::prelude::*;

fn case_strategy() -> impl Strategy<Value = DominationCase> {
    prop_oneof![Just(DominationCase::Mu), Just(DominationCase::Nu)]
}

fn law_strategy() -> impl Strategy<Value = NoiseLaw> {
    // Two-point laws with zero mean and unit variance.
    (0.1f64..0.9).prop_map(|p| {
        let high = ((1.0 - p) / p).sqrt();
        let low = -(p / (1.0 - p)).sqrt();
        NoiseLaw::new(vec![high, low], vec![p, 1.0 - p]).unwrap()
    })
}

fn theta(values: &[f64]) -> Theta {
    Theta::new(
        Vector::from_column_slice(&values[0..2]),
        Vector::from_column_slice(&values[2..4]),
        Vector::from_column_slice(&values[4..6]),
    )
}

fn max_gap(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn blend_is_affine_in_alpha(
        seed in 0u64..1_000,
        case in case_strategy(),
        a1 in 0.0f64..=1.0,
        a2 in 0.0f64..=1.0,
        t in 0.0f64..=1.0,
        values in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let topology = TreeTopology::rademacher(3).unwrap();
        let (family, domination) = make_monotone_family(&topology, FamilySpec::new(2, 2, 0.1, seed, case)).unwrap();
        let mixed = t * a1 + (1.0 - t) * a2;
        let first = blend_alpha(&family, &domination, a1).unwrap();
        let second = blend_alpha(&family, &domination, a2).unwrap();
        let between = blend_alpha(&family, &domination, mixed).unwrap();
        let point = theta(&values);
        let (g1, g2, gm) = (first.gamma(1, 1, &point), second.gamma(1, 1, &point), between.gamma(1, 1, &point));
        prop_assert!(max_gap(&gm.driver, &(g1.driver * t + g2.driver * (1.0 - t))) < 1e-12);
        prop_assert!(max_gap(&gm.drift, &(g1.drift * t + g2.drift * (1.0 - t))) < 1e-12);
        prop_assert!(max_gap(&gm.diffusion, &(g1.diffusion * t + g2.diffusion * (1.0 - t))) < 1e-12);
        let y = point.y.clone();
        let lambda_mix = first.lambda(&y) * t + second.lambda(&y) * (1.0 - t);
        prop_assert!(max_gap(&between.lambda(&y), &lambda_mix) < 1e-12);
        let phi_mix = first.phi(3, &point.x) * t + second.phi(3, &point.x) * (1.0 - t);
        prop_assert!(max_gap(&between.phi(3, &point.x), &phi_mix) < 1e-12);
    }

    #[test]
    fn blending_preserves_the_conditions(
        seed in 0u64..1_000,
        case in case_strategy(),
        alpha in 0.0f64..=1.0,
    ) {
        let topology = TreeTopology::rademacher(3).unwrap();
        let (family, domination) = make_monotone_family(&topology, FamilySpec::new(2, 2, 0.1, seed, case)).unwrap();
        let blended = blend_alpha(&family, &domination, alpha).unwrap();
        let options = CheckOptions { samples: 300, seed, ..CheckOptions::default() };
        let report = check_conditions(&blended, &domination, &topology, &options).unwrap();
        prop_assert_eq!(report.total_violations(), 0);
    }

    #[test]
    fn conditional_averages_never_increase_second_moments(
        law in law_strategy(),
        seed in 0u64..1_000,
    ) {
        let topology = TreeTopology::new(4, law).unwrap();
        let process = random_adapted(&topology, 2, 0..=4, seed).unwrap();
        for (mean_slack, weighted_slack) in conditional_moment_slacks(&topology, &process).unwrap() {
            prop_assert!(mean_slack >= -1e-12);
            prop_assert!(weighted_slack >= -1e-12);
        }
    }

    #[test]
    fn tilde_perturbation_is_affine_in_the_guess(
        seed in 0u64..1_000,
        case in case_strategy(),
        delta in 0.0f64..=1.0,
    ) {
        let topology = TreeTopology::rademacher(3).unwrap();
        let (family, domination) = make_monotone_family(&topology, FamilySpec::new(2, 2, 0.0, seed, case)).unwrap();
        let system = FbsdeSystem::new(&topology, &family, &domination).unwrap();
        let data = PerturbationData::random(&topology, 2, 1.0, seed).unwrap();
        let zero_data = PerturbationData::zeros(&topology, 2).unwrap();
        let first = SolutionPair::random(&topology, 2, 1.0, seed + 1).unwrap();
        let second = SolutionPair::random(&topology, 2, 1.0, seed + 2).unwrap();
        let sum = first.add_scaled(1.0, &second).unwrap();
        let zero_guess = SolutionPair::zeros(&topology, 2).unwrap();
        // For affine coefficients the map guess -> tilde is affine, so the
        // second difference vanishes.
        let combined = tilde_perturbation(&system, delta, &data, &sum).unwrap()
            .add_scaled(-1.0, &tilde_perturbation(&system, delta, &data, &first).unwrap()).unwrap()
            .add_scaled(-1.0, &tilde_perturbation(&system, delta, &zero_data, &second).unwrap()).unwrap()
            .add_scaled(1.0, &tilde_perturbation(&system, delta, &zero_data, &zero_guess).unwrap()).unwrap();
        let size = combined.xi.amax()
            .max(combined.eta.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .max(combined.phi.fields().iter().flat_map(|f| f.data()).fold(0.0f64, |m, v| m.max(v.abs())))
            .max(combined.psi.fields().iter().flat_map(|f| f.data()).fold(0.0f64, |m, v| m.max(v.abs())))
            .max(combined.gamma.fields().iter().flat_map(|f| f.data()).fold(0.0f64, |m, v| m.max(v.abs())));
        prop_assert!(size < 1e-12, "second difference {}", size);
    }

    #[test]
    fn conditional_expectation_is_a_projection(
        law in law_strategy(),
        seed in 0u64..1_000,
        cut in 1usize..5,
    ) {
        let full = TreeTopology::new(5, law.clone()).unwrap();
        let terminal = random_field(&full, 5, 2, seed).unwrap();
        let problem = BsdeProblem::new(&full, terminal, Box::new(|_, _, y, _| y.clone())).unwrap();
        let values = solve_bsde(&problem).unwrap();
        let shorter = TreeTopology::new(cut, law).unwrap();
        let again = BsdeProblem::new(&shorter, values.field(cut).clone(), Box::new(|_, _, y, _| y.clone())).unwrap();
        let repeated = solve_bsde(&again).unwrap();
        for k in 0..=cut {
            for (a, b) in repeated.field(k).data().iter().zip(values.field(k).data()) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn homogeneous_forward_cost_is_quadratic(
        seed in 0u64..1_000,
        scale in -3.0f64..3.0,
    ) {
        let topology = TreeTopology::rademacher(3).unwrap();
        let data = ForwardLqData::random(topology.clone(), 2, 1, seed).unwrap().homogeneous();
        let initial = Vector::from_vec(vec![0.4, -1.1]);
        let control = ControlProcess::random(&topology, 1, 1.0, seed).unwrap();
        let zero = ControlProcess::zeros(&topology, 1).unwrap();
        let base = cost_flq(&data, &initial, &control).unwrap();
        let scaled = cost_flq(&data, &(&initial * scale), &zero.add_scaled(scale, &control).unwrap()).unwrap();
        prop_assert!((scaled - scale * scale * base).abs() <= 1e-12 * base.abs().max(1.0));
    }
}
