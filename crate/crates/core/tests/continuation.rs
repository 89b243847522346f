use fbsde_core::coefficients::{blend_alpha, DominationCase};
use fbsde_core::continuation::{
    residual, solve_alpha0, solve_fbsde, solve_fbsde_from, solve_linear_direct, ContinuationOptions, FbsdeSystem,
    PerturbationData, SolutionPair,
};
use fbsde_core::family::{make_monotone_family, FamilySpec};
use fbsde_core::tree::TreeTopology;

fn options() -> ContinuationOptions {
    ContinuationOptions {
        tolerance: 1e-11,
        ..ContinuationOptions::default()
    }
}

#[test]
fn linear_family_matches_the_direct_solve() {
    let topology = TreeTopology::rademacher(5).unwrap();
    for (seed, case) in [(1, DominationCase::Mu), (2, DominationCase::Nu)] {
        let (family, domination) = make_monotone_family(&topology, FamilySpec::new(2, 2, 0.0, seed, case)).unwrap();
        let system = FbsdeSystem::new(&topology, &family, &domination).unwrap();
        let perturbation = PerturbationData::zeros(&topology, 2).unwrap();
        let (solution, _) = solve_fbsde(&system, &perturbation, 1.0, &options()).unwrap();
        let direct = solve_linear_direct(&topology, family.linear_part(), &perturbation).unwrap();
        let error = solution.distance(&direct, &topology).unwrap() / direct.norm(&topology);
        assert!(error <= 1e-8, "relative error {error}");
        let record = residual(&topology, &family, &perturbation, &direct).unwrap();
        assert!(record.overall <= 1e-11, "{record:?}");
    }
}

#[test]
fn zero_target_reproduces_the_decoupled_solve() {
    let topology = TreeTopology::rademacher(3).unwrap();
    let (family, domination) =
        make_monotone_family(&topology, FamilySpec::new(2, 2, 0.1, 3, DominationCase::Mu)).unwrap();
    let system = FbsdeSystem::new(&topology, &family, &domination).unwrap();
    let perturbation = PerturbationData::random(&topology, 2, 1.0, 3).unwrap();
    let (solution, diagnostics) = solve_fbsde(&system, &perturbation, 0.0, &options()).unwrap();
    assert_eq!(solution, solve_alpha0(&system, &perturbation).unwrap());
    assert_eq!(diagnostics.alpha_grid, vec![0.0]);
}

#[test]
fn nonlinear_solution_is_independent_of_the_warm_start() {
    let topology = TreeTopology::rademacher(4).unwrap();
    for case in [DominationCase::Mu, DominationCase::Nu] {
        let (family, domination) = make_monotone_family(&topology, FamilySpec::new(2, 2, 0.1, 7, case)).unwrap();
        let system = FbsdeSystem::new(&topology, &family, &domination).unwrap();
        let perturbation = PerturbationData::zeros(&topology, 2).unwrap();
        let zero = SolutionPair::zeros(&topology, 2).unwrap();
        let random = SolutionPair::random(&topology, 2, 3.0, 11).unwrap();
        let (a, _) = solve_fbsde_from(&system, &perturbation, 1.0, &options(), Some(&zero)).unwrap();
        let (b, diagnostics) = solve_fbsde_from(&system, &perturbation, 1.0, &options(), Some(&random)).unwrap();
        let gap = a.distance(&b, &topology).unwrap();
        assert!(gap <= 1e-8, "{gap}");
        let blended = blend_alpha(&family, &domination, 1.0).unwrap();
        let record = residual(&topology, &blended, &perturbation, &b).unwrap();
        assert!(record.overall <= diagnostics.residual_bound.unwrap());
    }
}
