//! Mode dispatch: builds solver inputs from a config and fills a report.

use fbsde_core::bsde::{bsde_stability_report, solve_bsde, BsdeProblem};
use fbsde_core::coefficients::{
    blend_alpha, check_conditions, CoefficientSet, DominationData, Negated, Orientation, Reflected,
};
use fbsde_core::continuation::{
    perturbation_report, solve_fbsde, FbsdeSystem, PerturbationData, SolveDiagnostics,
};
use fbsde_core::family::make_monotone_family;
use fbsde_core::lq::{
    cost_blq, cost_flq, insurance_demo, insurance_path_sum, oracle_blq, oracle_flq, solve_blq, solve_flq,
    ControlProcess,
};
use fbsde_core::sde::{sde_stability_report, solve_sde, SdeProblem};
use fbsde_core::suite::{run_suite, SuiteOptions, CRITERIA};
use fbsde_core::tree::{random_field, TreeTopology};
use fbsde_core::Error as SolverError;

use crate::config::{self, salt, ExperimentConfig, Mode, TerminalConfig};
use crate::error::{CliError, CliResult};
use crate::report::{ProcessRecord, Report, Status, TopologyRecord};

/// Step size of the random controls compared against an LQ optimum.
const COMPARISON_SCALE: f64 = 0.5;

/// A finished or partially finished run.
pub struct Outcome {
    pub report: Report,
    /// Set when the run must exit nonzero although a report exists.
    pub failure: Option<CliError>,
}

impl Outcome {
    fn ok(report: Report) -> Self {
        Self { report, failure: None }
    }
}

/// Builds every input of the configured mode without solving anything.
pub fn validate(config: &ExperimentConfig) -> CliResult<()> {
    dispatch(config, true).map(|_| ())
}

/// Runs the configured mode.
pub fn execute(config: &ExperimentConfig) -> CliResult<Outcome> {
    dispatch(config, false)
}

/// Runs the suite block of `config`, whatever its mode.
pub fn execute_suite(config: &ExperimentConfig, dry_run: bool) -> CliResult<Outcome> {
    let mut report = Report::new(Mode::Suite.name());
    let criteria = config
        .suite
        .as_ref()
        .and_then(|s| s.criteria.clone())
        .unwrap_or_else(|| (1..=CRITERIA).collect());
    if criteria.is_empty() {
        return Err(CliError::at("suite.criteria", "selection is empty"));
    }
    if let Some(bad) = criteria.iter().find(|&&id| id == 0 || id > CRITERIA) {
        return Err(CliError::at("suite.criteria", format!("no criterion {bad}, valid ids are 1..={CRITERIA}")));
    }
    let options = SuiteOptions {
        seed: config.seed.unwrap_or(SuiteOptions::default().seed),
    };
    report.seeds.insert("suite", options.seed);
    if dry_run {
        return Ok(Outcome::ok(report));
    }
    let outcomes = run_suite(&criteria, &options)?;
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id.to_string()).collect();
    report.suite = Some(outcomes);
    if failed.is_empty() {
        return Ok(Outcome::ok(report));
    }
    report.status = Status::Failed;
    let message = format!("criteria failed: {}", failed.join(", "));
    report.error = Some(message.clone());
    Ok(Outcome {
        report,
        failure: Some(CliError::SuiteFailed(message)),
    })
}

fn dispatch(config: &ExperimentConfig, dry_run: bool) -> CliResult<Outcome> {
    if config.mode == Mode::Suite {
        return execute_suite(config, dry_run);
    }
    let topology = config.topology()?;
    let mut report = Report::new(config.mode.name());
    if let Some(seed) = config.seed {
        report.seeds.insert("base", seed);
    }
    report.topology = Some(TopologyRecord::new(&topology));
    let result = match config.mode {
        Mode::Sde => run_sde(config, &topology, &mut report, dry_run),
        Mode::Bsde => run_bsde(config, &topology, &mut report, dry_run),
        Mode::Fbsde => run_fbsde(config, &topology, &mut report, dry_run),
        Mode::Check => run_check(config, &topology, &mut report, dry_run),
        Mode::Flq => run_flq(config, &topology, &mut report, dry_run),
        Mode::Blq => run_blq(config, &topology, &mut report, dry_run),
        Mode::Insurance => run_insurance(config, &topology, &mut report, dry_run),
        Mode::Suite => unreachable!("handled above"),
    };
    match result {
        Ok(()) => Ok(Outcome::ok(report)),
        Err(failure) => finish_with_failure(report, failure),
    }
}

/// Turns a solver failure into a partial report; config errors stay errors.
fn finish_with_failure(mut report: Report, failure: RunFailure) -> CliResult<Outcome> {
    let error = match failure {
        RunFailure::Config(error) => return Err(error),
        RunFailure::Solver(error) => error,
    };
    if let SolverError::Convergence { diagnostics, .. } = &error {
        report.diagnostics = Some((**diagnostics).clone());
    }
    let failure = CliError::from(error);
    if matches!(failure, CliError::Validation(_)) {
        return Err(failure);
    }
    report.status = match failure {
        CliError::NotConverged(_) => Status::NotConverged,
        _ => Status::Failed,
    };
    report.error = Some(failure.to_string());
    Ok(Outcome {
        report,
        failure: Some(failure),
    })
}

/// Errors raised while building inputs versus while solving.
enum RunFailure {
    Config(CliError),
    Solver(SolverError),
}

impl From<CliError> for RunFailure {
    fn from(error: CliError) -> Self {
        RunFailure::Config(error)
    }
}

impl From<SolverError> for RunFailure {
    fn from(error: SolverError) -> Self {
        RunFailure::Solver(error)
    }
}

type RunResult = Result<(), RunFailure>;

fn run_sde(config: &ExperimentConfig, topology: &TreeTopology, report: &mut Report, dry_run: bool) -> RunResult {
    let block = config.block(&config.sde, "sde")?;
    let dim = block.initial.len();
    if dim == 0 {
        return Err(CliError::at("sde.initial", "must not be empty").into());
    }
    let initial = config::vector(&block.initial, dim, "sde.initial")?;
    let drift = config::affine_terms(&block.drift, topology.horizon(), dim, "sde.drift")?;
    let diffusion = config::affine_terms(&block.diffusion, topology.horizon(), dim, "sde.diffusion")?;
    let build = || SdeProblem::affine(topology, initial.clone(), drift.clone(), diffusion.clone());
    let problem = build().map_err(|e| CliError::at("sde", e))?;
    if dry_run {
        return Ok(());
    }
    let x = solve_sde(&problem)?;
    let stability = sde_stability_report(&problem, &build()?)?;
    report.solution_mut().processes.push(ProcessRecord::new("x", &x));
    report.estimates = Some(serde_json::json!({ "bound": stability.bound }));
    Ok(())
}

fn terminal_dim(terminal: &TerminalConfig) -> usize {
    match terminal {
        TerminalConfig::Constant(values) => values.len(),
        TerminalConfig::PerNode(rows) => rows.first().map_or(0, Vec::len),
    }
}

fn run_bsde(config: &ExperimentConfig, topology: &TreeTopology, report: &mut Report, dry_run: bool) -> RunResult {
    let block = config.block(&config.bsde, "bsde")?;
    let dim = terminal_dim(&block.terminal);
    if dim == 0 {
        return Err(CliError::at("bsde.terminal", "must not be empty").into());
    }
    let terminal = config::terminal_field(&block.terminal, topology, dim, "bsde.terminal")?;
    let blocks = config::bsde_blocks(&block.steps, topology.horizon(), dim)?;
    let build = || BsdeProblem::affine(topology, terminal.clone(), blocks.clone());
    let problem = build().map_err(|e| CliError::at("bsde", e))?;
    if dry_run {
        return Ok(());
    }
    let y = solve_bsde(&problem)?;
    let stability = bsde_stability_report(&problem, &build()?)?;
    report.solution_mut().processes.push(ProcessRecord::new("y", &y));
    report.estimates = Some(serde_json::json!({ "bound": stability.bound }));
    Ok(())
}

/// Coefficients and domination data named by the `[coefficients]` block.
struct Built {
    base: Box<dyn CoefficientSet>,
    domination: DominationData,
    negate: bool,
}

fn build_coefficients(config: &ExperimentConfig, topology: &TreeTopology, report: &mut Report) -> CliResult<Built> {
    let block = config.block(&config.coefficients, "coefficients")?;
    match (&block.family, &block.affine) {
        (Some(family), None) => {
            if block.domination.is_some() {
                return Err(CliError::at(
                    "coefficients.domination",
                    "a family brings its own domination data",
                ));
            }
            let seed = config.seed_for(family.seed, salt::FAMILY);
            report.seeds.insert("family", seed);
            let (coefficients, domination) =
                make_monotone_family(topology, family.spec(seed)).map_err(|e| CliError::at("coefficients.family", e))?;
            Ok(Built {
                base: Box::new(coefficients),
                domination,
                negate: family.negate,
            })
        }
        (None, Some(affine)) => {
            let domination = block
                .domination
                .as_ref()
                .ok_or_else(|| CliError::at("coefficients.domination", "missing block for affine coefficients"))?
                .build(topology.horizon())?;
            let coefficients = affine.build(topology)?;
            domination
                .check(topology, coefficients.dim())
                .map_err(|e| CliError::at("coefficients.domination", e))?;
            Ok(Built {
                base: Box::new(coefficients),
                domination,
                negate: false,
            })
        }
        _ => Err(CliError::at("coefficients", "give exactly one of family and affine")),
    }
}

fn run_check(config: &ExperimentConfig, topology: &TreeTopology, report: &mut Report, dry_run: bool) -> RunResult {
    let built = build_coefficients(config, topology, report)?;
    let check = config.check_options()?;
    report.seeds.insert("check", check.seed);
    if dry_run {
        return Ok(());
    }
    let negated = Negated::new(built.base.as_ref());
    let coefficients: &dyn CoefficientSet = if built.negate { &negated } else { built.base.as_ref() };
    let conditions = check_conditions(coefficients, &built.domination, topology, &check)?;
    report.conditions = Some(conditions);
    Ok(())
}

fn run_fbsde(config: &ExperimentConfig, topology: &TreeTopology, report: &mut Report, dry_run: bool) -> RunResult {
    let built = build_coefficients(config, topology, report)?;
    let options = config.continuation_options()?;
    let alpha = config.alpha()?;
    let check = config.check_options()?;
    let dim = built.base.dim();
    let (perturbation, perturbation_seed) = config.perturbation(topology, dim)?;
    if let Some(seed) = perturbation_seed {
        report.seeds.insert("perturbation", seed);
    }
    if config.check_enabled() {
        report.seeds.insert("check", check.seed);
    }
    if dry_run {
        return Ok(());
    }

    let negated = Negated::new(built.base.as_ref());
    let coefficients: &dyn CoefficientSet = if built.negate { &negated } else { built.base.as_ref() };
    if config.check_enabled() {
        report.conditions = Some(check_conditions(coefficients, &built.domination, topology, &check)?);
    }
    let flipped = config.solver.orientation == Orientation::Flipped;
    let reflected = Reflected::new(coefficients);
    let solved: &dyn CoefficientSet = if flipped { &reflected } else { coefficients };
    let data = if flipped { perturbation.reflected() } else { perturbation };
    let system = FbsdeSystem::new(topology, solved, &built.domination)?;
    let (pair, diagnostics) = solve_fbsde(&system, &data, alpha, &options)?;
    record_ladder(report, &diagnostics);
    let solution = if flipped { pair.reflected() } else { pair.clone() };
    let record = report.solution_mut();
    record.processes.push(ProcessRecord::new("x", &solution.x));
    record.processes.push(ProcessRecord::new("y", &solution.y));

    let zero = PerturbationData::zeros(topology, dim)?;
    if data != zero {
        let (base_pair, _) = solve_fbsde(&system, &zero, alpha, &options)?;
        let blended = blend_alpha(solved, &built.domination, alpha)?;
        let estimate = perturbation_report(topology, &blended, &built.domination, &data, &zero, &pair, &base_pair)?;
        report.estimates = Some(serde_json::json!({ "perturbation": estimate }));
    }
    report.diagnostics = Some(diagnostics);
    Ok(())
}

fn record_ladder(report: &mut Report, diagnostics: &SolveDiagnostics) {
    report.residual = diagnostics.residual.clone();
    if let Some(bound) = diagnostics.residual_bound {
        report.residuals.insert("bound".into(), bound);
    }
    if let Some(norm) = diagnostics.solution_norm {
        report.residuals.insert("solution_norm".into(), norm);
    }
}

fn min_gap(gaps: impl Iterator<Item = f64>) -> Option<f64> {
    gaps.fold(None, |best, gap| Some(best.map_or(gap, |b: f64| b.min(gap))))
}

fn run_flq(config: &ExperimentConfig, topology: &TreeTopology, report: &mut Report, dry_run: bool) -> RunResult {
    let block = config.block(&config.flq, "flq")?;
    let (data, seed) = block.build(config, topology)?;
    if let Some(seed) = seed {
        report.seeds.insert("lq", seed);
    }
    let options = config.continuation_options()?;
    let check = config.check_options()?;
    report.seeds.insert("check", check.seed);
    let comparison_seed = config.seed_for(None, salt::COMPARISON);
    if block.comparisons > 0 {
        report.seeds.insert("comparison", comparison_seed);
    }
    if dry_run {
        return Ok(());
    }
    let solution = solve_flq(&data, &options, &check)?;
    let oracle = oracle_flq(&data)?;
    let n = data.parts().state_dim;
    let m = data.parts().control_dim;
    let mut gaps = Vec::with_capacity(block.comparisons);
    for trial in 0..block.comparisons as u64 {
        let seed = comparison_seed.wrapping_add(trial);
        let shift = ControlProcess::random(topology, m, COMPARISON_SCALE, seed)?;
        let initial = &solution.initial_state + random_field(topology, 0, n, seed)?.vector(0) * COMPARISON_SCALE;
        let other = cost_flq(&data, &initial, &solution.control.add_scaled(1.0, &shift)?)?;
        gaps.push(other - solution.cost);
    }

    let record = report.solution_mut();
    record.processes.push(ProcessRecord::new("control", solution.control.process()));
    record.processes.push(ProcessRecord::new("state", &solution.state));
    record.processes.push(ProcessRecord::new("adjoint", &solution.adjoint));
    record.quantities.insert("cost".into(), solution.cost);
    for (i, value) in solution.initial_state.iter().enumerate() {
        record.quantities.insert(format!("initial_state[{i}]"), *value);
    }
    let oracle_gap = ((&solution.initial_state - &oracle.initial_state).norm_squared()
        + (solution.control.stacked() - oracle.control.stacked()).norm_squared())
    .sqrt();
    let optimality = &mut report.optimality;
    optimality.insert("oracle_cost".into(), oracle.cost);
    optimality.insert("oracle_gap".into(), oracle_gap);
    optimality.insert("cost_gap".into(), (solution.cost - oracle.cost).abs());
    optimality.insert("oracle_gradient_norm".into(), oracle.gradient_norm);
    optimality.insert("stationarity".into(), solution.stationarity);
    optimality.insert("direct_gap".into(), solution.direct_gap);
    optimality.insert("comparisons".into(), gaps.len() as f64);
    if let Some(gap) = min_gap(gaps.into_iter()) {
        optimality.insert("min_comparison_gap".into(), gap);
    }
    report.conditions = Some(solution.conditions);
    record_ladder(report, &solution.diagnostics);
    report.diagnostics = Some(solution.diagnostics);
    Ok(())
}

fn run_blq(config: &ExperimentConfig, topology: &TreeTopology, report: &mut Report, dry_run: bool) -> RunResult {
    let block = config.block(&config.blq, "blq")?;
    let (data, seed) = block.build(config, topology)?;
    if let Some(seed) = seed {
        report.seeds.insert("lq", seed);
    }
    let options = config.continuation_options()?;
    let check = config.check_options()?;
    report.seeds.insert("check", check.seed);
    let comparison_seed = config.seed_for(None, salt::COMPARISON);
    if block.comparisons > 0 {
        report.seeds.insert("comparison", comparison_seed);
    }
    if dry_run {
        return Ok(());
    }
    let solution = solve_blq(&data, &options, &check)?;
    let oracle = oracle_blq(&data)?;
    let m = data.parts().control_dim;
    let mut gaps = Vec::with_capacity(block.comparisons);
    for trial in 0..block.comparisons as u64 {
        let shift = ControlProcess::random(topology, m, COMPARISON_SCALE, comparison_seed.wrapping_add(trial))?;
        let other = cost_blq(&data, &solution.control.add_scaled(1.0, &shift)?)?;
        gaps.push(other - solution.cost);
    }

    let record = report.solution_mut();
    record.processes.push(ProcessRecord::new("control", solution.control.process()));
    record.processes.push(ProcessRecord::new("state", &solution.state));
    record.processes.push(ProcessRecord::new("adjoint", &solution.adjoint));
    record.quantities.insert("cost".into(), solution.cost);
    let optimality = &mut report.optimality;
    optimality.insert("oracle_cost".into(), oracle.cost);
    optimality.insert(
        "oracle_gap".into(),
        (solution.control.stacked() - oracle.control.stacked()).norm(),
    );
    optimality.insert("cost_gap".into(), (solution.cost - oracle.cost).abs());
    optimality.insert("oracle_gradient_norm".into(), oracle.gradient_norm);
    optimality.insert("stationarity".into(), solution.stationarity);
    optimality.insert("direct_gap".into(), solution.direct_gap);
    optimality.insert("comparisons".into(), gaps.len() as f64);
    if let Some(gap) = min_gap(gaps.into_iter()) {
        optimality.insert("min_comparison_gap".into(), gap);
    }
    report.conditions = Some(solution.conditions);
    record_ladder(report, &solution.diagnostics);
    report.diagnostics = Some(solution.diagnostics);
    Ok(())
}

fn run_insurance(config: &ExperimentConfig, topology: &TreeTopology, report: &mut Report, dry_run: bool) -> RunResult {
    let block = config.block(&config.insurance, "insurance")?;
    let parameters = block.parameters(topology.horizon())?;
    parameters.validate(topology).map_err(|e| CliError::at("insurance", e))?;
    let (investment, seed) = block.investment(config, topology)?;
    if let Some(seed) = seed {
        report.seeds.insert("control", seed);
    }
    if dry_run {
        return Ok(());
    }
    let solution = insurance_demo(topology, &parameters, &investment)?;
    let path_sums = insurance_path_sum(topology, &parameters, &investment)?;
    let path_gap = solution
        .liability
        .iter()
        .zip(&path_sums)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()))
        .fold(0.0f64, f64::max);

    let record = report.solution_mut();
    record.processes.push(ProcessRecord::new("investment", investment.process()));
    record.processes.push(ProcessRecord::new("wealth", &solution.wealth));
    record.processes.push(ProcessRecord::from_fields("liability", 0, &solution.liability));
    report.residuals.insert("wealth".into(), solution.residuals.wealth);
    report.residuals.insert("liability".into(), solution.residuals.liability);
    report.residuals.insert("path_sum_gap".into(), path_gap);
    Ok(())
}
