//! The continuation ladder.
//!
//! A grid `0 = α_0 < α_1 < … < α_L = α_target` is solved recursively: the
//! solve at `α_L` is a Picard iteration whose every step is a full solve at
//! `α_{L-1}` with the perturbation shifted by [`tilde_perturbation`], and the
//! solve at `α_0` is the decoupled sweep. A level is accepted only if its
//! iteration converges and the measured contraction factor stays below one;
//! otherwise the step is halved and the whole grid is retried.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::residual::{residual, ResidualRecord};
use super::{solve_alpha0, tilde_perturbation, FbsdeSystem, PerturbationData, SolutionPair};
use crate::coefficients::blend_alpha;
use crate::error::{Error, Result};

/// Absolute floor of the convergence test at the requested tolerance.
pub const ABS_FLOOR: f64 = 1e-12;
/// Tightest relative tolerance handed to nested levels.
const MIN_INNER_TOLERANCE: f64 = 1e-15;
/// Ratio of nested to enclosing tolerance.
const INNER_TOLERANCE_RATIO: f64 = 0.1;
/// Growth of the iterate difference over its first value that counts as divergence.
const DIVERGENCE_GROWTH: f64 = 1e3;
/// Residual allowance in units of `tol (1 + |solution|)`.
const RESIDUAL_FACTOR: f64 = 10.0;

/// Tuning of the ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationOptions {
    /// Relative tolerance on the norm of successive iterate differences.
    pub tolerance: f64,
    /// Picard iterations allowed per level and run.
    pub max_iterations: usize,
    /// First step tried by the ladder.
    pub delta_init: f64,
    /// Smallest step before the solve is abandoned.
    pub delta_min: f64,
    /// Try a single step from 0 to the target before laddering.
    pub flat_first: bool,
    /// Largest number of grid levels.
    pub max_depth: usize,
    /// Largest number of decoupled sweeps one solve may spend.
    pub work_budget: u64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 200,
            delta_init: 1.0,
            delta_min: 1.0 / 64.0,
            flat_first: true,
            max_depth: 8,
            work_budget: 5_000_000,
        }
    }
}

impl ContinuationOptions {
    /// Rejects inconsistent settings.
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Usage(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.delta_min > 0.0 && self.delta_min <= self.delta_init && self.delta_init <= 1.0) {
            return Err(Error::Usage(format!(
                "steps must satisfy 0 < delta_min <= delta_init <= 1, got {} and {}",
                self.delta_min, self.delta_init
            )));
        }
        if self.max_iterations == 0 || self.max_depth == 0 || self.work_budget == 0 {
            return Err(Error::Usage("iteration, depth and work budgets must be positive".into()));
        }
        Ok(())
    }
}

/// What happened at one grid level over all the runs it took part in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelStats {
    pub alpha_from: f64,
    pub alpha_to: f64,
    /// Picard runs started at this level.
    pub runs: u64,
    /// Picard iterations summed over those runs.
    pub iterations: u64,
    /// Longest single run.
    pub max_run_iterations: u64,
    /// Largest measured `|Δ_{i+1}| / |Δ_i|`; absent when no ratio rose above noise.
    pub contraction_factor: Option<f64>,
    /// True when every run at this level converged and contracted.
    pub accepted: bool,
}

/// One pass over a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attempt {
    pub delta: f64,
    pub grid: Vec<f64>,
    pub levels: Vec<LevelStats>,
    pub accepted: bool,
    pub outcome: String,
}

/// Record of a ladder solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub alpha_target: f64,
    /// Grid of the accepted attempt, or of the last one tried.
    pub alpha_grid: Vec<f64>,
    pub attempts: Vec<Attempt>,
    /// Decoupled sweeps performed.
    pub decoupled_solves: u64,
    /// Residual of the returned solution at the target.
    pub residual: Option<ResidualRecord>,
    /// `10 tol (1 + |solution|)`.
    pub residual_bound: Option<f64>,
    pub solution_norm: Option<f64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl SolveDiagnostics {
    /// Levels of the accepted attempt (empty when the target was 0 or nothing was accepted).
    pub fn accepted_levels(&self) -> &[LevelStats] {
        self.attempts
            .iter()
            .find(|a| a.accepted)
            .map(|a| a.levels.as_slice())
            .unwrap_or(&[])
    }
}

type Outcome = std::result::Result<SolutionPair, String>;

struct Ladder<'s, 'a> {
    system: &'s FbsdeSystem<'a>,
    options: ContinuationOptions,
    work: u64,
    levels: Vec<LevelStats>,
}

impl Ladder<'_, '_> {
    fn decoupled(&mut self, perturbation: &PerturbationData) -> Result<Outcome> {
        self.work += 1;
        if self.work > self.options.work_budget {
            return Err(Error::Resource(format!(
                "work budget of {} decoupled solves exhausted",
                self.options.work_budget
            )));
        }
        match solve_alpha0(self.system, perturbation) {
            Ok(solution) => Ok(Ok(solution)),
            Err(Error::NonFinite { time, node, what }) => {
                Ok(Err(format!("non-finite {what} at time {time}, node {node}")))
            }
            Err(other) => Err(other),
        }
    }

    fn solve_on(
        &mut self,
        grid: &[f64],
        perturbation: &PerturbationData,
        warm: &SolutionPair,
        tolerance: f64,
        top: bool,
    ) -> Result<Outcome> {
        let level = grid.len() - 1;
        if level == 0 {
            return self.decoupled(perturbation);
        }
        let topology = self.system.topology();
        let delta = grid[level] - grid[level - 1];
        let inner_tolerance = (tolerance * INNER_TOLERANCE_RATIO).max(MIN_INNER_TOLERANCE);
        let floor = ABS_FLOOR * tolerance / self.options.tolerance;
        let mut current = warm.clone();
        let mut first_difference: Option<f64> = None;
        let mut previous: Option<f64> = None;
        let mut factor: Option<f64> = None;
        let mut increases = 0;
        let mut iterations = 0u64;

        let verdict = loop {
            if iterations as usize >= self.options.max_iterations {
                break Err(format!(
                    "level {level} did not converge within {} iterations",
                    self.options.max_iterations
                ));
            }
            iterations += 1;
            let shifted = tilde_perturbation(self.system, delta, perturbation, &current)?;
            let next = match self.solve_on(&grid[..level], &shifted, &current, inner_tolerance, false)? {
                Ok(solution) => solution,
                Err(reason) => break Err(reason),
            };
            let difference = next.distance(&current, topology)?;
            let norm = next.norm(topology);
            if !(difference.is_finite() && norm.is_finite()) {
                break Err(format!("level {level} produced non-finite iterates"));
            }
            let noise = if level == 1 {
                1e3 * f64::EPSILON * (1.0 + norm)
            } else {
                10.0 * inner_tolerance * (1.0 + norm)
            };
            if let Some(prev) = previous {
                if prev > noise {
                    let ratio = difference / prev;
                    factor = Some(factor.map_or(ratio, |f: f64| f.max(ratio)));
                    if difference > prev {
                        increases += 1;
                    } else {
                        increases = 0;
                    }
                }
            }
            let first = *first_difference.get_or_insert(difference);
            if difference > DIVERGENCE_GROWTH * first.max(noise) {
                break Err(format!("level {level} diverged"));
            }
            if increases >= 2 {
                break Err(format!("level {level} is not contracting"));
            }
            previous = Some(difference);
            current = next;
            if difference <= tolerance * norm + floor {
                if top {
                    let blended = blend_alpha(self.system.coefficients(), self.system.domination(), grid[level])?;
                    let record = residual(topology, &blended, perturbation, &current)?;
                    if record.overall > RESIDUAL_FACTOR * tolerance * (1.0 + norm) {
                        continue;
                    }
                }
                break match factor {
                    Some(f) if f >= 1.0 => Err(format!("level {level} measured contraction factor {f:.3}")),
                    _ => Ok(()),
                };
            }
        };

        let stats = &mut self.levels[level - 1];
        stats.runs += 1;
        stats.iterations += iterations;
        stats.max_run_iterations = stats.max_run_iterations.max(iterations);
        if let Some(f) = factor {
            stats.contraction_factor = Some(stats.contraction_factor.map_or(f, |g| g.max(f)));
        }
        match verdict {
            Ok(()) => Ok(Ok(current)),
            Err(reason) => {
                stats.accepted = false;
                Ok(Err(reason))
            }
        }
    }

    fn attempt(
        &mut self,
        grid: Vec<f64>,
        delta: f64,
        perturbation: &PerturbationData,
        warm: &SolutionPair,
    ) -> Result<(Attempt, Option<SolutionPair>)> {
        self.levels = grid
            .windows(2)
            .map(|pair| LevelStats {
                alpha_from: pair[0],
                alpha_to: pair[1],
                runs: 0,
                iterations: 0,
                max_run_iterations: 0,
                contraction_factor: None,
                accepted: true,
            })
            .collect();
        let outcome = self.solve_on(&grid, perturbation, warm, self.options.tolerance, true)?;
        let levels = std::mem::take(&mut self.levels);
        Ok(match outcome {
            Ok(solution) => (
                Attempt {
                    delta,
                    grid,
                    levels,
                    accepted: true,
                    outcome: "converged".into(),
                },
                Some(solution),
            ),
            Err(reason) => (
                Attempt {
                    delta,
                    grid,
                    levels,
                    accepted: false,
                    outcome: reason,
                },
                None,
            ),
        })
    }
}

fn uniform_grid(target: f64, delta: f64) -> Vec<f64> {
    let steps = (target / delta - 1e-9).ceil().max(1.0) as usize;
    let mut grid: Vec<f64> = (0..steps).map(|i| i as f64 * delta).collect();
    grid.push(target);
    grid
}

/// Solves the system blended at `alpha_target` starting from the α = 0 solution.
pub fn solve_fbsde(
    system: &FbsdeSystem<'_>,
    perturbation: &PerturbationData,
    alpha_target: f64,
    options: &ContinuationOptions,
) -> Result<(SolutionPair, SolveDiagnostics)> {
    solve_fbsde_from(system, perturbation, alpha_target, options, None)
}

/// Like [`solve_fbsde`], with an optional initial guess for the top-level iteration.
pub fn solve_fbsde_from(
    system: &FbsdeSystem<'_>,
    perturbation: &PerturbationData,
    alpha_target: f64,
    options: &ContinuationOptions,
    warm: Option<&SolutionPair>,
) -> Result<(SolutionPair, SolveDiagnostics)> {
    options.validate()?;
    if !(0.0..=1.0).contains(&alpha_target) {
        return Err(Error::Usage(format!("target must lie in [0, 1], got {alpha_target}")));
    }
    let topology = system.topology();
    perturbation.check(topology, system.dim())?;
    if let Some(guess) = warm {
        guess.check(topology, system.dim())?;
    }
    let started = Instant::now();
    let mut ladder = Ladder {
        system,
        options: *options,
        work: 0,
        levels: Vec::new(),
    };
    let mut diagnostics = SolveDiagnostics {
        alpha_target,
        alpha_grid: vec![0.0],
        attempts: Vec::new(),
        decoupled_solves: 0,
        residual: None,
        residual_bound: None,
        solution_norm: None,
        wall_time: Duration::ZERO,
    };

    let finish = |solution: SolutionPair, mut diagnostics: SolveDiagnostics, work: u64| -> Result<_> {
        let blended = blend_alpha(system.coefficients(), system.domination(), alpha_target)?;
        let record = residual(topology, &blended, perturbation, &solution)?;
        let norm = solution.norm(topology);
        diagnostics.residual = Some(record);
        diagnostics.residual_bound = Some(RESIDUAL_FACTOR * options.tolerance * (1.0 + norm));
        diagnostics.solution_norm = Some(norm);
        diagnostics.decoupled_solves = work;
        diagnostics.wall_time = started.elapsed();
        Ok((solution, diagnostics))
    };

    if alpha_target == 0.0 {
        let solution = solve_alpha0(system, perturbation)?;
        return finish(solution, diagnostics, 1);
    }

    let start = match warm {
        Some(guess) => guess.clone(),
        None => match ladder.decoupled(perturbation)? {
            Ok(solution) => solution,
            Err(reason) => {
                return Err(Error::Convergence {
                    reason,
                    diagnostics: Box::new(diagnostics),
                })
            }
        },
    };

    let mut delta = options.delta_init.min(alpha_target);
    if options.flat_first {
        let grid = vec![0.0, alpha_target];
        let (attempt, solution) = ladder.attempt(grid.clone(), alpha_target, perturbation, &start)?;
        diagnostics.attempts.push(attempt);
        diagnostics.alpha_grid = grid;
        if let Some(solution) = solution {
            let work = ladder.work;
            return finish(solution, diagnostics, work);
        }
        delta = delta.min(alpha_target / 2.0);
    }

    loop {
        if delta < options.delta_min * (1.0 - 1e-12) {
            diagnostics.decoupled_solves = ladder.work;
            diagnostics.wall_time = started.elapsed();
            return Err(Error::Convergence {
                reason: format!(
                    "step {delta} fell below the minimum {} without a contracting ladder",
                    options.delta_min
                ),
                diagnostics: Box::new(diagnostics),
            });
        }
        let grid = uniform_grid(alpha_target, delta);
        if grid.len() - 1 > options.max_depth {
            return Err(Error::Resource(format!(
                "a ladder with step {delta} needs {} levels, limit is {}",
                grid.len() - 1,
                options.max_depth
            )));
        }
        let (attempt, solution) = ladder.attempt(grid.clone(), delta, perturbation, &start)?;
        diagnostics.attempts.push(attempt);
        diagnostics.alpha_grid = grid;
        if let Some(solution) = solution {
            let work = ladder.work;
            return finish(solution, diagnostics, work);
        }
        delta /= 2.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_end_at_the_target() {
        assert_eq!(uniform_grid(1.0, 0.5), vec![0.0, 0.5, 1.0]);
        assert_eq!(uniform_grid(1.0, 0.4), vec![0.0, 0.4, 0.8, 1.0]);
        assert_eq!(uniform_grid(0.3, 1.0), vec![0.0, 0.3]);
    }

    #[test]
    fn inconsistent_options_are_rejected() {
        let options = ContinuationOptions {
            delta_min: 0.5,
            delta_init: 0.25,
            ..ContinuationOptions::default()
        };
        assert!(matches!(options.validate(), Err(Error::Usage(_))));
        let options = ContinuationOptions {
            tolerance: 0.0,
            ..ContinuationOptions::default()
        };
        assert!(options.validate().is_err());
        assert!(ContinuationOptions::default().validate().is_ok());
    }
}
