use std::path::Path;

use brachiation::configspace::endpoints_between;
use brachiation::designlab::{
    argmin_cost, run_sweep, OffsetRule, SweepAxis, SweepRecord, SweepSpec,
};
use brachiation::dynamics::{fk_hand, Point};
use brachiation::simulator::{run_brachiation, simulate_swing, CycleFrame, SwingOutcome, SwingRun};
use brachiation::tracking::{build_reference, TrackingController};
use brachiation::trajopt::{solve, IlqrProblem, Solution};
use brachiation::Error as CoreError;
use serde::Serialize;

use crate::artifacts::{
    cycle_telemetry_csv, read_trajectory, sweep_csv, telemetry_csv, trajectory_csv, write_atomic,
    write_json,
};
use crate::config::RunConfig;
use crate::error::CliError;

/// Rear handhold and target of the first swing, in the base frame of the
/// starting bar. The frame is mirrored when the next bar lies behind.
pub fn first_swing(config: &RunConfig) -> Result<(Point, Point), CliError> {
    let layout = config.bars.layout()?;
    let base = layout.base_index;
    let mirrored = layout.relative_target(base)[0] < 0.0;
    let frame = CycleFrame::new(base, layout.bar(base), mirrored);
    let rear = frame.to_base(layout.bar(base) + layout.relative_rear(base));
    let target = frame.to_base(layout.bar(base + 1));
    Ok((rear, target))
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizeSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub terminal_hand_error: f64,
    pub horizon: f64,
    pub dt: f64,
    pub steps: usize,
    pub offset_angle: f64,
    pub rear: Point,
    pub target: Point,
    pub cost_history: Vec<f64>,
}

/// Plans the first swing and writes `trajectory.csv` and `summary.json`.
/// Fails with a numerical error after writing when the solver did not
/// converge.
pub fn optimize(config: &RunConfig, out: &Path) -> Result<OptimizeSummary, CliError> {
    let (rear, target) = first_swing(config)?;
    let opt = &config.optimizer;
    let ends = endpoints_between(&config.robot, rear, target, opt.offset_angle)?;
    let horizon = opt.horizon.horizon(&config.robot, &ends.x0())?;
    let problem = IlqrProblem::swing(config.robot, &ends, horizon, opt.weights)?
        .with_steps(opt.steps)?
        .with_max_iters(opt.max_iters)
        .with_rel_tol(opt.rel_tol);
    let (solution, failure): (Solution, Option<CoreError>) = match solve(&problem) {
        Ok(s) => (s, None),
        Err(CoreError::Diverged(best)) => ((*best).clone(), Some(CoreError::Diverged(best))),
        Err(e) => return Err(e.into()),
    };
    let goal = fk_hand(&config.robot, &ends.q_t);
    let reached = fk_hand(&config.robot, &solution.trajectory.final_state().q);
    let summary = OptimizeSummary {
        initial_cost: solution.initial_cost(),
        final_cost: solution.cost(),
        iterations: solution.iterations,
        converged: solution.converged,
        terminal_hand_error: (reached - goal).norm(),
        horizon: problem.horizon,
        dt: problem.dt,
        steps: problem.steps,
        offset_angle: ends.offset_angle,
        rear,
        target,
        cost_history: solution.history.clone(),
    };
    write_atomic(
        &out.join("trajectory.csv"),
        &trajectory_csv(&solution.trajectory),
    )?;
    write_json(&out.join("summary.json"), &summary)?;
    match failure {
        Some(e) => Err(e.into()),
        None if !solution.converged => Err(CliError::NotConverged {
            iterations: solution.iterations,
        }),
        None => Ok(summary),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateSummary {
    pub caught: bool,
    pub catch_distance: f64,
    pub catch_position: Point,
    pub final_ee_error: f64,
    pub max_ee_error: f64,
    pub duration: f64,
    pub alpha: f64,
    pub disturbed: bool,
    pub singular_samples: usize,
}

impl SimulateSummary {
    fn of(outcome: &SwingOutcome, duration: f64, config: &RunConfig) -> Self {
        Self {
            caught: outcome.caught,
            catch_distance: outcome.catch_distance,
            catch_position: outcome.catch_position,
            final_ee_error: outcome.final_ee_error,
            max_ee_error: outcome.max_ee_error,
            duration,
            alpha: config.tracker.alpha,
            disturbed: config.sim.disturbance.is_some(),
            singular_samples: outcome.telemetry.iter().filter(|r| r.singular).count(),
        }
    }
}

/// Tracks a planned trajectory on the plant and writes `telemetry.csv` and
/// `outcome.json`. A missed catch is a result, not an error.
pub fn simulate(
    config: &RunConfig,
    trajectory: &Path,
    out: &Path,
) -> Result<SimulateSummary, CliError> {
    let plan = read_trajectory(trajectory)?;
    let (_, target) = first_swing(config)?;
    let reference = build_reference(&config.robot, &plan)?;
    let mut controller = TrackingController::new(config.robot, config.tracker())?;
    let duration = plan.duration();
    let run = SwingRun {
        params: &config.robot,
        x0: plan.states[0],
        reference: &reference,
        duration,
        settings: config.sim.settings(),
        target,
        disturbance: config.sim.disturbance,
    };
    let outcome = simulate_swing(&run, &mut controller)?;
    let summary = SimulateSummary::of(&outcome, duration, config);
    write_atomic(
        &out.join("telemetry.csv"),
        &telemetry_csv(&outcome.telemetry),
    )?;
    write_json(&out.join("outcome.json"), &summary)?;
    Ok(summary)
}

/// Builds the design-study spec from the config's robot, first gap,
/// optimizer settings and `[sweep]` section.
pub fn sweep_spec(config: &RunConfig) -> Result<SweepSpec, CliError> {
    let section = config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep: section is required for this command".into()))?;
    let (_, target) = first_swing(config)?;
    if target[1] != 0.0 {
        return Err(CliError::Config(
            "sweep: the first gap must be level".into(),
        ));
    }
    let mut spec = match section.axis {
        SweepAxis::BodyLength => SweepSpec::body_length_study(config.robot),
        SweepAxis::ArmMassFraction => SweepSpec::arm_mass_study(config.robot),
    };
    if let Some(values) = &section.values {
        spec.values = values.clone();
    }
    if let Some(cases) = &section.mass_cases {
        spec.mass_cases = cases.clone();
    }
    spec.offset = section.offset.unwrap_or_default();
    spec.bar_distance = target[0];
    spec.weights = config.optimizer.weights;
    spec.horizon = config.optimizer.horizon;
    spec.max_iters = config.optimizer.max_iters;
    spec.rel_tol = config.optimizer.rel_tol;
    spec.steps = config.optimizer.steps;
    spec.validate()
        .map_err(|e| CliError::Config(format!("sweep: {e}")))?;
    Ok(spec)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub offset: OffsetRule,
    /// Lowest-cost grid value per mass case.
    pub argmin: Vec<Option<f64>>,
    pub failed_points: usize,
    pub records: Vec<SweepRecord>,
}

/// Runs the design study and writes `sweep.csv` and `sweep.json`.
pub fn sweep(config: &RunConfig, out: &Path) -> Result<SweepSummary, CliError> {
    let spec = sweep_spec(config)?;
    let records = run_sweep(&spec)?;
    let summary = SweepSummary {
        axis: spec.axis,
        offset: spec.offset,
        argmin: (0..spec.mass_cases.len())
            .map(|c| argmin_cost(&records, c))
            .collect(),
        failed_points: records.iter().filter(|r| !r.solved()).count(),
        records,
    };
    write_atomic(&out.join("sweep.csv"), &sweep_csv(&summary.records))?;
    write_json(&out.join("sweep.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct CycleSummary {
    pub cycle: usize,
    pub base_bar: usize,
    pub frame: CycleFrame,
    pub rear: Point,
    pub target: Point,
    pub horizon: f64,
    pub caught: bool,
    pub catch_distance: f64,
    pub final_ee_error: f64,
    pub max_ee_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BrachiateSummary {
    pub all_caught: bool,
    pub failed_cycle: Option<usize>,
    pub solves: usize,
    pub cycles: Vec<CycleSummary>,
}

/// Runs consecutive swings along the bars and writes `brachiation.json`
/// and the combined `telemetry.csv`.
pub fn brachiate(config: &RunConfig, out: &Path) -> Result<BrachiateSummary, CliError> {
    let layout = config.bars.layout()?;
    let mut planner = config.optimizer.planner();
    let report = run_brachiation(
        &config.robot,
        &layout,
        &mut planner,
        &config.tracker(),
        &config.sim.settings(),
    )?;
    let summary = BrachiateSummary {
        all_caught: report.all_caught(),
        failed_cycle: report.failed_cycle,
        solves: planner.solves(),
        cycles: report
            .cycles
            .iter()
            .map(|c| CycleSummary {
                cycle: c.cycle,
                base_bar: c.frame.base_bar,
                frame: c.frame,
                rear: c.rear,
                target: c.target,
                horizon: c.plan.duration(),
                caught: c.outcome.caught,
                catch_distance: c.outcome.catch_distance,
                final_ee_error: c.outcome.final_ee_error,
                max_ee_error: c.outcome.max_ee_error,
            })
            .collect(),
    };
    let mut start = 0.0;
    let mut blocks = Vec::new();
    for c in &report.cycles {
        blocks.push((c.cycle, start, c.outcome.telemetry.as_slice()));
        start += c.outcome.trajectory.duration();
    }
    write_atomic(&out.join("telemetry.csv"), &cycle_telemetry_csv(blocks))?;
    write_json(&out.join("brachiation.json"), &summary)?;
    Ok(summary)
}
