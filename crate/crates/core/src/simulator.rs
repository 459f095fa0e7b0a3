//! Closed-loop swing simulation and multi-bar brachiation.
//!
//! The plant is integrated with RK4 at `plant_dt`; the controller is
//! sampled every `control_dt` and its torque held in between. A hand force
//! disturbance enters as the joint torque `Jᵀ F`.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::configspace::{endpoints_between, wrap_angle, BarLayout};
use crate::dynamics::{
    fk_all, fk_hand, jacobian_hand, step_with, ChainPoints, ControlInput, FullState, Integrator,
    Point, RobotParams,
};
use crate::error::{Error, Result};
use crate::tracking::{
    build_reference, task_error, Controller, Reference, TrackerConfig, TrackingController,
};
use crate::trajopt::{
    solve_best_effort, CostWeights, HorizonRule, IlqrProblem, Trajectory, DEFAULT_STEPS,
};

/// Constant hand force over a time window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    /// (Fx, Fz) in newtons.
    pub force: [f64; 2],
    /// [t_start, t_end] in seconds after the swing starts.
    pub window: [f64; 2],
}

impl DisturbanceSpec {
    pub fn validate(&self) -> Result<()> {
        let [start, end] = self.window;
        if !(start < end) || !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidParams {
                field: "disturbance.window",
                reason: "t_start must be < t_end".into(),
            });
        }
        if !self.force.iter().all(|f| f.is_finite()) {
            return Err(Error::InvalidParams {
                field: "disturbance.force",
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }

    pub fn active(&self, t: f64) -> bool {
        t >= self.window[0] && t <= self.window[1]
    }

    fn joint_torque(&self, params: &RobotParams, t: f64, x: &FullState) -> Vector3<f64> {
        if self.active(t) {
            jacobian_hand(params, &x.q).transpose() * Point::from(self.force)
        } else {
            Vector3::zeros()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub plant_dt: f64,
    pub control_dt: f64,
    pub catch_tolerance: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            plant_dt: 1e-4,
            control_dt: 1e-3,
            catch_tolerance: 0.03,
        }
    }
}

impl SimSettings {
    /// Plant steps per control sample.
    pub fn substeps(&self) -> Result<usize> {
        let bad = |reason: String| Error::InvalidParams {
            field: "sim",
            reason,
        };
        if !(self.plant_dt > 0.0 && self.control_dt > 0.0) {
            return Err(bad("plant_dt and control_dt must be > 0".into()));
        }
        if !(self.catch_tolerance > 0.0) {
            return Err(bad("catch_tolerance must be > 0".into()));
        }
        let ratio = (self.control_dt / self.plant_dt).round();
        if ratio < 1.0 || (ratio * self.plant_dt - self.control_dt).abs() > 1e-9 * self.control_dt {
            return Err(bad(format!(
                "control_dt {} is not an integer multiple of plant_dt {}",
                self.control_dt, self.plant_dt
            )));
        }
        Ok(ratio as usize)
    }
}

/// One controller sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub t: f64,
    pub state: FullState,
    pub u: ControlInput,
    pub u_config: ControlInput,
    pub u_task: ControlInput,
    pub ee_error: Point,
    pub ee_error_rate: Point,
    pub singular: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwingOutcome {
    /// Plant states at the control samples and applied torques. The cost
    /// field is not meaningful for executed runs and is left at zero.
    pub trajectory: Trajectory,
    pub telemetry: Vec<TelemetryRow>,
    pub max_ee_error: f64,
    pub final_ee_error: f64,
    pub caught: bool,
    /// Hand position at the end of the swing, in the base frame.
    pub catch_position: Point,
    pub catch_distance: f64,
}

impl SwingOutcome {
    pub fn ee_error(&self) -> impl Iterator<Item = Point> + '_ {
        self.telemetry.iter().map(|row| row.ee_error)
    }
}

/// Inputs of one simulated swing, all in the base frame.
#[derive(Clone, Copy, Debug)]
pub struct SwingRun<'a> {
    pub params: &'a RobotParams,
    pub x0: FullState,
    pub reference: &'a Reference,
    pub duration: f64,
    pub settings: SimSettings,
    pub target: Point,
    pub disturbance: Option<DisturbanceSpec>,
}

/// `‖FK(q_T) − target‖ ≤ tol`; the boundary counts as caught.
pub fn catch_check(params: &RobotParams, x_t: &FullState, target: Point, tolerance: f64) -> bool {
    (fk_hand(params, &x_t.q) - target).norm() <= tolerance
}

pub fn simulate_swing<C: Controller>(
    run: &SwingRun<'_>,
    controller: &mut C,
) -> Result<SwingOutcome> {
    let params = run.params;
    params.validate()?;
    let substeps = run.settings.substeps()?;
    if let Some(d) = &run.disturbance {
        d.validate()?;
    }
    if !(run.duration > 0.0) {
        return Err(Error::InvalidProblem("swing duration must be > 0".into()));
    }
    let control_dt = run.settings.control_dt;
    let plant_dt = run.settings.plant_dt;
    let samples = (run.duration / control_dt).round().max(1.0) as usize;

    let mut x = run.x0;
    let mut telemetry = Vec::with_capacity(samples + 1);
    let mut states = Vec::with_capacity(samples + 1);
    let mut controls = Vec::with_capacity(samples);
    let mut times = Vec::with_capacity(samples + 1);

    let mut record = |t: f64, x: &FullState, out: crate::tracking::ControlOutput| {
        let reference = run.reference.sample_clamped(t);
        let (y, dy) = task_error(params, x, &reference);
        telemetry.push(TelemetryRow {
            t,
            state: *x,
            u: out.u,
            u_config: out.u_config,
            u_task: out.u_task,
            ee_error: y,
            ee_error_rate: dy,
            singular: out.singular,
        });
    };

    for k in 0..samples {
        let t = k as f64 * control_dt;
        let reference = run.reference.sample_clamped(t);
        let out = controller.control(t, &x, &reference);
        record(t, &x, out);
        times.push(t);
        states.push(x);
        controls.push(out.u);
        for s in 0..substeps {
            let t_step = t + s as f64 * plant_dt;
            x = step_with(
                params,
                &x,
                &out.u,
                plant_dt,
                Integrator::Rk4,
                |offset, stage| {
                    run.disturbance
                        .map(|d| d.joint_torque(params, t_step + offset, stage))
                        .unwrap_or_else(Vector3::zeros)
                },
            )
            .map_err(|e| match e {
                Error::NonFiniteState { .. } => Error::NonFiniteState {
                    time: Some(t_step + plant_dt),
                },
                other => other,
            })?;
        }
    }
    let t_end = samples as f64 * control_dt;
    let last = controls.last().copied().unwrap_or_else(ControlInput::zeros);
    record(
        t_end,
        &x,
        crate::tracking::ControlOutput {
            u: last,
            ..Default::default()
        },
    );
    times.push(t_end);
    states.push(x);

    let errors = telemetry.iter().map(|r| r.ee_error.norm());
    let max_ee_error = errors.fold(0.0, f64::max);
    let final_ee_error = telemetry.last().expect("recorded").ee_error.norm();
    let catch_position = fk_hand(params, &x.q);
    let catch_distance = (catch_position - run.target).norm();
    Ok(SwingOutcome {
        trajectory: Trajectory {
            times,
            states,
            controls,
            cost: 0.0,
        },
        telemetry,
        max_ee_error,
        final_ee_error,
        caught: catch_distance <= run.settings.catch_tolerance,
        catch_position,
        catch_distance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub fn other(self) -> Self {
        match self {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
        }
    }
}

/// Placement of a cycle's base frame in the world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleFrame {
    pub base_bar: usize,
    pub swing_hand: Hand,
    /// World position of the base-frame origin (the holding hand).
    pub origin: Point,
    /// Base X points along world −X.
    pub mirrored: bool,
}

impl CycleFrame {
    pub fn new(base_bar: usize, origin: Point, mirrored: bool) -> Self {
        Self {
            base_bar,
            swing_hand: Hand::Right,
            origin,
            mirrored,
        }
    }

    fn flip(&self, p: Point) -> Point {
        if self.mirrored {
            Point::new(-p[0], p[1])
        } else {
            p
        }
    }

    pub fn to_world(&self, p: Point) -> Point {
        self.origin + self.flip(p)
    }

    pub fn to_base(&self, world: Point) -> Point {
        self.flip(world - self.origin)
    }

    pub fn world_points(&self, params: &RobotParams, x: &FullState) -> ChainPoints {
        let pts = fk_all(params, &x.q);
        ChainPoints {
            joint1: self.to_world(pts.joint1),
            shoulder1: self.to_world(pts.shoulder1),
            shoulder2: self.to_world(pts.shoulder2),
            hand: self.to_world(pts.hand),
        }
    }
}

/// Re-expresses a caught state with the chain reversed: the former swing
/// hand becomes the base and the former holding arm becomes the swing arm.
///
/// World positions of every joint are unchanged; the new frame's origin is
/// the hand's actual position. Use `params.reversed()` with the result.
pub fn swap_roles(
    params: &RobotParams,
    x_t: &FullState,
    frame: &CycleFrame,
    caught_bar: usize,
    caught_bar_world: Point,
    tolerance: f64,
) -> Result<(FullState, CycleFrame)> {
    let hand = fk_hand(params, &x_t.q);
    let distance = (hand - frame.to_base(caught_bar_world)).norm();
    if !(distance <= tolerance) {
        return Err(Error::NotCaught {
            distance,
            tolerance,
        });
    }
    let (q, dq) = (&x_t.q, &x_t.dq);
    let swapped = FullState::new(
        Vector3::new(
            wrap_angle(q[0] + q[1] + q[2] + TAU),
            wrap_angle(-q[2] - PI),
            wrap_angle(-q[1] - PI),
        ),
        Vector3::new(dq[0] + dq[1] + dq[2], -dq[2], -dq[1]),
    );
    let next = CycleFrame {
        base_bar: caught_bar,
        swing_hand: frame.swing_hand.other(),
        origin: frame.to_world(hand),
        mirrored: frame.mirrored,
    };
    Ok((swapped, next))
}

/// Supplies the planned trajectory for a swing between two handholds
/// (relative to the holding bar).
pub trait PlanSource {
    fn plan(&mut self, params: &RobotParams, rear: Point, target: Point) -> Result<Trajectory>;
}

/// Plans swings with iLQR and reuses the result for repeated geometry.
#[derive(Clone, Debug)]
pub struct IlqrPlanner {
    pub weights: CostWeights,
    pub horizon: HorizonRule,
    pub offset_angle: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub steps: usize,
    cache: Vec<(PlanKey, Trajectory)>,
    solves: usize,
}

/// Plans are shared between swings of the same robot whose handholds agree
/// to a nanometer, so accumulated rounding in bar positions does not defeat
/// the cache.
#[derive(Clone, Debug, PartialEq)]
struct PlanKey {
    params: RobotParams,
    handholds: [i64; 4],
}

fn plan_key(params: &RobotParams, rear: Point, target: Point) -> PlanKey {
    let nm = |v: f64| (v * 1e9).round() as i64;
    PlanKey {
        params: *params,
        handholds: [nm(rear[0]), nm(rear[1]), nm(target[0]), nm(target[1])],
    }
}

impl Default for IlqrPlanner {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            horizon: HorizonRule::TwiceFreefall,
            offset_angle: 0.0,
            max_iters: 100,
            rel_tol: 1e-6,
            steps: DEFAULT_STEPS,
            cache: Vec::new(),
            solves: 0,
        }
    }
}

impl IlqrPlanner {
    /// Number of optimizer runs so far (cache misses).
    pub fn solves(&self) -> usize {
        self.solves
    }

    fn cached(&self, key: &PlanKey) -> Option<&Trajectory> {
        self.cache.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }
}

impl PlanSource for IlqrPlanner {
    fn plan(&mut self, params: &RobotParams, rear: Point, target: Point) -> Result<Trajectory> {
        let key = plan_key(params, rear, target);
        if let Some(traj) = self.cached(&key) {
            return Ok(traj.clone());
        }
        let ends = endpoints_between(params, rear, target, self.offset_angle)?;
        let horizon = self.horizon.horizon(params, &ends.x0())?;
        let problem = IlqrProblem::swing(*params, &ends, horizon, self.weights)?
            .with_steps(self.steps)?
            .with_max_iters(self.max_iters)
            .with_rel_tol(self.rel_tol);
        let solution = solve_best_effort(&problem)?;
        self.solves += 1;
        self.cache.push((key, solution.trajectory.clone()));
        Ok(solution.trajectory)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CycleOutcome {
    pub cycle: usize,
    pub frame: CycleFrame,
    pub rear: Point,
    pub target: Point,
    pub plan: Trajectory,
    pub outcome: SwingOutcome,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BrachiationReport {
    pub cycles: Vec<CycleOutcome>,
    /// Index of the first cycle whose catch failed.
    pub failed_cycle: Option<usize>,
}

impl BrachiationReport {
    pub fn all_caught(&self) -> bool {
        self.failed_cycle.is_none()
    }
}

/// Swings along `layout` from `layout.base_index` to the last bar.
///
/// Each cycle plans (or reuses) a trajectory, tracks it on the plant and
/// checks the catch. After a catch the chain is re-expressed from the new
/// holding hand with [`swap_roles`]; the robot then settles into the next
/// cycle's rest configuration with both hands on their bars before
/// swinging again. The run stops at the first missed catch.
pub fn run_brachiation<P: PlanSource>(
    params: &RobotParams,
    layout: &BarLayout,
    planner: &mut P,
    tracker: &TrackerConfig,
    settings: &SimSettings,
) -> Result<BrachiationReport> {
    params.validate()?;
    if layout.gap_count() > 1 && !params.has_symmetric_arms() {
        return Err(Error::InvalidParams {
            field: "arm_com_offset",
            reason: "multi-swing runs swap the arms' roles and need the arm COM at mid-length"
                .into(),
        });
    }
    layout.validate(params)?;
    tracker.validate()?;
    let settings = SimSettings {
        control_dt: tracker.control_dt,
        ..*settings
    };
    settings.substeps()?;

    let start = layout.base_index;
    let mirrored = layout.relative_target(start)[0] < 0.0;
    let mut frame = CycleFrame::new(start, layout.bar(start), mirrored);
    let mut cycle_params = *params;
    let mut carried: Option<FullState> = None;
    let mut cycles = Vec::new();

    for cycle in 0..layout.gap_count() {
        let base = start + cycle;
        let rear = frame.to_base(frame.to_world(Point::zeros()) + layout.relative_rear(base));
        let target = frame.to_base(layout.bar(base + 1));
        let plan = planner.plan(&cycle_params, rear, target)?;
        let x_plan = plan.states[0];
        if let Some(x) = carried {
            // Both hands are on bars: check the re-expressed state agrees
            // with the planned start before settling into it.
            let hand = fk_hand(&cycle_params, &x.q);
            let gap = (hand - rear).norm();
            if gap > settings.catch_tolerance + 1e-9 {
                return Err(Error::NotCaught {
                    distance: gap,
                    tolerance: settings.catch_tolerance,
                });
            }
        }
        let reference = build_reference(&cycle_params, &plan)?;
        let mut controller = TrackingController::new(cycle_params, *tracker)?;
        let run = SwingRun {
            params: &cycle_params,
            x0: x_plan,
            reference: &reference,
            duration: plan.duration(),
            settings,
            target,
            disturbance: None,
        };
        let outcome = simulate_swing(&run, &mut controller)?;
        let caught = outcome.caught;
        let x_t = *outcome.trajectory.final_state();
        cycles.push(CycleOutcome {
            cycle,
            frame,
            rear,
            target,
            plan,
            outcome,
        });
        if !caught {
            return Ok(BrachiationReport {
                cycles,
                failed_cycle: Some(cycle),
            });
        }
        let (swapped, mut next) = swap_roles(
            &cycle_params,
            &x_t,
            &frame,
            base + 1,
            layout.bar(base + 1),
            settings.catch_tolerance,
        )?;
        // The gripper closes on the bar itself.
        next.origin = layout.bar(base + 1);
        frame = next;
        cycle_params = cycle_params.reversed();
        carried = Some(swapped);
    }
    Ok(BrachiationReport {
        cycles,
        failed_cycle: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::JointConfig;
    use crate::tracking::ZeroController;

    fn hold_reference(params: &RobotParams, x: FullState, duration: f64) -> Reference {
        let traj = Trajectory {
            times: vec![0.0, duration],
            states: vec![x, x],
            controls: vec![ControlInput::zeros()],
            cost: 0.0,
        };
        build_reference(params, &traj).unwrap()
    }

    #[test]
    fn equilibrium_stays_put() {
        let p = RobotParams::paper_robot();
        let reference = hold_reference(&p, FullState::zeros(), 0.2);
        let run = SwingRun {
            params: &p,
            x0: FullState::zeros(),
            reference: &reference,
            duration: 0.2,
            settings: SimSettings::default(),
            target: Point::new(0.4, 0.0),
            disturbance: None,
        };
        let out = simulate_swing(&run, &mut ZeroController).unwrap();
        assert!(out
            .trajectory
            .states
            .iter()
            .all(|x| *x == FullState::zeros()));
        assert!(!out.caught);
        assert_eq!(out.telemetry.len(), 201);
    }

    #[test]
    fn catch_boundary_is_closed() {
        let p = RobotParams::paper_robot();
        let x = FullState::zeros();
        let hand = fk_hand(&p, &x.q);
        assert!(catch_check(&p, &x, hand, 1e-9));
        let target = hand + Point::new(0.25, 0.0);
        assert!(catch_check(&p, &x, target, 0.25));
        assert!(!catch_check(&p, &x, target, 0.2499));
    }

    #[test]
    fn substeps_must_divide() {
        let s = SimSettings {
            plant_dt: 3e-4,
            control_dt: 1e-3,
            catch_tolerance: 0.03,
        };
        assert!(s.substeps().is_err());
        assert_eq!(SimSettings::default().substeps().unwrap(), 10);
    }

    #[test]
    fn disturbance_window_validation() {
        let d = DisturbanceSpec {
            force: [0.0, 20.0],
            window: [0.2, 0.1],
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn swap_requires_catch() {
        let p = RobotParams::paper_robot();
        let frame = CycleFrame::new(0, Point::zeros(), false);
        let r = swap_roles(
            &p,
            &FullState::zeros(),
            &frame,
            1,
            Point::new(0.4, 0.0),
            0.03,
        );
        assert!(matches!(r, Err(Error::NotCaught { .. })));
    }

    #[test]
    fn swap_at_rest_stays_at_rest() {
        let p = RobotParams::paper_robot();
        let q = JointConfig::new(0.6, 0.1, -1.3);
        let x = FullState::at_rest(q);
        let frame = CycleFrame::new(0, Point::new(1.0, 2.0), false);
        let bar = frame.to_world(fk_hand(&p, &q));
        let (swapped, _) = swap_roles(&p, &x, &frame, 1, bar, 0.03).unwrap();
        assert_eq!(swapped.dq, Vector3::zeros());
    }

    #[test]
    fn frame_round_trip() {
        let f = CycleFrame::new(2, Point::new(0.7, -0.1), true);
        let p = Point::new(0.3, 0.2);
        assert!((f.to_base(f.to_world(p)) - p).norm() < 1e-15);
    }
}
