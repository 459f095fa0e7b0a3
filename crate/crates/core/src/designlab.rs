//! Design-parameter studies: final swing cost against body length and
//! against the arm/body mass split.
//!
//! Each sweep point derives a robot from the base design, rebuilds the swing
//! endpoints for that geometry, sets the horizon from the free-fall time and
//! runs the optimizer. Points run in parallel; records keep spec order.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::configspace::{endpoints_between, SwingEndpoints};
use crate::dynamics::{fk_hand, Point, RobotParams};
use crate::error::{Error, Result};
use crate::trajopt::{solve, CostWeights, HorizonRule, IlqrProblem, DEFAULT_STEPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BodyLength,
    /// Mass of one arm as a fraction of the total mass.
    ArmMassFraction,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::BodyLength => "body_length",
            SweepAxis::ArmMassFraction => "arm_mass_fraction",
        })
    }
}

/// Body mass and per-arm mass in kilograms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MassCase {
    pub body_mass: f64,
    pub arm_mass: f64,
}

impl MassCase {
    pub fn of(params: &RobotParams) -> Self {
        Self {
            body_mass: params.body_mass,
            arm_mass: params.arm_mass,
        }
    }

    pub fn total(&self) -> f64 {
        self.body_mass + 2.0 * self.arm_mass
    }

    /// The three mass distributions of the body-length study.
    pub fn study_cases() -> Vec<Self> {
        vec![
            Self {
                body_mass: 3.5,
                arm_mass: 2.025,
            },
            Self {
                body_mass: 3.0,
                arm_mass: 3.025,
            },
            Self {
                body_mass: 3.0675,
                arm_mass: 3.0675,
            },
        ]
    }
}

/// Choice of the offset angle at both swing endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetRule {
    /// Use this angle; designs that cannot reach the bar with it fail.
    Fixed(f64),
    /// Extended body (zero offset) when the bar is reachable that way,
    /// otherwise the smallest bend that brings the bar inside the reach
    /// interval with the given margin in meters.
    Extended { margin: f64 },
}

impl Default for OffsetRule {
    fn default() -> Self {
        OffsetRule::Extended { margin: 0.02 }
    }
}

impl OffsetRule {
    /// Offset angle for a swing from the holding bar to `target`.
    pub fn offset_angle(&self, params: &RobotParams, target: Point) -> Result<f64> {
        match *self {
            OffsetRule::Fixed(angle) => Ok(angle),
            OffsetRule::Extended { margin } => {
                let (l, lb) = (params.arm_length, params.body_length);
                let d = target.norm();
                // Shoulder-to-bar distance with the body bent by `a`:
                // r² = L² + Lb² + 2·L·Lb·cos(a). The bar is reachable while
                // r ≤ L + d, i.e. the swing arm can fold back far enough.
                let r_max = l + d - margin;
                if l + lb <= r_max {
                    return Ok(0.0);
                }
                if lb == 0.0 || r_max <= 0.0 {
                    return Err(Error::Unreachable {
                        distance: d,
                        min: lb,
                        max: 2.0 * l + lb,
                    });
                }
                let cos_a = (r_max * r_max - l * l - lb * lb) / (2.0 * l * lb);
                if cos_a < -1.0 {
                    return Err(Error::Unreachable {
                        distance: d,
                        min: (l - lb).abs(),
                        max: 2.0 * l + lb,
                    });
                }
                Ok(cos_a.acos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base_params: RobotParams,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub mass_cases: Vec<MassCase>,
    /// Horizontal distance to the next bar (same height).
    #[serde(default = "default_bar_distance")]
    pub bar_distance: f64,
    #[serde(default)]
    pub offset: OffsetRule,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default = "default_horizon")]
    pub horizon: HorizonRule,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_bar_distance() -> f64 {
    0.4
}
fn default_horizon() -> HorizonRule {
    HorizonRule::TwiceFreefall
}
fn default_max_iters() -> usize {
    100
}
fn default_rel_tol() -> f64 {
    1e-6
}
fn default_steps() -> usize {
    DEFAULT_STEPS
}

/// Body lengths 0 to 0.9 m in 0.1 m steps.
pub fn default_body_lengths() -> Vec<f64> {
    (0..=9).map(|i| i as f64 / 10.0).collect()
}

/// Per-arm mass fractions 5% to 25% in 2.5% steps.
pub fn default_arm_fractions() -> Vec<f64> {
    (0..=8).map(|i| (20.0 + 10.0 * i as f64) / 400.0).collect()
}

impl SweepSpec {
    fn with_axis(
        base_params: RobotParams,
        axis: SweepAxis,
        values: Vec<f64>,
        cases: Vec<MassCase>,
    ) -> Self {
        Self {
            base_params,
            axis,
            values,
            mass_cases: cases,
            bar_distance: default_bar_distance(),
            offset: OffsetRule::default(),
            weights: CostWeights::default(),
            horizon: default_horizon(),
            max_iters: default_max_iters(),
            rel_tol: default_rel_tol(),
            steps: default_steps(),
        }
    }

    /// Body-length study over the three printed mass cases.
    pub fn body_length_study(base_params: RobotParams) -> Self {
        Self::with_axis(
            base_params,
            SweepAxis::BodyLength,
            default_body_lengths(),
            MassCase::study_cases(),
        )
    }

    /// Arm-mass study at the base design's total mass.
    pub fn arm_mass_study(base_params: RobotParams) -> Self {
        let case = MassCase::of(&base_params);
        Self::with_axis(
            base_params,
            SweepAxis::ArmMassFraction,
            default_arm_fractions(),
            vec![case],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Error::InvalidParams {
            field,
            reason: reason.into(),
        };
        self.base_params.validate()?;
        self.weights.validate()?;
        if self.values.is_empty() {
            return Err(bad("values", "grid is empty"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(bad("values", "must be finite"));
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(bad("values", "must be strictly increasing"));
        }
        if self.mass_cases.is_empty() {
            return Err(bad("mass_cases", "at least one case is required"));
        }
        if !(self.bar_distance > 0.0) {
            return Err(bad("bar_distance", "must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(bad("max_iters", "must be > 0"));
        }
        if self.steps == 0 {
            return Err(bad("steps", "must be > 0"));
        }
        Ok(())
    }

    /// Number of records a sweep produces.
    pub fn len(&self) -> usize {
        self.values.len() * self.mass_cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Robot for one sweep point.
///
/// Arm length is fixed. Inertias follow the uniform-rod law from the base
/// design: arm inertia scales with arm mass, and body inertia is
/// `I0·m/m0 + m·(Lb² − Lb0²)/12`, which is the base value at the base point
/// and keeps the base's cross-axis share at zero length.
pub fn derive_params(spec: &SweepSpec, value: f64, case: &MassCase) -> Result<RobotParams> {
    let base = &spec.base_params;
    let (body_length, body_mass, arm_mass) = match spec.axis {
        SweepAxis::BodyLength => (value, case.body_mass, case.arm_mass),
        SweepAxis::ArmMassFraction => {
            let total = case.total();
            let arm = value * total;
            (base.body_length, total - 2.0 * arm, arm)
        }
    };
    if !(body_mass > 0.0) {
        return Err(Error::InvalidParams {
            field: "body_mass",
            reason: format!("residual body mass {body_mass} is not positive"),
        });
    }
    if !(arm_mass > 0.0) {
        return Err(Error::InvalidParams {
            field: "arm_mass",
            reason: format!("arm mass {arm_mass} is not positive"),
        });
    }
    let lb0 = base.body_length;
    let params = RobotParams {
        arm_mass,
        arm_inertia: base.arm_inertia * (arm_mass / base.arm_mass),
        body_length,
        body_mass,
        body_com_offset: if body_length == lb0 {
            base.body_com_offset
        } else {
            body_length / 2.0
        },
        body_inertia: base.body_inertia * (body_mass / base.body_mass)
            + body_mass * (body_length * body_length - lb0 * lb0) / 12.0,
        ..*base
    };
    params.validate()?;
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: SweepAxis,
    pub value: f64,
    pub case: usize,
    pub final_cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub terminal_hand_error: f64,
    pub horizon: f64,
    pub offset_angle: f64,
    /// Failure message when the point could not be solved; costs are NaN.
    pub error: Option<String>,
}

impl SweepRecord {
    pub fn solved(&self) -> bool {
        self.error.is_none()
    }
}

/// Problem and endpoints for one sweep point.
pub fn point_problem(
    spec: &SweepSpec,
    value: f64,
    case: &MassCase,
) -> Result<(IlqrProblem, SwingEndpoints)> {
    let params = derive_params(spec, value, case)?;
    let target = Point::new(spec.bar_distance, 0.0);
    let rear = Point::new(-spec.bar_distance, 0.0);
    let offset = spec.offset.offset_angle(&params, target)?;
    let ends = endpoints_between(&params, rear, target, offset)?;
    let horizon = spec.horizon.horizon(&params, &ends.x0())?;
    let problem = IlqrProblem::swing(params, &ends, horizon, spec.weights)?
        .with_steps(spec.steps)?
        .with_max_iters(spec.max_iters)
        .with_rel_tol(spec.rel_tol);
    Ok((problem, ends))
}

fn run_point(spec: &SweepSpec, value: f64, case_index: usize) -> SweepRecord {
    let mut record = SweepRecord {
        axis: spec.axis,
        value,
        case: case_index,
        final_cost: f64::NAN,
        initial_cost: f64::NAN,
        iterations: 0,
        converged: false,
        terminal_hand_error: f64::NAN,
        horizon: f64::NAN,
        offset_angle: f64::NAN,
        error: None,
    };
    let (problem, ends) = match point_problem(spec, value, &spec.mass_cases[case_index]) {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.horizon = problem.horizon;
    record.offset_angle = ends.offset_angle;
    let solution = match solve(&problem) {
        Ok(s) => s,
        Err(Error::Diverged(s)) => *s,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let target = fk_hand(&problem.model, &ends.q_t);
    let reached = fk_hand(&problem.model, &solution.trajectory.final_state().q);
    record.final_cost = solution.cost();
    record.initial_cost = solution.initial_cost();
    record.iterations = solution.iterations;
    record.converged = solution.converged;
    record.terminal_hand_error = (reached - target).norm();
    record
}

/// Runs every (value, case) point. Records are ordered by case, then value.
/// Failed points are kept, flagged by `error`.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRecord>> {
    spec.validate()?;
    let points: Vec<(usize, f64)> = (0..spec.mass_cases.len())
        .flat_map(|c| spec.values.iter().map(move |&v| (c, v)))
        .collect();
    Ok(points
        .par_iter()
        .map(|&(case, value)| run_point(spec, value, case))
        .collect())
}

/// Grid value with the lowest final cost for `case`, ignoring failed points.
pub fn argmin_cost(records: &[SweepRecord], case: usize) -> Option<f64> {
    records
        .iter()
        .filter(|r| r.case == case && r.solved() && r.final_cost.is_finite())
        .min_by(|a, b| a.final_cost.total_cmp(&b.final_cost))
        .map(|r| r.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> RobotParams {
        RobotParams::paper_robot()
    }

    #[test]
    fn base_point_is_identity() {
        let mut spec = SweepSpec::body_length_study(paper());
        spec.mass_cases = vec![MassCase::of(&paper())];
        let derived = derive_params(&spec, paper().body_length, &spec.mass_cases[0]).unwrap();
        assert_eq!(derived, paper());
    }

    #[test]
    fn study_case_masses() {
        let spec = SweepSpec::body_length_study(paper());
        let p = derive_params(&spec, 0.2, &spec.mass_cases[0]).unwrap();
        assert_eq!(p.body_mass, 3.5);
        assert_eq!(p.arm_mass, 2.025);
        assert!((p.total_mass() - 7.55).abs() < 1e-12);
        assert_eq!(p.body_com_offset, 0.1);
        assert_eq!(p.arm_length, paper().arm_length);
    }

    #[test]
    fn zero_body_length_stays_valid() {
        let spec = SweepSpec::body_length_study(paper());
        for case in &spec.mass_cases {
            let p = derive_params(&spec, 0.0, case).unwrap();
            assert!(p.body_inertia > 0.0);
            assert_eq!(p.body_com_offset, 0.0);
        }
    }

    #[test]
    fn arm_fraction_preserves_total() {
        let spec = SweepSpec::arm_mass_study(paper());
        for &f in &spec.values {
            let p = derive_params(&spec, f, &spec.mass_cases[0]).unwrap();
            assert!((p.total_mass() - paper().total_mass()).abs() < 1e-12);
            assert!((p.arm_mass - f * paper().total_mass()).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_mass_must_be_positive() {
        let spec = SweepSpec::arm_mass_study(paper());
        let err = derive_params(&spec, 0.5, &spec.mass_cases[0]).unwrap_err();
        assert!(matches!(
            err,
            Error::InvalidParams {
                field: "body_mass",
                ..
            }
        ));
    }

    #[test]
    fn default_grids() {
        let lengths = default_body_lengths();
        assert_eq!(lengths.len(), 10);
        assert_eq!(lengths[9], 0.9);
        let fractions = default_arm_fractions();
        assert_eq!(fractions.first(), Some(&0.05));
        assert_eq!(fractions.last(), Some(&0.25));
        assert_eq!(fractions[1], 0.075);
    }

    #[test]
    fn grid_must_increase() {
        let mut spec = SweepSpec::body_length_study(paper());
        spec.values = vec![0.1, 0.1];
        assert!(run_sweep(&spec).is_err());
        spec.values.clear();
        assert!(run_sweep(&spec).is_err());
    }

    #[test]
    fn extended_offset_when_reachable() {
        let rule = OffsetRule::default();
        let a = rule.offset_angle(&paper(), Point::new(0.4, 0.0)).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn long_body_bends_just_enough() {
        let p = RobotParams {
            body_length: 0.8,
            body_com_offset: 0.4,
            ..paper()
        };
        let margin = 0.02;
        let a = OffsetRule::Extended { margin }
            .offset_angle(&p, Point::new(0.4, 0.0))
            .unwrap();
        let (l, lb) = (p.arm_length, p.body_length);
        let r = (l * l + lb * lb + 2.0 * l * lb * a.cos()).sqrt();
        assert!((r - (l + 0.4 - margin)).abs() < 1e-12);
    }
}
