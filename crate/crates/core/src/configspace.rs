//! Joint configurations for a robot hanging from two handholds.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::dynamics::{fk_all, FullState, JointConfig, Point, RobotParams};
use crate::error::{Error, Result};

/// Handholds in a world frame, in traversal order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarLayout {
    pub bars: Vec<[f64; 2]>,
    /// Bar gripped by the holding hand when the run starts.
    #[serde(default)]
    pub base_index: usize,
}

impl BarLayout {
    /// `count` bars spaced `spacing` apart along +X at height zero.
    pub fn even(count: usize, spacing: f64) -> Self {
        Self {
            bars: (0..count).map(|i| [i as f64 * spacing, 0.0]).collect(),
            base_index: 0,
        }
    }

    /// Bars at the cumulative positions of the given gaps.
    pub fn from_gaps(gaps: &[f64]) -> Self {
        let mut x = 0.0;
        let mut bars = vec![[0.0, 0.0]];
        for gap in gaps {
            x += gap;
            bars.push([x, 0.0]);
        }
        Self {
            bars,
            base_index: 0,
        }
    }

    pub fn bar(&self, index: usize) -> Point {
        Point::new(self.bars[index][0], self.bars[index][1])
    }

    pub fn gap_count(&self) -> usize {
        self.bars.len().saturating_sub(self.base_index + 1)
    }

    /// Position of bar `index + 1` relative to bar `index`.
    pub fn relative_target(&self, index: usize) -> Point {
        self.bar(index + 1) - self.bar(index)
    }

    /// Position of the handhold behind bar `index`. Before the first bar
    /// the swing hand starts on a virtual handhold mirroring the first gap.
    pub fn relative_rear(&self, index: usize) -> Point {
        if index == 0 {
            let ahead = self.relative_target(0);
            Point::new(-ahead[0], ahead[1])
        } else {
            self.bar(index - 1) - self.bar(index)
        }
    }

    pub fn validate(&self, params: &RobotParams) -> Result<()> {
        let invalid = |reason: String| Error::InvalidParams {
            field: "bars",
            reason,
        };
        if self.bars.len() < 2 {
            return Err(invalid(format!(
                "need at least 2 bars, got {}",
                self.bars.len()
            )));
        }
        if self.base_index + 1 >= self.bars.len() {
            return Err(Error::InvalidParams {
                field: "base_index",
                reason: format!("must be below {}", self.bars.len() - 1),
            });
        }
        for (i, pair) in self.bars.windows(2).enumerate() {
            if pair.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid(format!("bar {i} has non-finite coordinates")));
            }
            let spacing = (Point::from(pair[1]) - Point::from(pair[0])).norm();
            if !(spacing > 0.0 && spacing < params.reach()) {
                return Err(invalid(format!(
                    "spacing {spacing:.4} m between bars {i} and {} must lie in (0, {:.4}) m",
                    i + 1,
                    params.reach()
                )));
            }
        }
        Ok(())
    }
}

/// Rest configurations at the start and end of one swing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwingEndpoints {
    pub q0: JointConfig,
    pub q_t: JointConfig,
    pub offset_angle: f64,
}

impl SwingEndpoints {
    pub fn x0(&self) -> FullState {
        FullState::at_rest(self.q0)
    }

    pub fn x_target(&self) -> FullState {
        FullState::at_rest(self.q_t)
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = (angle + PI).rem_euclid(TAU) - PI;
    if wrapped <= -PI {
        wrapped + TAU
    } else {
        wrapped
    }
}

/// Shifts `angle` by a multiple of 2π to land nearest `reference`.
pub fn nearest_representative(angle: f64, reference: f64) -> f64 {
    reference + wrap_angle(angle - reference)
}

/// Closed-form catch configuration for a body-less chain with arm length
/// `arm_length`, evaluated exactly as printed:
/// `q1 = asin(|P|/2L) + atan(pz/px)`, `q3 = asin(|P|/2L) − 2π + q2`.
pub fn paper_catch_config(arm_length: f64, p: Point, q2: f64) -> Result<JointConfig> {
    let distance = p.norm();
    if distance > 2.0 * arm_length {
        return Err(Error::Unreachable {
            distance,
            min: 0.0,
            max: 2.0 * arm_length,
        });
    }
    if p[0] == 0.0 {
        return Err(Error::DegenerateBearing);
    }
    let half = (distance / (2.0 * arm_length)).asin();
    Ok(JointConfig::new(
        half + (p[1] / p[0]).atan(),
        q2,
        half - TAU + q2,
    ))
}

/// Angle of a vector under the `dir(θ) = (sin θ, −cos θ)` convention.
fn bearing(v: Point) -> f64 {
    v[0].atan2(-v[1])
}

/// Exact inverse kinematics with the offset angle `q2` held fixed.
///
/// With q2 fixed, shoulder 2 lies on a circle of radius
/// `r = |L·dir(0) + Lb·dir(q2)|` about the bar, and the swing arm closes a
/// triangle with sides `|p|`, `r`, `L`. Of the two elbow branches the one
/// with the lower shoulder (the hanging posture) is returned; an exact tie
/// falls back to the smaller `|q3 − π|`. Angles are wrapped into (−π, π].
pub fn exact_catch_config(params: &RobotParams, p: Point, q2: f64) -> Result<JointConfig> {
    let l = params.arm_length;
    let lb = params.body_length;
    let rest = l * Point::new(0.0, -1.0) + lb * Point::new(q2.sin(), -q2.cos());
    let r = rest.norm();
    let distance = p.norm();
    let (min, max) = ((r - l).abs(), r + l);
    let slack = 1e-12 * max;
    if !p.iter().all(|v| v.is_finite()) || distance < min - slack || distance > max + slack {
        return Err(Error::Unreachable { distance, min, max });
    }
    let rest_bearing = bearing(rest);

    let candidates: Vec<JointConfig> = if distance <= slack {
        // Hand on the bar: any rotation closes the chain, take q1 = 0.
        vec![JointConfig::new(-rest_bearing, q2, 0.0)]
    } else {
        let cos_gamma =
            ((distance * distance + r * r - l * l) / (2.0 * distance * r)).clamp(-1.0, 1.0);
        let gamma = cos_gamma.acos();
        let toward = bearing(p);
        [toward + gamma, toward - gamma]
            .into_iter()
            .map(|b| {
                let shoulder2 = r * Point::new(b.sin(), -b.cos());
                let q1 = b - rest_bearing;
                let q3 = bearing(p - shoulder2) - q1 - q2 - PI;
                JointConfig::new(q1, q2, q3)
            })
            .collect()
    };

    let candidates = candidates
        .into_iter()
        .map(|q| JointConfig::new(wrap_angle(q[0]), q[1], wrap_angle(q[2])));
    let key = |q: &JointConfig| {
        let z = fk_all(params, q).shoulder2[1];
        (z, (q[2] - PI).abs())
    };
    let best = candidates
        .min_by(|a, b| {
            let (za, ta) = key(a);
            let (zb, tb) = key(b);
            if (za - zb).abs() <= 1e-12 {
                ta.total_cmp(&tb)
            } else {
                za.total_cmp(&zb)
            }
        })
        .expect("at least one branch");
    Ok(best)
}

/// Endpoints of a swing whose hand starts at `rear` and ends at `target`,
/// both relative to the holding bar.
///
/// The final angles are the 2π representatives nearest the initial ones,
/// so the swing arm passes over the shoulders while the chain swings under
/// the bar.
pub fn endpoints_between(
    params: &RobotParams,
    rear: Point,
    target: Point,
    offset_angle: f64,
) -> Result<SwingEndpoints> {
    let q0 = exact_catch_config(params, rear, offset_angle)?;
    let raw = exact_catch_config(params, target, offset_angle)?;
    let q_t = JointConfig::new(
        nearest_representative(raw[0], q0[0]),
        raw[1],
        nearest_representative(raw[2], q0[2]),
    );
    Ok(SwingEndpoints {
        q0,
        q_t,
        offset_angle,
    })
}

/// Endpoints for the swing leaving `layout.base_index`.
pub fn swing_endpoints(
    params: &RobotParams,
    layout: &BarLayout,
    offset_angle: f64,
) -> Result<SwingEndpoints> {
    layout.validate(params)?;
    let base = layout.base_index;
    endpoints_between(
        params,
        layout.relative_rear(base),
        layout.relative_target(base),
        offset_angle,
    )
}
