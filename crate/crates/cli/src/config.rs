//! Run configuration: one TOML document with a strict schema.

use std::path::{Path, PathBuf};

use brachiation::configspace::BarLayout;
use brachiation::designlab::{MassCase, OffsetRule, SweepAxis};
use brachiation::dynamics::RobotParams;
use brachiation::simulator::{DisturbanceSpec, IlqrPlanner, SimSettings};
use brachiation::tracking::{PidParams, TrackerConfig};
use brachiation::trajopt::{CostWeights, HorizonRule, DEFAULT_STEPS};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "RobotParams::paper_robot")]
    pub robot: RobotParams,
    #[serde(default)]
    pub bars: BarsSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub tracker: TrackerSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Bars given either as absolute positions or as gaps along +X.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarsSection {
    #[serde(default)]
    pub positions: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub gaps: Option<Vec<f64>>,
    #[serde(default)]
    pub base_index: usize,
}

impl Default for BarsSection {
    fn default() -> Self {
        Self {
            positions: None,
            gaps: Some(vec![0.4]),
            base_index: 0,
        }
    }
}

impl BarsSection {
    pub fn layout(&self) -> Result<BarLayout, CliError> {
        let mut layout = match (&self.positions, &self.gaps) {
            (Some(positions), None) => BarLayout {
                bars: positions.clone(),
                base_index: 0,
            },
            (None, Some(gaps)) => BarLayout::from_gaps(gaps),
            _ => {
                return Err(CliError::Config(
                    "bars: give exactly one of `positions` or `gaps`".into(),
                ))
            }
        };
        layout.base_index = self.base_index;
        Ok(layout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default = "twice_freefall")]
    pub horizon: HorizonRule,
    /// Steps per swing; dt = horizon / steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub offset_angle: f64,
}

fn twice_freefall() -> HorizonRule {
    HorizonRule::TwiceFreefall
}
fn default_steps() -> usize {
    DEFAULT_STEPS
}
fn default_max_iters() -> usize {
    100
}
fn default_rel_tol() -> f64 {
    1e-6
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            horizon: twice_freefall(),
            steps: default_steps(),
            max_iters: default_max_iters(),
            rel_tol: default_rel_tol(),
            offset_angle: 0.0,
        }
    }
}

impl OptimizerSection {
    pub fn planner(&self) -> IlqrPlanner {
        let mut planner = IlqrPlanner::default();
        planner.weights = self.weights;
        planner.horizon = self.horizon;
        planner.offset_angle = self.offset_angle;
        planner.max_iters = self.max_iters;
        planner.rel_tol = self.rel_tol;
        planner.steps = self.steps;
        planner
    }
}

/// Tracker gains. The sample period lives in `sim.control_dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerSection {
    pub pos_pid: [PidParams; 2],
    pub vel_pid: [PidParams; 2],
    pub alpha: f64,
    pub kp_task: [f64; 2],
    pub kd_task: [f64; 2],
    pub pinv_tolerance: f64,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let t = TrackerConfig::default();
        Self {
            pos_pid: t.pos_pid,
            vel_pid: t.vel_pid,
            alpha: t.alpha,
            kp_task: t.kp_task,
            kd_task: t.kd_task,
            pinv_tolerance: t.pinv_tolerance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_plant_dt")]
    pub plant_dt: f64,
    #[serde(default = "default_control_dt")]
    pub control_dt: f64,
    #[serde(default = "default_catch_tolerance")]
    pub catch_tolerance: f64,
    #[serde(default)]
    pub disturbance: Option<DisturbanceSpec>,
}

fn default_plant_dt() -> f64 {
    SimSettings::default().plant_dt
}
fn default_control_dt() -> f64 {
    SimSettings::default().control_dt
}
fn default_catch_tolerance() -> f64 {
    SimSettings::default().catch_tolerance
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            plant_dt: default_plant_dt(),
            control_dt: default_control_dt(),
            catch_tolerance: default_catch_tolerance(),
            disturbance: None,
        }
    }
}

impl SimSection {
    pub fn settings(&self) -> SimSettings {
        SimSettings {
            plant_dt: self.plant_dt,
            control_dt: self.control_dt,
            catch_tolerance: self.catch_tolerance,
        }
    }
}

/// Design-study grid. Unset fields take the study defaults for the axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub mass_cases: Option<Vec<MassCase>>,
    #[serde(default)]
    pub offset: Option<OffsetRule>,
}

impl RunConfig {
    pub fn tracker(&self) -> TrackerConfig {
        let t = &self.tracker;
        TrackerConfig {
            pos_pid: t.pos_pid,
            vel_pid: t.vel_pid,
            alpha: t.alpha,
            kp_task: t.kp_task,
            kd_task: t.kd_task,
            pinv_tolerance: t.pinv_tolerance,
            control_dt: self.sim.control_dt,
        }
    }

    /// Checks every section against its module's invariants.
    pub fn validate(&self) -> Result<(), CliError> {
        let section = |name: &str| {
            let name = name.to_owned();
            move |e: brachiation::Error| CliError::Config(format!("{name}: {e}"))
        };
        self.robot.validate().map_err(section("robot"))?;
        self.bars
            .layout()?
            .validate(&self.robot)
            .map_err(section("bars"))?;
        self.optimizer
            .weights
            .validate()
            .map_err(section("optimizer.weights"))?;
        if let HorizonRule::Fixed(t) = self.optimizer.horizon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Config(
                    "optimizer.horizon: fixed horizon must be > 0".into(),
                ));
            }
        }
        if self.optimizer.steps == 0 {
            return Err(CliError::Config("optimizer.steps: must be > 0".into()));
        }
        if self.optimizer.max_iters == 0 {
            return Err(CliError::Config("optimizer.max_iters: must be > 0".into()));
        }
        if !(self.optimizer.rel_tol > 0.0) {
            return Err(CliError::Config("optimizer.rel_tol: must be > 0".into()));
        }
        self.tracker().validate().map_err(section("tracker"))?;
        self.sim.settings().substeps().map_err(section("sim"))?;
        if let Some(d) = &self.sim.disturbance {
            d.validate().map_err(section("sim"))?;
        }
        Ok(())
    }

    /// Reads `path`, applies `KEY=VALUE` overrides and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut doc, item)?;
        }
        fill_section(&mut doc, "robot", &RobotParams::paper_robot());
        fill_section(&mut doc, "tracker", &TrackerSection::default());
        let config: RunConfig =
            serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| {
                let inner = e.inner().to_string();
                let first = inner.lines().next().unwrap_or_default();
                CliError::Config(format!("{}: {first}", e.path()))
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Completes a partial `[name]` table with the keys of `defaults`, so a
/// config may set a single field of the robot or tracker.
fn fill_section<T: Serialize>(doc: &mut toml::Table, name: &str, defaults: &T) {
    let Some(toml::Value::Table(section)) = doc.get_mut(name) else {
        return;
    };
    if let Ok(toml::Value::Table(base)) = toml::Value::try_from(defaults) {
        merge_missing(section, base);
    }
}

fn merge_missing(into: &mut toml::Table, from: toml::Table) {
    for (key, value) in from {
        match (into.get_mut(&key), value) {
            (None, value) => {
                into.insert(key, value);
            }
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge_missing(a, b),
            _ => {}
        }
    }
}

/// Sets a dotted path such as `tracker.alpha=0` or `tracker.kp_task.1=900`.
/// The value is read as a TOML value, falling back to a bare string. An
/// empty value (`sim.disturbance=`) removes the key.
pub fn apply_override(doc: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not KEY=VALUE")))?;
    let key = key.trim();
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Usage(format!(
            "override key `{key}` has an empty segment"
        )));
    }
    if raw.trim().is_empty() {
        return remove_key(doc, &segments, key);
    }
    let value = parse_value(raw.trim());
    let mut slot = doc
        .entry(segments[0].to_owned())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    for seg in &segments[1..] {
        slot = match slot {
            toml::Value::Table(t) => t
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let index: usize = seg.parse().map_err(|_| {
                    CliError::Usage(format!("`{seg}` in `{key}` is not an array index"))
                })?;
                let len = a.len();
                a.get_mut(index).ok_or_else(|| {
                    CliError::Usage(format!(
                        "index {index} in `{key}` is out of range (length {len})"
                    ))
                })?
            }
            _ => return Err(CliError::Usage(format!("`{key}` descends into a scalar"))),
        };
    }
    *slot = value;
    Ok(())
}

fn remove_key(doc: &mut toml::Table, segments: &[&str], key: &str) -> Result<(), CliError> {
    let (last, parents) = segments.split_last().expect("non-empty path");
    let mut table = doc;
    for seg in parents {
        table = match table.get_mut(*seg) {
            Some(toml::Value::Table(t)) => t,
            Some(_) => {
                return Err(CliError::Usage(format!(
                    "`{key}` does not name a table entry"
                )))
            }
            None => return Ok(()),
        };
    }
    table.remove(*last);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_paper_default() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c.robot, RobotParams::paper_robot());
        assert_eq!(c.tracker(), TrackerConfig::default());
        assert_eq!(c.bars.layout().unwrap(), BarLayout::even(2, 0.4));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_toml("[robot]\narm_lenght = 0.3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("arm_lenght"), "{err}");
    }

    #[test]
    fn negative_mass_names_field() {
        let err = RunConfig::from_toml("", &["robot.arm_mass=-1".into()]).unwrap_err();
        assert!(err.to_string().contains("arm_mass"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn overrides_reach_arrays_and_create_tables() {
        let c = RunConfig::from_toml(
            "",
            &[
                "tracker.alpha=0".into(),
                "tracker.kp_task=[900.0, 900.0]".into(),
                "tracker.kp_task.1=400.0".into(),
                "sim.disturbance.force=[0.0, 20.0]".into(),
                "sim.disturbance.window=[0.1, 0.2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.tracker.alpha, 0.0);
        assert_eq!(c.tracker.kp_task, [900.0, 400.0]);
        assert!(c.sim.disturbance.is_some());
    }

    #[test]
    fn partial_sections_take_remaining_defaults() {
        let c = RunConfig::from_toml("[robot]\nbody_mass = 3.0\n[tracker]\nalpha = 0.5\n", &[])
            .unwrap();
        let paper = RobotParams::paper_robot();
        assert_eq!(c.robot.body_mass, 3.0);
        assert_eq!(c.robot.arm_length, paper.arm_length);
        assert_eq!(c.tracker.alpha, 0.5);
        assert_eq!(c.tracker.pos_pid, TrackerSection::default().pos_pid);
        assert_eq!(c.tracker.kd_task, TrackerSection::default().kd_task);
    }

    #[test]
    fn empty_override_removes_key() {
        let text = "[sim.disturbance]\nforce = [0.0, 20.0]\nwindow = [0.1, 0.2]\n";
        assert!(RunConfig::from_toml(text, &[])
            .unwrap()
            .sim
            .disturbance
            .is_some());
        let c = RunConfig::from_toml(text, &["sim.disturbance=".into()]).unwrap();
        assert!(c.sim.disturbance.is_none());
    }

    #[test]
    fn override_without_equals_is_usage_error() {
        let err = RunConfig::from_toml("", &["tracker.alpha".into()]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::from_toml(
            "",
            &[
                "sim.disturbance.force=[0.0, 20.0]".into(),
                "sim.disturbance.window=[0.1, 0.2]".into(),
            ],
        )
        .unwrap();
        let again = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn both_bar_forms_is_an_error() {
        let err = RunConfig::from_toml(
            "[bars]\ngaps = [0.4]\npositions = [[0.0, 0.0], [0.4, 0.0]]\n",
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("exactly one"), "{err}");
    }
}
