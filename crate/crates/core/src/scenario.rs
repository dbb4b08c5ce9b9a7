//! Scenario file format, its runtime form, and the bundled scenarios.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{FunnelParams, DEFAULT_EPS_ERR};
use crate::env::{self, BallSet, Finding, Motion, Obstacle, ObstacleField, RadiusProfile, TRasTask, ValidationReport, Workspace};
use crate::tube::{Gains, TubeConfig, DEFAULT_EPS_SING};
use crate::{Dims, Error, Result, Vector};

pub const DEFAULT_DT: f64 = 1e-3;

/// Sensing radius used when a scenario does not set one: `ρ_max + 14/ν`.
pub fn default_sensing_radius(rho_max: f64, nu: f64) -> f64 {
    rho_max + 14.0 / nu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallFile {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceFile {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionFile {
    Static {
        center: Vec<f64>,
    },
    ConstantVelocity {
        start: Vec<f64>,
        velocity: Vec<f64>,
    },
    Sinusoidal {
        center: Vec<f64>,
        axis: Vec<f64>,
        amplitude: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    Waypoints {
        points: Vec<Vec<f64>>,
        times: Vec<f64>,
    },
    Bouncing {
        start: Vec<f64>,
        velocity: Vec<f64>,
        min: Vec<f64>,
        max: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiusProfileFile {
    pub base: f64,
    pub amplitude: f64,
    pub omega: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleFile {
    pub id: u32,
    pub motion: MotionFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_profile: Option<RadiusProfileFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainFile {
    Scalar(f64),
    PerObstacle(Vec<f64>),
}

impl From<&GainFile> for Gains {
    fn from(g: &GainFile) -> Self {
        match g {
            GainFile::Scalar(k) => Gains::Uniform(*k),
            GainFile::PerObstacle(ks) => Gains::PerObstacle(ks.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeFile {
    pub rho_min: f64,
    pub rho_max: f64,
    pub nu: f64,
    pub k1: f64,
    pub k2: GainFile,
    pub k3: GainFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_sing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end_guard: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub funnels: Option<Vec<Vec<FunnelParams>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantFile {
    pub model: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub params: serde_json::Value,
    /// Initial stage states `x_1..x_N`; defaults to `x_1 = s`, the rest zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceFile {
    pub bound: f64,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

/// On-disk scenario document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dims: Dims,
    pub start: BallFile,
    pub target: BallFile,
    pub t_c: f64,
    pub workspace: WorkspaceFile,
    #[serde(default)]
    pub obstacles: Vec<ObstacleFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensing_radius: Option<f64>,
    pub tube: TubeFile,
    #[serde(default)]
    pub controller: ControllerFile,
    pub plant: PlantFile,
    #[serde(default)]
    pub disturbance: DisturbanceFile,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Controller settings as given; funnels are resolved against the initial
/// state when the episode starts.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerSpec {
    pub kappa: Option<Vec<f64>>,
    pub funnels: Option<Vec<Vec<FunnelParams>>>,
    pub eps_err: f64,
}

/// Validated runtime scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub task: TRasTask,
    pub field: ObstacleField,
    pub tube: TubeConfig,
    pub controller: ControllerSpec,
    pub plant_model: String,
    pub plant_params: serde_json::Value,
    pub initial: Option<Vec<Vector>>,
    pub disturbance_bound: f64,
    pub dt: f64,
    pub seed: u64,
    /// The document this scenario was built from.
    pub source: ScenarioFile,
}

/// Per-run overrides applied on top of a scenario file.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
}

fn motion(dims: Dims, m: &MotionFile) -> Result<Motion> {
    Ok(match m {
        MotionFile::Static { center } => Motion::Static { center: dims.vector(center)? },
        MotionFile::ConstantVelocity { start, velocity } => {
            Motion::ConstantVelocity { start: dims.vector(start)?, velocity: dims.vector(velocity)? }
        }
        MotionFile::Sinusoidal { center, axis, amplitude, omega, phase } => {
            let axis = dims.vector(axis)?;
            if axis.norm() == 0.0 {
                return Err(Error::Config("sinusoidal motion axis must be nonzero".into()));
            }
            Motion::Sinusoidal {
                center: dims.vector(center)?,
                axis: axis.normalize(),
                amplitude: *amplitude,
                omega: *omega,
                phase: *phase,
            }
        }
        MotionFile::Waypoints { points, times } => {
            if points.is_empty() || points.len() != times.len() {
                return Err(Error::Config("waypoints need matching, non-empty points and times".into()));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("waypoint times must be strictly increasing".into()));
            }
            let points = points.iter().map(|p| dims.vector(p)).collect::<Result<Vec<_>>>()?;
            Motion::Waypoints { points, times: times.clone() }
        }
        MotionFile::Bouncing { start, velocity, min, max } => {
            let (min, max) = (dims.vector(min)?, dims.vector(max)?);
            if (0..dims.n()).any(|i| max[i] < min[i]) {
                return Err(Error::Config("bouncing box needs min <= max".into()));
            }
            Motion::Bouncing { start: dims.vector(start)?, velocity: dims.vector(velocity)?, min, max }
        }
    })
}

fn obstacle(dims: Dims, o: &ObstacleFile) -> Result<Obstacle> {
    let radius = match (o.radius, o.radius_profile) {
        (Some(r), None) => {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("obstacle {} radius must be nonnegative", o.id)));
            }
            RadiusProfile::Constant(r)
        }
        (None, Some(p)) => {
            if !(p.base >= p.amplitude.abs() && p.base.is_finite() && p.omega.is_finite()) {
                return Err(Error::Config(format!("obstacle {} radius profile needs base >= |amplitude|", o.id)));
            }
            RadiusProfile::Sinusoidal { base: p.base, amplitude: p.amplitude, omega: p.omega, phase: p.phase }
        }
        _ => return Err(Error::Config(format!("obstacle {} needs exactly one of radius, radius_profile", o.id))),
    };
    Ok(Obstacle::new(o.id, motion(dims, &o.motion)?, radius))
}

impl Scenario {
    pub fn from_file(file: ScenarioFile) -> Result<Self> {
        let dims = file.dims;
        if !(file.dt > 0.0 && file.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", file.dt)));
        }
        let ticks = file.t_c / file.dt;
        if !(file.t_c > 0.0) || (ticks - ticks.round()).abs() > 1e-6 * ticks.max(1.0) {
            return Err(Error::Config(format!("t_c = {} must be a positive multiple of dt = {}", file.t_c, file.dt)));
        }
        let task = TRasTask {
            dims,
            start: BallSet::new(dims.vector(&file.start.center)?, file.start.radius)?,
            target: BallSet::new(dims.vector(&file.target.center)?, file.target.radius)?,
            t_c: file.t_c,
            workspace: Workspace { min: dims.vector(&file.workspace.min)?, max: dims.vector(&file.workspace.max)? },
        };
        let mut ids = std::collections::BTreeSet::new();
        let mut obstacles = Vec::with_capacity(file.obstacles.len());
        for o in &file.obstacles {
            if !ids.insert(o.id) {
                return Err(Error::Config(format!("duplicate obstacle id {}", o.id)));
            }
            obstacles.push(obstacle(dims, o)?);
        }
        let t = &file.tube;
        let tube = TubeConfig {
            k1: t.k1,
            k2: (&t.k2).into(),
            k3: (&t.k3).into(),
            rho_min: t.rho_min,
            rho_max: t.rho_max,
            nu: t.nu,
            eps_sing: t.eps_sing.unwrap_or(DEFAULT_EPS_SING),
            t_end_guard: t.t_end_guard.unwrap_or(file.dt),
        };
        for (name, g) in [("k2", &t.k2), ("k3", &t.k3)] {
            if let GainFile::PerObstacle(ks) = g {
                if ks.len() != obstacles.len() {
                    return Err(Error::Config(format!(
                        "{name} has {} entries for {} obstacles",
                        ks.len(),
                        obstacles.len()
                    )));
                }
            }
        }
        let sensing_radius = file.sensing_radius.unwrap_or_else(|| default_sensing_radius(t.rho_max, t.nu));
        if !(sensing_radius > 0.0) {
            return Err(Error::Config("sensing_radius must be positive".into()));
        }
        let initial = match &file.plant.initial {
            Some(xs) => Some(xs.iter().map(|x| dims.vector(x)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let bound = file.disturbance.bound;
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::Config(format!("disturbance bound must be nonnegative, got {bound}")));
        }
        let c = &file.controller;
        Ok(Self {
            name: file.name.clone().unwrap_or_else(|| "scenario".to_string()),
            task,
            field: ObstacleField::new(obstacles, sensing_radius),
            tube,
            controller: ControllerSpec {
                kappa: c.kappa.clone(),
                funnels: c.funnels.clone(),
                eps_err: c.eps_err.unwrap_or(DEFAULT_EPS_ERR),
            },
            plant_model: file.plant.model.clone(),
            plant_params: file.plant.params.clone(),
            initial,
            disturbance_bound: bound,
            dt: file.dt,
            seed: file.seed,
            source: file,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    /// Reads a scenario from `path`, or from the bundled set when no such file
    /// exists and the name matches a bundled scenario.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                bundled_scenario(name).ok_or_else(|| Error::UnknownBundle(path.display().to_string())).and_then(Self::from_json)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn with_overrides(&self, ov: Overrides) -> Result<Self> {
        if ov == Overrides::default() {
            return Ok(self.clone());
        }
        let mut file = self.source.clone();
        if let Some(seed) = ov.seed {
            file.seed = seed;
        }
        if let Some(dt) = ov.dt {
            file.dt = dt;
        }
        Self::from_file(file)
    }

    /// Task-level validation plus scenario-level checks on the initial state.
    pub fn validate(&self) -> ValidationReport {
        let mut report = env::validate(&self.task, &self.field, &self.tube);
        if let Some(xs) = &self.initial {
            if !self.task.start.contains(&xs[0]) {
                report.violations.push(Finding {
                    code: "output_outside_start".into(),
                    message: "initial output is not in the start ball".into(),
                });
            }
        }
        report.ok = report.violations.is_empty();
        report
    }

    pub fn steps(&self) -> usize {
        (self.task.t_c / self.dt).round() as usize
    }
}

/// Bundled scenario documents by file name.
pub const BUNDLED_SCENARIOS: &[(&str, &str)] = &[
    ("mobile_robot.json", include_str!("../scenarios/mobile_robot.json")),
    ("quadrotor.json", include_str!("../scenarios/quadrotor.json")),
    ("crossing_2d.json", include_str!("../scenarios/crossing_2d.json")),
    ("quad_slalom.json", include_str!("../scenarios/quad_slalom.json")),
];

/// Bundled benchmark specifications by file name.
pub const BUNDLED_BENCH_SPECS: &[(&str, &str)] = &[
    ("table2_2d.json", include_str!("../scenarios/table2_2d.json")),
    ("table3_2d.json", include_str!("../scenarios/table3_2d.json")),
    ("table3_3d.json", include_str!("../scenarios/table3_3d.json")),
];

pub fn bundled_scenario(name: &str) -> Option<&'static str> {
    BUNDLED_SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn bundled_bench_spec(name: &str) -> Option<&'static str> {
    BUNDLED_BENCH_SPECS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse_and_validate() {
        for (name, text) in BUNDLED_SCENARIOS {
            let sc = Scenario::from_json(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            let report = sc.validate();
            assert!(report.ok, "{name}: {:?}", report.violations);
        }
    }

    #[test]
    fn mobile_robot_keeps_default_tube_gains() {
        let sc = Scenario::from_json(bundled_scenario("mobile_robot.json").unwrap()).unwrap();
        let want = TubeConfig { t_end_guard: sc.dt, ..TubeConfig::mobile_robot() };
        assert_eq!(sc.tube, want);
        assert_eq!(sc.plant_model, "omni2d");
        assert_eq!(sc.task.t_c, 18.0);
        let sc = Scenario::from_json(bundled_scenario("quadrotor.json").unwrap()).unwrap();
        assert_eq!(sc.tube, TubeConfig { t_end_guard: sc.dt, ..TubeConfig::quadrotor() });
        assert_eq!(sc.task.t_c, 16.0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(bundled_scenario("crossing_2d.json").unwrap()).unwrap();
        v["tube"]["k4"] = 1.0.into();
        assert!(Scenario::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(bundled_scenario("crossing_2d.json").unwrap()).unwrap();
        v["obstacles"][0]["motion"]["speed"] = 1.0.into();
        assert!(Scenario::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn zero_dt_is_a_config_error() {
        let mut v: serde_json::Value = serde_json::from_str(bundled_scenario("crossing_2d.json").unwrap()).unwrap();
        v["dt"] = 0.0.into();
        assert!(matches!(Scenario::from_json(&v.to_string()), Err(Error::Config(_))));
        v["dt"] = 0.007.into();
        assert!(matches!(Scenario::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn per_obstacle_gains_must_match_count() {
        let mut v: serde_json::Value = serde_json::from_str(bundled_scenario("crossing_2d.json").unwrap()).unwrap();
        v["tube"]["k2"] = serde_json::json!([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert!(Scenario::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let sc = Scenario::from_json(bundled_scenario("crossing_2d.json").unwrap()).unwrap();
        let text = serde_json::to_string(&sc.source).unwrap();
        let again = Scenario::from_json(&text).unwrap();
        assert_eq!(again.source, sc.source);
        assert_eq!(again.field, sc.field);
    }

    #[test]
    fn overrides_rebuild() {
        let sc = Scenario::from_json(bundled_scenario("crossing_2d.json").unwrap()).unwrap();
        let o = sc.with_overrides(Overrides { seed: Some(99), dt: Some(2e-3) }).unwrap();
        assert_eq!(o.seed, 99);
        assert_eq!(o.steps(), sc.steps() / 2);
        assert_eq!(o.tube.t_end_guard, 2e-3);
    }

    #[test]
    fn load_falls_back_to_bundled_name() {
        let sc = Scenario::load(Path::new("mobile_robot.json")).unwrap();
        assert_eq!(sc.task.dims, Dims::Two);
        assert!(matches!(Scenario::load(Path::new("nope.json")), Err(Error::UnknownBundle(_))));
    }
}
