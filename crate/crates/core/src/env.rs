//! Reach-avoid-stay task data, obstacle motions and the sensing model.

use serde::Serialize;

use crate::tube::TubeConfig;
use crate::{Dims, Error, Result, Vector};

/// Closed ball `B(center, radius)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BallSet {
    pub center: Vector,
    pub radius: f64,
}

impl BallSet {
    pub fn new(center: Vector, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!("ball radius must be positive, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, y: &Vector) -> bool {
        (y - self.center).norm() <= self.radius
    }
}

/// Axis-aligned workspace box. Treated as soft: leaving it is reported, never
/// enforced on the dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    pub min: Vector,
    pub max: Vector,
}

impl Workspace {
    pub fn contains_point(&self, p: &Vector, dims: Dims) -> bool {
        (0..dims.n()).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_ball(&self, ball: &BallSet, dims: Dims) -> bool {
        (0..dims.n()).all(|i| {
            ball.center[i] - ball.radius >= self.min[i] && ball.center[i] + ball.radius <= self.max[i]
        })
    }

    pub fn diagonal(&self, dims: Dims) -> f64 {
        (0..dims.n()).map(|i| (self.max[i] - self.min[i]).powi(2)).sum::<f64>().sqrt()
    }
}

/// Temporal reach-avoid-stay task: start in `start`, be in `target` at exactly
/// `t_c`, avoid the unsafe set throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct TRasTask {
    pub dims: Dims,
    pub start: BallSet,
    pub target: BallSet,
    pub t_c: f64,
    pub workspace: Workspace,
}

/// Scripted obstacle trajectory `o(t)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    Static { center: Vector },
    ConstantVelocity { start: Vector, velocity: Vector },
    /// `center + axis * amplitude * sin(omega t + phase)`, `axis` unit length.
    Sinusoidal { center: Vector, axis: Vector, amplitude: f64, omega: f64, phase: f64 },
    /// Piecewise-linear through `points` at strictly increasing `times`; held
    /// constant outside the time range.
    Waypoints { points: Vec<Vector>, times: Vec<f64> },
    /// Constant velocity with specular reflection off the box `[min, max]`.
    Bouncing { start: Vector, velocity: Vector, min: Vector, max: Vector },
}

impl Motion {
    /// Upper bound on `‖ȯ(t)‖` over all `t`.
    pub fn max_speed(&self) -> f64 {
        match self {
            Motion::Static { .. } => 0.0,
            Motion::ConstantVelocity { velocity, .. } | Motion::Bouncing { velocity, .. } => velocity.norm(),
            Motion::Sinusoidal { axis, amplitude, omega, .. } => (axis.norm() * amplitude * omega).abs(),
            Motion::Waypoints { points, times } => points
                .windows(2)
                .zip(times.windows(2))
                .map(|(p, t)| (p[1] - p[0]).norm() / (t[1] - t[0]))
                .fold(0.0, f64::max),
        }
    }

    pub fn position(&self, t: f64) -> Vector {
        match self {
            Motion::Static { center } => *center,
            Motion::ConstantVelocity { start, velocity } => start + velocity * t,
            Motion::Sinusoidal { center, axis, amplitude, omega, phase } => {
                center + axis * (amplitude * (omega * t + phase).sin())
            }
            Motion::Waypoints { points, times } => waypoint_position(points, times, t),
            Motion::Bouncing { start, velocity, min, max } => {
                let mut p = Vector::zeros();
                for i in 0..3 {
                    p[i] = reflect(start[i] + velocity[i] * t, min[i], max[i]);
                }
                p
            }
        }
    }
}

fn waypoint_position(points: &[Vector], times: &[f64], t: f64) -> Vector {
    if t <= times[0] {
        return points[0];
    }
    let last = times.len() - 1;
    if t >= times[last] {
        return points[last];
    }
    // times is strictly increasing, so the partition point is in 1..=last
    let k = times.partition_point(|&tk| tk <= t);
    let (t0, t1) = (times[k - 1], times[k]);
    let a = (t - t0) / (t1 - t0);
    points[k - 1] + (points[k] - points[k - 1]) * a
}

/// Folds an unbounded coordinate into `[lo, hi]` as a triangle wave.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (x - lo).rem_euclid(2.0 * span);
    if u > span {
        lo + 2.0 * span - u
    } else {
        lo + u
    }
}

/// Obstacle radius `ρ_o(t)`.
#[derive(Clone, Debug, PartialEq)]
pub enum RadiusProfile {
    Constant(f64),
    /// `base + amplitude * sin(omega t + phase)` with `base >= |amplitude|`.
    Sinusoidal { base: f64, amplitude: f64, omega: f64, phase: f64 },
}

impl RadiusProfile {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            RadiusProfile::Constant(r) => r,
            RadiusProfile::Sinusoidal { base, amplitude, omega, phase } => {
                (base + amplitude * (omega * t + phase).sin()).max(0.0)
            }
        }
    }

    /// Upper bound on `|ρ̇_o(t)|`.
    pub fn max_rate(&self) -> f64 {
        match *self {
            RadiusProfile::Constant(_) => 0.0,
            RadiusProfile::Sinusoidal { amplitude, omega, .. } => (amplitude * omega).abs(),
        }
    }

    pub fn max_value(&self) -> f64 {
        match *self {
            RadiusProfile::Constant(r) => r,
            RadiusProfile::Sinusoidal { base, amplitude, .. } => base + amplitude.abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Obstacle {
    pub id: u32,
    pub motion: Motion,
    pub radius: RadiusProfile,
    /// Externally commanded center. When set it replaces the scripted motion.
    pub live_override: Option<Vector>,
}

impl Obstacle {
    pub fn new(id: u32, motion: Motion, radius: RadiusProfile) -> Self {
        Self { id, motion, radius, live_override: None }
    }

    pub fn center(&self, t: f64) -> Vector {
        match self.live_override {
            Some(c) => c,
            None => self.motion.position(t),
        }
    }

    pub fn radius_at(&self, t: f64) -> f64 {
        self.radius.at(t)
    }

    /// Whether the future of this obstacle is known (no live override).
    pub fn is_scripted(&self) -> bool {
        self.live_override.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleField {
    pub obstacles: Vec<Obstacle>,
    pub sensing_radius: f64,
}

/// One sensed obstacle: its state at the query time and the surface gap
/// `‖σ − o‖ − ρ_o` (negative when `σ` is inside it).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Observation {
    /// Position in [`ObstacleField::obstacles`].
    #[serde(skip)]
    pub index: usize,
    pub id: u32,
    #[serde(skip)]
    pub center: Vector,
    #[serde(skip)]
    pub radius: f64,
    pub gap: f64,
}

impl ObstacleField {
    pub fn new(obstacles: Vec<Obstacle>, sensing_radius: f64) -> Self {
        Self { obstacles, sensing_radius }
    }

    pub fn empty(sensing_radius: f64) -> Self {
        Self::new(Vec::new(), sensing_radius)
    }

    /// Every obstacle at time `t` with its gap to `sigma`, sensed or not.
    pub fn all_at<'a>(&'a self, t: f64, sigma: &'a Vector) -> impl Iterator<Item = Observation> + 'a {
        self.obstacles.iter().enumerate().map(move |(index, ob)| {
            let center = ob.center(t);
            let radius = ob.radius_at(t);
            Observation { index, id: ob.id, center, radius, gap: (sigma - center).norm() - radius }
        })
    }

    /// Lazily yields the obstacles within the sensing radius of `sigma`.
    pub fn sensed<'a>(&'a self, t: f64, sigma: &'a Vector) -> impl Iterator<Item = Observation> + 'a {
        let reach = self.sensing_radius;
        self.all_at(t, sigma).filter(move |o| o.gap <= reach)
    }

    /// Largest rate at which any scripted obstacle surface can move.
    pub fn scripted_rate_bound(&self) -> f64 {
        self.obstacles.iter().map(|o| o.motion.max_speed() + o.radius.max_rate()).fold(0.0, f64::max)
    }

    pub fn by_id_mut(&mut self, id: u32) -> Option<&mut Obstacle> {
        self.obstacles.iter_mut().find(|o| o.id == id)
    }

    /// Smallest gap between `y` and any obstacle surface, `+inf` when empty.
    pub fn clearance(&self, t: f64, y: &Vector) -> f64 {
        self.all_at(t, y).map(|o| o.gap).fold(f64::INFINITY, f64::min)
    }
}

/// Obstacles within the sensing radius of `sigma` at time `t`, with exact gaps.
pub fn observe(field: &ObstacleField, t: f64, sigma: &Vector) -> Vec<Observation> {
    debug_assert!(t >= 0.0, "observe called with negative time {t}");
    field.sensed(t, sigma).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub code: String,
    pub message: String,
}

impl Finding {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.to_string(), message: message.into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Finding>,
    /// Informational findings that do not affect `ok`.
    pub notes: Vec<Finding>,
}

impl ValidationReport {
    pub fn has(&self, code: &str) -> bool {
        self.violations.iter().any(|f| f.code == code)
    }
}

/// Checks the task, obstacle field and tube configuration for the
/// preconditions the tube construction relies on. Never fails; every finding
/// is collected into the report.
pub fn validate(task: &TRasTask, field: &ObstacleField, tube: &TubeConfig) -> ValidationReport {
    let mut violations = Vec::new();
    let mut notes = Vec::new();
    let dims = task.dims;

    if !(task.t_c > 0.0 && task.t_c.is_finite()) {
        violations.push(Finding::new("t_c_not_positive", format!("t_c must be positive, got {}", task.t_c)));
    }
    if !task.workspace.contains_ball(&task.start, dims) {
        violations.push(Finding::new("start_outside_workspace", "start ball leaves the workspace"));
    }
    if !task.workspace.contains_ball(&task.target, dims) {
        violations.push(Finding::new("target_outside_workspace", "target ball leaves the workspace"));
    }
    for problem in tube.problems() {
        violations.push(Finding::new("invalid_tube_config", problem));
    }
    let ball_limit = task.start.radius.min(task.target.radius);
    if tube.rho_max > ball_limit {
        violations.push(Finding::new(
            "rho_max_exceeds_balls",
            format!("ρ_max exceeds min(d_S,d_T): {} > {}", tube.rho_max, ball_limit),
        ));
    }
    if tube.k1 * task.t_c <= 1.0 {
        violations.push(Finding::new(
            "k1_tc_not_above_one",
            format!("k1·t_c must exceed 1, got {}", tube.k1 * task.t_c),
        ));
    }
    if field.sensing_radius < tube.rho_max {
        violations.push(Finding::new(
            "sensing_radius_below_rho_max",
            format!("sensing radius {} is below ρ_max {}", field.sensing_radius, tube.rho_max),
        ));
    }

    for ob in &field.obstacles {
        let c0 = ob.center(0.0);
        let gap0 = (task.start.center - c0).norm() - ob.radius_at(0.0);
        if gap0 <= task.start.radius {
            violations.push(Finding::new(
                "start_intersects_unsafe",
                format!("obstacle {} intersects the start ball at t=0", ob.id),
            ));
        }
        if ob.is_scripted() {
            let gap_tc = (task.target.center - ob.motion.position(task.t_c)).norm() - ob.radius_at(task.t_c);
            if gap_tc <= tube.rho_max {
                violations.push(Finding::new(
                    "target_blocked_at_tc",
                    format!(
                        "target blocked at t_c: obstacle {} is within ρ_max of the target center (gap {:.6})",
                        ob.id, gap_tc
                    ),
                ));
            }
        } else {
            notes.push(Finding::new(
                "target_clearance_unverifiable",
                format!("obstacle {} is live-controlled; separation at t_c cannot be checked", ob.id),
            ));
        }
    }

    ValidationReport { ok: violations.is_empty(), violations, notes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v2(x: f64, y: f64) -> Vector {
        Vector::new(x, y, 0.0)
    }

    fn static_ob(id: u32, c: Vector, r: f64) -> Obstacle {
        Obstacle::new(id, Motion::Static { center: c }, RadiusProfile::Constant(r))
    }

    fn mobile_robot_task() -> TRasTask {
        TRasTask {
            dims: Dims::Two,
            start: BallSet::new(v2(1.0, 1.0), 1.0).unwrap(),
            target: BallSet::new(v2(8.0, 8.0), 1.0).unwrap(),
            t_c: 18.0,
            workspace: Workspace { min: v2(0.0, 0.0), max: v2(9.0, 9.0) },
        }
    }

    #[test]
    fn observe_reports_exact_gap() {
        let field = ObstacleField::new(vec![static_ob(0, v2(3.0, 0.0), 1.0)], 5.0);
        let obs = observe(&field, 0.0, &v2(0.0, 0.0));
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].gap, 2.0);
    }

    #[test]
    fn observe_reports_penetration_unclamped() {
        let field = ObstacleField::new(vec![static_ob(0, v2(1.0, 1.0), 0.5)], 5.0);
        let obs = observe(&field, 0.0, &v2(1.0, 1.0));
        assert_eq!(obs[0].gap, -0.5);
    }

    #[test]
    fn observe_drops_obstacles_beyond_sensing_radius() {
        let field = ObstacleField::new(
            vec![static_ob(1, v2(0.4 + 0.3, 0.0), 0.3), static_ob(2, v2(0.0, 5.0 + 0.3), 0.3)],
            0.9,
        );
        let obs = observe(&field, 0.0, &v2(0.0, 0.0));
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].id, 1);
        assert!((obs[0].gap - 0.4).abs() < 1e-12);
    }

    #[test]
    fn live_override_replaces_motion() {
        let mut ob = static_ob(0, v2(3.0, 0.0), 1.0);
        ob.live_override = Some(v2(5.0, 5.0));
        assert_eq!(ob.center(2.0), v2(5.0, 5.0));
        assert!(!ob.is_scripted());
    }

    #[test]
    fn bouncing_reflects_off_walls() {
        let m = Motion::Bouncing {
            start: v2(1.0, 1.0),
            velocity: v2(1.0, 0.0),
            min: v2(0.0, 0.0),
            max: v2(2.0, 2.0),
        };
        assert!((m.position(0.5)[0] - 1.5).abs() < 1e-12);
        assert!((m.position(1.5)[0] - 1.5).abs() < 1e-12);
        assert!((m.position(3.0)[0] - 0.0).abs() < 1e-12);
        assert!((m.position(5.0)[0] - 2.0).abs() < 1e-12);
        assert_eq!(m.position(7.3)[1], 1.0);
    }

    #[test]
    fn waypoints_interpolate_and_hold() {
        let m = Motion::Waypoints { points: vec![v2(0.0, 0.0), v2(2.0, 0.0), v2(2.0, 2.0)], times: vec![1.0, 2.0, 4.0] };
        assert_eq!(m.position(0.0), v2(0.0, 0.0));
        assert_eq!(m.position(1.5), v2(1.0, 0.0));
        assert_eq!(m.position(3.0), v2(2.0, 1.0));
        assert_eq!(m.position(10.0), v2(2.0, 2.0));
    }

    #[test]
    fn sinusoidal_radius_never_negative() {
        let r = RadiusProfile::Sinusoidal { base: 0.2, amplitude: 0.2, omega: 3.0, phase: 0.0 };
        for k in 0..1000 {
            assert!(r.at(k as f64 * 0.01) >= 0.0);
        }
    }

    #[test]
    fn mobile_robot_task_validates() {
        let task = mobile_robot_task();
        let field = ObstacleField::new(vec![], 2.65);
        let report = validate(&task, &field, &TubeConfig::mobile_robot());
        assert!(report.ok, "{:?}", report.violations);
    }

    #[test]
    fn oversized_rho_max_is_flagged() {
        let task = mobile_robot_task();
        let mut cfg = TubeConfig::mobile_robot();
        cfg.rho_max = 1.5;
        let report = validate(&task, &ObstacleField::new(vec![], 3.0), &cfg);
        assert!(!report.ok);
        assert!(report.has("rho_max_exceeds_balls"));
        let msg = &report.violations.iter().find(|f| f.code == "rho_max_exceeds_balls").unwrap().message;
        assert!(msg.contains("ρ_max exceeds min(d_S,d_T)"));
    }

    #[test]
    fn obstacle_parked_on_target_blocks_the_target() {
        let task = mobile_robot_task();
        let field = ObstacleField::new(vec![static_ob(4, v2(8.0, 8.0), 0.2)], 2.65);
        let report = validate(&task, &field, &TubeConfig::mobile_robot());
        assert!(report.has("target_blocked_at_tc"));
        assert!(report.violations[0].message.starts_with("target blocked at t_c"));
    }

    #[test]
    fn live_obstacle_makes_target_clearance_unverifiable() {
        let task = mobile_robot_task();
        let mut ob = static_ob(4, v2(8.0, 8.0), 0.2);
        ob.live_override = Some(v2(4.0, 6.0));
        let report = validate(&task, &ObstacleField::new(vec![ob], 2.65), &TubeConfig::mobile_robot());
        assert!(report.ok);
        assert_eq!(report.notes[0].code, "target_clearance_unverifiable");
    }

    #[test]
    fn small_k1_is_flagged() {
        let task = mobile_robot_task();
        let mut cfg = TubeConfig::mobile_robot();
        cfg.k1 = 1.0 / 18.0;
        let report = validate(&task, &ObstacleField::new(vec![], 2.65), &cfg);
        assert!(report.has("k1_tc_not_above_one"));
    }

    #[test]
    fn start_overlap_is_flagged() {
        let task = mobile_robot_task();
        let field = ObstacleField::new(vec![static_ob(0, v2(2.5, 1.0), 0.6)], 2.65);
        let report = validate(&task, &field, &TubeConfig::mobile_robot());
        assert!(report.has("start_intersects_unsafe"));
    }
}
