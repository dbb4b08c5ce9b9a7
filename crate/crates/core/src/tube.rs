//! Online spatiotemporal tube `Γ(t) = B(σ(t), ρ(t))`.
//!
//! The center follows a prescribed-time attraction toward the target plus a
//! proximity-gated avoidance field; the radius is a smooth function of the
//! soft-min distance to the sensed obstacles.

use serde::Serialize;

use crate::env::{ObstacleField, Observation, TRasTask};
use crate::{Dims, Error, Result, Vector};

/// Scalar gain shared by all obstacles, or one gain per obstacle (by position
/// in the field).
#[derive(Clone, Debug, PartialEq)]
pub enum Gains {
    Uniform(f64),
    PerObstacle(Vec<f64>),
}

impl Gains {
    #[inline]
    pub fn get(&self, index: usize) -> f64 {
        match self {
            Gains::Uniform(k) => *k,
            Gains::PerObstacle(ks) => ks.get(index).copied().unwrap_or_else(|| *ks.last().unwrap_or(&0.0)),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Gains::Uniform(k) => vec![*k],
            Gains::PerObstacle(ks) => ks.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TubeConfig {
    pub k1: f64,
    pub k2: Gains,
    pub k3: Gains,
    pub rho_min: f64,
    pub rho_max: f64,
    pub nu: f64,
    /// Floor applied to the avoidance denominators and to `θ`'s gap.
    pub eps_sing: f64,
    /// The time factor `t_c/(t_c−t)` is frozen at `t = t_c − t_end_guard`.
    pub t_end_guard: f64,
}

pub const DEFAULT_EPS_SING: f64 = 1e-6;

impl TubeConfig {
    /// Gains for the bundled mobile-robot scenario.
    pub fn mobile_robot() -> Self {
        Self {
            k1: 600.0,
            k2: Gains::Uniform(600.0),
            k3: Gains::Uniform(600.0),
            rho_min: 0.1,
            rho_max: 0.9,
            nu: 8.0,
            eps_sing: DEFAULT_EPS_SING,
            t_end_guard: 1e-3,
        }
    }

    /// Gains for the bundled quadrotor scenario.
    pub fn quadrotor() -> Self {
        Self { k1: 300.0, k2: Gains::Uniform(1000.0), k3: Gains::Uniform(300.0), ..Self::mobile_robot() }
    }

    /// Structural problems independent of the task horizon.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.k1) {
            out.push(format!("k1 must be positive, got {}", self.k1));
        }
        for (name, g) in [("k2", &self.k2), ("k3", &self.k3)] {
            let vals = g.values();
            if vals.is_empty() {
                out.push(format!("{name} must not be empty"));
            }
            if let Some(bad) = vals.iter().find(|&&k| !pos(k)) {
                out.push(format!("{name} gains must be positive, got {bad}"));
            }
        }
        if !pos(self.rho_min) || !pos(self.rho_max) || self.rho_min >= self.rho_max {
            out.push(format!("need 0 < rho_min < rho_max, got {} and {}", self.rho_min, self.rho_max));
        }
        if !pos(self.nu) {
            out.push(format!("nu must be positive, got {}", self.nu));
        }
        if !pos(self.eps_sing) {
            out.push(format!("eps_sing must be positive, got {}", self.eps_sing));
        }
        if !pos(self.t_end_guard) {
            out.push(format!("t_end_guard must be positive, got {}", self.t_end_guard));
        }
        out
    }

    /// Smallest radius reachable while the center keeps its `ρ_min` margin.
    pub fn rho_lower_bound(&self) -> f64 {
        radius_from_distance(self.rho_min, self.rho_max, self.nu)
    }
}

/// `−(1/ν) ln Σ exp(−ν d̂_j)`, evaluated in one pass with a running max-shift.
/// Returns `+inf` for an empty input.
pub fn smooth_min<I: IntoIterator<Item = f64>>(gaps: I, nu: f64) -> f64 {
    let mut lo = f64::INFINITY;
    let mut acc = 0.0;
    for g in gaps {
        if g < lo {
            acc = acc * (-nu * (lo - g)).exp() + 1.0;
            lo = g;
        } else {
            acc += (-nu * (g - lo)).exp();
        }
    }
    if acc == 0.0 {
        return f64::INFINITY;
    }
    lo - acc.ln() / nu
}

pub fn smooth_min_distance(gaps: &[f64], nu: f64) -> f64 {
    smooth_min(gaps.iter().copied(), nu)
}

/// `−(1/ν) ln(exp(−ν ρ_max) + exp(−ν d))`; `ρ_max` at `d = +inf`.
pub fn radius_from_distance(d: f64, rho_max: f64, nu: f64) -> f64 {
    let lo = d.min(rho_max);
    let spread = (d - rho_max).abs();
    if spread.is_infinite() {
        return lo;
    }
    lo - (-nu * spread).exp().ln_1p() / nu
}

/// Proximity gate `θ = 1/gap − 1/ρ_max` inside `ρ_max`, zero outside. The gap
/// is floored at `eps`; the boolean reports whether the floor was hit.
pub fn switching_weight(gap: f64, rho_max: f64, eps: f64) -> (f64, bool) {
    if gap > rho_max {
        return (0.0, false);
    }
    let clamped = gap <= eps;
    let g = if clamped { eps } else { gap };
    (1.0 / g - 1.0 / rho_max, clamped)
}

/// Repulsive normal `(σ−o)/(‖σ−o‖ − ρ_o − ρ_min)^3` with the denominator base
/// floored at `eps`.
pub fn avoidance_normal(sigma: &Vector, o: &Vector, rho_o: f64, rho_min: f64, eps: f64) -> (Vector, bool) {
    let diff = sigma - o;
    let base = diff.norm() - (rho_o + rho_min);
    let clamped = base < eps;
    let b = if clamped { eps } else { base };
    (diff / (b * b * b), clamped)
}

/// Unit vector orthogonal to `m`, taken as the normalized projection of the
/// goal direction onto `m`'s orthogonal complement.
pub fn tangential_direction(m: &Vector, goal: &Vector, dims: Dims) -> Vector {
    let mh = m.normalize();
    let proj = goal - mh * mh.dot(goal);
    let n = proj.norm();
    if n >= 1e-9 {
        return proj / n;
    }
    match dims {
        Dims::Two => Vector::new(-mh.y, mh.x, 0.0),
        Dims::Three => {
            let mut axis = 0;
            for i in 1..3 {
                if mh[i].abs() < mh[axis].abs() {
                    axis = i;
                }
            }
            let mut e = Vector::zeros();
            e[axis] = 1.0;
            mh.cross(&e).normalize()
        }
    }
}

/// Per-obstacle avoidance ingredients at one instant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AvoidanceTerm {
    pub id: u32,
    pub theta: f64,
    pub m: [f64; 3],
    pub v: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TubeState {
    pub t: f64,
    pub sigma: Vector,
    pub rho: f64,
}

impl TubeState {
    /// Closed-ball membership `‖y − σ‖ ≤ ρ`.
    pub fn contains(&self, y: &Vector) -> bool {
        (y - self.sigma).norm() <= self.rho
    }
}

pub fn contains(state: &TubeState, y: &Vector) -> bool {
    state.contains(y)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TubeEvent {
    /// An avoidance denominator or gap hit the `eps_sing` floor.
    NearSingular { id: u32 },
    /// The center came within `ρ_min` of an obstacle surface.
    MarginBreach { id: u32, gap: f64 },
}

#[derive(Clone, Debug)]
pub struct TubeStep {
    pub state: TubeState,
    /// Smooth-min distance at the new state, `+inf` when nothing is sensed.
    pub distance: f64,
    pub events: Vec<TubeEvent>,
}

/// Tube generator for one task.
#[derive(Clone, Debug)]
pub struct Tube {
    pub cfg: TubeConfig,
    pub eta: Vector,
    pub start: Vector,
    pub t_c: f64,
    pub dims: Dims,
}

impl Tube {
    /// Checks the construction preconditions and returns the generator with
    /// its initial state `σ(0) = s`.
    pub fn new(task: &TRasTask, field: &ObstacleField, cfg: TubeConfig) -> Result<(Self, TubeState)> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        if cfg.k1 * task.t_c <= 1.0 {
            return Err(Error::Validation(format!("k1·t_c = {} must exceed 1", cfg.k1 * task.t_c)));
        }
        let tube = Self { cfg, eta: task.target.center, start: task.start.center, t_c: task.t_c, dims: task.dims };
        let sigma = task.start.center;
        if let Some(o) = field.all_at(0.0, &sigma).find(|o| o.gap <= tube.cfg.rho_min) {
            return Err(Error::Validation(format!(
                "obstacle {} is within rho_min of the start center (gap {})",
                o.id, o.gap
            )));
        }
        let (rho, _) = tube.radius_at(field, 0.0, &sigma);
        Ok((tube, TubeState { t: 0.0, sigma, rho }))
    }

    /// `(ρ, d)` from the closed form at `(t, σ)`.
    pub fn radius_at(&self, field: &ObstacleField, t: f64, sigma: &Vector) -> (f64, f64) {
        let d = smooth_min(field.sensed(t, sigma).map(|o| o.gap), self.cfg.nu);
        (radius_from_distance(d, self.cfg.rho_max, self.cfg.nu), d)
    }

    fn clamped_time(&self, t: f64) -> f64 {
        t.min(self.t_c - self.cfg.t_end_guard)
    }

    /// Attraction factor `k1·t_c/(t_c − t)` with the end guard applied.
    pub fn attraction_rate(&self, t: f64) -> f64 {
        self.cfg.k1 * self.t_c / (self.t_c - self.clamped_time(t))
    }

    /// Exact propagator of `δ' = −k1 t_c/(t_c − t) δ` from `ta` to `tb`.
    pub fn attraction_propagator(&self, ta: f64, tb: f64) -> f64 {
        let a = self.cfg.k1 * self.t_c;
        let t_star = self.t_c - self.cfg.t_end_guard;
        let ratio = (self.t_c - tb.min(t_star)) / (self.t_c - ta.min(t_star));
        let frozen = (tb - ta.max(t_star)).max(0.0);
        (a * ratio.ln() - a / self.cfg.t_end_guard * frozen).exp()
    }

    fn term(&self, sigma: &Vector, obs: &Observation, events: Option<&mut Vec<TubeEvent>>) -> Option<AvoidanceTerm> {
        let (theta, c1) = switching_weight(obs.gap, self.cfg.rho_max, self.cfg.eps_sing);
        if theta == 0.0 && !c1 {
            return None;
        }
        let (m, c2) = avoidance_normal(sigma, &obs.center, obs.radius, self.cfg.rho_min, self.cfg.eps_sing);
        if let Some(ev) = events {
            if c1 || c2 {
                ev.push(TubeEvent::NearSingular { id: obs.id });
            }
        }
        let v = tangential_direction(&m, &(self.eta - sigma), self.dims);
        Some(AvoidanceTerm { id: obs.id, theta, m: m.into(), v: v.into() })
    }

    /// Active avoidance terms at `(t, σ)`, for logging and inspection.
    pub fn avoidance_terms(&self, field: &ObstacleField, t: f64, sigma: &Vector) -> Vec<AvoidanceTerm> {
        field.sensed(t, sigma).filter_map(|o| self.term(sigma, &o, None)).collect()
    }

    /// `Σ_j (k2_j m_j + k3_j v_j) θ_j` over the sensed obstacles.
    pub fn avoidance(&self, field: &ObstacleField, t: f64, sigma: &Vector, events: &mut Vec<TubeEvent>) -> Vector {
        let mut sum = Vector::zeros();
        for obs in field.sensed(t, sigma) {
            if let Some(term) = self.term(sigma, &obs, Some(&mut *events)) {
                let m = Vector::from(term.m);
                let v = Vector::from(term.v);
                sum += (m * self.cfg.k2.get(obs.index) + v * self.cfg.k3.get(obs.index)) * term.theta;
            }
        }
        sum
    }

    /// Full right-hand side of the center dynamics.
    pub fn center_derivative(&self, field: &ObstacleField, t: f64, sigma: &Vector) -> Vector {
        let mut scratch = Vec::new();
        (self.eta - sigma) * self.attraction_rate(t) + self.avoidance(field, t, sigma, &mut scratch)
    }

    /// One step of length `dt`. The attraction term is integrated exactly
    /// (integrating-factor RK4); the avoidance term by the RK4 quadrature with
    /// obstacles sampled at the stage times. The radius is then set from the
    /// closed form at the new center.
    pub fn step(&self, state: &TubeState, field: &ObstacleField, dt: f64) -> TubeStep {
        let mut events = Vec::new();
        let (t0, h) = (state.t, dt);
        let (tm, t1) = (t0 + 0.5 * h, t0 + h);
        let eta = self.eta;
        let d0 = state.sigma - eta;
        let p_half = self.attraction_propagator(t0, tm);
        let p_full = self.attraction_propagator(t0, t1);
        let p_late = self.attraction_propagator(tm, t1);

        let a1 = self.avoidance(field, t0, &state.sigma, &mut events);
        let s2 = eta + (d0 + a1 * (0.5 * h)) * p_half;
        let a2 = self.avoidance(field, tm, &s2, &mut events);
        let s3 = eta + d0 * p_half + a2 * (0.5 * h);
        let a3 = self.avoidance(field, tm, &s3, &mut events);
        let s4 = eta + d0 * p_full + a3 * (h * p_late);
        let a4 = self.avoidance(field, t1, &s4, &mut events);
        let sigma = eta + d0 * p_full + (a1 * p_full + (a2 + a3) * (2.0 * p_late) + a4) * (h / 6.0);

        let mut lo = f64::INFINITY;
        let mut acc = 0.0;
        let nu = self.cfg.nu;
        for o in field.sensed(t1, &sigma) {
            if o.gap <= self.cfg.rho_min {
                events.push(TubeEvent::MarginBreach { id: o.id, gap: o.gap });
            }
            if o.gap < lo {
                acc = acc * (-nu * (lo - o.gap)).exp() + 1.0;
                lo = o.gap;
            } else {
                acc += (-nu * (o.gap - lo)).exp();
            }
        }
        let d = if acc == 0.0 { f64::INFINITY } else { lo - acc.ln() / nu };
        let rho = radius_from_distance(d, self.cfg.rho_max, nu);
        TubeStep { state: TubeState { t: t1, sigma, rho }, distance: d, events }
    }

    /// Center of the obstacle-free solution, `η + (s−η)((t_c−t)/t_c)^{k1 t_c}`.
    pub fn analytic_center(&self, t: f64) -> Vector {
        let a = self.cfg.k1 * self.t_c;
        self.eta + (self.start - self.eta) * (a * ((self.t_c - t) / self.t_c).ln()).exp()
    }
}
