//! Fixed-step closed-loop episodes: stepping, logging, audits and metrics.
//!
//! Each tick advances the tube from `t_{k−1}` to `t_k`, evaluates the
//! controller on the plant state at `t_{k−1}` against `Γ(t_k)`, holds that input
//! over the plant step, and records the state at `t_k`.

use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controller::{control, ControlEvent, ControllerConfig, StageTrace};
use crate::env::ObstacleField;
use crate::plant::{build_model, DisturbanceSampler, Plant};
use crate::scenario::{Overrides, Scenario};
use crate::tube::{radius_from_distance, Tube, TubeEvent, TubeState};
use crate::{Dims, Error, Result, Vector};

/// Containment tolerance shared by the per-tick audits.
pub const CONTAINMENT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Success,
    Collision,
    MarginBreach,
    TubeExit,
    /// No safety event fired but the output missed the target at `t_c`.
    MissedTarget,
    NumericAbort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    NearSingular { id: u32 },
    MarginBreach { id: u32, gap: f64 },
    TubeExit { e1: f64 },
    FunnelExit { stage: usize, axis: usize, e: f64 },
    Collision { id: u32, clearance: f64 },
    LeftWorkspace,
    NumericAbort { message: String },
}

impl Event {
    /// Status this event forces on the episode, if any.
    pub fn failure(&self) -> Option<Status> {
        match self {
            Event::NearSingular { .. } | Event::LeftWorkspace => None,
            Event::MarginBreach { .. } => Some(Status::MarginBreach),
            Event::TubeExit { .. } | Event::FunnelExit { .. } => Some(Status::TubeExit),
            Event::Collision { .. } => Some(Status::Collision),
            Event::NumericAbort { .. } => Some(Status::NumericAbort),
        }
    }
}

impl From<TubeEvent> for Event {
    fn from(e: TubeEvent) -> Self {
        match e {
            TubeEvent::NearSingular { id } => Event::NearSingular { id },
            TubeEvent::MarginBreach { id, gap } => Event::MarginBreach { id, gap },
        }
    }
}

impl From<ControlEvent> for Event {
    fn from(e: ControlEvent) -> Self {
        match e {
            ControlEvent::TubeExit { e1 } => Event::TubeExit { e1 },
            ControlEvent::FunnelExit { stage, axis, e } => Event::FunnelExit { stage, axis, e },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOut {
    pub r: Vec<f64>,
    pub gamma: Vec<f64>,
    pub e: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Controller internals for the evaluation that produced this row's input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOut {
    pub e1: f64,
    pub eps1: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageOut>,
}

impl TraceOut {
    fn from_trace(tr: &StageTrace, dims: Dims) -> Self {
        Self {
            e1: tr.e1,
            eps1: tr.eps1,
            stages: tr
                .stages
                .iter()
                .map(|s| StageOut {
                    r: dims.truncate(&s.r),
                    gamma: dims.truncate(&s.gamma),
                    e: dims.truncate(&s.e),
                    eps: dims.truncate(&s.eps),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensedGap {
    pub id: u32,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub sigma: Vec<f64>,
    pub rho: f64,
    /// Smooth-min distance; absent when nothing is sensed.
    pub d: Option<f64>,
    pub y: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Input held over `[t_{k−1}, t_k]`; absent on the initial row.
    pub u: Option<Vec<f64>>,
    /// `‖y − σ‖/ρ` at this row.
    pub e1: f64,
    pub trace: TraceOut,
    pub sensed: Vec<SensedGap>,
    /// `min_j ‖y − o_j‖ − ρ_o,j` over all obstacles; absent without obstacles.
    pub clearance: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
    /// Wall-clock nanoseconds spent in the tube step and control law.
    #[serde(skip)]
    pub compute_ns: u64,
}

impl StepRecord {
    pub fn sigma_vec(&self) -> Vector {
        vec3(&self.sigma)
    }

    pub fn y_vec(&self) -> Vector {
        vec3(&self.y)
    }

    pub fn min_sensed_gap(&self) -> f64 {
        self.sensed.iter().map(|s| s.gap).fold(f64::INFINITY, f64::min)
    }
}

fn vec3(c: &[f64]) -> Vector {
    let mut v = Vector::zeros();
    v.as_mut_slice()[..c.len()].copy_from_slice(c);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub name: String,
    pub dims: Dims,
    pub dt: f64,
    pub t_c: f64,
    pub target: Vec<f64>,
    pub target_radius: f64,
    pub status: Status,
    pub rows: Vec<StepRecord>,
}

impl EpisodeLog {
    /// One JSON object per row.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<StepRecord>> {
        let mut rows = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                rows.push(serde_json::from_str(&line)?);
            }
        }
        Ok(rows)
    }

    pub fn compute_ns(&self) -> impl Iterator<Item = u64> + '_ {
        self.rows.iter().skip(1).map(|r| r.compute_ns)
    }
}

/// Per-step CSV for external plotting.
pub fn write_rows_csv<W: Write>(rows: &[StepRecord], mut w: W) -> Result<()> {
    let n = rows.first().map(|r| r.y.len()).unwrap_or(2);
    let axes = ["x", "y", "z"];
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend(axes[..n].iter().map(|a| format!("sigma_{a}")));
    header.push("rho".into());
    header.extend(axes[..n].iter().map(|a| format!("y_{a}")));
    header.extend(axes[..n].iter().map(|a| format!("u_{a}")));
    header.extend(["e1", "d", "clearance", "events"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let mut cells = vec![r.k.to_string(), r.t.to_string()];
        cells.extend(r.sigma.iter().map(f64::to_string));
        cells.push(r.rho.to_string());
        cells.extend(r.y.iter().map(f64::to_string));
        match &r.u {
            Some(u) => cells.extend(u.iter().map(f64::to_string)),
            None => cells.extend(std::iter::repeat_n(String::new(), n)),
        }
        cells.push(r.e1.to_string());
        cells.push(opt(r.d));
        cells.push(opt(r.clearance));
        cells.push(r.events.len().to_string());
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Closed-loop stepper shared by the batch runner and the live session.
#[derive(Debug)]
pub struct Episode {
    pub scenario: Scenario,
    pub field: ObstacleField,
    pub tube: Tube,
    pub state: TubeState,
    pub controller: ControllerConfig,
    pub plant: Plant,
    k: usize,
    steps: usize,
    first_failure: Option<Status>,
    aborted: bool,
    outside_workspace: bool,
}

impl Episode {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let dims = scenario.task.dims;
        let field = scenario.field.clone();
        let (tube, state) = Tube::new(&scenario.task, &field, scenario.tube.clone())?;
        let model = build_model(&scenario.plant_model, &scenario.plant_params, dims)?;
        let stages = model.stages();
        let x0 = match &scenario.initial {
            Some(xs) => xs.clone(),
            None => {
                let mut xs = vec![Vector::zeros(); stages];
                xs[0] = scenario.task.start.center;
                xs
            }
        };
        let spec = &scenario.controller;
        let kappa = spec.kappa.clone().unwrap_or_else(|| vec![1.0; stages]);
        let controller = match &spec.funnels {
            Some(f) => ControllerConfig { kappa, funnels: f.clone(), eps_err: spec.eps_err },
            None if kappa.len() == stages && x0.len() == stages => {
                ControllerConfig::with_default_funnels(kappa, spec.eps_err, dims, &x0, &state)
            }
            None => ControllerConfig { kappa, funnels: Vec::new(), eps_err: spec.eps_err },
        };
        controller.check(stages, dims)?;
        let plant = Plant::new(model, x0, DisturbanceSampler::new(scenario.disturbance_bound, scenario.seed))?;
        Ok(Self {
            scenario: scenario.clone(),
            field,
            tube,
            state,
            controller,
            plant,
            k: 0,
            steps: scenario.steps(),
            first_failure: None,
            aborted: false,
            outside_workspace: false,
        })
    }

    pub fn dims(&self) -> Dims {
        self.scenario.task.dims
    }

    pub fn dt(&self) -> f64 {
        self.scenario.dt
    }

    pub fn tick(&self) -> usize {
        self.k
    }

    pub fn time(&self) -> f64 {
        self.k as f64 * self.scenario.dt
    }

    pub fn finished(&self) -> bool {
        self.aborted || self.k >= self.steps
    }

    /// Status so far; final once [`Episode::finished`] holds.
    pub fn status(&self) -> Status {
        if let Some(s) = self.first_failure {
            return s;
        }
        if self.finished() && !self.scenario.task.target.contains(&self.plant.output()) {
            return Status::MissedTarget;
        }
        Status::Success
    }

    fn record(&mut self, u: Option<Vector>, trace: &StageTrace, d: f64, mut events: Vec<Event>, compute_ns: u64) -> StepRecord {
        let dims = self.dims();
        let t = self.time();
        let y = self.plant.output();
        let s = self.state;
        let e1 = (y - s.sigma).norm() / s.rho;
        if e1 * s.rho > s.rho + CONTAINMENT_TOL && !events.iter().any(|e| matches!(e, Event::TubeExit { .. })) {
            events.push(Event::TubeExit { e1 });
        }
        let sensed = self.field.sensed(t, &s.sigma).map(|o| SensedGap { id: o.id, gap: o.gap }).collect();
        let mut clearance: Option<f64> = None;
        for o in self.field.all_at(t, &y) {
            clearance = Some(clearance.map_or(o.gap, |c| c.min(o.gap)));
            if o.gap <= 0.0 {
                events.push(Event::Collision { id: o.id, clearance: o.gap });
            }
        }
        let inside = self.scenario.task.workspace.contains_point(&y, dims);
        if !inside && !self.outside_workspace {
            events.push(Event::LeftWorkspace);
        }
        self.outside_workspace = !inside;
        for e in &events {
            if let Some(st) = e.failure() {
                if st == Status::NumericAbort {
                    self.aborted = true;
                }
                self.first_failure.get_or_insert(st);
            }
        }
        StepRecord {
            k: self.k,
            t,
            sigma: dims.truncate(&s.sigma),
            rho: s.rho,
            d: d.is_finite().then_some(d),
            y: dims.truncate(&y),
            x: self.plant.state.iter().map(|x| dims.truncate(x)).collect(),
            u: u.map(|u| dims.truncate(&u)),
            e1,
            trace: TraceOut::from_trace(trace, dims),
            sensed,
            clearance,
            events,
            compute_ns,
        }
    }

    /// Row for `t = 0`, with the controller evaluated but not applied.
    pub fn initial_record(&mut self) -> StepRecord {
        let mut cev = Vec::new();
        let (_, trace) = control(&self.plant.state, &self.state, &self.controller, self.dims(), 0.0, &mut cev);
        let d = self.tube.radius_at(&self.field, 0.0, &self.state.sigma).1;
        let events = cev.into_iter().map(Event::from).collect();
        self.record(None, &trace, d, events, 0)
    }

    /// Advances one tick. Returns `None` once the episode is finished.
    pub fn step(&mut self) -> Option<StepRecord> {
        if self.finished() {
            return None;
        }
        let dt = self.scenario.dt;
        let t_prev = self.time();
        let t = (self.k + 1) as f64 * dt;
        let dims = self.dims();

        let clock = Instant::now();
        let ts = self.tube.step(&self.state, &self.field, dt);
        let mut cev = Vec::new();
        let (u, trace) = control(&self.plant.state, &ts.state, &self.controller, dims, t, &mut cev);
        let compute_ns = clock.elapsed().as_nanos() as u64;

        let mut events: Vec<Event> = ts.events.into_iter().map(Event::from).chain(cev.into_iter().map(Event::from)).collect();
        self.state = TubeState { t, ..ts.state };
        if !(self.state.rho.is_finite() && self.state.sigma.iter().all(|c| c.is_finite()) && u.iter().all(|c| c.is_finite())) {
            events.push(Event::NumericAbort { message: format!("non-finite tube or input at t={t}") });
        } else if let Err(fault) = self.plant.step(&u, t_prev, dt) {
            events.push(Event::NumericAbort { message: fault.to_string() });
        }
        self.k += 1;
        Some(self.record(Some(u), &trace, ts.distance, events, compute_ns))
    }

    /// Runs to completion, collecting every row.
    pub fn run(mut self) -> EpisodeLog {
        let mut rows = Vec::with_capacity(self.steps + 1);
        rows.push(self.initial_record());
        while let Some(r) = self.step() {
            rows.push(r);
        }
        let task = &self.scenario.task;
        EpisodeLog {
            name: self.scenario.name.clone(),
            dims: task.dims,
            dt: self.scenario.dt,
            t_c: task.t_c,
            target: task.dims.truncate(&task.target.center),
            target_radius: task.target.radius,
            status: self.status(),
            rows,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub overrides: Overrides,
    /// Run even when validation reports violations.
    pub force: bool,
}

/// Validates (unless forced) and runs one episode.
pub fn run_episode(scenario: &Scenario, opts: RunOptions) -> Result<EpisodeLog> {
    let scenario = scenario.with_overrides(opts.overrides)?;
    if !opts.force {
        let report = scenario.validate();
        if !report.ok {
            let msgs: Vec<String> = report.violations.iter().map(|f| format!("{}: {}", f.code, f.message)).collect();
            return Err(Error::Validation(msgs.join("; ")));
        }
    }
    Ok(Episode::new(&scenario)?.run())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `+inf` serializes as null when there are no obstacles.
    pub min_clearance: Option<f64>,
    pub path_length: f64,
    pub smoothness: f64,
    pub success: bool,
    pub compute_time_mean_ms: f64,
    pub compute_time_sd_ms: f64,
    pub total_stt_time_s: f64,
    pub final_error: f64,
    pub max_e1: f64,
}

/// Arc-length resampling step for the smoothness metric.
pub const SMOOTHNESS_SPACING: f64 = 0.05;
pub const MAX_SMOOTHNESS_SAMPLES: usize = 10_000_000;

/// Mean discrete curvature `2·angle/(|a|+|b|)` of the path resampled at
/// uniform arc length. Zero for paths too short to have an interior sample,
/// NaN for diverged paths (non-finite, or over `MAX_SMOOTHNESS_SAMPLES`).
pub fn smoothness(path: &[Vector], spacing: f64) -> f64 {
    let mut cum = Vec::with_capacity(path.len());
    let mut s = 0.0;
    cum.push(0.0);
    for w in path.windows(2) {
        s += (w[1] - w[0]).norm();
        cum.push(s);
    }
    let total = s;
    if !(total / spacing <= MAX_SMOOTHNESS_SAMPLES as f64) {
        return f64::NAN;
    }
    let count = (total / spacing + 1e-9).floor() as usize + 1;
    if count < 3 {
        return 0.0;
    }
    let mut samples = Vec::with_capacity(count);
    let mut seg = 0;
    for i in 0..count {
        let target = (i as f64 * spacing).min(total);
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let a = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        samples.push(path[seg] + (path[seg + 1] - path[seg]) * a);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for w in samples.windows(3) {
        let (a, b) = (w[1] - w[0], w[2] - w[1]);
        let (na, nb) = (a.norm(), b.norm());
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
        sum += 2.0 * cos.acos() / (na + nb);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn compute_metrics(log: &EpisodeLog) -> Metrics {
    let path: Vec<Vector> = log.rows.iter().map(StepRecord::y_vec).collect();
    let path_length = path.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let min_clearance = log.rows.iter().filter_map(|r| r.clearance).reduce(f64::min);
    let ns: Vec<f64> = log.compute_ns().map(|n| n as f64 * 1e-6).collect();
    let (mean, sd) = mean_sd(&ns);
    let last = log.rows.last().map(StepRecord::y_vec).unwrap_or_default();
    Metrics {
        min_clearance,
        path_length,
        smoothness: smoothness(&path, SMOOTHNESS_SPACING),
        success: log.status == Status::Success,
        compute_time_mean_ms: mean,
        compute_time_sd_ms: sd,
        total_stt_time_s: ns.iter().sum::<f64>() * 1e-3,
        final_error: (last - vec3(&log.target)).norm(),
        max_e1: log.rows.iter().map(|r| r.e1).fold(0.0, f64::max),
    }
}

/// Sample mean and standard deviation (`n − 1` denominator).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Bounds the per-tick audits check against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditLimits {
    pub rho_lb: f64,
    pub rho_max: f64,
    /// Upper bound on how fast any obstacle surface moves (m/s).
    pub obstacle_rate: f64,
    pub tol: f64,
}

impl AuditLimits {
    pub fn for_scenario(sc: &Scenario) -> Self {
        Self {
            rho_lb: sc.tube.rho_lower_bound(),
            rho_max: sc.tube.rho_max,
            obstacle_rate: sc.field.scripted_rate_bound(),
            tol: CONTAINMENT_TOL,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub rows: usize,
    /// `‖y − σ‖ > ρ + tol`.
    pub containment: usize,
    /// `ρ > min_j gap_j(σ)`.
    pub disjointness: usize,
    /// `ρ` outside `[ρ_lb, ρ_max]`.
    pub radius_bounds: usize,
    /// `|Δρ| > ‖Δσ‖ + obstacle_rate·dt + tol`.
    pub continuity: usize,
    /// `|x_k − r_k| ≥ γ_k` on some stage and axis.
    pub funnel: usize,
    pub clamp_events: usize,
    pub max_e1: f64,
    pub max_sigma_rate: f64,
    pub max_rho_rate: f64,
    /// Smallest `min gap(σ) − ρ` seen.
    pub min_tube_gap: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.containment == 0 && self.disjointness == 0 && self.radius_bounds == 0 && self.continuity == 0 && self.funnel == 0
    }
}

pub fn audit(rows: &[StepRecord], dt: f64, lim: &AuditLimits) -> AuditReport {
    let mut rep = AuditReport { rows: rows.len(), min_tube_gap: f64::INFINITY, ..Default::default() };
    for (i, r) in rows.iter().enumerate() {
        let (sigma, y) = (r.sigma_vec(), r.y_vec());
        if (y - sigma).norm() > r.rho + lim.tol {
            rep.containment += 1;
        }
        let gap = r.min_sensed_gap();
        rep.min_tube_gap = rep.min_tube_gap.min(gap - r.rho);
        if r.rho > gap {
            rep.disjointness += 1;
        }
        if r.rho < lim.rho_lb - 1e-12 || r.rho > lim.rho_max + 1e-12 {
            rep.radius_bounds += 1;
        }
        if r.trace.stages.iter().any(|s| s.e.iter().any(|e| e.abs() >= 1.0)) {
            rep.funnel += 1;
        }
        rep.clamp_events += r.events.iter().filter(|e| matches!(e, Event::TubeExit { .. } | Event::FunnelExit { .. })).count();
        rep.max_e1 = rep.max_e1.max(r.e1);
        if i > 0 {
            let p = &rows[i - 1];
            let ds = (sigma - p.sigma_vec()).norm();
            let dr = (r.rho - p.rho).abs();
            rep.max_sigma_rate = rep.max_sigma_rate.max(ds / dt);
            rep.max_rho_rate = rep.max_rho_rate.max(dr / dt);
            if dr > ds + lim.obstacle_rate * dt + lim.tol {
                rep.continuity += 1;
            }
        }
    }
    rep
}

/// Integrates `ρ̇ = e^{−νd} ḋ / (e^{−νρ_max} + e^{−νd})` along the logged
/// `d(t)` (linear between rows, composite Simpson per row) from the logged
/// `ρ(0)` and returns the sup-norm gap to the logged radii. Rows where nothing
/// is sensed contribute no change.
pub fn radius_ode_residual(rows: &[StepRecord], rho_max: f64, nu: f64) -> f64 {
    const PANELS: usize = 16;
    let w = |d: f64| 1.0 / (1.0 + (nu * (d - rho_max)).exp());
    let Some(first) = rows.first() else { return 0.0 };
    let mut rho = first.rho;
    let mut worst: f64 = 0.0;
    for pair in rows.windows(2) {
        if let (Some(a), Some(b)) = (pair[0].d, pair[1].d) {
            let h = (b - a) / PANELS as f64;
            let mut s = w(a) + w(b);
            for j in 1..PANELS {
                s += w(a + j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 };
            }
            rho += s * h / 3.0;
        }
        worst = worst.max((rho - pair[1].rho).abs());
    }
    worst
}

/// Closed-form radius recomputed from each row's logged `d`.
pub fn closed_form_radius(row: &StepRecord, rho_max: f64, nu: f64) -> f64 {
    radius_from_distance(row.d.unwrap_or(f64::INFINITY), rho_max, nu)
}
