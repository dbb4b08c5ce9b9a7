//! The live session as a synchronous state machine. The server paces it
//! against the wall clock; tests and script replay drive it directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use stt_core::scenario::{bundled_scenario, Scenario, ScenarioFile};
use stt_core::sim::{audit, AuditLimits, AuditReport, Episode, EpisodeLog, Status, StepRecord};
use stt_core::tube::{Gains, TubeConfig};
use stt_core::Vector;
use thiserror::Error;

pub const DEFAULT_MAX_DRAG_SPEED: f64 = 2.0;

/// Parameter paths accepted by [`Command::SetParam`].
pub const PARAM_WHITELIST: &[&str] = &[
    "tube.k1",
    "tube.k2",
    "tube.k3",
    "tube.nu",
    "tube.rho_min",
    "tube.rho_max",
    "controller.kappa",
    "disturbance.bound",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionConfig {
    /// Fastest a dragged obstacle center may move (m/s).
    pub max_drag_speed: f64,
    /// Start (and reset into) scenarios that fail validation.
    pub force: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { max_drag_speed: DEFAULT_MAX_DRAG_SPEED, force: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    /// Move obstacle `id` toward `position`, rate-limited per tick.
    DragObstacle { id: u32, position: Vec<f64> },
    SetParam { path: String, value: serde_json::Value },
    Pause,
    Resume,
    /// Restart from a bundled scenario, or from the current base when `None`.
    Reset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scenario: Option<String>,
    },
}

/// An accepted command stamped with its sender and the tick it arrived in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientCommand {
    pub client: u64,
    pub tick: usize,
    pub command: Command,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum Rejection {
    #[error("no obstacle with id {0}")]
    UnknownObstacle(u32),
    #[error("position must be {dims} finite coordinates inside the workspace")]
    BadPosition { dims: usize },
    #[error("`{0}` is not a settable parameter")]
    NotWhitelisted(String),
    #[error("invalid value for `{path}`: {reason}")]
    BadValue { path: String, reason: String },
    #[error("unknown bundled scenario `{0}`")]
    UnknownScenario(String),
    #[error("scenario rejected: {0}")]
    Scenario(String),
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::UnknownObstacle(_) => "unknown_obstacle",
            Rejection::BadPosition { .. } => "bad_position",
            Rejection::NotWhitelisted(_) => "not_whitelisted",
            Rejection::BadValue { .. } => "bad_value",
            Rejection::UnknownScenario(_) => "unknown_scenario",
            Rejection::Scenario(_) => "scenario_rejected",
        }
    }
}

/// Checked form of a command, applied at the next tick boundary.
#[derive(Debug)]
enum Action {
    Drag(u32, Vector),
    Tube(TubeConfig),
    Kappa(Vec<f64>),
    Disturbance(f64),
    Pause,
    Resume,
    Reset(Box<Scenario>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LiveMetrics {
    pub path_length: f64,
    pub min_clearance: Option<f64>,
    pub max_e1: f64,
    /// Tube and controller time of the latest tick (µs).
    pub compute_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleView {
    pub id: u32,
    pub center: Vec<f64>,
    pub radius: f64,
    /// Position comes from a drag rather than the scripted motion.
    pub dragged: bool,
}

/// State of one tick as streamed to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub scenario: String,
    pub tick: usize,
    pub t: f64,
    pub sigma: Vec<f64>,
    pub rho: f64,
    pub y: Vec<f64>,
    pub obstacles: Vec<ObstacleView>,
    pub status: Status,
    pub paused: bool,
    pub finished: bool,
    pub metrics: LiveMetrics,
    /// Obstacles whose drag hit the rate limit since the previous snapshot.
    pub clamped_drags: Vec<u32>,
}

/// Static description of the running scenario, sent on connect and reset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub scenario: String,
    pub dims: usize,
    pub dt: f64,
    pub t_c: f64,
    pub workspace_min: Vec<f64>,
    pub workspace_max: Vec<f64>,
    pub start: Vec<f64>,
    pub start_radius: f64,
    pub target: Vec<f64>,
    pub target_radius: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub max_drag_speed: f64,
    pub params: Vec<String>,
}

/// A base scenario plus every accepted command, enough to reproduce a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandScript {
    pub scenario: ScenarioFile,
    pub commands: Vec<ClientCommand>,
}

pub struct Session {
    cfg: SessionConfig,
    base: Scenario,
    episode: Episode,
    rows: Vec<StepRecord>,
    pending: Vec<(ClientCommand, Action)>,
    applied: Vec<ClientCommand>,
    staged_tube: TubeConfig,
    drags: BTreeMap<u32, Vector>,
    clamped: Vec<u32>,
    dragged_any: bool,
    paused: bool,
    seq: u64,
    generation: u64,
    revision: u64,
    metrics: LiveMetrics,
}

impl Session {
    pub fn new(scenario: Scenario, cfg: SessionConfig) -> stt_core::Result<Self> {
        let episode = start_episode(&scenario, cfg.force)?;
        let mut s = Self {
            cfg,
            staged_tube: scenario.tube.clone(),
            base: scenario,
            episode,
            rows: Vec::new(),
            pending: Vec::new(),
            applied: Vec::new(),
            drags: BTreeMap::new(),
            clamped: Vec::new(),
            dragged_any: false,
            paused: false,
            seq: 0,
            generation: 0,
            revision: 0,
            metrics: LiveMetrics::default(),
        };
        s.push_initial();
        Ok(s)
    }

    fn push_initial(&mut self) {
        let row = self.episode.initial_record();
        self.metrics = LiveMetrics { max_e1: row.e1, min_clearance: row.clearance, ..Default::default() };
        self.rows = vec![row];
    }

    pub fn tick(&self) -> usize {
        self.episode.tick()
    }

    pub fn time(&self) -> f64 {
        self.episode.time()
    }

    pub fn dt(&self) -> f64 {
        self.episode.dt()
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn finished(&self) -> bool {
        self.episode.finished()
    }

    /// Whether the next [`Session::step`] would advance time.
    pub fn running(&self) -> bool {
        !self.paused && !self.finished()
    }

    /// Incremented by every reset.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Incremented whenever the state a snapshot shows may have changed.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn rows(&self) -> &[StepRecord] {
        &self.rows
    }

    pub fn scenario(&self) -> &Scenario {
        &self.episode.scenario
    }

    /// Checks a command and queues it for the next tick boundary.
    pub fn submit(&mut self, client: u64, command: Command) -> Result<ClientCommand, Rejection> {
        let action = self.check(&command)?;
        if let Action::Tube(cfg) = &action {
            self.staged_tube = cfg.clone();
        }
        let stamped = ClientCommand { client, tick: self.tick(), command };
        self.pending.push((stamped.clone(), action));
        Ok(stamped)
    }

    fn check(&self, command: &Command) -> Result<Action, Rejection> {
        let sc = &self.episode.scenario;
        let dims = sc.task.dims;
        match command {
            Command::DragObstacle { id, position } => {
                if !self.episode.field.obstacles.iter().any(|o| o.id == *id) {
                    return Err(Rejection::UnknownObstacle(*id));
                }
                let bad = Rejection::BadPosition { dims: dims.n() };
                if position.iter().any(|c| !c.is_finite()) {
                    return Err(bad);
                }
                let p = dims.vector(position).map_err(|_| bad.clone())?;
                if !sc.task.workspace.contains_point(&p, dims) {
                    return Err(bad);
                }
                Ok(Action::Drag(*id, p))
            }
            Command::SetParam { path, value } => self.check_param(path, value),
            Command::Pause => Ok(Action::Pause),
            Command::Resume => Ok(Action::Resume),
            Command::Reset { scenario } => {
                let next = match scenario {
                    None => self.base.clone(),
                    Some(name) => {
                        let text = bundled_scenario(name).ok_or_else(|| Rejection::UnknownScenario(name.clone()))?;
                        Scenario::from_json(text).map_err(|e| Rejection::Scenario(e.to_string()))?
                    }
                };
                start_episode(&next, self.cfg.force).map_err(|e| Rejection::Scenario(e.to_string()))?;
                Ok(Action::Reset(Box::new(next)))
            }
        }
    }

    fn check_param(&self, path: &str, value: &serde_json::Value) -> Result<Action, Rejection> {
        let bad = |reason: String| Rejection::BadValue { path: path.to_string(), reason };
        let number = || value.as_f64().filter(|v| v.is_finite()).ok_or_else(|| bad("expected a finite number".into()));
        match path {
            "tube.k1" | "tube.k2" | "tube.k3" | "tube.nu" | "tube.rho_min" | "tube.rho_max" => {
                let v = number()?;
                let mut cfg = self.staged_tube.clone();
                match path {
                    "tube.k1" => cfg.k1 = v,
                    "tube.k2" => cfg.k2 = Gains::Uniform(v),
                    "tube.k3" => cfg.k3 = Gains::Uniform(v),
                    "tube.nu" => cfg.nu = v,
                    "tube.rho_min" => cfg.rho_min = v,
                    _ => cfg.rho_max = v,
                }
                let mut problems = cfg.problems();
                let t_c = self.episode.scenario.task.t_c;
                if cfg.k1 * t_c <= 1.0 {
                    problems.push(format!("k1·t_c = {} must exceed 1", cfg.k1 * t_c));
                }
                let sensing = self.episode.field.sensing_radius;
                if cfg.rho_max >= sensing {
                    problems.push(format!("rho_max must stay below the sensing radius {sensing}"));
                }
                if problems.is_empty() {
                    Ok(Action::Tube(cfg))
                } else {
                    Err(bad(problems.join("; ")))
                }
            }
            "controller.kappa" => {
                let stages = self.episode.controller.stages();
                let vals: Vec<f64> = match value {
                    serde_json::Value::Array(xs) => xs.iter().map(|x| x.as_f64().unwrap_or(f64::NAN)).collect(),
                    _ => vec![number()?; stages],
                };
                if vals.len() != stages {
                    return Err(bad(format!("expected {stages} gains, got {}", vals.len())));
                }
                if vals.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
                    return Err(bad("gains must be positive and finite".into()));
                }
                Ok(Action::Kappa(vals))
            }
            "disturbance.bound" => {
                let v = number()?;
                if v < 0.0 {
                    return Err(bad("bound must be nonnegative".into()));
                }
                Ok(Action::Disturbance(v))
            }
            _ => Err(Rejection::NotWhitelisted(path.to_string())),
        }
    }

    fn apply_pending(&mut self) {
        for (cmd, action) in std::mem::take(&mut self.pending) {
            self.revision += 1;
            match action {
                Action::Drag(id, p) => {
                    self.drags.insert(id, p);
                    self.dragged_any = true;
                }
                Action::Tube(cfg) => {
                    self.episode.tube.cfg = cfg.clone();
                    self.episode.scenario.tube = cfg;
                }
                Action::Kappa(k) => self.episode.controller.kappa = k,
                Action::Disturbance(b) => {
                    self.episode.plant.sampler.bound = b;
                    self.episode.scenario.disturbance_bound = b;
                }
                Action::Pause => self.paused = true,
                Action::Resume => self.paused = false,
                Action::Reset(next) => {
                    self.reset(*next);
                    continue;
                }
            }
            self.applied.push(cmd);
        }
    }

    fn reset(&mut self, next: Scenario) {
        self.episode = start_episode(&next, self.cfg.force).expect("scenario was checked on submit");
        self.staged_tube = next.tube.clone();
        self.base = next;
        self.applied.clear();
        self.drags.clear();
        self.clamped.clear();
        self.dragged_any = false;
        self.paused = false;
        self.generation += 1;
        self.push_initial();
    }

    fn advance_drags(&mut self) {
        let t = self.episode.time();
        let limit = self.cfg.max_drag_speed * self.episode.dt();
        let mut done = Vec::new();
        for (&id, target) in &self.drags {
            let Some(ob) = self.episode.field.by_id_mut(id) else { continue };
            let cur = ob.center(t);
            let delta = target - cur;
            let dist = delta.norm();
            let next = if dist > limit {
                if !self.clamped.contains(&id) {
                    self.clamped.push(id);
                }
                cur + delta * (limit / dist)
            } else {
                done.push(id);
                *target
            };
            ob.live_override = Some(next);
        }
        for id in done {
            self.drags.remove(&id);
        }
    }

    /// Applies queued commands, then advances one tick unless paused or
    /// finished. Returns whether time advanced.
    pub fn step(&mut self) -> bool {
        self.apply_pending();
        if !self.running() {
            return false;
        }
        self.advance_drags();
        let Some(row) = self.episode.step() else { return false };
        let prev = self.rows.last().expect("initial row");
        let m = &mut self.metrics;
        m.path_length += (row.y_vec() - prev.y_vec()).norm();
        if let Some(c) = row.clearance {
            m.min_clearance = Some(m.min_clearance.map_or(c, |v| v.min(c)));
        }
        m.max_e1 = m.max_e1.max(row.e1);
        m.compute_us = row.compute_ns as f64 * 1e-3;
        self.rows.push(row);
        self.revision += 1;
        true
    }

    pub fn snapshot(&mut self) -> Snapshot {
        self.seq += 1;
        let row = self.rows.last().expect("initial row");
        let t = self.episode.time();
        let dims = self.episode.dims();
        let obstacles = self
            .episode
            .field
            .obstacles
            .iter()
            .map(|o| ObstacleView {
                id: o.id,
                center: dims.truncate(&o.center(t)),
                radius: o.radius_at(t),
                dragged: !o.is_scripted(),
            })
            .collect();
        Snapshot {
            seq: self.seq,
            scenario: self.episode.scenario.name.clone(),
            tick: self.tick(),
            t,
            sigma: row.sigma.clone(),
            rho: row.rho,
            y: row.y.clone(),
            obstacles,
            status: self.episode.status(),
            paused: self.paused,
            finished: self.finished(),
            metrics: self.metrics,
            clamped_drags: std::mem::take(&mut self.clamped),
        }
    }

    /// One [`Session::step`] followed by a snapshot.
    pub fn tick_snapshot(&mut self) -> Snapshot {
        self.step();
        self.snapshot()
    }

    pub fn info(&self) -> SessionInfo {
        let sc = &self.episode.scenario;
        let (dims, task) = (sc.task.dims, &sc.task);
        SessionInfo {
            scenario: sc.name.clone(),
            dims: dims.n(),
            dt: sc.dt,
            t_c: task.t_c,
            workspace_min: dims.truncate(&task.workspace.min),
            workspace_max: dims.truncate(&task.workspace.max),
            start: dims.truncate(&task.start.center),
            start_radius: task.start.radius,
            target: dims.truncate(&task.target.center),
            target_radius: task.target.radius,
            rho_min: sc.tube.rho_min,
            rho_max: sc.tube.rho_max,
            max_drag_speed: self.cfg.max_drag_speed,
            params: PARAM_WHITELIST.iter().map(|p| p.to_string()).collect(),
        }
    }

    /// Log of the current episode, in the batch runner's format.
    pub fn log(&self) -> EpisodeLog {
        let sc = &self.episode.scenario;
        let task = &sc.task;
        EpisodeLog {
            name: sc.name.clone(),
            dims: task.dims,
            dt: sc.dt,
            t_c: task.t_c,
            target: task.dims.truncate(&task.target.center),
            target_radius: task.target.radius,
            status: self.episode.status(),
            rows: self.rows.clone(),
        }
    }

    /// Batch audits over the live log. Dragged obstacles may move at the
    /// drag limit, which widens the continuity allowance.
    pub fn audit(&self) -> AuditReport {
        let mut lim = AuditLimits::for_scenario(&self.episode.scenario);
        if self.dragged_any {
            lim.obstacle_rate = lim.obstacle_rate.max(self.cfg.max_drag_speed);
        }
        audit(&self.rows, self.episode.dt(), &lim)
    }

    pub fn script(&self) -> CommandScript {
        CommandScript { scenario: self.base.source.clone(), commands: self.applied.clone() }
    }
}

fn start_episode(scenario: &Scenario, force: bool) -> stt_core::Result<Episode> {
    if !force {
        let report = scenario.validate();
        if !report.ok {
            let msgs: Vec<String> = report.violations.iter().map(|f| format!("{}: {}", f.code, f.message)).collect();
            return Err(stt_core::Error::Validation(msgs.join("; ")));
        }
    }
    Episode::new(scenario)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Scenario(#[from] stt_core::Error),
    #[error("command {index} rejected on replay: {rejection}")]
    Rejected { index: usize, rejection: Rejection },
}

/// Runs a recorded script headlessly and returns the resulting log. Each
/// command is submitted in the tick it was originally received.
pub fn replay(script: &CommandScript, cfg: SessionConfig) -> Result<EpisodeLog, ReplayError> {
    let mut session = Session::new(Scenario::from_file(script.scenario.clone())?, cfg)?;
    let mut commands: Vec<(usize, &ClientCommand)> = script.commands.iter().enumerate().collect();
    commands.sort_by_key(|(_, c)| c.tick);
    let mut next = commands.into_iter().peekable();
    loop {
        while let Some((index, c)) = next.next_if(|(_, c)| c.tick <= session.tick()) {
            session.submit(c.client, c.command.clone()).map_err(|rejection| ReplayError::Rejected { index, rejection })?;
        }
        if !session.step() && next.peek().is_none_or(|(_, c)| c.tick > session.tick()) {
            break;
        }
    }
    Ok(session.log())
}
