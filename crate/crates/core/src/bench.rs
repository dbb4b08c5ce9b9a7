//! Randomized benchmark environments and aggregate evaluation.
//!
//! A trial is a reach-avoid task across a square (cubic) workspace, populated
//! with ball obstacles that move at constant speed and reflect off the
//! workspace walls. Environments depend only on `(seed, n_o, trial)`, so the
//! nominal and disturbed runs of a trial face the same obstacles.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::FunnelParams;
use crate::scenario::{
    BallFile, ControllerFile, DisturbanceFile, GainFile, MotionFile, ObstacleFile, PlantFile, Scenario, ScenarioFile,
    TubeFile, WorkspaceFile,
};
use crate::sim::{audit, compute_metrics, mean_sd, radius_ode_residual, AuditLimits, Episode, Metrics, Status};
use crate::{Dims, Error, Result, Vector};

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleCount {
    /// One group per listed count.
    Counts(Vec<usize>),
    /// A single group; each trial draws its count uniformly from `[lo, hi]`.
    Range([usize; 2]),
}

fn no_disturbance() -> Vec<f64> {
    vec![0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dims: Dims,
    pub trials: usize,
    pub obstacles: ObstacleCount,
    /// Obstacle speed range (m/s).
    pub speed: [f64; 2],
    /// Obstacle radius range (m).
    pub radius: [f64; 2],
    /// Disturbance bounds; each one becomes its own group.
    #[serde(default = "no_disturbance")]
    pub disturbance: Vec<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workspace: Option<WorkspaceFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensing_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tube: Option<TubeFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantFile>,
}

/// Tube gains used by generated scenarios unless the spec overrides them.
pub fn default_bench_tube() -> TubeFile {
    TubeFile {
        rho_min: 0.1,
        rho_max: 0.9,
        nu: 8.0,
        k1: 0.3,
        k2: GainFile::Scalar(0.1),
        k3: GainFile::Scalar(1.0),
        eps_sing: None,
        t_end_guard: None,
    }
}

pub fn default_bench_controller(dims: Dims) -> ControllerFile {
    match dims {
        Dims::Two => ControllerFile { kappa: Some(vec![50.0]), funnels: None, eps_err: None },
        Dims::Three => ControllerFile {
            kappa: Some(vec![10.0, 2.0]),
            funnels: Some(vec![vec![FunnelParams { p: 2.0, q: 0.5, mu: 0.5 }; 3]]),
            eps_err: None,
        },
    }
}

pub fn default_bench_plant(dims: Dims) -> PlantFile {
    let model = match dims {
        Dims::Two => "omni2d",
        Dims::Three => "quad3d",
    };
    PlantFile { model: model.into(), params: serde_json::Value::Null, initial: None }
}

impl BenchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        let ordered = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ordered(self.speed) || !ordered(self.radius) {
            return Err(Error::Config("speed and radius ranges need 0 <= lo <= hi".into()));
        }
        match &self.obstacles {
            ObstacleCount::Counts(c) if c.is_empty() => return Err(Error::Config("obstacle counts are empty".into())),
            ObstacleCount::Range([lo, hi]) if lo > hi => return Err(Error::Config("obstacle range needs lo <= hi".into())),
            _ => {}
        }
        if self.disturbance.is_empty() || self.disturbance.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::Config("disturbance bounds must be nonnegative".into()));
        }
        Ok(())
    }

    fn workspace(&self) -> WorkspaceFile {
        self.workspace.clone().unwrap_or_else(|| {
            let n = self.dims.n();
            WorkspaceFile { min: vec![0.0; n], max: vec![9.0; n] }
        })
    }

    fn horizon(&self) -> f64 {
        self.t_c.unwrap_or(match self.dims {
            Dims::Two => 18.0,
            Dims::Three => 16.0,
        })
    }

    /// Obstacle-count groups: `(label count, range)`.
    fn count_groups(&self) -> Vec<(Option<usize>, [usize; 2])> {
        match &self.obstacles {
            ObstacleCount::Counts(c) => c.iter().map(|&n| (Some(n), [n, n])).collect(),
            ObstacleCount::Range(r) => vec![(None, *r)],
        }
    }
}

fn trial_rng(seed: u64, range: [usize; 2], trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((range[0] as u64) << 40) ^ ((range[1] as u64) << 20));
    rng.set_stream(trial as u64);
    rng
}

fn random_direction(rng: &mut ChaCha8Rng, dims: Dims) -> Vector {
    match dims {
        Dims::Two => {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            Vector::new(a.cos(), a.sin(), 0.0)
        }
        Dims::Three => {
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - z * z).sqrt();
            Vector::new(s * a.cos(), s * a.sin(), z)
        }
    }
}

/// Builds trial `trial` of a group with obstacle counts drawn from `range`.
/// Returns `None` when some obstacle could not be placed.
pub fn generate_scenario(spec: &BenchSpec, range: [usize; 2], trial: usize, disturbance: f64) -> Result<Option<ScenarioFile>> {
    let dims = spec.dims;
    let n = dims.n();
    let mut rng = trial_rng(spec.seed, range, trial);
    let n_o = rng.gen_range(range[0]..=range[1]);
    let ws = spec.workspace();
    let (lo, hi) = (dims.vector(&ws.min)?, dims.vector(&ws.max)?);
    let (d_s, d_t) = (1.0, 1.0);
    let mut start_c = Vector::zeros();
    let mut target_c = Vector::zeros();
    for i in 0..n {
        start_c[i] = lo[i] + d_s;
        target_c[i] = hi[i] - d_t;
    }
    let tube = spec.tube.clone().unwrap_or_else(default_bench_tube);
    let t_c = spec.horizon();
    let start_clear = d_s.max(tube.rho_min + tube.rho_max) + tube.rho_min;
    // Obstacles sensed near η at t_c pull the smoothed radius below ρ_max, so keep them out of range.
    let sensing = spec.sensing_radius.unwrap_or_else(|| crate::scenario::default_sensing_radius(tube.rho_max, tube.nu));
    let target_clear = d_t.max(tube.rho_max).max(sensing) + tube.rho_min;

    let mut obstacles = Vec::with_capacity(n_o);
    for id in 0..n_o {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = rng.gen_range(spec.radius[0]..=spec.radius[1]);
            let speed = rng.gen_range(spec.speed[0]..=spec.speed[1]);
            let dir = random_direction(&mut rng, dims);
            let mut c = Vector::zeros();
            let mut bmin = Vector::zeros();
            let mut bmax = Vector::zeros();
            for i in 0..n {
                bmin[i] = lo[i] + r;
                bmax[i] = hi[i] - r;
                c[i] = rng.gen_range(bmin[i]..=bmax[i]);
            }
            let motion = crate::env::Motion::Bouncing { start: c, velocity: dir * speed, min: bmin, max: bmax };
            let at_tc = motion.position(t_c);
            if (c - start_c).norm() - r >= start_clear && (at_tc - target_c).norm() - r >= target_clear {
                placed = Some((r, c, dir * speed, bmin, bmax));
                break;
            }
        }
        let Some((r, c, v, bmin, bmax)) = placed else { return Ok(None) };
        obstacles.push(ObstacleFile {
            id: id as u32,
            motion: MotionFile::Bouncing {
                start: dims.truncate(&c),
                velocity: dims.truncate(&v),
                min: dims.truncate(&bmin),
                max: dims.truncate(&bmax),
            },
            radius: Some(r),
            radius_profile: None,
        });
    }
    let file = ScenarioFile {
        name: Some(format!("{}-n{}-t{}", spec.name.as_deref().unwrap_or("bench"), n_o, trial)),
        dims,
        start: BallFile { center: dims.truncate(&start_c), radius: d_s },
        target: BallFile { center: dims.truncate(&target_c), radius: d_t },
        t_c,
        workspace: ws,
        obstacles,
        sensing_radius: spec.sensing_radius,
        tube,
        controller: spec.controller.clone().unwrap_or_else(|| default_bench_controller(dims)),
        plant: spec.plant.clone().unwrap_or_else(|| default_bench_plant(dims)),
        disturbance: DisturbanceFile { bound: disturbance },
        dt: spec.dt.unwrap_or(crate::scenario::DEFAULT_DT),
        seed: spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(trial as u64),
    };
    Ok(Some(file))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Infeasible,
    Run(Status),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub passed: bool,
    pub containment: usize,
    pub disjointness: usize,
    pub radius_bounds: usize,
    pub continuity: usize,
    pub funnel: usize,
    pub clamp_events: usize,
    pub max_e1: f64,
    pub min_tube_gap: Option<f64>,
    pub rho_ode_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub n_obstacles: usize,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditSummary>,
    /// `‖σ(t_c) − η‖`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_final_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_final: Option<f64>,
}

impl TrialResult {
    pub fn success(&self) -> bool {
        self.status == TrialStatus::Run(Status::Success)
    }
}

/// Runs one generated scenario to completion and condenses its log.
pub fn run_trial(file: ScenarioFile, trial: usize, timing: bool) -> Result<TrialResult> {
    let n_obstacles = file.obstacles.len();
    let sc = Scenario::from_file(file)?;
    let report = sc.validate();
    if !report.ok {
        return Err(Error::Validation(format!("generated scenario failed validation: {:?}", report.violations)));
    }
    let log = Episode::new(&sc)?.run();
    let mut metrics = compute_metrics(&log);
    if !timing {
        metrics.compute_time_mean_ms = 0.0;
        metrics.compute_time_sd_ms = 0.0;
        metrics.total_stt_time_s = 0.0;
    }
    let rep = audit(&log.rows, log.dt, &AuditLimits::for_scenario(&sc));
    let last = log.rows.last().expect("episode has rows");
    Ok(TrialResult {
        trial,
        n_obstacles,
        status: TrialStatus::Run(log.status),
        metrics: Some(metrics),
        audit: Some(AuditSummary {
            passed: rep.passed(),
            containment: rep.containment,
            disjointness: rep.disjointness,
            radius_bounds: rep.radius_bounds,
            continuity: rep.continuity,
            funnel: rep.funnel,
            clamp_events: rep.clamp_events,
            max_e1: rep.max_e1,
            min_tube_gap: rep.min_tube_gap.is_finite().then_some(rep.min_tube_gap),
            rho_ode_residual: radius_ode_residual(&log.rows, sc.tube.rho_max, sc.tube.nu),
        }),
        sigma_final_error: Some((last.sigma_vec() - sc.task.target.center).norm()),
        rho_final: Some(last.rho),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    fn of(xs: &[f64]) -> Self {
        let (mean, sd) = mean_sd(xs);
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub attempted: usize,
    pub infeasible: usize,
    pub successes: usize,
    /// `successes / (attempted − infeasible)`.
    pub success_rate: f64,
    pub statuses: BTreeMap<String, usize>,
    pub audits_passed: usize,
    pub path_length: Stat,
    pub smoothness: Stat,
    pub min_clearance: Stat,
    /// Smallest clearance over all run trials.
    pub worst_clearance: Option<f64>,
    pub compute_time_ms: Stat,
    pub total_stt_time_s: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_obstacles: Option<usize>,
    pub n_range: [usize; 2],
    pub disturbance: f64,
    pub summary: GroupSummary,
    pub trials: Vec<TrialResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub spec: BenchSpec,
    pub groups: Vec<GroupReport>,
}

fn summarize(trials: &[TrialResult]) -> GroupSummary {
    let mut s = GroupSummary { attempted: trials.len(), ..Default::default() };
    let run: Vec<&Metrics> = trials.iter().filter_map(|t| t.metrics.as_ref()).collect();
    for t in trials {
        let key = match t.status {
            TrialStatus::Infeasible => "Infeasible".to_string(),
            TrialStatus::Run(st) => format!("{st:?}"),
        };
        *s.statuses.entry(key).or_default() += 1;
        if t.status == TrialStatus::Infeasible {
            s.infeasible += 1;
        }
        if t.success() {
            s.successes += 1;
        }
        if t.audit.as_ref().is_some_and(|a| a.passed) {
            s.audits_passed += 1;
        }
    }
    let denom = s.attempted - s.infeasible;
    s.success_rate = if denom == 0 { 0.0 } else { s.successes as f64 / denom as f64 };
    let col = |f: fn(&Metrics) -> f64| run.iter().map(|m| f(m)).collect::<Vec<_>>();
    s.path_length = Stat::of(&col(|m| m.path_length));
    s.smoothness = Stat::of(&col(|m| m.smoothness));
    let clear: Vec<f64> = run.iter().filter_map(|m| m.min_clearance).collect();
    s.min_clearance = Stat::of(&clear);
    s.worst_clearance = clear.iter().copied().reduce(f64::min);
    s.compute_time_ms = Stat::of(&col(|m| m.compute_time_mean_ms));
    s.total_stt_time_s = Stat::of(&col(|m| m.total_stt_time_s));
    s
}

/// Runs every trial of every group on a pool of `workers` threads. Trial
/// failures are recorded, never fatal; only configuration errors abort.
pub fn run_bench(spec: &BenchSpec, workers: usize, timing: bool) -> Result<BenchReport> {
    spec.check()?;
    let mut jobs = Vec::new();
    for (g, (label, range)) in spec.count_groups().into_iter().enumerate() {
        for (b, &bound) in spec.disturbance.iter().enumerate() {
            for trial in 0..spec.trials {
                jobs.push((g, b, label, range, bound, trial));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrialResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(_, _, _, range, bound, trial)| match generate_scenario(spec, range, trial, bound)? {
                Some(file) => run_trial(file, trial, timing),
                None => Ok(TrialResult {
                    trial,
                    n_obstacles: trial_rng(spec.seed, range, trial).gen_range(range[0]..=range[1]),
                    status: TrialStatus::Infeasible,
                    metrics: None,
                    audit: None,
                    sigma_final_error: None,
                    rho_final: None,
                }),
            })
            .collect()
    });
    let mut groups: Vec<GroupReport> = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        let &(g, b, label, range, bound, _) = job;
        let idx = g * spec.disturbance.len() + b;
        if groups.len() <= idx {
            groups.push(GroupReport { n_obstacles: label, n_range: range, disturbance: bound, summary: GroupSummary::default(), trials: Vec::new() });
        }
        groups[idx].trials.push(res?);
    }
    for g in &mut groups {
        g.summary = summarize(&g.trials);
    }
    log::info!("bench {}: {} groups, {} trials", spec.name.as_deref().unwrap_or("-"), groups.len(), jobs.len());
    Ok(BenchReport { schema_version: SCHEMA_VERSION, spec: spec.clone(), groups })
}

impl BenchReport {
    /// Fixed-width summary table, one row per group.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "n_o      dist   ok/run   rate%   path(m)        smooth(1/m)    clear_min(m)  tick(ms)         total(s)\n",
        );
        for g in &self.groups {
            let s = &g.summary;
            let n = match g.n_obstacles {
                Some(n) => n.to_string(),
                None => format!("{}-{}", g.n_range[0], g.n_range[1]),
            };
            out += &format!(
                "{:<8} {:<6} {:>3}/{:<4} {:>6.1}  {:>6.2}±{:<6.2} {:>6.2}±{:<6.2} {:>12}  {:.4}±{:<8.4} {:.4}\n",
                n,
                g.disturbance,
                s.successes,
                s.attempted - s.infeasible,
                100.0 * s.success_rate,
                s.path_length.mean,
                s.path_length.sd,
                s.smoothness.mean,
                s.smoothness.sd,
                s.worst_clearance.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into()),
                s.compute_time_ms.mean,
                s.compute_time_ms.sd,
                s.total_stt_time_s.mean,
            );
        }
        out
    }
}
