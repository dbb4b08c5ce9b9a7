//! Approximation-free funnel controller for pure-feedback cascades.
//!
//! Stage 1 keeps the output inside the tube through a normalized radial error;
//! every later stage keeps its state inside an exponentially shrinking funnel
//! around the reference produced by the stage before it. Nothing about the
//! plant enters the law.

use serde::Serialize;

use crate::tube::TubeState;
use crate::{Dims, Error, Result, Vector};

/// Funnel envelope `γ(t) = (p − q) e^{−μ t} + q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunnelParams {
    pub p: f64,
    pub q: f64,
    pub mu: f64,
}

impl FunnelParams {
    pub fn check(&self) -> Result<()> {
        if !(self.p > self.q && self.q > 0.0 && self.mu >= 0.0 && self.p.is_finite() && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "funnel needs p > q > 0 and mu >= 0, got p={} q={} mu={}",
                self.p, self.q, self.mu
            )));
        }
        Ok(())
    }
}

pub fn funnel_bound(t: f64, fp: &FunnelParams) -> f64 {
    (fp.p - fp.q) * (-fp.mu * t).exp() + fp.q
}

pub const DEFAULT_EPS_ERR: f64 = 1e-9;
pub const DEFAULT_FUNNEL_Q: f64 = 0.1;
pub const DEFAULT_FUNNEL_MU: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    /// `κ_1..κ_N`; its length is the stage count.
    pub kappa: Vec<f64>,
    /// Funnels of stages `2..N`, one per active axis.
    pub funnels: Vec<Vec<FunnelParams>>,
    pub eps_err: f64,
}

impl ControllerConfig {
    pub fn stages(&self) -> usize {
        self.kappa.len()
    }

    pub fn check(&self, stages: usize, dims: Dims) -> Result<()> {
        if self.kappa.len() != stages {
            return Err(Error::Config(format!("controller has {} gains for a {stages}-stage plant", self.kappa.len())));
        }
        if let Some(k) = self.kappa.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::Config(format!("kappa must be positive, got {k}")));
        }
        if self.funnels.len() != stages - 1 || self.funnels.iter().any(|f| f.len() != dims.n()) {
            return Err(Error::Config(format!(
                "funnels must have shape {}x{}",
                stages - 1,
                dims.n()
            )));
        }
        for fp in self.funnels.iter().flatten() {
            fp.check()?;
        }
        if !(self.eps_err > 0.0 && self.eps_err < 1.0) {
            return Err(Error::Config(format!("eps_err must lie in (0,1), got {}", self.eps_err)));
        }
        Ok(())
    }

    /// Fills in funnels stage by stage at `t = 0`: each stage's reference is
    /// computed with the funnels already chosen for the stages before it, then
    /// `p = 2|x − r| + 1`, `q = 0.1`, `μ = 1`.
    pub fn with_default_funnels(kappa: Vec<f64>, eps_err: f64, dims: Dims, x0: &[Vector], tube0: &TubeState) -> Self {
        let mut cfg = Self { kappa, funnels: Vec::new(), eps_err };
        let n = dims.n();
        let mut r = stage1_reference(&x0[0], tube0, cfg.kappa[0], eps_err).0;
        for k in 1..x0.len() {
            let fps: Vec<FunnelParams> = (0..n)
                .map(|i| FunnelParams {
                    p: 2.0 * (x0[k][i] - r[i]).abs() + 1.0,
                    q: DEFAULT_FUNNEL_Q,
                    mu: DEFAULT_FUNNEL_MU,
                })
                .collect();
            let gamma = gamma_vector(&fps, 0.0);
            let (_, eps, xi, _) = stagek_transform(&x0[k], &r, &gamma, n, eps_err);
            r = next_reference(&xi, &eps, cfg.kappa[k]);
            cfg.funnels.push(fps);
        }
        cfg
    }
}

/// `ln((1+e)/(1−e))`, twice the inverse hyperbolic tangent.
#[inline]
pub fn transformed_error(e: f64) -> f64 {
    (2.0 * e.abs().atanh()).copysign(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlEvent {
    /// Output reached the tube boundary; the error was clamped.
    TubeExit { e1: f64 },
    /// A stage error reached its funnel; the component was clamped.
    FunnelExit { stage: usize, axis: usize, e: f64 },
}

/// Stage-1 normalized error `e1 = ‖x1 − σ‖/ρ` and `ε1`. The second value is the
/// raw (unclamped) `e1`.
pub fn stage1_transform(x1: &Vector, tube: &TubeState, eps_err: f64) -> (f64, f64, f64) {
    let raw = (x1 - tube.sigma).norm() / tube.rho;
    let e1 = raw.min(1.0 - eps_err);
    (e1, transformed_error(e1), raw)
}

/// `r2 = −κ1 ε1 (x1 − σ)` with the error vector pulled back to the
/// `1 − eps_err` shell when outside it. Also returns `(e1, ε1, raw e1)`.
pub fn stage1_reference(x1: &Vector, tube: &TubeState, kappa1: f64, eps_err: f64) -> (Vector, f64, f64, f64) {
    let (e1, eps1, raw) = stage1_transform(x1, tube, eps_err);
    let mut diff = x1 - tube.sigma;
    if raw > e1 {
        diff *= e1 / raw;
    }
    (diff * (-kappa1 * eps1), e1, eps1, raw)
}

fn gamma_vector(fps: &[FunnelParams], t: f64) -> Vector {
    let mut g = Vector::from_element(1.0);
    for (i, fp) in fps.iter().enumerate() {
        g[i] = funnel_bound(t, fp);
    }
    g
}

/// Stage-k transforms over the first `n` axes: `(e, ε, ξ diagonal, raw e)`.
/// Components with `|e| ≥ 1 − eps_err` are clamped.
pub fn stagek_transform(x: &Vector, r: &Vector, gamma: &Vector, n: usize, eps_err: f64) -> (Vector, Vector, Vector, Vector) {
    let mut e = Vector::zeros();
    let mut eps = Vector::zeros();
    let mut xi = Vector::zeros();
    let mut raw = Vector::zeros();
    let lim = 1.0 - eps_err;
    for i in 0..n {
        raw[i] = (x[i] - r[i]) / gamma[i];
        e[i] = raw[i].clamp(-lim, lim);
        eps[i] = transformed_error(e[i]);
        xi[i] = 4.0 / (gamma[i] * (1.0 - e[i] * e[i]));
    }
    (e, eps, xi, raw)
}

#[inline]
fn next_reference(xi: &Vector, eps: &Vector, kappa: f64) -> Vector {
    xi.component_mul(eps) * -kappa
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRecord {
    /// Reference `r_k` this stage tracks.
    pub r: Vector,
    pub gamma: Vector,
    /// Unclamped normalized error.
    pub e: Vector,
    pub eps: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageTrace {
    /// Unclamped `‖x1 − σ‖/ρ`.
    pub e1: f64,
    pub eps1: f64,
    /// Stages `2..N`.
    pub stages: Vec<StageRecord>,
}

/// Evaluates the control law. Reads only the stacked state, the tube, the
/// configured gains and funnels, and the clock.
pub fn control(
    x_stack: &[Vector],
    tube: &TubeState,
    cfg: &ControllerConfig,
    dims: Dims,
    t: f64,
    events: &mut Vec<ControlEvent>,
) -> (Vector, StageTrace) {
    let n = dims.n();
    let (mut r, e1c, eps1, raw1) = stage1_reference(&x_stack[0], tube, cfg.kappa[0], cfg.eps_err);
    if raw1 > e1c {
        events.push(ControlEvent::TubeExit { e1: raw1 });
    }
    let mut stages = Vec::with_capacity(x_stack.len().saturating_sub(1));
    for k in 1..x_stack.len() {
        let gamma = gamma_vector(&cfg.funnels[k - 1], t);
        let (e, eps, xi, raw) = stagek_transform(&x_stack[k], &r, &gamma, n, cfg.eps_err);
        for i in 0..n {
            if raw[i] != e[i] {
                events.push(ControlEvent::FunnelExit { stage: k + 1, axis: i, e: raw[i] });
            }
        }
        let next = next_reference(&xi, &eps, cfg.kappa[k]);
        stages.push(StageRecord { r, gamma, e: raw, eps });
        r = next;
    }
    (r, StageTrace { e1: raw1, eps1, stages })
}
