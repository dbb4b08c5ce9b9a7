//! Simulated pure-feedback plants `ẋ_k = f_k(x̄_k) + g_k(x̄_k) x_{k+1} + w_k`,
//! `x_{N+1} = u`, `y = x_1`.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::{Dims, Error, Result, Vector};

/// Stage dynamics. `xs` holds `x_1..x_k` (at least); only the first `n` axes
/// are active.
pub trait Dynamics: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn stages(&self) -> usize;
    fn dims(&self) -> Dims;
    fn drift(&self, k: usize, xs: &[Vector]) -> Vector;
    fn gain(&self, k: usize, xs: &[Vector]) -> Matrix3<f64>;
}

/// Holonomic kinematics `ẋ = u + w` in the plane.
#[derive(Clone, Debug)]
pub struct Omni2d;

impl Dynamics for Omni2d {
    fn name(&self) -> &'static str {
        "omni2d"
    }
    fn stages(&self) -> usize {
        1
    }
    fn dims(&self) -> Dims {
        Dims::Two
    }
    fn drift(&self, _k: usize, _xs: &[Vector]) -> Vector {
        Vector::zeros()
    }
    fn gain(&self, _k: usize, _xs: &[Vector]) -> Matrix3<f64> {
        Matrix3::identity()
    }
}

/// Position/velocity cascade with quadratic drag on the velocity stage.
#[derive(Clone, Debug)]
pub struct Quad3d {
    pub drag: f64,
}

impl Dynamics for Quad3d {
    fn name(&self) -> &'static str {
        "quad3d"
    }
    fn stages(&self) -> usize {
        2
    }
    fn dims(&self) -> Dims {
        Dims::Three
    }
    fn drift(&self, k: usize, xs: &[Vector]) -> Vector {
        if k == 0 {
            return Vector::zeros();
        }
        let v = xs[1];
        -v.component_mul(&v.abs()) * self.drag
    }
    fn gain(&self, _k: usize, _xs: &[Vector]) -> Matrix3<f64> {
        Matrix3::identity()
    }
}

/// Nonlinear pure-feedback test plant with state-dependent, non-symmetric
/// input gains. The symmetric part of every `g_k` is
/// `diag(g_diag + a sin²(x_k))`, so its smallest eigenvalue is at least
/// `g_diag`.
#[derive(Clone, Debug)]
pub struct GenPf {
    pub dims: Dims,
    pub stages: usize,
    pub g_diag: f64,
    pub a: f64,
    pub skew: f64,
    pub f_scale: f64,
}

impl Dynamics for GenPf {
    fn name(&self) -> &'static str {
        "gen_pf"
    }
    fn stages(&self) -> usize {
        self.stages
    }
    fn dims(&self) -> Dims {
        self.dims
    }
    fn drift(&self, k: usize, xs: &[Vector]) -> Vector {
        let mut f = Vector::zeros();
        for i in 0..self.dims.n() {
            f[i] = self.f_scale * (xs[k][i] + 0.5 * xs[0][i]).sin();
        }
        f
    }
    fn gain(&self, k: usize, xs: &[Vector]) -> Matrix3<f64> {
        let n = self.dims.n();
        let mut g = Matrix3::zeros();
        let tilt = self.skew * xs[k][0].cos();
        for i in 0..n {
            g[(i, i)] = self.g_diag + self.a * xs[k][i].sin().powi(2);
            for j in i + 1..n {
                g[(i, j)] = tilt;
                g[(j, i)] = -tilt;
            }
        }
        g
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenPfParams {
    stages: usize,
    g_diag: f64,
    a: f64,
    skew: f64,
    f_scale: f64,
}

impl Default for GenPfParams {
    fn default() -> Self {
        Self { stages: 2, g_diag: 2.0, a: 0.5, skew: 0.3, f_scale: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Quad3dParams {
    drag: f64,
}

impl Default for Quad3dParams {
    fn default() -> Self {
        Self { drag: 0.1 }
    }
}

/// Catalog entry: model name, stage count `N`, per-stage dimension `n`
/// (`None` when the model follows the scenario).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelInfo {
    pub name: &'static str,
    pub stages: Option<usize>,
    pub n: Option<usize>,
}

pub fn builtin_models() -> Vec<ModelInfo> {
    vec![
        ModelInfo { name: "omni2d", stages: Some(1), n: Some(2) },
        ModelInfo { name: "quad3d", stages: Some(2), n: Some(3) },
        ModelInfo { name: "gen_pf", stages: None, n: None },
    ]
}

/// Instantiates a catalog model for a `dims`-dimensional scenario.
pub fn build_model(name: &str, params: &serde_json::Value, dims: Dims) -> Result<Box<dyn Dynamics>> {
    let params = if params.is_null() { serde_json::Value::Object(Default::default()) } else { params.clone() };
    let model: Box<dyn Dynamics> = match name {
        "omni2d" => {
            if !params.as_object().is_some_and(|m| m.is_empty()) {
                return Err(Error::Config("omni2d takes no params".into()));
            }
            Box::new(Omni2d)
        }
        "quad3d" => {
            let p: Quad3dParams = serde_json::from_value(params)?;
            if !(p.drag >= 0.0 && p.drag.is_finite()) {
                return Err(Error::Config(format!("quad3d drag must be nonnegative, got {}", p.drag)));
            }
            Box::new(Quad3d { drag: p.drag })
        }
        "gen_pf" => {
            let p: GenPfParams = serde_json::from_value(params)?;
            if p.stages == 0 || p.stages > 8 {
                return Err(Error::Config(format!("gen_pf stages must be in 1..=8, got {}", p.stages)));
            }
            if !(p.a >= 0.0 && p.g_diag.is_finite() && p.skew.is_finite() && p.f_scale.is_finite()) {
                return Err(Error::Config("gen_pf params must be finite with a >= 0".into()));
            }
            Box::new(GenPf { dims, stages: p.stages, g_diag: p.g_diag, a: p.a, skew: p.skew, f_scale: p.f_scale })
        }
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    if model.dims() != dims {
        return Err(Error::Config(format!("model {name} is {}-dimensional, scenario is {}", model.dims().n(), dims.n())));
    }
    Ok(model)
}

/// Uniform per-axis disturbance on `[−bound, bound]`, one draw per tick.
#[derive(Clone, Debug)]
pub struct DisturbanceSampler {
    pub bound: f64,
    rng: ChaCha8Rng,
}

impl DisturbanceSampler {
    pub fn new(bound: f64, seed: u64) -> Self {
        Self { bound, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sample(&mut self, n: usize) -> Vector {
        let mut w = Vector::zeros();
        if self.bound > 0.0 {
            for i in 0..n {
                w[i] = self.rng.gen_range(-self.bound..=self.bound);
            }
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum PlantFault {
    #[error("non-finite plant state at t={t}")]
    NonFinite { t: f64 },
    #[error("input gain of stage {stage} lost sign definiteness at t={t}: lambda_min={lambda_min}")]
    SignDefiniteness { stage: usize, t: f64, lambda_min: f64 },
}

/// Smallest eigenvalue of the symmetric part of the leading `n×n` block.
pub fn sym_lambda_min(g: &Matrix3<f64>, n: usize) -> f64 {
    let s = (g + g.transpose()) * 0.5;
    match n {
        2 => {
            let (a, b, c) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
            0.5 * (a + c) - (0.25 * (a - c).powi(2) + b * b).sqrt()
        }
        _ => SymmetricEigen::new(s).eigenvalues.min(),
    }
}

#[derive(Debug)]
pub struct Plant {
    pub model: Box<dyn Dynamics>,
    pub state: Vec<Vector>,
    pub sampler: DisturbanceSampler,
    /// Smallest sign-definiteness margin seen so far.
    pub lambda_min_seen: f64,
}

impl Plant {
    pub fn new(model: Box<dyn Dynamics>, state: Vec<Vector>, sampler: DisturbanceSampler) -> Result<Self> {
        if state.len() != model.stages() {
            return Err(Error::Config(format!(
                "plant {} has {} stages, initial state has {}",
                model.name(),
                model.stages(),
                state.len()
            )));
        }
        Ok(Self { model, state, sampler, lambda_min_seen: f64::INFINITY })
    }

    pub fn output(&self) -> Vector {
        self.state[0]
    }

    fn rhs(&self, xs: &[Vector], u: &Vector, w: &[Vector], out: &mut [Vector]) {
        let n_st = xs.len();
        for k in 0..n_st {
            let next = if k + 1 < n_st { xs[k + 1] } else { *u };
            out[k] = self.model.drift(k, xs) + self.model.gain(k, xs) * next + w[k];
        }
    }

    /// Sign-definiteness margin of every stage at the current state.
    pub fn check_gains(&mut self, t: f64) -> std::result::Result<(), PlantFault> {
        let n = self.model.dims().n();
        for k in 0..self.state.len() {
            let lm = sym_lambda_min(&self.model.gain(k, &self.state), n);
            self.lambda_min_seen = self.lambda_min_seen.min(lm);
            if !(lm > 0.0) {
                return Err(PlantFault::SignDefiniteness { stage: k + 1, t, lambda_min: lm });
            }
        }
        Ok(())
    }

    /// Advances one RK4 step with `u` and one disturbance draw held over the
    /// step.
    pub fn step(&mut self, u: &Vector, t: f64, dt: f64) -> std::result::Result<(), PlantFault> {
        self.check_gains(t)?;
        let n = self.model.dims().n();
        let n_st = self.state.len();
        let w: Vec<Vector> = (0..n_st).map(|_| self.sampler.sample(n)).collect();
        let x0 = self.state.clone();
        let mut k1 = vec![Vector::zeros(); n_st];
        let mut k2 = k1.clone();
        let mut k3 = k1.clone();
        let mut k4 = k1.clone();
        let mut tmp = x0.clone();
        self.rhs(&x0, u, &w, &mut k1);
        for k in 0..n_st {
            tmp[k] = x0[k] + k1[k] * (0.5 * dt);
        }
        self.rhs(&tmp, u, &w, &mut k2);
        for k in 0..n_st {
            tmp[k] = x0[k] + k2[k] * (0.5 * dt);
        }
        self.rhs(&tmp, u, &w, &mut k3);
        for k in 0..n_st {
            tmp[k] = x0[k] + k3[k] * dt;
        }
        self.rhs(&tmp, u, &w, &mut k4);
        for k in 0..n_st {
            self.state[k] = x0[k] + (k1[k] + (k2[k] + k3[k]) * 2.0 + k4[k]) * (dt / 6.0);
        }
        if self.state.iter().any(|x| x.iter().any(|c| !c.is_finite())) {
            return Err(PlantFault::NonFinite { t: t + dt });
        }
        Ok(())
    }
}
