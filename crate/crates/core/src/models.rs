//! Built-in SDE systems and observables, and the name-based registry used by
//! the command line.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{NoiseConvention, Observable, SdeSystem};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// `dX = -beta X dt + sqrt(2 eps) X dW`, started at `X_0 = 1` on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GeometricBrownianMotion {
    beta: f64,
    convention: NoiseConvention,
    x0: [f64; 1],
}

impl GeometricBrownianMotion {
    pub fn new(beta: f64, convention: NoiseConvention) -> Self {
        Self {
            beta,
            convention,
            x0: [1.0],
        }
    }
}

impl SdeSystem for GeometricBrownianMotion {
    fn dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -self.beta * x[0];
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        out[0] = SQRT_2 * x[0];
    }
    fn drift_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = -self.beta;
    }
    fn drift_hessian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = SQRT_2;
    }
    fn diffusion_hessian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn initial_state(&self) -> &[f64] {
        &self.x0
    }
    fn horizon(&self) -> f64 {
        1.0
    }
    fn convention(&self) -> NoiseConvention {
        self.convention
    }
}

/// `f(x) = (log x)^2 / 2`, suitable for log-normally distributed states.
#[derive(Debug, Clone, Copy)]
pub struct LogSquaredObservable;

impl Observable for LogSquaredObservable {
    fn value(&self, x: &[f64]) -> f64 {
        let l = x[0].ln();
        0.5 * l * l
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0].ln() / x[0];
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out[0] = (1.0 - x[0].ln()) / (x[0] * x[0]);
    }
}

/// Stochastic Lotka-Volterra model with demographic (square-root) noise on
/// `R^2`, started at the fixed point of its drift, over `[0, 10]`.
///
/// Prey x: `dx = (-beta x y + alpha x + delta) dt + sqrt(eps (beta x y + alpha x + delta)) dW_1`
/// Predator y: `dy = (beta x y - gamma y + delta) dt + sqrt(eps (beta x y + gamma y + delta)) dW_2`
#[derive(Debug, Clone)]
pub struct PredatorPrey {
    alpha: f64,
    beta: f64,
    gamma: f64,
    delta: f64,
    x0: [f64; 2],
}

impl PredatorPrey {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Self {
        // Positive fixed point of the drift: beta x y = alpha x + delta and
        // beta x y = gamma y - delta, giving a quadratic for x.
        let b2 = 2.0 * beta * delta - alpha * gamma;
        let disc = b2 * b2 + 4.0 * alpha * beta * gamma * delta;
        let x = (-b2 + disc.sqrt()) / (2.0 * alpha * beta);
        let y = (alpha * x + 2.0 * delta) / gamma;
        Self {
            alpha,
            beta,
            gamma,
            delta,
            x0: [x, y],
        }
    }

    fn rates(&self, x: &[f64]) -> (f64, f64) {
        let g1 = self.beta * x[0] * x[1] + self.alpha * x[0] + self.delta;
        let g2 = self.beta * x[0] * x[1] + self.gamma * x[1] + self.delta;
        (g1, g2)
    }
}

impl Default for PredatorPrey {
    fn default() -> Self {
        Self::new(1.0, 5.0, 1.0, 0.1)
    }
}

impl SdeSystem for PredatorPrey {
    fn dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -self.beta * x[0] * x[1] + self.alpha * x[0] + self.delta;
        out[1] = self.beta * x[0] * x[1] - self.gamma * x[1] + self.delta;
    }
    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        let (g1, g2) = self.rates(x);
        out[0] = g1.sqrt();
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = g2.sqrt();
    }
    fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -self.beta * x[1] + self.alpha;
        out[1] = -self.beta * x[0];
        out[2] = self.beta * x[1];
        out[3] = self.beta * x[0] - self.gamma;
    }
    fn drift_hessian(&self, _x: &[f64], out: &mut [f64]) {
        // d^2 b_k / dx dy = -beta for prey, +beta for predator
        out.fill(0.0);
        out[1] = -self.beta; // (k=0, i=0, j=1)
        out[2] = -self.beta; // (k=0, i=1, j=0)
        out[5] = self.beta; // (k=1, i=0, j=1)
        out[6] = self.beta; // (k=1, i=1, j=0)
    }
    fn diffusion_jacobian(&self, x: &[f64], out: &mut [f64]) {
        let (g1, g2) = self.rates(x);
        let (s1, s2) = (g1.sqrt(), g2.sqrt());
        out.fill(0.0);
        // sigma_00 = sqrt(g1): out[(0*2+0)*2 + l]
        out[0] = (self.beta * x[1] + self.alpha) / (2.0 * s1);
        out[1] = self.beta * x[0] / (2.0 * s1);
        // sigma_11 = sqrt(g2): out[(1*2+1)*2 + l]
        out[6] = self.beta * x[1] / (2.0 * s2);
        out[7] = (self.beta * x[0] + self.gamma) / (2.0 * s2);
    }
    fn diffusion_hessian(&self, x: &[f64], out: &mut [f64]) {
        let (g1, g2) = self.rates(x);
        out.fill(0.0);
        // d^2 sqrt(g) = g_lm / (2 sqrt g) - g_l g_m / (4 g^{3/2})
        let d2 = |g: f64, gl: f64, gm: f64, glm: f64| {
            glm / (2.0 * g.sqrt()) - gl * gm / (4.0 * g * g.sqrt())
        };
        let g1x = self.beta * x[1] + self.alpha;
        let g1y = self.beta * x[0];
        let g2x = self.beta * x[1];
        let g2y = self.beta * x[0] + self.gamma;
        // sigma_00 block: out[((0*2+0)*2 + l)*2 + m]
        out[0] = d2(g1, g1x, g1x, 0.0);
        out[1] = d2(g1, g1x, g1y, self.beta);
        out[2] = d2(g1, g1y, g1x, self.beta);
        out[3] = d2(g1, g1y, g1y, 0.0);
        // sigma_11 block: out[((1*2+1)*2 + l)*2 + m], base (1*2+1)*2*2 = 12
        out[12] = d2(g2, g2x, g2x, 0.0);
        out[13] = d2(g2, g2x, g2y, self.beta);
        out[14] = d2(g2, g2y, g2x, self.beta);
        out[15] = d2(g2, g2y, g2y, 0.0);
    }
    fn initial_state(&self) -> &[f64] {
        &self.x0
    }
    fn horizon(&self) -> f64 {
        10.0
    }
    fn convention(&self) -> NoiseConvention {
        NoiseConvention::Ito
    }
}

/// `f(x, y) = x`: prey concentration at final time.
#[derive(Debug, Clone, Copy)]
pub struct PreyConcentration;

impl Observable for PreyConcentration {
    fn value(&self, x: &[f64]) -> f64 {
        x[0]
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = 0.0;
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Additive-noise Ornstein-Uhlenbeck process `dX = -kappa X dt + sqrt(eps) dW`
/// on `[0, 1]`, started at the origin.
#[derive(Debug, Clone)]
pub struct AdditiveOrnsteinUhlenbeck {
    kappa: f64,
    x0: [f64; 1],
}

impl AdditiveOrnsteinUhlenbeck {
    pub fn new(kappa: f64) -> Self {
        Self { kappa, x0: [0.0] }
    }
}

impl SdeSystem for AdditiveOrnsteinUhlenbeck {
    fn dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -self.kappa * x[0];
    }
    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn drift_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = -self.kappa;
    }
    fn drift_hessian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_hessian(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn initial_state(&self) -> &[f64] {
        &self.x0
    }
    fn horizon(&self) -> f64 {
        1.0
    }
    fn convention(&self) -> NoiseConvention {
        NoiseConvention::Ito
    }
}

/// `f(x) = x_index`.
#[derive(Debug, Clone, Copy)]
pub struct CoordinateObservable {
    index: usize,
}

impl CoordinateObservable {
    pub fn new(index: usize) -> Self {
        Self { index }
    }
}

impl Observable for CoordinateObservable {
    fn value(&self, x: &[f64]) -> f64 {
        x[self.index]
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let _ = x;
        out[self.index] = 1.0;
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// A registered model: the SDE system plus its canonical observable.
pub struct ModelInstance {
    pub system: Arc<dyn SdeSystem>,
    pub observable: Arc<dyn Observable>,
}

fn take(params: &mut BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.remove(key).unwrap_or(default)
}

/// Build a built-in model by name with numeric parameter overrides.
///
/// Names: `geometric_bm{beta}`, `strato_gbm{beta}`,
/// `predator_prey{alpha,beta,gamma,delta}`, `additive_ou{kappa}`.
pub fn builtin_model(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelInstance> {
    let mut params = params.clone();
    let instance = match name {
        "geometric_bm" => ModelInstance {
            system: Arc::new(GeometricBrownianMotion::new(
                take(&mut params, "beta", 1.0),
                NoiseConvention::Ito,
            )),
            observable: Arc::new(LogSquaredObservable),
        },
        "strato_gbm" => ModelInstance {
            system: Arc::new(GeometricBrownianMotion::new(
                take(&mut params, "beta", 1.0),
                NoiseConvention::Stratonovich,
            )),
            observable: Arc::new(LogSquaredObservable),
        },
        "predator_prey" => ModelInstance {
            system: Arc::new(PredatorPrey::new(
                take(&mut params, "alpha", 1.0),
                take(&mut params, "beta", 5.0),
                take(&mut params, "gamma", 1.0),
                take(&mut params, "delta", 0.1),
            )),
            observable: Arc::new(PreyConcentration),
        },
        "additive_ou" => ModelInstance {
            system: Arc::new(AdditiveOrnsteinUhlenbeck::new(take(
                &mut params,
                "kappa",
                1.0,
            ))),
            observable: Arc::new(CoordinateObservable::new(0)),
        },
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    if let Some(extra) = params.keys().next() {
        return Err(Error::InvalidParameter(format!(
            "model `{name}` has no parameter `{extra}`"
        )));
    }
    Ok(instance)
}
