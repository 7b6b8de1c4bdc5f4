//! Scalar-feature regressors: ordinary least squares and ε-SVR solved by SMO.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShallowError {
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("SMO did not converge within {iterations} iterations (violation {violation:.3e})")]
    NoConvergence { iterations: usize, violation: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

pub fn fit_linreg(x: &[f64], y: &[f64]) -> Result<LinearModel, ShallowError> {
    if x.len() != y.len() {
        return Err(ShallowError::InvalidArgument(format!(
            "x has {} values, y has {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(ShallowError::DegenerateDesign(format!("{} points", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 0.0) || !sxx.is_finite() {
        return Err(ShallowError::DegenerateDesign("zero variance in x".into()));
    }
    let slope = sxy / sxx;
    Ok(LinearModel {
        slope,
        intercept: my - slope * mx,
    })
}

pub fn rbf_kernel(u: f64, v: f64, gamma: f64) -> f64 {
    (-gamma * (u - v) * (u - v)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match *self {
            Kernel::Linear => u * v,
            Kernel::Rbf { gamma } => rbf_kernel(u, v, gamma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub kernel: Kernel,
    pub c: f64,
    pub epsilon: f64,
    /// Stop when the maximal KKT violation falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl SvrParams {
    pub fn new(kernel: Kernel, c: f64, epsilon: f64) -> Self {
        Self {
            kernel,
            c,
            epsilon,
            tol: 1e-3,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    pub params: SvrParams,
    /// `α_i − α_i*` for every support vector.
    pub coef: Vec<f64>,
    pub support: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

impl SvrModel {
    pub fn predict(&self, x: f64) -> f64 {
        self.coef
            .iter()
            .zip(&self.support)
            .map(|(a, s)| a * self.params.kernel.eval(*s, x))
            .sum::<f64>()
            + self.bias
    }
}

/// ε-SVR dual over 2n variables `β = [α; α*]` with labels `s = [+1; −1]`:
/// minimize `½ βᵀQβ + pᵀβ` subject to `sᵀβ = 0`, `0 ≤ β ≤ C`, where
/// `Q_ij = s_i s_j K(x_i, x_j)` and `p = [ε − y; ε + y]`. Second-order
/// working-set selection, no shrinking.
pub fn fit_svr(x: &[f64], y: &[f64], params: &SvrParams) -> Result<SvrModel, ShallowError> {
    if x.len() != y.len() {
        return Err(ShallowError::InvalidArgument(format!(
            "x has {} values, y has {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(ShallowError::DegenerateDesign(format!("{} points", x.len())));
    }
    if !(params.c > 0.0) || !(params.epsilon >= 0.0) || !(params.tol > 0.0) {
        return Err(ShallowError::InvalidArgument(
            "need C > 0, epsilon >= 0, tol > 0".into(),
        ));
    }
    if let Kernel::Rbf { gamma } = params.kernel {
        if !(gamma > 0.0) {
            return Err(ShallowError::InvalidArgument("rbf gamma must be > 0".into()));
        }
    }
    const TAU: f64 = 1e-12;
    let n = x.len();
    let m = 2 * n;
    let c = params.c;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = params.kernel.eval(x[i], x[j]);
        }
    }
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let q = |a: usize, b: usize| sign(a) * sign(b) * k[(a % n) * n + b % n];
    let qd: Vec<f64> = (0..m).map(|t| q(t, t)).collect();
    let mut beta = vec![0.0; m];
    let mut grad: Vec<f64> = (0..m)
        .map(|t| {
            if t < n {
                params.epsilon - y[t]
            } else {
                params.epsilon + y[t - n]
            }
        })
        .collect();
    let at_upper = |b: f64| b >= c;
    let at_lower = |b: f64| b <= 0.0;

    let mut iter = 0;
    let mut violation;
    loop {
        // i: maximal −s_t G_t over I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..m {
            let v = if sign(t) > 0.0 {
                (!at_upper(beta[t])).then_some(-grad[t])
            } else {
                (!at_lower(beta[t])).then_some(grad[t])
            };
            if let Some(v) = v {
                if v >= gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut obj_min = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..m {
                if sign(t) > 0.0 {
                    if !at_lower(beta[t]) {
                        let diff = gmax + grad[t];
                        gmax2 = gmax2.max(grad[t]);
                        if diff > 0.0 {
                            let quad = qd[i] + qd[t] - 2.0 * sign(i) * q(i, t);
                            let obj = -diff * diff / if quad > 0.0 { quad } else { TAU };
                            if obj <= obj_min {
                                obj_min = obj;
                                j_sel = Some(t);
                            }
                        }
                    }
                } else if !at_upper(beta[t]) {
                    let diff = gmax - grad[t];
                    gmax2 = gmax2.max(-grad[t]);
                    if diff > 0.0 {
                        let quad = qd[i] + qd[t] + 2.0 * sign(i) * q(i, t);
                        let obj = -diff * diff / if quad > 0.0 { quad } else { TAU };
                        if obj <= obj_min {
                            obj_min = obj;
                            j_sel = Some(t);
                        }
                    }
                }
            }
        }
        violation = gmax + gmax2;
        let (i, j) = match (i_sel, j_sel) {
            (Some(i), Some(j)) if violation >= params.tol => (i, j),
            _ => break,
        };
        if iter >= params.max_iter {
            return Err(ShallowError::NoConvergence {
                iterations: iter,
                violation,
            });
        }
        iter += 1;

        let (old_i, old_j) = (beta[i], beta[j]);
        let qij = q(i, j);
        if sign(i) != sign(j) {
            let quad = (qd[i] + qd[j] + 2.0 * qij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = beta[i] - beta[j];
            beta[i] += delta;
            beta[j] += delta;
            if diff > 0.0 {
                if beta[j] < 0.0 {
                    beta[j] = 0.0;
                    beta[i] = diff;
                }
            } else if beta[i] < 0.0 {
                beta[i] = 0.0;
                beta[j] = -diff;
            }
            if diff > 0.0 {
                if beta[i] > c {
                    beta[i] = c;
                    beta[j] = c - diff;
                }
            } else if beta[j] > c {
                beta[j] = c;
                beta[i] = c + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * qij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = beta[i] + beta[j];
            beta[i] -= delta;
            beta[j] += delta;
            if sum > c {
                if beta[i] > c {
                    beta[i] = c;
                    beta[j] = sum - c;
                }
            } else if beta[j] < 0.0 {
                beta[j] = 0.0;
                beta[i] = sum;
            }
            if sum > c {
                if beta[j] > c {
                    beta[j] = c;
                    beta[i] = sum - c;
                }
            } else if beta[i] < 0.0 {
                beta[i] = 0.0;
                beta[j] = sum;
            }
        }
        let (di, dj) = (beta[i] - old_i, beta[j] - old_j);
        for t in 0..m {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // Bias from free variables, else the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..m {
        let yg = sign(t) * grad[t];
        if at_upper(beta[t]) {
            if sign(t) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower(beta[t]) {
            if sign(t) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        0.5 * (ub + lb)
    };

    let mut coef = Vec::new();
    let mut support = Vec::new();
    for i in 0..n {
        let a = beta[i] - beta[i + n];
        if a != 0.0 {
            coef.push(a);
            support.push(x[i]);
        }
    }
    Ok(SvrModel {
        params: *params,
        coef,
        support,
        bias: -rho,
        iterations: iter,
    })
}

/// Standardizes a scalar feature with training statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: f64,
    pub std: f64,
}

impl FeatureScaler {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    /// Population statistics; falls back to unit scale when `std` is zero.
    pub fn fit(x: &[f64]) -> Self {
        if x.is_empty() {
            return Self::identity();
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            mean,
            std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
        }
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}
