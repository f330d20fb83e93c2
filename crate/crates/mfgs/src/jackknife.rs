//! Infinitesimal jackknife over last-layer parameters.
//!
//! Around a trained optimum, the leave-one-out solution shifts linearly in
//! the left-out per-sample gradient:
//!
//!   theta_i ~= theta_hat + H~^-1 grad_i
//!
//! with H~ the dampened last-layer Hessian. The n shifted vectors define a
//! Gaussian centered at theta_hat whose covariance is H~^-1 J H~^-1, scaled
//! by 1/n for the jackknife view or left unscaled for the bootstrap view.
//!
//! A brute-force oracle validates the linear approximation on small convex
//! problems by actually retraining with each sample left out, and a Newton
//! solver gives an exact leave-one-out path for arbitrary per-sample
//! objectives where retraining precision matters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{dampen, hessian_last_layer};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_spd, CholeskyFactor, Matrix, SymMatrix};
use crate::model::{flat_index, nll_of_logits, train, LabeledBatch, MlpModel, TrainConfig};

/// Scaling convention for the fitted parameter covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    /// Covariance (1/n) H~^-1 J H~^-1, matching leave-one-out spread.
    JackknifeScaled,
    /// Covariance H~^-1 J H~^-1, matching resampling with replacement.
    Bootstrap,
}

/// Per-sample gradients mapped through the dampened inverse Hessian,
/// together with the optimum they perturb.
#[derive(Debug, Clone)]
pub struct IjEnsemble {
    theta_hat: Vec<f64>,
    h_inv_grads: Matrix,
    cov_kind: CovKind,
}

impl IjEnsemble {
    /// h_inv_grads holds one column per sample: column i = H~^-1 grad_i.
    pub fn new(theta_hat: Vec<f64>, h_inv_grads: Matrix, cov_kind: CovKind) -> Result<Self> {
        if h_inv_grads.rows() != theta_hat.len() {
            return Err(Error::DimensionMismatch {
                expected: theta_hat.len(),
                got: h_inv_grads.rows(),
                context: "jackknife column dimension",
            });
        }
        if h_inv_grads.cols() == 0 {
            return Err(Error::EmptyBatch("jackknife ensemble"));
        }
        Ok(IjEnsemble {
            theta_hat,
            h_inv_grads,
            cov_kind,
        })
    }

    /// Assemble the ensemble for a trained model: dampened last-layer
    /// Hessian, per-sample gradients, one solve per sample.
    pub fn from_model(model: &MlpModel, data: &LabeledBatch, cov_kind: CovKind) -> Result<Self> {
        let h = hessian_last_layer(model, data)?;
        let (hd, _) = dampen(&h)?;
        let factor = cholesky(&hd)?;
        let grads = gradient_matrix(model, data)?;
        let dim = grads.rows();
        let cols: Vec<Vec<f64>> = (0..grads.cols())
            .into_par_iter()
            .map(|i| {
                let g: Vec<f64> = (0..dim).map(|r| grads.get(r, i)).collect();
                solve_spd(&factor, &g)
            })
            .collect::<Result<_>>()?;
        let h_inv_grads = Matrix::from_fn(dim, cols.len(), |r, c| cols[c][r]);
        IjEnsemble::new(model.last_weight_flat(), h_inv_grads, cov_kind)
    }

    pub fn theta_hat(&self) -> &[f64] {
        &self.theta_hat
    }

    pub fn h_inv_grads(&self) -> &Matrix {
        &self.h_inv_grads
    }

    pub fn cov_kind(&self) -> CovKind {
        self.cov_kind
    }

    pub fn len(&self) -> usize {
        self.h_inv_grads.cols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The approximate leave-one-out parameters, one column per sample.
    pub fn loo_parameters(&self) -> Matrix {
        Matrix::from_fn(self.theta_hat.len(), self.len(), |r, c| {
            self.theta_hat[r] + self.h_inv_grads.get(r, c)
        })
    }
}

/// Per-sample last-layer gradients of the model at its current parameters,
/// one column per sample.
pub fn gradient_matrix(model: &MlpModel, data: &LabeledBatch) -> Result<Matrix> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("gradient matrix"));
    }
    let grads: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| model.grad_per_sample(data.input(i), data.label(i)))
        .collect::<Result<_>>()?;
    let dim = grads[0].len();
    Ok(Matrix::from_fn(dim, grads.len(), |r, c| grads[c][r]))
}

/// Linear-response leave-one-out parameters: column i of the result is
/// theta_hat + H~^-1 grad_i, with grads holding grad_i as column i.
pub fn ij_loo(theta_hat: &[f64], h_factor: &CholeskyFactor, grads: &Matrix) -> Result<Matrix> {
    let dim = theta_hat.len();
    if grads.rows() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: grads.rows(),
            context: "gradient rows",
        });
    }
    if h_factor.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: h_factor.dim(),
            context: "hessian factor",
        });
    }
    let cols: Vec<Vec<f64>> = (0..grads.cols())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let g: Vec<f64> = (0..dim).map(|r| grads.get(r, i)).collect();
            let shift = solve_spd(h_factor, &g)?;
            Ok(shift
                .iter()
                .zip(theta_hat)
                .map(|(s, t)| t + s)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(Matrix::from_fn(dim, cols.len(), |r, c| cols[c][r]))
}

/// The Gaussian fitted to the ensemble: mean theta_hat and the empirical
/// second moment of the jackknife shifts, scaled per the covariance kind.
pub fn ij_gaussian(ens: &IjEnsemble) -> (Vec<f64>, SymMatrix) {
    let dim = ens.theta_hat.len();
    let n = ens.len();
    let scale = match ens.cov_kind {
        CovKind::JackknifeScaled => 1.0 / n as f64,
        CovKind::Bootstrap => 1.0,
    };
    let cols = &ens.h_inv_grads;
    let cov = SymMatrix::from_fn_sym(dim, |r, c| {
        let mut acc = 0.0;
        for i in 0..n {
            acc += cols.get(r, i) * cols.get(c, i);
        }
        scale * acc
    });
    (ens.theta_hat.clone(), cov)
}

/// A loss that decomposes as a sum of per-sample terms with analytic
/// gradient and Hessian, so leave-one-out optima can be found exactly.
pub trait PerSampleObjective: Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn loss(&self, i: usize, theta: &[f64]) -> f64;
    fn grad(&self, i: usize, theta: &[f64]) -> Vec<f64>;
    /// Hessian of the summed loss over the given sample indices.
    fn hessian(&self, idx: &[usize], theta: &[f64]) -> SymMatrix;
}

/// Softmax NLL over the last layer of a model with frozen features; for a
/// model with no hidden layers this is plain multinomial logistic
/// regression on the raw inputs. Each sample optionally carries a ridge
/// share (ridge/2)|theta|^2, the per-sample view of the trainer's weight
/// decay, which keeps leave-one-out optima finite on separable subsets.
pub struct LastLayerObjective {
    feats: Vec<Vec<f64>>,
    labels: Vec<usize>,
    k: usize,
    ridge: f64,
}

impl LastLayerObjective {
    pub fn new(model: &MlpModel, data: &LabeledBatch) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyBatch("objective construction"));
        }
        let feats: Vec<Vec<f64>> = (0..data.len())
            .map(|i| model.features(data.input(i)))
            .collect::<Result<_>>()?;
        Ok(LastLayerObjective {
            feats,
            labels: data.labels().to_vec(),
            k: model.k_classes(),
            ridge: 0.0,
        })
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    fn logits(&self, i: usize, theta: &[f64]) -> Vec<f64> {
        let g = &self.feats[i];
        (0..self.k)
            .map(|kk| {
                g.iter()
                    .enumerate()
                    .map(|(f, &gf)| gf * theta[flat_index(self.k, f, kk)])
                    .sum()
            })
            .collect()
    }
}

impl PerSampleObjective for LastLayerObjective {
    fn dim(&self) -> usize {
        self.feats[0].len() * self.k
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn loss(&self, i: usize, theta: &[f64]) -> f64 {
        let nll = nll_of_logits(&self.logits(i, theta), self.labels[i]);
        nll + 0.5 * self.ridge * theta.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad(&self, i: usize, theta: &[f64]) -> Vec<f64> {
        let p = crate::gsint::softmax(&self.logits(i, theta)).into_vec();
        let g = &self.feats[i];
        let mut out = vec![0.0; self.dim()];
        for (f, &gf) in g.iter().enumerate() {
            for kk in 0..self.k {
                let r = p[kk] - if kk == self.labels[i] { 1.0 } else { 0.0 };
                out[flat_index(self.k, f, kk)] = gf * r;
            }
        }
        if self.ridge != 0.0 {
            for (o, t) in out.iter_mut().zip(theta) {
                *o += self.ridge * t;
            }
        }
        out
    }

    fn hessian(&self, idx: &[usize], theta: &[f64]) -> SymMatrix {
        let dim = self.dim();
        let mut data = vec![0.0; dim * dim];
        for &i in idx {
            let p = crate::gsint::softmax(&self.logits(i, theta)).into_vec();
            let g = &self.feats[i];
            for (f, &gf) in g.iter().enumerate() {
                for (f2, &gf2) in g.iter().enumerate() {
                    for k1 in 0..self.k {
                        for k2 in 0..self.k {
                            let block = if k1 == k2 {
                                p[k1] * (1.0 - p[k1])
                            } else {
                                -p[k1] * p[k2]
                            };
                            data[flat_index(self.k, f, k1) * dim + flat_index(self.k, f2, k2)] +=
                                gf * gf2 * block;
                        }
                    }
                }
            }
        }
        let m = SymMatrix::from_average(dim, &data);
        if self.ridge == 0.0 {
            m
        } else {
            m.add_scaled_identity(self.ridge * idx.len() as f64)
        }
    }
}

/// Damped Newton on the summed loss over idx, run to gradient norm tol.
pub fn newton_minimize(
    obj: &impl PerSampleObjective,
    idx: &[usize],
    init: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    if idx.is_empty() {
        return Err(Error::EmptyBatch("newton subset"));
    }
    let dim = obj.dim();
    let total_loss = |theta: &[f64]| -> f64 { idx.iter().map(|&i| obj.loss(i, theta)).sum() };
    let total_grad = |theta: &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; dim];
        for &i in idx {
            for (a, v) in acc.iter_mut().zip(obj.grad(i, theta)) {
                *a += v;
            }
        }
        acc
    };
    let mut theta = init.to_vec();
    for _ in 0..max_iter {
        let g = total_grad(&theta);
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax <= tol {
            return Ok(theta);
        }
        // The softmax parameterization makes the Hessian singular along
        // class-shift directions, so factor with a small ridge when the
        // plain factorization fails; the gradient has no component there,
        // so the step stays an (almost) exact Newton step.
        let h = obj.hessian(idx, &theta);
        let factor = match cholesky(&h) {
            Ok(f) => f,
            Err(_) => {
                let mut delta = 1e-8 * h.max_abs().max(1.0);
                loop {
                    match cholesky(&h.add_scaled_identity(delta)) {
                        Ok(f) => break f,
                        Err(e) => {
                            delta *= 10.0;
                            if delta > 1e8 {
                                return Err(e);
                            }
                        }
                    }
                }
            }
        };
        let step = solve_spd(&factor, &g)?;
        let descent: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        let base = total_loss(&theta);
        if !base.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0 });
        }
        if descent <= 1e-9 * base.abs().max(1.0) {
            // The predicted decrease is near or below the loss's
            // floating-point resolution; a line search cannot measure
            // progress here, and the plain Newton step is safe this close
            // to the optimum.
            for (th, s) in theta.iter_mut().zip(&step) {
                *th -= s;
            }
            continue;
        }
        let mut t = 1.0;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(th, s)| th - t * s).collect();
            if total_loss(&trial) <= base - 1e-4 * t * descent {
                theta = trial;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
    })
}

/// Exact leave-one-out optima via Newton, one column per left-out sample.
/// Each solve warm-starts from the full-data optimum.
pub fn exact_loo(obj: &impl PerSampleObjective, max_iter: usize, tol: f64) -> Result<Matrix> {
    let n = obj.len();
    if n < 2 {
        return Err(Error::EmptyBatch("leave-one-out"));
    }
    let all: Vec<usize> = (0..n).collect();
    let full = newton_minimize(obj, &all, &vec![0.0; obj.dim()], max_iter, tol)?;
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            newton_minimize(obj, &idx, &full, max_iter, tol)
        })
        .collect::<Result<_>>()?;
    Ok(Matrix::from_fn(obj.dim(), n, |r, c| cols[c][r]))
}

const LOO_SAMPLE_LIMIT: usize = 200;

/// Brute-force leave-one-out by retraining: fits a logistic-regression
/// model (no hidden layers) n times with the standard trainer, each run
/// omitting one sample and starting from the same zero initialization and
/// seed. Returns one flattened parameter column per left-out sample.
pub fn brute_force_loo(data: &LabeledBatch, cfg: &TrainConfig) -> Result<Matrix> {
    let n = data.len();
    if n > LOO_SAMPLE_LIMIT {
        return Err(Error::InvalidConfig(format!(
            "brute-force leave-one-out supports at most {LOO_SAMPLE_LIMIT} samples, got {n}"
        )));
    }
    let init = MlpModel::zeros(&[data.input_dim(), data.k_classes()])?;
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let reduced = data.leave_out(i)?;
            let (model, _) = train(&init, &reduced, cfg)?;
            Ok(model.last_weight_flat())
        })
        .collect::<Result<_>>()?;
    let dim = cols[0].len();
    Ok(Matrix::from_fn(dim, n, |r, c| cols[c][r]))
}
