//! End-to-end prediction: map an input to a Gaussian over logits using the
//! last-layer curvature, then to calibrated probabilities through a chosen
//! integrator, plus the max-probability OOD score.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{checkpoint_hash, CurvatureSet};
use crate::error::{Error, Result};
use crate::gsint::{
    mf_estimate, mc_integral, renormalize, softmax, ukf_integral, GaussianActivation, MfConfig,
    MfScheme, ProbVector, UkfConfig,
};
use crate::linalg::{Matrix, SymMatrix};
use crate::model::{flat_index, LabeledBatch, MlpModel};

/// Ensemble and activation temperatures. T_act rescales the logit mean
/// (and therefore the Jacobian, so the covariance picks up T_act^-2);
/// T_ens scales only the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    pub t_ens: f64,
    pub t_act: f64,
}

impl TemperatureConfig {
    pub fn new(t_ens: f64, t_act: f64) -> Result<Self> {
        let cfg = TemperatureConfig { t_ens, t_act };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Both temperatures at one: the untempered predictive.
    pub fn unit() -> Self {
        TemperatureConfig {
            t_ens: 1.0,
            t_act: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_ens", self.t_ens), ("t_act", self.t_act)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a positive finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig::unit()
    }
}

/// Which approximation turns the logit Gaussian into probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Integrator {
    Mf0,
    Mf1,
    Mf2,
    Mc { n_samples: usize, seed: u64 },
    Ukf { alpha: f64 },
    PointEstimate,
}

impl Integrator {
    /// The mean-field scheme this integrator dispatches to, if any.
    pub fn scheme(&self) -> Option<MfScheme> {
        match self {
            Integrator::Mf0 => Some(MfScheme::Mf0),
            Integrator::Mf1 => Some(MfScheme::Mf1),
            Integrator::Mf2 => Some(MfScheme::Mf2),
            _ => None,
        }
    }
}

impl std::fmt::Display for Integrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Integrator::Mf0 => write!(f, "mf0"),
            Integrator::Mf1 => write!(f, "mf1"),
            Integrator::Mf2 => write!(f, "mf2"),
            Integrator::Mc { .. } => write!(f, "mc"),
            Integrator::Ukf { .. } => write!(f, "ukf"),
            Integrator::PointEstimate => write!(f, "point-estimate"),
        }
    }
}

/// Full prediction configuration: integrator choice, temperatures, and the
/// mean-field parameters shared by the mf schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub integrator: Integrator,
    pub temps: TemperatureConfig,
    pub mf: MfConfig,
}

impl PredictorConfig {
    pub fn new(integrator: Integrator, temps: TemperatureConfig, mf: MfConfig) -> Result<Self> {
        let cfg = PredictorConfig {
            integrator,
            temps,
            mf,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A mean-field predictor with the default lambda0.
    pub fn mean_field(scheme: MfScheme, temps: TemperatureConfig) -> Self {
        let integrator = match scheme {
            MfScheme::Mf0 => Integrator::Mf0,
            MfScheme::Mf1 => Integrator::Mf1,
            MfScheme::Mf2 => Integrator::Mf2,
        };
        PredictorConfig {
            integrator,
            temps,
            mf: MfConfig::new(scheme),
        }
    }

    pub fn point_estimate(temps: TemperatureConfig) -> Self {
        PredictorConfig {
            integrator: Integrator::PointEstimate,
            temps,
            mf: MfConfig::new(MfScheme::Mf0),
        }
    }

    pub fn monte_carlo(n_samples: usize, seed: u64, temps: TemperatureConfig) -> Self {
        PredictorConfig {
            integrator: Integrator::Mc { n_samples, seed },
            temps,
            mf: MfConfig::new(MfScheme::Mf0),
        }
    }

    pub fn unscented(alpha: f64, temps: TemperatureConfig) -> Self {
        PredictorConfig {
            integrator: Integrator::Ukf { alpha },
            temps,
            mf: MfConfig::new(MfScheme::Mf0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.temps.validate()?;
        if !(self.mf.lambda0 > 0.0 && self.mf.lambda0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda0 must be a positive finite number, got {}",
                self.mf.lambda0
            )));
        }
        match self.integrator {
            Integrator::Mf0 | Integrator::Mf1 | Integrator::Mf2 => {
                let scheme = self.integrator.scheme().expect("mean-field integrator");
                if scheme != self.mf.scheme {
                    return Err(Error::InvalidConfig(format!(
                        "integrator {} disagrees with mean-field scheme {}",
                        self.integrator, self.mf.scheme
                    )));
                }
            }
            Integrator::Mc { n_samples, .. } => {
                if n_samples == 0 {
                    return Err(Error::InvalidConfig(
                        "Monte Carlo needs at least one sample".to_string(),
                    ));
                }
            }
            Integrator::Ukf { alpha } => {
                UkfConfig::new(alpha)?;
            }
            Integrator::PointEstimate => {}
        }
        Ok(())
    }

    /// Configuration echo for report metadata.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("integrator".to_string(), self.integrator.to_string());
        meta.insert("t_ens".to_string(), format!("{}", self.temps.t_ens));
        meta.insert("t_act".to_string(), format!("{}", self.temps.t_act));
        match self.integrator {
            Integrator::Mf0 | Integrator::Mf1 | Integrator::Mf2 => {
                meta.insert("lambda0".to_string(), format!("{}", self.mf.lambda0));
            }
            Integrator::Mc { n_samples, seed } => {
                meta.insert("mc_samples".to_string(), n_samples.to_string());
                meta.insert("mc_seed".to_string(), seed.to_string());
            }
            Integrator::Ukf { alpha } => {
                meta.insert("ukf_alpha".to_string(), format!("{alpha}"));
            }
            Integrator::PointEstimate => {}
        }
        meta
    }
}

/// One input's calibrated prediction; the logit Gaussian is kept for
/// diagnostics. The OOD score is the maximum predicted probability.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: ProbVector,
    pub predicted_class: usize,
    pub ood_score: f64,
    pub logit_gaussian: GaussianActivation,
}

/// Errors with StaleCurvature when the curvature was built from different
/// weights than the given model's.
pub fn verify_fresh(model: &MlpModel, curv: &CurvatureSet) -> Result<()> {
    let actual = checkpoint_hash(model);
    if curv.source_hash() != actual {
        return Err(Error::StaleCurvature {
            cached: curv.source_hash().to_string(),
            actual,
        });
    }
    Ok(())
}

/// Builds the activation Gaussian without re-hashing the checkpoint; batch
/// paths verify freshness once up front.
fn activation_unchecked(
    model: &MlpModel,
    curv: &CurvatureSet,
    temps: &TemperatureConfig,
    x: &[f64],
) -> Result<GaussianActivation> {
    let k = model.k_classes();
    let fdim = model.feature_dim();
    let sigma = curv.sigma();
    if sigma.dim() != fdim * k {
        return Err(Error::DimensionMismatch {
            expected: fdim * k,
            got: sigma.dim(),
            context: "curvature dimension for this model",
        });
    }
    let g = model.features(x)?;
    let logits = model.logits_from_features(&g);
    let mu: Vec<f64> = logits.iter().map(|a| a / temps.t_act).collect();

    // S[k, i] contracts the Kronecker-structured logit Jacobian against
    // Sigma: a feature-weighted gather over the (f, class) blocks.
    let scale = 1.0 / (temps.t_ens * temps.t_act * temps.t_act);
    let cov = SymMatrix::from_fn_sym(k, |a, b| {
        let mut total = 0.0;
        for (f, &gf) in g.iter().enumerate() {
            if gf == 0.0 {
                continue;
            }
            let row = flat_index(k, f, a);
            let mut inner = 0.0;
            for (fp, &gfp) in g.iter().enumerate() {
                inner += gfp * sigma.get(row, flat_index(k, fp, b));
            }
            total += gf * inner;
        }
        scale * total
    });
    GaussianActivation::new(mu, cov)
}

/// The activation Gaussian for one input: mean T_act^-1 g(x)'W and
/// covariance T_ens^-1 T_act^-2 (Jacobian-contracted Sigma).
pub fn logit_gaussian(
    model: &MlpModel,
    curv: &CurvatureSet,
    temps: &TemperatureConfig,
    x: &[f64],
) -> Result<GaussianActivation> {
    temps.validate()?;
    verify_fresh(model, curv)?;
    activation_unchecked(model, curv, temps, x)
}

fn integrate(g: &GaussianActivation, cfg: &PredictorConfig) -> Result<ProbVector> {
    match cfg.integrator {
        Integrator::Mf0 | Integrator::Mf1 | Integrator::Mf2 => {
            let e_tilde = mf_estimate(g, &cfg.mf)?;
            renormalize(&e_tilde)
        }
        Integrator::Mc { n_samples, seed } => mc_integral(g, n_samples, seed),
        Integrator::Ukf { alpha } => ukf_integral(g, &UkfConfig::new(alpha)?),
        Integrator::PointEstimate => Ok(softmax(g.mu())),
    }
}

fn predict_unchecked(
    model: &MlpModel,
    curv: &CurvatureSet,
    cfg: &PredictorConfig,
    x: &[f64],
) -> Result<Prediction> {
    let g = activation_unchecked(model, curv, &cfg.temps, x)?;
    let probs = integrate(&g, cfg)?;
    let predicted_class = crate::model::argmax(probs.as_slice());
    let ood_score = probs.as_slice()[predicted_class];
    Ok(Prediction {
        probs,
        predicted_class,
        ood_score,
        logit_gaussian: g,
    })
}

/// Calibrated prediction for a single input.
pub fn predict(
    model: &MlpModel,
    curv: &CurvatureSet,
    cfg: &PredictorConfig,
    x: &[f64],
) -> Result<Prediction> {
    cfg.validate()?;
    verify_fresh(model, curv)?;
    predict_unchecked(model, curv, cfg, x)
}

fn predict_rows<'a, F>(
    model: &MlpModel,
    curv: &CurvatureSet,
    cfg: &PredictorConfig,
    n: usize,
    row: F,
) -> Result<Vec<Prediction>>
where
    F: Fn(usize) -> &'a [f64] + Sync,
{
    cfg.validate()?;
    verify_fresh(model, curv)?;
    (0..n)
        .into_par_iter()
        .map(|i| predict_unchecked(model, curv, cfg, row(i)))
        .collect()
}

/// Order-preserving batch prediction over matrix rows. Deterministic for
/// every integrator: the Monte Carlo seed is shared by all rows, so each
/// output depends only on its input.
pub fn predict_batch(
    model: &MlpModel,
    curv: &CurvatureSet,
    cfg: &PredictorConfig,
    inputs: &Matrix,
) -> Result<Vec<Prediction>> {
    predict_rows(model, curv, cfg, inputs.rows(), |i| inputs.row(i))
}

/// Batch prediction over a labeled dataset's inputs.
pub fn predict_labeled(
    model: &MlpModel,
    curv: &CurvatureSet,
    cfg: &PredictorConfig,
    data: &LabeledBatch,
) -> Result<Vec<Prediction>> {
    predict_rows(model, curv, cfg, data.len(), |i| data.input(i))
}

/// Prediction dump: one row per input with index, optional label,
/// predicted class, OOD score, and the class probabilities.
pub fn predictions_csv(preds: &[Prediction], labels: Option<&[usize]>) -> Result<String> {
    if let Some(l) = labels {
        if l.len() != preds.len() {
            return Err(Error::LengthMismatch {
                left: preds.len(),
                right: l.len(),
                context: "prediction dump labels",
            });
        }
    }
    let k = preds.first().map_or(0, |p| p.probs.as_slice().len());
    let mut out = String::from("index");
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push_str(",predicted_class,ood_score");
    for j in 0..k {
        out.push_str(&format!(",p_{j}"));
    }
    out.push('\n');
    for (i, p) in preds.iter().enumerate() {
        out.push_str(&format!("{i}"));
        if let Some(l) = labels {
            out.push_str(&format!(",{}", l[i]));
        }
        out.push_str(&format!(",{},{}", p.predicted_class, p.ood_score));
        for &v in p.probs.as_slice() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}
