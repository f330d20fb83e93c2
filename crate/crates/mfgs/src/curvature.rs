//! Last-layer curvature: the Hessian H, the gradient second moment J, and
//! the parameter covariance Sigma assembled from them.
//!
//! For the softmax NLL the last-layer Hessian has a closed form. With
//! residual r_i = p_i - onehot(y_i) and features g_i, the flattened
//! quantities over W are
//!
//!   J[(f,k),(f',k')] = sum_i g_i[f] r_i[k] g_i[f'] r_i[k']
//!   H[(f,k),(f',k')] = sum_i g_i[f] g_i[f'] (delta_kk' p_i[k] - p_i[k] p_i[k'])
//!
//! both exactly symmetric and positive semi-definite by construction. The
//! flattening order is the model's feature-major layout.
//!
//! Whichever matrix gets inverted is first dampened by epsilon = max(0,
//! 1 - min_eig) so its smallest eigenvalue reaches one; J inside the
//! sandwich composition stays undampened.
//!
//! Assembly parallelizes over matrix rows while each entry accumulates its
//! samples in index order, so results are bitwise identical no matter how
//! many worker threads run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, eig_extremes, invert_spd, SymMatrix};
use crate::model::{LabeledBatch, MlpModel};

const CACHE_VERSION: u32 = 1;

/// Which parameter covariance to build from H and J.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    /// Laplace: Sigma = dampened-H inverse.
    HInv,
    /// Gradient second moment: Sigma = dampened-J inverse.
    JInv,
    /// Sandwich: Sigma = H~^-1 J H~^-1 with J undampened.
    Sandwich,
}

impl fmt::Display for SigmaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SigmaKind::HInv => "hinv",
            SigmaKind::JInv => "jinv",
            SigmaKind::Sandwich => "sandwich",
        };
        f.write_str(name)
    }
}

impl FromStr for SigmaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinv" => Ok(SigmaKind::HInv),
            "jinv" => Ok(SigmaKind::JInv),
            "sandwich" => Ok(SigmaKind::Sandwich),
            other => Err(Error::InvalidConfig(format!(
                "unknown sigma kind '{other}' (expected hinv, jinv, or sandwich)"
            ))),
        }
    }
}

/// Per-sample statistics shared by both curvature matrices: features,
/// predicted probabilities, and residuals, each stored row-per-sample.
struct SampleStats {
    n: usize,
    fdim: usize,
    k: usize,
    feats: Vec<f64>,
    probs: Vec<f64>,
    resids: Vec<f64>,
}

fn collect_stats(model: &MlpModel, data: &LabeledBatch) -> Result<SampleStats> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("curvature accumulation"));
    }
    let (fdim, k) = (model.feature_dim(), model.k_classes());
    let n = data.len();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, Vec<f64>)> {
            let g = model.features(data.input(i))?;
            let a = model.logits_from_features(&g);
            let p = crate::gsint::softmax(&a).into_vec();
            Ok((g, p))
        })
        .collect::<Result<_>>()?;
    let mut feats = Vec::with_capacity(n * fdim);
    let mut probs = Vec::with_capacity(n * k);
    let mut resids = Vec::with_capacity(n * k);
    for (i, (g, p)) in per_sample.into_iter().enumerate() {
        feats.extend_from_slice(&g);
        let y = data.label(i);
        for (kk, &pk) in p.iter().enumerate() {
            resids.push(pk - if kk == y { 1.0 } else { 0.0 });
        }
        probs.extend(p);
    }
    Ok(SampleStats {
        n,
        fdim,
        k,
        feats,
        probs,
        resids,
    })
}

/// Build a symmetric matrix from a per-row closure producing the entries at
/// and right of the diagonal. Rows run in parallel.
fn sym_from_upper_rows(dim: usize, row_fn: impl Fn(usize) -> Vec<f64> + Sync + Send) -> SymMatrix {
    let rows: Vec<Vec<f64>> = (0..dim).into_par_iter().map(row_fn).collect();
    let mut data = vec![0.0; dim * dim];
    for (r, row) in rows.iter().enumerate() {
        for (offset, &v) in row.iter().enumerate() {
            let c = r + offset;
            data[r * dim + c] = v;
            data[c * dim + r] = v;
        }
    }
    SymMatrix::new(dim, data)
}

/// J = sum_i grad_i grad_i^T over flattened last-layer parameters.
pub fn fisher_last_layer(model: &MlpModel, data: &LabeledBatch) -> Result<SymMatrix> {
    let s = collect_stats(model, data)?;
    let dim = s.fdim * s.k;
    Ok(sym_from_upper_rows(dim, |r| {
        let (f, k) = (r / s.k, r % s.k);
        let mut row = vec![0.0; dim - r];
        for i in 0..s.n {
            let gf = s.feats[i * s.fdim + f];
            let rk = s.resids[i * s.k + k];
            let coef = gf * rk;
            if coef == 0.0 {
                continue;
            }
            for (offset, slot) in row.iter_mut().enumerate() {
                let c = r + offset;
                let (f2, k2) = (c / s.k, c % s.k);
                *slot += coef * s.feats[i * s.fdim + f2] * s.resids[i * s.k + k2];
            }
        }
        row
    }))
}

/// Exact NLL Hessian over flattened last-layer parameters:
/// H = sum_i (diag(p_i) - p_i p_i^T) kron (g_i g_i^T).
pub fn hessian_last_layer(model: &MlpModel, data: &LabeledBatch) -> Result<SymMatrix> {
    let s = collect_stats(model, data)?;
    let dim = s.fdim * s.k;
    Ok(sym_from_upper_rows(dim, |r| {
        let (f, k) = (r / s.k, r % s.k);
        let mut row = vec![0.0; dim - r];
        for i in 0..s.n {
            let gf = s.feats[i * s.fdim + f];
            if gf == 0.0 {
                continue;
            }
            let pk = s.probs[i * s.k + k];
            for (offset, slot) in row.iter_mut().enumerate() {
                let c = r + offset;
                let (f2, k2) = (c / s.k, c % s.k);
                let gf2 = s.feats[i * s.fdim + f2];
                let pk2 = s.probs[i * s.k + k2];
                let block = if k == k2 { pk * (1.0 - pk) } else { -pk * pk2 };
                *slot += gf * gf2 * block;
            }
        }
        row
    }))
}

/// Raise the smallest eigenvalue to one: returns (m + eps I, eps) with
/// eps = max(0, 1 - min_eig(m)).
pub fn dampen(m: &SymMatrix) -> Result<(SymMatrix, f64)> {
    let (min_eig, _) = eig_extremes(m)?;
    let eps = (1.0 - min_eig).max(0.0);
    if eps == 0.0 {
        Ok((m.clone(), 0.0))
    } else {
        Ok((m.add_scaled_identity(eps), eps))
    }
}

/// Row-parallel product of a dense row-major square matrix with a
/// symmetric one; the result is generally not symmetric.
fn dense_times_sym(a: &[f64], b: &SymMatrix) -> Vec<f64> {
    let dim = b.dim();
    let mut out = vec![0.0; dim * dim];
    out.par_chunks_mut(dim).enumerate().for_each(|(i, row)| {
        let ai = &a[i * dim..(i + 1) * dim];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &av) in ai.iter().enumerate() {
                acc += av * b.get(k, j);
            }
            *slot = acc;
        }
    });
    out
}

/// Compose the selected covariance. The inverted matrix is dampened first;
/// the sandwich keeps its inner J raw. The result is symmetrized and its
/// positive definiteness checked by a trial factorization.
pub fn build_sigma(h: &SymMatrix, j: &SymMatrix, kind: SigmaKind) -> Result<(SymMatrix, f64)> {
    if h.dim() != j.dim() {
        return Err(Error::DimensionMismatch {
            expected: h.dim(),
            got: j.dim(),
            context: "curvature matrices",
        });
    }
    let (sigma, eps) = match kind {
        SigmaKind::HInv => {
            let (hd, eps) = dampen(h)?;
            (invert_spd(&hd)?, eps)
        }
        SigmaKind::JInv => {
            let (jd, eps) = dampen(j)?;
            (invert_spd(&jd)?, eps)
        }
        SigmaKind::Sandwich => {
            let (hd, eps) = dampen(h)?;
            let hinv = invert_spd(&hd)?;
            let t = dense_times_sym(hinv.as_slice(), j);
            let s = dense_times_sym(&t, &hinv);
            (SymMatrix::from_average(h.dim(), &s), eps)
        }
    };
    if cholesky(&sigma).is_ok() {
        return Ok((sigma, eps));
    }
    // The raw J is singular whenever residuals sum to zero per sample, so
    // the composed sandwich sits exactly on the semi-definite boundary. A
    // floor far below any curvature scale restores factorability; a matrix
    // that still fails is genuinely indefinite.
    let floor = 1e-10 * sigma.max_abs().max(1.0);
    let repaired = sigma.add_scaled_identity(floor);
    cholesky(&repaired)?;
    Ok((repaired, eps))
}

/// SHA-256 of the model's canonical checkpoint serialization, hex encoded.
/// Curvature caches record it so a stale cache is detected before use.
pub fn checkpoint_hash(model: &MlpModel) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.canonical_json().as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// H, J, and the composed Sigma for one trained model.
#[derive(Debug, Clone)]
pub struct CurvatureSet {
    hessian: SymMatrix,
    fisher: SymMatrix,
    epsilon: f64,
    sigma_kind: SigmaKind,
    sigma: SymMatrix,
    source_hash: String,
}

impl CurvatureSet {
    /// Accumulate curvature over the batch and compose Sigma. Subsample the
    /// batch first (LabeledBatch::subset) to approximate on large datasets.
    pub fn compute(model: &MlpModel, data: &LabeledBatch, kind: SigmaKind) -> Result<Self> {
        let hessian = hessian_last_layer(model, data)?;
        let fisher = fisher_last_layer(model, data)?;
        let (sigma, epsilon) = build_sigma(&hessian, &fisher, kind)?;
        Ok(CurvatureSet {
            hessian,
            fisher,
            epsilon,
            sigma_kind: kind,
            sigma,
            source_hash: checkpoint_hash(model),
        })
    }

    pub fn hessian(&self) -> &SymMatrix {
        &self.hessian
    }

    pub fn fisher(&self) -> &SymMatrix {
        &self.fisher
    }

    /// The dampening actually added to the inverted matrix.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sigma_kind(&self) -> SigmaKind {
        self.sigma_kind
    }

    pub fn sigma(&self) -> &SymMatrix {
        &self.sigma
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    #[cfg(test)]
    pub(crate) fn synthetic(model: &MlpModel, sigma: SymMatrix, kind: SigmaKind) -> Self {
        CurvatureSet {
            hessian: sigma.clone(),
            fisher: sigma.clone(),
            epsilon: 0.0,
            sigma_kind: kind,
            sigma,
            source_hash: checkpoint_hash(model),
        }
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let file = CacheFile {
            version: CACHE_VERSION,
            sigma_kind: self.sigma_kind,
            epsilon: self.epsilon,
            dim: self.sigma.dim(),
            hessian: self.hessian.as_slice().to_vec(),
            fisher: self.fisher.as_slice().to_vec(),
            sigma: self.sigma.as_slice().to_vec(),
            checkpoint_hash: self.source_hash.clone(),
        };
        let text = serde_json::to_string(&file).expect("cache serialization");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Load a cache and verify it belongs to the given model; a hash
    /// mismatch means the checkpoint changed after the cache was written.
    pub fn load_cache(path: &Path, model: &MlpModel) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CacheFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if file.version != CACHE_VERSION {
            return Err(Error::BadData {
                path: path.display().to_string(),
                reason: format!(
                    "unsupported curvature cache version {} (expected {CACHE_VERSION})",
                    file.version
                ),
            });
        }
        let actual = checkpoint_hash(model);
        if file.checkpoint_hash != actual {
            return Err(Error::StaleCurvature {
                cached: file.checkpoint_hash,
                actual,
            });
        }
        let dim = file.dim;
        let expected = model.feature_dim() * model.k_classes();
        if dim != expected {
            return Err(Error::BadData {
                path: path.display().to_string(),
                reason: format!("cache dim {dim} does not match model dim {expected}"),
            });
        }
        let check_len = |v: &Vec<f64>, what: &str| -> Result<()> {
            if v.len() != dim * dim {
                return Err(Error::BadData {
                    path: path.display().to_string(),
                    reason: format!("{what} has wrong length"),
                });
            }
            Ok(())
        };
        check_len(&file.hessian, "hessian")?;
        check_len(&file.fisher, "fisher")?;
        check_len(&file.sigma, "sigma")?;
        Ok(CurvatureSet {
            hessian: SymMatrix::new(dim, file.hessian),
            fisher: SymMatrix::new(dim, file.fisher),
            epsilon: file.epsilon,
            sigma_kind: file.sigma_kind,
            sigma: SymMatrix::new(dim, file.sigma),
            source_hash: file.checkpoint_hash,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    sigma_kind: SigmaKind,
    epsilon: f64,
    dim: usize,
    hessian: Vec<f64>,
    fisher: Vec<f64>,
    sigma: Vec<f64>,
    checkpoint_hash: String,
}
