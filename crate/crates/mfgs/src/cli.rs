//! Command-line harness: train, curvature, eval, ood, tune-temps, and
//! approx-bench, each writing reproducible CSV/JSON artifacts.
//!
//! Configuration comes from an optional JSON file plus flag overrides,
//! flags winning. Every run-owned output embeds the resolved config and a
//! schema version; files whose format is owned by another module
//! (checkpoint, curvature cache, prediction dump) stay in that format.
//! Timing measurements are isolated in their own file so all other
//! outputs are byte-identical across reruns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::curvature::{CurvatureSet, SigmaKind};
use crate::datasets::{gen_blobs, gen_ood_shell, load_idx, split, subsample, DatasetSplit};
use crate::error::{Error, Result};
use crate::gsint::{
    mc_integral, mf_estimate, renormalize, softmax, ukf_integral, GaussianActivation, MfConfig,
    MfScheme, ProbVector, UkfConfig, DEFAULT_LAMBDA0,
};
use crate::linalg::Matrix;
use crate::metrics::{auroc, evaluate_in_domain, evaluate_ood, EvalReport};
use crate::model::{train, LabeledBatch, MlpModel, TrainConfig};
use crate::predictor::{
    logit_gaussian, predict_batch, predict_labeled, predictions_csv, Integrator, PredictorConfig,
    TemperatureConfig,
};

/// Version stamped into every run-owned output file.
pub const SCHEMA_VERSION: u32 = 1;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CURVATURE_FILE: &str = "curvature.json";

/// One experiment's full configuration. Defaults describe the synthetic
/// three-class blobs benchmark. Seed usage: `seed` drives weight init and
/// training; `data_seed` drives dataset generation, with the split,
/// out-of-domain shell, and curvature subsample using fixed offsets from
/// it (+1, +2, +3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,

    pub dataset: String,
    pub k: usize,
    pub n_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub data_seed: u64,
    pub images: String,
    pub labels: String,
    pub train_frac: f64,
    pub heldout_frac: f64,
    pub test_frac: f64,

    pub hidden: Vec<usize>,
    pub step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_decay: f64,

    pub sigma_kind: String,
    pub curvature_subsample: usize,

    pub integrator: String,
    pub mc_samples: usize,
    pub mc_seed: u64,
    pub ukf_alpha: f64,
    pub t_ens: f64,
    pub t_act: f64,
    pub lambda0: f64,
    pub n_bins: usize,

    pub ood_radius_factor: f64,
    pub ood_n: usize,

    pub tune_grid: usize,
    pub tune_t_min: f64,
    pub tune_t_max: f64,
    pub objective: String,

    pub bench_mc_sizes: Vec<usize>,
    pub reference_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            out_dir: "runs/out".to_string(),
            dataset: "blobs".to_string(),
            k: 3,
            n_per_class: 200,
            input_dim: 2,
            spread: 1.1,
            data_seed: 1,
            images: String::new(),
            labels: String::new(),
            train_frac: 0.8,
            heldout_frac: 0.1,
            test_frac: 0.1,
            hidden: Vec::new(),
            step_size: t.step_size,
            epochs: t.epochs,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            lr_decay: t.lr_decay,
            sigma_kind: "sandwich".to_string(),
            curvature_subsample: 0,
            integrator: "mf0".to_string(),
            mc_samples: 100_000,
            mc_seed: 0,
            ukf_alpha: 0.5,
            t_ens: 1.0,
            t_act: 1.0,
            lambda0: DEFAULT_LAMBDA0,
            n_bins: 10,
            ood_radius_factor: 2.5,
            ood_n: 200,
            tune_grid: 7,
            tune_t_min: 1e-3,
            tune_t_max: 1e3,
            objective: "nll".to_string(),
            bench_mc_sizes: vec![20, 100, 500],
            reference_samples: 1_000_000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match self.dataset.as_str() {
            "blobs" => {
                if self.k < 2 || self.n_per_class == 0 || self.input_dim < 2 {
                    return bad(format!(
                        "blobs need k >= 2, n_per_class >= 1, input_dim >= 2; got k={} n={} dim={}",
                        self.k, self.n_per_class, self.input_dim
                    ));
                }
                if !(self.spread >= 0.0 && self.spread.is_finite()) {
                    return bad(format!("spread must be non-negative, got {}", self.spread));
                }
            }
            "idx" => {
                if self.images.is_empty() || self.labels.is_empty() {
                    return bad("idx dataset needs --images and --labels paths".to_string());
                }
            }
            other => return bad(format!("unknown dataset kind {other:?}")),
        }
        for (name, v) in [
            ("train_frac", self.train_frac),
            ("heldout_frac", self.heldout_frac),
            ("test_frac", self.test_frac),
        ] {
            if !((0.0..=1.0).contains(&v)) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) || self.epochs == 0 {
            return bad(format!(
                "training needs positive step_size and epochs, got {} and {}",
                self.step_size, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".to_string());
        }
        self.sigma_kind.parse::<SigmaKind>()?;
        self.build_integrator()?;
        self.predictor_config()?;
        if self.n_bins == 0 {
            return bad("n_bins must be at least 1".to_string());
        }
        if !(self.ood_radius_factor > 1.0) {
            return bad(format!(
                "ood_radius_factor must exceed 1, got {}",
                self.ood_radius_factor
            ));
        }
        if self.tune_grid == 0 {
            return bad("tune_grid must be at least 1".to_string());
        }
        if !(self.tune_t_min > 0.0 && self.tune_t_max >= self.tune_t_min) {
            return bad(format!(
                "tuning range needs 0 < t_min <= t_max, got {} and {}",
                self.tune_t_min, self.tune_t_max
            ));
        }
        if self.objective.parse::<TuneObjective>().is_err() {
            return bad(format!("unknown objective {:?}", self.objective));
        }
        if self.bench_mc_sizes.is_empty() || self.bench_mc_sizes.contains(&0) {
            return bad("bench_mc_sizes must be non-empty positive counts".to_string());
        }
        if self.reference_samples == 0 {
            return bad("reference_samples must be at least 1".to_string());
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            step_size: self.step_size,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn build_integrator(&self) -> Result<Integrator> {
        match self.integrator.as_str() {
            "mf0" => Ok(Integrator::Mf0),
            "mf1" => Ok(Integrator::Mf1),
            "mf2" => Ok(Integrator::Mf2),
            "mc" => Ok(Integrator::Mc {
                n_samples: self.mc_samples,
                seed: self.mc_seed,
            }),
            "ukf" => Ok(Integrator::Ukf {
                alpha: self.ukf_alpha,
            }),
            "point-estimate" | "point" => Ok(Integrator::PointEstimate),
            other => Err(Error::InvalidConfig(format!(
                "unknown integrator {other:?} (expected mf0|mf1|mf2|mc|ukf|point-estimate)"
            ))),
        }
    }

    pub fn predictor_config(&self) -> Result<PredictorConfig> {
        let integrator = self.build_integrator()?;
        let temps = TemperatureConfig::new(self.t_ens, self.t_act)?;
        let scheme = integrator.scheme().unwrap_or(MfScheme::Mf0);
        PredictorConfig::new(integrator, temps, MfConfig::with_lambda0(scheme, self.lambda0)?)
    }

    fn sigma(&self) -> SigmaKind {
        self.sigma_kind.parse().expect("validated sigma kind")
    }

    fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.out_dir).join(name)
    }

    /// Key-value echo merged into report metadata.
    fn metadata(&self, pred: &PredictorConfig) -> BTreeMap<String, String> {
        let mut meta = pred.metadata();
        meta.insert("sigma_kind".to_string(), self.sigma_kind.clone());
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("data_seed".to_string(), self.data_seed.to_string());
        meta.insert("dataset".to_string(), self.dataset.clone());
        meta.insert("schema_version".to_string(), SCHEMA_VERSION.to_string());
        meta
    }
}

/// Predictive uncertainty for softmax classifiers via mean-field
/// Gaussian-softmax integrals, with curvature, jackknife, and OOD tooling.
#[derive(Debug, Parser)]
#[command(name = "mfgs", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Verb,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Train the MLP and write a checkpoint plus loss trace.
    Train,
    /// Build curvature matrices and the parameter covariance cache.
    Curvature,
    /// Evaluate in-domain calibration on the test split.
    Eval,
    /// Score the test split against a norm-shell OOD set.
    Ood,
    /// Grid-search the two temperatures on the held-out split.
    TuneTemps,
    /// Compare integrators against a Monte Carlo reference.
    ApproxBench,
}

/// Flag overrides; every field mirrors a RunConfig field and wins over
/// the config file when present.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON config file; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub n_per_class: Option<usize>,
    #[arg(long, global = true)]
    pub input_dim: Option<usize>,
    #[arg(long, global = true)]
    pub spread: Option<f64>,
    #[arg(long, global = true)]
    pub data_seed: Option<u64>,
    #[arg(long, global = true)]
    pub images: Option<String>,
    #[arg(long, global = true)]
    pub labels: Option<String>,
    #[arg(long, global = true)]
    pub train_frac: Option<f64>,
    #[arg(long, global = true)]
    pub heldout_frac: Option<f64>,
    #[arg(long, global = true)]
    pub test_frac: Option<f64>,
    /// Hidden layer widths, comma separated (e.g. 16,8).
    #[arg(long, global = true, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub step_size: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    pub lr_decay: Option<f64>,
    #[arg(long, global = true)]
    pub sigma_kind: Option<String>,
    #[arg(long, global = true)]
    pub curvature_subsample: Option<usize>,
    #[arg(long, global = true)]
    pub integrator: Option<String>,
    #[arg(long, global = true)]
    pub mc_samples: Option<usize>,
    #[arg(long, global = true)]
    pub mc_seed: Option<u64>,
    #[arg(long, global = true)]
    pub ukf_alpha: Option<f64>,
    #[arg(long, global = true)]
    pub t_ens: Option<f64>,
    #[arg(long, global = true)]
    pub t_act: Option<f64>,
    #[arg(long, global = true)]
    pub lambda0: Option<f64>,
    #[arg(long, global = true)]
    pub n_bins: Option<usize>,
    #[arg(long, global = true)]
    pub ood_radius_factor: Option<f64>,
    #[arg(long, global = true)]
    pub ood_n: Option<usize>,
    #[arg(long, global = true)]
    pub tune_grid: Option<usize>,
    #[arg(long, global = true)]
    pub tune_t_min: Option<f64>,
    #[arg(long, global = true)]
    pub tune_t_max: Option<f64>,
    /// Tuning objective: nll (minimize) or auroc (maximize).
    #[arg(long, global = true)]
    pub objective: Option<String>,
    /// Monte Carlo sample counts for approx-bench, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub bench_mc_sizes: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub reference_samples: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        take!(
            seed, out_dir, dataset, k, n_per_class, input_dim, spread, data_seed, images,
            labels, train_frac, heldout_frac, test_frac, hidden, step_size, epochs, batch_size,
            weight_decay, lr_decay, sigma_kind, curvature_subsample, integrator, mc_samples,
            mc_seed, ukf_alpha, t_ens, t_act, lambda0, n_bins, ood_radius_factor, ood_n,
            tune_grid, tune_t_min, tune_t_max, objective, bench_mc_sizes, reference_samples,
        );
    }
}

/// Resolve the effective config: defaults, then the JSON file, then flags.
pub fn resolve_config(ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &ov.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?
        }
        None => RunConfig::default(),
    };
    ov.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Exit code classification: 0 success, 2 config error, 3 data error,
/// 4 numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => 2,
        Error::Io { .. }
        | Error::Json { .. }
        | Error::BadMagic { .. }
        | Error::TruncatedFile { .. }
        | Error::CountMismatch { .. }
        | Error::BadData { .. }
        | Error::StaleCurvature { .. }
        | Error::EmptyInput(_)
        | Error::EmptyBatch(_)
        | Error::EmptyHeldout
        | Error::LengthMismatch { .. }
        | Error::InsufficientSamples { .. }
        | Error::DimensionMismatch { .. } => 3,
        Error::NotPositiveDefinite { .. }
        | Error::NoConvergence { .. }
        | Error::NegativeVariance(_)
        | Error::NegativeDifferenceVariance { .. }
        | Error::ZeroMass(_)
        | Error::NonFiniteLoss { .. } => 4,
    }
}

/// Parse flags, run the command, and translate errors to exit codes.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.overrides)?;
    match cli.command {
        Verb::Train => cmd_train(&cfg),
        Verb::Curvature => cmd_curvature(&cfg),
        Verb::Eval => cmd_eval(&cfg),
        Verb::Ood => cmd_ood(&cfg),
        Verb::TuneTemps => cmd_tune_temps(&cfg),
        Verb::ApproxBench => cmd_approx_bench(&cfg),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<LabeledBatch> {
    match cfg.dataset.as_str() {
        "blobs" => gen_blobs(cfg.k, cfg.n_per_class, cfg.input_dim, cfg.spread, cfg.data_seed),
        "idx" => load_idx(Path::new(&cfg.images), Path::new(&cfg.labels)),
        other => Err(Error::InvalidConfig(format!("unknown dataset kind {other:?}"))),
    }
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let data = load_dataset(cfg)?;
    split(
        &data,
        (cfg.train_frac, cfg.heldout_frac, cfg.test_frac),
        cfg.data_seed.wrapping_add(1),
    )
}

fn load_model(cfg: &RunConfig) -> Result<MlpModel> {
    MlpModel::load_checkpoint(&cfg.out_path(CHECKPOINT_FILE))
}

fn load_curvature(cfg: &RunConfig, model: &MlpModel) -> Result<CurvatureSet> {
    CurvatureSet::load_cache(&cfg.out_path(CURVATURE_FILE), model)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Leading comment lines carried by every run-owned CSV.
fn csv_preamble(cfg: &RunConfig) -> String {
    let echo = serde_json::to_string(cfg).expect("config serialization");
    format!("# schema_version={SCHEMA_VERSION}\n# config={echo}\n")
}

fn write_summary(cfg: &RunConfig, name: &str, command: &str, payload: serde_json::Value) -> Result<()> {
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": cfg,
        "result": payload,
    });
    let text = serde_json::to_string_pretty(&doc).expect("summary serialization");
    write_text(&cfg.out_path(name), &text)
}

/// Train on the train split and write checkpoint, loss trace, and summary.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let splits = load_split(cfg)?;
    let data = splits.train();
    let mut arch = vec![data.input_dim()];
    arch.extend_from_slice(&cfg.hidden);
    arch.push(data.k_classes());
    let init = MlpModel::init(&arch, cfg.seed)?;
    let (model, losses) = train(&init, data, &cfg.train_config())?;
    model.save_checkpoint(&cfg.out_path(CHECKPOINT_FILE))?;

    let mut trace = csv_preamble(cfg);
    trace.push_str("epoch,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        trace.push_str(&format!("{i},{loss}\n"));
    }
    write_text(&cfg.out_path("loss_trace.csv"), &trace)?;

    write_summary(
        cfg,
        "train_summary.json",
        "train",
        json!({
            "arch": arch,
            "train_size": data.len(),
            "heldout_size": splits.heldout().map_or(0, |h| h.len()),
            "test_size": splits.test().map_or(0, |t| t.len()),
            "initial_loss": losses.first(),
            "final_loss": losses.last(),
            "checkpoint_hash": crate::curvature::checkpoint_hash(&model),
        }),
    )
}

/// Build H, J, and Sigma from the train split and cache them.
pub fn cmd_curvature(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let model = load_model(cfg)?;
    let splits = load_split(cfg)?;
    let used;
    let curv_data = if cfg.curvature_subsample > 0 {
        used = subsample(
            splits.train(),
            cfg.curvature_subsample,
            cfg.data_seed.wrapping_add(3),
        )?;
        &used
    } else {
        splits.train()
    };
    let curv = CurvatureSet::compute(&model, curv_data, cfg.sigma())?;
    curv.save_cache(&cfg.out_path(CURVATURE_FILE))?;
    write_summary(
        cfg,
        "curvature_summary.json",
        "curvature",
        json!({
            "sigma_kind": cfg.sigma_kind,
            "epsilon": curv.epsilon(),
            "dim": curv.sigma().dim(),
            "samples_used": curv_data.len(),
            "source_hash": curv.source_hash(),
        }),
    )
}

fn report_files(cfg: &RunConfig, base: &str, command: &str, report: &EvalReport) -> Result<()> {
    write_summary(
        cfg,
        &format!("{base}.json"),
        command,
        serde_json::to_value(report).expect("report"),
    )?;
    let mut csv = csv_preamble(cfg);
    csv.push_str(EvalReport::csv_header());
    csv.push('\n');
    csv.push_str(&report.to_csv_row());
    csv.push('\n');
    write_text(&cfg.out_path(&format!("{base}.csv")), &csv)
}

/// Evaluate in-domain calibration on the test split.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let model = load_model(cfg)?;
    let curv = load_curvature(cfg, &model)?;
    let splits = load_split(cfg)?;
    let test = splits.require_test()?;
    let pred_cfg = cfg.predictor_config()?;
    let preds = predict_labeled(&model, &curv, &pred_cfg, test)?;
    let probs: Vec<ProbVector> = preds.iter().map(|p| p.probs.clone()).collect();
    let in_domain = evaluate_in_domain(&probs, test.labels(), cfg.n_bins)?;
    let report = EvalReport::new(in_domain, None, cfg.metadata(&pred_cfg));
    report_files(cfg, "eval_report", "eval", &report)?;
    write_text(
        &cfg.out_path("predictions.csv"),
        &predictions_csv(&preds, Some(test.labels()))?,
    )
}

fn scores_csv(cfg: &RunConfig, scores: &[f64]) -> String {
    let mut out = csv_preamble(cfg);
    out.push_str("index,score\n");
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!("{i},{s}\n"));
    }
    out
}

/// Score the test split against a generated norm-shell OOD set and report
/// the full detection panel alongside in-domain metrics.
pub fn cmd_ood(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let model = load_model(cfg)?;
    let curv = load_curvature(cfg, &model)?;
    let splits = load_split(cfg)?;
    let test = splits.require_test()?;
    let shell = gen_ood_shell(
        test,
        cfg.ood_radius_factor,
        cfg.ood_n,
        cfg.data_seed.wrapping_add(2),
    );
    let pred_cfg = cfg.predictor_config()?;
    let preds_in = predict_labeled(&model, &curv, &pred_cfg, test)?;
    let preds_out = predict_batch(&model, &curv, &pred_cfg, &shell)?;
    let scores_in: Vec<f64> = preds_in.iter().map(|p| p.ood_score).collect();
    let scores_out: Vec<f64> = preds_out.iter().map(|p| p.ood_score).collect();

    let probs: Vec<ProbVector> = preds_in.iter().map(|p| p.probs.clone()).collect();
    let in_domain = evaluate_in_domain(&probs, test.labels(), cfg.n_bins)?;
    let ood = evaluate_ood(&scores_in, &scores_out)?;
    let report = EvalReport::new(in_domain, Some(ood), cfg.metadata(&pred_cfg));
    report_files(cfg, "ood_report", "ood", &report)?;
    write_text(&cfg.out_path("scores_in.csv"), &scores_csv(cfg, &scores_in))?;
    write_text(&cfg.out_path("scores_out.csv"), &scores_csv(cfg, &scores_out))
}

/// What temperature tuning optimizes on the held-out split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneObjective {
    /// Minimize held-out negative log-likelihood.
    Nll,
    /// Maximize held-out OOD AUROC.
    Auroc,
}

impl std::str::FromStr for TuneObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(TuneObjective::Nll),
            "auroc" => Ok(TuneObjective::Auroc),
            other => Err(Error::InvalidConfig(format!(
                "unknown objective {other:?} (expected nll|auroc)"
            ))),
        }
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub t_ens: f64,
    pub t_act: f64,
    pub value: f64,
}

/// Log-spaced grid from lo to hi inclusive; a single point degenerates
/// to lo.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1 && lo > 0.0 && hi >= lo);
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                let t = i as f64 / (n - 1) as f64;
                (lo.ln() + t * (hi.ln() - lo.ln())).exp()
            }
        })
        .collect()
}

/// Exhaustive search over the temperature grid. Exact value ties break
/// toward the point closest to (1, 1) in log space; remaining ties keep
/// the earlier point in row-major (t_ens outer, t_act inner) order.
pub fn grid_search(
    ens_values: &[f64],
    act_values: &[f64],
    minimize: bool,
    mut eval: impl FnMut(f64, f64) -> Result<f64>,
) -> Result<(TemperatureConfig, f64, Vec<GridPoint>)> {
    assert!(!ens_values.is_empty() && !act_values.is_empty());
    let mut grid = Vec::with_capacity(ens_values.len() * act_values.len());
    let mut best: Option<(TemperatureConfig, f64, f64)> = None;
    for &t_ens in ens_values {
        for &t_act in act_values {
            let value = eval(t_ens, t_act)?;
            grid.push(GridPoint { t_ens, t_act, value });
            let dist = t_ens.ln().powi(2) + t_act.ln().powi(2);
            let wins = match &best {
                None => true,
                Some((_, best_value, best_dist)) => {
                    let improves = if minimize {
                        value < *best_value
                    } else {
                        value > *best_value
                    };
                    improves || (value == *best_value && dist < *best_dist)
                }
            };
            if wins {
                best = Some((TemperatureConfig::new(t_ens, t_act)?, value, dist));
            }
        }
    }
    let (temps, value, _) = best.expect("non-empty grid");
    Ok((temps, value, grid))
}

/// Result of a temperature tuning run.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub best: TemperatureConfig,
    pub value: f64,
    pub objective: TuneObjective,
    pub grid: Vec<GridPoint>,
}

/// Grid-search T_ens and T_act for the given integrator on held-out data.
/// The auroc objective needs held-out OOD inputs.
pub fn tune_temperatures(
    model: &MlpModel,
    curv: &CurvatureSet,
    base: &PredictorConfig,
    heldout: &LabeledBatch,
    ood_inputs: Option<&Matrix>,
    objective: TuneObjective,
    grid_n: usize,
    t_min: f64,
    t_max: f64,
) -> Result<TuneOutcome> {
    let values = log_grid(t_min, t_max, grid_n);
    let minimize = matches!(objective, TuneObjective::Nll);
    if matches!(objective, TuneObjective::Auroc) && ood_inputs.is_none() {
        return Err(Error::EmptyInput("held-out OOD inputs for auroc objective"));
    }
    let (best, value, grid) = grid_search(&values, &values, minimize, |t_ens, t_act| {
        let cfg = PredictorConfig {
            integrator: base.integrator,
            temps: TemperatureConfig::new(t_ens, t_act)?,
            mf: base.mf,
        };
        match objective {
            TuneObjective::Nll => {
                let preds = predict_labeled(model, curv, &cfg, heldout)?;
                let probs: Vec<ProbVector> = preds.iter().map(|p| p.probs.clone()).collect();
                Ok(evaluate_in_domain(&probs, heldout.labels(), 10)?.nll)
            }
            TuneObjective::Auroc => {
                let shell = ood_inputs.expect("checked above");
                let preds_in = predict_labeled(model, curv, &cfg, heldout)?;
                let preds_out = predict_batch(model, curv, &cfg, shell)?;
                let si: Vec<f64> = preds_in.iter().map(|p| p.ood_score).collect();
                let so: Vec<f64> = preds_out.iter().map(|p| p.ood_score).collect();
                auroc(&si, &so)
            }
        }
    })?;
    Ok(TuneOutcome {
        best,
        value,
        objective,
        grid,
    })
}

/// Tune temperatures on the held-out split and write the grid and winner.
pub fn cmd_tune_temps(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let model = load_model(cfg)?;
    let curv = load_curvature(cfg, &model)?;
    let splits = load_split(cfg)?;
    let heldout = splits.require_heldout()?;
    let objective: TuneObjective = cfg.objective.parse()?;
    let shell;
    let ood_inputs = match objective {
        TuneObjective::Auroc => {
            shell = gen_ood_shell(
                heldout,
                cfg.ood_radius_factor,
                cfg.ood_n,
                cfg.data_seed.wrapping_add(2),
            );
            Some(&shell)
        }
        TuneObjective::Nll => None,
    };
    let base = cfg.predictor_config()?;
    let outcome = tune_temperatures(
        &model,
        &curv,
        &base,
        heldout,
        ood_inputs,
        objective,
        cfg.tune_grid,
        cfg.tune_t_min,
        cfg.tune_t_max,
    )?;

    let mut grid_csv = csv_preamble(cfg);
    grid_csv.push_str("t_ens,t_act,value\n");
    for p in &outcome.grid {
        grid_csv.push_str(&format!("{},{},{}\n", p.t_ens, p.t_act, p.value));
    }
    write_text(&cfg.out_path("tune_grid.csv"), &grid_csv)?;

    write_summary(
        cfg,
        "best_temps.json",
        "tune-temps",
        json!({
            "objective": outcome.objective,
            "t_ens": outcome.best.t_ens,
            "t_act": outcome.best.t_act,
            "value": outcome.value,
            "grid_size": outcome.grid.len(),
        }),
    )
}

fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct BenchRow {
    integrator: String,
    m: usize,
    median_tv: f64,
    mean_tv: f64,
    max_tv: f64,
    error_rate: f64,
    nll: f64,
    ece: f64,
    micros_per_example: f64,
}

fn bench_contender(
    name: &str,
    m: usize,
    activations: &[GaussianActivation],
    reference: &[ProbVector],
    labels: &[usize],
    n_bins: usize,
    integrate: impl Fn(&GaussianActivation) -> Result<ProbVector>,
) -> Result<BenchRow> {
    let start = Instant::now();
    let probs: Vec<ProbVector> = activations.iter().map(&integrate).collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut tvs: Vec<f64> = probs
        .iter()
        .zip(reference)
        .map(|(p, r)| tv_distance(p.as_slice(), r.as_slice()))
        .collect();
    let mean_tv = tvs.iter().sum::<f64>() / tvs.len() as f64;
    let max_tv = tvs.iter().cloned().fold(0.0, f64::max);
    let median_tv = median(&mut tvs);
    let metrics = evaluate_in_domain(&probs, labels, n_bins)?;
    Ok(BenchRow {
        integrator: name.to_string(),
        m,
        median_tv,
        mean_tv,
        max_tv,
        error_rate: metrics.error_rate,
        nll: metrics.nll,
        ece: metrics.ece,
        micros_per_example: 1e6 * elapsed / activations.len() as f64,
    })
}

/// Compare every integrator against a large-sample Monte Carlo reference
/// on the test split: pointwise total variation, downstream metrics, and
/// per-example timing (timing in its own file).
pub fn cmd_approx_bench(cfg: &RunConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let model = load_model(cfg)?;
    let curv = load_curvature(cfg, &model)?;
    let splits = load_split(cfg)?;
    let test = splits.require_test()?;
    let temps = TemperatureConfig::new(cfg.t_ens, cfg.t_act)?;
    let activations: Vec<GaussianActivation> = (0..test.len())
        .map(|i| logit_gaussian(&model, &curv, &temps, test.input(i)))
        .collect::<Result<_>>()?;
    let reference: Vec<ProbVector> = activations
        .iter()
        .map(|g| mc_integral(g, cfg.reference_samples, cfg.mc_seed))
        .collect::<Result<_>>()?;
    let labels = test.labels();

    let mut rows = Vec::new();
    for scheme in [MfScheme::Mf0, MfScheme::Mf1, MfScheme::Mf2] {
        let mf = MfConfig::with_lambda0(scheme, cfg.lambda0)?;
        rows.push(bench_contender(
            &scheme.to_string(),
            0,
            &activations,
            &reference,
            labels,
            cfg.n_bins,
            |g| renormalize(&mf_estimate(g, &mf)?),
        )?);
    }
    let ukf_cfg = UkfConfig::new(cfg.ukf_alpha)?;
    rows.push(bench_contender(
        "ukf",
        0,
        &activations,
        &reference,
        labels,
        cfg.n_bins,
        |g| ukf_integral(g, &ukf_cfg),
    )?);
    rows.push(bench_contender(
        "point-estimate",
        0,
        &activations,
        &reference,
        labels,
        cfg.n_bins,
        |g| Ok(softmax(g.mu())),
    )?);
    for &m in &cfg.bench_mc_sizes {
        rows.push(bench_contender(
            "mc",
            m,
            &activations,
            &reference,
            labels,
            cfg.n_bins,
            |g| mc_integral(g, m, cfg.mc_seed),
        )?);
    }

    let mut metrics_csv = csv_preamble(cfg);
    metrics_csv.push_str("integrator,m,median_tv,mean_tv,max_tv,error_rate,nll,ece\n");
    for r in &rows {
        metrics_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.integrator, r.m, r.median_tv, r.mean_tv, r.max_tv, r.error_rate, r.nll, r.ece
        ));
    }
    write_text(&cfg.out_path("bench_metrics.csv"), &metrics_csv)?;

    let mut timing_csv = csv_preamble(cfg);
    timing_csv.push_str("integrator,m,micros_per_example\n");
    for r in &rows {
        timing_csv.push_str(&format!(
            "{},{},{}\n",
            r.integrator, r.m, r.micros_per_example
        ));
    }
    write_text(&cfg.out_path("bench_timing.csv"), &timing_csv)?;

    write_summary(
        cfg,
        "bench_summary.json",
        "approx-bench",
        json!({
            "reference_samples": cfg.reference_samples,
            "test_size": test.len(),
            "contenders": rows.len(),
        }),
    )
}
