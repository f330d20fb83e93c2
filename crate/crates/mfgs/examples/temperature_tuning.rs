//! Tune the two global temperatures on a held-out split: the ensemble
//! temperature scales the parameter covariance, the activation temperature
//! scales the logits. Shows the grid search and how the held-out objective
//! transfers to the test set.
//!
//! Run with: cargo run --example temperature_tuning

use mfgs::cli::{tune_temperatures, TuneObjective};
use mfgs::curvature::{CurvatureSet, SigmaKind};
use mfgs::datasets::{gen_blobs, split};
use mfgs::gsint::MfScheme;
use mfgs::metrics::evaluate_in_domain;
use mfgs::model::{train, MlpModel, TrainConfig};
use mfgs::predictor::{predict_labeled, PredictorConfig, TemperatureConfig};

fn main() -> mfgs::Result<()> {
    let data = gen_blobs(3, 200, 2, 0.9, 21)?;
    let splits = split(&data, (0.8, 0.1, 0.1), 22)?;
    let heldout = splits.require_heldout()?;
    let test = splits.require_test()?;

    let init = MlpModel::init(&[2, 32, 3], 20)?;
    let cfg = TrainConfig {
        step_size: 0.05,
        epochs: 1500,
        seed: 20,
        ..TrainConfig::default()
    };
    let (model, _) = train(&init, splits.train(), &cfg)?;
    let curv = CurvatureSet::compute(&model, splits.train(), SigmaKind::Sandwich)?;

    let base = PredictorConfig::mean_field(MfScheme::Mf0, TemperatureConfig::unit());
    let outcome = tune_temperatures(
        &model,
        &curv,
        &base,
        heldout,
        None,
        TuneObjective::Nll,
        7,
        1e-3,
        1e3,
    )?;
    println!(
        "searched {} grid points, best held-out NLL {:.4} at t_ens = {:.4}, t_act = {:.4}\n",
        outcome.grid.len(),
        outcome.value,
        outcome.best.t_ens,
        outcome.best.t_act
    );

    for (name, temps) in [
        ("unit temperatures", TemperatureConfig::unit()),
        ("tuned temperatures", outcome.best),
    ] {
        let pred_cfg = PredictorConfig::mean_field(MfScheme::Mf0, temps);
        let preds = predict_labeled(&model, &curv, &pred_cfg, test)?;
        let probs: Vec<_> = preds.iter().map(|p| p.probs.clone()).collect();
        let m = evaluate_in_domain(&probs, test.labels(), 10)?;
        println!(
            "  {name:18} test error {:5.2}%   test NLL {:.4}",
            m.error_rate, m.nll
        );
    }

    println!("\nShrinking the ensemble temperature below one widens the");
    println!("parameter covariance, softening this overtrained model's");
    println!("predictions; the held-out improvement carries over to the");
    println!("test split. Tuning never touches the test set.");
    Ok(())
}
