//! Score out-of-distribution detection: train on blobs, then ask each
//! predictor to separate in-domain test points from points drawn far
//! outside the training radius, using max probability as the score.
//!
//! Run with: cargo run --example ood_shell

use mfgs::curvature::{CurvatureSet, SigmaKind};
use mfgs::datasets::{gen_blobs, gen_ood_shell, split};
use mfgs::gsint::MfScheme;
use mfgs::metrics::evaluate_ood;
use mfgs::model::{train, MlpModel, TrainConfig};
use mfgs::predictor::{predict_batch, predict_labeled, PredictorConfig, TemperatureConfig};

fn main() -> mfgs::Result<()> {
    let data = gen_blobs(3, 200, 2, 1.1, 1)?;
    let splits = split(&data, (0.8, 0.1, 0.1), 2)?;
    let test = splits.require_test()?;
    let shell = gen_ood_shell(test, 2.5, 200, 3);

    let init = MlpModel::init(&[2, 32, 3], 0)?;
    let cfg = TrainConfig {
        step_size: 0.05,
        epochs: 800,
        ..TrainConfig::default()
    };
    let (model, _) = train(&init, splits.train(), &cfg)?;
    let curv = CurvatureSet::compute(&model, splits.train(), SigmaKind::Sandwich)?;

    println!(
        "scoring {} in-domain vs {} far-shell points (max probability)\n",
        test.len(),
        shell.rows()
    );
    let temps = TemperatureConfig::unit();
    for (name, pred_cfg) in [
        ("point estimate", PredictorConfig::point_estimate(temps)),
        ("mf0", PredictorConfig::mean_field(MfScheme::Mf0, temps)),
    ] {
        let inside = predict_labeled(&model, &curv, &pred_cfg, test)?;
        let outside = predict_batch(&model, &curv, &pred_cfg, &shell)?;
        let score = |p: &mfgs::predictor::Prediction| p.ood_score;
        let m = evaluate_ood(
            &inside.iter().map(score).collect::<Vec<_>>(),
            &outside.iter().map(score).collect::<Vec<_>>(),
        )?;
        println!(
            "  {name:14} AUROC {:5.2}%   AUPR-in {:5.2}%   AUPR-out {:5.2}%   detection {:5.2}%",
            m.auroc, m.aupr_in, m.aupr_out, m.detection_accuracy
        );
    }

    println!("\nFar from the data the point estimate stays maximally");
    println!("confident, so its scores barely separate the groups. The");
    println!("variance-aware score degrades more gracefully because logit");
    println!("variance grows with distance from the training features.");
    Ok(())
}
