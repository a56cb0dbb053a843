use std::time::Instant;

use mmct_core::episodes::{make_folds, sample_episode, Phase};
use mmct_core::pipeline::{grad_check_model_group, Model, ModelConfig, MODEL_CHECK_STEPS};

#[test]
fn probe() {
    let cfg = ModelConfig::tiny(18);
    let model = Model::<f64>::new(cfg).unwrap();
    let folds = make_folds(8, 4, 5).unwrap();
    let ep = sample_episode::<f64>(&folds[0], Phase::MetaTrain, 1, 2, 16, 16, 19).unwrap();
    let t0 = Instant::now();
    for group in model.param_groups() {
        let t = Instant::now();
        let err = grad_check_model_group(&model, &ep, &group, &MODEL_CHECK_STEPS, None).unwrap();
        println!(
            "group={group:<10} rel_err={err:.3e}  ({:.1}s)",
            t.elapsed().as_secs_f64()
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
