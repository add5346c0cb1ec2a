//! The comparison methods on the synthetic task: deep ensemble, Monte Carlo
//! dropout and an early-exit ensemble, each scored for calibration.

use qutelab::baselines::{build_ee_ensemble, build_mcd, train_deep, train_ee_ensemble, train_single_exit, EePredictor, McdPredictor};
use qutelab::data::synth_dataset;
use qutelab::ensemble::Predictor;
use qutelab::graph::presets::{after_layer, cnn4, Cnn4Config};
use qutelab::metrics::CalibrationReport;
use qutelab::monitor::predict_batch;
use qutelab::train::{init_rng, TrainConfig};

fn main() -> qutelab::Result<()> {
    let (train, valid) = synth_dataset(2000, 10, 1)?.split(0.1, 0);
    let test = synth_dataset(500, 10, 2)?;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        initial_lr: 0.003,
        augment: false,
        ..TrainConfig::default()
    };
    let trunk = cnn4(&Cnn4Config::synth());
    let locations = [after_layer(&trunk, 1)?, after_layer(&trunk, 2)?];
    let shape = train.shape();

    let deep = train_deep(&trunk, shape, 10, &[0, 1], &train, &valid, &cfg, false)?;
    let mut mcd = build_mcd(&trunk, shape, 10, &locations, 0.1, &mut init_rng(0))?;
    train_single_exit(&mut mcd, &train, &valid, &cfg)?;
    let mut ee = build_ee_ensemble(&trunk, shape, 10, &locations, 64, &mut init_rng(0))?;
    train_ee_ensemble(&mut ee, &train, &valid, &cfg)?;

    let methods: [(&str, Box<dyn Predictor>); 3] = [
        ("deep ensemble", Box::new(deep)),
        (
            "mc-dropout",
            Box::new(McdPredictor {
                graph: mcd,
                passes: 4,
                seed: 0,
            }),
        ),
        ("ee-ensemble", Box::new(EePredictor { graph: ee })),
    ];
    for (name, p) in methods {
        let r = CalibrationReport::compute(&predict_batch(p.as_ref(), &test, 256)?, 15)?;
        println!("{name:<14} F1 {:.4}  NLL {:.4}  ECE {:.4}  Brier {:.4}", r.f1, r.nll, r.ece, r.brier);
    }
    Ok(())
}
