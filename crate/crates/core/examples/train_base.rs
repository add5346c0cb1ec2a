//! Train the single-exit CNN on the synthetic shape task and report test metrics.

use qutelab::baselines::{train_base, BasePredictor};
use qutelab::data::synth_dataset;
use qutelab::graph::presets::{cnn4, Cnn4Config};
use qutelab::metrics::CalibrationReport;
use qutelab::monitor::predict_batch;
use qutelab::train::TrainConfig;

fn main() -> qutelab::Result<()> {
    let (train, valid) = synth_dataset(4000, 10, 1)?.split(0.1, 0);
    let test = synth_dataset(500, 10, 2)?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 32,
        initial_lr: 0.003,
        augment: false,
        ..TrainConfig::default()
    };
    let (graph, log) = train_base(&cnn4(&Cnn4Config::synth()), train.shape(), 10, &train, &valid, &cfg)?;
    print!("{}", log.to_csv());
    let report = CalibrationReport::compute(&predict_batch(&BasePredictor { graph }, &test, 256)?, 15)?;
    println!("test F1 {:.4}  NLL {:.4}  ECE {:.4}", report.f1, report.nll, report.ece);
    Ok(())
}
