//! Attach early-exit / early-view head pairs, train with per-batch weight
//! transfer, strip the early exits and predict with the early-view ensemble.

use qutelab::data::synth_dataset;
use qutelab::graph::presets::{after_layer, cnn4, Cnn4Config};
use qutelab::metrics::CalibrationReport;
use qutelab::monitor::predict_batch;
use qutelab::qute::{attach_qute_heads, train_qute, LossWeights, QutePredictor};
use qutelab::train::{init_rng, TrainConfig};

fn main() -> qutelab::Result<()> {
    let (train, valid) = synth_dataset(4000, 10, 1)?.split(0.1, 0);
    let test = synth_dataset(500, 10, 2)?;
    let trunk = cnn4(&Cnn4Config::synth());
    let locations = [after_layer(&trunk, 1)?, after_layer(&trunk, 2)?];
    let mut graph = attach_qute_heads(&trunk, train.shape(), 10, 2, &locations, &mut init_rng(0))?;
    let weights = LossWeights::for_graph(&graph, 3.0, 0.5)?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 32,
        initial_lr: 0.003,
        augment: false,
        ..TrainConfig::default()
    };
    let log = train_qute(&mut graph, &train, &valid, &cfg, &weights)?;
    for exit in graph.spec().exits.iter().map(|e| e.name.clone()) {
        let r = log.record(cfg.epochs - 1, &exit, "valid").expect("logged");
        println!("{exit:>6}: valid accuracy {:.3}", r.accuracy);
    }
    let predictor = QutePredictor::new(&graph)?;
    println!(
        "params: trained {}, deployed {}",
        graph.param_count(false),
        predictor.graph.param_count(false)
    );
    let report = CalibrationReport::compute(&predict_batch(&predictor, &test, 256)?, 15)?;
    println!("ensemble test F1 {:.4}  NLL {:.4}  ECE {:.4}", report.f1, report.nll, report.ece);
    Ok(())
}
