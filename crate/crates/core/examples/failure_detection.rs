//! Instance-level failure detection: separate correct predictions from
//! mistakes and from out-of-distribution inputs by confidence.

use qutelab::baselines::train_base;
use qutelab::baselines::BasePredictor;
use qutelab::data::{build_fixed_severity_dataset, synth_dataset, CorruptionKind};
use qutelab::ensemble::Predictor;
use qutelab::experiment::noise_dataset;
use qutelab::graph::presets::{cnn4, Cnn4Config};
use qutelab::monitor::{failure_tasks, predict_batch};
use qutelab::train::TrainConfig;

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
    let (graph, _) = train_base(&cnn4(&Cnn4Config::synth()), train.shape(), 10, &train, &valid, &cfg)?;
    let model = BasePredictor { graph };
    let id = predict_batch(&model, &test, 256)?;
    let cid = predict_batch(&model, &build_fixed_severity_dataset(&test, CorruptionKind::ALL[1], 5, 3)?, 256)?;
    let ood = noise_dataset(500, test.shape(), 9)?;
    let ood_conf: Vec<f64> = model.predict(&ood.all_tensor())?.iter().map(|p| p.confidence).collect();
    let scores = failure_tasks(&id, &cid, &ood_conf)?;
    println!("ID accuracy {:.3}, corrupted accuracy {:.3}", id.accuracy(), cid.accuracy());
    println!("AUROC correct vs incorrect: {:.4}", scores.id_correct_vs_incorrect);
    println!("AUROC correct vs OOD:       {:.4}", scores.id_correct_vs_ood);
    Ok(())
}
