//! Calibration metrics and a reliability diagram for a hand-made batch, then
//! temperature scaling of overconfident logits.

use qutelab::baselines::{apply_temperature, fit_temperature, scaled_nll};
use qutelab::metrics::{CalibrationReport, PredictionBatch};
use qutelab::tensor::{Rng, Tensor};

fn main() -> qutelab::Result<()> {
    let mut rng = Rng::new(3, 0);
    let n = 2000;
    let classes = 5;
    // Logits that point at the right class 70% of the time, scaled far too
    // sharply for that accuracy.
    let mut labels = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n * classes);
    for _ in 0..n {
        let y = rng.below(classes);
        let favoured = if rng.next_f64() < 0.7 { y } else { rng.below(classes) };
        for j in 0..classes {
            logits.push(if j == favoured { 8.0 } else { 8.0 * rng.next_f64() as f32 - 4.0 });
        }
        labels.push(y);
    }
    let logits = Tensor::new(vec![n, classes], logits)?;

    let raw = PredictionBatch::new(apply_temperature(&logits, qutelab::baselines::Temperature::new(1.0)?), labels.clone())?;
    let report = CalibrationReport::compute(&raw, 10)?;
    println!(
        "uncalibrated: accuracy {:.3} ECE {:.4} Brier {:.4} NLL {:.4}",
        report.accuracy, report.ece, report.brier, report.nll
    );
    print!("{}", report.bins_csv());

    let t = fit_temperature(&logits, &labels)?;
    let scaled = PredictionBatch::new(apply_temperature(&logits, t), labels.clone())?;
    let after = CalibrationReport::compute(&scaled, 10)?;
    println!(
        "T = {:.3}: ECE {:.4} NLL {:.4} (check {:.4})",
        t.value(),
        after.ece,
        after.nll,
        scaled_nll(&logits, &labels, t.value())
    );
    Ok(())
}
