//! Run a whole experiment from a JSON config and emit the report tables.
//!
//! Usage: `cargo run --example experiment_pipeline [config.json]`. Without an
//! argument a small synthetic QUTE run is used.

use qutelab::experiment::{emit_report, parse_config, parse_config_str, run_experiment, ReportFormat, RunOptions};

fn main() -> qutelab::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => parse_config(path)?,
        None => parse_config_str(
            r#"{"dataset": "synth", "method": "qute", "seeds": [0, 1],
                "train": {"epochs": 2, "batch_size": 32, "initial_lr": 0.003, "augment": false},
                "output_dir": "runs/example"}"#,
        )?,
    };
    let manifest = run_experiment(&cfg, &RunOptions::new("data"))?;
    for s in &manifest.seeds {
        let c = s.calibration.as_ref().expect("calibration task enabled");
        println!("seed {}: F1 {:.4} NLL {:.4} (cached model: {})", s.seed, c.f1, c.nll, s.cached);
    }
    for f in emit_report(&manifest, ReportFormat::Csv, &cfg.output_dir.join("report"))? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
