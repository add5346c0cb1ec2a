//! Sliding-window accuracy-drop monitor over an in-distribution stream
//! followed by a degraded one: per-position trace, PR sweep and AUPRC.

use indexmap::IndexMap;
use qutelab::monitor::{accuracy_drop_auprc, event_trace, rho_grid, IdStats, Outcomes, PrAggregation, Verdict};
use qutelab::tensor::Rng;

fn stream(rng: &mut Rng, n: usize, accuracy: f64, confidence: f64) -> qutelab::Result<Outcomes> {
    let correct: Vec<bool> = (0..n).map(|_| rng.next_f64() < accuracy).collect();
    let conf = correct
        .iter()
        .map(|&c| (confidence + if c { 0.05 } else { -0.15 } + 0.05 * rng.next_f64()).clamp(0.0, 1.0))
        .collect();
    Outcomes::new(conf, correct)
}

fn main() -> qutelab::Result<()> {
    let mut rng = Rng::new(5, 0);
    let id = stream(&mut rng, 2000, 0.97, 0.92)?;
    let shifted = stream(&mut rng, 2000, 0.55, 0.6)?;
    let stats = IdStats::from_outcomes(&id, 100)?;
    println!(
        "ID windowed accuracy {:.3} ± {:.3}; drop below {:.3}",
        stats.mu_id,
        stats.sigma_id,
        stats.drop_threshold()
    );

    let trace = event_trace(&id.then(&shifted), 0.8, &stats)?;
    let first = trace.iter().find(|e| e.verdict == Verdict::Tp).expect("the drop is detected");
    println!(
        "first detection at position {} (confidence {:.3}, accuracy {:.3})",
        first.position, first.c_sw, first.a_sw
    );

    let cids = IndexMap::from([("shifted".to_string(), shifted)]);
    let result = accuracy_drop_auprc(&id, &cids, 100, &rho_grid(), PrAggregation::Pooled)?;
    print!("{}", result.pr_csv());
    println!("AUPRC {:.4}", result.auprc);
    Ok(())
}
