//! Parameter and FLOP budgets of every method on the MNIST architecture,
//! trained versus deployed.

use qutelab::baselines::{build_ee_ensemble, build_mcd};
use qutelab::graph::presets::{after_layer, base_spec, cnn4, Cnn4Config};
use qutelab::graph::{build_graph, NetworkGraph};
use qutelab::qute::{attach_qute_heads, strip_for_inference};
use qutelab::tensor::Rng;

fn row(name: &str, g: &NetworkGraph, members: usize) {
    println!(
        "{name:<14} {:>9} {:>9} {:>12} {:>12}",
        members * g.param_count(false),
        members * g.param_count(true),
        members * g.flops_estimate(false),
        members * g.flops_estimate(true)
    );
}

fn main() -> qutelab::Result<()> {
    let k = 2;
    let input = [1, 28, 28];
    let trunk = cnn4(&Cnn4Config::mnist());
    let locations: Vec<String> = (1..=k).map(|l| after_layer(&trunk, l)).collect::<qutelab::Result<_>>()?;
    let rng = &mut Rng::new(0, 0);
    let base = build_graph(base_spec(&trunk, input, 10), rng)?;
    let qute = attach_qute_heads(&trunk, input, 10, k, &locations, rng)?;
    println!("{:<14} {:>9} {:>9} {:>12} {:>12}", "method", "params", "deployed", "flops", "deployed");
    row("base", &base, 1);
    row("qute", &qute, 1);
    row("qute stripped", &strip_for_inference(&qute)?, 1);
    row("ee-ensemble", &build_ee_ensemble(&trunk, input, 10, &locations, 64, rng)?, 1);
    row("mc-dropout", &build_mcd(&trunk, input, 10, &locations, 0.1, rng)?, 1);
    row("deep ensemble", &base, k);
    Ok(())
}
