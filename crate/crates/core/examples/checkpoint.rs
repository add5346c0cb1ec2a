//! Save a multi-exit graph, load it back and confirm identical logits.

use qutelab::graph::presets::{after_layer, cnn4, Cnn4Config};
use qutelab::graph::{load_checkpoint, save_checkpoint, Mode};
use qutelab::qute::attach_qute_heads;
use qutelab::tensor::{Rng, Tensor};

fn main() -> qutelab::Result<()> {
    let trunk = cnn4(&Cnn4Config::mnist());
    let locations = [after_layer(&trunk, 1)?, after_layer(&trunk, 2)?];
    let graph = attach_qute_heads(&trunk, [1, 28, 28], 10, 2, &locations, &mut Rng::new(0, 0))?;
    let path = std::env::temp_dir().join("qutelab-example.qte");
    save_checkpoint(&graph, &path)?;
    let loaded = load_checkpoint(&path)?;
    let x = Tensor::random_uniform(&[4, 1, 28, 28], 0.0, 1.0, &mut Rng::new(1, 0));
    let a = graph.predict_logits(&x, 4, Mode::Eval, &mut Rng::new(0, 0))?;
    let b = loaded.predict_logits(&x, 4, Mode::Eval, &mut Rng::new(0, 0))?;
    for (name, l) in &a {
        println!("{name:>6}: identical after reload: {}", l.data() == b[name].data());
    }
    println!("{} bytes at {}", std::fs::metadata(&path)?.len(), path.display());
    Ok(())
}
