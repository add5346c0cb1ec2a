//! Read the MNIST IDX files and print a digit as ASCII art.
//!
//! Usage: `cargo run --example mnist_idx [data_dir]` (default `data`).

use std::path::PathBuf;

use qutelab::data::load_idx;

fn main() -> qutelab::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into())).join("mnist");
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    let [_, h, w] = test.shape();
    println!("{} images of {h}x{w}, {} classes", test.len(), test.num_classes());
    println!("label {}", test.labels()[0]);
    for row in test.image(0).chunks(w) {
        println!(
            "{}",
            row.iter()
                .map(|&p| if p > 128 {
                    '#'
                } else if p > 32 {
                    '+'
                } else {
                    '.'
                })
                .collect::<String>()
        );
    }
    Ok(())
}
