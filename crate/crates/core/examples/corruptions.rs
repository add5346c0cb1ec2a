//! Apply every corruption at each severity and write one corrupted set to
//! IDX files.

use qutelab::data::{build_fixed_severity_dataset, save_idx, synth_dataset, CorruptionKind};

fn mean_abs_change(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
}

fn main() -> qutelab::Result<()> {
    let clean = synth_dataset(200, 10, 4)?;
    println!("{:<14} mean |pixel change| at severity 1..5", "corruption");
    for kind in CorruptionKind::ALL {
        let changes: Vec<String> = (1..=5)
            .map(|s| build_fixed_severity_dataset(&clean, kind, s, 7).map(|d| format!("{:6.1}", mean_abs_change(clean.images(), d.images()))))
            .collect::<qutelab::Result<_>>()?;
        println!("{:<14} {}", kind.name(), changes.join(" "));
    }
    let dir = std::env::temp_dir().join("qutelab-corruptions");
    std::fs::create_dir_all(&dir)?;
    let fog = build_fixed_severity_dataset(&clean, CorruptionKind::ALL[0], 5, 7)?;
    save_idx(&fog, dir.join("images-idx3-ubyte"), dir.join("labels-idx1-ubyte"))?;
    println!("wrote {} images to {}", fog.len(), dir.display());
    Ok(())
}
