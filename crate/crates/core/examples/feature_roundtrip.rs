//! Exports a synthetic corpus as a feature directory (manifest plus one
//! matrix file per modality), reads it back, and checks that the model sees
//! the same inputs: fused features and the first-step loss match.
//!
//! cargo run --release --example feature_roundtrip -- [csv|bin]

use causal_sarcasm::config::ModelConfig;
use causal_sarcasm::data::{export_features_as, generate_synthetic_dataset, ingest_features, SyntheticCorpusSpec};
use causal_sarcasm::features::MatrixFormat;
use causal_sarcasm::train::Trainer;

fn main() -> anyhow::Result<()> {
    let format = match std::env::args().nth(1).as_deref() {
        Some("bin") => MatrixFormat::Bin,
        _ => MatrixFormat::Csv,
    };
    let cfg = ModelConfig::default();
    let (data, _) = generate_synthetic_dataset(&SyntheticCorpusSpec { num_samples: 8, ..Default::default() }, &cfg)?;
    let dir = tempfile::tempdir()?;
    export_features_as(&data, cfg.vocab_size, dir.path(), format)?;
    let manifest = std::fs::read_to_string(dir.path().join("manifest.csv"))?;
    println!("{}", manifest.lines().take(3).collect::<Vec<_>>().join("\n"));
    let back = ingest_features(dir.path(), &cfg)?;
    println!("exported {} samples, ingested {}", data.len(), back.len());

    let mut a = Trainer::new(cfg.clone())?;
    let mut b = Trainer::new(cfg)?;
    let max_diff = data
        .iter()
        .zip(&back)
        .map(|(x, y)| Ok((a.model.fused(x)? - b.model.fused(y)?).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v))))
        .collect::<anyhow::Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    println!("max |M_original - M_ingested| = {max_diff:e}");
    let la = a.train_epoch(&data, None)?;
    let lb = b.train_epoch(&back, None)?;
    println!("epoch-1 loss: original {:.12}  ingested {:.12}", la.total, lb.total);
    Ok(())
}
