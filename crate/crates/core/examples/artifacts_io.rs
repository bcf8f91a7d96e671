//! File formats: dataset JSON, the binary prompt file and the embedding CSV,
//! each written and read back.
//!
//! cargo run --release --example artifacts_io [dir]

use std::path::PathBuf;

use dapt::analysis::{export_embeddings, read_embeddings_csv, PromptUse};
use dapt::data::{generate_dataset, sample_k_shot, FewShotDataset};
use dapt::{EncoderConfig, Error, FrozenEncoderPair, PromptSet, Result};

fn main() -> Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/artifacts".into()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg = EncoderConfig::default();

    let data = generate_dataset(4, cfg.n_patches, cfg.d_model, 5, 0.5, 3)?;
    let data_path = dir.join("dataset.json");
    data.save_json(&data_path)?;
    assert_eq!(FewShotDataset::load_json(&data_path)?.samples, data.samples);
    println!("dataset: {} samples -> {}", data.samples.len(), data_path.display());

    let prompts = PromptSet::init(&cfg, 42);
    let prompt_path = dir.join("prompts.dapt");
    prompts.save(&prompt_path)?;
    assert_eq!(PromptSet::load(&prompt_path)?, prompts);
    println!("prompts: {}x{} -> {}", prompts.prompt_len(), prompts.d_model(), prompt_path.display());

    let encoders = FrozenEncoderPair::build(cfg, data.num_classes)?;
    let (_, test) = sample_k_shot(&data, 1, 0)?;
    let csv_path = dir.join("embeddings.csv");
    export_embeddings(&encoders, Some(&prompts), PromptUse::BOTH, &test, &csv_path)?;
    let (labels, rows) = read_embeddings_csv(&csv_path)?;
    println!("embeddings: {} rows of width {} -> {}", labels.len(), rows[0].len(), csv_path.display());
    Ok(())
}
