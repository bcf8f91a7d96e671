//! Embedding-space geometry after training one seed: within-class pdist and
//! its change against the unprompted encoders, cross-class text pdist, and
//! per-class convex-hull area in the 2D PCA plane. Test embeddings of both
//! encoders are written as CSV for external plotting.
//!
//! cargo run --release --example embedding_geometry [out_dir]

use std::path::PathBuf;

use dapt::analysis::{
    convex_hull_areas, delta_pdist, embed_split, embeddings_csv, pairwise_distance_stats, text_pdist, PromptUse,
};
use dapt::data::{sample_k_shot, FewShotDataset};
use dapt::trainer::{train, TrainConfig};
use dapt::{EncoderConfig, Error, FrozenEncoderPair, Result};

fn main() -> Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/geometry".into()));
    let enc_cfg = EncoderConfig::default();
    let data = FewShotDataset::from_config(&Default::default(), enc_cfg.n_patches, enc_cfg.d_model)?;
    let encoders = FrozenEncoderPair::build(enc_cfg, data.num_classes)?;
    let cfg = TrainConfig::default();
    let seed = cfg.seeds[0];

    let (train_split, test) = sample_k_shot(&data, cfg.shots, seed)?;
    let trace = train(&cfg, &train_split, &encoders, seed)?;
    let tuned = embed_split(&encoders, Some(&trace.prompts), cfg.mode.prompt_use(), &test)?;
    let zero = embed_split(&encoders, None, PromptUse::NONE, &test)?;
    let n = test.classes.len();

    let t = pairwise_distance_stats(&tuned.images, &tuned.labels, n);
    let z = pairwise_distance_stats(&zero.images, &zero.labels, n);
    let th = convex_hull_areas(&tuned.images, &tuned.labels, n)?;
    let zh = convex_hull_areas(&zero.images, &zero.labels, n)?;
    println!("{:>5} {:>9} {:>9} {:>9} {:>10} {:>10}", "class", "pdist", "zs pdist", "Δpdist%", "hull", "zs hull");
    for c in 0..n {
        println!(
            "{c:>5} {:>9.4} {:>9.4} {:>9.2} {:>10.6} {:>10.6}",
            t.per_class[c].pdist,
            z.per_class[c].pdist,
            delta_pdist(t.per_class[c].pdist, z.per_class[c].pdist)?,
            th[c].area,
            zh[c].area
        );
    }
    println!("mean Δpdist {:.2}%", delta_pdist(t.mean, z.mean)?);
    println!(
        "text pdist {:.4} (zero-shot {:.4})",
        text_pdist(&tuned.texts).unwrap_or(f64::NAN),
        text_pdist(&zero.texts).unwrap_or(f64::NAN)
    );

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (name, emb) in [("tuned.csv", &tuned), ("zero_shot.csv", &zero)] {
        let path = out.join(name);
        std::fs::write(&path, embeddings_csv(&emb.labels, &emb.images)).map_err(|e| Error::io(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
