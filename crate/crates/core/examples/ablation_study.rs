//! Loss ablation on the default synthetic task: DAPT against the joint
//! prompt baseline without dispersion terms, the single-modality variants,
//! and DAPT-R (random-sample prototypes). Prints seed-averaged accuracy and
//! within-class image pdist for each mode.
//!
//! cargo run --release --example ablation_study

use dapt::analysis::{embed_split, mean_std, pairwise_distance_stats, text_pdist};
use dapt::data::FewShotDataset;
use dapt::trainer::{run_seed, Mode, TrainConfig};
use dapt::{EncoderConfig, FrozenEncoderPair, Result};
use rayon::prelude::*;

fn main() -> Result<()> {
    let enc_cfg = EncoderConfig::default();
    let data = FewShotDataset::from_config(&Default::default(), enc_cfg.n_patches, enc_cfg.d_model)?;
    let encoders = FrozenEncoderPair::build(enc_cfg, data.num_classes)?;

    let modes = [
        Mode::ZeroShot,
        Mode::JointNoDispersion,
        Mode::TextOnly,
        Mode::VisualOnly,
        Mode::Dapt,
        Mode::DaptR,
    ];
    println!("{:<22} {:>8} {:>8} {:>10} {:>10}", "mode", "acc", "std", "img pdist", "txt pdist");
    for mode in modes {
        let cfg = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        let runs = cfg
            .seeds
            .par_iter()
            .map(|&s| run_seed(&cfg, &data, &encoders, s))
            .collect::<Result<Vec<_>>>()?;
        let accs: Vec<f64> = runs.iter().map(|r| r.evaluation.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let mut img = 0.0;
        let mut txt = 0.0;
        for r in &runs {
            let emb = embed_split(&encoders, Some(&r.trace.prompts), mode.prompt_use(), &r.test)?;
            img += pairwise_distance_stats(&emb.images, &emb.labels, r.test.classes.len()).mean;
            txt += text_pdist(&emb.texts).unwrap_or(f64::NAN);
        }
        let n = runs.len() as f64;
        println!(
            "{:<22} {:>8.4} {:>8.4} {:>10.4} {:>10.4}",
            format!("{mode:?}"),
            mean,
            std,
            img / n,
            txt / n
        );
    }
    Ok(())
}
