//! Trains prompts on the default synthetic 16-shot task and compares test
//! accuracy against the unprompted encoders, per seed.
//!
//! cargo run --release --example few_shot_training

use dapt::analysis::{evaluate, PromptUse};
use dapt::data::{sample_k_shot, FewShotDataset};
use dapt::trainer::{train, TrainConfig};
use dapt::{EncoderConfig, FrozenEncoderPair, Result};

fn main() -> Result<()> {
    let enc_cfg = EncoderConfig::default();
    let data = FewShotDataset::from_config(&Default::default(), enc_cfg.n_patches, enc_cfg.d_model)?;
    let encoders = FrozenEncoderPair::build(enc_cfg, data.num_classes)?;
    let cfg = TrainConfig::default();

    for &seed in &cfg.seeds {
        let (train_split, test) = sample_k_shot(&data, cfg.shots, seed)?;
        let zero = evaluate(&encoders, None, PromptUse::NONE, &test)?;
        let trace = train(&cfg, &train_split, &encoders, seed)?;
        let tuned = evaluate(&encoders, Some(&trace.prompts), cfg.mode.prompt_use(), &test)?;
        let means = trace.epoch_means();
        println!(
            "seed {seed}: loss {:.4} -> {:.4}, accuracy zero-shot {:.3} -> tuned {:.3} ({:.1?})",
            means[0],
            means[means.len() - 1],
            zero.accuracy,
            tuned.accuracy,
            trace.wall_clock,
        );
    }
    Ok(())
}
