//! Base-to-new generalization: prompts are trained on the first half of the
//! classes and the learned text prompt is applied unchanged to the held-out
//! class tokens.
//!
//! cargo run --release --example base_to_new

use dapt::analysis::{evaluate, harmonic_mean, mean_std, PromptUse};
use dapt::data::{base_new_split, FewShotDataset};
use dapt::trainer::{train, TrainConfig};
use dapt::{EncoderConfig, FrozenEncoderPair, Result};

fn main() -> Result<()> {
    let enc_cfg = EncoderConfig::default();
    let data = FewShotDataset::from_config(&Default::default(), enc_cfg.n_patches, enc_cfg.d_model)?;
    let encoders = FrozenEncoderPair::build(enc_cfg, data.num_classes)?;
    let cfg = TrainConfig::default();

    let (mut base, mut new) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let split = base_new_split(&data, cfg.shots, seed)?;
        let trace = train(&cfg, &split.base_train, &encoders, seed)?;
        let use_ = cfg.mode.prompt_use();
        let b = evaluate(&encoders, Some(&trace.prompts), use_, &split.base_test)?.accuracy;
        let n = evaluate(&encoders, Some(&trace.prompts), use_, &split.new_test)?.accuracy;
        let zn = evaluate(&encoders, None, PromptUse::NONE, &split.new_test)?.accuracy;
        println!("seed {seed}: base {b:.4}, new {n:.4} (zero-shot new {zn:.4})");
        base.push(b);
        new.push(n);
    }
    let (b, _) = mean_std(&base);
    let (n, _) = mean_std(&new);
    println!("base {b:.4}, new {n:.4}, harmonic mean {:.4}", harmonic_mean(b, n));
    Ok(())
}
