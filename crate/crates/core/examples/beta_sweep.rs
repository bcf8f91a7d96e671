//! Accuracy over the (β_t, β_v) grid on the default task, averaged over the
//! default seeds. 75 training runs; expect a few minutes per core.
//!
//! cargo run --release --example beta_sweep [epochs]

use dapt::data::FewShotDataset;
use dapt::trainer::{beta_sweep, TrainConfig, BETA_GRID};
use dapt::{EncoderConfig, FrozenEncoderPair, Result};

fn main() -> Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let enc_cfg = EncoderConfig::default();
    let data = FewShotDataset::from_config(&Default::default(), enc_cfg.n_patches, enc_cfg.d_model)?;
    let encoders = FrozenEncoderPair::build(enc_cfg, data.num_classes)?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let sweep = beta_sweep(&cfg, &data, &encoders, &BETA_GRID, &BETA_GRID)?;
    print!("{:>8}", "bt\\bv");
    for bv in &sweep.beta_v {
        print!(" {bv:>7}");
    }
    println!();
    for (bt, row) in sweep.beta_t.iter().zip(&sweep.accuracy) {
        print!("{bt:>8}");
        for a in row {
            print!(" {a:>7.4}");
        }
        println!();
    }
    Ok(())
}
