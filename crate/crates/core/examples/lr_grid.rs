//! Learning-rate grid search over the fixed five-point grid, seed-averaged.
//! Fewer epochs than the default keep it quick.
//!
//! cargo run --release --example lr_grid

use dapt::data::FewShotDataset;
use dapt::trainer::{lr_grid_search, TrainConfig, LR_GRID};
use dapt::{EncoderConfig, FrozenEncoderPair, Result};

fn main() -> Result<()> {
    let enc_cfg = EncoderConfig::default();
    let data = FewShotDataset::from_config(&Default::default(), enc_cfg.n_patches, enc_cfg.d_model)?;
    let encoders = FrozenEncoderPair::build(enc_cfg, data.num_classes)?;
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let search = lr_grid_search(&cfg, &data, &encoders, &LR_GRID)?;
    for row in &search.rows {
        println!("lr {:>6}: {:.4} ± {:.4}", row.learning_rate, row.mean_accuracy, row.std);
    }
    println!("best {}", search.best_learning_rate);
    Ok(())
}
