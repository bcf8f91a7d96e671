//! Central-difference gradient checks: a few primitive ops, the dispersion
//! losses on random unit vectors, and the full objective differentiated
//! through both frozen encoders with respect to both prompts.
//!
//! cargo run --release --example gradient_check

use dapt::autodiff::{grad_check, grad_check_many, Axis, Graph, Tensor};
use dapt::data::{generate_dataset, sample_k_shot};
use dapt::losses::{self, LossWeights, Prototypes};
use dapt::rng::SplitMix64;
use dapt::{EncoderConfig, FrozenEncoderPair, PromptSet, Result};

const H: f64 = 1e-5;

type ScalarFn = fn(&mut Graph, dapt::Var) -> Result<dapt::Var>;

fn random(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.symmetric_uniform(1.0)).collect()).unwrap()
}

fn main() -> Result<()> {
    let mut rng = SplitMix64::new(11);

    let x = random(vec![3, 5], &mut rng);
    let ops: [(&str, ScalarFn); 4] = [
        ("tanh", |g, x| {
            let y = g.tanh(x);
            Ok(g.sum(y))
        }),
        ("softmax", |g, x| {
            let y = g.softmax_rows(x)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("l2 normalize", |g, x| {
            let y = g.l2_normalize_rows(x)?;
            let r = g.row(y, 0)?;
            Ok(g.sum(r))
        }),
        ("rms normalize", |g, x| {
            let y = g.rms_normalize_rows(x)?;
            let y = g.mean(y, Axis::Rows)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        }),
    ];
    for (name, f) in ops {
        println!("{name:<16} max rel error {:.2e}", grad_check(f, &x, H)?);
    }

    let w = random(vec![4, 6], &mut rng);
    let inter = grad_check(
        |g, w| {
            let u = g.l2_normalize_rows(w)?;
            losses::inter_dispersion_loss(g, u, 2.0)
        },
        &w,
        H,
    )?;
    println!("{:<16} max rel error {inter:.2e}", "inter-dispersion");

    let cfg = EncoderConfig {
        d_model: 8,
        d_embed: 4,
        n_blocks: 1,
        n_patches: 3,
        prompt_len: 2,
        seed: 3,
    };
    let data = generate_dataset(3, cfg.n_patches, cfg.d_model, 3, 0.5, 5)?;
    let (train, _) = sample_k_shot(&data, 2, 9)?;
    let pair = FrozenEncoderPair::build(cfg, data.num_classes)?;
    let items = train.items();
    let protos = Prototypes::compute(&pair, &items, train.classes.len(), None)?;
    let labels = train.local_labels();
    let tokens = train.tokens();
    let prompts = PromptSet::init_with_std(&cfg, 4, 0.3);
    let weights = LossWeights::default();
    let err = grad_check_many(
        |g, p| {
            let enc = pair.bind(g);
            let w = enc.encode_classes(g, &train.classes, Some(p[0]))?;
            let z = enc.encode_images(g, &tokens, Some(p[1]))?;
            let clip = losses::clip_loss(g, z, w, &labels, weights.tau)?;
            let inter = losses::inter_dispersion_loss(g, w, weights.kernel_scale)?;
            let intra = losses::intra_dispersion_loss(g, z, &labels, &protos)?;
            losses::total_loss(g, clip, inter, intra, &weights)
        },
        &[prompts.text.clone(), prompts.visual.clone()],
        H,
    )?;
    println!("{:<16} max rel error {err:.2e}", "total objective");
    Ok(())
}
