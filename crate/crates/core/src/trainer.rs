//! Prompt optimization loop and the experiment protocols built on it.
//!
//! One run: compute unprompted image embeddings of the training split and
//! their per-class prototypes, then for every epoch and every shuffled
//! minibatch, encode the batch with the visual prompt and all classes with
//! the text prompt, evaluate the total loss, backpropagate and take a plain
//! SGD step on the active prompts.

use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate, mean_std, Evaluation, PromptUse};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{sample_k_shot, FewShotDataset, Split};
use crate::encoders::FrozenEncoderPair;
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, Prototypes};
use crate::prompts::PromptSet;
use crate::rng::SplitMix64;

/// Learning-rate grid searched by [`lr_grid_search`].
pub const LR_GRID: [f64; 5] = [0.002, 0.02, 0.2, 2.0, 20.0];
/// Default grid for each axis of [`beta_sweep`].
pub const BETA_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

const STREAM_PROMPTS: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_PROTOTYPES: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Both prompts, mean prototypes.
    Dapt,
    /// Both prompts, one random training embedding per class as prototype.
    DaptR,
    /// Text prompt only; β_v forced to 0 and no visual prompt is injected.
    TextOnly,
    /// Visual prompt only; β_t forced to 0 and no text prompt is injected.
    VisualOnly,
    /// Both prompts, β_t = β_v = 0.
    JointNoDispersion,
    /// Unprompted encoders, no optimization.
    ZeroShot,
}

impl Mode {
    pub fn prompt_use(self) -> PromptUse {
        match self {
            Mode::Dapt | Mode::DaptR | Mode::JointNoDispersion => PromptUse::BOTH,
            Mode::TextOnly => PromptUse {
                text: true,
                visual: false,
            },
            Mode::VisualOnly => PromptUse {
                text: false,
                visual: true,
            },
            Mode::ZeroShot => PromptUse::NONE,
        }
    }

    /// Loss weights after the mode's overrides.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            Mode::Dapt | Mode::DaptR => w,
            Mode::TextOnly => LossWeights { beta_v: 0.0, ..w },
            Mode::VisualOnly => LossWeights { beta_t: 0.0, ..w },
            Mode::JointNoDispersion | Mode::ZeroShot => LossWeights {
                beta_t: 0.0,
                beta_v: 0.0,
                ..w
            },
        }
    }
}

/// How prototypes are formed. The defaults follow the literal reading:
/// unprompted embeddings, computed once, not renormalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeOptions {
    pub renormalize: bool,
    /// Recompute prototypes with the current visual prompt at the start of
    /// every epoch.
    pub refresh_each_epoch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Defaults to `min(32, train size)`.
    pub batch_size: Option<usize>,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub mode: Mode,
    pub prototypes: PrototypeOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 0.2,
            epochs: 50,
            batch_size: None,
            shots: 16,
            seeds: vec![1, 2, 3],
            mode: Mode::Dapt,
            prototypes: PrototypeOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights
            .validate()
            .map_err(|e| e.context(format!("mode {:?}", self.mode)))?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn batch_size_for(&self, train_len: usize) -> Result<usize> {
        let b = self.batch_size.unwrap_or(32.min(train_len));
        if b == 0 || b > train_len {
            return Err(Error::Config(format!(
                "batch size {b} must be in 1..={train_len}"
            )));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_clip: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub prompts: PromptSet,
    pub wall_clock: Duration,
}

impl TrainTrace {
    /// Mean `l_total` per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.steps.last().map_or(0, |s| s.epoch + 1);
        let mut sums = vec![(0.0, 0usize); epochs];
        for s in &self.steps {
            sums[s.epoch].0 += s.l_total;
            sums[s.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n as f64).collect()
    }

    /// One JSON object per step: `{step, l_clip, l_inter, l_intra, l_total}`.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line {
            step: usize,
            l_clip: f64,
            l_inter: f64,
            l_intra: f64,
            l_total: f64,
        }
        let mut out = String::new();
        for s in &self.steps {
            let line = Line {
                step: s.step,
                l_clip: s.l_clip,
                l_inter: s.l_inter,
                l_intra: s.l_intra,
                l_total: s.l_total,
            };
            out.push_str(&serde_json::to_string(&line).expect("step serializes"));
            out.push('\n');
        }
        out
    }
}

/// `θ ← θ − lr·∇θ` on every prompt tensor that carries a gradient, then
/// clears the gradients.
pub fn sgd_step(prompts: &mut PromptSet, learning_rate: f64) -> Result<()> {
    let tensors = [&mut prompts.text, &mut prompts.visual];
    if tensors.iter().all(|t| t.grad().is_none()) {
        return Err(Error::Contract("sgd_step without gradients".into()));
    }
    for t in tensors {
        if let Some(g) = t.grad().map(<[f64]>::to_vec) {
            t.values_mut()
                .iter_mut()
                .zip(&g)
                .for_each(|(v, g)| *v -= learning_rate * g);
            t.clear_grad();
        }
    }
    Ok(())
}

/// Prototype of one random training embedding per class.
fn random_prototypes(embeddings: &[Vec<f64>], labels: &[usize], classes: usize, seed: u64) -> Result<Prototypes> {
    let mut rng = SplitMix64::derive(seed, STREAM_PROTOTYPES);
    let mut picked = Vec::with_capacity(classes);
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let &i = members
            .choose(&mut rng)
            .ok_or_else(|| Error::Dataset(format!("class {c} has no training samples")))?;
        picked.push(embeddings[i].clone());
    }
    Prototypes::from_embeddings(&picked, &(0..classes).collect::<Vec<_>>(), classes)
}

fn build_prototypes(
    encoders: &FrozenEncoderPair,
    train: &Split,
    mode: Mode,
    options: PrototypeOptions,
    visual_prompt: Option<&Tensor>,
    seed: u64,
) -> Result<Prototypes> {
    let labels = train.local_labels();
    let embeddings = train
        .tokens()
        .into_iter()
        .map(|t| encoders.encode_image(t, visual_prompt))
        .collect::<Result<Vec<_>>>()?;
    let p = match mode {
        Mode::DaptR => random_prototypes(&embeddings, &labels, train.classes.len(), seed)?,
        _ => Prototypes::from_embeddings(&embeddings, &labels, train.classes.len())?,
    };
    Ok(if options.renormalize { p.renormalized() } else { p })
}

/// Runs the optimization loop for one seed.
///
/// `seed` drives prompt initialization, minibatch shuffling and the DAPT-R
/// prototype draw through independent derived streams.
pub fn train(config: &TrainConfig, train_split: &Split, encoders: &FrozenEncoderPair, seed: u64) -> Result<TrainTrace> {
    let prompts = PromptSet::init(encoders.config(), SplitMix64::derive(seed, STREAM_PROMPTS).next());
    train_from(config, train_split, encoders, seed, prompts)
}

/// [`train`] starting from given prompts.
pub fn train_from(
    config: &TrainConfig,
    train_split: &Split,
    encoders: &FrozenEncoderPair,
    seed: u64,
    mut prompts: PromptSet,
) -> Result<TrainTrace> {
    config.validate()?;
    prompts.check_config(encoders.config())?;
    let start = Instant::now();
    let mode = config.mode;
    let active = mode.prompt_use();
    let weights = mode.effective_weights(config.weights);
    if mode == Mode::ZeroShot {
        return Ok(TrainTrace {
            steps: Vec::new(),
            prompts,
            wall_clock: start.elapsed(),
        });
    }
    if train_split.classes.len() < 2 {
        return Err(Error::Config("training needs at least 2 classes".into()));
    }
    let batch = config.batch_size_for(train_split.len())?;
    let labels = train_split.local_labels();
    let tokens = train_split.tokens();

    let mut prototypes = build_prototypes(encoders, train_split, mode, config.prototypes, None, seed)?;
    let mut order: Vec<usize> = (0..train_split.len()).collect();
    let mut shuffle = SplitMix64::derive(seed, STREAM_SHUFFLE);
    let mut steps = Vec::new();

    for epoch in 0..config.epochs {
        if config.prototypes.refresh_each_epoch && epoch > 0 {
            let vp = active.visual.then_some(&prompts.visual);
            prototypes = build_prototypes(encoders, train_split, mode, config.prototypes, vp, seed)?;
        }
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(batch) {
            let step = steps.len();
            let mut g = Graph::new();
            let enc = encoders.bind(&mut g);
            let text_p = active.text.then(|| g.param(&prompts.text));
            let vis_p = active.visual.then(|| g.param(&prompts.visual));

            let batch_tokens: Vec<&Tensor> = chunk.iter().map(|&i| tokens[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let w = enc.encode_classes(&mut g, &train_split.classes, text_p)?;
            let z = enc.encode_images(&mut g, &batch_tokens, vis_p)?;

            let clip = losses::clip_loss(&mut g, z, w, &batch_labels, weights.tau)?;
            let inter = losses::inter_dispersion_loss(&mut g, w, weights.kernel_scale)?;
            let intra = losses::intra_dispersion_loss(&mut g, z, &batch_labels, &prototypes)?;
            let record = StepRecord {
                step,
                epoch,
                l_clip: g.scalar(clip),
                l_inter: g.scalar(inter),
                l_intra: g.scalar(intra),
                l_total: f64::NAN,
            };
            for (name, v) in [("l_clip", record.l_clip), ("l_inter", record.l_inter), ("l_intra", record.l_intra)] {
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        component: name.into(),
                    });
                }
            }
            let total = losses::total_loss(&mut g, clip, inter, intra, &weights)?;
            let l_total = g.scalar(total);
            if !l_total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    component: "l_total".into(),
                });
            }
            g.backward(total)?;
            apply_grad(&g, text_p, &mut prompts.text)?;
            apply_grad(&g, vis_p, &mut prompts.visual)?;
            sgd_step(&mut prompts, config.learning_rate)?;
            if !prompts.is_finite() {
                return Err(Error::Diverged {
                    step,
                    component: "prompts".into(),
                });
            }
            steps.push(StepRecord { l_total, ..record });
        }
    }
    log::debug!("trained {} steps in {:?}", steps.len(), start.elapsed());
    Ok(TrainTrace {
        steps,
        prompts,
        wall_clock: start.elapsed(),
    })
}

fn apply_grad(g: &Graph, var: Option<Var>, target: &mut Tensor) -> Result<()> {
    if let Some(v) = var {
        match g.grad(v) {
            Some(grad) => target.accumulate_grad(grad)?,
            None => target.accumulate_grad(&vec![0.0; target.numel()])?,
        }
    }
    Ok(())
}

/// One seed of a replicated experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub accuracy: f64,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiSeedReport {
    pub mode: Mode,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<SeedRecord>,
}

/// Everything one seed produced, for callers that need more than accuracy.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub train: Split,
    pub test: Split,
    pub trace: TrainTrace,
    pub evaluation: Evaluation,
}

/// Resamples `K` shots, trains and evaluates for one seed.
pub fn run_seed(config: &TrainConfig, dataset: &FewShotDataset, encoders: &FrozenEncoderPair, seed: u64) -> Result<SeedRun> {
    let (train_split, test) = sample_k_shot(dataset, config.shots, seed)?;
    let trace = train(config, &train_split, encoders, seed).map_err(|e| e.context(format!("seed {seed}")))?;
    let evaluation = evaluate(
        encoders,
        Some(&trace.prompts),
        config.mode.prompt_use(),
        &test,
    )?;
    Ok(SeedRun {
        seed,
        train: train_split,
        test,
        trace,
        evaluation,
    })
}

/// Trains and evaluates once per configured seed; reports mean and
/// population standard deviation of the test accuracy.
pub fn multi_seed_run(config: &TrainConfig, dataset: &FewShotDataset, encoders: &FrozenEncoderPair) -> Result<MultiSeedReport> {
    let runs = config
        .seeds
        .par_iter()
        .map(|&s| run_seed(config, dataset, encoders, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(config.mode, &runs))
}

pub fn summarize(mode: Mode, runs: &[SeedRun]) -> MultiSeedReport {
    let per_seed: Vec<SeedRecord> = runs
        .iter()
        .map(|r| SeedRecord {
            seed: r.seed,
            accuracy: r.evaluation.accuracy,
            steps: r.trace.steps.len(),
            final_loss: r.trace.steps.last().map(|s| s.l_total),
        })
        .collect();
    let accs: Vec<f64> = per_seed.iter().map(|r| r.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    MultiSeedReport {
        mode,
        mean,
        std,
        per_seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrRow {
    pub learning_rate: f64,
    pub mean_accuracy: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrSearch {
    pub rows: Vec<LrRow>,
    pub best_learning_rate: f64,
}

/// Seed-averaged accuracy for each learning rate; ties go to the smaller lr.
pub fn lr_grid_search(base: &TrainConfig, dataset: &FewShotDataset, encoders: &FrozenEncoderPair, grid: &[f64]) -> Result<LrSearch> {
    if grid.is_empty() {
        return Err(Error::Config("learning-rate grid is empty".into()));
    }
    let rows = grid
        .par_iter()
        .map(|&lr| {
            let cfg = TrainConfig {
                learning_rate: lr,
                ..base.clone()
            };
            let r = multi_seed_run(&cfg, dataset, encoders).map_err(|e| e.context(format!("lr={lr}")))?;
            Ok(LrRow {
                learning_rate: lr,
                mean_accuracy: r.mean,
                std: r.std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .fold(None::<&LrRow>, |best, row| match best {
            Some(b)
                if b.mean_accuracy > row.mean_accuracy
                    || (b.mean_accuracy == row.mean_accuracy && b.learning_rate <= row.learning_rate) =>
            {
                Some(b)
            }
            _ => Some(row),
        })
        .expect("grid is nonempty");
    Ok(LrSearch {
        best_learning_rate: best.learning_rate,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaSweep {
    pub beta_t: Vec<f64>,
    pub beta_v: Vec<f64>,
    /// `accuracy[i][j]` for `(beta_t[i], beta_v[j])`.
    pub accuracy: Vec<Vec<f64>>,
}

/// Full factorial sweep of seed-averaged accuracy over `(β_t, β_v)`.
pub fn beta_sweep(
    base: &TrainConfig,
    dataset: &FewShotDataset,
    encoders: &FrozenEncoderPair,
    beta_t_grid: &[f64],
    beta_v_grid: &[f64],
) -> Result<BetaSweep> {
    if beta_t_grid.is_empty() || beta_v_grid.is_empty() {
        return Err(Error::Config("beta grids must be nonempty".into()));
    }
    let cells: Vec<(f64, f64)> = beta_t_grid
        .iter()
        .flat_map(|&t| beta_v_grid.iter().map(move |&v| (t, v)))
        .collect();
    let accs = cells
        .par_iter()
        .map(|&(bt, bv)| {
            let cfg = TrainConfig {
                weights: LossWeights {
                    beta_t: bt,
                    beta_v: bv,
                    ..base.weights
                },
                ..base.clone()
            };
            multi_seed_run(&cfg, dataset, encoders)
                .map(|r| r.mean)
                .map_err(|e| e.context(format!("beta_t={bt}, beta_v={bv}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BetaSweep {
        beta_t: beta_t_grid.to_vec(),
        beta_v: beta_v_grid.to_vec(),
        accuracy: accs.chunks(beta_v_grid.len()).map(<[f64]>::to_vec).collect(),
    })
}
