//! Command-line front end.
//!
//! Every command reads one experiment config, prints the resolved seeds and
//! mode, and writes its JSON outputs under the output directory. Exit codes:
//! 0 on success, 1 for configuration and I/O errors, 2 when training aborts
//! on a non-finite value.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::analysis::{
    convex_hull_areas, delta_pdist, embed_split, evaluate, export_embeddings, harmonic_mean, mean_std,
    pairwise_distance_stats, text_pdist, ClassPdist, ExperimentReport, PromptUse,
};
use crate::config::ExperimentConfig;
use crate::data::{base_new_split, sample_k_shot, FewShotDataset, Split};
use crate::encoders::FrozenEncoderPair;
use crate::error::{Error, Result};
use crate::prompts::PromptSet;
use crate::trainer::{beta_sweep, lr_grid_search, run_seed, train, Mode, LR_GRID};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dapt", version, about = "Distribution-aware prompt tuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train prompts for every seed and write prompts, traces and a report.
    Train(Common),
    /// Accuracy on the test split of the first seed.
    Eval(WithPrompts),
    /// Within-class pdist change, text pdist and hull areas against zero-shot.
    Analyze(WithPrompts),
    /// Seed-averaged accuracy over the fixed learning-rate grid.
    GridLr(Common),
    /// Seed-averaged accuracy over the configured (β_t, β_v) grid.
    GridBeta(Common),
    /// Train on base classes, test on base and new classes.
    Base2new(Common),
    /// Write test-split image embeddings of the first seed as CSV.
    ExportEmbeddings(Export),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides `train.seeds`, e.g. `--seeds 1,2,3`.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct WithPrompts {
    #[command(flatten)]
    pub common: Common,
    /// Prompt file; may be omitted in zero-shot mode.
    #[arg(long, value_name = "PATH")]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Export {
    #[command(flatten)]
    pub inner: WithPrompts,
    /// Destination CSV; defaults to `embeddings.csv` in the output directory.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Analyze(c) => cmd_analyze(c),
        Command::GridLr(c) => cmd_grid_lr(c),
        Command::GridBeta(c) => cmd_grid_beta(c),
        Command::Base2new(c) => cmd_base2new(c),
        Command::ExportEmbeddings(c) => cmd_export(c),
    }
}

struct Context {
    config: ExperimentConfig,
    dataset: FewShotDataset,
    encoders: FrozenEncoderPair,
    out_dir: PathBuf,
}

impl Context {
    fn load(common: &Common) -> Result<Self> {
        let mut config = ExperimentConfig::load(&common.config)?;
        if let Some(seeds) = &common.seeds {
            config.train.seeds = seeds.clone();
            config.validate()?;
        }
        let out_dir = common.out.clone().unwrap_or_else(|| config.output_dir.clone());
        let dataset = config.build_dataset()?;
        let encoders = config.build_encoders()?;
        println!("seeds: {:?}", config.train.seeds);
        println!("mode: {}", mode_name(config.train.mode));
        Ok(Self {
            config,
            dataset,
            encoders,
            out_dir,
        })
    }

    fn mode(&self) -> Mode {
        self.config.train.mode
    }

    fn first_seed(&self) -> u64 {
        self.config.train.seeds[0]
    }

    fn report(&self, command: &str) -> ExperimentReport {
        ExperimentReport {
            command: command.into(),
            mode: mode_name(self.mode()),
            seeds: self.config.train.seeds.clone(),
            ..Default::default()
        }
    }

    fn test_split(&self) -> Result<Split> {
        Ok(sample_k_shot(&self.dataset, self.config.train.shots, self.first_seed())?.1)
    }

    fn load_prompts(&self, path: Option<&Path>) -> Result<Option<PromptSet>> {
        match (path, self.mode()) {
            (Some(p), _) => {
                let prompts = PromptSet::load(p)?;
                prompts.check_config(&self.config.encoder)?;
                Ok(Some(prompts))
            }
            (None, Mode::ZeroShot) => Ok(None),
            (None, mode) => Err(Error::Config(format!(
                "--prompts is required in {} mode",
                mode_name(mode)
            ))),
        }
    }

    fn ensure_out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        Ok(&self.out_dir)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.ensure_out_dir()?.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

fn mode_name(mode: Mode) -> String {
    serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{mode:?}"))
}

fn with_newline(mut s: String) -> String {
    s.push('\n');
    s
}

fn cmd_train(common: &Common) -> Result<()> {
    let ctx = Context::load(common)?;
    let runs = ctx
        .config
        .train
        .seeds
        .par_iter()
        .map(|&s| run_seed(&ctx.config.train, &ctx.dataset, &ctx.encoders, s))
        .collect::<Result<Vec<_>>>()?;

    let mut log_text = String::new();
    for r in &runs {
        r.trace.prompts.save(ctx.ensure_out_dir()?.join(format!("prompts-seed{}.dapt", r.seed)))?;
        ctx.write(&format!("trace-seed{}.jsonl", r.seed), &r.trace.to_jsonl())?;
        let means = r.trace.epoch_means();
        println!(
            "seed {}: accuracy {:.4}, steps {}, epoch loss {} -> {}",
            r.seed,
            r.evaluation.accuracy,
            r.trace.steps.len(),
            means.first().map_or("n/a".into(), |v| format!("{v:.4}")),
            means.last().map_or("n/a".into(), |v| format!("{v:.4}")),
        );
        let _ = writeln!(
            log_text,
            "seed {} wall_clock_s {:.6}",
            r.seed,
            r.trace.wall_clock.as_secs_f64()
        );
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.evaluation.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    println!("accuracy: {mean:.4} ± {std:.4}");

    let mut report = ctx.report("train");
    report.accuracy_mean = Some(mean);
    report.accuracy_std = Some(std);
    report.per_seed_accuracy = accs;
    ctx.write("report.json", &with_newline(report.to_json_pretty()))?;
    ctx.write("run.log", &log_text)?;
    Ok(())
}

fn cmd_eval(args: &WithPrompts) -> Result<()> {
    let ctx = Context::load(&args.common)?;
    let prompts = ctx.load_prompts(args.prompts.as_deref())?;
    let test = ctx.test_split()?;
    let ev = evaluate(&ctx.encoders, prompts.as_ref(), ctx.mode().prompt_use(), &test)?;
    println!("accuracy: {:.4} ({} samples)", ev.accuracy, test.len());

    let mut report = ctx.report("eval");
    report.seeds = vec![ctx.first_seed()];
    report.accuracy = Some(ev.accuracy);
    report.per_class = ev.per_class;
    ctx.write("eval-report.json", &with_newline(report.to_json_pretty()))?;
    Ok(())
}

fn cmd_analyze(args: &WithPrompts) -> Result<()> {
    let ctx = Context::load(&args.common)?;
    let prompts = ctx.load_prompts(args.prompts.as_deref())?;
    let test = ctx.test_split()?;
    let n = test.classes.len();
    let tuned = embed_split(&ctx.encoders, prompts.as_ref(), ctx.mode().prompt_use(), &test)?;
    let zero = embed_split(&ctx.encoders, None, PromptUse::NONE, &test)?;

    let mut report = ctx.report("analyze");
    report.seeds = vec![ctx.first_seed()];
    if ctx.config.analysis.pdist {
        let tuned_stats = pairwise_distance_stats(&tuned.images, &tuned.labels, n);
        let zero_stats = pairwise_distance_stats(&zero.images, &zero.labels, n);
        for t in &tuned_stats.per_class {
            if let Some(z) = zero_stats.per_class.iter().find(|z| z.class == t.class) {
                let class = test.classes[t.class];
                let pct = delta_pdist(t.pdist, z.pdist)?;
                println!("class {class}: pdist {:.4} (zero-shot {:.4}), Δpdist {pct:.2}%", t.pdist, z.pdist);
                report.delta_pdist_pct.push(ClassPdist { class, pdist: pct });
            }
        }
        let mean_pct = delta_pdist(tuned_stats.mean, zero_stats.mean)?;
        println!("mean Δpdist: {mean_pct:.2}%");
        report.delta_pdist_mean_pct = Some(mean_pct);
        report.text_pdist = text_pdist(&tuned.texts);
        report.text_pdist_zero_shot = text_pdist(&zero.texts);
        if let (Some(t), Some(z)) = (report.text_pdist, report.text_pdist_zero_shot) {
            println!("text pdist: {t:.4} (zero-shot {z:.4})");
        }
    }
    if ctx.config.analysis.hull {
        let relabel = |mut areas: Vec<crate::analysis::HullArea>| {
            for a in &mut areas {
                a.class = test.classes[a.class];
            }
            areas
        };
        let tuned_hulls = relabel(convex_hull_areas(&tuned.images, &tuned.labels, n)?);
        let zero_hulls = relabel(convex_hull_areas(&zero.images, &zero.labels, n)?);
        for (t, z) in tuned_hulls.iter().zip(&zero_hulls) {
            println!("class {}: hull area {:.6} (zero-shot {:.6})", t.class, t.area, z.area);
        }
        report.hull_areas = Some(tuned_hulls);
        report.hull_areas_zero_shot = Some(zero_hulls);
    }
    ctx.write("analyze-report.json", &with_newline(report.to_json_pretty()))?;
    Ok(())
}

fn cmd_grid_lr(common: &Common) -> Result<()> {
    let ctx = Context::load(common)?;
    let search = lr_grid_search(&ctx.config.train, &ctx.dataset, &ctx.encoders, &LR_GRID)?;
    println!("{:>10} {:>10} {:>10}", "lr", "accuracy", "std");
    for row in &search.rows {
        println!("{:>10} {:>10.4} {:>10.4}", row.learning_rate, row.mean_accuracy, row.std);
    }
    println!("best lr: {}", search.best_learning_rate);
    let json = serde_json::to_string_pretty(&search).map_err(|e| Error::Format(e.to_string()))?;
    ctx.write("grid-lr.json", &with_newline(json))?;
    Ok(())
}

fn cmd_grid_beta(common: &Common) -> Result<()> {
    let ctx = Context::load(common)?;
    let a = &ctx.config.analysis;
    let sweep = beta_sweep(&ctx.config.train, &ctx.dataset, &ctx.encoders, &a.beta_t_grid, &a.beta_v_grid)?;
    let mut header = format!("{:>10}", "β_t\\β_v");
    for bv in &sweep.beta_v {
        let _ = write!(header, " {bv:>8}");
    }
    println!("{header}");
    for (bt, row) in sweep.beta_t.iter().zip(&sweep.accuracy) {
        let mut line = format!("{bt:>10}");
        for acc in row {
            let _ = write!(line, " {acc:>8.4}");
        }
        println!("{line}");
    }
    let json = serde_json::to_string_pretty(&sweep).map_err(|e| Error::Format(e.to_string()))?;
    ctx.write("grid-beta.json", &with_newline(json))?;
    Ok(())
}

fn cmd_base2new(common: &Common) -> Result<()> {
    let ctx = Context::load(common)?;
    let cfg = &ctx.config.train;
    let use_ = cfg.mode.prompt_use();
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let split = base_new_split(&ctx.dataset, cfg.shots, seed)?;
            let trace = train(cfg, &split.base_train, &ctx.encoders, seed)
                .map_err(|e| e.context(format!("seed {seed}")))?;
            let base = evaluate(&ctx.encoders, Some(&trace.prompts), use_, &split.base_test)?;
            let new = evaluate(&ctx.encoders, Some(&trace.prompts), use_, &split.new_test)?;
            Ok((seed, base.accuracy, new.accuracy))
        })
        .collect::<Result<Vec<_>>>()?;
    for (seed, b, n) in &per_seed {
        println!("seed {seed}: base {b:.4}, new {n:.4}");
    }
    let (base_acc, _) = mean_std(&per_seed.iter().map(|r| r.1).collect::<Vec<_>>());
    let (new_acc, _) = mean_std(&per_seed.iter().map(|r| r.2).collect::<Vec<_>>());
    let hm = harmonic_mean(base_acc, new_acc);
    println!("base {base_acc:.4}, new {new_acc:.4}, harmonic mean {hm:.4}");

    let mut report = ctx.report("base2new");
    report.base_acc = Some(base_acc);
    report.new_acc = Some(new_acc);
    report.harmonic_mean = Some(hm);
    ctx.write("base2new-report.json", &with_newline(report.to_json_pretty()))?;
    Ok(())
}

fn cmd_export(args: &Export) -> Result<()> {
    let ctx = Context::load(&args.inner.common)?;
    let prompts = ctx.load_prompts(args.inner.prompts.as_deref())?;
    let test = ctx.test_split()?;
    let path = match &args.csv {
        Some(p) => p.clone(),
        None => ctx.ensure_out_dir()?.join("embeddings.csv"),
    };
    export_embeddings(&ctx.encoders, prompts.as_ref(), ctx.mode().prompt_use(), &test, &path)?;
    println!("wrote {} embeddings to {}", test.len(), path.display());
    Ok(())
}
