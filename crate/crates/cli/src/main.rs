use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bitcd::checkpoint;
use bitcd::config::{parse_config, parse_flags, resolve, RunConfig, SEED_ENV};
use bitcd::data::{index_dataset, synth_generate, PatchIndex, SynthConfig};
use bitcd::model::ChangeDetector;
use bitcd::profiler::{count_flops, reference_profiles};
use bitcd::tensor::Var;
use bitcd::train::{compute_metrics, evaluate, fit, make_batch, EpochRecord, PairSource};
use bitcd::vis::{visualize_features, visualize_tokens, write_mask};

#[derive(Parser)]
#[command(name = "bitcd", version, about = "Bitemporal image transformer for change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `data.train_split`, validating on `data.val_split` each epoch.
    Train(Common),
    /// Score a checkpoint on `data.test_split`.
    Eval(Common),
    /// Write predicted change masks for `data.test_split`.
    Infer(Common),
    /// Print parameter and operation counts.
    Profile(Common),
    /// Generate the synthetic dataset under `data.root`.
    Synth(Common),
    /// Write token attention heatmaps for one sample.
    #[command(name = "vis-tokens")]
    VisTokens(Common),
    /// Write per-stage feature maps for one sample.
    #[command(name = "vis-features")]
    VisFeatures(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Key overrides, `--section.key value`; they win over the file and the
    /// seed environment variable.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut flags = parse_flags(&self.overrides)?;
        let mut file = self.config.clone();
        // `--config` after the first override lands among the overrides.
        if let Some(pos) = flags.iter().position(|(k, _)| k == "config") {
            file = Some(PathBuf::from(flags.remove(pos).1));
        }
        let text = match &file {
            Some(path) => Some(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?),
            None => None,
        };
        let env_seed = std::env::var(SEED_ENV).ok();
        Ok(resolve(text.as_deref(), env_seed.as_deref(), &flags)?)
    }
}

fn patches(cfg: &RunConfig, split: &str) -> Result<PatchIndex> {
    let index = index_dataset(&cfg.data.root, split)?;
    if index.is_empty() {
        bail!("split `{split}` under {} has no samples", cfg.data.root.display());
    }
    Ok(PatchIndex::new(index, cfg.data.patch_size)?)
}

fn best_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("best")
}

/// Rebuilds the model stored in a checkpoint directory.
fn load_model(dir: &Path) -> Result<ChangeDetector<f32>> {
    let (snapshot, text) = checkpoint::load(dir)?;
    let stored = parse_config(&text).context("configuration embedded in the checkpoint")?;
    let model = ChangeDetector::new(stored.model, stored.train.seed)?;
    snapshot.restore(&model)?;
    Ok(model)
}

/// The configured checkpoint, or a freshly initialized model.
fn model_for_vis(cfg: &RunConfig) -> Result<ChangeDetector<f32>> {
    match &cfg.checkpoint {
        Some(dir) => load_model(dir),
        None => Ok(ChangeDetector::new(cfg.model.clone(), cfg.train.seed)?),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(cfg: &RunConfig) -> Result<()> {
    let train_set = patches(cfg, &cfg.data.train_split)?;
    let val_set = patches(cfg, &cfg.data.val_split)?;
    let model = ChangeDetector::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let rendered = cfg.render();
    write(&cfg.output_dir.join("config.txt"), &rendered)?;
    let log_path = cfg.output_dir.join("epochs.tsv");
    let mut log = format!("{}\n", EpochRecord::HEADER);
    write(&log_path, &log)?;
    println!("{}", EpochRecord::HEADER);
    let mut io_error = None;
    let outcome = fit(&model, &train_set, &val_set, &cfg.train, |r| {
        println!("{r}");
        log.push_str(&format!("{r}\n"));
        if let Err(e) = fs::write(&log_path, &log) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    checkpoint::save(&best_dir(cfg), &outcome.best, &rendered)?;
    println!(
        "best val F1 {:.4} at epoch {}; checkpoint in {}",
        outcome.best_val_f1,
        outcome.best_epoch,
        best_dir(cfg).display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.checkpoint.clone().unwrap_or_else(|| best_dir(cfg));
    let model = load_model(&dir)?;
    let test = patches(cfg, &cfg.data.test_split)?;
    let (loss, cc) = evaluate(&model, &test, cfg.train.batch_size)?;
    let m = compute_metrics(&cc)?;
    let report = format!(
        "split = {}\nloss = {loss:.6}\nprecision = {:.6}\nrecall = {:.6}\nf1 = {:.6}\niou = {:.6}\noa = {:.6}\ndegenerate = {}\ntp = {}\nfp = {}\nfn = {}\ntn = {}\n",
        cfg.data.test_split, m.precision, m.recall, m.f1, m.iou, m.oa, m.degenerate, cc.tp, cc.fp, cc.fn_, cc.tn
    );
    print!("{report}");
    write(&cfg.output_dir.join("eval.txt"), &report)
}

fn infer(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.checkpoint.clone().unwrap_or_else(|| best_dir(cfg));
    let model = load_model(&dir)?;
    let test = patches(cfg, &cfg.data.test_split)?;
    let out = cfg.output_dir.join("masks");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let _guard = bitcd::tensor::no_grad();
    for i in 0..PairSource::len(&test) {
        let pair = test.load(i)?;
        let batch = make_batch::<f32>(std::slice::from_ref(&pair))?;
        let (_, mask) = model.predict(&Var::constant(batch.t1), &Var::constant(batch.t2))?;
        write_mask(&out.join(&pair.id), &mask, 0)?;
    }
    println!("wrote {} masks to {}", PairSource::len(&test), out.display());
    Ok(())
}

fn profile(cfg: &RunConfig) -> Result<()> {
    let size = cfg.model.image_size;
    let report = count_flops(&cfg.model, size, size)?;
    println!("{report}\n");
    let mut structured = report.to_structured();
    println!("{:<10} {:>14} {:>16}", "profile", "params (M)", "MACs/image (G)");
    for p in reference_profiles() {
        let r = count_flops(&p.config, 256, 256)?;
        println!(
            "{:<10} {:>14.2} {:>16.2}",
            p.name,
            r.params_with_vestigial() as f64 / 1e6,
            r.macs_per_image() / 1e9
        );
        structured.push_str(&format!(
            "reference.{}.params_with_vestigial = {}\nreference.{}.macs_per_image = {}\n",
            p.name,
            r.params_with_vestigial(),
            p.name,
            r.macs / 2
        ));
    }
    write(&cfg.output_dir.join("profile.txt"), &structured)
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let sc = SynthConfig {
        size: cfg.synth.size,
        ..SynthConfig::default()
    };
    let splits = [
        (&cfg.data.train_split, cfg.synth.train),
        (&cfg.data.val_split, cfg.synth.val),
        (&cfg.data.test_split, cfg.synth.test),
    ];
    for (k, (split, n)) in splits.into_iter().enumerate() {
        let seed = cfg.train.seed.wrapping_mul(3).wrapping_add(k as u64);
        let index = synth_generate(&cfg.data.root, split, n, &sc, seed)?;
        println!("{split}: {} pairs in {}", index.len(), index.dir.display());
    }
    Ok(())
}

fn vis_sample(cfg: &RunConfig) -> Result<bitcd::data::SamplePair> {
    let set = patches(cfg, &cfg.vis.split)?;
    if cfg.vis.sample >= set.len() {
        bail!("vis.sample {} is out of range for {} samples", cfg.vis.sample, set.len());
    }
    Ok(set.load(cfg.vis.sample)?)
}

fn vis_tokens(cfg: &RunConfig) -> Result<()> {
    let model = model_for_vis(cfg)?;
    let pair = vis_sample(cfg)?;
    let out = cfg.output_dir.join("vis-tokens");
    let maps = visualize_tokens(&model, &pair, &out)?;
    println!("wrote {} heatmaps for {} to {}", maps.len(), pair.id, out.display());
    Ok(())
}

fn vis_features(cfg: &RunConfig) -> Result<()> {
    let model = model_for_vis(cfg)?;
    let pair = vis_sample(cfg)?;
    let out = cfg.output_dir.join("vis-features");
    let images = visualize_features(&model, &pair, cfg.vis.channels, &out)?;
    println!("wrote {} images for {} to {}", images.len(), pair.id, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (common, action): (&Common, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Train(c) => (c, train),
        Command::Eval(c) => (c, eval),
        Command::Infer(c) => (c, infer),
        Command::Profile(c) => (c, profile),
        Command::Synth(c) => (c, synth),
        Command::VisTokens(c) => (c, vis_tokens),
        Command::VisFeatures(c) => (c, vis_features),
    };
    action(&common.load()?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
