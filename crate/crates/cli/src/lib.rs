//! The `madan` command-line tool: dataset generation, training, evaluation,
//! translation grids and ablation sweeps.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use madan::checkpoint::load_bundle;
use madan::datagen::io::encode_ppm;
use madan::datagen::{generate_suite, load_dataset, load_suite, RgbImage, SuiteLayout, CLASS_NAMES};
use madan::metrics::{report, report_header, ConfusionMatrix};
use madan::models::ModelBundle;
use madan::nn::Tensor;
use madan::trainer::{
    ablation_rows, evaluate, Ablation, DomainData, RunStatus, TrainConfig, TrainData, TrainMode, Trainer, FINAL_FILE,
};

pub use config::RunConfig;

pub const EVAL_FILE: &str = "eval.csv";
pub const TRANSLATE_FILE: &str = "translate.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_SUMMARY_FILE: &str = "ablation_summary.csv";
pub const DATA_CONFIG_FILE: &str = "data.resolved.txt";
/// Row label of the source-combined baseline in ablation tables.
pub const SOURCE_ONLY_ROW: &str = "source-only";

#[derive(Parser, Debug)]
#[command(
    name = "madan",
    version,
    about = "Multi-source adversarial domain aggregation at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render source and target datasets.
    GenData(GenDataArgs),
    /// Train the full staged pipeline.
    Train(TrainArgs),
    /// Evaluate a checkpoint's task segmenter on a labeled dataset.
    Eval(EvalArgs),
    /// Write source | translated | round-trip image grids.
    Translate(TranslateArgs),
    /// Run the ablation table over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Number of source domains.
    #[arg(long)]
    pub sources: Option<usize>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut v = Vec::new();
        if let Some(m) = self.sources {
            v.push(("model.sources".to_string(), m.to_string()));
        }
        for s in &self.set {
            v.push(config::parse_assignment(s)?);
        }
        Ok(v)
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root directory for the generated datasets.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory (defaults to the checkpoint's directory with --resume).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated ablation flags: no_sad, no_ccd, no_dsc, no_feat.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Epochs for every stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub outer_rounds: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs (a checkpoint is written first).
    #[arg(long, value_parser = positive)]
    pub halt_after: Option<usize>,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Expected class count; must match the checkpoint.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Directory for eval.csv (defaults to the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Images per source.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Use the training split instead of the held-out split.
    #[arg(long)]
    pub train_split: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    /// Also train the source-combined source-only baseline.
    #[arg(long)]
    pub source_only: bool,
    /// Restrict the sweep to these row labels (comma-separated).
    #[arg(long)]
    pub rows: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub outer_rounds: Option<usize>,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Translate(a) => cmd_translate(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn class_names(classes: usize) -> Vec<String> {
    if classes == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..classes).map(|k| format!("class_{k}")).collect()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let mut ov = a.cfg.overrides()?;
    if let Some(s) = a.seed {
        ov.push(("data.seed".into(), s.to_string()));
    }
    let cfg = RunConfig::resolve(a.cfg.config.as_deref(), &ov).context("gen-data")?;
    if is_non_empty_dir(&a.out) && !a.force {
        bail!("gen-data: {} exists and is not empty (use --force)", a.out.display());
    }
    let manifests = generate_suite(&cfg.data, &a.out).context("gen-data")?;
    write_text(&a.out.join(DATA_CONFIG_FILE), &cfg.to_text())?;
    for m in &manifests {
        println!(
            "{}: n={} size={}x{} classes={} labeled={} spec_hash={}",
            m.domain_id, m.n, m.height, m.width, m.classes, m.labeled, m.spec_hash
        );
    }
    Ok(())
}

/// Loads the suite under `root` as training tensors, checking it against
/// the model configuration.
pub fn load_train_data(root: &Path, cfg: &TrainConfig) -> Result<TrainData> {
    let suite =
        load_suite(root, cfg.sources()).with_context(|| format!("loading datasets under {}", root.display()))?;
    let all = suite.sources.iter().chain([&suite.target, &suite.target_test]);
    for d in all {
        if d.manifest.classes != cfg.model.classes {
            bail!(
                "dataset {} has {} classes, model expects {}",
                d.manifest.domain_id,
                d.manifest.classes,
                cfg.model.classes
            );
        }
    }
    Ok(TrainData::from_suite(&suite)?)
}

/// Sets every stage to `epochs`, pulling the freeze periods down so they fit.
fn set_epochs(cfg: &mut TrainConfig, epochs: usize) {
    cfg.stage_epochs = [epochs; 3];
    cfg.sad_freeze_epochs = cfg.sad_freeze_epochs.min(epochs);
    cfg.ccd_freeze_epochs = cfg.ccd_freeze_epochs.min(epochs);
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut ov = a.cfg.overrides()?;
    if let Some(s) = a.seed {
        ov.push(("seed".into(), s.to_string()));
    }
    if let Some(abl) = &a.ablate {
        ov.push(("ablate".into(), abl.clone()));
    }
    if let Some(r) = a.outer_rounds {
        ov.push(("outer_rounds".into(), r.to_string()));
    }
    let mut cfg = RunConfig::resolve(a.cfg.config.as_deref(), &ov).context("train")?;
    if let Some(e) = a.epochs {
        set_epochs(&mut cfg.train, e);
    }
    cfg.train.validate().context("train")?;
    let out = match (&a.out, &a.resume) {
        (Some(o), _) => o.clone(),
        (None, Some(ckpt)) => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => bail!("train: --out is required"),
    };
    if a.resume.is_none() && is_non_empty_dir(&out) && !a.force {
        bail!("train: {} exists and is not empty (use --force)", out.display());
    }
    let data = load_train_data(&a.data, &cfg.train).context("train")?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(cfg.train.clone(), &data, Some(out.clone()), ckpt),
        None => Trainer::new(cfg.train.clone(), &data, Some(out.clone())),
    }
    .context("train")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join(DATA_CONFIG_FILE), &cfg.to_text())?;
    match trainer.run(a.halt_after, |_, _| {}).context("train")? {
        RunStatus::Finished(o) => {
            match (o.best_miou, o.best_round) {
                (Some(m), Some(r)) => println!("best target mIoU {m:.4} (round {r}), {} steps", o.steps),
                _ => println!("finished without a trained segmenter, {} steps", o.steps),
            }
            println!("wrote {}", out.join(FINAL_FILE).display());
        }
        RunStatus::Halted => println!("halted after {} epochs", a.halt_after.unwrap_or(0)),
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelBundle<f32>> {
    let (bundle, _) = load_bundle::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(bundle)
}

/// Confusion matrix of the bundle's task segmenter on a labeled dataset
/// directory.
pub fn eval_dataset(bundle: &ModelBundle<f32>, dir: &Path) -> Result<ConfusionMatrix> {
    let ds = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if !ds.is_labeled() {
        bail!(
            "dataset {} ({}) has no labels; evaluation needs a labeled split",
            dir.display(),
            ds.manifest.domain_id
        );
    }
    if ds.manifest.classes != bundle.config.classes {
        bail!(
            "dataset has {} classes, checkpoint has {}",
            ds.manifest.classes,
            bundle.config.classes
        );
    }
    let data = DomainData::from_dataset(&ds)?;
    Ok(evaluate(bundle.adapted_segmenter(), &data)?)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let bundle = load_checkpoint(&a.checkpoint).context("eval")?;
    if let Some(l) = a.classes {
        if l != bundle.config.classes {
            bail!(
                "eval: --classes {l} does not match the checkpoint's {} classes",
                bundle.config.classes
            );
        }
    }
    let cm = eval_dataset(&bundle, &a.data).context("eval")?;
    let names = class_names(bundle.config.classes);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let text = format!("{}\n{}\n", report_header(&names), report(&cm, &names)?);
    let out = match &a.out {
        Some(o) => o.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join(EVAL_FILE), &text)?;
    println!("mIoU {:.4}", cm.iou()?.miou);
    Ok(())
}

/// Places `[3, H, W]` panels side by side.
pub fn grid(panels: &[RgbImage]) -> RgbImage {
    let h = panels[0].height;
    let w = panels[0].width;
    let total = w * panels.len();
    let mut data = vec![0u8; 3 * h * total];
    for (k, p) in panels.iter().enumerate() {
        for y in 0..h {
            let dst = (y * total + k * w) * 3;
            data[dst..dst + 3 * w].copy_from_slice(&p.data[y * w * 3..(y + 1) * w * 3]);
        }
    }
    RgbImage {
        height: h,
        width: total,
        data,
    }
}

fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum();
    s / a.numel() as f64
}

pub fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let bundle = load_checkpoint(&a.checkpoint).context("translate")?;
    let layout = SuiteLayout::new(&a.data);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = String::from("source,index,roundtrip_l1\n");
    for i in 0..bundle.sources() {
        let dir = if a.train_split {
            layout.source(i)
        } else {
            layout.source_test(i)
        };
        let ds = load_dataset(&dir).with_context(|| format!("translate: loading {}", dir.display()))?;
        let n = if a.n > ds.len() {
            warn!(
                "translate: {} has {} images, clamping n={} to {}",
                dir.display(),
                ds.len(),
                a.n,
                ds.len()
            );
            ds.len()
        } else {
            a.n
        };
        if n == 0 {
            continue;
        }
        let data = DomainData::from_dataset(&ds)?;
        let x = data.images.slice_batch(0, n)?;
        let fake = bundle.to_target[i].translate(&x).context("translate")?;
        let back = bundle.to_source[i].translate(&fake).context("translate")?;
        for j in 0..n {
            let panels = [&x, &fake, &back]
                .iter()
                .map(|t| RgbImage::from_tensor(&t.slice_batch(j, 1)?))
                .collect::<madan::Result<Vec<_>>>()?;
            let path = a.out.join(format!("source_{i}_{j:03}.ppm"));
            fs::write(&path, encode_ppm(&grid(&panels))).with_context(|| format!("writing {}", path.display()))?;
            let l1 = mean_abs_diff(&x.slice_batch(j, 1)?, &back.slice_batch(j, 1)?);
            csv.push_str(&format!("{i},{j},{l1:.6}\n"));
        }
        info!("translate: source {i}: {n} grids");
    }
    write_text(&a.out.join(TRANSLATE_FILE), &csv)?;
    Ok(())
}

/// Directory name for an ablation row label.
pub fn row_slug(label: &str) -> String {
    if label == SOURCE_ONLY_ROW {
        return "source_only".into();
    }
    let s = label.trim_start_matches('+').replace('+', "_").to_lowercase();
    if s.is_empty() {
        "baseline".into()
    } else {
        s
    }
}

/// Rows of the ablation sweep: label and the configuration it trains.
pub fn ablation_plan(base: &TrainConfig, source_only: bool) -> Vec<(String, TrainConfig)> {
    let mut rows: Vec<(String, TrainConfig)> = ablation_rows()
        .into_iter()
        .map(|(label, abl)| {
            let cfg = TrainConfig {
                mode: TrainMode::Madan,
                ablations: abl,
                ..base.clone()
            };
            (label.to_string(), cfg)
        })
        .collect();
    if source_only {
        let cfg = TrainConfig {
            mode: TrainMode::SourceOnly,
            ablations: Ablation::ALL.to_vec(),
            ..base.clone()
        };
        rows.push((SOURCE_ONLY_ROW.to_string(), cfg));
    }
    rows
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let mut ov = a.cfg.overrides()?;
    if let Some(r) = a.outer_rounds {
        ov.push(("outer_rounds".into(), r.to_string()));
    }
    let mut base = RunConfig::resolve(a.cfg.config.as_deref(), &ov).context("ablate")?;
    if let Some(e) = a.epochs {
        set_epochs(&mut base.train, e);
    }
    let seeds = a
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("ablate: bad seed `{s}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut plan = ablation_plan(&base.train, a.source_only);
    if let Some(rows) = &a.rows {
        let wanted: Vec<&str> = rows.split(',').map(str::trim).collect();
        for w in &wanted {
            if !plan.iter().any(|(l, _)| l == w) {
                bail!("ablate: unknown row `{w}`");
            }
        }
        plan.retain(|(l, _)| wanted.contains(&l.as_str()));
    }
    let data = load_train_data(&a.data, &base.train).context("ablate")?;
    let layout = SuiteLayout::new(&a.data);
    let names = class_names(base.train.model.classes);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut table = format!("row,seed,{}\n", report_header(&names));
    let mut summary = String::from("row,median_miou,seeds\n");
    for (label, cfg) in &plan {
        let mut mious = Vec::new();
        for &seed in &seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let dir = a.out.join(row_slug(label)).join(format!("seed_{seed}"));
            let resolved: String = cfg.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect();
            let done = fs::read_to_string(dir.join(madan::trainer::RESOLVED_CONFIG_FILE)).ok() == Some(resolved)
                && dir.join(FINAL_FILE).exists();
            if done {
                info!("ablate: {label} seed {seed}: reusing {}", dir.display());
            } else {
                info!("ablate: {label} seed {seed}: training in {}", dir.display());
                madan::trainer::run_madan(&cfg, &data, Some(&dir))
                    .with_context(|| format!("ablate: row {label} seed {seed}"))?;
            }
            let bundle = load_checkpoint(&dir.join(FINAL_FILE))?;
            let cm = eval_dataset(&bundle, &layout.target_test())?;
            mious.push(cm.iou()?.miou);
            table.push_str(&format!("{label},{seed},{}\n", report(&cm, &names)?));
            write_text(&a.out.join(ABLATION_FILE), &table)?;
        }
        let per_seed = mious.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" ");
        let med = median(&mut mious);
        println!("{label:<20} median mIoU {med:.4}  [{per_seed}]");
        summary.push_str(&format!("{label},{med:.6},{per_seed}\n"));
    }
    write_text(&a.out.join(ABLATION_SUMMARY_FILE), &summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_distinct() {
        let mut slugs: Vec<String> = ablation_plan(&TrainConfig::default(), true)
            .iter()
            .map(|(l, _)| row_slug(l))
            .collect();
        assert_eq!(slugs[0], "baseline");
        assert_eq!(slugs[7], "sad_ccd_dsc_feat");
        slugs.sort();
        slugs.dedup();
        assert_eq!(slugs.len(), 9);
    }

    #[test]
    fn grid_places_panels_left_to_right() {
        let p = |v: u8| RgbImage {
            height: 2,
            width: 1,
            data: vec![v; 6],
        };
        let g = grid(&[p(1), p(2), p(3)]);
        assert_eq!(g.width, 3);
        assert_eq!(&g.data[..9], &[1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn epochs_override_keeps_freeze_order() {
        let mut c = TrainConfig::default();
        set_epochs(&mut c, 0);
        assert!(c.validate().is_ok());
        let mut c = TrainConfig::default();
        set_epochs(&mut c, 12);
        assert_eq!((c.sad_freeze_epochs, c.ccd_freeze_epochs), (5, 10));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
