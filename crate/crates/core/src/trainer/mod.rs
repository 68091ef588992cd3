//! Staged training schedule.
//!
//! Round 1 runs all three stages, later rounds repeat stages 2 and 3:
//!
//! * stage 1: CycleGAN phase (adversarial + cycle terms), source
//!   segmenters `F_i` on raw sources (frozen afterwards), task segmenter
//!   `F` on adapted images;
//! * stage 2: generators continue with semantic consistency and, after
//!   their freeze periods, sub-domain aggregation and cross-domain cycle
//!   discrimination;
//! * stage 3: `F` on the aggregated adapted set with feature alignment,
//!   evaluated on the target split after every epoch.
//!
//! Every epoch draws its shuffles and crops from a stream derived from
//! `(seed, round, phase, epoch)`, so a run restored from an epoch-boundary
//! checkpoint continues exactly like the uninterrupted one.

pub mod config;
pub mod data;
pub mod log;
mod steps;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use madan_nn::{Adam, AdamConfig, ParamSet, Tensor};

use crate::checkpoint::{self, Archive};
use crate::datagen::LoadedSuite;
use crate::error::{MadanError, Result};
use crate::losses::{total_loss, SourceTerms, Term, TermValues};
use crate::metrics::ConfusionMatrix;
use crate::models::{ModelBundle, Segmenter};
use crate::rng;

pub use config::{ablation_rows, Ablation, TrainConfig, TrainMode};
pub use data::{steps_per_epoch, DomainData, EpochOrder};
pub use log::{MetricsRow, METRICS_FILE, METRICS_HEADER};
use steps::{Optimizers, PixelFlags, StepLosses};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.txt";

/// Training phases; stage 1 consists of the first three.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    CycleGan,
    SourceSeg,
    AdaptedSeg,
    Adapt,
    Segment,
    SourceOnly,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::CycleGan => "cyclegan",
            Phase::SourceSeg => "source_seg",
            Phase::AdaptedSeg => "adapted_seg",
            Phase::Adapt => "adapt",
            Phase::Segment => "segment",
            Phase::SourceOnly => "source_only",
        }
    }

    pub fn stage(self) -> usize {
        match self {
            Phase::CycleGan | Phase::SourceSeg | Phase::AdaptedSeg => 1,
            Phase::Adapt => 2,
            Phase::Segment => 3,
            Phase::SourceOnly => 0,
        }
    }

    fn trains_task_segmenter(self) -> bool {
        matches!(self, Phase::AdaptedSeg | Phase::Segment | Phase::SourceOnly)
    }

    fn ends_round(self) -> bool {
        matches!(self, Phase::Segment | Phase::SourceOnly)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = MadanError;
    fn from_str(s: &str) -> Result<Self> {
        [
            Phase::CycleGan,
            Phase::SourceSeg,
            Phase::AdaptedSeg,
            Phase::Adapt,
            Phase::Segment,
            Phase::SourceOnly,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| MadanError::Config(format!("unknown phase `{s}`")))
    }
}

/// One entry of the schedule; rounds are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhasePlan {
    pub round: usize,
    pub phase: Phase,
    pub epochs: usize,
}

/// The full phase sequence of a configuration.
pub fn schedule(cfg: &TrainConfig) -> Vec<PhasePlan> {
    let [e1, e2, e3] = cfg.stage_epochs;
    let mut out = Vec::new();
    for round in 1..=cfg.outer_rounds {
        let mut push = |phase, epochs| out.push(PhasePlan { round, phase, epochs });
        match cfg.mode {
            TrainMode::SourceOnly => push(Phase::SourceOnly, if round == 1 { e1 + e3 } else { e3 }),
            TrainMode::Madan => {
                if round == 1 {
                    push(Phase::CycleGan, e1);
                    // source segmenters only feed the semantic-consistency term
                    let sem = cfg.effective_weights().w_sem > 0.0;
                    push(Phase::SourceSeg, if sem { e1 } else { 0 });
                    push(Phase::AdaptedSeg, e1);
                }
                push(Phase::Adapt, e2);
                push(Phase::Segment, e3);
            }
        }
    }
    out
}

/// Domain tensors used by training.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub sources: Vec<DomainData>,
    pub target: DomainData,
    /// Labeled target split used only for evaluation.
    pub target_test: DomainData,
}

impl TrainData {
    pub fn from_suite(suite: &LoadedSuite) -> Result<Self> {
        Ok(Self {
            sources: suite
                .sources
                .iter()
                .map(DomainData::from_dataset)
                .collect::<Result<_>>()?,
            target: DomainData::from_dataset(&suite.target)?,
            target_test: DomainData::from_dataset(&suite.target_test)?,
        })
    }

    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        if self.sources.len() != cfg.sources() {
            return Err(MadanError::Config(format!(
                "{} source datasets for {} configured sources",
                self.sources.len(),
                cfg.sources()
            )));
        }
        if self.sources.iter().any(|s| s.labels.is_none()) {
            return Err(MadanError::Rejected("source datasets must be labeled".into()));
        }
        if self.target_test.labels.is_none() {
            return Err(MadanError::Rejected("target evaluation split must be labeled".into()));
        }
        let all = self.sources.iter().chain([&self.target, &self.target_test]);
        for d in all {
            if d.is_empty() {
                return Err(MadanError::Rejected("empty dataset".into()));
            }
            let (h, w) = (d.height(), d.width());
            if h % 8 != 0 || w % 8 != 0 {
                return Err(MadanError::Config(format!("image size {h}x{w} must be divisible by 8")));
            }
            if cfg.crop > h || cfg.crop > w {
                return Err(MadanError::Config(format!(
                    "crop {} exceeds image size {h}x{w}",
                    cfg.crop
                )));
            }
        }
        Ok(())
    }

    fn source_len(&self) -> usize {
        self.sources.iter().map(DomainData::len).max().unwrap_or(0)
    }

    fn union_len(&self) -> usize {
        self.sources.iter().map(DomainData::len).sum()
    }

    /// Samples that define one epoch of `phase`.
    pub fn epoch_len(&self, phase: Phase) -> usize {
        match phase {
            Phase::CycleGan | Phase::Adapt | Phase::SourceSeg => self.source_len(),
            Phase::AdaptedSeg | Phase::Segment | Phase::SourceOnly => self.union_len(),
        }
    }
}

/// Optimizer steps the configuration performs on `data`.
pub fn planned_steps(cfg: &TrainConfig, data: &TrainData) -> u64 {
    schedule(cfg)
        .iter()
        .map(|p| (p.epochs * steps_per_epoch(data.epoch_len(p.phase), cfg.batch_size)) as u64)
        .sum()
}

/// Best end-of-round task segmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct BestSegmenter {
    pub miou: f64,
    pub round: usize,
    pub params: ParamSet<f32>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bundle: ModelBundle<f32>,
    pub optimizers: BTreeMap<String, Adam<f32>>,
    /// Position in [`schedule`] and next epoch within that phase.
    pub phase_index: usize,
    pub epoch: usize,
    pub steps: u64,
    /// Completed stage-2 epochs over all rounds; drives the freeze schedule.
    pub stage2_epochs_done: usize,
    pub best: Option<BestSegmenter>,
    pub history: Vec<MetricsRow>,
}

fn adam_config(cfg: &TrainConfig, key: &str) -> AdamConfig {
    let (beta1, beta2) = if key == "f" || key.starts_with("f_src") {
        cfg.seg_betas
    } else {
        cfg.gan_betas
    };
    AdamConfig {
        lr: cfg.learning_rate,
        beta1,
        beta2,
        eps: 1e-8,
    }
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::new(&cfg.model)?;
        let optimizers = bundle
            .named_params()
            .into_iter()
            .map(|(k, ps)| {
                let a = Adam::new(adam_config(cfg, &k), ps);
                (k, a)
            })
            .collect();
        Ok(Self {
            bundle,
            optimizers,
            phase_index: 0,
            epoch: 0,
            steps: 0,
            stage2_epochs_done: 0,
            best: None,
            history: Vec::new(),
        })
    }

    /// Serializes the state and the configuration that produced it.
    pub fn to_archive(&self, cfg: &TrainConfig) -> Archive<f32> {
        let mut a = Archive::default();
        checkpoint::store_bundle(&mut a, &self.bundle);
        for (k, v) in cfg.entries() {
            a.set(format!("config.{k}"), v);
        }
        a.set("state.phase_index", self.phase_index);
        a.set("state.epoch", self.epoch);
        a.set("state.steps", self.steps);
        a.set("state.stage2_epochs_done", self.stage2_epochs_done);
        a.set("state.history_len", self.history.len());
        for (i, row) in self.history.iter().enumerate() {
            a.set(format!("history.{i:06}"), row.to_record());
        }
        for (key, adam) in &self.optimizers {
            a.set(format!("adam.{key}.steps"), adam.steps());
            let (m, v) = adam.moments();
            for (i, t) in m.iter().enumerate() {
                a.tensors.push((format!("adam/{key}/m/{i}"), t.clone()));
            }
            for (i, t) in v.iter().enumerate() {
                a.tensors.push((format!("adam/{key}/v/{i}"), t.clone()));
            }
        }
        if let Some(b) = &self.best {
            a.set("state.best_miou", format!("{:e}", b.miou));
            a.set("state.best_round", b.round);
            for (name, t) in b.params.names().iter().zip(b.params.tensors()) {
                a.tensors.push((format!("best_f/{name}"), t.clone()));
            }
        }
        a
    }

    /// Inverse of [`Self::to_archive`]; returns the stored configuration.
    pub fn from_archive(mut a: Archive<f32>, path: &Path) -> Result<(Self, TrainConfig)> {
        let bad = |d: String| MadanError::format("checkpoint", path, d);
        let cfg = TrainConfig::from_lookup(|k| a.get(&format!("config.{k}")).map(str::to_string))
            .map_err(|e| bad(format!("stored config: {e}")))?;
        let bundle = checkpoint::restore_bundle(&mut a, path)?;
        let num = |a: &Archive<f32>, k: &str| -> Result<u64> {
            a.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("missing or invalid {k}")))
        };
        let mut optimizers = BTreeMap::new();
        for (key, ps) in bundle.named_params() {
            let steps = num(&a, &format!("adam.{key}.steps"))?;
            let mut take = |kind: &str| -> Result<Vec<Tensor<f32>>> {
                (0..ps.len())
                    .map(|i| {
                        let name = format!("adam/{key}/{kind}/{i}");
                        a.take_tensor(&name)
                            .ok_or_else(|| bad(format!("missing tensor {name}")))
                    })
                    .collect()
            };
            let m = take("m")?;
            let v = take("v")?;
            optimizers.insert(key.clone(), Adam::restore(adam_config(&cfg, &key), steps, m, v));
        }
        let history_len = num(&a, "state.history_len")? as usize;
        let history = (0..history_len)
            .map(|i| {
                let k = format!("history.{i:06}");
                MetricsRow::parse(a.get(&k).ok_or_else(|| bad(format!("missing {k}")))?)
            })
            .collect::<Result<_>>()?;
        let best = match a.get("state.best_miou") {
            None => None,
            Some(m) => {
                let miou: f64 = m.parse().map_err(|_| bad("invalid state.best_miou".into()))?;
                let round = num(&a, "state.best_round")? as usize;
                let mut params = bundle.segmenter.params.clone();
                for (i, name) in bundle.segmenter.params.names().iter().enumerate() {
                    let full = format!("best_f/{name}");
                    params.tensors_mut()[i] = a.take_tensor(&full).ok_or_else(|| bad(format!("missing {full}")))?;
                }
                Some(BestSegmenter { miou, round, params })
            }
        };
        let state = Self {
            phase_index: num(&a, "state.phase_index")? as usize,
            epoch: num(&a, "state.epoch")? as usize,
            steps: num(&a, "state.steps")?,
            stage2_epochs_done: num(&a, "state.stage2_epochs_done")? as usize,
            bundle,
            optimizers,
            best,
            history,
        };
        Ok((state, cfg))
    }

    /// The bundle with the best end-of-round task segmenter installed.
    pub fn best_bundle(&self) -> ModelBundle<f32> {
        let mut b = self.bundle.clone();
        if let Some(best) = &self.best {
            b.segmenter.params = best.params.clone();
        }
        b
    }
}

/// Confusion matrix of `seg` on a labeled domain at full resolution.
pub fn evaluate(seg: &Segmenter<f32>, data: &DomainData) -> Result<ConfusionMatrix> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| MadanError::Rejected("evaluation needs a labeled dataset".into()))?;
    let pred = seg.predict(&data.images)?;
    let mut cm = ConfusionMatrix::new(seg.classes);
    cm.accumulate(&pred, labels)?;
    Ok(cm)
}

/// Result of [`Trainer::run`].
#[derive(Clone, Debug)]
pub enum RunStatus {
    Finished(TrainOutcome),
    /// Stopped by `halt_after`; a checkpoint of the stopping point exists.
    Halted,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final networks with the best end-of-round task segmenter.
    pub bundle: ModelBundle<f32>,
    pub history: Vec<MetricsRow>,
    pub best_miou: Option<f64>,
    pub best_round: Option<usize>,
    pub steps: u64,
}

/// Per-phase data that stays fixed during the phase.
enum PhaseData {
    None,
    Labeled(DomainData),
}

/// Drives a [`TrainState`] through the schedule.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a TrainData,
    out_dir: Option<PathBuf>,
    state: TrainState,
    schedule: Vec<PhasePlan>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainData, out_dir: Option<PathBuf>) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::with_state(cfg, data, out_dir, state)
    }

    /// Continues from a checkpoint written by an earlier run of `cfg`.
    pub fn resume(cfg: TrainConfig, data: &'a TrainData, out_dir: Option<PathBuf>, ckpt: &Path) -> Result<Self> {
        let archive = Archive::read(ckpt)?;
        let (state, stored) = TrainState::from_archive(archive, ckpt)?;
        let strip = |c: &TrainConfig| TrainConfig {
            checkpoint_every: 1,
            ..c.clone()
        };
        if strip(&stored) != strip(&cfg) {
            return Err(MadanError::Config(format!(
                "checkpoint {} was written with a different configuration",
                ckpt.display()
            )));
        }
        Self::with_state(cfg, data, out_dir, state)
    }

    fn with_state(cfg: TrainConfig, data: &'a TrainData, out_dir: Option<PathBuf>, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        data.check(&cfg)?;
        let schedule = schedule(&cfg);
        Ok(Self {
            cfg,
            data,
            out_dir,
            state,
            schedule,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &[PhasePlan] {
        &self.schedule
    }

    /// Runs to completion, or until `halt_after` epochs were trained by
    /// this call. `observe` sees the state after every epoch.
    pub fn run(
        &mut self,
        halt_after: Option<usize>,
        mut observe: impl FnMut(&TrainState, &MetricsRow),
    ) -> Result<RunStatus> {
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| MadanError::io("creating run directory", dir, e))?;
            let mut text = String::new();
            for (k, v) in self.cfg.entries() {
                text.push_str(&format!("{k}={v}\n"));
            }
            crate::datagen::io::write_atomic(&dir.join(RESOLVED_CONFIG_FILE), text.as_bytes())?;
            log::write_all(dir, &self.state.history)?;
        }
        let mut trained = 0usize;
        let mut phase_data: Option<(usize, PhaseData)> = None;
        while self.state.phase_index < self.schedule.len() {
            let pi = self.state.phase_index;
            let plan = self.schedule[pi];
            let ctx = |e: MadanError, epoch: usize| {
                e.in_stage(format!(
                    "round {} stage {} ({}) epoch {}",
                    plan.round,
                    plan.phase.stage(),
                    plan.phase,
                    epoch
                ))
            };
            if self.state.epoch >= plan.epochs {
                self.finish_phase(plan).map_err(|e| ctx(e, self.state.epoch))?;
                self.write_checkpoint()?;
                continue;
            }
            if phase_data.as_ref().map(|(i, _)| *i) != Some(pi) {
                let d = self.prepare_phase(plan).map_err(|e| ctx(e, self.state.epoch))?;
                phase_data = Some((pi, d));
            }
            let pd = &phase_data.as_ref().expect("prepared").1;
            let epoch = self.state.epoch;
            let row = self.run_epoch(plan, pd).map_err(|e| ctx(e, epoch))?;
            ::log::info!("{}", row.to_csv());
            if let Some(dir) = &self.out_dir {
                log::append(dir, &row)?;
            }
            self.state.history.push(row.clone());
            self.state.epoch += 1;
            if plan.phase == Phase::Adapt {
                self.state.stage2_epochs_done += 1;
            }
            let phase_done = self.state.epoch == plan.epochs;
            if phase_done {
                self.finish_phase(plan).map_err(|e| ctx(e, epoch))?;
            }
            observe(&self.state, &row);
            trained += 1;
            let halt = halt_after == Some(trained);
            if phase_done || halt || trained.is_multiple_of(self.cfg.checkpoint_every) {
                self.write_checkpoint()?;
            }
            if halt && self.state.phase_index < self.schedule.len() {
                return Ok(RunStatus::Halted);
            }
        }
        let bundle = self.state.best_bundle();
        if let Some(dir) = &self.out_dir {
            let mut extra = vec![("steps", self.state.steps.to_string())];
            if let Some(b) = &self.state.best {
                extra.push(("best_miou", format!("{:.6}", b.miou)));
                extra.push(("best_round", b.round.to_string()));
            }
            checkpoint::save_bundle(&dir.join(FINAL_FILE), &bundle, &extra)?;
        }
        Ok(RunStatus::Finished(TrainOutcome {
            bundle,
            history: self.state.history.clone(),
            best_miou: self.state.best.as_ref().map(|b| b.miou),
            best_round: self.state.best.as_ref().map(|b| b.round),
            steps: self.state.steps,
        }))
    }

    fn write_checkpoint(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            self.state.to_archive(&self.cfg).write(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }

    fn translate_sources(&self) -> Result<DomainData> {
        let parts = self
            .data
            .sources
            .iter()
            .zip(&self.state.bundle.to_target)
            .map(|(d, g)| {
                Ok(DomainData {
                    images: g.translate(&d.images)?,
                    labels: d.labels.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DomainData::concat(&parts.iter().collect::<Vec<_>>())
    }

    fn prepare_phase(&mut self, plan: PhasePlan) -> Result<PhaseData> {
        match plan.phase {
            Phase::AdaptedSeg | Phase::Segment => {
                if plan.phase == Phase::Segment && self.cfg.reinit_segmenter && self.state.epoch == 0 {
                    self.reinit_segmenter(plan.round)?;
                }
                Ok(PhaseData::Labeled(self.translate_sources()?))
            }
            Phase::SourceOnly => {
                let parts: Vec<&DomainData> = self.data.sources.iter().collect();
                Ok(PhaseData::Labeled(DomainData::concat(&parts)?))
            }
            Phase::CycleGan | Phase::SourceSeg | Phase::Adapt => Ok(PhaseData::None),
        }
    }

    fn reinit_segmenter(&mut self, round: usize) -> Result<()> {
        let mut model = self.cfg.model.clone();
        model.seed = rng::hash64(&[
            b"reinit",
            &self.cfg.model.seed.to_le_bytes(),
            &(round as u64).to_le_bytes(),
        ]);
        let fresh = ModelBundle::<f32>::new(&model)?;
        self.state.bundle.segmenter = fresh.segmenter;
        let a = Adam::new(adam_config(&self.cfg, "f"), &self.state.bundle.segmenter.params);
        self.state.optimizers.insert("f".into(), a);
        Ok(())
    }

    fn finish_phase(&mut self, plan: PhasePlan) -> Result<()> {
        if plan.phase == Phase::SourceSeg {
            self.state.bundle.set_source_segmenters_frozen(true);
        }
        if plan.phase.ends_round() {
            let miou = match self.state.history.last() {
                Some(r) if plan.epochs > 0 && r.round == plan.round && r.phase == plan.phase => {
                    r.target_miou.expect("segment rows carry mIoU")
                }
                _ => {
                    evaluate(&self.state.bundle.segmenter, &self.data.target_test)?
                        .iou()?
                        .miou
                }
            };
            if self.state.best.as_ref().is_none_or(|b| miou > b.miou) {
                self.state.best = Some(BestSegmenter {
                    miou,
                    round: plan.round,
                    params: self.state.bundle.segmenter.params.clone(),
                });
            }
        }
        self.state.phase_index += 1;
        self.state.epoch = 0;
        Ok(())
    }

    fn epoch_rng(&self, plan: PhasePlan) -> rng::Rng {
        let key = rng::hash64(&[
            b"epoch",
            &(plan.round as u64).to_le_bytes(),
            plan.phase.name().as_bytes(),
            &(self.state.epoch as u64).to_le_bytes(),
        ]);
        rng::stream(self.cfg.seed, key)
    }

    fn run_epoch(&mut self, plan: PhasePlan, pd: &PhaseData) -> Result<MetricsRow> {
        let w = self.cfg.effective_weights();
        let b = self.cfg.batch_size;
        let data = self.data;
        let mut r = self.epoch_rng(plan);
        let mut sum = StepLosses::default();
        let n = data.epoch_len(plan.phase);
        let steps = steps_per_epoch(n, b);
        let bundle = &mut self.state.bundle;
        let opts: &mut Optimizers = &mut self.state.optimizers;
        match plan.phase {
            Phase::CycleGan | Phase::Adapt => {
                let flags = if plan.phase == Phase::Adapt {
                    let e = self.state.stage2_epochs_done;
                    PixelFlags {
                        sem: w.w_sem > 0.0,
                        sad: w.w_sad > 0.0 && e >= self.cfg.sad_freeze_epochs,
                        ccd: w.w_ccd > 0.0 && e >= self.cfg.ccd_freeze_epochs,
                    }
                } else {
                    PixelFlags::default()
                };
                let orders: Vec<EpochOrder> = data.sources.iter().map(|d| EpochOrder::new(&mut r, d.len())).collect();
                let t_order = EpochOrder::new(&mut r, data.target.len());
                for s in 0..steps {
                    let mut xs = Vec::with_capacity(orders.len());
                    for (d, o) in data.sources.iter().zip(&orders) {
                        xs.push(d.batch(&o.indices(s, b, n), Some((self.cfg.crop, &mut r)))?.0);
                    }
                    let xt = data
                        .target
                        .batch(&t_order.indices(s, b, n), Some((self.cfg.crop, &mut r)))?
                        .0;
                    let l = steps::pixel_step(bundle, opts, &w, flags, self.cfg.dsc_joint, &xs, &xt)?;
                    accumulate(&mut sum, &l);
                    self.state.steps += 1;
                }
            }
            Phase::SourceSeg => {
                let orders: Vec<EpochOrder> = data.sources.iter().map(|d| EpochOrder::new(&mut r, d.len())).collect();
                let m = data.sources.len() as f64;
                for s in 0..steps {
                    for (i, (d, o)) in data.sources.iter().zip(&orders).enumerate() {
                        let (x, y) = d.batch(&o.indices(s, b, n), None)?;
                        let seg = bundle.source_segmenter_mut(i)?;
                        let adam = opts.get_mut(&format!("f_src.{i}")).expect("registered");
                        let v = steps::task_step(seg, adam, w.w_task, &x, &y.expect("labeled"))?;
                        sum.terms[6] += v / m;
                    }
                    self.state.steps += 1;
                }
            }
            Phase::AdaptedSeg | Phase::Segment | Phase::SourceOnly => {
                let PhaseData::Labeled(set) = pd else {
                    unreachable!("segmentation phases prepare a labeled set")
                };
                let order = EpochOrder::new(&mut r, set.len());
                let feat = plan.phase == Phase::Segment && w.w_feat > 0.0;
                let t_order = EpochOrder::new(&mut r, data.target.len());
                for s in 0..steps {
                    let (x, y) = set.batch(&order.indices(s, b, n), None)?;
                    let y = y.expect("labeled");
                    let l = if plan.phase == Phase::Segment {
                        let xt = if feat {
                            Some(data.target.batch(&t_order.indices(s, b, n), None)?.0)
                        } else {
                            None
                        };
                        steps::segment_step(bundle, opts, &w, &x, &y, xt.as_ref())?
                    } else {
                        let adam = opts.get_mut("f").expect("registered");
                        let mut l = StepLosses::default();
                        l.terms[6] = steps::task_step(&mut bundle.segmenter, adam, w.w_task, &x, &y)?;
                        l
                    };
                    accumulate(&mut sum, &l);
                    self.state.steps += 1;
                }
            }
        }
        let k = steps.max(1) as f64;
        let mut terms = sum.terms;
        for t in terms.iter_mut() {
            *t /= k;
        }
        let values = TermValues {
            per_source: vec![SourceTerms {
                gan_st: terms[0],
                gan_ts: terms[1],
                cyc: terms[2],
                sem: terms[3],
                sad: terms[4],
                ccd: terms[5],
            }],
            task: terms[6],
            feat: terms[7],
        };
        debug_assert_eq!(Term::ALL[6], Term::Task);
        let report = total_loss(&values, &w)?;
        let target_miou = if plan.phase.trains_task_segmenter() {
            Some(evaluate(&self.state.bundle.segmenter, &data.target_test)?.iou()?.miou)
        } else {
            None
        };
        Ok(MetricsRow {
            round: plan.round,
            stage: plan.phase.stage(),
            phase: plan.phase,
            epoch: self.state.epoch,
            terms,
            d_loss: sum.d_loss / k,
            total: report.total,
            target_miou,
        })
    }
}

fn accumulate(sum: &mut StepLosses, l: &StepLosses) {
    for (a, b) in sum.terms.iter_mut().zip(&l.terms) {
        *a += b;
    }
    sum.d_loss += l.d_loss;
}

/// Convenience wrapper: trains `cfg` on `data` to completion.
pub fn run_madan(cfg: &TrainConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone(), data, out_dir.map(Path::to_path_buf))?;
    match t.run(None, |_, _| {})? {
        RunStatus::Finished(o) => Ok(o),
        RunStatus::Halted => unreachable!("no halt requested"),
    }
}
