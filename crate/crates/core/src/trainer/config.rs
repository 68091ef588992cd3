//! Training configuration and its flat `key=value` form.

use std::fmt;
use std::str::FromStr;

use crate::checkpoint::{model_config_entries, model_config_from};
use crate::error::{MadanError, Result};
use crate::losses::LossWeights;
use crate::models::ModelConfig;

/// Which training procedure to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// The staged multi-source adaptation schedule.
    Madan,
    /// Segmenter trained on the union of raw source images only.
    SourceOnly,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Madan => "madan",
            TrainMode::SourceOnly => "source_only",
        })
    }
}

impl FromStr for TrainMode {
    type Err = MadanError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "madan" => Ok(TrainMode::Madan),
            "source_only" => Ok(TrainMode::SourceOnly),
            _ => Err(MadanError::Config(format!("mode `{s}`: expected madan or source_only"))),
        }
    }
}

/// Component switches used by ablation sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ablation {
    NoSad,
    NoCcd,
    NoDsc,
    NoFeat,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoSad, Ablation::NoCcd, Ablation::NoDsc, Ablation::NoFeat];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoSad => "no_sad",
            Ablation::NoCcd => "no_ccd",
            Ablation::NoDsc => "no_dsc",
            Ablation::NoFeat => "no_feat",
        }
    }

    /// Zeroes the loss weight of the disabled component.
    pub fn apply(self, w: &mut LossWeights) {
        match self {
            Ablation::NoSad => w.w_sad = 0.0,
            Ablation::NoCcd => w.w_ccd = 0.0,
            Ablation::NoDsc => w.w_sem = 0.0,
            Ablation::NoFeat => w.w_feat = 0.0,
        }
    }

    /// Parses a comma-separated list such as `no_sad,no_feat`.
    pub fn parse_list(s: &str) -> Result<Vec<Ablation>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let a = Ablation::ALL
                .into_iter()
                .find(|a| a.name() == part)
                .ok_or_else(|| MadanError::Config(format!("unknown ablation flag `{part}`")))?;
            if !out.contains(&a) {
                out.push(a);
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Rows of the component ablation table: label and disabled components.
pub fn ablation_rows() -> Vec<(&'static str, Vec<Ablation>)> {
    use Ablation::*;
    vec![
        ("baseline", vec![NoSad, NoCcd, NoDsc, NoFeat]),
        ("+SAD", vec![NoCcd, NoDsc, NoFeat]),
        ("+CCD", vec![NoSad, NoDsc, NoFeat]),
        ("+SAD+CCD", vec![NoDsc, NoFeat]),
        ("+SAD+DSC", vec![NoCcd, NoFeat]),
        ("+CCD+DSC", vec![NoSad, NoFeat]),
        ("+SAD+CCD+DSC", vec![NoFeat]),
        ("+SAD+CCD+DSC+Feat", vec![]),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: TrainMode,
    /// Epochs of stage 1, 2 and 3.
    pub stage_epochs: [usize; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Adam betas for generators and discriminators.
    pub gan_betas: (f64, f64),
    /// Adam betas for segmenters.
    pub seg_betas: (f64, f64),
    pub sad_freeze_epochs: usize,
    pub ccd_freeze_epochs: usize,
    pub outer_rounds: usize,
    pub weights: LossWeights,
    pub ablations: Vec<Ablation>,
    pub seed: u64,
    /// Side of the random square crops used for pixel-level training.
    pub crop: usize,
    /// Write a checkpoint every this many epochs (and at every phase end).
    pub checkpoint_every: usize,
    /// Let the semantic-consistency term also update the task segmenter.
    pub dsc_joint: bool,
    /// Re-initialize the task segmenter at the start of every stage 3.
    pub reinit_segmenter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mode: TrainMode::Madan,
            stage_epochs: [20; 3],
            batch_size: 8,
            learning_rate: 1e-4,
            gan_betas: (0.5, 0.999),
            seg_betas: (0.9, 0.999),
            sad_freeze_epochs: 5,
            ccd_freeze_epochs: 10,
            outer_rounds: 2,
            weights: LossWeights::default(),
            ablations: Vec::new(),
            seed: 0,
            crop: 48,
            checkpoint_every: 1,
            dsc_joint: false,
            reinit_segmenter: false,
        }
    }
}

impl TrainConfig {
    pub fn sources(&self) -> usize {
        self.model.sources
    }

    /// Loss weights after ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        for a in &self.ablations {
            a.apply(&mut w);
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MadanError::Config(m));
        self.weights.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, (b1, b2)) in [("gan", self.gan_betas), ("seg", self.seg_betas)] {
            if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
                return bad(format!("{name} betas must lie in [0, 1)"));
            }
        }
        let e2 = self.stage_epochs[1];
        if !(self.sad_freeze_epochs <= self.ccd_freeze_epochs && self.ccd_freeze_epochs <= e2) {
            return bad(format!(
                "need sad_freeze_epochs ({}) <= ccd_freeze_epochs ({}) <= stage2_epochs ({e2})",
                self.sad_freeze_epochs, self.ccd_freeze_epochs
            ));
        }
        if self.outer_rounds == 0 {
            return bad("outer_rounds must be >= 1".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(8) {
            return bad(format!("crop must be a positive multiple of 8, got {}", self.crop));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        let w = self.effective_weights();
        if self.mode == TrainMode::Madan && self.sources() < 2 && (w.w_sad > 0.0 || w.w_ccd > 0.0) {
            return bad("domain aggregation needs at least two sources; disable it with no_sad,no_ccd".into());
        }
        Ok(())
    }

    /// Every knob as `key=value` pairs, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        let mut v: Vec<(String, String)> = vec![
            ("mode".into(), self.mode.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("stage1_epochs".into(), self.stage_epochs[0].to_string()),
            ("stage2_epochs".into(), self.stage_epochs[1].to_string()),
            ("stage3_epochs".into(), self.stage_epochs[2].to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("gan_beta1".into(), self.gan_betas.0.to_string()),
            ("gan_beta2".into(), self.gan_betas.1.to_string()),
            ("seg_beta1".into(), self.seg_betas.0.to_string()),
            ("seg_beta2".into(), self.seg_betas.1.to_string()),
            ("sad_freeze_epochs".into(), self.sad_freeze_epochs.to_string()),
            ("ccd_freeze_epochs".into(), self.ccd_freeze_epochs.to_string()),
            ("outer_rounds".into(), self.outer_rounds.to_string()),
            ("w_gan".into(), w.w_gan.to_string()),
            ("w_cyc".into(), w.w_cyc.to_string()),
            ("w_sem".into(), w.w_sem.to_string()),
            ("w_sad".into(), w.w_sad.to_string()),
            ("w_ccd".into(), w.w_ccd.to_string()),
            ("w_task".into(), w.w_task.to_string()),
            ("w_feat".into(), w.w_feat.to_string()),
            (
                "ablate".into(),
                self.ablations.iter().map(|a| a.name()).collect::<Vec<_>>().join(","),
            ),
            ("crop".into(), self.crop.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("dsc_joint".into(), self.dsc_joint.to_string()),
            ("reinit_segmenter".into(), self.reinit_segmenter.to_string()),
        ];
        v.extend(
            model_config_entries(&self.model)
                .into_iter()
                .map(|(k, s)| (k.to_string(), s)),
        );
        v
    }

    /// Inverse of [`Self::entries`]; every key must be present.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let get = |k: &str| lookup(k).ok_or_else(|| MadanError::Config(format!("missing key {k}")));
        fn parse<V: FromStr>(k: &str, s: String) -> Result<V> {
            s.trim()
                .parse()
                .map_err(|_| MadanError::Config(format!("{k}: cannot parse `{s}`")))
        }
        let num = |k: &str| -> Result<usize> { parse(k, get(k)?) };
        let real = |k: &str| -> Result<f64> { parse(k, get(k)?) };
        let flag = |k: &str| -> Result<bool> { parse(k, get(k)?) };
        Ok(Self {
            model: model_config_from(&lookup)?,
            mode: get("mode")?.parse()?,
            seed: parse("seed", get("seed")?)?,
            stage_epochs: [num("stage1_epochs")?, num("stage2_epochs")?, num("stage3_epochs")?],
            batch_size: num("batch_size")?,
            learning_rate: real("learning_rate")?,
            gan_betas: (real("gan_beta1")?, real("gan_beta2")?),
            seg_betas: (real("seg_beta1")?, real("seg_beta2")?),
            sad_freeze_epochs: num("sad_freeze_epochs")?,
            ccd_freeze_epochs: num("ccd_freeze_epochs")?,
            outer_rounds: num("outer_rounds")?,
            weights: LossWeights {
                w_gan: real("w_gan")?,
                w_cyc: real("w_cyc")?,
                w_sem: real("w_sem")?,
                w_sad: real("w_sad")?,
                w_ccd: real("w_ccd")?,
                w_task: real("w_task")?,
                w_feat: real("w_feat")?,
            },
            ablations: Ablation::parse_list(&get("ablate")?)?,
            crop: num("crop")?,
            checkpoint_every: num("checkpoint_every")?,
            dsc_joint: flag("dsc_joint")?,
            reinit_segmenter: flag("reinit_segmenter")?,
        })
    }

    /// Keys accepted by [`Self::from_lookup`].
    pub fn keys() -> Vec<String> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let mut c = TrainConfig {
            seed: 9,
            ablations: vec![Ablation::NoSad, Ablation::NoFeat],
            ..Default::default()
        };
        c.weights.w_cyc = 10.0;
        let e = c.entries();
        let back = TrainConfig::from_lookup(|k| e.iter().find(|(x, _)| x == k).map(|(_, v)| v.clone())).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn default_is_valid_and_freeze_order_enforced() {
        TrainConfig::default().validate().unwrap();
        let c = TrainConfig {
            sad_freeze_epochs: 11,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            stage_epochs: [20, 8, 20],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_flags() {
        assert_eq!(
            Ablation::parse_list("no_feat, no_sad").unwrap(),
            vec![Ablation::NoSad, Ablation::NoFeat]
        );
        assert!(Ablation::parse_list("no_cycle").is_err());
        let c = TrainConfig {
            ablations: vec![Ablation::NoSad],
            ..Default::default()
        };
        assert_eq!(c.effective_weights().w_sad, 0.0);
        assert_eq!(ablation_rows().len(), 8);
    }

    #[test]
    fn single_source_requires_aggregation_off() {
        let mut c = TrainConfig::default();
        c.model.sources = 1;
        assert!(c.validate().is_err());
        c.ablations = vec![Ablation::NoSad, Ablation::NoCcd];
        c.validate().unwrap();
    }
}
