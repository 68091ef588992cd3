//! Training objectives as graph functions.
//!
//! Adversarial terms use the usual convention: discriminators are trained
//! to output 1 on real and 0 on generated samples, generators minimise the
//! non-saturating `-log σ(D(fake))`. Discriminator losses average the real
//! and fake halves so an undecided discriminator scores `ln 2`.
//! Every loss is a mean over batch, pixels and patches.

use std::fmt;

use madan_nn::{Bound, Float, Graph, NodeId};

use crate::error::{MadanError, Result};
use crate::models::{Discriminator, FeatureDiscriminator};

/// Which player an adversarial loss is evaluated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Discriminator,
    Generator,
}

fn shape_mismatch(op: &'static str, a: &[usize], b: &[usize]) -> MadanError {
    MadanError::Nn(madan_nn::NnError::Shape {
        op,
        detail: format!("{a:?} vs {b:?}"),
    })
}

/// `½ (BCE(real, 1) + BCE(fake, 0))`.
pub fn discriminator_loss<T: Float>(g: &mut Graph<T>, real: NodeId, fake: NodeId) -> Result<NodeId> {
    let r = g.bce_logits_mean(real, 1.0)?;
    let f = g.bce_logits_mean(fake, 0.0)?;
    Ok(g.linear(&[(0.5, r), (0.5, f)])?)
}

/// Non-saturating generator loss `BCE(fake, 1)`.
pub fn generator_loss<T: Float>(g: &mut Graph<T>, fake: NodeId) -> Result<NodeId> {
    Ok(g.bce_logits_mean(fake, 1.0)?)
}

/// Image- or feature-level GAN loss over patch logits. The real logits are
/// only read on the discriminator side.
pub fn adversarial_loss<T: Float>(g: &mut Graph<T>, real: NodeId, fake: NodeId, side: Side) -> Result<NodeId> {
    match side {
        Side::Discriminator => discriminator_loss(g, real, fake),
        Side::Generator => generator_loss(g, fake),
    }
}

/// Mean absolute difference between an image batch and its round trip.
pub fn cycle_loss<T: Float>(g: &mut Graph<T>, x: NodeId, roundtrip: NodeId) -> Result<NodeId> {
    Ok(g.l1_mean(roundtrip, x)?)
}

/// Per-pixel mean of `KL(softmax(adapted) ‖ softmax(source))`. The source
/// logits come from a frozen network and receive no gradient.
pub fn dsc_loss<T: Float>(g: &mut Graph<T>, adapted_logits: NodeId, source_logits: NodeId) -> Result<NodeId> {
    Ok(g.kl_mean(adapted_logits, source_logits)?)
}

/// Mean pixel cross-entropy against integer labels.
pub fn task_loss<T: Float>(g: &mut Graph<T>, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
    Ok(g.cross_entropy_mean(logits, labels)?)
}

/// Aggregation term shared by SAD and CCD: one real batch against `M-1` fake
/// batches whose terms are weighted `1/(M-1)`.
///
/// Discriminator side: `½ (BCE(real, 1) + 1/(M-1) Σ_j BCE(fake_j, 0))`.
/// Generator side: `1/(M-1) Σ_j BCE(fake_j, 1)`.
pub fn aggregation_loss<T: Float>(g: &mut Graph<T>, real: NodeId, fakes: &[NodeId], side: Side) -> Result<NodeId> {
    if fakes.is_empty() {
        return Err(MadanError::Rejected(
            "domain aggregation needs at least two source domains".into(),
        ));
    }
    let k = 1.0 / fakes.len() as f64;
    let target = match side {
        Side::Discriminator => 0.0,
        Side::Generator => 1.0,
    };
    let mut terms = Vec::with_capacity(fakes.len() + 1);
    for &f in fakes {
        terms.push((k, g.bce_logits_mean(f, target)?));
    }
    let fake_term = g.linear(&terms)?;
    match side {
        Side::Generator => Ok(fake_term),
        Side::Discriminator => {
            let r = g.bce_logits_mean(real, 1.0)?;
            Ok(g.linear(&[(0.5, r), (0.5, fake_term)])?)
        }
    }
}

/// Sub-domain aggregation loss for source `own`: `D_A^own` separates the
/// own adapted batch (real) from every other adapted batch (fake).
pub fn sad_loss<T: Float>(
    g: &mut Graph<T>,
    disc: &Discriminator<T>,
    params: &Bound,
    adapted: &[NodeId],
    own: usize,
    side: Side,
) -> Result<NodeId> {
    if adapted.len() < 2 {
        return Err(MadanError::Rejected(
            "sub-domain aggregation needs at least two source domains".into(),
        ));
    }
    if own >= adapted.len() {
        return Err(MadanError::range(
            "source index",
            format!("{own} with {} sources", adapted.len()),
        ));
    }
    let real = match side {
        Side::Discriminator => disc.forward(g, params, adapted[own])?,
        Side::Generator => adapted[own],
    };
    let mut fakes = Vec::with_capacity(adapted.len() - 1);
    for (j, &x) in adapted.iter().enumerate() {
        if j != own {
            fakes.push(disc.forward(g, params, x)?);
        }
    }
    aggregation_loss(g, real, &fakes, side)
}

/// Cross-domain cycle loss for source `i`: `D_i` separates native source
/// images (real) from other sources' images round-tripped into source `i`.
pub fn ccd_loss<T: Float>(
    g: &mut Graph<T>,
    disc: &Discriminator<T>,
    params: &Bound,
    source: NodeId,
    cross_roundtrips: &[NodeId],
    side: Side,
) -> Result<NodeId> {
    if cross_roundtrips.is_empty() {
        return Err(MadanError::Rejected(
            "cross-domain cycle discrimination needs at least two source domains".into(),
        ));
    }
    let real = match side {
        Side::Discriminator => disc.forward(g, params, source)?,
        Side::Generator => source,
    };
    let mut fakes = Vec::with_capacity(cross_roundtrips.len());
    for &x in cross_roundtrips {
        fakes.push(disc.forward(g, params, x)?);
    }
    aggregation_loss(g, real, &fakes, side)
}

/// Feature-level GAN loss: target-domain features are the real class,
/// adapted-domain features the fake one.
pub fn feat_loss<T: Float>(
    g: &mut Graph<T>,
    disc: &FeatureDiscriminator<T>,
    params: &Bound,
    feat_adapted: NodeId,
    feat_target: NodeId,
    side: Side,
) -> Result<NodeId> {
    let (a, t) = (g.value(feat_adapted).shape(), g.value(feat_target).shape());
    if a != t {
        return Err(shape_mismatch("feat_loss", a, t));
    }
    let fake = disc.forward(g, params, feat_adapted)?;
    match side {
        Side::Generator => generator_loss(g, fake),
        Side::Discriminator => {
            let real = disc.forward(g, params, feat_target)?;
            discriminator_loss(g, real, fake)
        }
    }
}

/// Per-term weights of the overall objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_gan: f64,
    pub w_cyc: f64,
    pub w_sem: f64,
    pub w_sad: f64,
    pub w_ccd: f64,
    pub w_task: f64,
    pub w_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_gan: 1.0,
            w_cyc: 1.0,
            w_sem: 1.0,
            w_sad: 1.0,
            w_ccd: 1.0,
            w_task: 1.0,
            w_feat: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::GanSt | Term::GanTs => self.w_gan,
            Term::Cyc => self.w_cyc,
            Term::Sem => self.w_sem,
            Term::Sad => self.w_sad,
            Term::Ccd => self.w_ccd,
            Term::Task => self.w_task,
            Term::Feat => self.w_feat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("w_gan", self.w_gan),
            ("w_cyc", self.w_cyc),
            ("w_sem", self.w_sem),
            ("w_sad", self.w_sad),
            ("w_ccd", self.w_ccd),
            ("w_task", self.w_task),
            ("w_feat", self.w_feat),
        ];
        for (name, w) in all {
            if !w.is_finite() || w < 0.0 {
                return Err(MadanError::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Named objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    GanSt,
    GanTs,
    Cyc,
    Sem,
    Sad,
    Ccd,
    Task,
    Feat,
}

impl Term {
    pub const ALL: [Term; 8] = [
        Term::GanSt,
        Term::GanTs,
        Term::Cyc,
        Term::Sem,
        Term::Sad,
        Term::Ccd,
        Term::Task,
        Term::Feat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::GanSt => "gan_st",
            Term::GanTs => "gan_ts",
            Term::Cyc => "cyc",
            Term::Sem => "sem",
            Term::Sad => "sad",
            Term::Ccd => "ccd",
            Term::Task => "task",
            Term::Feat => "feat",
        }
    }

    fn per_source(self) -> bool {
        !matches!(self, Term::Task | Term::Feat)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar values of the per-source terms for one source domain.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SourceTerms {
    pub gan_st: f64,
    pub gan_ts: f64,
    pub cyc: f64,
    pub sem: f64,
    pub sad: f64,
    pub ccd: f64,
}

impl SourceTerms {
    fn get(&self, term: Term) -> f64 {
        match term {
            Term::GanSt => self.gan_st,
            Term::GanTs => self.gan_ts,
            Term::Cyc => self.cyc,
            Term::Sem => self.sem,
            Term::Sad => self.sad,
            Term::Ccd => self.ccd,
            Term::Task | Term::Feat => 0.0,
        }
    }
}

/// Every term of the overall objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TermValues {
    pub per_source: Vec<SourceTerms>,
    pub task: f64,
    pub feat: f64,
}

/// Per-term sums (per-source terms summed over sources) and the weighted
/// total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub terms: Vec<(Term, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, term: Term) -> f64 {
        self.terms.iter().find(|(t, _)| *t == term).map_or(0.0, |&(_, v)| v)
    }
}

/// Weighted sum `Σ_i [GAN_st + GAN_ts + cyc + sem + SAD + CCD]_i + task + feat`.
pub fn total_loss(values: &TermValues, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let mut terms = Vec::with_capacity(Term::ALL.len());
    let mut total = 0.0;
    for term in Term::ALL {
        let sum = if term.per_source() {
            let mut s = 0.0;
            for (i, st) in values.per_source.iter().enumerate() {
                let v = st.get(term);
                if !v.is_finite() {
                    return Err(MadanError::NonFinite(format!("{term}[{i}] = {v}")));
                }
                s += v;
            }
            s
        } else {
            let v = if term == Term::Task { values.task } else { values.feat };
            if !v.is_finite() {
                return Err(MadanError::NonFinite(format!("{term} = {v}")));
            }
            v
        };
        total += weights.get(term) * sum;
        terms.push((term, sum));
    }
    Ok(LossReport { terms, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use madan_nn::Tensor;

    fn node(g: &mut Graph<f64>, shape: &[usize], v: Vec<f64>) -> NodeId {
        g.variable(Tensor::from_vec(shape, v).unwrap())
    }

    fn softplus(z: f64) -> f64 {
        (1.0 + z.exp()).ln()
    }

    #[test]
    fn discriminator_zero_logits_is_ln2() {
        let mut g = Graph::new();
        let r = node(&mut g, &[2, 1, 3, 3], vec![0.0; 18]);
        let f = node(&mut g, &[2, 1, 3, 3], vec![0.0; 18]);
        let l = adversarial_loss(&mut g, r, f, Side::Discriminator).unwrap();
        assert!((g.scalar(l).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_logits_give_near_zero_discriminator_loss() {
        let mut g = Graph::new();
        let r = node(&mut g, &[1, 1, 2, 2], vec![20.0; 4]);
        let f = node(&mut g, &[1, 1, 2, 2], vec![-20.0; 4]);
        let l = adversarial_loss(&mut g, r, f, Side::Discriminator).unwrap();
        assert!(g.scalar(l).unwrap() < 1e-8);
    }

    #[test]
    fn generator_side_single_logit() {
        let mut g = Graph::new();
        let r = node(&mut g, &[1, 1, 1, 1], vec![3.0]);
        let f = node(&mut g, &[1, 1, 1, 1], vec![0.5]);
        let l = adversarial_loss(&mut g, r, f, Side::Generator).unwrap();
        let oracle = -(1.0 / (1.0 + (-0.5f64).exp())).ln();
        assert!((g.scalar(l).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 0.4741).abs() < 5e-5);
    }

    #[test]
    fn nonfinite_logits_rejected() {
        let mut g = Graph::new();
        let r = node(&mut g, &[1, 1, 1, 1], vec![0.0]);
        let f = node(&mut g, &[1, 1, 1, 1], vec![f64::NAN]);
        assert!(adversarial_loss(&mut g, r, f, Side::Discriminator).is_err());
    }

    #[test]
    fn cycle_examples() {
        let mut g = Graph::new();
        let a = node(&mut g, &[1, 3, 2, 2], vec![-1.0; 12]);
        let b = node(&mut g, &[1, 3, 2, 2], vec![1.0; 12]);
        let l = cycle_loss(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 2.0);
        let l = cycle_loss(&mut g, a, a).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
        let c = node(&mut g, &[1, 3, 2, 1], vec![1.0; 6]);
        assert!(cycle_loss(&mut g, a, c).is_err());
    }

    #[test]
    fn dsc_uniform_against_peaked() {
        let l = 5;
        let mut g = Graph::new();
        let a = node(&mut g, &[1, l, 1, 1], vec![0.0; l]);
        let mut q = vec![0.0; l];
        q[0] = 10.0;
        let s = node(&mut g, &[1, l, 1, 1], q.clone());
        let v = dsc_loss(&mut g, a, s).unwrap();
        let z: f64 = q.iter().map(|x| x.exp()).sum();
        let oracle: f64 = q
            .iter()
            .map(|&qc| {
                let p = 1.0 / l as f64;
                p * (p / (qc.exp() / z)).ln()
            })
            .sum();
        assert!((g.scalar(v).unwrap() - oracle).abs() < 1e-9);
        let swapped = dsc_loss(&mut g, s, a).unwrap();
        assert!((g.scalar(swapped).unwrap() - g.scalar(v).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn task_loss_examples() {
        let mut g = Graph::new();
        let z = node(&mut g, &[1, 5, 2, 2], vec![0.0; 20]);
        let v = task_loss(&mut g, z, &[0, 1, 2, 4]).unwrap();
        assert!((g.scalar(v).unwrap() - 5f64.ln()).abs() < 1e-12);
        let mut confident = vec![0.0; 20];
        for (p, &y) in [3usize, 1, 0, 2].iter().enumerate() {
            confident[y * 4 + p] = 30.0;
        }
        let c = node(&mut g, &[1, 5, 2, 2], confident);
        let v = task_loss(&mut g, c, &[3, 1, 0, 2]).unwrap();
        assert!(g.scalar(v).unwrap() < 1e-12);
        assert!(task_loss(&mut g, z, &[0, 1, 5, 0]).is_err());
    }

    #[test]
    fn aggregation_coefficient_law() {
        let mut g = Graph::new();
        let real = node(&mut g, &[1, 1, 2, 2], vec![0.3, -0.1, 0.7, 0.2]);
        let fake = node(&mut g, &[1, 1, 2, 2], vec![-0.4, 0.9, 0.1, -1.2]);
        for side in [Side::Discriminator, Side::Generator] {
            let one = aggregation_loss(&mut g, real, &[fake], side).unwrap();
            let two = aggregation_loss(&mut g, real, &[fake, fake], side).unwrap();
            assert_eq!(g.scalar(one).unwrap(), g.scalar(two).unwrap());
        }
        let d = aggregation_loss(&mut g, real, &[fake], Side::Discriminator).unwrap();
        let r: f64 = [0.3, -0.1, 0.7, 0.2].iter().map(|&z: &f64| softplus(-z)).sum::<f64>() / 4.0;
        let f: f64 = [-0.4, 0.9, 0.1, -1.2].iter().map(|&z: &f64| softplus(z)).sum::<f64>() / 4.0;
        assert!((g.scalar(d).unwrap() - 0.5 * (r + f)).abs() < 1e-12);
        assert!(aggregation_loss(&mut g, real, &[], Side::Generator).is_err());
    }

    #[test]
    fn total_loss_sums_and_names_bad_terms() {
        let values = TermValues {
            per_source: vec![SourceTerms {
                gan_st: 1.0,
                cyc: 2.0,
                ..Default::default()
            }],
            task: 3.0,
            feat: 0.0,
        };
        let r = total_loss(&values, &LossWeights::default()).unwrap();
        assert_eq!(r.total, 6.0);
        assert_eq!(r.get(Term::Cyc), 2.0);
        assert_eq!(
            total_loss(&TermValues::default(), &LossWeights::default())
                .unwrap()
                .total,
            0.0
        );
        let mut bad = values.clone();
        bad.per_source.push(SourceTerms {
            sem: f64::NAN,
            ..Default::default()
        });
        let err = total_loss(&bad, &LossWeights::default()).unwrap_err().to_string();
        assert!(err.contains("sem[1]"), "{err}");
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            w_sad: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
