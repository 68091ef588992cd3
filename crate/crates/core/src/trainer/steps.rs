//! Single optimizer steps of each training phase.

use std::collections::BTreeMap;

use madan_nn::{Adam, Bound, Graph, NodeId, Tensor};

use crate::error::{MadanError, Result};
use crate::losses::{self, LossWeights, Side, Term};
use crate::models::{ModelBundle, Network, Segmenter};

pub(crate) type Optimizers = BTreeMap<String, Adam<f32>>;

/// Unweighted term values of one step (per-source terms summed over
/// sources) and the summed discriminator losses.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct StepLosses {
    pub terms: [f64; 8],
    pub d_loss: f64,
}

impl StepLosses {
    fn add(&mut self, t: Term, v: f64) {
        let i = Term::ALL.iter().position(|&x| x == t).expect("known term");
        self.terms[i] += v;
    }
}

/// Which optional generator terms are live in a pixel-level step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub(crate) struct PixelFlags {
    pub sem: bool,
    pub sad: bool,
    pub ccd: bool,
}

fn opt<'a>(opts: &'a mut Optimizers, key: &str) -> &'a mut Adam<f32> {
    opts.get_mut(key)
        .unwrap_or_else(|| panic!("optimizer `{key}` registered at init"))
}

fn scalar(g: &Graph<f32>, n: NodeId) -> Result<f64> {
    Ok(g.scalar(n)? as f64)
}

/// One Adam step of `net` on the loss built by `build`. Returns the loss.
fn update<N: Network<f32>>(
    net: &mut N,
    adam: &mut Adam<f32>,
    build: impl FnOnce(&mut Graph<f32>, &N, &Bound) -> Result<NodeId>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let loss = build(&mut g, net, &p)?;
    let v = scalar(&g, loss)?;
    if !v.is_finite() {
        return Err(MadanError::NonFinite("discriminator loss".into()));
    }
    let mut grads = g.backward(loss)?;
    let grads = net.params().collect_grads(&p, &mut grads);
    adam.step(net.params_mut(), &grads);
    Ok(v)
}

fn weighted_sum(g: &mut Graph<f32>, terms: &[(f64, NodeId)]) -> Result<Option<NodeId>> {
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.linear(terms)?))
}

/// Pixel-level step shared by the CycleGAN phase and stage 2.
///
/// Generators run once; discriminators are updated on those outputs
/// (detached); generators are then updated through the freshly updated
/// discriminators, which enter the generator graph as constants.
pub(crate) fn pixel_step(
    bundle: &mut ModelBundle<f32>,
    opts: &mut Optimizers,
    w: &LossWeights,
    flags: PixelFlags,
    dsc_joint: bool,
    xs: &[Tensor<f32>],
    xt: &Tensor<f32>,
) -> Result<StepLosses> {
    let m = bundle.sources();
    let mut out = StepLosses::default();
    let mut g = Graph::new();
    let st_b: Vec<Bound> = bundle.to_target.iter().map(|n| n.params.bind(&mut g, true)).collect();
    let ts_b: Vec<Bound> = bundle.to_source.iter().map(|n| n.params.bind(&mut g, true)).collect();
    let xs_n: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let xt_n = g.constant(xt.clone());
    let (mut fake_t, mut rec_s, mut fake_s, mut rec_t) = (vec![], vec![], vec![], vec![]);
    for i in 0..m {
        let ft = bundle.to_target[i].forward(&mut g, &st_b[i], xs_n[i])?;
        rec_s.push(bundle.to_source[i].forward(&mut g, &ts_b[i], ft)?);
        fake_t.push(ft);
        let fs = bundle.to_source[i].forward(&mut g, &ts_b[i], xt_n)?;
        rec_t.push(bundle.to_target[i].forward(&mut g, &st_b[i], fs)?);
        fake_s.push(fs);
    }
    // cross[i]: other sources' adapted images mapped back into source i
    let mut cross: Vec<Vec<NodeId>> = vec![Vec::new(); m];
    if flags.ccd {
        for (i, row) in cross.iter_mut().enumerate() {
            for (j, &ft) in fake_t.iter().enumerate() {
                if j != i {
                    row.push(bundle.to_source[i].forward(&mut g, &ts_b[i], ft)?);
                }
            }
        }
    }

    // discriminators on detached generator outputs
    let vals = |ids: &[NodeId]| -> Vec<Tensor<f32>> { ids.iter().map(|&n| g.value(n).clone()).collect() };
    let ft_v = vals(&fake_t);
    let fs_v = vals(&fake_s);
    let cross_v: Vec<Vec<Tensor<f32>>> = cross.iter().map(|r| vals(r)).collect();
    if w.w_gan > 0.0 {
        out.d_loss += update(&mut bundle.disc_target, opt(opts, "d_t"), |dg, d, p| {
            let xr = dg.constant(xt.clone());
            let real = d.forward(dg, p, xr)?;
            let mut terms = Vec::new();
            for f in &ft_v {
                let xf = dg.constant(f.clone());
                let fake = d.forward(dg, p, xf)?;
                terms.push((w.w_gan, losses::discriminator_loss(dg, real, fake)?));
            }
            Ok(dg.linear(&terms)?)
        })?;
    }
    for i in 0..m {
        let use_gan = w.w_gan > 0.0;
        if !use_gan && !flags.ccd {
            continue;
        }
        out.d_loss += update(
            &mut bundle.disc_source[i],
            opt(opts, &format!("d_s.{i}")),
            |dg, d, p| {
                let xr = dg.constant(xs[i].clone());
                let mut terms = Vec::new();
                if use_gan {
                    let real = d.forward(dg, p, xr)?;
                    let xf = dg.constant(fs_v[i].clone());
                    let fake = d.forward(dg, p, xf)?;
                    terms.push((w.w_gan, losses::discriminator_loss(dg, real, fake)?));
                }
                if flags.ccd {
                    let rts: Vec<NodeId> = cross_v[i].iter().map(|t| dg.constant(t.clone())).collect();
                    terms.push((w.w_ccd, losses::ccd_loss(dg, d, p, xr, &rts, Side::Discriminator)?));
                }
                Ok(dg.linear(&terms)?)
            },
        )?;
    }
    if flags.sad {
        for i in 0..m {
            out.d_loss += update(
                &mut bundle.disc_aggregate[i],
                opt(opts, &format!("d_a.{i}")),
                |dg, d, p| {
                    let adapted: Vec<NodeId> = ft_v.iter().map(|t| dg.constant(t.clone())).collect();
                    let l = losses::sad_loss(dg, d, p, &adapted, i, Side::Discriminator)?;
                    Ok(dg.linear(&[(w.w_sad, l)])?)
                },
            )?;
        }
    }

    // generators through the updated discriminators
    let dt_b = bundle.disc_target.params.bind(&mut g, false);
    let ds_b: Vec<Bound> = bundle
        .disc_source
        .iter()
        .map(|n| n.params.bind(&mut g, false))
        .collect();
    let da_b: Vec<Bound> = if flags.sad {
        bundle
            .disc_aggregate
            .iter()
            .map(|n| n.params.bind(&mut g, false))
            .collect()
    } else {
        Vec::new()
    };
    let f_b = flags.sem.then(|| bundle.segmenter.params.bind(&mut g, dsc_joint));
    let mut terms: Vec<(f64, NodeId)> = Vec::new();
    for i in 0..m {
        if w.w_gan > 0.0 {
            let d = bundle.disc_target.forward(&mut g, &dt_b, fake_t[i])?;
            let l = losses::generator_loss(&mut g, d)?;
            out.add(Term::GanSt, scalar(&g, l)?);
            terms.push((w.w_gan, l));
            let d = bundle.disc_source[i].forward(&mut g, &ds_b[i], fake_s[i])?;
            let l = losses::generator_loss(&mut g, d)?;
            out.add(Term::GanTs, scalar(&g, l)?);
            terms.push((w.w_gan, l));
        }
        if w.w_cyc > 0.0 {
            let a = losses::cycle_loss(&mut g, xs_n[i], rec_s[i])?;
            let b = losses::cycle_loss(&mut g, xt_n, rec_t[i])?;
            let l = g.linear(&[(1.0, a), (1.0, b)])?;
            out.add(Term::Cyc, scalar(&g, l)?);
            terms.push((w.w_cyc, l));
        }
        if let Some(f_b) = &f_b {
            let (reference, _) = bundle.source_segmenter(i).infer(&xs[i])?;
            let r = g.constant(reference);
            let adapted = bundle.segmenter.forward(&mut g, f_b, fake_t[i])?;
            let l = losses::dsc_loss(&mut g, adapted.logits, r)?;
            out.add(Term::Sem, scalar(&g, l)?);
            terms.push((w.w_sem, l));
        }
        if flags.sad {
            let l = losses::sad_loss(&mut g, &bundle.disc_aggregate[i], &da_b[i], &fake_t, i, Side::Generator)?;
            out.add(Term::Sad, scalar(&g, l)?);
            terms.push((w.w_sad, l));
        }
        if flags.ccd {
            let l = losses::ccd_loss(
                &mut g,
                &bundle.disc_source[i],
                &ds_b[i],
                xs_n[i],
                &cross[i],
                Side::Generator,
            )?;
            out.add(Term::Ccd, scalar(&g, l)?);
            terms.push((w.w_ccd, l));
        }
    }
    let Some(total) = weighted_sum(&mut g, &terms)? else {
        return Ok(out);
    };
    if !scalar(&g, total)?.is_finite() {
        return Err(MadanError::NonFinite("generator objective".into()));
    }
    let mut grads = g.backward(total)?;
    for i in 0..m {
        let gr = bundle.to_target[i].params.collect_grads(&st_b[i], &mut grads);
        opt(opts, &format!("g_st.{i}")).step(&mut bundle.to_target[i].params, &gr);
        let gr = bundle.to_source[i].params.collect_grads(&ts_b[i], &mut grads);
        opt(opts, &format!("g_ts.{i}")).step(&mut bundle.to_source[i].params, &gr);
    }
    if let (Some(f_b), true) = (&f_b, dsc_joint) {
        let gr = bundle.segmenter.params.collect_grads(f_b, &mut grads);
        opt(opts, "f").step(&mut bundle.segmenter.params, &gr);
    }
    Ok(out)
}

/// Supervised step of one segmenter. Returns the cross-entropy.
pub(crate) fn task_step(
    seg: &mut Segmenter<f32>,
    adam: &mut Adam<f32>,
    w_task: f64,
    x: &Tensor<f32>,
    labels: &[u8],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = seg.params.bind(&mut g, true);
    let xn = g.constant(x.clone());
    let o = seg.forward(&mut g, &p, xn)?;
    let l = losses::task_loss(&mut g, o.logits, labels)?;
    let v = scalar(&g, l)?;
    if w_task > 0.0 {
        let total = g.linear(&[(w_task, l)])?;
        let mut grads = g.backward(total)?;
        let gr = seg.params.collect_grads(&p, &mut grads);
        adam.step(&mut seg.params, &gr);
    }
    Ok(v)
}

/// Stage-3 step: task loss on adapted images plus feature-level alignment
/// against target images when `xt` is given.
pub(crate) fn segment_step(
    bundle: &mut ModelBundle<f32>,
    opts: &mut Optimizers,
    w: &LossWeights,
    x: &Tensor<f32>,
    labels: &[u8],
    xt: Option<&Tensor<f32>>,
) -> Result<StepLosses> {
    let mut out = StepLosses::default();
    let mut g = Graph::new();
    let p = bundle.segmenter.params.bind(&mut g, true);
    let xn = g.constant(x.clone());
    let o = bundle.segmenter.forward(&mut g, &p, xn)?;
    let task = losses::task_loss(&mut g, o.logits, labels)?;
    out.add(Term::Task, scalar(&g, task)?);
    let mut terms = Vec::new();
    if w.w_task > 0.0 {
        terms.push((w.w_task, task));
    }
    if let Some(xt) = xt {
        let (_, feat_t) = bundle.segmenter.infer(xt)?;
        let feat_a = g.value(o.feature).clone();
        out.d_loss += update(&mut bundle.disc_feature, opt(opts, "d_f"), |dg, d, pd| {
            let a = dg.constant(feat_a);
            let t = dg.constant(feat_t.clone());
            let l = losses::feat_loss(dg, d, pd, a, t, Side::Discriminator)?;
            Ok(dg.linear(&[(w.w_feat, l)])?)
        })?;
        let df_b = bundle.disc_feature.params.bind(&mut g, false);
        let t = g.constant(feat_t);
        let l = losses::feat_loss(&mut g, &bundle.disc_feature, &df_b, o.feature, t, Side::Generator)?;
        out.add(Term::Feat, scalar(&g, l)?);
        terms.push((w.w_feat, l));
    }
    let Some(total) = weighted_sum(&mut g, &terms)? else {
        return Ok(out);
    };
    if !scalar(&g, total)?.is_finite() {
        return Err(MadanError::NonFinite("segmenter objective".into()));
    }
    let mut grads = g.backward(total)?;
    let gr = bundle.segmenter.params.collect_grads(&p, &mut grads);
    opt(opts, "f").step(&mut bundle.segmenter.params, &gr);
    Ok(out)
}
