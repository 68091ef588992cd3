use crate::linalg::matmul;
use crate::{shape_err, Float, NnError, Result, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and symmetric zero padding of a square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    },
    Upsample2x {
        x: NodeId,
    },
    GroupNorm {
        x: NodeId,
        groups: usize,
        rstd: Vec<T>,
    },
    Relu {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Tanh {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Linear {
        terms: Vec<(T, NodeId)>,
    },
    BceLogitsMean {
        x: NodeId,
        target: T,
    },
    L1Mean {
        a: NodeId,
        b: NodeId,
    },
    CrossEntropyMean {
        logits: NodeId,
        labels: Vec<u8>,
    },
    KlMean {
        logits: NodeId,
        reference: NodeId,
    },
    DotConst {
        x: NodeId,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Floor applied to reference probabilities inside the KL op.
pub const KL_PROB_FLOOR: f64 = 1e-12;

/// Tape of tensor operations supporting reverse-mode differentiation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a node's current value into a new constant leaf.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> Result<T> {
        let v = &self.nodes[id.0].value;
        if v.numel() != 1 {
            return Err(NnError::NotScalar(id.0));
        }
        Ok(v.data()[0])
    }

    // ---------------------------------------------------------------- layers

    /// 2-D convolution. `w` is `[out, in, k, k]`, optional `b` is `[out]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let (bs, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, kh, kw) = self.value(w).dims4()?;
        if wci != ci || kh != kw {
            return shape_err(
                "conv2d",
                format!("input channels {ci}, weight {:?}", self.value(w).shape()),
            );
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return shape_err("conv2d", format!("bias {:?}", self.value(b).shape()));
            }
        }
        let k = kh;
        if spec.stride == 0 || h + 2 * spec.pad < k || wd + 2 * spec.pad < k {
            return shape_err("conv2d", format!("{h}x{wd} input too small for kernel {k}"));
        }
        let ho = (h + 2 * spec.pad - k) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - k) / spec.stride + 1;
        let kk = ci * k * k;
        let hw = ho * wo;
        let mut out = vec![T::zero(); bs * co * hw];
        let mut col = vec![T::zero(); kk * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..bs {
            let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            let ob = &mut out[bi * co * hw..(bi + 1) * co * hw];
            if k == 1 && spec.stride == 1 && spec.pad == 0 {
                matmul(wv, xb, ob, co, kk, hw, false, false, false);
            } else {
                im2col(xb, ci, h, wd, k, spec, ho, wo, &mut col);
                matmul(wv, &col, ob, co, kk, hw, false, false, false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (c, row) in ob.chunks_mut(hw).enumerate() {
                    let bc = bv[c];
                    row.iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(&[bs, co, ho, wo], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, spec }, rg))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for p in 0..b * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x { x }, rg))
    }

    /// Normalizes each group of `c / groups` channels per sample to zero mean
    /// and unit variance (no affine). `groups == c` is instance norm,
    /// `groups == 1` is layer norm over `C×H×W`.
    pub fn group_norm(&mut self, x: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return shape_err("group_norm", format!("{c} channels, {groups} groups"));
        }
        let n = (c / groups) * h * w;
        let nt = T::of(n as f64);
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(b * groups);
        for (src, dst) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let mean = src.iter().copied().sum::<T>() / nt;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let r = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(x);
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.push(value, Op::GroupNorm { x, groups, rstd }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(T::zero()));
        let rg = self.rg(x);
        self.push(v, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::of(slope);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * s });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu { x, slope: s }, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if ba != bb || ha != hb || wa != wb {
            return shape_err("concat_channels", format!("{ba}x{ha}x{wa} vs {bb}x{hb}x{wb}"));
        }
        let hw = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for i in 0..ba {
            out.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::from_vec(&[ba, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// `Σ coeff_k · x_k` over same-shaped nodes.
    pub fn linear(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let Some(&(_, first)) = terms.first() else {
            return shape_err("linear", "no terms");
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        let mut rg = false;
        let mut typed = Vec::with_capacity(terms.len());
        for &(c, id) in terms {
            let v = self.value(id);
            if v.shape() != shape.as_slice() {
                return shape_err("linear", format!("{:?} vs {shape:?}", v.shape()));
            }
            let ct = T::of(c);
            for (o, &x) in out.data_mut().iter_mut().zip(v.data()) {
                *o += ct * x;
            }
            rg |= self.rg(id);
            typed.push((ct, id));
        }
        Ok(self.push(out, Op::Linear { terms: typed }, rg))
    }

    /// `Σ x ⊙ weights`; used to reduce a tensor output to a scalar probe.
    pub fn dot_const(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        if self.value(x).shape() != weights.shape() {
            return shape_err(
                "dot_const",
                format!("{:?} vs {:?}", self.value(x).shape(), weights.shape()),
            );
        }
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, weights }, rg))
    }

    // ---------------------------------------------------------------- losses

    /// Mean binary cross-entropy of logits against a constant target in `[0, 1]`.
    pub fn bce_logits_mean(&mut self, x: NodeId, target: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(NnError::NonFinite("bce_logits_mean"));
        }
        if xv.numel() == 0 {
            return shape_err("bce_logits_mean", "empty input");
        }
        let t = T::of(target);
        let n = T::of(xv.numel() as f64);
        let s: T = xv
            .data()
            .iter()
            .map(|&z| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s / n), Op::BceLogitsMean { x, target: t }, rg))
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("l1_mean", format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        if av.numel() == 0 {
            return shape_err("l1_mean", "empty input");
        }
        let n = T::of(av.numel() as f64);
        let s: T = av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q).abs()).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::L1Mean { a, b }, rg))
    }

    /// Mean over `B×H×W` of `-log softmax(logits)[label]`, softmax over channels.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
        let (b, l, h, w) = self.value(logits).dims4()?;
        if labels.len() != b * h * w {
            return shape_err("cross_entropy_mean", format!("{} labels for {b}x{h}x{w}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= l) {
            return Err(NnError::LabelRange {
                label: bad as usize,
                classes: l,
            });
        }
        let lv = self.value(logits);
        if !lv.all_finite() {
            return Err(NnError::NonFinite("cross_entropy_mean"));
        }
        let hw = h * w;
        let mut total = T::zero();
        let mut buf = vec![T::zero(); l];
        for bi in 0..b {
            let base = &lv.data()[bi * l * hw..(bi + 1) * l * hw];
            for p in 0..hw {
                for (c, v) in buf.iter_mut().enumerate() {
                    *v = base[c * hw + p];
                }
                let lse = log_sum_exp(&buf);
                total += lse - buf[labels[bi * hw + p] as usize];
            }
        }
        let n = T::of((b * hw) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over `B×H×W` of `KL(softmax(logits) ‖ softmax(reference))`.
    ///
    /// The reference distribution is floored at [`KL_PROB_FLOOR`] and never
    /// receives a gradient.
    pub fn kl_mean(&mut self, logits: NodeId, reference: NodeId) -> Result<NodeId> {
        let (pv, qv) = (self.value(logits), self.value(reference));
        if pv.shape() != qv.shape() {
            return shape_err("kl_mean", format!("{:?} vs {:?}", pv.shape(), qv.shape()));
        }
        if !pv.all_finite() || !qv.all_finite() {
            return Err(NnError::NonFinite("kl_mean"));
        }
        let (b, l, h, w) = pv.dims4()?;
        let hw = h * w;
        let mut total = T::zero();
        let mut lp = vec![T::zero(); l];
        let mut lq = vec![T::zero(); l];
        for bi in 0..b {
            for p in 0..hw {
                kl_pixel_logs(pv.data(), qv.data(), bi, p, l, hw, &mut lp, &mut lq);
                total += lp.iter().zip(&lq).map(|(&a, &q)| a.exp() * (a - q)).sum::<T>();
            }
        }
        let n = T::of((b * hw) as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(total / n), Op::KlMean { logits, reference }, rg))
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a scalar node. Gradients are retained for leaves only.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NnError::NotScalar(loss.0));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gy, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], id: NodeId) -> &'a mut Tensor<T> {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()))
    }

    fn backward_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => self.conv_backward(*x, *w, *b, *spec, gy, grads)?,
            Op::Upsample2x { x } => {
                let (bs, c, h, w) = self.value(*x).dims4()?;
                let mut gx = vec![T::zero(); bs * c * h * w];
                for p in 0..bs * c {
                    let src = &gy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for r in 0..2 * h {
                        for s in 0..2 * w {
                            dst[(r / 2) * w + s / 2] += src[r * 2 * w + s];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[bs, c, h, w], gx)?);
            }
            Op::GroupNorm { x, groups, rstd } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let n = (c / groups) * h * w;
                let nt = T::of(n as f64);
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for (gi, ((yc, gc), out)) in y.chunks(n).zip(gy.data().chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let mean_g = gc.iter().copied().sum::<T>() / nt;
                    let mean_gy = gc.iter().zip(yc).map(|(&g, &v)| g * v).sum::<T>() / nt;
                    let r = rstd[gi];
                    for ((o, &g), &v) in out.iter_mut().zip(gc).zip(yc) {
                        *o = r * (g - mean_g - v * mean_gy);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[b, c, h, w], gx)?);
            }
            Op::Relu { x } => {
                let mut gx = gy.clone();
                for (g, &v) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu { x, slope } => {
                let mut gx = gy.clone();
                for (g, &v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= T::zero() {
                        *g *= *slope;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh { x } => {
                let mut gx = gy.clone();
                for (g, &v) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *g *= T::one() - v * v;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Concat { a, b } => {
                let (bs, ca, h, w) = self.value(*a).dims4()?;
                let (_, cb, _, _) = self.value(*b).dims4()?;
                let hw = h * w;
                let mut ga = Vec::with_capacity(bs * ca * hw);
                let mut gb = Vec::with_capacity(bs * cb * hw);
                for bi in 0..bs {
                    let base = bi * (ca + cb) * hw;
                    ga.extend_from_slice(&gy.data()[base..base + ca * hw]);
                    gb.extend_from_slice(&gy.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[bs, ca, h, w], ga)?);
                self.accumulate(grads, *b, Tensor::from_vec(&[bs, cb, h, w], gb)?);
            }
            Op::Linear { terms } => {
                for &(c, id) in terms {
                    if self.rg(id) {
                        let slot = self.grad_slot(grads, id);
                        for (s, &g) in slot.data_mut().iter_mut().zip(gy.data()) {
                            *s += c * g;
                        }
                    }
                }
            }
            Op::DotConst { x, weights } => {
                let g0 = gy.data()[0];
                self.accumulate(grads, *x, weights.map(|v| v * g0));
            }
            Op::BceLogitsMean { x, target } => {
                let xv = self.value(*x);
                let scale = gy.data()[0] / T::of(xv.numel() as f64);
                let gx = xv.map(|z| (sigmoid(z) - *target) * scale);
                self.accumulate(grads, *x, gx);
            }
            Op::L1Mean { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = gy.data()[0] / T::of(av.numel() as f64);
                let signs: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&p, &q)| sign(p - q) * scale)
                    .collect();
                let ga = Tensor::from_vec(av.shape(), signs)?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, ga.map(|v| -v));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropyMean { logits, labels } => {
                let lv = self.value(*logits);
                let (b, l, h, w) = lv.dims4()?;
                let hw = h * w;
                let scale = gy.data()[0] / T::of((b * hw) as f64);
                let mut gx = vec![T::zero(); lv.numel()];
                let mut buf = vec![T::zero(); l];
                for bi in 0..b {
                    let base = bi * l * hw;
                    for p in 0..hw {
                        for (c, v) in buf.iter_mut().enumerate() {
                            *v = lv.data()[base + c * hw + p];
                        }
                        let lse = log_sum_exp(&buf);
                        let y = labels[bi * hw + p] as usize;
                        for (c, &v) in buf.iter().enumerate() {
                            let onehot = if c == y { T::one() } else { T::zero() };
                            gx[base + c * hw + p] = ((v - lse).exp() - onehot) * scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(lv.shape(), gx)?);
            }
            Op::KlMean { logits, reference } => {
                let (pv, qv) = (self.value(*logits), self.value(*reference));
                let (b, l, h, w) = pv.dims4()?;
                let hw = h * w;
                let scale = gy.data()[0] / T::of((b * hw) as f64);
                let mut gx = vec![T::zero(); pv.numel()];
                let mut lp = vec![T::zero(); l];
                let mut lq = vec![T::zero(); l];
                for bi in 0..b {
                    for p in 0..hw {
                        kl_pixel_logs(pv.data(), qv.data(), bi, p, l, hw, &mut lp, &mut lq);
                        let kl: T = lp.iter().zip(&lq).map(|(&a, &q)| a.exp() * (a - q)).sum();
                        for c in 0..l {
                            let pc = lp[c].exp();
                            gx[bi * l * hw + c * hw + p] = pc * ((lp[c] - lq[c]) - kl) * scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(pv.shape(), gx)?);
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (bs, ci, h, wd) = self.value(x).dims4()?;
        let (co, _, k, _) = self.value(w).dims4()?;
        let (_, _, ho, wo) = gy.dims4()?;
        let kk = ci * k * k;
        let hw = ho * wo;
        let direct = k == 1 && spec.stride == 1 && spec.pad == 0;
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        let xv = self.value(x).data();
        let wv = self.value(w).data();

        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let slot = self.grad_slot(grads, b);
            let gb = slot.data_mut();
            for bi in 0..bs {
                for (c, row) in gy.data()[bi * co * hw..(bi + 1) * co * hw].chunks(hw).enumerate() {
                    gb[c] += row.iter().copied().sum::<T>();
                }
            }
        }
        let mut col = if direct { Vec::new() } else { vec![T::zero(); kk * hw] };
        if need_w {
            let mut gw = vec![T::zero(); co * kk];
            for bi in 0..bs {
                let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                let gyb = &gy.data()[bi * co * hw..(bi + 1) * co * hw];
                if direct {
                    matmul(gyb, xb, &mut gw, co, hw, kk, false, true, true);
                } else {
                    im2col(xb, ci, h, wd, k, spec, ho, wo, &mut col);
                    matmul(gyb, &col, &mut gw, co, hw, kk, false, true, true);
                }
            }
            self.accumulate(grads, w, Tensor::from_vec(self.value(w).shape(), gw)?);
        }
        if need_x {
            let mut gx = vec![T::zero(); bs * ci * h * wd];
            let mut dcol = vec![T::zero(); kk * hw];
            for bi in 0..bs {
                let gyb = &gy.data()[bi * co * hw..(bi + 1) * co * hw];
                let gxb = &mut gx[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                if direct {
                    matmul(wv, gyb, gxb, kk, co, hw, true, false, true);
                } else {
                    matmul(wv, gyb, &mut dcol, kk, co, hw, true, false, false);
                    col2im(&dcol, ci, h, wd, k, spec, ho, wo, gxb);
                }
            }
            self.accumulate(grads, x, Tensor::from_vec(&[bs, ci, h, wd], gx)?);
        }
        Ok(())
    }
}

/// Output columns `[lo, hi)` whose input column `ox·s + kx − p` is inside
/// `[0, w)`.
fn valid_cols(kx: usize, spec: ConvSpec, w: usize, wo: usize) -> (usize, usize) {
    let (s, p) = (spec.stride, spec.pad);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if w + p > kx {
        ((w + p - kx - 1) / s + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let (s, p) = (spec.stride, spec.pad);
    let hw = ho * wo;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(kx, spec, w, wo);
                let row = ((c * k + ky) * k + kx) * hw;
                let dst = &mut col[row..row + hw];
                for oy in 0..ho {
                    let seg = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= h {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - p) * w..(iy - p + 1) * w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * s + kx - p;
                        if s == 1 {
                            seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &x) in seg[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    col: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let (s, p) = (spec.stride, spec.pad);
    let hw = ho * wo;
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(kx, spec, w, wo);
                if lo >= hi {
                    continue;
                }
                let row = ((c * k + ky) * k + kx) * hw;
                let src = &col[row..row + hw];
                for oy in 0..ho {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - p) * w..(iy - p + 1) * w];
                    let first = lo * s + kx - p;
                    let seg = &src[oy * wo + lo..oy * wo + hi];
                    if s == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(seg) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(s).zip(seg) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn log_sum_exp<T: Float>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    m + v.iter().map(|&a| (a - m).exp()).sum::<T>().ln()
}

/// Per-pixel log-probabilities of both distributions; `lq` is floored.
#[allow(clippy::too_many_arguments)]
fn kl_pixel_logs<T: Float>(p: &[T], q: &[T], bi: usize, pix: usize, l: usize, hw: usize, lp: &mut [T], lq: &mut [T]) {
    let base = bi * l * hw + pix;
    for c in 0..l {
        lp[c] = p[base + c * hw];
        lq[c] = q[base + c * hw];
    }
    let (zp, zq) = (log_sum_exp(lp), log_sum_exp(lq));
    let floor = T::of(KL_PROB_FLOOR.ln());
    for c in 0..l {
        lp[c] -= zp;
        lq[c] = (lq[c] - zq).max(floor);
    }
}

fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, ConvSpec::new(1, 1)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_stride_two_output_size() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 16, 16]));
        let w = g.constant(Tensor::zeros(&[5, 3, 4, 4]));
        let y = g.conv2d(x, w, None, ConvSpec::new(2, 1)).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 8, 8]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(g.conv2d(x, w, None, ConvSpec::new(1, 1)).is_err());
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let l = g.bce_logits_mean(x, 1.0).unwrap();
        assert!((g.scalar(l).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::NAN]));
        assert_eq!(
            g.bce_logits_mean(x, 0.0).unwrap_err(),
            NnError::NonFinite("bce_logits_mean")
        );
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..32).map(|i| (i as f64).sin() * 3.0 + 1.0).collect();
        let x = g.constant(t(&[1, 2, 4, 4], &data));
        let y = g.group_norm(x, 2, 0.0).unwrap();
        for chunk in g.value(y).data().chunks(16) {
            let mean: f64 = chunk.iter().sum::<f64>() / 16.0;
            let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_do_not_reach_constants() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[2], &[1.0, -2.0]));
        let b = g.constant(t(&[2], &[0.5, 0.5]));
        let l = g.l1_mean(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.5, -0.5]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert_eq!(
            g.cross_entropy_mean(x, &[3]).unwrap_err(),
            NnError::LabelRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::zeros(&[3]));
        assert!(g.backward(a).is_err());
    }
}
