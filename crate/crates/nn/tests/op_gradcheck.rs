//! Central finite differences against the analytic backward pass of every op.

use madan_nn::{ConvSpec, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `f(inputs)` as a scalar node; every input is bound as a variable.
type Build = dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId;

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &ids);
    g.scalar(out).unwrap()
}

fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out).unwrap();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = vec![0.0; inputs[k].numel()];
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .sq_norm()
            .sqrt()
            .max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        assert!(rel < TOL, "{name}: input {k} relative error {rel:e}");
    }
}

fn probe(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let r = rand_tensor(&mut rng, &shape);
    g.dot_const(x, r).unwrap()
}

#[test]
fn conv2d_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, spec) in [
        (3, ConvSpec::new(1, 1)),
        (4, ConvSpec::new(2, 1)),
        (1, ConvSpec::new(1, 0)),
        (7, ConvSpec::new(1, 3)),
    ] {
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 6, 6]),
            rand_tensor(&mut rng, &[4, 3, k, k]),
            rand_tensor(&mut rng, &[4]),
        ];
        check(
            "conv2d",
            &move |g: &mut Graph<f64>, ids: &[NodeId]| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), spec).unwrap();
                probe(g, y, 9)
            },
            inputs,
        );
    }
}

#[test]
fn norm_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 4, 3, 3]);
    for groups in [1, 2, 4] {
        check(
            "group_norm",
            &move |g: &mut Graph<f64>, ids: &[NodeId]| {
                let y = g.group_norm(ids[0], groups, 1e-5).unwrap();
                probe(g, y, 3)
            },
            vec![x.clone()],
        );
    }
    check(
        "tanh/leaky/relu",
        &|g: &mut Graph<f64>, ids: &[NodeId]| {
            let a = g.tanh(ids[0]);
            let b = g.leaky_relu(a, 0.2);
            let c = g.relu(ids[0]);
            let s = g.add(b, c).unwrap();
            probe(g, s, 4)
        },
        vec![x.clone()],
    );
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    check(
        "concat/upsample",
        &|g: &mut Graph<f64>, ids: &[NodeId]| {
            let c = g.concat_channels(ids[0], ids[1]).unwrap();
            let u = g.upsample2x(c).unwrap();
            probe(g, u, 5)
        },
        vec![a.clone(), b],
    );
    let a2 = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    check(
        "linear",
        &|g: &mut Graph<f64>, ids: &[NodeId]| {
            let l = g.linear(&[(0.5, ids[0]), (-2.0, ids[1]), (1.5, ids[0])]).unwrap();
            probe(g, l, 6)
        },
        vec![a, a2],
    );
}

#[test]
fn loss_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_tensor(&mut rng, &[2, 3, 2, 2]).map(|v| v * 3.0);
    let other = rand_tensor(&mut rng, &[2, 3, 2, 2]).map(|v| v * 3.0);
    let labels: Vec<u8> = (0..8).map(|_| rng.gen_range(0..3)).collect();
    check(
        "bce real",
        &|g: &mut Graph<f64>, ids: &[NodeId]| g.bce_logits_mean(ids[0], 1.0).unwrap(),
        vec![logits.clone()],
    );
    check(
        "bce fake",
        &|g: &mut Graph<f64>, ids: &[NodeId]| g.bce_logits_mean(ids[0], 0.0).unwrap(),
        vec![logits.clone()],
    );
    check(
        "l1",
        &|g: &mut Graph<f64>, ids: &[NodeId]| g.l1_mean(ids[0], ids[1]).unwrap(),
        vec![logits.clone(), other.clone()],
    );
    check(
        "cross_entropy",
        &move |g: &mut Graph<f64>, ids: &[NodeId]| g.cross_entropy_mean(ids[0], &labels).unwrap(),
        vec![logits.clone()],
    );
    // the reference side of KL is a stop-gradient input: bind it as constant
    let reference = other.clone();
    check(
        "kl",
        &move |g: &mut Graph<f64>, ids: &[NodeId]| {
            let q = g.constant(reference.clone());
            g.kl_mean(ids[0], q).unwrap()
        },
        vec![logits],
    );
}
