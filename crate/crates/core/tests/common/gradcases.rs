//! Random finite-difference instances, one generator per differentiable op.

use cigt::nn::{Binding, LayerSpec, ParamStore};
use cigt::routing::{RouterSpec, RouterState};
use cigt::trellis::{RoutingMode, Trellis};
use cigt::{Padding, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_op, numeric_grad, random_tensor, relative_error, tiny_trellis};

pub type Case = fn(&mut ChaCha8Rng) -> f64;

pub const CASES: &[(&str, Case)] = &[
    ("conv2d_same", conv_same),
    ("conv2d_valid", conv_valid),
    ("dense", dense),
    ("relu", relu),
    ("maxpool2d", maxpool),
    ("global_avg_pool", gap),
    ("flatten", flatten),
    ("dropout", dropout),
    ("softmax", softmax),
    ("softmax_cross_entropy", cross_entropy),
    ("information_gain", information_gain),
    ("select_rows", select_rows),
    ("scatter_rows", scatter_rows),
    ("add", add),
    ("mul", mul),
    ("scale", scale),
    ("sum", sum),
];

fn conv_case(rng: &mut ChaCha8Rng, padding: Padding) -> f64 {
    let (b, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let (h, w) = (rng.gen_range(k..k + 4), rng.gen_range(k..k + 4));
    let x = random_tensor(rng, &[b, c, h, w], 1.0);
    let wt = random_tensor(rng, &[o, c, k, k], 1.0);
    let bias = random_tensor(rng, &[o], 1.0);
    let (oh, ow) = match padding {
        Padding::Same => (h, w),
        Padding::Valid => (h - k + 1, w - k + 1),
    };
    let weights = random_tensor(rng, &[b, o, oh, ow], 1.0);
    check_op(&[x, wt, bias], &weights, &move |t, v| t.conv2d(v[0], v[1], v[2], padding).unwrap())
}

fn conv_same(rng: &mut ChaCha8Rng) -> f64 {
    conv_case(rng, Padding::Same)
}

fn conv_valid(rng: &mut ChaCha8Rng) -> f64 {
    conv_case(rng, Padding::Valid)
}

fn dense(rng: &mut ChaCha8Rng) -> f64 {
    let (b, i, o) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..7));
    let x = random_tensor(rng, &[b, i], 1.0);
    let w = random_tensor(rng, &[i, o], 1.0);
    let bias = random_tensor(rng, &[o], 1.0);
    let weights = random_tensor(rng, &[b, o], 1.0);
    check_op(&[x, w, bias], &weights, &|t, v| t.dense(v[0], v[1], v[2]).unwrap())
}

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], out: &[usize], op: &dyn Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let x = random_tensor(rng, shape, 1.0);
    let weights = random_tensor(rng, out, 1.0);
    check_op(&[x], &weights, &|t, v| op(t, v[0]))
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(1..20);
    unary(rng, &[2, n], &[2, n], &|t, x| t.relu(x).unwrap())
}

fn maxpool(rng: &mut ChaCha8Rng) -> f64 {
    let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
    unary(rng, &[2, 2, h, w], &[2, 2, h.div_ceil(2), w.div_ceil(2)], &|t, x| t.maxpool2d(x).unwrap())
}

fn gap(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
    unary(rng, &[2, c, h, w], &[2, c], &|t, x| t.global_avg_pool(x).unwrap())
}

fn flatten(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h) = (rng.gen_range(1..4), rng.gen_range(1..4));
    unary(rng, &[3, c, h, 2], &[3, c * h * 2], &|t, x| t.flatten(x).unwrap())
}

fn dropout(rng: &mut ChaCha8Rng) -> f64 {
    let seed = rng.gen();
    let p = rng.gen_range(0.1..0.6);
    unary(rng, &[4, 6], &[4, 6], &move |t, x| {
        t.dropout(x, p, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    })
}

fn softmax(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.gen_range(2..6);
    let tau = rng.gen_range(0.5..5.0);
    unary(rng, &[3, k], &[3, k], &move |t, x| t.softmax(x, tau).unwrap())
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let (b, c) = (rng.gen_range(1..6), rng.gen_range(2..6));
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let x = random_tensor(rng, &[b, c], 2.0);
    check_op(&[x], &Tensor::scalar(1.0), &move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap())
}

/// IG of temperatured routing probabilities; FD runs on the pre-softmax logits.
fn information_gain(rng: &mut ChaCha8Rng) -> f64 {
    let (b, k, c) = (rng.gen_range(4..12), rng.gen_range(2..5), rng.gen_range(2..5));
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let tau = rng.gen_range(0.5..3.0);
    let lambda = rng.gen_range(1.0..3.0);
    let x = random_tensor(rng, &[b, k], 2.0);
    check_op(&[x], &Tensor::scalar(1.0), &move |t, v| {
        let p = t.softmax(v[0], tau).unwrap();
        t.information_gain(p, &labels, c, lambda).unwrap()
    })
}

fn select_rows(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(2..6);
    let idx: Vec<usize> = (0..3).map(|_| rng.gen_range(0..n)).collect();
    unary(rng, &[n, 3], &[3, 3], &move |t, x| t.select_rows(x, &idx).unwrap())
}

fn scatter_rows(rng: &mut ChaCha8Rng) -> f64 {
    let a = random_tensor(rng, &[2, 3], 1.0);
    let b = random_tensor(rng, &[3, 3], 1.0);
    let weights = random_tensor(rng, &[5, 3], 1.0);
    let mut order: Vec<usize> = (0..5).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    check_op(&[a, b], &weights, &move |t, v| t.scatter_rows(&[(v[0], &order[..2]), (v[1], &order[2..])], 5).unwrap())
}

fn binary(rng: &mut ChaCha8Rng, op: &dyn Fn(&mut Tape<f64>, Var, Var) -> Var) -> f64 {
    let n = rng.gen_range(1..10);
    let a = random_tensor(rng, &[n], 1.0);
    let b = random_tensor(rng, &[n], 1.0);
    let weights = random_tensor(rng, &[n], 1.0);
    check_op(&[a, b], &weights, &|t, v| op(t, v[0], v[1]))
}

fn add(rng: &mut ChaCha8Rng) -> f64 {
    binary(rng, &|t, a, b| t.add(a, b).unwrap())
}

fn mul(rng: &mut ChaCha8Rng) -> f64 {
    binary(rng, &|t, a, b| t.mul(a, b).unwrap())
}

fn scale(rng: &mut ChaCha8Rng) -> f64 {
    let f = rng.gen_range(-3.0..3.0);
    unary(rng, &[2, 4], &[2, 4], &move |t, x| t.scale(x, f).unwrap())
}

fn sum(rng: &mut ChaCha8Rng) -> f64 {
    unary(rng, &[3, 4], &Tensor::<f64>::scalar(0.0).shape().to_vec(), &|t, x| t.sum(x).unwrap())
}

/// `−λ_IG·IG` through a router (dense feature transform, hyperplanes, softmax),
/// checked against the router parameters and its input features.
pub fn router_ig_loss(rng: &mut ChaCha8Rng) -> f64 {
    let (b, d, k, c) = (rng.gen_range(6..14), rng.gen_range(2..6), rng.gen_range(2..5), rng.gen_range(2..5));
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let (lambda_ig, lambda_b, tau) = (rng.gen_range(0.2..2.0), rng.gen_range(1.0..3.0), rng.gen_range(0.5..3.0));
    let spec = RouterSpec { transform: vec![LayerSpec::dense(5), LayerSpec::Relu] };
    let mut store = ParamStore::<f64>::new();
    let mut router = RouterState::build(&spec, &[d], k, "r", &mut store, rng).unwrap();
    router.temperature = tau;
    let x = random_tensor(rng, &[b, d], 2.0);

    let loss_of = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let mut bind = Binding::new(store, false);
        let xv = tape.constant(x.clone()).unwrap();
        let feats = router.features(&mut tape, &mut bind, xv, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = router.routing_softmax(&mut tape, &mut bind, feats).unwrap();
        let ig = tape.information_gain(p, &labels, c, lambda_b).unwrap();
        -lambda_ig * tape.value(ig).data()[0]
    };

    let mut tape = Tape::new();
    let mut bind = Binding::new(&store, true);
    let xv = tape.leaf(x.clone(), true).unwrap();
    let feats = router.features(&mut tape, &mut bind, xv, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    cigt::routing::ig_loss_with_grad(&mut tape, &mut bind, &router, feats, &labels, c, lambda_ig, lambda_b).unwrap();
    let vars = bind.into_vars();

    let mut worst = relative_error(
        tape.grad(xv).unwrap().data(),
        &numeric_grad(&x, |probe| loss_of(&store, probe)),
    );
    for (i, var) in vars.iter().enumerate() {
        let analytic = var.and_then(|v| tape.grad(v)).unwrap();
        let base = store.get(cigt::nn::ParamId(i)).value.clone();
        let numeric = numeric_grad(&base, |probe| {
            let mut s = store.clone();
            s.get_mut(cigt::nn::ParamId(i)).value = probe.clone();
            loss_of(&s, &x)
        });
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Full step objective `CE − λ_IG·Σ IG` of a small trellis under a fixed route seed,
/// checked against every parameter.
pub fn trellis_objective(rng: &mut ChaCha8Rng) -> f64 {
    let config = tiny_trellis([1, 2, 2]);
    let model = Trellis::<f64>::new(config, rng.gen()).unwrap();
    let b = 8;
    let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
    let x = random_tensor(rng, &[b, 1, 6, 6], 1.0);
    let route_seed: u64 = rng.gen();
    let lambda_ig = rng.gen_range(0.5..1.5);

    let objective = |m: &Trellis<f64>| -> f64 {
        let mut tape = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(route_seed);
        let pass = m.forward_train(&mut tape, &x, RoutingMode::IgSampling, &mut r).unwrap();
        m.backward_train(&mut tape, &pass, &labels, lambda_ig, 2.0).unwrap().objective
    };
    let mut tape = Tape::new();
    let mut r = ChaCha8Rng::seed_from_u64(route_seed);
    let pass = model.forward_train(&mut tape, &x, RoutingMode::IgSampling, &mut r).unwrap();
    let routes = pass.routes.clone();
    let grads = model.backward_train(&mut tape, &pass, &labels, lambda_ig, 2.0).unwrap().grads;

    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let id = cigt::nn::ParamId(i);
        let base = model.params().get(id).value.clone();
        let numeric = numeric_grad(&base, |probe| {
            let mut m = model.clone();
            m.params_mut().get_mut(id).value = probe.clone();
            // A perturbation that flips a sampled route would make the objective discontinuous.
            let mut t = Tape::new();
            let mut rr = ChaCha8Rng::seed_from_u64(route_seed);
            let p = m.forward_train(&mut t, &x, RoutingMode::IgSampling, &mut rr).unwrap();
            assert_eq!(p.routes, routes, "finite-difference probe changed the sampled routes");
            objective(&m)
        });
        let analytic = g.as_ref().map_or(vec![0.0; base.len()], |g| g.data().to_vec());
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
