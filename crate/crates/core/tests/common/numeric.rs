//! Finite-difference and symmetry probes for the autodiff core.

use heatlab_core::neural::{Dense, Encoder, EncoderConfig, Gradients, Graph, LayerNorm, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares analytic gradients with central differences for every scalar of
/// every listed parameter. Returns the worst relative error.
pub fn check<F>(store: &mut ParamStore, ids: &[usize], loss: F) -> f64
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let analytic: Gradients = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l)
    };
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.get(id).data().len();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + STEP;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - STEP;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Weighted sum so every output entry carries a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<'_>, y: Var, seed: u64) -> Var {
    let (r, c) = g.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(Tensor::uniform(r, c, 1.0, &mut rng));
    let p = g.mul(y, w);
    g.sum(p)
}

pub fn random_param(store: &mut ParamStore, name: &str, r: usize, c: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> usize {
    let data = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
    store.add(name, Tensor::new(r, c, data).unwrap())
}

type Unary = fn(&mut Graph<'_>, Var) -> Var;
type Binary = fn(&mut Graph<'_>, Var, Var) -> Var;

/// Worst relative error per unary op over three random inputs.
pub fn unary_errors() -> Vec<(&'static str, f64)> {
    let cases: Vec<(&str, Unary, f64, f64)> = vec![
        ("transpose", |g, a| g.transpose(a), -2.0, 2.0),
        ("scale", |g, a| g.scale(a, -1.7), -2.0, 2.0),
        ("add_scalar", |g, a| g.add_scalar(a, 0.3), -2.0, 2.0),
        ("leaky_relu", |g, a| g.leaky_relu(a), -2.0, 2.0),
        ("exp", |g, a| g.exp(a), -2.0, 2.0),
        ("log", |g, a| g.log(a), 0.2, 3.0),
        ("square", |g, a| g.square(a), -2.0, 2.0),
        ("layer_norm", |g, a| g.layer_norm(a), -2.0, 2.0),
        ("softmax", |g, a| g.softmax_rows(a), -2.0, 2.0),
        ("log_softmax", |g, a| g.log_softmax_rows(a), -2.0, 2.0),
        ("slice", |g, a| g.slice_cols(a, 1, 3), -2.0, 2.0),
        ("gather", |g, a| g.gather(a, &[0, 4, 2]), -2.0, 2.0),
        ("mean", |g, a| g.mean(a), -2.0, 2.0),
        ("expectile", |g, a| g.expectile(a, 0.7), -2.0, 2.0),
    ];
    let mut out = Vec::new();
    for (trial, (name, op, lo, hi)) in cases.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 * trial as u64 + seed);
            let mut store = ParamStore::new();
            let a = random_param(&mut store, "a", 3, 5, lo, hi, &mut rng);
            worst = worst.max(check(&mut store, &[a], |g| {
                let av = g.param(a);
                let y = op(g, av);
                weighted_sum(g, y, seed)
            }));
        }
        out.push((name, worst));
    }
    out
}

pub fn binary_errors() -> Vec<(&'static str, f64)> {
    let cases: Vec<(&str, Binary, (usize, usize), (usize, usize))> = vec![
        ("matmul", |g, a, b| g.matmul(a, b), (3, 4), (4, 2)),
        ("add_row", |g, a, b| g.add_row(a, b), (3, 4), (1, 4)),
        ("mul_row", |g, a, b| g.mul_row(a, b), (3, 4), (1, 4)),
        ("add", |g, a, b| g.add(a, b), (3, 4), (3, 4)),
        ("sub", |g, a, b| g.sub(a, b), (3, 4), (3, 4)),
        ("mul", |g, a, b| g.mul(a, b), (3, 4), (3, 4)),
        ("concat", |g, a, b| g.concat_cols(a, b), (3, 4), (3, 2)),
    ];
    let mut out = Vec::new();
    for (trial, (name, op, sa, sb)) in cases.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + 10 * trial as u64 + seed);
            let mut store = ParamStore::new();
            let a = random_param(&mut store, "a", sa.0, sa.1, -2.0, 2.0, &mut rng);
            let b = random_param(&mut store, "b", sb.0, sb.1, -2.0, 2.0, &mut rng);
            worst = worst.max(check(&mut store, &[a, b], |g| {
                let av = g.param(a);
                let bv = g.param(b);
                let y = op(g, av, bv);
                weighted_sum(g, y, seed)
            }));
        }
        out.push((name, worst));
    }
    out
}

pub fn dense_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let x = random_param(&mut store, "x", 8, 4, -1.0, 1.0, &mut rng);
    let d = Dense::new(&mut store, "d", 4, 3, &mut rng);
    *store.get_mut(d.bias) = Tensor::uniform(1, 3, 0.5, &mut rng);
    let mut ids = vec![x];
    ids.extend(d.params());
    check(&mut store, &ids, |g| {
        let xv = g.param(x);
        let y = d.forward(g, xv).unwrap();
        weighted_sum(g, y, 1)
    })
}

pub fn affine_layer_norm_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let x = random_param(&mut store, "x", 4, 6, -2.0, 2.0, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 6);
    *store.get_mut(ln.gain) = Tensor::uniform(1, 6, 1.5, &mut rng);
    *store.get_mut(ln.shift) = Tensor::uniform(1, 6, 1.5, &mut rng);
    let mut ids = vec![x];
    ids.extend(ln.params());
    check(&mut store, &ids, |g| {
        let xv = g.param(x);
        let y = ln.forward(g, xv);
        weighted_sum(g, y, 2)
    })
}

/// Whole two-layer encoder, inputs included.
pub fn encoder_error() -> f64 {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_param(&mut store, "x", 5, 6, -1.0, 1.0, &mut rng);
    let config = EncoderConfig { layers: 2, model_dim: 8, heads: 2, ff_dim: 12 };
    let enc = Encoder::new(&mut store, "enc", 6, &config, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let mut ids = vec![x];
    ids.extend(enc.params());
    check(&mut store, &ids, |g| {
        let xv = g.param(x);
        let y = enc.forward(g, xv).unwrap();
        weighted_sum(g, y, 3)
    })
}

pub fn encode(store: &ParamStore, enc: &Encoder, x: &Tensor) -> Tensor {
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let y = enc.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

pub fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Largest deviation between encode(permuted input) and permuted encode(input)
/// over ten random sets of 2 to 11 rows.
pub fn equivariance_deviation() -> f64 {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let enc = Encoder::new(&mut store, "enc", 23, &EncoderConfig::default(), &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let n = 2 + trial;
        let x = Tensor::uniform(n, 23, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let y = encode(&store, &enc, &x);
        let yp = encode(&store, &enc, &permute_rows(&x, &perm));
        let expected = permute_rows(&y, &perm);
        let dev = yp.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(dev);
    }
    worst
}
