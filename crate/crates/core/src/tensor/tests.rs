use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_parameters, relative_error};
use super::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

#[test]
fn conv_identity_and_box_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()));
    let w1 = g.input(t(&[1, 1, 1, 1], vec![1.0]));
    let b = g.input(t(&[1], vec![0.0]));
    let y = g.conv2d(x, w1, b, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let ones = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w9 = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, w9, b, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.input(Tensor::zeros(&[3, 1, 3, 3]));
    let b = g.input(Tensor::zeros(&[3]));
    assert!(g.conv2d(x, w, b, 1, 1).is_err());
    let small = g.input(Tensor::zeros(&[1, 1, 2, 2]));
    let w5 = g.input(Tensor::zeros(&[3, 1, 5, 5]));
    assert!(g.conv2d(small, w5, b, 1, 0).is_err());
}

#[test]
fn transposed_conv_doubles_spatial_size() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[2, 4, 5, 7], 1.0));
    let w = g.input(Tensor::full(&[4, 3, 3, 3], 0.1));
    let b = g.input(Tensor::zeros(&[3]));
    let y = g.conv_transpose2d(x, w, b, 2, 1, 1).unwrap();
    assert_eq!(g.value(y).shape(), [2, 3, 10, 14]);
    assert_eq!(tconv2d_out_dim(5, 3, 2, 1, 1), Some(10));
    assert_eq!(tconv2d_out_dim(5, 3, 2, 1, 2), None);
    assert_eq!(conv2d_out_dim(64, 5, 2, 2), Some(32));
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, tconv(y)> with shared weights and zero bias
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let x = g.input(random(&mut rng, &[1, 2, 8, 8], -1.0, 1.0));
    let y = g.input(random(&mut rng, &[1, 3, 4, 4], -1.0, 1.0));
    let w = g.input(random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0));
    let b3 = g.input(Tensor::zeros(&[3]));
    let b2 = g.input(Tensor::zeros(&[2]));
    let cx = g.conv2d(x, w, b3, 2, 1).unwrap();
    let ty = g.conv_transpose2d(y, w, b2, 2, 1, 1).unwrap();
    let lhs: f64 = g.value(cx).data().iter().zip(g.value(y).data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(x).data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn softmax_and_pooling_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]));
    let s = g.softmax(x).unwrap();
    let v = g.value(s).data();
    assert!(v[..3].iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    let z = 1.0 + 1f64.exp() + 2f64.exp();
    assert!((v[5] - 2f64.exp() / z).abs() < 1e-15);

    let img = g.input(t(&[1, 1, 4, 4], (0..16).map(f64::from).collect()));
    let mp = g.maxpool2d(img, 2).unwrap();
    assert_eq!(g.value(mp).data(), [5.0, 7.0, 13.0, 15.0]);
    let ap = g.adaptive_avg_pool2d(img, 2, 2).unwrap();
    assert_eq!(g.value(ap).data(), [2.5, 4.5, 10.5, 12.5]);
    let ap1 = g.adaptive_avg_pool2d(img, 1, 1).unwrap();
    assert_eq!(g.value(ap1).data(), [7.5]);
    // 3 -> 2 bins overlap in the middle row/column
    let odd = g.input(t(&[1, 1, 3, 3], (0..9).map(f64::from).collect()));
    let ap = g.adaptive_avg_pool2d(odd, 2, 2).unwrap();
    assert_eq!(g.value(ap).data(), [2.0, 3.0, 5.0, 6.0]);
}

#[test]
fn backward_of_weighted_sum_is_the_input() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(&[3], vec![1.0, -2.0, 0.5]), true).unwrap();
    let mut g = Graph::new();
    let x = g.input(t(&[3], vec![4.0, 5.0, 6.0]));
    let wv = g.param(&store, w);
    let p = g.mul(wv, x).unwrap();
    let l = g.sum(p);
    assert_eq!(g.value(l).item(), 4.0 - 10.0 + 3.0);
    let grads = g.backward(l, &store).unwrap();
    assert_eq!(grads.param(w).data(), [4.0, 5.0, 6.0]);
}

#[test]
fn backward_requires_scalar_and_finite_values() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new();
    let v = g.variable(t(&[2], vec![1.0, 2.0]));
    assert!(g.backward(v, &store).is_err());
    let bad = g.variable(t(&[1], vec![f64::NAN]));
    let l = g.sum(bad);
    assert!(matches!(g.backward(l, &store), Err(TensorError::NonFinite { .. })));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.input(Tensor::zeros(&[2, 4]));
    let ce = g.cross_entropy(logits, &[0, 3]).unwrap();
    assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-15);
    // very large logits stay finite
    let big = g.input(t(&[1, 2], vec![1000.0, -1000.0]));
    let ce = g.cross_entropy(big, &[1]).unwrap();
    assert!((g.value(ce).item() - 2000.0).abs() < 1e-9);
    assert!(g.cross_entropy(big, &[2]).is_err());
}

#[test]
fn relative_error_examples() {
    assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    assert!((relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 29.25f64.sqrt()).abs() < 1e-15);
}

// ------------------------------------------------------------ gradient checks

const TOL: f64 = 1e-6;
const H: f64 = 1e-5;

/// Runs `f` on parameters registered in a fresh store and checks every one.
fn check(
    params: Vec<(&str, Tensor<f64>)>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params.into_iter().map(|(n, t)| store.add(n, t, true).unwrap()).collect();
    let report = check_parameters(&store, &ids, 256, H, |g, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        f(g, &vars)
    })
    .unwrap();
    for r in report {
        assert!(r.rel_error < TOL, "{}: relative error {} (|g| = {})", r.name, r.rel_error, r.analytic_norm);
        assert!(r.analytic_norm > 0.0, "{} has a zero gradient", r.name);
    }
}

/// Contracts an output with a fixed random tensor so that every output
/// element carries a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, g.value(y).shape(), -1.0, 1.0);
    let r = g.input(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (stride, pad) in [(1, 1), (2, 2), (2, 0)] {
        let k = if pad == 2 { 5 } else { 3 };
        check(
            vec![
                ("x", random(&mut rng, &[2, 3, 7, 6], -1.0, 1.0)),
                ("w", random(&mut rng, &[4, 3, k, k], -0.5, 0.5)),
                ("b", random(&mut rng, &[4], -0.5, 0.5)),
            ],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                project(g, y, 1)
            },
        );
    }
}

#[test]
fn gradcheck_conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, stride, pad, op) in [(3, 2, 1, 1), (3, 1, 1, 0), (3, 2, 0, 0), (5, 2, 2, 1)] {
        check(
            vec![
                ("x", random(&mut rng, &[2, 3, 4, 5], -1.0, 1.0)),
                ("w", random(&mut rng, &[3, 2, k, k], -0.5, 0.5)),
                ("b", random(&mut rng, &[2], -0.5, 0.5)),
            ],
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], v[2], stride, pad, op)?;
                project(g, y, 2)
            },
        );
    }
}

#[test]
fn gradcheck_activations_and_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // values bounded away from zero keep the kinks out of reach of H
    let mut x = random(&mut rng, &[2, 2, 6, 6], 0.05, 1.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 3 == 0 {
            *v = -*v;
        }
    }
    check(vec![("x", x.clone())], |g, v| {
        let y = g.leaky_relu(v[0], 0.01);
        project(g, y, 3)
    });
    check(vec![("x", x.clone())], |g, v| {
        let y = g.relu(v[0]);
        let y = g.scale(y, 1.7);
        project(g, y, 4)
    });
    check(vec![("x", x.clone())], |g, v| {
        let y = g.maxpool2d(v[0], 2)?;
        project(g, y, 5)
    });
    check(vec![("x", x)], |g, v| {
        let y = g.adaptive_avg_pool2d(v[0], 4, 3)?;
        project(g, y, 6)
    });
}

#[test]
fn gradcheck_linear_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    check(
        vec![
            ("x", random(&mut rng, &[3, 5], -1.0, 1.0)),
            ("w", random(&mut rng, &[4, 5], -1.0, 1.0)),
            ("b", random(&mut rng, &[4], -1.0, 1.0)),
        ],
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            let s = g.softmax(y)?;
            project(g, s, 7)
        },
    );
    check(vec![("logits", random(&mut rng, &[4, 3], -2.0, 2.0))], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]));
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = random(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
    let b = random(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
    check(vec![("a", a.clone()), ("b", b.clone())], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        project(g, m, 8)
    });
    check(vec![("a", a.clone()), ("b", b.clone())], |g, v| g.mse(v[0], v[1]));
    check(vec![("a", a)], |g, v| {
        let r = g.reshape(v[0], &[4, 6])?;
        let m = g.mean(r);
        let s = g.scale(m, 3.0);
        let sq = g.mul(s, s)?;
        Ok(g.sum(sq))
    });
    check(
        vec![("x", random(&mut rng, &[3, 2, 2, 2], -1.0, 1.0)), ("v", random(&mut rng, &[3, 4], 0.1, 1.0))],
        |g, v| {
            let c = g.column(v[1], 2)?;
            let y = g.mul_rows(v[0], c)?;
            project(g, y, 9)
        },
    );
}

#[test]
fn gradcheck_gaussian_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    check(
        vec![
            ("y", random(&mut rng, &[2, 3, 2, 2], -2.0, 2.0)),
            ("mean", random(&mut rng, &[3], -0.5, 0.5)),
            ("scale", random(&mut rng, &[3], 0.5, 2.0)),
        ],
        |g, v| g.gaussian_rate(v[0], v[1], v[2], 1e-9),
    );
}

#[test]
fn gaussian_rate_is_flat_below_the_floor() {
    let mut store = ParamStore::<f64>::new();
    let y = store.add("y", t(&[1, 1, 1, 1], vec![40.0]), true).unwrap();
    let m = store.add("m", t(&[1], vec![0.0]), true).unwrap();
    let s = store.add("s", t(&[1], vec![1.0]), true).unwrap();
    let mut g = Graph::new();
    let (yv, mv, sv) = (g.param(&store, y), g.param(&store, m), g.param(&store, s));
    let r = g.gaussian_rate(yv, mv, sv, 1e-9).unwrap();
    assert!((g.value(r).item() + 1e-9f64.log2()).abs() < 1e-9);
    let grads = g.backward(r, &store).unwrap();
    assert_eq!(grads.param(y).data(), [0.0]);
}

// ------------------------------------------------------------ freezing

/// A small random graph over three parameters, one of which is frozen.
fn random_graph(seed: u64, frozen: usize) -> (ParamStore<f64>, Vec<ParamId>, Gradients<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = vec![
        store.add("w0", random(&mut rng, &[2, 1, 3, 3], -1.0, 1.0), true).unwrap(),
        store.add("w1", random(&mut rng, &[2, 2, 3, 3], -1.0, 1.0), true).unwrap(),
        store.add("b", random(&mut rng, &[2], -1.0, 1.0), true).unwrap(),
    ];
    store.set_trainable(ids[frozen], false);
    let mut g = Graph::new();
    let x = g.input(random(&mut rng, &[1, 1, 6, 6], -1.0, 1.0));
    let (w0, w1, b) = (g.param(&store, ids[0]), g.param(&store, ids[1]), g.param(&store, ids[2]));
    let mut h = g.conv2d(x, w0, b, 1, 1).unwrap();
    for _ in 0..rng.gen_range(1..4) {
        h = match rng.gen_range(0..3) {
            0 => g.leaky_relu(h, 0.01),
            1 => g.conv2d(h, w1, b, 1, 1).unwrap(),
            _ => g.conv_transpose2d(h, w1, b, 1, 1, 0).unwrap(),
        };
    }
    let l = project(&mut g, h, seed).unwrap();
    let grads = g.backward(l, &store).unwrap();
    (store, ids, grads)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn frozen_parameters_get_exactly_zero_gradient(seed in any::<u64>(), frozen in 0usize..3) {
        let (_, ids, grads) = random_graph(seed, frozen);
        prop_assert!(grads.param(ids[frozen]).data().iter().all(|&v| v == 0.0));
        prop_assert!(grads.param(ids[2]).data().iter().any(|&v| v != 0.0) || frozen == 2);
    }
}

#[test]
fn param_store_basics() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("backbone.a", Tensor::zeros(&[2, 2]), true).unwrap();
    store.add("adapters.b", Tensor::zeros(&[3]), true).unwrap();
    assert!(store.add("backbone.a", Tensor::zeros(&[1]), true).is_err());
    assert_eq!(store.count_prefix("backbone."), 4);
    assert_eq!(store.id("backbone.a"), Some(a));
    let h0 = store.hash_prefix("backbone.");
    store.tensor_mut(store.id("adapters.b").unwrap()).data_mut()[0] = 1.0;
    assert_eq!(store.hash_prefix("backbone."), h0);
    store.tensor_mut(a).data_mut()[0] = 1e-7;
    assert_ne!(store.hash_prefix("backbone."), h0);
    store.set_trainable_prefix("backbone.", false);
    assert!(!store.get(a).trainable);
    let cast: ParamStore<f64> = store.cast();
    assert_eq!(cast.tensor(a).data()[0], 1e-7f32 as f64);
}

#[test]
fn batched_convolutions_match_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[3, 2, 8, 6], -1.0, 1.0);
    let w = random(&mut rng, &[4, 2, 5, 5], -1.0, 1.0);
    let wt = random(&mut rng, &[2, 4, 5, 5], -1.0, 1.0);
    let b = random(&mut rng, &[4], -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let (xv, wv, wtv, bv) = (g.input(x.clone()), g.input(w), g.input(wt), g.input(b));
    let y = g.conv2d(xv, wv, bv, 2, 2).unwrap();
    let z = g.conv_transpose2d(xv, wtv, bv, 2, 2, 1).unwrap();
    let per = 2 * 8 * 6;
    for n in 0..3 {
        let xn = g.input(t(&[1, 2, 8, 6], x.data()[n * per..(n + 1) * per].to_vec()));
        let yn = g.conv2d(xn, wv, bv, 2, 2).unwrap();
        let zn = g.conv_transpose2d(xn, wtv, bv, 2, 2, 1).unwrap();
        let (ly, lz) = (g.value(yn).len(), g.value(zn).len());
        assert_eq!(&g.value(y).data()[n * ly..(n + 1) * ly], g.value(yn).data());
        assert_eq!(&g.value(z).data()[n * lz..(n + 1) * lz], g.value(zn).data());
    }
}
