//! Finite-difference checks of every graph op's backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares d/dx sum(r * f(x)) against central differences for every input.
fn check(
    inputs: Vec<Tensor>,
    store: &ParamStore,
    mode: Mode,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::new(store, mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        rand_tensor(g.dims(out), &mut rng)
    };
    let objective = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new(store, mode);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };
    let mut g = Graph::new(store, mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(vec![(out, probe.clone())]);
    let eps = 1e-2f32;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf gradient");
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps as f64);
            let a = analytic.data()[i] as f64;
            let tol = 2e-2 * (1.0 + numeric.abs().max(a.abs()));
            assert!(
                (a - numeric).abs() < tol,
                "input {k} elem {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = ParamStore::new();
    for &(stride, pad, k, cout) in &[
        (1, 1, 3, 6),
        (1, 1, 3, 1),
        (2, 1, 3, 4),
        (1, 0, 1, 4),
        (1, 0, 3, 6),
        (1, 2, 3, 2),
    ] {
        let x = rand_tensor([2, 3, 6, 5], &mut rng);
        let w = rand_tensor([cout, 3, k, k], &mut rng);
        let b = rand_tensor([1, cout, 1, 1], &mut rng);
        check(vec![x, w, b], &store, Mode::Eval, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        });
    }
}

#[test]
fn batch_norm_gradients_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3);
    *store.buffer_mut(bn.running_mean) = Tensor::from_vec([1, 3, 1, 1], vec![0.1, -0.2, 0.3]);
    *store.buffer_mut(bn.running_var) = Tensor::from_vec([1, 3, 1, 1], vec![0.5, 1.5, 2.0]);
    let x = rand_tensor([2, 3, 4, 4], &mut rng);
    let gamma = rand_tensor([1, 3, 1, 1], &mut rng);
    let beta = rand_tensor([1, 3, 1, 1], &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        check(
            vec![x.clone(), gamma.clone(), beta.clone()],
            &store,
            mode,
            |g, v| g.batch_norm(v[0], v[1], v[2], bn.running_mean, bn.running_var, 1e-5),
        );
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::new();
    // keep relu inputs away from the kink
    let x = rand_tensor([2, 3, 4, 5], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let y = rand_tensor([2, 3, 4, 5], &mut rng);
    let m = rand_tensor([2, 1, 4, 5], &mut rng);
    check(vec![x.clone()], &store, Mode::Eval, |g, v| g.relu(v[0]));
    check(vec![x.clone()], &store, Mode::Eval, |g, v| g.sigmoid(v[0]));
    check(vec![x.clone(), y.clone()], &store, Mode::Eval, |g, v| {
        g.add(v[0], v[1])
    });
    check(vec![x.clone(), y.clone()], &store, Mode::Eval, |g, v| {
        g.sub(v[0], v[1])
    });
    check(vec![x.clone()], &store, Mode::Eval, |g, v| {
        g.add_scalar(v[0], 0.7)
    });
    check(vec![x.clone(), m], &store, Mode::Eval, |g, v| {
        g.mul_plane(v[0], v[1])
    });
    check(vec![x, y], &store, Mode::Eval, |g, v| {
        g.concat(&[v[1], v[0], v[1]])
    });
}

#[test]
fn spatial_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = ParamStore::new();
    // distinct values so the max is unique in every window
    let mut vals: Vec<f32> = (0..96).map(|i| i as f32 * 0.05 - 2.4).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec([2, 2, 6, 4], vals);
    check(vec![x.clone()], &store, Mode::Eval, |g, v| {
        g.max_pool2(v[0])
    });
    check(vec![x.clone()], &store, Mode::Eval, |g, v| {
        g.subsample(v[0], 2)
    });
    check(vec![x.clone()], &store, Mode::Eval, |g, v| {
        g.resize(v[0], 11, 7)
    });
    check(vec![x], &store, Mode::Eval, |g, v| g.resize(v[0], 3, 2));
}

#[test]
fn param_nodes_are_deduplicated_and_accumulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "c", 2, 2, 3, 1, true, Init::Kaiming, &mut rng);
    let x = rand_tensor([1, 2, 5, 5], &mut rng);
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.input(x);
    let a = conv.forward(&mut g, xv);
    let b = conv.forward(&mut g, xv);
    let n_nodes = g.len();
    let s = g.add(a, b);
    let ones = Tensor::full(g.dims(s), 1.0);
    let grads = g.backward(vec![(s, ones.clone())]);
    let twice = grads.param(conv.bias.unwrap()).unwrap();
    let mut g1 = Graph::new(&store, Mode::Eval);
    let xv = g1.input(rand_tensor([1, 2, 5, 5], &mut rng));
    let y = conv.forward(&mut g1, xv);
    let once = g1.backward(vec![(y, ones)]);
    let once = once.param(conv.bias.unwrap()).unwrap();
    for (t, o) in twice.data().iter().zip(once.data()) {
        assert!((t - 2.0 * o).abs() < 1e-3);
    }
    // two weight nodes + bias nodes appear once each
    assert_eq!(n_nodes, 1 + 2 + 2);
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(
        &mut store,
        "frozen",
        1,
        1,
        3,
        1,
        true,
        Init::Kaiming,
        &mut rng,
    );
    store.set_trainable("frozen", false);
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.leaf(rand_tensor([1, 1, 4, 4], &mut rng));
    let y = conv.forward(&mut g, x);
    let grads = g.backward(vec![(y, Tensor::full([1, 1, 4, 4], 1.0))]);
    assert!(grads.param(conv.weight).is_none());
    assert!(grads.wrt(x).is_some());
}
