use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::normal_tensor;

/// Projects a node onto a fixed random direction so every op can be checked
/// through a scalar.
fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> Var {
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = g.constant(normal_tensor(&mut rng, &[1, n], 1.0));
    let flat = g.reshape(out, &[1, n]);
    g.matmul_t(flat, dir)
}

fn check<F>(inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let store = ParamStore::new();
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let s = project(&mut g, out, 99);
        g.value(s).item()
    };
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let s = project(&mut g, out, 99);
    let grads = g.backward(s);
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1.0f64).max(a.abs().max(numeric.abs()));
            assert!(err < 1e-6, "input {k} element {i}: analytic {a} vs numeric {numeric}");
        }
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_tensor(&mut rng, shape, 1.0)
}

#[test]
fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand_t(&[4, 3], 1) } else { rand_t(&[3, 4], 1) };
        let b = if tb { rand_t(&[2, 4], 2) } else { rand_t(&[4, 2], 2) };
        check(&[a, b], |g, v| g.matmul_ex(v[0], v[1], ta, tb));
    }
}

#[test]
fn elementwise_and_bias_ops() {
    check(&[rand_t(&[3, 4], 3), rand_t(&[4], 4)], |g, v| {
        let y = g.add_row_bias(v[0], v[1]);
        let y = g.quick_gelu(y);
        g.scale(y, 0.7)
    });
    check(&[rand_t(&[2, 3, 3], 5), rand_t(&[2], 6)], |g, v| {
        let y = g.add_channel_bias(v[0], v[1]);
        g.relu(y)
    });
    check(&[rand_t(&[2, 3], 7), rand_t(&[1], 8), rand_t(&[2, 3], 9)], |g, v| {
        let y = g.scale_by(v[0], v[1]);
        g.weighted_sum(&[(y, 2.0), (v[2], -0.5)])
    });
}

#[test]
fn normalization_ops() {
    check(&[rand_t(&[3, 5], 10), rand_t(&[5], 11), rand_t(&[5], 12)], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    let mean = rand_t(&[2], 13);
    let mut var = rand_t(&[2], 14);
    var.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.5);
    check(&[rand_t(&[2, 3, 3], 15), rand_t(&[2], 16), rand_t(&[2], 17)], |g, v| {
        g.frozen_batch_norm(v[0], v[1], v[2], &mean, &var, 1e-5)
    });
    check(&[rand_t(&[4, 3], 18)], |g, v| g.l2_normalize_rows(v[0]));
}

#[test]
fn convolutions() {
    check(&[rand_t(&[2, 5, 6], 20), rand_t(&[3, 2, 3, 3], 21)], |g, v| g.conv2d(v[0], v[1], 2, 1));
    check(&[rand_t(&[2, 4, 4], 22), rand_t(&[3, 2, 1, 1], 23)], |g, v| g.conv2d(v[0], v[1], 1, 0));
    check(&[rand_t(&[3, 3, 2], 24), rand_t(&[3, 2, 4, 4], 25)], |g, v| {
        g.conv_transpose2d(v[0], v[1], 2, 1)
    });
    check(&[rand_t(&[2, 4, 6], 26)], |g, v| g.avg_pool(v[0], 2));
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for the same kernel.
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.constant(rand_t(&[2, 8, 8], 30));
    let y = g.constant(rand_t(&[3, 4, 4], 31));
    let w = rand_t(&[3, 2, 4, 4], 32);
    let wc = g.constant(w.clone());
    // conv weight [c_out=3, c_in=2] is the transposed-conv weight [c_in=3, c_out=2].
    let cx = g.conv2d(x, wc, 2, 1);
    let ty = g.conv_transpose2d(y, wc, 2, 1);
    assert_eq!(g.shape(ty), &[2, 8, 8]);
    let lhs = crate::math::dot(g.value(cx).data(), g.value(y).data());
    let rhs = crate::math::dot(g.value(x).data(), g.value(ty).data());
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
}

#[test]
fn shape_ops() {
    check(&[rand_t(&[2, 3], 40), rand_t(&[1, 3], 41)], |g, v| {
        let t = g.transpose(v[0]);
        let t = g.transpose(t);
        let c = g.concat(&[t, v[1]]);
        let s = g.slice_rows(c, 1, 2);
        let m = g.mean_rows(c);
        g.concat(&[s, m])
    });
}

#[test]
fn attention_op() {
    for causal in [false, true] {
        check(&[rand_t(&[3, 4], 50), rand_t(&[3, 4], 51), rand_t(&[3, 4], 52)], |g, v| {
            g.attention(v[0], v[1], v[2], 2, causal)
        });
    }
    check(&[rand_t(&[2, 6], 53), rand_t(&[5, 6], 54), rand_t(&[5, 6], 55)], |g, v| {
        g.attention(v[0], v[1], v[2], 3, false)
    });
}

#[test]
fn resampling_ops() {
    check(&[rand_t(&[2, 3, 2], 60)], |g, v| g.resize_bilinear(v[0], 7, 5));
    let pts = [Some([0.3, 1.7]), None, Some([-1.0, 5.0]), Some([1.0, 0.0])];
    check(&[rand_t(&[2, 3, 3], 61)], |g, v| g.sample_points(v[0], &pts));
}

#[test]
fn loss_ops() {
    let target = rand_t(&[3, 2, 2], 70);
    check(&[rand_t(&[3, 2, 2], 71)], |g, v| g.masked_mse(v[0], &target, &[true, false, true]));
    check(&[rand_t(&[4, 4], 72)], |g, v| g.diag_contrastive(v[0], &[true, true, false, true]));
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let frozen = store.add("t", rand_t(&[2, 2], 80), crate::params::ParamGroup::Frozen);
    let live = store.add("p", rand_t(&[2, 2], 81), crate::params::ParamGroup::Head);
    let mut g = Graph::new(&store);
    let a = g.param(frozen);
    let b = g.param(live);
    assert_eq!(g.param(live), b);
    let c = g.matmul(a, b);
    let s = project(&mut g, c, 1);
    let grads = g.backward(s);
    let ps = grads.params(&g);
    assert_eq!(ps.len(), 1);
    assert_eq!(ps[0].0, live);
    assert!(grads.get(a).is_none());
}
