//! Central finite-difference checks for every differentiable op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Compare backprop gradients of `f` (reduced by a fixed random projection)
/// against central differences for every element of every input.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |ins: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        let proj = rand_t(g.shape(out), 99);
        let pv = g.constant(proj);
        let prod = g.mul(out, pv);
        let loss = g.sum_all(prod);
        let value = g.value(loss).data()[0];
        g.backward(loss);
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(&inputs);
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(err < 1e-5, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn elementwise_ops() {
    check(vec![rand_t(&[2, 3], 1), rand_t(&[2, 3], 2)], |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.sub(a, v[1]);
        let c = g.mul(b, v[1]);
        let d = g.silu(c);
        g.scale(d, 0.7)
    });
}

#[test]
fn relu_away_from_kink() {
    let x = Tensor::from_f64(&[4], &[-1.0, 0.5, 2.0, -0.3]);
    check(vec![x], |g, v| g.relu(v[0]));
}

#[test]
fn biases_and_broadcasts() {
    check(vec![rand_t(&[2, 3, 4], 3), rand_t(&[4], 4), rand_t(&[2, 4], 5)], |g, v| {
        let a = g.add_row_bias(v[0], v[1]);
        g.add_batch_chan(a, v[2])
    });
}

#[test]
fn matmul_and_bmm() {
    check(vec![rand_t(&[2, 3, 4], 6), rand_t(&[4, 5], 7)], |g, v| g.matmul(v[0], v[1]));
    check(vec![rand_t(&[2, 3, 4], 8), rand_t(&[2, 4, 5], 9)], |g, v| g.bmm(v[0], v[1], false));
    check(vec![rand_t(&[2, 3, 4], 10), rand_t(&[2, 5, 4], 11)], |g, v| g.bmm(v[0], v[1], true));
}

#[test]
fn normalizations_and_softmax() {
    check(vec![rand_t(&[3, 5], 12), rand_t(&[5], 13), rand_t(&[5], 14)], |g, v| g.layer_norm(v[0], v[1], v[2]));
    check(vec![rand_t(&[3, 5], 15)], |g, v| g.softmax_last(v[0]));
    check(vec![rand_t(&[3, 5], 16)], |g, v| g.l2_normalize_rows(v[0]));
}

#[test]
fn convolutions() {
    check(vec![rand_t(&[2, 5, 5, 2], 17), rand_t(&[18, 3], 18)], |g, v| g.conv2d(v[0], v[1], 3, 1, 1));
    check(vec![rand_t(&[1, 6, 6, 2], 19), rand_t(&[18, 3], 20)], |g, v| g.conv2d(v[0], v[1], 3, 2, 1));
    check(vec![rand_t(&[1, 4, 4, 3], 21), rand_t(&[48, 2], 22)], |g, v| g.conv2d(v[0], v[1], 4, 4, 0));
}

#[test]
fn spatial_rearrangements() {
    check(vec![rand_t(&[2, 2, 3, 2], 23)], |g, v| g.upsample2x(v[0]));
    check(vec![rand_t(&[1, 4, 4, 3], 24)], |g, v| {
        let s = g.space_to_depth(v[0], 2);
        let w = g.scale(s, 2.0);
        g.depth_to_space(w, 2)
    });
    check(vec![rand_t(&[2, 3, 2], 25), rand_t(&[2, 3, 4], 26)], |g, v| g.concat_last(v[0], v[1]));
    check(vec![rand_t(&[2, 3, 4], 27), rand_t(&[2, 1, 4], 28)], |g, v| g.concat_axis1(v[0], v[1]));
    check(vec![rand_t(&[2, 6], 29)], |g, v| g.reshape(v[0], &[3, 4]));
}

#[test]
fn gathers_pools_and_losses() {
    check(vec![rand_t(&[4, 3], 30)], |g, v| g.gather(v[0], &[2, 0, 2]));
    check(vec![rand_t(&[3, 2], 31)], |g, v| g.broadcast_batch(v[0], 3));
    check(vec![rand_t(&[2, 3, 3, 4], 32)], |g, v| g.mean_rows(v[0]));
    check(vec![rand_t(&[2, 3], 33)], |g, v| g.mean_all(v[0]));
    check(vec![rand_t(&[2, 3], 34), rand_t(&[2, 3], 35)], |g, v| g.mse(v[0], v[1]));
    check(vec![rand_t(&[3, 4], 36)], |g, v| g.softmax_xent(v[0], &[1, 0, 3], Some(&[1.0, 2.0, 0.5])));
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(rand_t(&[2, 2], 40));
    let b = g.leaf(rand_t(&[2, 2], 41));
    let c = g.mul(a, b);
    let l = g.sum_all(c);
    g.backward(l);
    assert!(g.grad(a).is_none());
    assert!(g.grad(b).is_some());
}
