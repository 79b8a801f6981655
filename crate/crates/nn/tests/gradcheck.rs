//! Central finite-difference checks for every differentiable op.

use waymark_nn::{Graph, Group, Init, Tensor, Var};

const EPS: f32 = 1e-2;

/// Builds `op(inputs)` and reduces it to `0.5·Σ(out − t)²` for a fixed,
/// pseudo-random target so every output element carries gradient.
fn quad_loss(g: &mut Graph, out: Var) -> Var {
    let n = g.value(out).numel();
    let target: Vec<f32> = (0..n).map(|i| ((i * 7919) % 13) as f32 / 13.0 - 0.5).collect();
    let flat = g.reshape(out, &[n]);
    g.smooth_l1(flat, &target, 1e6, 1e-6)
}

fn check<F>(inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor]| -> f32 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);

    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.var(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let step = (t.numel() / 25).max(1);
        for i in (0..t.numel()).step_by(step) {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let a = analytic.data()[i];
            let tol = 2e-2 * a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() <= tol,
                "input {k} elem {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    Init::new(seed).normal(shape.to_vec(), 0.5)
}

#[test]
fn conv2d_strided_padded() {
    check(vec![rand(1, &[2, 3, 6, 5]), rand(2, &[4, 3, 3, 3]), rand(3, &[4])], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
        quad_loss(g, y)
    });
}

#[test]
fn conv2d_pointwise() {
    check(vec![rand(4, &[1, 3, 4, 4]), rand(5, &[2, 3, 1, 1])], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 0);
        quad_loss(g, y)
    });
}

#[test]
fn linear_relu_add_scale() {
    check(vec![rand(6, &[3, 5]), rand(7, &[4, 5]), rand(8, &[4]), rand(9, &[3, 4])], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        let r = g.relu(y);
        let s = g.add(r, v[3]);
        let s = g.scale(s, 1.5);
        quad_loss(g, s)
    });
}

#[test]
fn concat_and_gathers() {
    check(vec![rand(10, &[2, 3]), rand(11, &[4, 2])], |g, v| {
        let a = g.gather_rows(v[0], &[0, 1, 1, 0]);
        let c = g.concat_cols(a, v[1]);
        let f = g.gather_flat(c, &[0, 3, 3, 7, 19]);
        quad_loss(g, f)
    });
}

#[test]
fn pooling_and_upsampling() {
    check(vec![rand(12, &[1, 2, 6, 6])], |g, v| {
        let p = g.avg_pool(v[0], 2);
        let u = g.upsample2x(p);
        let a = g.add(u, v[0]);
        let q = g.global_avg_pool(a);
        let q2 = g.avg_pool(v[0], 3);
        let l1 = quad_loss(g, q);
        let l2 = quad_loss(g, q2);
        g.add(l1, l2)
    });
}

#[test]
fn roi_align_wrt_features() {
    let rois = [(0usize, [1.0f32, 2.0, 9.5, 13.0]), (1, [0.0, 0.0, 4.0, 4.0]), (0, [6.2, 3.3, 15.9, 15.0])];
    check(vec![rand(13, &[2, 3, 8, 8])], move |g, v| {
        let r = g.roi_align(v[0], &rois, 3, 0.5, 2);
        quad_loss(g, r)
    });
}

#[test]
fn classification_losses() {
    let groups = [Group { start: 0, len: 3, target: 2 }, Group { start: 3, len: 1, target: 0 }, Group { start: 4, len: 2, target: 0 }];
    check(vec![rand(14, &[6, 1]), rand(15, &[4, 2]), rand(16, &[5])], move |g, v| {
        let a = g.grouped_softmax_ce(v[0], &groups);
        let b = g.cross_entropy(v[1], &[0, 1, 1, 0]);
        let c = g.bce_with_logits(v[2], &[1.0, 0.0, 0.0, 1.0, 0.5]);
        let ab = g.add(a, b);
        g.add(ab, c)
    });
}

#[test]
fn smooth_l1_both_branches() {
    let target = [0.0f32, 0.05, -2.0, 3.0];
    check(vec![Tensor::new([4], vec![0.03, 0.5, 1.0, -1.0])], move |g, v| g.smooth_l1(v[0], &target, 0.2, 2.0));
}

#[test]
fn forward_is_bitwise_reproducible() {
    let run = || {
        let mut g = Graph::new();
        let x = g.input(rand(20, &[2, 3, 16, 16]));
        let w = g.input(rand(21, &[8, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1);
        let r = g.relu(y);
        g.value(r).clone()
    };
    assert_eq!(run().data(), run().data());
}
