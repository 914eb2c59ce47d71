mod common;

use common::{grad_check, random};
use tapfuse_core::autograd::Activation;
use tapfuse_core::{Graph, Tensor, Var};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-6;

fn assert_small(errors: &[f64], what: &str) {
    for (i, e) in errors.iter().enumerate() {
        assert!(*e < TOL, "{what}: input {i} relative error {e}");
    }
}

/// Weighted sum with fixed random weights so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> tapfuse_core::Result<Var> {
    let w = g.constant(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn broadcasting_elementwise() {
    let inputs = [random(&[2, 3, 4, 4], 1), random(&[1, 3, 1, 1], 2), random(&[2, 1, 4, 4], 3)];
    let e = grad_check(&inputs, STEP, |g, v| {
        let a = g.mul(v[0], v[1])?;
        let b = g.add(a, v[2])?;
        let c = g.sub(b, v[1])?;
        let d = g.scale(c, 0.7);
        let d = g.add_scalar(d, 0.3);
        project(g, d, 9)
    });
    assert_small(&e, "broadcast");
}

#[test]
fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let inputs = [random(&a_shape, 4), random(&b_shape, 5)];
        let e = grad_check(&inputs, STEP, |g, v| {
            let y = g.matmul(v[0], v[1], ta, tb)?;
            project(g, y, 10)
        });
        assert_small(&e, "matmul");
    }
    let inputs = [random(&[2, 3, 4], 6), random(&[5, 4], 7), random(&[5], 8)];
    let e = grad_check(&inputs, STEP, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, 11)
    });
    assert_small(&e, "linear");
}

#[test]
fn conv2d_strided_padded_and_pointwise() {
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let inputs = [random(&[2, 3, 6, 6], 12), random(&[4, 3, k, k], 13), random(&[4], 14)];
        let e = grad_check(&inputs, STEP, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, 15)
        });
        assert_small(&e, "conv2d");
    }
}

#[test]
fn normalizations() {
    let inputs = [random(&[2, 4, 3, 3], 16), random(&[4], 17), random(&[4], 18)];
    let e = grad_check(&inputs, STEP, |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
        project(g, y, 19)
    });
    assert_small(&e, "group_norm");
    let inputs = [random(&[2, 5, 6], 20), random(&[6], 21), random(&[6], 22)];
    let e = grad_check(&inputs, STEP, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 23)
    });
    assert_small(&e, "layer_norm");
}

#[test]
fn activations_and_softmax() {
    for a in [Activation::Silu, Activation::Gelu, Activation::Relu] {
        let inputs = [random(&[3, 7], 24)];
        let e = grad_check(&inputs, STEP, |g, v| {
            let y = g.act(v[0], a);
            project(g, y, 25)
        });
        assert_small(&e, "activation");
    }
    for axis in 0..3 {
        let inputs = [random(&[2, 3, 4], 26)];
        let e = grad_check(&inputs, STEP, |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, 27)
        });
        assert_small(&e, "softmax");
    }
}

#[test]
fn layout_ops() {
    let inputs = [random(&[2, 3, 4], 28), random(&[2, 2, 4], 29)];
    let e = grad_check(&inputs, STEP, |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let p = g.permute(c, &[2, 0, 1])?;
        let r = g.reshape(p, &[8, 5])?;
        let n = g.narrow(r, 1, 1, 3)?;
        project(g, n, 30)
    });
    assert_small(&e, "layout");
}

#[test]
fn resampling_and_pooling() {
    let inputs = [random(&[2, 2, 3, 5], 31)];
    for (oh, ow) in [(6, 10), (7, 4), (2, 2)] {
        let e = grad_check(&inputs, STEP, |g, v| {
            let y = g.resize_bilinear(v[0], oh, ow)?;
            project(g, y, 32)
        });
        assert_small(&e, "bilinear");
    }
    for (oh, ow) in [(1, 1), (2, 3), (6, 6)] {
        let e = grad_check(&inputs, STEP, |g, v| {
            let y = g.adaptive_avg_pool(v[0], oh, ow)?;
            project(g, y, 33)
        });
        assert_small(&e, "adaptive pool");
    }
    let e = grad_check(&inputs, STEP, |g, v| {
        let y = g.upsample_nearest(v[0], 2)?;
        let m = g.spatial_mean(y)?;
        let s = project(g, m, 34)?;
        let t = g.mean(y);
        g.add(s, t)
    });
    assert_small(&e, "nearest/mean");
}

#[test]
fn topk_softmax_gradient_and_support() {
    let inputs = [random(&[4, 6], 35)];
    for k in 1..=6 {
        let e = grad_check(&inputs, STEP, |g, v| {
            let y = g.topk_softmax(v[0], k)?;
            project(g, y, 36)
        });
        assert_small(&e, "topk");
    }
    let mut g = Graph::new();
    let x = g.constant(inputs[0].clone());
    let y = g.topk_softmax(x, 2).unwrap();
    for row in g.value(y).data().chunks(6) {
        assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 2);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn losses() {
    let inputs = [random(&[2, 3, 2, 2], 37)];
    let targets: Vec<Option<usize>> = (0..8).map(|i| if i == 3 { None } else { Some(i % 3) }).collect();
    let e = grad_check(&inputs, STEP, |g, v| g.cross_entropy(v[0], &targets, Some(&[0.5, 1.0, 2.0])));
    assert_small(&e, "cross entropy");
    let labels = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let inputs = [random(&[2, 4], 38)];
    let e = grad_check(&inputs, STEP, |g, v| g.bce_with_logits(v[0], &labels));
    assert_small(&e, "bce");
    let inputs = [random(&[3, 4], 39), random(&[3, 4], 40)];
    let e = grad_check(&inputs, STEP, |g, v| g.mse(v[0], v[1]));
    assert_small(&e, "mse");
}

#[test]
fn shared_subexpressions_accumulate() {
    let inputs = [random(&[3, 3], 41)];
    let e = grad_check(&inputs, STEP, |g, v| {
        let a = g.mul(v[0], v[0])?;
        let b = g.matmul(a, v[0], false, true)?;
        project(g, b, 42)
    });
    assert_small(&e, "reuse");
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[2, 2], 43));
    let w = g.leaf(random(&[2, 2], 44), true);
    let y = g.mul(x, w).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).is_none());
    assert_eq!(grads.get(w).unwrap(), g.value(x));
}

#[test]
fn row_gather_and_scatter() {
    let inputs = [random(&[4, 3, 2], 61)];
    let e = grad_check(&inputs, STEP, |g, v| {
        let a = g.gather_rows(v[0], &[2, 0, 2])?;
        let b = g.scatter_rows(a, &[1, 4, 1], 5)?;
        project(g, b, 62)
    });
    assert_small(&e, "gather/scatter");
    let mut g = tapfuse_core::Graph::<f64>::new();
    let x = g.constant(inputs[0].clone());
    let s = g.scatter_rows(x, &[0, 0, 3, 1], 5).unwrap();
    let v = g.value(s);
    assert_eq!(v.shape(), &[5, 3, 2]);
    let d = inputs[0].data();
    assert_eq!(v.data()[0], d[0] + d[6]);
    assert!(v.data()[12..18].iter().all(|x| *x == 0.0));
    assert!(g.scatter_rows(x, &[0, 1, 2, 5], 5).is_err());
}
