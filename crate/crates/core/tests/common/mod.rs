#![allow(dead_code)]

use tapfuse_core::{Graph, Result, Tensor, Var};

/// Relative error `||a - n|| / max(||a||, ||n||)` between the analytic
/// gradient and central finite differences, per input tensor.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    step: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut errors = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        errors.push(if denom < 1e-12 { diff } else { diff / denom });
    }
    errors
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = tapfuse_core::rng(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_f32(shape: &[usize], seed: u64) -> Tensor<f32> {
    random(shape, seed).cast()
}

/// Central-difference check of every trainable parameter in `store`; returns
/// `(name, relative error)` per parameter tensor.
pub fn store_grad_check(
    store: &tapfuse_core::nn::ParamStore<f64>,
    step: f64,
    build: impl Fn(&mut tapfuse_core::nn::Ctx<'_, f64>) -> Result<Var>,
) -> Vec<(String, f64)> {
    use tapfuse_core::nn::Ctx;
    let eval = |s: &tapfuse_core::nn::ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, s, false);
        let loss = build(&mut cx).unwrap();
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, store, true);
    let loss = build(&mut cx).unwrap();
    let grads = cx.g.backward(loss).unwrap();
    let analytic: std::collections::HashMap<usize, Tensor<f64>> =
        cx.param_grads(&grads).into_iter().map(|(id, t)| (id.index(), t)).collect();
    let mut out = Vec::new();
    let mut work = store.clone();
    for id in store.ids() {
        let e = store.entry(id);
        if !e.trainable {
            continue;
        }
        let n = e.value.numel();
        let a = analytic.get(&id.index()).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut num = vec![0.0; n];
        for j in 0..n {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            num[j] = (plus - minus) / (2.0 * step);
        }
        let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let denom = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(num.iter().map(|x| x * x).sum::<f64>().sqrt());
        out.push((e.name.clone(), if denom < 1e-12 { diff } else { diff / denom }));
    }
    out
}
