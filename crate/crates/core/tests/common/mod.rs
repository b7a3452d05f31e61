//! Shared harness for the integration suites: finite-difference gradient
//! checking against the tape's analytic gradients, and RNG helpers.

// Each integration-test binary compiles its own copy of this module and
// uses a different subset of it.
#![allow(dead_code)]

use moc_core::nn::{Graph, NodeId, ParamId, ParamStore, Scalar, Tensor};
use moc_core::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1].
pub fn random_tensor<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<F> {
    let len: usize = shape.iter().product();
    let data: Vec<F> = (0..len).map(|_| moc_core::nn::sc(rng.gen_range(-1.0..1.0))).collect();
    Tensor::new(shape, data).unwrap()
}

/// Evaluates a scalar loss without gradient bookkeeping.
pub fn loss_value<F: Scalar>(
    store: &ParamStore<F>,
    build: &dyn Fn(&mut Graph<'_, F>) -> Result<NodeId>,
) -> f64 {
    let mut g = Graph::eval(store);
    let loss = build(&mut g).expect("loss builds");
    g.value(loss).data()[0].to_f64().unwrap()
}

/// Central finite difference of the loss along one parameter coordinate.
pub fn finite_diff<F: Scalar>(
    store: &mut ParamStore<F>,
    build: &dyn Fn(&mut Graph<'_, F>) -> Result<NodeId>,
    id: ParamId,
    coord: usize,
    h: f64,
) -> f64 {
    let original = store.get(id).data()[coord];
    let step = moc_core::nn::sc::<F>(h);
    store.value_mut(id).data_mut()[coord] = original + step;
    let plus = loss_value(&*store, build);
    store.value_mut(id).data_mut()[coord] = original - step;
    let minus = loss_value(&*store, build);
    store.value_mut(id).data_mut()[coord] = original;
    (plus - minus) / (2.0 * h)
}

/// Relative error with an absolute floor, so near-zero gradients compare on
/// an absolute scale instead of blowing up the ratio.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every coordinate of every parameter: analytic tape gradient vs
/// central finite difference. Returns the worst relative error.
pub fn check_all_grads<F: Scalar>(
    store: &mut ParamStore<F>,
    build: &dyn Fn(&mut Graph<'_, F>) -> Result<NodeId>,
    h: f64,
    floor: f64,
) -> f64 {
    let grads = {
        let mut g = Graph::train(&*store);
        let loss = build(&mut g).expect("loss builds");
        g.backward(loss).expect("backward runs")
    };
    let ids: Vec<(ParamId, usize)> = store.iter().map(|(id, _, t)| (id, t.len())).collect();
    let mut worst = 0.0f64;
    for (id, len) in ids {
        let grad = grads.by_param[id.index()]
            .as_ref()
            .unwrap_or_else(|| panic!("parameter {} received no gradient", store.name(id)));
        for coord in 0..len {
            let analytic = grad.data()[coord].to_f64().unwrap();
            let numeric = finite_diff(store, build, id, coord, h);
            worst = worst.max(rel_err(analytic, numeric, floor));
        }
    }
    worst
}
