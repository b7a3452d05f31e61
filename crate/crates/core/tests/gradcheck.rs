//! Analytic gradients vs central finite differences for every operation,
//! run in f64 with small dense inputs so every coordinate gets checked.

mod common;

use common::{check_all_grads, random_tensor, rng};
use moc_core::cim::{Cim, FeaturePyramid};
use moc_core::cssm::CssBlock;
use moc_core::nn::{Graph, LayerNorm, Linear, NodeId, Pad, ParamStore, Tensor};
use moc_core::ssm::SelectiveSsm;
use moc_core::Result;
use rand::Rng;
use std::rc::Rc;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-6;
/// Deep composites (normalization + gating + scans) have larger third
/// derivatives and more roundoff in the difference quotient, so they use a
/// smaller step, an absolute floor for near-zero gradients, and a looser
/// bound. The truncation error scales as h^2 (verified by refinement), so
/// even the loose bound would catch a wrong gradient immediately.
const COMPOSITE_H: f64 = 3e-5;
const COMPOSITE_FLOOR: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-5;

/// A store preloaded with uniform random parameters of the given shapes.
fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.add(name, random_tensor(&mut r, shape));
    }
    store
}

fn params(g: &mut Graph<'_, f64>, n: usize) -> Vec<NodeId> {
    (0..n)
        .map(|i| g.param(moc_core::nn::ParamId::from_index(i)).unwrap())
        .collect()
}

#[test]
fn elementwise_chain() {
    let mut store = store_with(&[("x", &[2, 3]), ("y", &[2, 3])], 1);
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 2);
        let a = g.silu(p[0])?;
        let b = g.sigmoid(p[1])?;
        let c = g.mul(a, b)?;
        let d = g.softplus(p[0])?;
        let e = g.add(c, d)?;
        let f = g.sub(e, p[1])?;
        let scaled = g.mul_scalar(f, 0.75)?;
        g.mean(scaled)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}

#[test]
fn relu_away_from_kink() {
    // Keep inputs off zero so the subgradient choice can't flip under FD.
    let mut store = ParamStore::new();
    let mut r = rng(2);
    let data = random_tensor::<f64>(&mut r, &[3, 4]);
    let shifted: Vec<f64> = data.data().iter().map(|v| v + if *v >= 0.0 { 0.5 } else { -0.5 }).collect();
    store.add("x", Tensor::new(&[3, 4], shifted).unwrap());
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 1);
        let y = g.relu(p[0])?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}

#[test]
fn matmul_and_bias() {
    let mut store = store_with(&[("a", &[3, 4]), ("b", &[4, 2]), ("bias", &[2])], 3);
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 3);
        let y = g.matmul(p[0], p[1])?;
        let z = g.add_bias(y, p[2])?;
        let sq = g.mul(z, z)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}

#[test]
fn conv_variants() {
    // Same padding, stride 1.
    let mut store = store_with(&[("x", &[5, 6, 2]), ("w", &[3, 3, 2, 3])], 4);
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 2);
        let y = g.conv2d(p[0], p[1], 1, 1, Pad::Same)?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "same-pad conv: worst {worst:.3e}");

    // Valid padding, stride 2 (the 4x4 patch embed and 2x2 downsample shapes).
    let mut store = store_with(&[("x", &[8, 8, 2]), ("w", &[4, 4, 2, 3])], 5);
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 2);
        let y = g.conv2d(p[0], p[1], 4, 1, Pad::Valid)?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "strided valid conv: worst {worst:.3e}");

    // Dilation 2 with same padding (the far branch of the local context).
    let mut store = store_with(&[("x", &[7, 7, 2]), ("w", &[3, 3, 2, 2])], 6);
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 2);
        let y = g.conv2d(p[0], p[1], 1, 2, Pad::Same)?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "dilated conv: worst {worst:.3e}");
}

#[test]
fn depthwise_conv() {
    let mut store = store_with(&[("x", &[5, 4, 3]), ("w", &[3, 3, 3])], 7);
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 2);
        let y = g.depthwise_conv2d(p[0], p[1])?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}

#[test]
fn pooling_and_upsampling() {
    let mut store = store_with(&[("x", &[4, 6, 2])], 8);
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 1);
        let pooled = g.avgpool2d(p[0], 2)?;
        let up = g.upsample_bilinear(pooled, 2)?;
        let y = g.mul(up, p[0])?;
        g.mean(y)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}

#[test]
fn layer_norm_full_gradient() {
    let mut store = store_with(&[("x", &[3, 2, 4]), ("gamma", &[4]), ("beta", &[4])], 9);
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 3);
        let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
        let z = g.mul(y, p[0])?;
        g.mean(z)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}

#[test]
fn concat_slice_reshape_gather() {
    let mut store = store_with(&[("a", &[3, 2, 2]), ("b", &[3, 2, 1])], 10);
    let perm = Rc::new(vec![5usize, 2, 0, 4, 1, 3]);
    let build = move |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 2);
        let cat = g.concat_channels(&[p[0], p[1]])?; // [3, 2, 3]
        let mid = g.slice_channels(cat, 1, 3)?; // [3, 2, 2]
        let flat = g.reshape(mid, &[6, 2])?;
        let shuffled = g.gather_rows(flat, &perm)?;
        let sq = g.mul(shuffled, shuffled)?;
        let s = g.sum(sq)?;
        g.mul_scalar(s, 1.0 / 12.0)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}

#[test]
fn fused_selective_scan() {
    // All four scan inputs as free parameters; x engages the dynamic path.
    let (l, d, n) = (6, 3, 2);
    let mut r = rng(11);
    let mut store = ParamStore::new();
    store.add("x", random_tensor::<f64>(&mut r, &[l, d]));
    // Keep delta positive by seeding around 0.5 and letting FD nudge it.
    let delta: Vec<f64> = (0..l * d).map(|_| 0.3 + 0.4 * r.gen_range(0.0..1.0)).collect();
    store.add("delta", Tensor::new(&[l, d], delta).unwrap());
    store.add("b", random_tensor::<f64>(&mut r, &[l, n]));
    store.add("c", random_tensor::<f64>(&mut r, &[l, n]));
    store.add("a_log", Tensor::new(&[d, n], (0..d * n).map(|i| ((i % n) as f64 + 1.0).ln()).collect()).unwrap());
    let build = |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let p = params(g, 5);
        let y = g.selective_scan(p[0], p[1], p[2], p[3], p[4])?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}


#[test]
fn selective_ssm_projections() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let ssm = SelectiveSsm::new(&mut store, &mut r, "ssm", 3, 2, true);
    let x_id = store.add("x", random_tensor::<f64>(&mut r, &[5, 3]));
    let build = move |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let x = g.param(x_id)?;
        let y = ssm.forward(g, x)?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, H, FLOOR);
    assert!(worst < TOL, "worst relative error {worst:.3e}");
}

#[test]
fn linear_and_layernorm_modules() {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut r, "lin", 3, 4, true);
    let norm = LayerNorm::new(&mut store, "norm", 4);
    let x_id = store.add("x", random_tensor::<f64>(&mut r, &[2, 5, 3]));
    let build = move |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let x = g.param(x_id)?;
        let y = lin.forward(g, x)?;
        let z = norm.forward(g, y)?;
        let sq = g.mul(z, z)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, COMPOSITE_H, COMPOSITE_FLOOR);
    assert!(worst < COMPOSITE_TOL, "worst relative error {worst:.3e}");
}

#[test]
fn css_block_with_context() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let block = CssBlock::new(&mut store, &mut r, "blk", 3, 2, true);
    let x_id = store.add("x", random_tensor::<f64>(&mut r, &[4, 4, 3]));
    let build = move |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let x = g.param(x_id)?;
        let y = block.forward(g, x)?;
        let sq = g.mul(y, y)?;
        g.mean(sq)
    };
    let worst = check_all_grads(&mut store, &build, COMPOSITE_H, COMPOSITE_FLOOR);
    assert!(worst < COMPOSITE_TOL, "worst relative error {worst:.3e}");
}

#[test]
fn cross_scale_interaction() {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let c = 2;
    let cim = Cim::new(&mut store, &mut r, "cim", c, 2);
    let s4 = store.add("s4", random_tensor::<f64>(&mut r, &[8, 8, c]));
    let s8 = store.add("s8", random_tensor::<f64>(&mut r, &[4, 4, 2 * c]));
    let s16 = store.add("s16", random_tensor::<f64>(&mut r, &[2, 2, 4 * c]));
    let build = move |g: &mut Graph<'_, f64>| -> Result<NodeId> {
        let pyramid = FeaturePyramid {
            s4: g.param(s4)?,
            s8: g.param(s8)?,
            s16: g.param(s16)?,
        };
        let out = cim.forward(g, &pyramid)?;
        let (m4, m8, m16) = (g.mean(out.s4)?, g.mean(out.s8)?, g.mean(out.s16)?);
        let sum = g.add(m4, m8)?;
        g.add(sum, m16)
    };
    let worst = check_all_grads(&mut store, &build, COMPOSITE_H, COMPOSITE_FLOOR);
    assert!(worst < COMPOSITE_TOL, "worst relative error {worst:.3e}");
}
