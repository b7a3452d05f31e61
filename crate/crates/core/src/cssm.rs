//! Context-aware selective-scan blocks over 2-D feature maps.
//!
//! A feature map is flattened into four 1-D sequences (row-major and
//! column-major, each forward and reversed), each sequence runs through its
//! own selective scan, and the results are scattered back and summed. The
//! optional local-context path extracts a multi-scale neighborhood map from
//! the block's inner features; its flattened form is added to each scan's
//! output-mixing sequence `C` as a query, and its projected form is added to
//! the merged scan output. With the context parameters at zero the block
//! degenerates exactly to its plain variant.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{MocError, Result};
use crate::nn::{Conv2d, DepthwiseConv2d, Graph, LayerNorm, Linear, NodeId, Pad, ParamStore, Scalar};
use crate::ssm::SelectiveSsm;

/// The four traversal orders used to serialize a 2-D map, as permutations of
/// row-major flat indices, paired with their inverses for scattering scan
/// results back into map order.
#[derive(Debug)]
pub struct ScanOrders {
    pub forward: [Rc<Vec<usize>>; 4],
    pub inverse: [Rc<Vec<usize>>; 4],
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl ScanOrders {
    pub fn new(h: usize, w: usize) -> Self {
        let l = h * w;
        let row_fwd: Vec<usize> = (0..l).collect();
        let row_bwd: Vec<usize> = (0..l).rev().collect();
        // Column-major traversal: position i sits at row i % h, column i / h.
        let col_fwd: Vec<usize> = (0..l).map(|i| (i % h) * w + i / h).collect();
        let col_bwd: Vec<usize> = col_fwd.iter().rev().copied().collect();
        let forward = [row_fwd, row_bwd, col_fwd, col_bwd].map(Rc::new);
        let inverse = [
            Rc::new(invert(&forward[0])),
            Rc::new(invert(&forward[1])),
            Rc::new(invert(&forward[2])),
            Rc::new(invert(&forward[3])),
        ];
        Self { forward, inverse }
    }
}

/// Multi-scale local neighborhood extractor.
///
/// Two 3x3 convolutions (dilation 1 and 2) project the inner features into
/// the scan's state dimension; their ReLU responses are summed into a
/// multi-scale map. Flattened, that map is the per-position context query;
/// projected back up by a 1x1 convolution it becomes the local feature added
/// to the merged scan output.
#[derive(Debug)]
pub struct LocalContextModule {
    conv_near: Conv2d,
    conv_far: Conv2d,
    to_feature: Conv2d,
}

/// Result of the local-context path for one block invocation.
#[derive(Debug)]
pub struct LocalContext {
    /// `[h*w, state_size]` query added to each scan's output mixing.
    pub query: NodeId,
    /// `[h, w, width]` feature added to the merged scan output.
    pub feature: NodeId,
}

impl LocalContextModule {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        state_size: usize,
    ) -> Self {
        let conv_near = Conv2d::new(store, rng, &format!("{name}.near"), 3, width, state_size, 1, 1, Pad::Same, true);
        let conv_far = Conv2d::new(store, rng, &format!("{name}.far"), 3, width, state_size, 1, 2, Pad::Same, true);
        let to_feature = Conv2d::new(store, rng, &format!("{name}.feature"), 1, state_size, width, 1, 1, Pad::Same, true);
        Self { conv_near, conv_far, to_feature }
    }

    pub fn compute<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<LocalContext> {
        let shape = g.shape(x).to_vec();
        let near = self.conv_near.forward(g, x)?;
        let near = g.relu(near)?;
        let far = self.conv_far.forward(g, x)?;
        let far = g.relu(far)?;
        let multi_scale = g.add(near, far)?;
        let state_size = *g.shape(multi_scale).last().unwrap();
        let query = g.reshape(multi_scale, &[shape[0] * shape[1], state_size])?;
        let feature = self.to_feature.forward(g, multi_scale)?;
        Ok(LocalContext { query, feature })
    }
}

/// Residual selective-scan block over `[h, w, channels]` maps.
///
/// Layout: normalize, expand to double width, mix locally with a depthwise
/// convolution, SiLU, run the four directional scans (with the context query
/// mixed into `C` when the context path is present), merge, add the local
/// feature, normalize, gate with a SiLU branch of the normalized input,
/// project back to `channels`, add the residual.
#[derive(Debug)]
pub struct CssBlock {
    channels: usize,
    norm_in: LayerNorm,
    in_proj: Linear,
    conv_local: DepthwiseConv2d,
    scans: [SelectiveSsm; 4],
    norm_mid: LayerNorm,
    gate_proj: Linear,
    out_proj: Linear,
    context: Option<LocalContextModule>,
}

impl CssBlock {
    /// `with_context` adds the local-context path. Context parameters are
    /// registered after everything else, so two blocks built from RNGs in
    /// the same state share every non-context parameter value.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        state_size: usize,
        with_context: bool,
    ) -> Self {
        let inner = channels * 2;
        let norm_in = LayerNorm::new(store, &format!("{name}.norm_in"), channels);
        let in_proj = Linear::new(store, rng, &format!("{name}.in_proj"), channels, inner, true);
        let conv_local = DepthwiseConv2d::new(store, rng, &format!("{name}.conv_local"), 3, inner, true);
        let scans = std::array::from_fn(|i| {
            SelectiveSsm::new(store, rng, &format!("{name}.scan{i}"), inner, state_size, false)
        });
        let norm_mid = LayerNorm::new(store, &format!("{name}.norm_mid"), inner);
        let gate_proj = Linear::new(store, rng, &format!("{name}.gate_proj"), channels, inner, true);
        let out_proj = Linear::new(store, rng, &format!("{name}.out_proj"), inner, channels, true);
        let context = with_context
            .then(|| LocalContextModule::new(store, rng, &format!("{name}.context"), inner, state_size));
        Self { channels, norm_in, in_proj, conv_local, scans, norm_mid, gate_proj, out_proj, context }
    }

    pub fn has_context(&self) -> bool {
        self.context.is_some()
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(MocError::Shape(format!(
                "scan block expects [h, w, {}], got {shape:?}",
                self.channels
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        let residual = x;
        let xn = self.norm_in.forward(g, x)?;
        let inner = self.in_proj.forward(g, xn)?;
        let inner = self.conv_local.forward(g, inner)?;
        let activated = g.silu(inner)?;

        let context = match &self.context {
            Some(module) => Some(module.compute(g, activated)?),
            None => None,
        };

        let width = self.channels * 2;
        let flat = g.reshape(activated, &[h * w, width])?;
        let orders = ScanOrders::new(h, w);
        let mut merged: Option<NodeId> = None;
        for (i, scan) in self.scans.iter().enumerate() {
            let seq = g.gather_rows(flat, &orders.forward[i])?;
            let mut c_mix = scan.project_c(g, seq)?;
            if let Some(ctx) = &context {
                let query = g.gather_rows(ctx.query, &orders.forward[i])?;
                c_mix = g.add(c_mix, query)?;
            }
            let y = scan.forward_with_c(g, seq, c_mix)?;
            let back = g.gather_rows(y, &orders.inverse[i])?;
            merged = Some(match merged {
                Some(acc) => g.add(acc, back)?,
                None => back,
            });
        }
        let mut merged = g.reshape(merged.expect("four scan directions"), &[h, w, width])?;
        if let Some(ctx) = &context {
            merged = g.add(merged, ctx.feature)?;
        }
        let normed = self.norm_mid.forward(g, merged)?;
        let gate = self.gate_proj.forward(g, xn)?;
        let gate = g.silu(gate)?;
        let gated = g.mul(normed, gate)?;
        let out = self.out_proj.forward(g, gated)?;
        g.add(out, residual)
    }
}

/// Zeroes every parameter whose name starts with `prefix` (used by tests to
/// switch off a sub-module in place).
pub fn zero_params_with_prefix<F: Scalar>(store: &mut ParamStore<F>, prefix: &str) {
    let targets: Vec<_> = store
        .iter()
        .filter(|(_, name, _)| name.starts_with(prefix))
        .map(|(id, _, value)| (id, value.shape().to_vec()))
        .collect();
    for (id, shape) in targets {
        store.set(id, crate::nn::Tensor::zeros(&shape)).expect("shape unchanged");
    }
}
