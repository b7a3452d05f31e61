//! Cross-scale fusion of the backbone's three-level feature pyramid.
//!
//! The three levels (strides 4/8/16 with widths `c`, `2c`, `4c`) are pooled
//! to the coarsest grid, concatenated, compressed to `2c`, mixed by one plain
//! scan block, expanded back to the concatenated width, split per level, and
//! upsampled to each level's own grid. Each level then blends its original
//! feature `f` with the fused candidate `u` through a learned per-position,
//! per-channel gate: `out = g (.) f + (1 - g) (.) u`, a convex combination
//! that returns `f` exactly when the gate saturates at one.

use rand_chacha::ChaCha8Rng;

use crate::cssm::CssBlock;
use crate::error::{MocError, Result};
use crate::nn::{Conv2d, Graph, NodeId, Pad, ParamStore, Scalar, Tensor};

/// Stride-4 / stride-8 / stride-16 feature maps with widths `c`/`2c`/`4c`.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub s4: NodeId,
    pub s8: NodeId,
    pub s16: NodeId,
}

#[derive(Debug)]
pub struct Cim {
    base_channels: usize,
    align: Conv2d,
    fuse: CssBlock,
    expand: Conv2d,
    gate_convs: [Conv2d; 3],
}

impl Cim {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        base_channels: usize,
        state_size: usize,
    ) -> Self {
        let c = base_channels;
        let concat_width = 7 * c; // c + 2c + 4c
        let align = Conv2d::new(store, rng, &format!("{name}.align"), 1, concat_width, 2 * c, 1, 1, Pad::Same, true);
        let fuse = CssBlock::new(store, rng, &format!("{name}.fuse"), 2 * c, state_size, false);
        let expand = Conv2d::new(store, rng, &format!("{name}.expand"), 1, 2 * c, concat_width, 1, 1, Pad::Same, true);
        let widths = [c, 2 * c, 4 * c];
        let gate_convs = std::array::from_fn(|i| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}.gate{i}"),
                1,
                2 * widths[i],
                widths[i],
                1,
                1,
                Pad::Same,
                true,
            )
        });
        Self { base_channels: c, align, fuse, expand, gate_convs }
    }

    fn check_pyramid<F: Scalar>(&self, g: &Graph<'_, F>, p: &FeaturePyramid) -> Result<(usize, usize)> {
        let c = self.base_channels;
        let s4 = g.shape(p.s4).to_vec();
        let s8 = g.shape(p.s8).to_vec();
        let s16 = g.shape(p.s16).to_vec();
        let ok = s4.len() == 3
            && s8.len() == 3
            && s16.len() == 3
            && s4[2] == c
            && s8[2] == 2 * c
            && s16[2] == 4 * c
            && s4[0] % 4 == 0
            && s4[1] % 4 == 0
            && s8[0] == s4[0] / 2
            && s8[1] == s4[1] / 2
            && s16[0] == s4[0] / 4
            && s16[1] == s4[1] / 4;
        if !ok {
            return Err(MocError::Shape(format!(
                "pyramid levels do not form a /4 /8 /16 hierarchy over width {c}: {s4:?}, {s8:?}, {s16:?}"
            )));
        }
        Ok((s4[0], s4[1]))
    }

    /// Fuses the pyramid and returns refined features with unchanged shapes.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, p: &FeaturePyramid) -> Result<FeaturePyramid> {
        self.check_pyramid(g, p)?;
        let c = self.base_channels;

        // Align: pool the finer levels onto the coarsest grid and compress.
        let p4 = g.avgpool2d(p.s4, 4)?;
        let p8 = g.avgpool2d(p.s8, 2)?;
        let stacked = g.concat_channels(&[p4, p8, p.s16])?;
        let aligned = self.align.forward(g, stacked)?;

        // Fuse on the coarse grid.
        let fused = self.fuse.forward(g, aligned)?;
        let expanded = self.expand.forward(g, fused)?;

        // Distribute: split per level and upsample to each level's grid.
        let u4 = g.slice_channels(expanded, 0, c)?;
        let u8 = g.slice_channels(expanded, c, 3 * c)?;
        let u16 = g.slice_channels(expanded, 3 * c, 7 * c)?;
        let u4 = g.upsample_bilinear(u4, 4)?;
        let u8 = g.upsample_bilinear(u8, 2)?;

        Ok(FeaturePyramid {
            s4: self.blend(g, 0, p.s4, u4)?,
            s8: self.blend(g, 1, p.s8, u8)?,
            s16: self.blend(g, 2, p.s16, u16)?,
        })
    }

    fn blend<F: Scalar>(&self, g: &mut Graph<'_, F>, level: usize, f: NodeId, u: NodeId) -> Result<NodeId> {
        let stacked = g.concat_channels(&[f, u])?;
        let pre = self.gate_convs[level].forward(g, stacked)?;
        let gate = g.sigmoid(pre)?;
        gated_blend(g, gate, f, u)
    }
}

/// Convex per-element blend `g (.) f + (1 - g) (.) u`, written literally so
/// a saturated gate of one returns `f` untouched.
pub fn gated_blend<F: Scalar>(g: &mut Graph<'_, F>, gate: NodeId, f: NodeId, u: NodeId) -> Result<NodeId> {
    let ones = g.constant(Tensor::full(g.shape(gate), F::one()))?;
    let inverse = g.sub(ones, gate)?;
    let keep = g.mul(gate, f)?;
    let mix = g.mul(inverse, u)?;
    g.add(keep, mix)
}
