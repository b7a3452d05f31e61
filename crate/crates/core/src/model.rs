//! Full counting model: backbone pyramid, cross-scale fusion, merge, head,
//! and per-category density prediction.
//!
//! Input is an `[h, w, 3]` image with both extents divisible by 16. A 4x4
//! non-overlapping patch embedding produces the stride-4 map; three stages of
//! plain scan blocks with 2x2 downsampling between them yield the /4, /8 and
//! /16 levels. Depending on the variant, the cross-scale module refines the
//! pyramid, then all levels are projected to the base width, upsampled to
//! stride 4 and summed. Two head blocks (context-aware in the full variant)
//! and a small convolutional predictor emit one non-negative density map per
//! category at stride 4, so the sum over a category's map estimates that
//! category's object count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cim::{Cim, FeaturePyramid};
use crate::cssm::CssBlock;
use crate::error::{MocError, Result};
use crate::nn::{sc, AdamW, Conv2d, Graph, NodeId, Pad, ParamStore, Scalar, Tensor};

/// Output maps sit at 1/4 of the input resolution.
pub const OUTPUT_STRIDE: usize = 4;

/// Cold-start scale for the final readout weights. Density targets are
/// sparse and small, so a readout at full Kaiming scale starts with outputs
/// orders of magnitude above any target; the loss then drives the whole map
/// through zero, where the final rectifier cuts every gradient and training
/// stalls on an all-zero output.
const READOUT_WEIGHT_SCALE: f64 = 0.01;

/// Initial bias of the final readout, slightly positive so every output
/// cell starts on the live side of the rectifier.
const READOUT_BIAS: f64 = 0.02;
/// Input extents must be divisible by this (three halvings after the patch
/// embedding).
pub const INPUT_DIVISOR: usize = 16;

/// Which architectural pieces are active.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Backbone + merge + plain head only.
    Baseline,
    /// Adds the cross-scale fusion module.
    Cim,
    /// Adds cross-scale fusion and the context path in the head blocks.
    Full,
}

impl Ablation {
    pub fn uses_cim(self) -> bool {
        !matches!(self, Ablation::Baseline)
    }

    pub fn uses_context_head(self) -> bool {
        matches!(self, Ablation::Full)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Ablation::Baseline => "baseline",
            Ablation::Cim => "cim",
            Ablation::Full => "full",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Ablation {
    type Err = MocError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Ablation::Baseline),
            "cim" => Ok(Ablation::Cim),
            "full" => Ok(Ablation::Full),
            other => Err(MocError::Argument(format!(
                "unknown variant {other:?}; expected baseline, cim or full"
            ))),
        }
    }
}

fn default_base_channels() -> usize {
    32
}
fn default_state_size() -> usize {
    16
}
fn default_categories() -> usize {
    6
}
fn default_depths() -> [usize; 3] {
    [2, 2, 2]
}
fn default_ablation() -> Ablation {
    Ablation::Full
}

/// Hyperparameters that determine the parameter set. Serialized into
/// checkpoints so a loaded model rebuilds the exact same architecture.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the stride-4 level; deeper levels double it twice.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// State dimension of every scan.
    #[serde(default = "default_state_size")]
    pub state_size: usize,
    /// Number of object categories (output density maps).
    #[serde(default = "default_categories")]
    pub categories: usize,
    /// Scan blocks per backbone stage.
    #[serde(default = "default_depths")]
    pub depths: [usize; 3],
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: default_base_channels(),
            state_size: default_state_size(),
            categories: default_categories(),
            depths: default_depths(),
            ablation: default_ablation(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.state_size == 0 || self.categories == 0 {
            return Err(MocError::Config(
                "base_channels, state_size and categories must all be positive".into(),
            ));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(MocError::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }

    /// Expected `[h, w, channels]` of the three backbone levels for a given
    /// input extent.
    pub fn pyramid_shapes(&self, h: usize, w: usize) -> Result<[[usize; 3]; 3]> {
        check_input_extent(h, w)?;
        let c = self.base_channels;
        Ok([
            [h / 4, w / 4, c],
            [h / 8, w / 8, 2 * c],
            [h / 16, w / 16, 4 * c],
        ])
    }
}

fn check_input_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % INPUT_DIVISOR != 0 || w % INPUT_DIVISOR != 0 {
        return Err(MocError::Argument(format!(
            "input extent {h}x{w} must be a positive multiple of {INPUT_DIVISOR} in both dimensions"
        )));
    }
    Ok(())
}

#[derive(Debug)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    store: ParamStore<F>,
    patch_embed: Conv2d,
    stages: [Vec<CssBlock>; 3],
    downsamples: [Conv2d; 2],
    cim: Option<Cim>,
    merge_proj: [Conv2d; 3],
    head: Vec<CssBlock>,
    predict_mix: [Conv2d; 2],
    predict_out: Conv2d,
}

impl<F: Scalar> Model<F> {
    /// Builds a freshly initialized model; `seed` fixes every random draw.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let n = config.state_size;

        let patch_embed =
            Conv2d::new(&mut store, &mut rng, "patch_embed", 4, 3, c, 4, 1, Pad::Valid, true);

        let widths = [c, 2 * c, 4 * c];
        let mut stages: [Vec<CssBlock>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (s, stage) in stages.iter_mut().enumerate() {
            for b in 0..config.depths[s] {
                stage.push(CssBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("stage{s}.block{b}"),
                    widths[s],
                    n,
                    false,
                ));
            }
        }
        let downsamples = std::array::from_fn(|i| {
            Conv2d::new(
                &mut store,
                &mut rng,
                &format!("down{i}"),
                2,
                widths[i],
                widths[i + 1],
                2,
                1,
                Pad::Valid,
                true,
            )
        });

        let cim = config
            .ablation
            .uses_cim()
            .then(|| Cim::new(&mut store, &mut rng, "cim", c, n));

        let merge_proj = std::array::from_fn(|i| {
            Conv2d::new(&mut store, &mut rng, &format!("merge{i}"), 1, widths[i], c, 1, 1, Pad::Same, true)
        });

        let head = (0..2)
            .map(|b| {
                CssBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("head.block{b}"),
                    c,
                    n,
                    config.ablation.uses_context_head(),
                )
            })
            .collect();

        let predict_mix = std::array::from_fn(|i| {
            Conv2d::new(&mut store, &mut rng, &format!("predict{i}"), 3, c, c, 1, 1, Pad::Same, true)
        });
        let predict_out = Conv2d::new(
            &mut store,
            &mut rng,
            "predict_out",
            1,
            c,
            config.categories,
            1,
            1,
            Pad::Same,
            true,
        );
        let out_weight = store.by_name("predict_out.weight").expect("just registered");
        for v in store.value_mut(out_weight).data_mut() {
            *v = *v * sc::<F>(READOUT_WEIGHT_SCALE);
        }
        let out_bias = store.by_name("predict_out.bias").expect("just registered");
        for v in store.value_mut(out_bias).data_mut() {
            *v = sc(READOUT_BIAS);
        }

        Ok(Self {
            config,
            store,
            patch_embed,
            stages,
            downsamples,
            cim,
            merge_proj,
            head,
            predict_mix,
            predict_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.store.total_params()
    }

    /// Backbone only: image to three-level pyramid.
    pub fn backbone<'g>(&self, g: &mut Graph<'g, F>, image: NodeId) -> Result<FeaturePyramid> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(MocError::Shape(format!("expected an [h, w, 3] image, got {shape:?}")));
        }
        check_input_extent(shape[0], shape[1])?;
        let mut x = self.patch_embed.forward(g, image)?;
        for block in &self.stages[0] {
            x = block.forward(g, x)?;
        }
        let s4 = x;
        let mut x = self.downsamples[0].forward(g, s4)?;
        for block in &self.stages[1] {
            x = block.forward(g, x)?;
        }
        let s8 = x;
        let mut x = self.downsamples[1].forward(g, s8)?;
        for block in &self.stages[2] {
            x = block.forward(g, x)?;
        }
        Ok(FeaturePyramid { s4, s8, s16: x })
    }

    /// Full forward pass: image to `[h/4, w/4, categories]` density maps.
    pub fn forward<'g>(&self, g: &mut Graph<'g, F>, image: NodeId) -> Result<NodeId> {
        let pyramid = self.backbone(g, image)?;
        let pyramid = match &self.cim {
            Some(cim) => cim.forward(g, &pyramid)?,
            None => pyramid,
        };

        // Merge: every level to base width at stride 4, summed.
        let m4 = self.merge_proj[0].forward(g, pyramid.s4)?;
        let m8 = self.merge_proj[1].forward(g, pyramid.s8)?;
        let m8 = g.upsample_bilinear(m8, 2)?;
        let m16 = self.merge_proj[2].forward(g, pyramid.s16)?;
        let m16 = g.upsample_bilinear(m16, 4)?;
        let mut x = g.add(m4, m8)?;
        x = g.add(x, m16)?;

        for block in &self.head {
            x = block.forward(g, x)?;
        }

        for conv in &self.predict_mix {
            x = conv.forward(g, x)?;
            x = g.relu(x)?;
        }
        let x = self.predict_out.forward(g, x)?;
        g.relu(x)
    }

    /// Inference: density maps for one image, no gradients retained.
    pub fn predict(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::eval(&self.store);
        let input = g.constant(image.clone())?;
        let out = self.forward(&mut g, input)?;
        Ok(g.value(out).clone())
    }

    /// Mean squared error between a predicted map and a same-shape target.
    pub fn density_loss<'g>(&self, g: &mut Graph<'g, F>, prediction: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = g.sub(prediction, target)?;
        let sq = g.mul(diff, diff)?;
        g.mean(sq)
    }

    /// One optimization step over a batch: forward every image in a single
    /// graph (sharing parameter nodes), average the per-image losses,
    /// backpropagate, and update. Returns the batch loss.
    pub fn train_step(
        &mut self,
        optimizer: &mut AdamW<F>,
        images: &[Tensor<F>],
        targets: &[Tensor<F>],
    ) -> Result<f64> {
        if images.is_empty() || images.len() != targets.len() {
            return Err(MocError::Argument(format!(
                "batch needs equal non-zero image/target counts, got {} and {}",
                images.len(),
                targets.len()
            )));
        }
        let (loss_value, grads) = {
            let mut g = Graph::train(&self.store);
            let mut total: Option<NodeId> = None;
            for (image, target) in images.iter().zip(targets) {
                let input = g.constant(image.clone())?;
                let pred = self.forward(&mut g, input)?;
                if g.shape(pred) != target.shape() {
                    return Err(MocError::Shape(format!(
                        "target shape {:?} does not match prediction {:?}",
                        target.shape(),
                        g.shape(pred)
                    )));
                }
                let target = g.constant(target.clone())?;
                let loss = self.density_loss(&mut g, pred, target)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            let total = total.expect("non-empty batch");
            let mean = g.mul_scalar(total, F::one() / sc::<F>(images.len() as f64))?;
            let value = g.value(mean).data()[0].to_f64().unwrap();
            let grads = g.backward(mean)?;
            (value, grads)
        };
        optimizer.step(&mut self.store, &grads)?;
        Ok(loss_value)
    }
}
