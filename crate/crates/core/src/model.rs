//! `toyseg-v1`: a small residual encoder-decoder for 4-class segmentation.
//!
//! ```text
//! stem    3×3  3 → w0, relu                    @ H
//! block1  residual w0                          @ H      tap 1
//! down1   3×3 stride 2  w0 → w1, relu          @ H/2
//! block2  residual w1                          @ H/2    tap 2
//! down2   3×3 stride 2  w1 → w2, relu          @ H/4
//! block3  residual w2                          @ H/4    tap 3
//! proj    1×1  w2 → w3, relu                   @ H/4
//! block4  residual w3                          @ H/4    tap 4
//! head    relu, 1×1 w3 → 4, bilinear ×4        @ H
//! ```
//!
//! The head applies its 1×1 convolution before upsampling. Both maps are
//! linear per pixel and bilinear weights sum to one, so the order does not
//! change the result but the convolution runs on 16× fewer pixels.
//!
//! StyleLess layers, once inserted, sit directly after each tap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::filters::{apply_filter, FilterConfig};
use crate::nn::{BoundConv, BoundResidual, ConvLayer, GroupSelector, ParamGroup, ParamMut, ParamRef, ResidualBlock};
use crate::style::{FeatureMap, LayerId};
use crate::styleless::{BoundStyleLess, StyleLessLayer};
use crate::tensor::{Scalar, Tensor};

pub const ARCH_ID: &str = "toyseg-v1";
pub const NUM_CLASSES: usize = 4;
pub const INPUT_CHANNELS: usize = 3;
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 32, 64];
/// Total downsampling between input and the last stage.
pub const OUTPUT_STRIDE: usize = 4;

/// Layer ids of the four feature taps.
pub const TAP_LAYERS: [LayerId; 4] = [1, 2, 3, 4];

fn layer_seed(seed: u64, slot: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(slot.wrapping_mul(0x1000_0000_01B3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredNetwork<T = f32> {
    widths: [usize; 4],
    stem: ConvLayer<T>,
    blocks: Vec<ResidualBlock<T>>,
    /// Layers feeding blocks 2..4.
    transitions: Vec<ConvLayer<T>>,
    head: ConvLayer<T>,
    styleless: Vec<StyleLessLayer<T>>,
}

/// Filter applied to the given taps during an inference forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterHook {
    pub config: FilterConfig,
    pub layers: Vec<LayerId>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub filter: Option<FilterHook>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(4, H, W)` class scores.
    pub logits: Var,
    /// Residual-block outputs, before any StyleLess layer or filter.
    pub taps: Vec<Var>,
    /// `(G_in, G_out)` for every StyleLess layer, in tap order.
    pub gram_pairs: Vec<(Var, Var)>,
}

/// A network whose parameters are registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    stem: BoundConv,
    blocks: Vec<BoundResidual>,
    transitions: Vec<BoundConv>,
    head: BoundConv,
    styleless: Vec<(LayerId, BoundStyleLess)>,
    named: Vec<(String, Var)>,
}

impl<T: Scalar> LayeredNetwork<T> {
    pub fn new(seed: u64) -> Result<Self> {
        Self::with_widths(DEFAULT_WIDTHS, seed)
    }

    pub fn with_widths(widths: [usize; 4], seed: u64) -> Result<Self> {
        let s = |slot| layer_seed(seed, slot);
        let [w0, w1, w2, w3] = widths;
        Ok(Self {
            widths,
            stem: ConvLayer::initialized(INPUT_CHANNELS, w0, 3, 1, s(0))?,
            blocks: vec![
                ResidualBlock::initialized(w0, s(10))?,
                ResidualBlock::initialized(w1, s(20))?,
                ResidualBlock::initialized(w2, s(30))?,
                ResidualBlock::initialized(w3, s(40))?,
            ],
            transitions: vec![
                ConvLayer::initialized(w0, w1, 3, 2, s(15))?,
                ConvLayer::initialized(w1, w2, 3, 2, s(25))?,
                ConvLayer::initialized(w2, w3, 1, 1, s(35))?,
            ],
            head: ConvLayer::initialized(w3, NUM_CLASSES, 1, 1, s(50))?,
            styleless: Vec::new(),
        })
    }

    /// Same layout with every parameter zero.
    pub fn zeros(widths: [usize; 4]) -> Result<Self> {
        let mut net = Self::with_widths(widths, 0)?;
        for p in net.parameters_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(net)
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn has_styleless(&self) -> bool {
        !self.styleless.is_empty()
    }

    pub fn styleless_layers(&self) -> &[StyleLessLayer<T>] {
        &self.styleless
    }

    pub fn head(&self) -> &ConvLayer<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ConvLayer<T> {
        &mut self.head
    }

    /// Append a StyleLess layer after every residual block.
    pub fn insert_styleless(&mut self, seed: u64) -> Result<()> {
        if self.has_styleless() {
            return Err(Error::AlreadyInserted);
        }
        self.styleless = TAP_LAYERS
            .iter()
            .zip(self.widths)
            .map(|(&layer, c)| StyleLessLayer::new(c, layer, layer_seed(seed, 100 + layer as u64)))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Insertion map: residual block index → layer id of the StyleLess layer.
    pub fn insertion_map(&self) -> BTreeMap<usize, LayerId> {
        self.styleless.iter().map(|l| (l.insertion - 1, l.insertion)).collect()
    }

    pub fn parameters(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        let bb = ParamGroup::Backbone;
        self.stem.visit("stem", bb, &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                self.transitions[i - 1].visit(&format!("down{i}"), bb, &mut out);
            }
            block.visit(&format!("block{}", i + 1), bb, &mut out);
        }
        self.head.visit("head", bb, &mut out);
        for layer in &self.styleless {
            layer.visit(&format!("styleless{}", layer.insertion), &mut out);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        let bb = ParamGroup::Backbone;
        self.stem.visit_mut("stem", bb, &mut out);
        let mut transitions = self.transitions.iter_mut();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            if i > 0 {
                transitions.next().expect("transition").visit_mut(&format!("down{i}"), bb, &mut out);
            }
            block.visit_mut(&format!("block{}", i + 1), bb, &mut out);
        }
        self.head.visit_mut("head", bb, &mut out);
        for layer in &mut self.styleless {
            let name = format!("styleless{}", layer.insertion);
            layer.visit_mut(&name, &mut out);
        }
        out
    }

    pub fn count_parameters(&self, group: GroupSelector) -> usize {
        self.parameters()
            .iter()
            .filter(|p| group.matches(p.group))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Register every parameter on `tape`; `trainable` controls gradient flow.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundNetwork {
        let mut named = Vec::new();
        let mut conv = |layer: &ConvLayer<T>, name: &str, tape: &mut Tape<T>| {
            let b = layer.bind(tape, trainable);
            named.push((format!("{name}.kernel"), b.kernel));
            named.push((format!("{name}.bias"), b.bias));
            b
        };
        let stem = conv(&self.stem, "stem", tape);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                transitions.push(conv(&self.transitions[i - 1], &format!("down{i}"), tape));
            }
            let name = format!("block{}", i + 1);
            blocks.push(BoundResidual {
                conv1: conv(&block.conv1, &format!("{name}.conv1"), tape),
                conv2: conv(&block.conv2, &format!("{name}.conv2"), tape),
            });
        }
        let head = conv(&self.head, "head", tape);
        let styleless = self
            .styleless
            .iter()
            .map(|l| {
                let name = format!("styleless{}", l.insertion);
                let bound = BoundStyleLess {
                    entry: conv(&l.entry, &format!("{name}.entry"), tape),
                    mid: conv(&l.mid, &format!("{name}.mid"), tape),
                    exit: conv(&l.exit, &format!("{name}.exit"), tape),
                };
                (l.insertion, bound)
            })
            .collect();
        BoundNetwork { stem, blocks, transitions, head, styleless, named }
    }

    /// Inference forward pass; returns `(logits, taps)` as plain tensors.
    pub fn forward_values(&self, x: &Tensor<T>, opts: &ForwardOptions) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&mut tape, xv, opts)?;
        let taps = out.taps.iter().map(|&t| tape.value(t).clone()).collect();
        Ok((tape.value(out.logits).clone(), taps))
    }

    pub fn logits(&self, x: &Tensor<T>, opts: &ForwardOptions) -> Result<Tensor<T>> {
        Ok(self.forward_values(x, opts)?.0)
    }

    /// Feature maps at every tap.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<FeatureMap<T>>> {
        let (_, taps) = self.forward_values(x, &ForwardOptions::default())?;
        taps.into_iter()
            .zip(TAP_LAYERS)
            .map(|(t, layer)| FeatureMap::new(layer, t))
            .collect()
    }

    /// Per-pixel argmax class ids.
    pub fn predict(&self, x: &Tensor<T>, opts: &ForwardOptions) -> Result<Tensor<u8>> {
        argmax_classes(&self.logits(x, opts)?)
    }
}

/// Class with the highest score per pixel; ties go to the lowest id.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<u8>> {
    let (c, h, w) = logits.dims3()?;
    let n = h * w;
    let data = logits.data();
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if data[k * n + p] > data[best * n + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Tensor::new([h, w], labels)
}

impl BoundNetwork {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let shape = tape.value(x).shape().to_vec();
        match shape[..] {
            [INPUT_CHANNELS, h, w] if h >= OUTPUT_STRIDE && w >= OUTPUT_STRIDE && h % OUTPUT_STRIDE == 0 && w % OUTPUT_STRIDE == 0 => {}
            _ => return Err(Error::invalid_shape(&shape, "expected (3, H, W) with H and W multiples of 4")),
        }
        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut gram_pairs = Vec::new();
        let h = self.stem.forward(tape, x)?;
        let mut h = tape.relu(h);
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = TAP_LAYERS[i];
            if i > 0 {
                let t = self.transitions[i - 1].forward(tape, h)?;
                h = tape.relu(t);
            }
            h = block.forward(tape, h)?;
            taps.push(h);
            if let Some((_, sl)) = self.styleless.iter().find(|(l, _)| *l == layer) {
                let out = sl.forward(tape, h)?;
                gram_pairs.push((out.gram_in, out.gram_out));
                h = out.features;
            }
            if let Some(hook) = opts.filter.as_ref().filter(|f| f.layers.contains(&layer)) {
                let fm = FeatureMap::new(layer, tape.value(h).clone())?;
                let mut cfg = hook.config;
                cfg.seed = layer_seed(cfg.seed, layer as u64);
                h = tape.constant(apply_filter(&fm, &cfg)?.values);
            }
        }
        let h = tape.relu(h);
        let logits = self.head.forward(tape, h)?;
        let logits = tape.upsample_bilinear(logits, OUTPUT_STRIDE)?;
        Ok(ForwardOutput { logits, taps, gram_pairs })
    }

    /// Parameter handles with the names used by [`LayeredNetwork::parameters`].
    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.named
    }
}

/// Last-stage width whose backbone count is closest to `target`, keeping the
/// other widths at their defaults.
pub fn widened_widths(target: usize) -> [usize; 4] {
    let [w0, w1, w2, w3] = DEFAULT_WIDTHS;
    (w3..=4 * w3)
        .map(|w| [w0, w1, w2, w])
        .min_by_key(|&widths| {
            let n = backbone_parameter_count(widths);
            n.abs_diff(target)
        })
        .expect("non-empty search range")
}

/// Closed-form backbone parameter count for the given widths.
pub fn backbone_parameter_count(widths: [usize; 4]) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let [w0, w1, w2, w3] = widths;
    conv(INPUT_CHANNELS, w0, 3)
        + widths.iter().map(|&w| 2 * conv(w, w, 3)).sum::<usize>()
        + conv(w0, w1, 3)
        + conv(w1, w2, 3)
        + conv(w2, w3, 1)
        + conv(w3, NUM_CLASSES, 1)
}
