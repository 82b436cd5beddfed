//! Gram-matrix style statistics and the losses built on them.
//!
//! A feature map is stored channel-major as `(c, h, w)`. Viewed as the
//! `(h·w) × c` matrix `F`, its normalized Gram matrix is
//! `G = Fᵀ F / (h·w·c)`, a `c × c` summary of channel co-activation that
//! ignores spatial layout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{LayeredNetwork, TAP_LAYERS};
use crate::tensor::{Scalar, Tensor};

/// Index of a feature tap (a residual-block output) in the network.
pub type LayerId = usize;

/// Gram-loss layers whose `max(G_in)` is at or below this contribute nothing.
pub const GRAM_LOSS_MAX_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub layer: LayerId,
    /// `(c, h, w)`
    pub values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(layer: LayerId, values: Tensor<T>) -> Result<Self> {
        let (c, h, w) = values.dims3()?;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid_shape(values.shape(), "feature map extents must be >= 1"));
        }
        Ok(Self { layer, values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T = f32> {
    pub layer: LayerId,
    /// `(c, c)`
    pub values: Tensor<T>,
}

impl<T: Scalar> GramMatrix<T> {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values.data()[i * self.channels() + j]
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.channels()).map(|i| self.get(i, i)).collect()
    }
}

/// Flat indices `i·c + j` of a square matrix ordered by descending value;
/// equal values keep `(row, col)` order.
pub fn ranked_entries<T: Scalar>(gram: &Tensor<T>) -> Result<Vec<usize>> {
    let (c, c2) = gram.dims2()?;
    if c != c2 {
        return Err(Error::invalid_shape(gram.shape(), "Gram matrix must be square"));
    }
    let g = gram.data();
    let mut order: Vec<usize> = (0..c * c).collect();
    order.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).unwrap_or(std::cmp::Ordering::Equal));
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramEntry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Per-layer Gram statistics as written by `gram-analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSummary {
    pub layer: LayerId,
    pub channels: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub diagonal: Vec<f64>,
    pub top: Vec<GramEntry>,
}

impl<T: Scalar> GramMatrix<T> {
    pub fn summary(&self, top_k: usize) -> Result<GramSummary> {
        let c = self.channels();
        let v = self.values.to_f64_vec();
        let top = ranked_entries(&self.values)?
            .into_iter()
            .take(top_k)
            .map(|i| GramEntry { row: i / c, col: i % c, value: v[i] })
            .collect();
        Ok(GramSummary {
            layer: self.layer,
            channels: c,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            diagonal: (0..c).map(|i| v[i * c + i]).collect(),
            top,
        })
    }
}

/// Normalized Gram matrix of a `(c, h, w)` tensor, outside any tape.
pub fn gram_of<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = features.dims3()?;
    let n = h * w;
    let mut g = vec![T::zero(); c * c];
    let scale = T::one() / T::from_usize(n * c).unwrap();
    // G = A Aᵀ · scale with A = features viewed as (c, h·w).
    T::gemm(c, n, c, scale, features.data(), n as isize, 1, features.data(), 1, n as isize, T::zero(), &mut g, c as isize, 1);
    Tensor::new([c, c], g)
}

pub fn gram_matrix<T: Scalar>(features: &FeatureMap<T>) -> Result<GramMatrix<T>> {
    Ok(GramMatrix {
        layer: features.layer,
        values: gram_of(&features.values)?,
    })
}

/// Differentiable normalized Gram matrix of a `(c, h, w)` var.
pub fn gram<T: Scalar>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    let (c, h, w) = tape.value(features).dims3()?;
    let a = tape.reshape(features, &[c, h * w])?;
    let at = tape.transpose(a)?;
    let g = tape.matmul(a, at)?;
    Ok(tape.scale(g, T::one() / T::from_usize(h * w * c).unwrap()))
}

fn check_layer_sets<T>(a: &BTreeMap<LayerId, T>, b: &BTreeMap<LayerId, T>) -> Result<()> {
    if a.keys().ne(b.keys()) {
        return Err(Error::LayerMismatch(format!(
            "{:?} vs {:?}",
            a.keys().collect::<Vec<_>>(),
            b.keys().collect::<Vec<_>>()
        )));
    }
    if a.is_empty() {
        return Err(Error::LayerMismatch("no layers selected".into()));
    }
    Ok(())
}

/// `Σ_l ‖F̂ − F‖²_F / (h·w·c)` over matching layers.
pub fn content_loss<T: Scalar>(
    tape: &mut Tape<T>,
    f_hat: &BTreeMap<LayerId, Var>,
    f: &BTreeMap<LayerId, Var>,
) -> Result<Var> {
    check_layer_sets(f_hat, f)?;
    let mut terms = Vec::with_capacity(f.len());
    for (layer, &a) in f_hat {
        let b = f[layer];
        let numel = tape.value(a).numel();
        let d = tape.sub(a, b)?;
        let sq = tape.frobenius_norm_squared(d);
        terms.push(tape.scale(sq, T::one() / T::from_usize(numel).unwrap()));
    }
    sum_terms(tape, &terms)
}

/// `Σ_l ‖Ĝ − G_style‖²_F` where both sides are feature maps; spatial sizes
/// may differ but channel counts must match per layer.
pub fn style_loss<T: Scalar>(
    tape: &mut Tape<T>,
    f_hat: &BTreeMap<LayerId, Var>,
    f_style: &BTreeMap<LayerId, Var>,
) -> Result<Var> {
    check_layer_sets(f_hat, f_style)?;
    let mut grams = BTreeMap::new();
    let mut style_grams = BTreeMap::new();
    for (layer, &a) in f_hat {
        let b = f_style[layer];
        let (ca, cb) = (tape.value(a).dims3()?.0, tape.value(b).dims3()?.0);
        if ca != cb {
            return Err(Error::ChannelMismatch { expected: cb, got: ca });
        }
        grams.insert(*layer, gram(tape, a)?);
        style_grams.insert(*layer, gram(tape, b)?);
    }
    style_loss_from_grams(tape, &grams, &style_grams)
}

/// [`style_loss`] on precomputed Gram matrices.
pub fn style_loss_from_grams<T: Scalar>(
    tape: &mut Tape<T>,
    g_hat: &BTreeMap<LayerId, Var>,
    g_style: &BTreeMap<LayerId, Var>,
) -> Result<Var> {
    check_layer_sets(g_hat, g_style)?;
    let mut terms = Vec::with_capacity(g_hat.len());
    for (layer, &a) in g_hat {
        let b = g_style[layer];
        let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
        if sa != sb {
            return Err(Error::ChannelMismatch { expected: sb[0], got: sa[0] });
        }
        let d = tape.sub(a, b)?;
        terms.push(tape.frobenius_norm_squared(d));
    }
    sum_terms(tape, &terms)
}

fn sum_terms<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Gram loss over StyleLess layers:
///
/// ```text
/// 1 - (1/L) Σ_l mean(G_in − G_out) / max(G_in)
/// ```
///
/// `mean` averages all c² entries and `max` is the largest entry. Layers whose
/// `max(G_in)` does not exceed [`GRAM_LOSS_MAX_FLOOR`] add 0 to the sum (but
/// still count in `L`). The value is not clamped.
pub fn gram_loss<T: Scalar>(tape: &mut Tape<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::EmptyGramPairs);
    }
    let floor = T::from_f64_lossy(GRAM_LOSS_MAX_FLOOR);
    let mut ratios = Vec::with_capacity(pairs.len());
    for &(g_in, g_out) in pairs {
        let diff = tape.sub(g_in, g_out)?;
        let mx = tape.max(g_in)?;
        if tape.value(mx).item() <= floor {
            continue;
        }
        // Dividing entrywise before averaging keeps the anchor cases exact
        // (e.g. a constant Gram driven to zero gives exactly 1).
        let c = tape.value(diff).numel();
        let mx_col = tape.reshape(mx, &[1, 1])?;
        let ones = tape.constant(Tensor::ones([c, 1]));
        let spread = tape.matmul(ones, mx_col)?;
        let spread = tape.reshape(spread, tape.value(diff).shape().to_vec().as_slice())?;
        let rel = tape.div(diff, spread)?;
        ratios.push(tape.mean(rel));
    }
    let one = tape.constant(Tensor::scalar(T::one()));
    if ratios.is_empty() {
        return Ok(one);
    }
    let total = sum_terms(tape, &ratios)?;
    let count = tape.constant(Tensor::scalar(T::from_usize(pairs.len()).unwrap()));
    let avg = tape.div(total, count)?;
    tape.sub(one, avg)
}

fn taps_for(taps: &[Var], selected: &[FeatureMap<f32>]) -> Vec<Var> {
    selected
        .iter()
        .map(|f| taps[TAP_LAYERS.iter().position(|&l| l == f.layer).expect("known tap")])
        .collect()
}

/// Result of [`style_transfer`].
#[derive(Debug, Clone)]
pub struct Stylized {
    /// Final image, clipped to `[0, 1]`.
    pub image: Tensor<f32>,
    /// Objective before each update plus the value after the last one.
    pub losses: Vec<f64>,
}

/// Gradient descent on the pixels of `x̂` (initialized to `x`) minimizing
/// `content_loss(x̂, x) + style_loss(x̂, x_style)` through a frozen network.
///
/// `layers` selects the feature taps; `None` uses every tap.
pub fn style_transfer(
    x: &Tensor<f32>,
    x_style: &Tensor<f32>,
    net: &LayeredNetwork<f32>,
    steps: usize,
    step_size: f32,
    layers: Option<&[LayerId]>,
) -> Result<Stylized> {
    let select = |taps: Vec<FeatureMap<f32>>| -> Vec<FeatureMap<f32>> {
        taps.into_iter()
            .filter(|f| layers.is_none_or(|l| l.contains(&f.layer)))
            .collect()
    };
    let content_ref = select(net.features(x)?);
    let style_ref = select(net.features(x_style)?);
    if content_ref.is_empty() {
        return Err(Error::LayerMismatch(format!("no taps among {layers:?}")));
    }

    let mut image = x.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let xv = tape.param(image.clone());
        let bound = net.bind(&mut tape, false);
        let out = bound.forward(&mut tape, xv, &Default::default())?;
        let mut f_hat = BTreeMap::new();
        let mut f_content = BTreeMap::new();
        let mut f_style = BTreeMap::new();
        for ((c, s), tap) in content_ref.iter().zip(&style_ref).zip(taps_for(&out.taps, &content_ref)) {
            f_hat.insert(c.layer, tap);
            f_content.insert(c.layer, tape.constant(c.values.clone()));
            f_style.insert(s.layer, tape.constant(s.values.clone()));
        }
        let lc = content_loss(&mut tape, &f_hat, &f_content)?;
        let ls = style_loss(&mut tape, &f_hat, &f_style)?;
        let total = tape.add(lc, ls)?;
        let value = f64::from(tape.value(total).item());
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, value });
        }
        losses.push(value);
        if step == steps {
            break;
        }
        let grads = tape.backward(total)?;
        let g = grads.get(xv).expect("image gradient");
        for (p, &d) in image.data_mut().iter_mut().zip(g.data()) {
            *p -= step_size * d;
        }
    }
    Ok(Stylized {
        image: image.clamp(0.0, 1.0),
        losses,
    })
}
