//! The StyleLess layer: a zero-initialized bottleneck residual that learns to
//! strip style statistics from the feature map it wraps.
//!
//! ```text
//! F_out = F_in + exit(relu(mid(relu(entry(F_in)))))
//! ```
//!
//! `entry` and `exit` are 1×1 convolutions between `c` and the bottleneck
//! width `c_b`; `mid` is a 3×3 convolution at width `c_b`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundConv, ConvLayer, ParamGroup, ParamMut, ParamRef};
use crate::style::{gram, LayerId};
use crate::tensor::Scalar;

/// Default bottleneck width for a host layer of `channels` channels.
pub fn bottleneck_width(channels: usize) -> usize {
    (channels / 8).max(4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleLessLayer<T = f32> {
    pub entry: ConvLayer<T>,
    pub mid: ConvLayer<T>,
    pub exit: ConvLayer<T>,
    /// Feature tap this layer follows.
    pub insertion: LayerId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundStyleLess {
    pub entry: BoundConv,
    pub mid: BoundConv,
    pub exit: BoundConv,
}

/// Output of [`BoundStyleLess::forward`].
#[derive(Debug, Clone, Copy)]
pub struct StyleLessOutput {
    pub features: Var,
    pub gram_in: Var,
    pub gram_out: Var,
}

impl<T: Scalar> StyleLessLayer<T> {
    /// Layer with the default bottleneck width.
    pub fn new(channels: usize, insertion: LayerId, seed: u64) -> Result<Self> {
        Self::with_bottleneck(channels, bottleneck_width(channels), insertion, seed)
    }

    /// Entry and mid convs get Glorot init from `seed`; the exit conv starts
    /// at zero so the layer is an exact identity.
    pub fn with_bottleneck(channels: usize, bottleneck: usize, insertion: LayerId, seed: u64) -> Result<Self> {
        Ok(Self {
            entry: ConvLayer::initialized(channels, bottleneck, 1, 1, seed)?,
            mid: ConvLayer::initialized(bottleneck, bottleneck, 3, 1, seed.wrapping_add(1))?,
            exit: ConvLayer::zeros(bottleneck, channels, 1, 1)?,
            insertion,
        })
    }

    pub fn channels(&self) -> usize {
        self.entry.in_channels()
    }

    pub fn bottleneck(&self) -> usize {
        self.entry.out_channels()
    }

    pub fn parameter_count(&self) -> usize {
        self.entry.parameter_count() + self.mid.parameter_count() + self.exit.parameter_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundStyleLess {
        BoundStyleLess {
            entry: self.entry.bind(tape, trainable),
            mid: self.mid.bind(tape, trainable),
            exit: self.exit.bind(tape, trainable),
        }
    }

    pub(crate) fn visit<'a>(&'a self, name: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.entry.visit(&format!("{name}.entry"), ParamGroup::StyleLess, out);
        self.mid.visit(&format!("{name}.mid"), ParamGroup::StyleLess, out);
        self.exit.visit(&format!("{name}.exit"), ParamGroup::StyleLess, out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.entry.visit_mut(&format!("{name}.entry"), ParamGroup::StyleLess, out);
        self.mid.visit_mut(&format!("{name}.mid"), ParamGroup::StyleLess, out);
        self.exit.visit_mut(&format!("{name}.exit"), ParamGroup::StyleLess, out);
    }
}

impl BoundStyleLess {
    /// Residual pass plus the Gram matrices of its input and output.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, f_in: Var) -> Result<StyleLessOutput> {
        let (c, _, _) = tape.value(f_in).dims3()?;
        let expected = tape.value(self.entry.kernel).shape()[1];
        if c != expected {
            return Err(Error::ChannelMismatch { expected, got: c });
        }
        let r = self.entry.forward(tape, f_in)?;
        let r = tape.relu(r);
        let r = self.mid.forward(tape, r)?;
        let r = tape.relu(r);
        let r = self.exit.forward(tape, r)?;
        let features = tape.add(f_in, r)?;
        Ok(StyleLessOutput {
            features,
            gram_in: gram(tape, f_in)?,
            gram_out: gram(tape, features)?,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        [self.entry.vars(), self.mid.vars(), self.exit.vars()].concat()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck_many, DEFAULT_EPS};
    use crate::style::gram_loss;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn documented_parameter_count() {
        let layer = StyleLessLayer::<f32>::with_bottleneck(64, 16, 1, 0).unwrap();
        assert_eq!(layer.entry.parameter_count(), 1040);
        assert_eq!(layer.mid.parameter_count(), 2320);
        assert_eq!(layer.exit.parameter_count(), 1088);
        assert_eq!(layer.parameter_count(), 4448);
    }

    #[test]
    fn bottleneck_has_a_floor() {
        assert_eq!(bottleneck_width(16), 4);
        assert_eq!(bottleneck_width(64), 8);
        assert_eq!(bottleneck_width(256), 32);
    }

    #[test]
    fn fresh_layer_is_identity_with_unit_gram_loss() {
        let layer = StyleLessLayer::<f64>::new(16, 1, 3).unwrap();
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape, true);
        let x = tape.constant(random(&[16, 8, 8], 1, 0.0, 1.0));
        let out = bound.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(out.features), tape.value(x));
        assert_eq!(tape.value(out.features).shape(), &[16, 8, 8]);
        let l = gram_loss(&mut tape, &[(out.gram_in, out.gram_out)]).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let layer = StyleLessLayer::<f64>::new(16, 1, 3).unwrap();
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([8, 4, 4]));
        assert!(matches!(bound.forward(&mut tape, x), Err(Error::ChannelMismatch { expected: 16, got: 8 })));
    }

    #[test]
    fn gradcheck_through_layer_and_gram_loss() {
        for seed in 0..20u64 {
            let mut layer = StyleLessLayer::<f64>::with_bottleneck(4, 4, 1, seed).unwrap();
            // Move off the zero-init point so every path carries gradient.
            layer.exit.init_parameters(seed + 100);
            let inputs = [
                random(&[4, 3, 3], seed + 200, 0.1, 1.0),
                layer.entry.kernel.clone(),
                layer.mid.kernel.clone(),
                layer.exit.kernel.clone(),
            ];
            let layer_ref = &layer;
            let err = gradcheck_many(
                |tape, v| {
                    let entry_bias = tape.constant(layer_ref.entry.bias.clone());
                    let mid_bias = tape.constant(layer_ref.mid.bias.clone());
                    let exit_bias = tape.constant(layer_ref.exit.bias.clone());
                    let bound = BoundStyleLess {
                        entry: BoundConv { kernel: v[1], bias: entry_bias, stride: 1 },
                        mid: BoundConv { kernel: v[2], bias: mid_bias, stride: 1 },
                        exit: BoundConv { kernel: v[3], bias: exit_bias, stride: 1 },
                    };
                    let out = bound.forward(tape, v[0])?;
                    gram_loss(tape, &[(out.gram_in, out.gram_out)])
                },
                &inputs,
                DEFAULT_EPS,
            );
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }
}
