//! Parameterized layers, initialization and the SGD optimizer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameter groups: the task backbone (θ) and the StyleLess layers (ψ).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    #[serde(rename = "styleless")]
    StyleLess,
}

impl ParamGroup {
    pub fn tag(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::StyleLess => "styleless",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Group selector accepted by parameter counting: a single group or `all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSelector {
    Only(ParamGroup),
    All,
}

impl GroupSelector {
    pub fn matches(self, group: ParamGroup) -> bool {
        match self {
            GroupSelector::Only(g) => g == group,
            GroupSelector::All => true,
        }
    }
}

impl FromStr for GroupSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(GroupSelector::Only(ParamGroup::Backbone)),
            "styleless" => Ok(GroupSelector::Only(ParamGroup::StyleLess)),
            "all" => Ok(GroupSelector::All),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }
}

/// Read-only view of one parameter tensor.
#[derive(Debug)]
pub struct ParamRef<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    /// Whether weight decay applies (kernels yes, biases no).
    pub decay: bool,
    pub value: &'a Tensor<T>,
}

#[derive(Debug)]
pub struct ParamMut<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub decay: bool,
    pub value: &'a mut Tensor<T>,
}

/// Square-kernel convolution with bias, padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f32> {
    /// `(out, in, k, k)`
    pub kernel: Tensor<T>,
    /// `(out,)`
    pub bias: Tensor<T>,
    pub stride: usize,
}

/// Tape handles for a bound [`ConvLayer`].
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
}

impl<T: Scalar> ConvLayer<T> {
    /// All-zero layer.
    pub fn zeros(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::InvalidConfig("conv layer needs at least one channel".into()));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(Error::InvalidConfig(format!("unsupported conv geometry k={k}, stride={stride}")));
        }
        Ok(Self {
            kernel: Tensor::zeros([out_channels, in_channels, k, k]),
            bias: Tensor::zeros([out_channels]),
            stride,
        })
    }

    /// Glorot-uniform kernel, zero bias.
    pub fn initialized(in_channels: usize, out_channels: usize, k: usize, stride: usize, seed: u64) -> Result<Self> {
        let mut layer = Self::zeros(in_channels, out_channels, k, stride)?;
        layer.init_parameters(seed);
        Ok(layer)
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// Glorot bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn init_bound(&self) -> f64 {
        let k2 = self.kernel_size() * self.kernel_size();
        let fan_in = self.in_channels() * k2;
        let fan_out = self.out_channels() * k2;
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }

    /// Kernel ~ U(-b, b), bias = 0; deterministic in `seed`.
    pub fn init_parameters(&mut self, seed: u64) {
        let b = self.init_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in self.kernel.data_mut() {
            *v = T::from_f64_lossy(rng.random_range(-b..b));
        }
        self.bias.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundConv {
        BoundConv {
            kernel: tape.leaf(self.kernel.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
            stride: self.stride,
        }
    }

    pub(crate) fn visit<'a>(&'a self, name: &str, group: ParamGroup, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef { name: format!("{name}.kernel"), group, decay: true, value: &self.kernel });
        out.push(ParamRef { name: format!("{name}.bias"), group, decay: false, value: &self.bias });
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, name: &str, group: ParamGroup, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut { name: format!("{name}.kernel"), group, decay: true, value: &mut self.kernel });
        out.push(ParamMut { name: format!("{name}.bias"), group, decay: false, value: &mut self.bias });
    }
}

impl BoundConv {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.kernel, Some(self.bias), self.stride)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.kernel, self.bias]
    }
}

/// `x + conv2(relu(conv1(x)))` with two 3×3 convolutions of equal width.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T = f32> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundResidual {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn initialized(channels: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            conv1: ConvLayer::initialized(channels, channels, 3, 1, seed)?,
            conv2: ConvLayer::initialized(channels, channels, 3, 1, seed.wrapping_add(1))?,
        })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: ConvLayer::zeros(channels, channels, 3, 1)?,
            conv2: ConvLayer::zeros(channels, channels, 3, 1)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn parameter_count(&self) -> usize {
        self.conv1.parameter_count() + self.conv2.parameter_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundResidual {
        BoundResidual {
            conv1: self.conv1.bind(tape, trainable),
            conv2: self.conv2.bind(tape, trainable),
        }
    }

    pub(crate) fn visit<'a>(&'a self, name: &str, group: ParamGroup, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv1.visit(&format!("{name}.conv1"), group, out);
        self.conv2.visit(&format!("{name}.conv2"), group, out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, name: &str, group: ParamGroup, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv1.visit_mut(&format!("{name}.conv1"), group, out);
        self.conv2.visit_mut(&format!("{name}.conv2"), group, out);
    }
}

impl BoundResidual {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h);
        let r = self.conv2.forward(tape, h)?;
        tape.add(x, r)
    }
}

/// Segmentation task loss; see [`Tape::softmax_cross_entropy`].
pub fn softmax_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &Tensor<u8>) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Learning-rate multipliers per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMultipliers {
    pub backbone: f64,
    pub styleless: f64,
}

impl GroupMultipliers {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::StyleLess => self.styleless,
        }
    }
}

impl Default for GroupMultipliers {
    fn default() -> Self {
        Self { backbone: 1.0, styleless: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial decay `(1 - step / total)^power`.
    pub poly_power: f64,
    pub total_steps: usize,
    pub multipliers: GroupMultipliers,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            total_steps: 1,
            multipliers: GroupMultipliers::default(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.multipliers.backbone > 0.0 && self.multipliers.styleless > 0.0) {
            return Err(Error::InvalidConfig("learning-rate multipliers must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Base learning rate at `step` under the polynomial schedule.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr;
        }
        let progress = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr * (1.0 - progress).powf(self.poly_power)
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct SgdState<T> {
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new() -> Self {
        Self { velocity: BTreeMap::new() }
    }
}

/// One SGD update:
///
/// ```text
/// v <- momentum * v + g + weight_decay * p     (decay on kernels only)
/// p <- p - lr(step) * group_multiplier * v
/// ```
pub fn sgd_step<T: Scalar>(
    params: &mut [ParamMut<'_, T>],
    grads: &BTreeMap<String, Tensor<T>>,
    cfg: &SgdConfig,
    step: usize,
    state: &mut SgdState<T>,
) -> Result<()> {
    cfg.validate()?;
    for p in params.iter() {
        let g = grads.get(&p.name).ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        if g.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", p.value.shape(), g.shape()));
        }
    }
    let base = cfg.lr_at(step);
    let momentum = T::from_f64_lossy(cfg.momentum);
    for p in params.iter_mut() {
        let g = &grads[&p.name];
        let lr = T::from_f64_lossy(base * cfg.multipliers.get(p.group));
        let wd = T::from_f64_lossy(if p.decay { cfg.weight_decay } else { 0.0 });
        let v = state
            .velocity
            .entry(p.name.clone())
            .or_insert_with(|| vec![T::zero(); g.numel()]);
        for ((vi, &gi), pi) in v.iter_mut().zip(g.data()).zip(p.value.data_mut()) {
            *vi = momentum * *vi + gi + wd * *pi;
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single<'a>(value: &'a mut Tensor<f64>, group: ParamGroup, decay: bool) -> Vec<ParamMut<'a, f64>> {
        vec![ParamMut { name: "p".into(), group, decay, value }]
    }

    fn grads(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    fn plain(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig { lr, momentum, weight_decay: 0.0, poly_power: 0.9, total_steps: 0, multipliers: GroupMultipliers::default() }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = ConvLayer::<f32>::initialized(8, 4, 3, 1, 42).unwrap();
        let b = ConvLayer::<f32>::initialized(8, 4, 3, 1, 42).unwrap();
        assert_eq!(a.kernel.data(), b.kernel.data());
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        let bound = a.init_bound() as f32;
        assert!(a.kernel.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_mean_is_near_zero() {
        // 10 × 100 × 1 × 1 = 1000 samples; sd of the mean is 2b / sqrt(12 · 1000).
        let layer = ConvLayer::<f64>::initialized(100, 10, 1, 1, 0).unwrap();
        let b = layer.init_bound();
        let mean = layer.kernel.mean();
        assert!(mean.abs() < 3.0 * b / (12.0f64 * 1000.0).sqrt(), "mean {mean}, b {b}");
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = Tensor::scalar(0.0);
        let mut state = SgdState::new();
        sgd_step(&mut single(&mut p, ParamGroup::Backbone, true), &grads(2.0), &plain(1.0, 0.0), 0, &mut state).unwrap();
        assert_eq!(p.item(), -2.0);
    }

    #[test]
    fn momentum_unrolls() {
        let mut p = Tensor::scalar(0.0);
        let mut state = SgdState::new();
        let cfg = plain(1.0, 0.9);
        for step in 0..2 {
            sgd_step(&mut single(&mut p, ParamGroup::Backbone, true), &grads(1.0), &cfg, step, &mut state).unwrap();
        }
        assert!((p.item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn schedule_reaches_zero() {
        let cfg = SgdConfig { total_steps: 100, ..SgdConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(100), 0.0);
        assert!(cfg.lr_at(50) < 0.01 && cfg.lr_at(50) > 0.0);
    }

    #[test]
    fn group_multiplier_equals_scaled_base_lr() {
        let run = |cfg: &SgdConfig, group: ParamGroup| {
            let mut p = Tensor::scalar(0.3);
            let mut state = SgdState::new();
            for step in 0..5 {
                let g = grads(0.7 - 0.1 * step as f64);
                sgd_step(&mut single(&mut p, group, true), &g, cfg, step, &mut state).unwrap();
            }
            p.item()
        };
        let base = SgdConfig { total_steps: 10, multipliers: GroupMultipliers { backbone: 1.0, styleless: 10.0 }, ..SgdConfig::default() };
        let scaled = SgdConfig { lr: base.lr * 10.0, ..base.clone() };
        assert!((run(&base, ParamGroup::StyleLess) - run(&scaled, ParamGroup::Backbone)).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::scalar(0.0);
        let mut state = SgdState::new();
        let err = sgd_step(&mut single(&mut p, ParamGroup::Backbone, true), &BTreeMap::new(), &plain(1.0, 0.0), 0, &mut state).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(name) if name == "p"));
    }

    #[test]
    fn bias_skips_weight_decay() {
        let cfg = SgdConfig { weight_decay: 0.5, ..plain(1.0, 0.0) };
        let mut bias = Tensor::scalar(1.0);
        sgd_step(&mut single(&mut bias, ParamGroup::Backbone, false), &grads(0.0), &cfg, 0, &mut SgdState::new()).unwrap();
        assert_eq!(bias.item(), 1.0);
        let mut kernel = Tensor::scalar(1.0);
        sgd_step(&mut single(&mut kernel, ParamGroup::Backbone, true), &grads(0.0), &cfg, 0, &mut SgdState::new()).unwrap();
        assert_eq!(kernel.item(), 0.5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(plain(0.0, 0.0).validate().is_err());
        assert!(plain(0.1, 1.0).validate().is_err());
        let bad = SgdConfig { multipliers: GroupMultipliers { backbone: 1.0, styleless: 0.0 }, ..SgdConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let block = ResidualBlock::<f64>::zeros(3).unwrap();
        let mut tape = Tape::new();
        let bound = block.bind(&mut tape, false);
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(Tensor::new([3, 4, 5], data).unwrap());
        let y = bound.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn group_selector_parses_tags() {
        assert_eq!("all".parse::<GroupSelector>().unwrap(), GroupSelector::All);
        assert_eq!("styleless".parse::<GroupSelector>().unwrap(), GroupSelector::Only(ParamGroup::StyleLess));
        assert!(matches!("psi".parse::<GroupSelector>(), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn softmax_ce_passes_gradcheck() {
        use crate::gradcheck::{gradcheck, DEFAULT_EPS};
        let labels = Tensor::new([2, 3], vec![0u8, 3, 1, 255, 2, 2]).unwrap();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::new([4, 2, 3], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let err = gradcheck(|t, v| softmax_cross_entropy(t, v, &labels), &logits, DEFAULT_EPS);
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }
}
