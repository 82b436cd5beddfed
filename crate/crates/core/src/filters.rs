//! Training-free style-perturbation filters on feature maps.
//!
//! Each filter ranks channels by the Gram matrix of the map it is applied to
//! and perturbs the channels that carry the most correlation mass.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::style::{gram_of, ranked_entries, FeatureMap};
use crate::tensor::{Scalar, Tensor};

/// Diagonal maxima at or below this leave `gram_weighting` a no-op.
pub const WEIGHTING_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Remove,
    Weighting,
    Noise,
}

impl FilterKind {
    pub const ALL: [FilterKind; 3] = [FilterKind::Remove, FilterKind::Weighting, FilterKind::Noise];

    pub fn tag(self) -> &'static str {
        match self {
            FilterKind::Remove => "remove",
            FilterKind::Weighting => "weighting",
            FilterKind::Noise => "noise",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown filter kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub kind: FilterKind,
    /// Percentage of Gram entries that define the selected channels.
    pub p: f64,
    /// Noise attenuation; only read by the noise filter.
    pub tau: f64,
    pub seed: u64,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("P must be in [0, 100], got {}", self.p)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Number of entries out of `n` that make up the top `p` percent, rounded up.
fn top_count(p: f64, n: usize) -> usize {
    // The small slack keeps e.g. 25% of 4 from rounding up to 2 through
    // floating-point noise.
    let k = (p / 100.0 * n as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(n)
}

/// Channels touched by the top `p` percent of Gram entries.
///
/// Entries are ranked by signed value, descending, ties broken by
/// `(row, col)`; the selection is the union of the rows and columns of the
/// chosen entries.
pub fn select_phi<T: Scalar>(gram: &Tensor<T>, p: f64) -> Result<BTreeSet<usize>> {
    let order = ranked_entries(gram)?;
    let c = gram.shape()[0];
    let k = top_count(p, c * c);
    let mut phi = BTreeSet::new();
    for &idx in &order[..k] {
        phi.insert(idx / c);
        phi.insert(idx % c);
    }
    Ok(phi)
}

/// Zero the selected channels.
pub fn gram_remove<T: Scalar>(features: &FeatureMap<T>, p: f64) -> Result<FeatureMap<T>> {
    let phi = select_phi(&gram_of(&features.values)?, p)?;
    let mut out = features.values.clone();
    for &i in &phi {
        out.channel_mut(i).iter_mut().for_each(|v| *v = T::zero());
    }
    FeatureMap::new(features.layer, out)
}

/// Per-channel weights `1 − d_i / max(d)` with `d = diag(G)`, or `None` when
/// the diagonal is degenerate.
pub fn weighting_factors<T: Scalar>(gram: &Tensor<T>) -> Result<Option<Vec<T>>> {
    let (c, _) = gram.dims2()?;
    let d: Vec<T> = (0..c).map(|i| gram.data()[i * c + i]).collect();
    let max = d.iter().copied().fold(T::neg_infinity(), T::max);
    if !(max > T::from_f64_lossy(WEIGHTING_FLOOR)) {
        return Ok(None);
    }
    Ok(Some(d.into_iter().map(|v| T::one() - v / max).collect()))
}

/// Scale each channel by how little of the Gram diagonal it owns.
pub fn gram_weighting<T: Scalar>(features: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let Some(weights) = weighting_factors(&gram_of(&features.values)?)? else {
        return Ok(features.clone());
    };
    let mut out = features.values.clone();
    for (i, &w) in weights.iter().enumerate() {
        out.channel_mut(i).iter_mut().for_each(|v| *v = *v * w);
    }
    FeatureMap::new(features.layer, out)
}

/// Population standard deviation of each channel over spatial positions.
pub fn channel_std<T: Scalar>(values: &Tensor<T>) -> Result<Vec<T>> {
    let (c, _, _) = values.dims3()?;
    Ok((0..c)
        .map(|i| {
            let ch = values.channel(i);
            let n = T::from_usize(ch.len()).unwrap();
            let mean = ch.iter().copied().sum::<T>() / n;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            var.sqrt()
        })
        .collect())
}

/// The structured perturbation `Δ = ε·G` in channel-major `(c, h, w)` layout,
/// where column `j` of `ε` is i.i.d. `N(0, σ_j² / τ)`.
pub fn gram_noise_delta<T: Scalar>(values: &Tensor<T>, gram: &Tensor<T>, tau: f64, seed: u64) -> Result<Tensor<T>> {
    let (c, h, w) = values.dims3()?;
    let n = h * w;
    let sigma = channel_std(values)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_sqrt_tau = 1.0 / tau.sqrt();
    let mut eps = vec![T::zero(); c * n];
    for j in 0..c {
        let scale = sigma[j].as_f64() * inv_sqrt_tau;
        for e in &mut eps[j * n..(j + 1) * n] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *e = T::from_f64_lossy(z * scale);
        }
    }
    // Channel-major Δᵀ = Gᵀ εᵀ, i.e. Δ[i, p] = Σ_j G[j, i] ε[j, p].
    let mut delta = vec![T::zero(); c * n];
    T::gemm(c, c, n, T::one(), gram.data(), 1, c as isize, &eps, n as isize, 1, T::zero(), &mut delta, n as isize, 1);
    Tensor::new([c, h, w], delta)
}

/// Add Gram-shaped Gaussian noise to the selected channels.
pub fn gram_noise<T: Scalar>(features: &FeatureMap<T>, p: f64, tau: f64, seed: u64) -> Result<FeatureMap<T>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let g = gram_of(&features.values)?;
    let phi = select_phi(&g, p)?;
    if phi.is_empty() {
        return Ok(features.clone());
    }
    let delta = gram_noise_delta(&features.values, &g, tau, seed)?;
    let mut out = features.values.clone();
    for &i in &phi {
        for (v, &d) in out.channel_mut(i).iter_mut().zip(delta.channel(i)) {
            *v = *v + d;
        }
    }
    FeatureMap::new(features.layer, out)
}

pub fn apply_filter<T: Scalar>(features: &FeatureMap<T>, cfg: &FilterConfig) -> Result<FeatureMap<T>> {
    cfg.validate()?;
    match cfg.kind {
        FilterKind::Remove => gram_remove(features, cfg.p),
        FilterKind::Weighting => gram_weighting(features),
        FilterKind::Noise => gram_noise(features, cfg.p, cfg.tau, cfg.seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fmap(c: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap::new(1, Tensor::new([c, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn phi_examples() {
        let g = Tensor::new([2, 2], vec![4.0, 1.0, 1.0, 0.5]).unwrap();
        assert!(select_phi(&g, 0.0).unwrap().is_empty());
        assert_eq!(select_phi(&g, 25.0).unwrap(), BTreeSet::from([0]));
        assert_eq!(select_phi(&g, 100.0).unwrap(), BTreeSet::from([0, 1]));
    }

    #[test]
    fn phi_breaks_ties_lexicographically() {
        // All entries tie, so the single selected entry is (0, 0).
        let g = Tensor::new([3, 3], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(select_phi(&g, 100.0 / 9.0).unwrap(), BTreeSet::from([0]));
    }

    #[test]
    fn remove_dominant_channel() {
        // Energies 100 and 1 per pixel.
        let f = fmap(2, 1, 2, vec![10.0, 10.0, 1.0, 1.0]);
        let out = gram_remove(&f, 25.0).unwrap();
        assert_eq!(out.values.channel(0), &[0.0, 0.0]);
        assert_eq!(out.values.channel(1), f.values.channel(1));
        assert_eq!(gram_remove(&f, 0.0).unwrap(), f);
        assert!(gram_remove(&f, 100.0).unwrap().values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighting_examples() {
        let zero = fmap(2, 2, 2, vec![0.0; 8]);
        assert_eq!(gram_weighting(&zero).unwrap(), zero);
        // Channel energies 4 and 1 → d̃ = (1, 0.25) → weights (0, 0.75).
        let f = fmap(2, 1, 1, vec![2.0, 1.0]);
        let out = gram_weighting(&f).unwrap();
        assert_eq!(out.values.data(), &[0.0, 0.75]);
    }

    #[test]
    fn noise_identity_cases() {
        let f = fmap(3, 4, 4, (0..48).map(|i| (i as f64 * 0.3).cos()).collect());
        assert_eq!(gram_noise(&f, 0.0, 4.0, 7).unwrap(), f);
        let out = gram_noise(&f, 50.0, 1e12, 7).unwrap();
        assert!(out.values.max_abs_diff(&f.values) < 1e-3);
        assert!(gram_noise(&f, 10.0, 0.0, 7).is_err());
    }

    #[test]
    fn noise_variance_matches_closed_form() {
        let f = fmap(3, 2, 3, vec![0.1, 0.9, 0.4, 0.2, 0.7, 0.3, 1.5, 0.0, 0.5, 1.0, 0.2, 0.8, 0.3, 0.3, 0.6, 0.1, 0.9, 0.05]);
        let g = gram_of(&f.values).unwrap();
        let sigma = channel_std(&f.values).unwrap();
        let tau = 4.0;
        let draws = 10_000;
        for i in 0..3 {
            let expected: f64 = (0..3).map(|j| sigma[j].powi(2) * g.data()[j * 3 + i].powi(2)).sum::<f64>() / tau;
            let samples: Vec<f64> = (0..draws)
                .map(|s| gram_noise_delta(&f.values, &g, tau, s as u64).unwrap().channel(i)[0])
                .collect();
            let mean = samples.iter().sum::<f64>() / draws as f64;
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws as f64;
            assert!((var / expected - 1.0).abs() < 0.1, "channel {i}: {var} vs {expected}");
        }
    }

    proptest! {
        #[test]
        fn phi_is_monotone_in_p(data in prop::collection::vec(0.0f64..4.0, 16), p1 in 0.0f64..100.0, dp in 0.0f64..100.0) {
            let g = gram_of(&Tensor::new([4, 2, 2], data).unwrap()).unwrap();
            let p2 = (p1 + dp).min(100.0);
            let small = select_phi(&g, p1).unwrap();
            let large = select_phi(&g, p2).unwrap();
            prop_assert!(small.is_subset(&large));
        }

        #[test]
        fn filters_preserve_shape_and_finiteness(data in prop::collection::vec(-3.0f64..3.0, 24), p in 0.0f64..100.0, seed in any::<u64>()) {
            let f = fmap(3, 2, 4, data);
            for kind in FilterKind::ALL {
                let out = apply_filter(&f, &FilterConfig { kind, p, tau: 2.0, seed }).unwrap();
                prop_assert_eq!(out.values.shape(), f.values.shape());
                prop_assert!(out.values.is_finite());
            }
            let w = gram_weighting(&f).unwrap();
            for i in 0..3 {
                let e_in: f64 = f.values.channel(i).iter().map(|v| v * v).sum();
                let e_out: f64 = w.values.channel(i).iter().map(|v| v * v).sum();
                prop_assert!(e_out <= e_in + 1e-12);
            }
            let again = apply_filter(&f, &FilterConfig { kind: FilterKind::Noise, p, tau: 2.0, seed }).unwrap();
            prop_assert_eq!(again, apply_filter(&f, &FilterConfig { kind: FilterKind::Noise, p, tau: 2.0, seed }).unwrap());
        }
    }
}
