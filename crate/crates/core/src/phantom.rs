//! Synthetic layered volumes with known labels.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::Volume;
use crate::metrics::LabeledVolume;
use crate::scalar::Real;

/// Blobs inside one layer that carry the intensity statistics of another layer. Their
/// labels stay those of the surrounding layer, so a labeling driven by intensity alone
/// contradicts the layer order there.
#[derive(Clone, Debug, PartialEq)]
pub struct InclusionConfig {
    pub count: usize,
    /// Ellipsoid semi-axes in voxels along (depth, A-scan axis, B-scan axis).
    pub radii: [f64; 3],
}

impl Default for InclusionConfig {
    fn default() -> Self {
        Self {
            count: 12,
            radii: [2.0, 4.0, 1.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub layers: usize,
    /// Sinusoidal modes per boundary surface.
    pub modes: usize,
    /// Largest boundary displacement from its flat position, in voxels.
    pub amplitude: f64,
    /// Mean intensity per layer; empty selects [`default_layer_means`].
    pub means: Vec<f64>,
    pub noise: f64,
    pub speckle: f64,
    pub seed: u64,
    pub inclusions: Option<InclusionConfig>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 8],
            layers: 6,
            modes: 3,
            amplitude: 3.0,
            means: Vec::new(),
            noise: 0.01,
            speckle: 0.2,
            seed: 0,
            inclusions: None,
        }
    }
}

/// Alternating bright and dark layers on a log scale, cycled when `c` exceeds the base
/// pattern. Covariance descriptors are centered, so layers differ to them mainly through
/// the speckle variance, which grows with the squared mean.
pub fn default_layer_means(c: usize) -> Vec<f64> {
    const BASE: [f64; 6] = [1.0, 4.0, 0.25, 2.0, 0.125, 0.5];
    (0..c).map(|l| BASE[l % BASE.len()]).collect()
}

impl PhantomConfig {
    pub fn layer_means(&self) -> Vec<f64> {
        if self.means.is_empty() {
            default_layer_means(self.layers)
        } else {
            self.means.clone()
        }
    }

    /// Flat boundary spacing `N / c`.
    pub fn spacing(&self) -> f64 {
        self.dims[0] as f64 / self.layers as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("phantom dims {:?} contain zero", self.dims)));
        }
        if self.layers < 1 || self.layers > u8::MAX as usize + 1 {
            return Err(Error::Config(format!("layer count {} out of range", self.layers)));
        }
        if self.layers > self.dims[0] {
            return Err(Error::Config(format!(
                "{} layers do not fit into depth {}",
                self.layers, self.dims[0]
            )));
        }
        if !self.means.is_empty() && self.means.len() != self.layers {
            return Err(Error::Config(format!(
                "{} layer means for {} layers",
                self.means.len(),
                self.layers
            )));
        }
        for (name, v) in [("amplitude", self.amplitude), ("noise", self.noise), ("speckle", self.speckle)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        // every layer keeps at least one voxel of thickness in every column
        if self.layers > 1 && 2.0 * self.amplitude > self.spacing() - 1.0 {
            return Err(Error::Config(format!(
                "amplitude {} lets boundaries spaced {:.3} apart cross",
                self.amplitude,
                self.spacing()
            )));
        }
        if let Some(inc) = &self.inclusions {
            if self.layers < 2 {
                return Err(Error::Config("inclusions need at least two layers".into()));
            }
            if inc.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::Config("inclusion radii must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Depth of every boundary `1..c` per column, `[(a, b)][k − 1]`, strictly increasing.
pub fn boundary_surfaces(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let [_, na, nb] = config.dims;
    let c = config.layers;
    let spacing = config.spacing();
    // (amplitude share, frequency along a, frequency along b, phase) per mode and boundary
    let surfaces: Vec<Vec<(f64, f64, f64, f64)>> = (1..c)
        .map(|_| {
            let raw: Vec<(f64, f64, f64, f64)> = (0..config.modes)
                .map(|m| {
                    (
                        rng.random_range(0.2..1.0) / (m + 1) as f64,
                        rng.random_range(0.3..1.5) * (m + 1) as f64 / na as f64,
                        rng.random_range(0.0..0.25) / nb as f64,
                        rng.random_range(0.0..TAU),
                    )
                })
                .collect();
            let total: f64 = raw.iter().map(|m| m.0).sum();
            raw.into_iter().map(|(s, fa, fb, ph)| (s / total, fa, fb, ph)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(na * nb);
    for b in 0..nb {
        for a in 0..na {
            out.push(
                surfaces
                    .iter()
                    .enumerate()
                    .map(|(k, modes)| {
                        let wave: f64 = modes
                            .iter()
                            .map(|&(s, fa, fb, ph)| s * (TAU * (fa * a as f64 + fb * b as f64) + ph).sin())
                            .sum();
                        spacing * (k + 1) as f64 + config.amplitude * wave
                    })
                    .collect(),
            );
        }
    }
    out
}

/// Layered volume and its ground-truth labels. Voxel `d` of a column belongs to the number
/// of boundaries at depth `≤ d`; its intensity is `μ_l (1 + speckle·ξ) + noise·η`.
pub fn generate_phantom<T: Real>(config: &PhantomConfig) -> Result<(Volume<T>, LabeledVolume)> {
    config.validate()?;
    let dims = config.dims;
    let [nd, na, nb] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let surfaces = boundary_surfaces(config, &mut rng);
    let mut labels = Vec::with_capacity(nd * na * nb);
    for column in &surfaces {
        for d in 0..nd {
            labels.push(column.iter().filter(|&&s| s <= d as f64).count());
        }
    }
    let means = config.layer_means();
    let mut source: Vec<usize> = labels.clone();
    if let Some(inc) = &config.inclusions {
        place_inclusions(config, inc, &labels, &mut source, &mut rng);
    }
    let values: Vec<T> = source
        .iter()
        .map(|&l| {
            let xi: f64 = rng.sample(StandardNormal);
            let eta: f64 = rng.sample(StandardNormal);
            T::lit(means[l] * (1.0 + config.speckle * xi) + config.noise * eta)
        })
        .collect();
    let layout = LabeledVolume::from_indices(dims, config.layers, &labels)?;
    Ok((Volume::new(dims, values)?, layout))
}

/// Overwrites the intensity source of ellipsoids centered in a random layer with the
/// layer `c/2` positions away, wrapping around.
fn place_inclusions(
    config: &PhantomConfig,
    inc: &InclusionConfig,
    labels: &[usize],
    source: &mut [usize],
    rng: &mut ChaCha8Rng,
) {
    let dims = config.dims;
    let c = config.layers;
    let shift = (c / 2).max(1);
    for _ in 0..inc.count {
        let center = [
            rng.random_range(0..dims[0]),
            rng.random_range(0..dims[1]),
            rng.random_range(0..dims[2]),
        ];
        let host = labels[crate::features::voxel_index(dims, center[0], center[1], center[2])];
        let mimic = (host + shift) % c;
        let lo = |i: usize| (center[i] as f64 - inc.radii[i]).ceil().max(0.0) as usize;
        let hi = |i: usize| ((center[i] as f64 + inc.radii[i]).floor() as usize).min(dims[i] - 1);
        for b in lo(2)..=hi(2) {
            for a in lo(1)..=hi(1) {
                for d in lo(0)..=hi(0) {
                    let r2: f64 = [d, a, b]
                        .iter()
                        .zip(center)
                        .zip(inc.radii)
                        .map(|((&x, c0), r)| ((x as f64 - c0 as f64) / r).powi(2))
                        .sum();
                    let idx = crate::features::voxel_index(dims, d, a, b);
                    if r2 <= 1.0 && labels[idx] == host {
                        source[idx] = mimic;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::count_order_violations;
    use proptest::prelude::*;

    #[test]
    fn noiseless_flat_phantom_is_banded() {
        let cfg = PhantomConfig {
            dims: [12, 3, 2],
            layers: 3,
            amplitude: 0.0,
            noise: 0.0,
            speckle: 0.0,
            means: vec![1.0, 2.0, 3.0],
            ..PhantomConfig::default()
        };
        let (vol, labels) = generate_phantom::<f64>(&cfg).unwrap();
        for col in labels.columns() {
            assert_eq!(col, &[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        }
        for (v, &l) in vol.as_slice().iter().zip(labels.as_slice()) {
            assert_eq!(*v, (l + 1) as f64);
        }
    }

    #[test]
    fn same_seed_same_phantom() {
        let cfg = PhantomConfig {
            dims: [24, 10, 3],
            layers: 4,
            amplitude: 2.0,
            ..PhantomConfig::default()
        };
        let a = generate_phantom::<f64>(&cfg).unwrap();
        let b = generate_phantom::<f64>(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom::<f64>(&PhantomConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn crossing_amplitude_is_rejected() {
        let cfg = PhantomConfig {
            dims: [12, 4, 2],
            layers: 3,
            amplitude: 1.6,
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_phantom::<f64>(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn inclusions_change_intensity_not_labels() {
        let base = PhantomConfig {
            dims: [30, 16, 4],
            layers: 3,
            noise: 0.0,
            speckle: 0.0,
            ..PhantomConfig::default()
        };
        let with = PhantomConfig {
            inclusions: Some(InclusionConfig {
                count: 4,
                radii: [2.0, 3.0, 1.0],
            }),
            ..base.clone()
        };
        let (v0, l0) = generate_phantom::<f64>(&base).unwrap();
        let (v1, l1) = generate_phantom::<f64>(&with).unwrap();
        assert_eq!(l0, l1);
        assert_ne!(v0, v1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn columns_are_ordered_and_every_layer_present(
            seed in 0u64..1000,
            layers in 2usize..7,
            modes in 1usize..5,
            frac in 0.0f64..1.0,
        ) {
            let depth = 40;
            let spacing = depth as f64 / layers as f64;
            let cfg = PhantomConfig {
                dims: [depth, 9, 3],
                layers,
                modes,
                amplitude: frac * (spacing - 1.0) / 2.0,
                seed,
                ..PhantomConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for col in boundary_surfaces(&cfg, &mut rng) {
                prop_assert!(col.windows(2).all(|w| w[1] - w[0] >= 1.0 - 1e-9));
            }
            let (_, labels) = generate_phantom::<f64>(&cfg).unwrap();
            prop_assert_eq!(count_order_violations(&labels), 0);
            for col in labels.columns() {
                for l in 0..layers as u8 {
                    prop_assert!(col.contains(&l));
                }
            }
        }
    }
}
