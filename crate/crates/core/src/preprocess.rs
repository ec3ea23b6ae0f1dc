//! Intensity normalization, resampling, and prior-knowledge features.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::atlas::Atlas;
use crate::error::{CoreError, Result};
use crate::volume::{self, MultiClassMask, Volume};

/// Prior-knowledge features fed to the classification head: standardized age
/// and the 9-region tumor location probabilities (fixed region order:
/// caudate, cerebellum, frontal, insula, occipital, parietal, putamen,
/// temporal, thalamus).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorFeatures {
    pub age_std: f64,
    pub loc_probs: [f64; 9],
}

/// Training-split statistics used to standardize priors at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub age_mean: f64,
    pub age_sd: f64,
}

impl FeatureStats {
    /// Fit on training-split ages (population moments).
    pub fn fit(ages: &[f64]) -> Result<Self> {
        if ages.is_empty() {
            return Err(CoreError::Degenerate("no ages to fit feature stats".into()));
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd <= 0.0 {
            return Err(CoreError::Degenerate("age standard deviation is zero".into()));
        }
        Ok(FeatureStats { age_mean: mean, age_sd: sd })
    }
}

/// Linear-interpolation percentile (q in [0,100]) of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let pos = q / 100.0 * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] * (1.0 - frac) + v[hi] * frac
}

/// Zero-mean unit-variance normalization within the brain after excluding
/// intensities below the 5th and above the 95th within-brain percentile.
/// The percentile clip only excludes voxels from the statistics; the affine
/// transform is applied to every voxel.
pub fn normalize_intensities(vol: &Volume, brain: &Array3<bool>) -> Result<Volume> {
    if brain.dim() != vol.data.dim() {
        return Err(CoreError::Config("brain mask shape mismatch".into()));
    }
    let within: Vec<f64> = vol
        .data
        .iter()
        .zip(brain.iter())
        .filter(|(_, &b)| b)
        .map(|(&v, _)| v)
        .collect();
    if within.is_empty() {
        return Err(CoreError::Degenerate("empty brain mask".into()));
    }
    let p5 = percentile(&within, 5.0);
    let p95 = percentile(&within, 95.0);
    let clipped: Vec<f64> = within.iter().copied().filter(|&v| v >= p5 && v <= p95).collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(CoreError::Degenerate(
            "constant intensities within the brain mask".into(),
        ));
    }
    let sd = var.sqrt();
    let data = vol.data.mapv(|v| (v - mean) / sd);
    Volume::new(data, vol.spacing)
}

/// Trilinear resampling to the network input resolution.
pub fn resample_volume(vol: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    volume::resample_trilinear(vol, target)
}

/// Nearest-neighbour resampling for masks.
pub fn resample_mask(mask: &MultiClassMask, target: (usize, usize, usize)) -> Result<MultiClassMask> {
    volume::resample_nearest(mask, target)
}

/// Fraction of whole-tumor voxels lying in each of the nine atlas regions.
pub fn extract_location_features(mask: &MultiClassMask, atlas: &Atlas) -> Result<[f64; 9]> {
    if atlas.shape() != mask.shape() {
        return Err(CoreError::Config(format!(
            "atlas shape {:?} does not match mask shape {:?}",
            atlas.shape(),
            mask.shape()
        )));
    }
    let mut counts = [0usize; 9];
    let mut total = 0usize;
    for (idx, &code) in mask.labels.indexed_iter() {
        if code != 0 {
            total += 1;
            if let Some(r) = atlas.region_at(idx.0, idx.1, idx.2) {
                counts[r.index()] += 1;
            }
        }
    }
    if total == 0 {
        return Err(CoreError::Degenerate("whole tumor is empty".into()));
    }
    let mut probs = [0.0; 9];
    for (p, c) in probs.iter_mut().zip(counts) {
        *p = c as f64 / total as f64;
    }
    Ok(probs)
}

/// Standardize raw priors against training-split statistics. Age is z-scored;
/// location probabilities are already bounded and pass through unchanged.
pub fn standardize_priors(age: f64, loc_probs: [f64; 9], stats: &FeatureStats) -> Result<PriorFeatures> {
    if stats.age_sd <= 0.0 {
        return Err(CoreError::Degenerate("age standard deviation is zero".into()));
    }
    Ok(PriorFeatures {
        age_std: (age - stats.age_mean) / stats.age_sd,
        loc_probs,
    })
}

/// Brain mask of the phantom space (the generator's ellipsoid contract).
pub fn phantom_brain_mask(shape: (usize, usize, usize)) -> Array3<bool> {
    Array3::from_shape_fn(shape, |(z, y, x)| crate::atlas::in_brain(z, y, x, shape))
}
