//! Synthetic 9-region box atlas.
//!
//! The brain is an axis-aligned ellipsoid; the nine regions are axis-aligned
//! boxes forming a 3x3 grid over (superior-inferior band, anterior-posterior
//! band), each spanning the full left-right extent. The layout is a stand-in
//! for a structural atlas: the point is that location features are exactly
//! computable by voxel counting, not anatomical fidelity.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// The nine regions, in the fixed order used by the location feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Caudate,
    Cerebellum,
    Frontal,
    Insula,
    Occipital,
    Parietal,
    Putamen,
    Temporal,
    Thalamus,
}

impl Region {
    pub const ALL: [Region; 9] = [
        Region::Caudate,
        Region::Cerebellum,
        Region::Frontal,
        Region::Insula,
        Region::Occipital,
        Region::Parietal,
        Region::Putamen,
        Region::Temporal,
        Region::Thalamus,
    ];

    pub fn index(self) -> usize {
        Region::ALL.iter().position(|&r| r == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Caudate => "caudate",
            Region::Cerebellum => "cerebellum",
            Region::Frontal => "frontal",
            Region::Insula => "insula",
            Region::Occipital => "occipital",
            Region::Parietal => "parietal",
            Region::Putamen => "putamen",
            Region::Temporal => "temporal",
            Region::Thalamus => "thalamus",
        }
    }
}

/// Voxel atlas: 0 = outside brain, otherwise `Region::ALL[code - 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atlas {
    pub labels: Array3<u8>,
}

/// 3x3 grid cell -> region. Rows are superior/middle/inferior z-bands,
/// columns anterior/middle/posterior y-bands.
const GRID: [[Region; 3]; 3] = [
    [Region::Frontal, Region::Parietal, Region::Occipital],
    [Region::Insula, Region::Caudate, Region::Putamen],
    [Region::Temporal, Region::Thalamus, Region::Cerebellum],
];

fn band(i: usize, n: usize) -> usize {
    // 0,1,2 for thirds; last band absorbs the remainder
    (i * 3 / n).min(2)
}

/// Whether voxel (z,y,x) lies inside the brain ellipsoid of a cubic grid.
pub fn in_brain(z: usize, y: usize, x: usize, shape: (usize, usize, usize)) -> bool {
    let (d, h, w) = shape;
    let cz = (d as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (az, ay, ax) = (0.46 * d as f64, 0.46 * h as f64, 0.46 * w as f64);
    let dz = (z as f64 - cz) / az;
    let dy = (y as f64 - cy) / ay;
    let dx = (x as f64 - cx) / ax;
    dz * dz + dy * dy + dx * dx <= 1.0
}

/// Build the shipped atlas for a given grid shape.
pub fn build_atlas(shape: (usize, usize, usize)) -> Result<Atlas> {
    let (d, h, w) = shape;
    if d < 8 || h < 8 || w < 8 {
        return Err(CoreError::Config(format!(
            "atlas shape {shape:?} below minimum of 8 per axis"
        )));
    }
    let mut labels = Array3::<u8>::zeros(shape);
    for z in 0..d {
        // z grows inferior -> superior; GRID row 0 is the superior band
        let row = 2 - band(z, d);
        for y in 0..h {
            let yb = band(y, h);
            for x in 0..w {
                if in_brain(z, y, x, shape) {
                    let region = GRID[row][yb];
                    labels[[z, y, x]] = region.index() as u8 + 1;
                }
            }
        }
    }
    Ok(Atlas { labels })
}

impl Atlas {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn region_at(&self, z: usize, y: usize, x: usize) -> Option<Region> {
        match self.labels[[z, y, x]] {
            0 => None,
            c => Some(Region::ALL[c as usize - 1]),
        }
    }

    /// Brain-interior voxels belonging to `region`.
    pub fn region_voxels(&self, region: Region) -> Vec<(usize, usize, usize)> {
        let code = region.index() as u8 + 1;
        let mut out = Vec::new();
        for ((z, y, x), &c) in self.labels.indexed_iter() {
            if c == code {
                out.push((z, y, x));
            }
        }
        out
    }
}
