//! 3D scalar volumes and multi-class label masks on a shared voxel lattice.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Tumor compartment label codes.
pub const BG: u8 = 0;
pub const EDEMA: u8 = 1;
pub const NECROTIC_CORE: u8 = 2;
pub const ENHANCING: u8 = 3;

/// Anatomical slicing planes. Volumes are indexed (D, H, W); `axial` slices
/// along D, `coronal` along H, `sagittal` along W.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for Plane {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(CoreError::Config(format!("unknown plane '{other}'"))),
        }
    }
}

/// 3D scalar grid with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f64>, spacing: [f64; 3]) -> Result<Self> {
        let shape = data.dim();
        if shape.0 < 8 || shape.1 < 8 || shape.2 < 8 {
            return Err(CoreError::Config(format!(
                "volume shape {shape:?} below minimum of 8 per axis"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Data("volume contains non-finite intensities".into()));
        }
        Ok(Volume { data, spacing })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Extract the 2D slice at `index` along `plane`.
    pub fn slice_2d(&self, plane: Plane, index: usize) -> Array2<f64> {
        match plane {
            Plane::Axial => self.data.index_axis(ndarray::Axis(0), index).to_owned(),
            Plane::Coronal => self.data.index_axis(ndarray::Axis(1), index).to_owned(),
            Plane::Sagittal => self.data.index_axis(ndarray::Axis(2), index).to_owned(),
        }
    }

    pub fn n_slices(&self, plane: Plane) -> usize {
        let (d, h, w) = self.shape();
        match plane {
            Plane::Axial => d,
            Plane::Coronal => h,
            Plane::Sagittal => w,
        }
    }
}

/// 3D label grid over the compartment codes {0,1,2,3}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiClassMask {
    pub labels: Array3<u8>,
}

impl MultiClassMask {
    pub fn new(labels: Array3<u8>) -> Result<Self> {
        if labels.iter().any(|&c| c > ENHANCING) {
            return Err(CoreError::Data("mask contains label codes outside {0,1,2,3}".into()));
        }
        Ok(MultiClassMask { labels })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn slice_2d(&self, plane: Plane, index: usize) -> Array2<u8> {
        match plane {
            Plane::Axial => self.labels.index_axis(ndarray::Axis(0), index).to_owned(),
            Plane::Coronal => self.labels.index_axis(ndarray::Axis(1), index).to_owned(),
            Plane::Sagittal => self.labels.index_axis(ndarray::Axis(2), index).to_owned(),
        }
    }

    pub fn count(&self, code: u8) -> usize {
        self.labels.iter().filter(|&&c| c == code).count()
    }
}

/// Trilinear resampling of a scalar volume to `target` shape. Sample points
/// are placed so output voxel centres map onto input voxel centres at the
/// grid corners (align-corners convention); a constant input stays constant
/// and an identity target is a no-op.
pub fn resample_trilinear(vol: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    if target.0 < 8 || target.1 < 8 || target.2 < 8 {
        return Err(CoreError::Config(format!(
            "resample target {target:?} below minimum of 8 per axis"
        )));
    }
    let src = &vol.data;
    let (sd, sh, sw) = src.dim();
    if (sd, sh, sw) == target {
        return Ok(vol.clone());
    }
    let scale = |s: usize, t: usize| -> f64 {
        if t <= 1 {
            0.0
        } else {
            (s as f64 - 1.0) / (t as f64 - 1.0)
        }
    };
    let (fd, fh, fw) = (scale(sd, target.0), scale(sh, target.1), scale(sw, target.2));
    let mut out = Array3::<f64>::zeros(target);
    for z in 0..target.0 {
        let zf = z as f64 * fd;
        let z0 = zf.floor() as usize;
        let z1 = (z0 + 1).min(sd - 1);
        let tz = zf - z0 as f64;
        for y in 0..target.1 {
            let yf = y as f64 * fh;
            let y0 = yf.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let ty = yf - y0 as f64;
            for x in 0..target.2 {
                let xf = x as f64 * fw;
                let x0 = xf.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let tx = xf - x0 as f64;
                let c00 = src[[z0, y0, x0]] * (1.0 - tx) + src[[z0, y0, x1]] * tx;
                let c01 = src[[z0, y1, x0]] * (1.0 - tx) + src[[z0, y1, x1]] * tx;
                let c10 = src[[z1, y0, x0]] * (1.0 - tx) + src[[z1, y0, x1]] * tx;
                let c11 = src[[z1, y1, x0]] * (1.0 - tx) + src[[z1, y1, x1]] * tx;
                let c0 = c00 * (1.0 - ty) + c01 * ty;
                let c1 = c10 * (1.0 - ty) + c11 * ty;
                out[[z, y, x]] = c0 * (1.0 - tz) + c1 * tz;
            }
        }
    }
    let spacing = [
        vol.spacing[0] * sd as f64 / target.0 as f64,
        vol.spacing[1] * sh as f64 / target.1 as f64,
        vol.spacing[2] * sw as f64 / target.2 as f64,
    ];
    Volume::new(out, spacing)
}

/// Nearest-neighbour resampling for label grids.
pub fn resample_nearest(mask: &MultiClassMask, target: (usize, usize, usize)) -> Result<MultiClassMask> {
    let src = &mask.labels;
    let (sd, sh, sw) = src.dim();
    if (sd, sh, sw) == target {
        return Ok(mask.clone());
    }
    let scale = |s: usize, t: usize| -> f64 {
        if t <= 1 {
            0.0
        } else {
            (s as f64 - 1.0) / (t as f64 - 1.0)
        }
    };
    let (fd, fh, fw) = (scale(sd, target.0), scale(sh, target.1), scale(sw, target.2));
    let mut out = Array3::<u8>::zeros(target);
    for z in 0..target.0 {
        let zi = ((z as f64 * fd).round() as usize).min(sd - 1);
        for y in 0..target.1 {
            let yi = ((y as f64 * fh).round() as usize).min(sh - 1);
            for x in 0..target.2 {
                let xi = ((x as f64 * fw).round() as usize).min(sw - 1);
                out[[z, y, x]] = src[[zi, yi, xi]];
            }
        }
    }
    MultiClassMask::new(out)
}
