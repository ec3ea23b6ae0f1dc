//! Deterministic phantom case generator.
//!
//! A tumor is a deformed ellipsoid with three nested compartments: a
//! necrotic/non-enhancing core, an enhancing rim whose outer boundary is
//! perturbed by a random degree-2 spherical-harmonic field, and an edema
//! shell. Phenotype signals (rim thickness/irregularity/brightness by IDH
//! class, frontal placement and texture heterogeneity by 1p/19q class, age
//! and OS by IDH class) are planted per the spec's configured amplitudes.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::atlas::{build_atlas, in_brain, Region};
use crate::error::{CoreError, Result};
use crate::volume::{MultiClassMask, Volume, EDEMA, ENHANCING, NECROTIC_CORE};

use super::{CaseLabels, CaseMeta, CaseRecord, Event, Modality, PhantomSpec, Sex};

/// Degree-2 real spherical-harmonic basis on a unit direction.
fn sh2_basis(u: [f64; 3]) -> [f64; 5] {
    let [x, y, z] = u;
    [x * y, y * z, z * x, x * x - y * y, (3.0 * z * z - 1.0) / 2.0]
}

struct TumorGeometry {
    center: [f64; 3],
    radius: f64,
    irregularity: f64,
    thickness: f64,
    coeffs: [f64; 5],
    edema_extent: f64,
}

impl TumorGeometry {
    /// Outer rim radius along direction `u`.
    fn rim_radius(&self, u: [f64; 3]) -> f64 {
        let b = sh2_basis(u);
        let p: f64 = self.coeffs.iter().zip(b.iter()).map(|(c, v)| c * v).sum();
        self.radius * (1.0 + self.irregularity * p)
    }

    fn label_at(&self, z: usize, y: usize, x: usize) -> u8 {
        let d = [
            z as f64 - self.center[0],
            y as f64 - self.center[1],
            x as f64 - self.center[2],
        ];
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if dist < 1e-9 {
            return NECROTIC_CORE;
        }
        let u = [d[0] / dist, d[1] / dist, d[2] / dist];
        let r_out = self.rim_radius(u);
        let r_in = (r_out - self.thickness).max(0.5);
        if dist <= r_in {
            NECROTIC_CORE
        } else if dist <= r_out {
            ENHANCING
        } else if dist <= r_out * self.edema_extent {
            EDEMA
        } else {
            0
        }
    }
}

/// Low-frequency multiplicative texture field: a sum of three random plane
/// waves, scaled into [1-amp, 1+amp].
struct TextureField {
    amp: f64,
    waves: [([f64; 3], f64); 3],
}

impl TextureField {
    fn sample(rng: &mut ChaCha8Rng, amp: f64, radius: f64) -> Self {
        let mut waves = [([0.0; 3], 0.0); 3];
        for w in waves.iter_mut() {
            let dir: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = (dir.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-9);
            let wavelength = rng.gen_range(radius * 0.5..radius * 1.1);
            let k = std::f64::consts::TAU / wavelength;
            *w = (
                [dir[0] / norm * k, dir[1] / norm * k, dir[2] / norm * k],
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
        }
        TextureField { amp, waves }
    }

    fn factor(&self, z: usize, y: usize, x: usize) -> f64 {
        let p = [z as f64, y as f64, x as f64];
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phi)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phi).sin())
            .sum::<f64>()
            / 3.0;
        1.0 + self.amp * s
    }
}

/// Tissue intensity table per (modality, compartment).
fn base_intensity(m: Modality, code: u8, rim_t1c: f64) -> f64 {
    match (m, code) {
        (_, 0) => 1.0,
        (Modality::T1c, EDEMA) => 1.1,
        (Modality::T1c, NECROTIC_CORE) => 0.6,
        (Modality::T1c, ENHANCING) => rim_t1c,
        (Modality::T2, EDEMA) => 2.0,
        (Modality::T2, NECROTIC_CORE) => 2.2,
        (Modality::T2, ENHANCING) => 1.4,
        (Modality::Flair, EDEMA) => 2.5,
        (Modality::Flair, NECROTIC_CORE) => 1.7,
        (Modality::Flair, ENHANCING) => 1.5,
        _ => 1.0,
    }
}

/// Generate one phantom case. Pure function of (spec, labels, seed): calling
/// it twice yields bit-identical records.
pub fn generate_case(
    spec: &PhantomSpec,
    labels: CaseLabels,
    seed: u64,
    case_id: &str,
) -> Result<CaseRecord> {
    spec.validate()?;
    let shape = spec.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // tumor morphology
    let (r_lo, r_hi) = spec.radius_range;
    let radius = rng.gen_range(r_lo..r_hi);
    let a_mean = spec.rim_irregularity.get(labels.idh);
    let irregularity = (a_mean + rng.sample::<f64, _>(rand_distr::StandardNormal) * spec.rim_irregularity_sd)
        .max(0.0);
    let mut coeffs = [0.0; 5];
    let mut norm = 0.0;
    for c in coeffs.iter_mut() {
        *c = rng.sample::<f64, _>(rand_distr::StandardNormal);
        norm += *c * *c;
    }
    let norm = norm.sqrt().max(1e-9);
    for c in coeffs.iter_mut() {
        *c /= norm;
    }
    let thickness =
        spec.rim_thickness_fraction.get(labels.idh) * radius * rng.gen_range(0.75..1.25);
    let rim_t1c =
        spec.rim_intensity.get(labels.idh) + rng.gen_range(-spec.rim_intensity_jitter..=spec.rim_intensity_jitter);

    // placement: frontal with the codel-conditional probability
    let atlas = build_atlas(shape)?;
    let frontal = rng.gen_bool(spec.frontal_probability.get(labels.codel));
    let reach = radius * (1.0 + irregularity) * spec.edema_extent + 2.0;
    // Only the solid tumor (core + rim) must fit inside the brain ellipsoid;
    // edema may clip at the brain boundary (the rasteriser masks it out).
    let candidates: Vec<(usize, usize, usize)> = atlas
        .labels
        .indexed_iter()
        .filter(|(_, &c)| c != 0)
        .filter(|((z, y, x), &c)| {
            let is_frontal = c == Region::Frontal.index() as u8 + 1;
            is_frontal == frontal && sphere_fits((*z, *y, *x), radius, shape)
        })
        .map(|(idx, _)| idx)
        .collect();
    if candidates.is_empty() {
        return Err(CoreError::Config(format!(
            "no feasible tumor centre for radius {radius:.1} in shape {shape:?}"
        )));
    }
    let (cz, cy, cx) = candidates[rng.gen_range(0..candidates.len())];
    let geom = TumorGeometry {
        center: [cz as f64, cy as f64, cx as f64],
        radius,
        irregularity,
        thickness,
        coeffs,
        edema_extent: spec.edema_extent,
    };

    // label grid
    let mut mask = Array3::<u8>::zeros(shape);
    let reach_i = reach.ceil() as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let (z0, z1) = (clamp(cz as i64 - reach_i, shape.0), clamp(cz as i64 + reach_i, shape.0));
    let (y0, y1) = (clamp(cy as i64 - reach_i, shape.1), clamp(cy as i64 + reach_i, shape.1));
    let (x0, x1) = (clamp(cx as i64 - reach_i, shape.2), clamp(cx as i64 + reach_i, shape.2));
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let code = geom.label_at(z, y, x);
                if code != 0 && in_brain(z, y, x, shape) {
                    mask[[z, y, x]] = code;
                }
            }
        }
    }
    let mask = MultiClassMask::new(mask)?;

    // intensities
    let texture =
        TextureField::sample(&mut rng, spec.texture_heterogeneity.get(labels.codel), radius);
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).unwrap();
    let mut modalities = BTreeMap::new();
    for &m in &[Modality::T1c, Modality::T2, Modality::Flair] {
        let mut data = Array3::<f64>::zeros(shape);
        for ((z, y, x), v) in data.indexed_iter_mut() {
            if !in_brain(z, y, x, shape) {
                continue;
            }
            let code = mask.labels[[z, y, x]];
            let mut val = base_intensity(m, code, rim_t1c);
            if code != 0 {
                val *= texture.factor(z, y, x);
            }
            *v = val + noise.sample(&mut rng);
        }
        modalities.insert(m, Volume::new(data, spec.spacing_mm)?);
    }

    // clinical scalars
    let age = Normal::new(spec.age_mean.get(labels.idh), spec.age_sd.get(labels.idh))
        .map_err(|e| CoreError::Config(format!("age distribution: {e}")))?
        .sample(&mut rng)
        .max(0.0);
    let sex = if rng.gen_bool(0.5) { Sex::F } else { Sex::M };
    let median = spec.os_median_months.get(labels.idh);
    let os = Exp::new(std::f64::consts::LN_2 / median)
        .map_err(|e| CoreError::Config(format!("OS distribution: {e}")))?
        .sample(&mut rng);
    let censored = rng.gen_bool(spec.censoring_probability);
    let (os_months, event) = if censored {
        // censoring time uniform over the (unobserved) survival time
        (os * rng.gen_range(0.0..1.0), Event::Censored)
    } else {
        (os, Event::Observed)
    };

    Ok(CaseRecord {
        meta: CaseMeta {
            case_id: case_id.to_string(),
            age_years: age,
            sex,
            grade: labels.grade,
            idh: labels.idh,
            codel: labels.codel,
            os_months: Some(os_months),
            event: Some(event),
        },
        modalities,
        mask,
    })
}

/// Whether a sphere of radius `reach` centred at the voxel stays inside the
/// brain ellipsoid.
fn sphere_fits(center: (usize, usize, usize), reach: f64, shape: (usize, usize, usize)) -> bool {
    let (d, h, w) = shape;
    let axes = [0.46 * d as f64, 0.46 * h as f64, 0.46 * w as f64];
    let c = [
        (d as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
    ];
    let p = [center.0 as f64, center.1 as f64, center.2 as f64];
    let mut s = 0.0;
    for i in 0..3 {
        let a = axes[i] - reach;
        if a <= 0.0 {
            return false;
        }
        let t = (p[i] - c[i]) / a;
        s += t * t;
    }
    s <= 1.0
}
