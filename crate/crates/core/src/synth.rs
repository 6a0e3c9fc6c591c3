//! Reproducible synthetic multi-organ volumes and intensity preprocessing.
//!
//! Each foreground class is a union of ellipsoidal "organs" whose in-plane radii
//! are modulated slice by slice, so every organ spans several consecutive slices
//! with smoothly varying cross-sections.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::volume::{LabelVolume, Modality, Shape3, Volume};

/// CT intensity window applied before rescaling, in HU.
pub const CT_CLIP: (f64, f64) = (-175.0, 250.0);
/// MR intensity percentiles used for clipping.
pub const MR_PERCENTILES: (f64, f64) = (0.5, 99.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_volumes: usize,
    /// Trailing volumes held out for validation.
    pub n_val: usize,
    pub shape: [usize; 3],
    pub n_classes: usize,
    pub blob_count_range: (usize, usize),
    /// In-plane radius range in voxels.
    pub blob_radius_range: (f64, f64),
    /// Through-plane radius range in slices.
    pub blob_z_radius_range: (f64, f64),
    /// Mean intensity step between consecutive classes.
    pub intensity_contrast: f64,
    /// Fraction of each organ's through-plane radius, at either pole, over which
    /// its class contrast is lost: there every class shares the mean organ
    /// intensity. A second band of the same width ramps linearly back to full
    /// contrast, so class identity near the poles is only recoverable from
    /// neighbouring slices.
    pub pole_fade: f64,
    pub noise_sigma: f64,
    pub spacing: [f64; 3],
    pub seed: u64,
    pub placement_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_volumes: 50,
            n_val: 10,
            shape: [32, 64, 64],
            n_classes: 4,
            blob_count_range: (1, 2),
            blob_radius_range: (6.0, 12.0),
            blob_z_radius_range: (3.0, 8.0),
            intensity_contrast: 40.0,
            pole_fade: 0.0,
            noise_sigma: 15.0,
            spacing: [2.0, 1.0, 1.0],
            seed: 17,
            placement_retries: 500,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("shape {:?} must be positive", self.shape)));
        }
        if self.n_val > self.n_volumes {
            return Err(Error::Config("n_val exceeds n_volumes".into()));
        }
        if self.n_classes > 255 {
            return Err(Error::Config("at most 255 classes".into()));
        }
        if self.n_classes > 0 {
            let (rmin, rmax) = self.blob_radius_range;
            let (zmin, zmax) = self.blob_z_radius_range;
            if !(rmin > 0.0 && rmin <= rmax && zmin >= 1.0 && zmin <= zmax) {
                return Err(Error::Config("invalid radius ranges".into()));
            }
            if 2.0 * rmax * 1.2 + 2.0 > h.min(w) as f64 || 2.0 * zmax + 1.0 > c as f64 {
                return Err(Error::Config(format!("radii do not fit within shape {:?}", self.shape)));
            }
            let (bmin, bmax) = self.blob_count_range;
            if bmin == 0 || bmin > bmax {
                return Err(Error::Config("blob count range must satisfy 1 <= min <= max".into()));
            }
        }
        if !(0.0..=0.5).contains(&self.pole_fade) {
            return Err(Error::Config("pole_fade must lie in [0, 0.5]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.intensity_contrast.is_finite()) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn shape3(&self) -> Shape3 {
        Shape3::new(self.shape[0], self.shape[1], self.shape[2])
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    phase: f64,
    period: f64,
}

impl Ellipsoid {
    /// Weight of the class-specific contrast on slice `z`.
    fn contrast_weight(&self, z: f64, fade: f64) -> f64 {
        if fade <= 0.0 {
            return 1.0;
        }
        let rest = 1.0 - ((z - self.center[0]) / self.radii[0]).abs();
        (rest / fade - 1.0).clamp(0.0, 1.0)
    }

    fn modulation(&self, z: f64) -> f64 {
        1.0 + 0.15 * (2.0 * PI * (z - self.center[0]) / self.period + self.phase).sin()
    }

    /// Voxels `(z, y, x)` inside the organ.
    fn voxels(&self, shape: Shape3) -> Vec<(usize, usize, usize)> {
        let [cz, cy, cx] = self.center;
        let [rz, ry, rx] = self.radii;
        let mut out = Vec::new();
        let z0 = (cz - rz).ceil().max(0.0) as usize;
        let z1 = ((cz + rz).floor() as usize).min(shape.slices - 1);
        for z in z0..=z1 {
            let dz = (z as f64 - cz) / rz;
            let frac = (1.0 - dz * dz).max(0.0).sqrt() * self.modulation(z as f64);
            let (ay, ax) = (ry * frac, rx * frac);
            let (iy, ix) = (cy.round() as usize, cx.round() as usize);
            let y0 = (cy - ay).floor().max(0.0) as usize;
            let y1 = ((cy + ay).ceil() as usize).min(shape.height - 1);
            let x0 = (cx - ax).floor().max(0.0) as usize;
            let x1 = ((cx + ax).ceil() as usize).min(shape.width - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let inside = if ay < 1e-9 || ax < 1e-9 {
                        false
                    } else {
                        let u = (y as f64 - cy) / ay;
                        let v = (x as f64 - cx) / ax;
                        u * u + v * v <= 1.0
                    };
                    if inside || (y == iy && x == ix) {
                        out.push((z, y, x));
                    }
                }
            }
        }
        out
    }
}

fn volume_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates volume `index`: raw synthetic intensities and the matching labels.
pub fn generate_volume(config: &SynthConfig, index: usize) -> Result<(Volume, LabelVolume)> {
    config.validate()?;
    if index >= config.n_volumes {
        return Err(Error::Bounds(format!("volume index {index} >= {}", config.n_volumes)));
    }
    let shape = config.shape3();
    let mut rng = volume_rng(config.seed, index);
    let mut labels = vec![0u8; shape.len()];
    // voxels claimed by placed organs plus a safety margin
    let mut reserved = vec![false; shape.len()];
    let mut contrast = vec![1.0f64; shape.len()];

    for class in 1..=config.n_classes {
        let (bmin, bmax) = config.blob_count_range;
        let count = rng.random_range(bmin..=bmax);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..config.placement_retries {
                let rz = rng.random_range(config.blob_z_radius_range.0..=config.blob_z_radius_range.1);
                let ry = rng.random_range(config.blob_radius_range.0..=config.blob_radius_range.1);
                let rx = rng.random_range(config.blob_radius_range.0..=config.blob_radius_range.1);
                let margin_xy = ry.max(rx) * 1.15 + 1.0;
                let cz = rng.random_range(rz + 1.0..=(shape.slices as f64 - 2.0 - rz).max(rz + 1.0));
                let cy = rng.random_range(margin_xy..=(shape.height as f64 - 1.0 - margin_xy).max(margin_xy));
                let cx = rng.random_range(margin_xy..=(shape.width as f64 - 1.0 - margin_xy).max(margin_xy));
                let organ = Ellipsoid {
                    center: [cz, cy, cx],
                    radii: [rz, ry, rx],
                    phase: rng.random_range(0.0..2.0 * PI),
                    period: rng.random_range(6.0..14.0),
                };
                let vox = organ.voxels(shape);
                if vox.is_empty() || vox.iter().any(|&(z, y, x)| reserved[shape.index(z, y, x)]) {
                    continue;
                }
                for &(z, y, x) in &vox {
                    let i = shape.index(z, y, x);
                    labels[i] = class as u8;
                    contrast[i] = organ.contrast_weight(z as f64, config.pole_fade);
                }
                reserve_with_margin(&mut reserved, &vox, shape, 1, 2);
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not place an organ of class {class} in volume {index} within {} retries",
                    config.placement_retries
                )));
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(1e-12)).expect("valid sigma");
    let shared = config.intensity_contrast * (config.n_classes as f64 + 1.0) / 2.0;
    let voxels: Vec<f32> = labels
        .iter()
        .zip(&contrast)
        .map(|(&l, &w)| {
            let n = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let mean = if l == 0 {
                0.0
            } else {
                shared + w * (l as f64 * config.intensity_contrast - shared)
            };
            (mean + n) as f32
        })
        .collect();
    let volume = Volume::new(shape, config.spacing, Modality::Synth, voxels)?;
    Ok((volume, LabelVolume::new(shape, labels)?))
}

fn reserve_with_margin(reserved: &mut [bool], vox: &[(usize, usize, usize)], shape: Shape3, mz: usize, mxy: usize) {
    for &(z, y, x) in vox {
        for zz in z.saturating_sub(mz)..=(z + mz).min(shape.slices - 1) {
            for yy in y.saturating_sub(mxy)..=(y + mxy).min(shape.height - 1) {
                for xx in x.saturating_sub(mxy)..=(x + mxy).min(shape.width - 1) {
                    reserved[shape.index(zz, yy, xx)] = true;
                }
            }
        }
    }
}

/// Linear-interpolation percentile of unsorted data, `q` in `[0, 100]`.
pub fn percentile(values: &[f32], q: f64) -> f64 {
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile_sorted(&sorted, q)
}

pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn rescale(values: &[f32], lo: f64, hi: f64) -> Vec<f32> {
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v as f64).clamp(lo, hi) - lo) / (hi - lo) * 255.0) as f32)
        .collect()
}

/// Modality-dependent clip and rescale to `[0, 255]`. A constant volume maps to zeros.
pub fn preprocess(volume: &Volume) -> Result<Volume> {
    let v = volume.voxels();
    let out = match volume.modality() {
        Modality::Ct => rescale(v, CT_CLIP.0, CT_CLIP.1),
        Modality::Mr => rescale(v, percentile(v, MR_PERCENTILES.0), percentile(v, MR_PERCENTILES.1)),
        Modality::Synth => {
            let lo = v.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            rescale(v, lo, hi)
        }
    };
    volume.with_voxels(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn volume_name(index: usize) -> String {
    format!("vol_{index:04}")
}

pub fn label_name(name: &str) -> String {
    name.replacen("vol_", "lab_", 1)
}

/// Generates every volume of `config` into `out` and writes `manifest.json`.
pub fn write_dataset(config: &SynthConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out)?;
    (0..config.n_volumes).into_par_iter().try_for_each(|i| -> Result<()> {
        let (vol, lab) = generate_volume(config, i)?;
        let name = volume_name(i);
        io::write_volume(&vol, &out.join(&name))?;
        io::write_labels(&lab, vol.spacing(), vol.modality(), &out.join(label_name(&name)))
    })?;
    let n_train = config.n_volumes - config.n_val;
    let manifest = Manifest {
        config: config.clone(),
        train: (0..n_train).map(volume_name).collect(),
        val: (n_train..config.n_volumes).map(volume_name).collect(),
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}

/// A loaded, preprocessed example.
#[derive(Clone, Debug)]
pub struct Example {
    pub name: String,
    pub volume: Volume,
    pub labels: LabelVolume,
}

pub fn load_example(dir: &Path, name: &str) -> Result<Example> {
    let volume = preprocess(&io::read_volume(&dir.join(name))?)?;
    let (labels, _) = io::read_labels(&dir.join(label_name(name)))?;
    if labels.shape() != volume.shape() {
        return Err(Error::Shape(format!("labels of {name} do not match its volume")));
    }
    Ok(Example { name: name.to_string(), volume, labels })
}

/// In-memory dataset straight from a config, skipping the filesystem.
pub fn generate_examples(config: &SynthConfig, indices: impl IntoIterator<Item = usize>) -> Result<Vec<Example>> {
    let idx: Vec<usize> = indices.into_iter().collect();
    idx.into_par_iter()
        .map(|i| {
            let (vol, labels) = generate_volume(config, i)?;
            Ok(Example { name: volume_name(i), volume: preprocess(&vol)?, labels })
        })
        .collect()
}

pub fn dataset_paths(dir: &Path, names: &[String]) -> Vec<PathBuf> {
    names.iter().map(|n| dir.join(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_classes_gives_pure_noise() {
        let cfg = SynthConfig { n_classes: 0, n_volumes: 1, n_val: 0, ..Default::default() };
        let (vol, lab) = generate_volume(&cfg, 0).unwrap();
        assert!(lab.labels().iter().all(|&l| l == 0));
        assert!(vol.voxels().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pole_fade_hides_class_near_the_poles() {
        let ellipsoid = Ellipsoid { center: [10.0, 0.0, 0.0], radii: [5.0, 1.0, 1.0], phase: 0.0, period: 8.0 };
        assert_eq!(ellipsoid.contrast_weight(10.0, 0.3), 1.0);
        assert_eq!(ellipsoid.contrast_weight(12.0, 0.3), 1.0);
        assert!((ellipsoid.contrast_weight(12.5, 0.3) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ellipsoid.contrast_weight(14.0, 0.3), 0.0);
        assert_eq!(ellipsoid.contrast_weight(14.0, 0.0), 1.0);

        let cfg = SynthConfig { noise_sigma: 0.0, pole_fade: 0.3, n_volumes: 1, n_val: 0, ..Default::default() };
        let (vol, lab) = generate_volume(&cfg, 0).unwrap();
        let shared = cfg.intensity_contrast * 2.5;
        let mut faded = 0;
        for (&v, &l) in vol.voxels().iter().zip(lab.labels()) {
            if l == 0 {
                assert_eq!(v, 0.0);
            } else {
                let full = l as f64 * cfg.intensity_contrast;
                let (lo, hi) = (full.min(shared), full.max(shared));
                assert!((lo - 1e-3..=hi + 1e-3).contains(&(v as f64)));
                faded += ((v as f64 - shared).abs() < 1e-3) as usize;
            }
        }
        assert!(faded > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let (a, la) = generate_volume(&cfg, 3).unwrap();
        let (b, lb) = generate_volume(&cfg, 3).unwrap();
        let bits = |v: &Volume| v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(la, lb);
        let (c, _) = generate_volume(&cfg, 4).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn impossible_placement_names_the_class() {
        let cfg = SynthConfig {
            shape: [8, 20, 20],
            blob_radius_range: (6.0, 6.0),
            blob_z_radius_range: (2.0, 2.0),
            blob_count_range: (3, 3),
            n_classes: 2,
            placement_retries: 20,
            ..Default::default()
        };
        match generate_volume(&cfg, 0) {
            Err(Error::Generation(msg)) => assert!(msg.contains("class")),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn index_out_of_range() {
        let cfg = SynthConfig::default();
        assert!(matches!(generate_volume(&cfg, 50), Err(Error::Bounds(_))));
    }

    #[test]
    fn ct_clip_bounds() {
        let vol = Volume::new(Shape3::new(1, 1, 3), [1.0; 3], Modality::Ct, vec![400.0, -175.0, 37.5]).unwrap();
        let out = preprocess(&vol).unwrap();
        assert_eq!(out.voxels()[0], 255.0);
        assert_eq!(out.voxels()[1], 0.0);
        assert!((out.voxels()[2] - 127.5).abs() < 1e-4);
    }

    #[test]
    fn constant_volume_maps_to_zero() {
        for m in [Modality::Mr, Modality::Synth] {
            let vol = Volume::new(Shape3::new(2, 2, 2), [1.0; 3], m, vec![500.0; 8]).unwrap();
            assert!(preprocess(&vol).unwrap().voxels().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mr_clips_at_percentiles() {
        let mut v: Vec<f32> = (0..1000).map(|i| i as f32).collect();
        v[999] = 1e6;
        let vol = Volume::new(Shape3::new(1, 10, 100), [1.0; 3], Modality::Mr, v.clone()).unwrap();
        let out = preprocess(&vol).unwrap();
        let lo = percentile(&v, 0.5);
        assert_eq!(out.voxels()[999], 255.0);
        assert_eq!(out.voxels()[0], 0.0);
        assert!(lo > 0.0);
        assert!(out.voxels().iter().all(|x| (0.0..=255.0).contains(x)));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[5.0], 99.5), 5.0);
    }

    proptest::proptest! {
        #[test]
        fn preprocessed_values_stay_in_range(v in proptest::collection::vec(-2000.0f32..2000.0, 8), m in 0..3u8) {
            let modality = [Modality::Ct, Modality::Mr, Modality::Synth][m as usize];
            let vol = Volume::new(Shape3::new(2, 2, 2), [1.0; 3], modality, v).unwrap();
            let out = preprocess(&vol).unwrap();
            proptest::prop_assert!(out.voxels().iter().all(|x| (0.0..=255.0).contains(x)));
        }
    }
}
