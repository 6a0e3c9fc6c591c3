//! On-disk volume format: a raw little-endian array (`<stem>.raw`) next to a
//! JSON sidecar (`<stem>.json`) describing shape, spacing, modality and dtype.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Modality, Shape3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Uint8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub dtype: Dtype,
}

/// Paths of the raw array and sidecar for a stem such as `out/vol_0003`.
/// A stem given with a `.json` or `.raw` extension is normalized.
pub fn stem_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let stem = match stem.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => stem.with_extension(""),
        _ => stem.to_path_buf(),
    };
    let mut raw = stem.clone().into_os_string();
    raw.push(".raw");
    let mut json = stem.into_os_string();
    json.push(".json");
    (raw.into(), json.into())
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

fn read_sidecar(path: &Path, expect: Dtype) -> Result<Sidecar> {
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(path)?)?;
    if sidecar.dtype != expect {
        return Err(Error::Input(format!(
            "{} has dtype {:?}, expected {expect:?}",
            path.display(),
            sidecar.dtype
        )));
    }
    Ok(sidecar)
}

pub fn write_volume(volume: &Volume, stem: &Path) -> Result<()> {
    let (raw, json) = stem_paths(stem);
    let bytes: Vec<u8> = volume.voxels().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(raw, bytes)?;
    write_sidecar(
        &json,
        &Sidecar {
            shape: volume.shape().as_array(),
            spacing: volume.spacing(),
            modality: volume.modality(),
            dtype: Dtype::Float32,
        },
    )
}

pub fn read_volume(stem: &Path) -> Result<Volume> {
    let (raw, json) = stem_paths(stem);
    let sc = read_sidecar(&json, Dtype::Float32)?;
    let bytes = fs::read(&raw)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Input(format!("{} is not a float32 array", raw.display())));
    }
    let voxels = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Volume::new(Shape3::new(sc.shape[0], sc.shape[1], sc.shape[2]), sc.spacing, sc.modality, voxels)
}

/// Writes labels with the geometry (spacing, modality) of their paired volume.
pub fn write_labels(labels: &LabelVolume, spacing: [f64; 3], modality: Modality, stem: &Path) -> Result<()> {
    let (raw, json) = stem_paths(stem);
    fs::write(raw, labels.labels())?;
    write_sidecar(
        &json,
        &Sidecar { shape: labels.shape().as_array(), spacing, modality, dtype: Dtype::Uint8 },
    )
}

pub fn read_labels(stem: &Path) -> Result<(LabelVolume, Sidecar)> {
    let (raw, json) = stem_paths(stem);
    let sc = read_sidecar(&json, Dtype::Uint8)?;
    let labels = LabelVolume::new(Shape3::new(sc.shape[0], sc.shape[1], sc.shape[2]), fs::read(raw)?)?;
    Ok((labels, sc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn volume_round_trip_is_bit_exact(
            dims in (1usize..4, 1usize..6, 1usize..6),
            seed in any::<u64>(),
        ) {
            let shape = Shape3::new(dims.0, dims.1, dims.2);
            let voxels: Vec<f32> = (0..shape.len())
                .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 40) as u32 & 0x3fff_ffff))
                .collect();
            let vol = Volume::new(shape, [2.5, 0.7, 0.7], Modality::Ct, voxels).unwrap();
            let labels = LabelVolume::new(shape, (0..shape.len()).map(|i| (i % 5) as u8).collect()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            write_volume(&vol, &dir.path().join("v")).unwrap();
            write_labels(&labels, vol.spacing(), vol.modality(), &dir.path().join("l")).unwrap();
            let back = read_volume(&dir.path().join("v.json")).unwrap();
            let bits = |v: &Volume| v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&vol));
            prop_assert_eq!(back.spacing(), vol.spacing());
            let (lback, sc) = read_labels(&dir.path().join("l")).unwrap();
            prop_assert_eq!(lback, labels);
            prop_assert_eq!(sc.dtype, Dtype::Uint8);
        }
    }

    #[test]
    fn sidecar_layout() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new(Shape3::new(1, 1, 2), [1.0, 1.0, 1.0], Modality::Synth, vec![1.0, -2.0]).unwrap();
        write_volume(&vol, &dir.path().join("a")).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a.json")).unwrap()).unwrap();
        assert_eq!(json["shape"], serde_json::json!([1, 1, 2]));
        assert_eq!(json["modality"], "SYNTH");
        assert_eq!(json["dtype"], "float32");
        assert_eq!(fs::read(dir.path().join("a.raw")).unwrap(), [1.0f32.to_le_bytes(), (-2.0f32).to_le_bytes()].concat());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelVolume::zeros(Shape3::new(1, 2, 2));
        write_labels(&labels, [1.0; 3], Modality::Synth, &dir.path().join("l")).unwrap();
        assert!(read_volume(&dir.path().join("l")).is_err());
    }
}
