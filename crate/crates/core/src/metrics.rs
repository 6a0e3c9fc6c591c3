//! Overlap and surface-distance metrics for 3D binary masks.
//!
//! A surface voxel is a foreground voxel with at least one 6-connected
//! neighbour that is background or outside the volume. Surface distances are
//! exact Euclidean distances in millimetres, computed with a separable squared
//! distance transform.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::percentile_sorted;
use crate::volume::{LabelVolume, Shape3};

/// Default surface tolerance of [`nsd`], in millimetres.
pub const DEFAULT_NSD_TAU: f64 = 1.0;

fn check_pair(pred: &[bool], gt: &[bool], shape: Option<Shape3>) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    if let Some(s) = shape {
        if s.len() != pred.len() {
            return Err(Error::Input(format!("masks have {} voxels, shape {:?} needs {}", pred.len(), s, s.len())));
        }
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_pair(pred, gt, None)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Surface voxels of `mask`, as linear indices in ascending order.
pub fn surface_voxels(mask: &[bool], shape: Shape3) -> Vec<usize> {
    let (nz, ny, nx) = (shape.slices, shape.height, shape.width);
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = shape.index(z, y, x);
                if !mask[i] {
                    continue;
                }
                let edge = z == 0 || z + 1 == nz || y == 0 || y + 1 == ny || x == 0 || x + 1 == nx;
                if edge
                    || !mask[i - 1]
                    || !mask[i + 1]
                    || !mask[i - nx]
                    || !mask[i + nx]
                    || !mask[i - nx * ny]
                    || !mask[i + nx * ny]
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// 1D lower envelope pass of the squared distance transform over points `i * step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * step;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + pos(q) * pos(q);
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (fq - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest voxel in `sites`.
pub fn squared_distance_map(sites: &[usize], shape: Shape3, spacing: [f64; 3]) -> Vec<f64> {
    let (nz, ny, nx) = (shape.slices, shape.height, shape.width);
    let mut d = vec![f64::INFINITY; shape.len()];
    for &s in sites {
        d[s] = 0.0;
    }
    let n = nz.max(ny).max(nx);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut zb) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut pass = |d: &mut [f64], len: usize, step: f64, idx: &dyn Fn(usize, usize) -> usize, lines: usize| {
        for line in 0..lines {
            for i in 0..len {
                f[i] = d[idx(line, i)];
            }
            edt_1d(&f[..len], step, &mut out[..len], &mut v, &mut zb);
            for i in 0..len {
                d[idx(line, i)] = out[i];
            }
        }
    };
    pass(&mut d, nx, spacing[2], &|line, i| line * nx + i, nz * ny);
    pass(&mut d, ny, spacing[1], &|line, i| (line / nx) * nx * ny + i * nx + line % nx, nz * nx);
    pass(&mut d, nz, spacing[0], &|line, i| i * nx * ny + line, ny * nx);
    d
}

/// Distances from each surface voxel of one mask to the other mask's surface, both directions.
fn surface_distances(pred: &[bool], gt: &[bool], shape: Shape3, spacing: [f64; 3]) -> Option<(Vec<f64>, Vec<f64>)> {
    let sp = surface_voxels(pred, shape);
    let sg = surface_voxels(gt, shape);
    if sp.is_empty() || sg.is_empty() {
        return None;
    }
    let to_gt = squared_distance_map(&sg, shape, spacing);
    let to_pred = squared_distance_map(&sp, shape, spacing);
    let a = sp.iter().map(|&i| to_gt[i].sqrt()).collect();
    let b = sg.iter().map(|&i| to_pred[i].sqrt()).collect();
    Some((a, b))
}

/// 95th percentile (linear interpolation) of the pooled symmetric surface distances,
/// `None` when either mask is empty.
pub fn hd95(pred: &[bool], gt: &[bool], shape: Shape3, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_pair(pred, gt, Some(shape))?;
    Ok(surface_distances(pred, gt, shape, spacing).map(|(a, b)| {
        let mut all: Vec<f64> = a.into_iter().chain(b).collect();
        all.sort_by(f64::total_cmp);
        percentile_sorted(&all, 95.0)
    }))
}

/// Mean over both directions of the fraction of surface voxels within `tau` mm of
/// the other surface, `None` when either mask is empty.
pub fn nsd(pred: &[bool], gt: &[bool], shape: Shape3, spacing: [f64; 3], tau: f64) -> Result<Option<f64>> {
    check_pair(pred, gt, Some(shape))?;
    Ok(surface_distances(pred, gt, shape, spacing).map(|(a, b)| {
        let frac = |d: &[f64]| d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64;
        0.5 * (frac(&a) + frac(&b))
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    /// Millimetres; `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub nsd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Classes absent from both prediction and ground truth map to `None`.
    pub per_class: BTreeMap<u8, Option<ClassMetrics>>,
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
    pub mean_nsd: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    fn from_classes(per_class: BTreeMap<u8, Option<ClassMetrics>>) -> Self {
        let present = || per_class.values().flatten();
        Self {
            mean_dsc: mean(present().map(|m| m.dsc)),
            mean_hd95: mean(present().filter_map(|m| m.hd95)),
            mean_nsd: mean(present().filter_map(|m| m.nsd)),
            per_class,
        }
    }
}

/// Per-class metrics of a label prediction against ground truth, classes `1..=n_classes`.
pub fn evaluate(
    pred: &LabelVolume,
    gt: &LabelVolume,
    spacing: [f64; 3],
    n_classes: usize,
    tau: f64,
) -> Result<MetricReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::Input(format!("prediction {:?} and ground truth {:?} differ", pred.shape(), gt.shape())));
    }
    let shape = gt.shape();
    let mut per_class = BTreeMap::new();
    for k in 1..=n_classes as u8 {
        let a = pred.class_mask(k);
        let b = gt.class_mask(k);
        let entry = if !a.iter().any(|&v| v) && !b.iter().any(|&v| v) {
            None
        } else {
            Some(ClassMetrics {
                dsc: dsc(&a, &b)?,
                hd95: hd95(&a, &b, shape, spacing)?,
                nsd: nsd(&a, &b, shape, spacing, tau)?,
            })
        };
        per_class.insert(k, entry);
    }
    Ok(MetricReport::from_classes(per_class))
}

/// Pools per-class entries of several volume reports into one report
/// (means are over every present (volume, class) entry).
pub fn aggregate(reports: &[MetricReport]) -> MetricReport {
    let mut per_class: BTreeMap<u8, Vec<&ClassMetrics>> = BTreeMap::new();
    for r in reports {
        for (k, m) in &r.per_class {
            let slot = per_class.entry(*k).or_default();
            if let Some(m) = m {
                slot.push(m);
            }
        }
    }
    let all: Vec<&ClassMetrics> = per_class.values().flatten().copied().collect();
    let class_means = per_class
        .iter()
        .map(|(k, ms)| {
            let m = (!ms.is_empty()).then(|| ClassMetrics {
                dsc: mean(ms.iter().map(|m| m.dsc)).unwrap(),
                hd95: mean(ms.iter().filter_map(|m| m.hd95)),
                nsd: mean(ms.iter().filter_map(|m| m.nsd)),
            });
            (*k, m)
        })
        .collect();
    MetricReport {
        per_class: class_means,
        mean_dsc: mean(all.iter().map(|m| m.dsc)),
        mean_hd95: mean(all.iter().filter_map(|m| m.hd95)),
        mean_nsd: mean(all.iter().filter_map(|m| m.nsd)),
    }
}
