//! Click-driven center initialization, multi-round feature accumulation, round
//! fusion and the simulated-annotator protocol.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::squared_distance_map;
use crate::model::{Bound, Params};
use crate::tensor::Tensor;
use crate::volume::{
    CenterStatus, Click, ClusterCenter, FeatureMap, LabelVolume, Mask2, MaskScoreVolume, Polarity, Shape3,
};

/// Weight of the previous rounds' accumulated click feature.
pub const DEFAULT_BETA: f64 = 0.8;
/// Default cap on refinement rounds in the simulated protocol.
pub const DEFAULT_MAX_ROUNDS: usize = 15;

/// Feature-map cell under an input-resolution position.
pub fn feature_cell(features: &FeatureMap, row: usize, col: usize) -> Result<(usize, usize)> {
    let (y, x) = (row / features.stride, col / features.stride);
    if y >= features.height || x >= features.width {
        return Err(Error::Input(format!(
            "position ({row}, {col}) outside a {}x{} feature map at stride {}",
            features.height, features.width, features.stride
        )));
    }
    Ok((y, x))
}

/// The D-vector of `features` at the cell covering `(row, col)`.
pub fn sample_point_feature(features: &FeatureMap, row: usize, col: usize) -> Result<Vec<f64>> {
    let (y, x) = feature_cell(features, row, col)?;
    Ok(features.pixel(y, x))
}

/// `O^r + β Ô^{r-1}`, or `O^1` on the first round.
pub fn adaptive_combine(current: &[f64], previous: Option<&[f64]>, beta: f64) -> Vec<f64> {
    match previous {
        None => current.to_vec(),
        Some(prev) => current.iter().zip(prev).map(|(o, p)| o + beta * p).collect(),
    }
}

/// Graph form of the click projection: `O + W2 relu(W1 O + b1) + b2` on `[m, D]` rows.
pub fn click_ffn_graph(g: &mut Graph, b: &mut Bound, features: Var) -> Var {
    let ff = b.ffn(g, features, "click.ffn");
    g.add(features, ff)
}

/// Center seeded from an accumulated click feature.
pub fn init_center_from_click(o_hat: &[f64], class_id: u8, round: u32, params: &Params) -> Result<ClusterCenter> {
    if o_hat.len() != params.config.dim {
        return Err(Error::Shape(format!("click feature has length {}, expected {}", o_hat.len(), params.config.dim)));
    }
    let mut g = Graph::new();
    let mut b = Bound::new(params, false);
    let x = g.constant(Tensor::new(vec![1, o_hat.len()], o_hat.to_vec()));
    let y = click_ffn_graph(&mut g, &mut b, x);
    Ok(ClusterCenter {
        embedding: g.value(y).data.clone(),
        status: CenterStatus::ClickSeeded,
        class_id,
        source_round: round,
    })
}

/// Per-voxel maximum over rounds of (mask score × class score) volumes.
pub fn combine_rounds(rounds: &[MaskScoreVolume]) -> Result<MaskScoreVolume> {
    let first = rounds.first().ok_or_else(|| Error::Input("no rounds to combine".into()))?;
    let mut out = first.clone();
    for r in &rounds[1..] {
        fuse_round(&mut out, r)?;
    }
    Ok(out)
}

/// Folds one more round into an accumulated result.
pub fn fuse_round(acc: &mut MaskScoreVolume, round: &MaskScoreVolume) -> Result<()> {
    if acc.shape() != round.shape() || acc.n_classes() != round.n_classes() {
        return Err(Error::Input("round score volumes differ in shape".into()));
    }
    for k in 1..=acc.n_classes() as u8 {
        for z in 0..acc.shape().slices {
            acc.max_assign(k, z, round.class_slice(k, z));
        }
    }
    Ok(())
}

/// Interior point farthest from the mask boundary (pixels outside the slice count
/// as background); ties go to the lowest row-major index.
pub fn distance_center(mask: &Mask2) -> Result<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    if mask.count() == 0 {
        return Err(Error::Input("cannot place a click in an empty mask".into()));
    }
    let padded = Shape3::new(1, h + 2, w + 2);
    let mut sites = Vec::new();
    for y in 0..h + 2 {
        for x in 0..w + 2 {
            let inside = y >= 1 && y <= h && x >= 1 && x <= w && mask.get(y - 1, x - 1);
            if !inside {
                sites.push(padded.index(0, y, x));
            }
        }
    }
    let d = squared_distance_map(&sites, padded, [1.0; 3]);
    let mut best = (0, 0);
    let mut best_d = -1.0;
    for y in 0..h {
        for x in 0..w {
            let v = d[padded.index(0, y + 1, x + 1)];
            if mask.get(y, x) && v > best_d {
                best_d = v;
                best = (y, x);
            }
        }
    }
    Ok(best)
}

/// Positive click at the distance-transform center of a ground-truth slice mask.
pub fn simulate_first_click(mask: &Mask2, slice_index: usize, class_id: u8) -> Result<Click> {
    let (row, col) = distance_center(mask)?;
    Ok(Click::positive(slice_index, row, col, class_id))
}

/// A 6-connected error region of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorComponent {
    pub class_id: u8,
    /// Positive for missed foreground, negative for spurious foreground.
    pub polarity: Polarity,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
}

/// 6-connected components of `mask`, each as ascending voxel indices, in scan order of their first voxel.
pub fn connected_components(mask: &[bool], shape: Shape3) -> Vec<Vec<usize>> {
    let (nz, ny, nx) = (shape.slices, shape.height, shape.width);
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (z, rem) = (i / (ny * nx), i % (ny * nx));
            let (y, x) = (rem / nx, rem % nx);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 { visit(i - 1) }
            if x + 1 < nx { visit(i + 1) }
            if y > 0 { visit(i - nx) }
            if y + 1 < ny { visit(i + nx) }
            if z > 0 { visit(i - nx * ny) }
            if z + 1 < nz { visit(i + nx * ny) }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Largest error component over all classes and both error kinds. Ties keep the
/// first found (class ascending, misses before spurious regions, scan order).
/// Classes in `skip` are ignored.
pub fn largest_error_component(
    pred: &LabelVolume,
    gt: &LabelVolume,
    n_classes: usize,
    skip: &[u8],
) -> Result<Option<ErrorComponent>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Input("prediction and ground truth shapes differ".into()));
    }
    let shape = gt.shape();
    let mut best: Option<ErrorComponent> = None;
    for k in 1..=n_classes as u8 {
        if skip.contains(&k) {
            continue;
        }
        for polarity in [Polarity::Positive, Polarity::Negative] {
            let err: Vec<bool> = pred
                .labels()
                .iter()
                .zip(gt.labels())
                .map(|(&p, &t)| match polarity {
                    Polarity::Positive => t == k && p != k,
                    Polarity::Negative => p == k && t != k,
                })
                .collect();
            for comp in connected_components(&err, shape) {
                if best.as_ref().is_none_or(|b| comp.len() > b.voxels.len()) {
                    best = Some(ErrorComponent { class_id: k, polarity, voxels: comp });
                }
            }
        }
    }
    Ok(best)
}

/// Click on the largest error region: on its largest-area slice (lowest index on
/// ties), at that cross-section's distance-transform center. `None` when the
/// prediction already matches the ground truth.
pub fn simulate_refine_click(pred: &LabelVolume, gt: &LabelVolume, n_classes: usize, skip: &[u8]) -> Result<Option<Click>> {
    let Some(comp) = largest_error_component(pred, gt, n_classes, skip)? else { return Ok(None) };
    let shape = gt.shape();
    let slice_len = shape.slice_len();
    let mut per_slice: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &comp.voxels {
        *per_slice.entry(i / slice_len).or_default() += 1;
    }
    let (&z, _) = per_slice.iter().fold((&0, &0), |acc, e| if e.1 > acc.1 { e } else { acc });
    let mut data = vec![false; slice_len];
    for &i in &comp.voxels {
        if i / slice_len == z {
            data[i % slice_len] = true;
        }
    }
    let mask = Mask2 { height: shape.height, width: shape.width, data };
    let (row, col) = distance_center(&mask)?;
    Ok(Some(match comp.polarity {
        Polarity::Positive => Click::positive(z, row, col, comp.class_id),
        Polarity::Negative => Click::negative(z, row, col, comp.class_id),
    }))
}

/// Clicks accepted so far, enforcing the per-class capacity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClickLedger {
    pub per_class_capacity: usize,
    pub clicks: Vec<Click>,
}

impl ClickLedger {
    pub fn new(per_class_capacity: usize) -> Self {
        Self { per_class_capacity, clicks: Vec::new() }
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.clicks.iter().filter(|c| c.class_id == class_id).count()
    }

    pub fn is_full(&self, class_id: u8) -> bool {
        self.count(class_id) >= self.per_class_capacity
    }

    /// Records `click`, rejecting it once its class already holds `per_class_capacity` clicks.
    pub fn push(&mut self, click: Click) -> Result<()> {
        if self.is_full(click.class_id) {
            return Err(Error::ClickCapacity { class_id: click.class_id, capacity: self.per_class_capacity });
        }
        self.clicks.push(click);
        Ok(())
    }

    /// Classes that cannot take another click.
    pub fn full_classes(&self, n_classes: usize) -> Vec<u8> {
        (1..=n_classes as u8).filter(|&k| self.is_full(k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Mask2 {
        let mut data = vec![false; h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] = true;
            }
        }
        Mask2 { height: h, width: w, data }
    }

    #[test]
    fn point_sampling_uses_integer_division() {
        let fm = FeatureMap::new(2, 3, 4, 4, (0..24).map(|v| v as f64).collect()).unwrap();
        assert_eq!(sample_point_feature(&fm, 0, 0).unwrap(), vec![0.0, 12.0]);
        assert_eq!(sample_point_feature(&fm, 5, 9).unwrap(), vec![6.0, 18.0]);
        assert!(sample_point_feature(&fm, 12, 0).is_err());
    }

    #[test]
    fn adaptive_combine_values() {
        let o2 = adaptive_combine(&[0.5], Some(&[1.0]), 0.8);
        assert!((o2[0] - 1.3).abs() < 1e-12);
        assert_eq!(adaptive_combine(&[0.5], Some(&[7.0]), 0.0), vec![0.5]);
        let mut acc = adaptive_combine(&[1.0], None, 0.8);
        for _ in 0..2 {
            acc = adaptive_combine(&[1.0], Some(&acc), 0.8);
        }
        assert!((acc[0] - 2.44).abs() < 1e-12);
    }

    #[test]
    fn click_centers() {
        let mut p = Params::init(&crate::model::ModelConfig { dim: 8, ..Default::default() }).unwrap();
        let c = init_center_from_click(&[0.0; 8], 2, 1, &p).unwrap();
        assert_eq!(c.status, CenterStatus::ClickSeeded);
        assert_eq!(c.class_id, 2);
        assert!(c.embedding.iter().all(|&v| v == 0.0));
        p.zero_prefix("click.ffn.w2");
        p.zero_prefix("click.ffn.b2");
        let o: Vec<f64> = (0..8).map(|v| v as f64 - 3.0).collect();
        assert_eq!(init_center_from_click(&o, 1, 1, &p).unwrap().embedding, o);
    }

    #[test]
    fn first_click_locations() {
        assert_eq!(distance_center(&rect(9, 9, 2, 7, 1, 8)).unwrap(), (4, 3));
        assert_eq!(distance_center(&rect(6, 6, 3, 4, 2, 3)).unwrap(), (3, 2));
        let c = simulate_first_click(&rect(4, 4, 0, 4, 0, 4), 2, 3).unwrap();
        assert_eq!((c.slice_index, c.row, c.col, c.class_id), (2, 1, 1, 3));
        assert!(simulate_first_click(&rect(3, 3, 0, 0, 0, 0), 0, 1).is_err());
    }

    #[test]
    fn refine_click_targets_the_missed_organ() {
        let shape = Shape3::new(3, 8, 8);
        let mut gt = vec![0u8; shape.len()];
        for z in 0..3 {
            let r = if z == 1 { 3 } else { 1 };
            for y in 4 - r..4 + r {
                for x in 4 - r..4 + r {
                    gt[shape.index(z, y, x)] = 2;
                }
            }
        }
        let gt = LabelVolume::new(shape, gt).unwrap();
        let pred = LabelVolume::zeros(shape);
        let click = simulate_refine_click(&pred, &gt, 3, &[]).unwrap().unwrap();
        assert_eq!((click.slice_index, click.class_id, click.polarity), (1, 2, Polarity::Positive));
        assert_eq!(gt.labels()[shape.index(1, click.row, click.col)], 2);
        assert_eq!(simulate_refine_click(&gt, &gt, 3, &[]).unwrap(), None);
        assert_eq!(simulate_refine_click(&pred, &gt, 3, &[2]).unwrap(), None);
        let click = simulate_refine_click(&gt, &pred, 3, &[]).unwrap().unwrap();
        assert_eq!(click.polarity, Polarity::Negative);
    }

    #[test]
    fn ledger_rejects_the_click_past_capacity() {
        let mut ledger = ClickLedger::new(20);
        for i in 0..20 {
            ledger.push(Click::positive(0, i, 0, 1)).unwrap();
        }
        ledger.push(Click::positive(0, 0, 0, 2)).unwrap();
        assert!(matches!(
            ledger.push(Click::negative(0, 0, 0, 1)),
            Err(Error::ClickCapacity { class_id: 1, capacity: 20 })
        ));
        assert_eq!(ledger.full_classes(3), vec![1]);
    }
}
