//! Volumes, labels, clicks, cluster centers and prediction containers shared by
//! every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "MR")]
    Mr,
    #[serde(rename = "SYNTH")]
    Synth,
}

/// Shape of a volume as `(slices, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(slices: usize, height: usize, width: usize) -> Self {
        Self { slices, height, width }
    }

    pub fn len(&self) -> usize {
        self.slices * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.slices, self.height, self.width]
    }
}

/// A 3D intensity grid with physical voxel spacing `[sz, sy, sx]` in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: [f64; 3],
    modality: Modality,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing: [f64; 3], modality: Modality, voxels: Vec<f32>) -> Result<Self> {
        if shape.slices == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::Shape(format!("volume dimensions must be positive, got {shape:?}")));
        }
        if voxels.len() != shape.len() {
            return Err(Error::Shape(format!(
                "volume of shape {:?} needs {} voxels, got {}",
                shape.as_array(),
                shape.len(),
                voxels.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Input(format!("spacing must be positive, got {spacing:?}")));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Self { shape, spacing, modality, voxels })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.shape.slice_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Same geometry with new voxel values.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Self> {
        Self::new(self.shape, self.spacing, self.modality, voxels)
    }
}

/// Per-voxel class ids; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape3,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: Shape3, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != shape.len() {
            return Err(Error::Shape(format!(
                "label volume of shape {:?} needs {} voxels, got {}",
                shape.as_array(),
                shape.len(),
                labels.len()
            )));
        }
        Ok(Self { shape, labels })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self { shape, labels: vec![0; shape.len()] }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.shape.slice_len();
        &self.labels[z * n..(z + 1) * n]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Checks pairing with a volume and the `≤ n_classes` bound.
    pub fn validate(&self, volume: &Volume, n_classes: usize) -> Result<()> {
        if self.shape != volume.shape() {
            return Err(Error::Shape(format!(
                "labels {:?} do not match volume {:?}",
                self.shape.as_array(),
                volume.shape().as_array()
            )));
        }
        if self.max_label() as usize > n_classes {
            return Err(Error::Input(format!("label {} exceeds {n_classes} classes", self.max_label())));
        }
        Ok(())
    }

    /// Binary mask of one class over the whole volume.
    pub fn class_mask(&self, class_id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class_id).collect()
    }
}

/// A 2D binary mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask2 {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

/// A user or simulated click. Serializes to the click wire form
/// `{"slice", "row", "col", "class", "polarity"}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    #[serde(rename = "slice")]
    pub slice_index: usize,
    pub row: usize,
    pub col: usize,
    #[serde(rename = "class")]
    pub class_id: u8,
    pub polarity: Polarity,
    #[serde(default = "first_round", skip_serializing)]
    pub round: u32,
}

fn first_round() -> u32 {
    1
}

impl Click {
    pub fn positive(slice_index: usize, row: usize, col: usize, class_id: u8) -> Self {
        Self { slice_index, row, col, class_id, polarity: Polarity::Positive, round: 1 }
    }

    pub fn negative(slice_index: usize, row: usize, col: usize, class_id: u8) -> Self {
        Self { slice_index, row, col, class_id, polarity: Polarity::Negative, round: 1 }
    }

    pub fn validate(&self, shape: Shape3, n_classes: usize) -> Result<()> {
        if self.slice_index >= shape.slices {
            return Err(Error::Bounds(format!("click slice {} outside {} slices", self.slice_index, shape.slices)));
        }
        if self.row >= shape.height || self.col >= shape.width {
            return Err(Error::Bounds(format!(
                "click ({}, {}) outside {}x{} slice",
                self.row, self.col, shape.height, shape.width
            )));
        }
        if self.polarity == Polarity::Positive && self.class_id == 0 {
            return Err(Error::Input("positive clicks need a class id >= 1".into()));
        }
        if self.class_id as usize > n_classes {
            return Err(Error::Input(format!("click class {} exceeds {n_classes} classes", self.class_id)));
        }
        if self.round == 0 {
            return Err(Error::Input("click rounds start at 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterStatus {
    Learned,
    Propagated,
    ClickSeeded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCenter {
    pub embedding: Vec<f64>,
    pub status: CenterStatus,
    /// 0 means background / no-object.
    pub class_id: u8,
    /// Refinement round that seeded this center, 0 otherwise.
    pub source_round: u32,
}

impl ClusterCenter {
    pub fn learned(embedding: Vec<f64>) -> Self {
        Self { embedding, status: CenterStatus::Learned, class_id: 0, source_round: 0 }
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }
}

/// Default number of cluster centers allotted to each semantic class.
pub const DEFAULT_PER_CLASS_CENTERS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterSet {
    pub centers: Vec<ClusterCenter>,
    pub per_class_capacity: usize,
}

impl CenterSet {
    pub fn new(per_class_capacity: usize) -> Self {
        Self { centers: Vec::new(), per_class_capacity }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn capacity(&self, n_classes: usize) -> usize {
        self.per_class_capacity * n_classes
    }

    /// Embedding bytes held by the set.
    pub fn byte_size(&self) -> usize {
        self.centers.iter().map(|c| c.embedding.len() * std::mem::size_of::<f64>()).sum()
    }
}

/// Channel-major features `[channels, height, width]` at `stride` relative to the input slice.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, stride: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, stride, data })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// The `channels`-long vector at one cell.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }
}

/// Hard cluster assignment `[clusters, pixels]`: each pixel column is one-hot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentMatrix {
    pub clusters: usize,
    pub pixels: usize,
    pub data: Vec<u8>,
}

impl AssignmentMatrix {
    /// One-hot matrix from per-pixel winning cluster indices.
    pub fn from_winners(clusters: usize, winners: &[usize]) -> Self {
        let pixels = winners.len();
        let mut data = vec![0u8; clusters * pixels];
        for (p, &w) in winners.iter().enumerate() {
            data[w * pixels + p] = 1;
        }
        Self { clusters, pixels, data }
    }

    pub fn get(&self, cluster: usize, pixel: usize) -> u8 {
        self.data[cluster * self.pixels + pixel]
    }

    pub fn column_sums(&self) -> Vec<u32> {
        let mut sums = vec![0u32; self.pixels];
        for row in self.data.chunks(self.pixels.max(1)) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v as u32;
            }
        }
        sums
    }

    pub fn is_one_hot(&self) -> bool {
        self.data.iter().all(|&v| v <= 1) && self.column_sums().iter().all(|&s| s == 1)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Automatic,
    Interactive,
}

/// Per-class scores in `[0, 1]`, laid out `[class - 1][slice][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskScoreVolume {
    n_classes: usize,
    shape: Shape3,
    scores: Vec<f32>,
    pub provenance: Provenance,
}

impl MaskScoreVolume {
    pub fn zeros(n_classes: usize, shape: Shape3, provenance: Provenance) -> Self {
        Self { n_classes, shape, scores: vec![0.0; n_classes * shape.len()], provenance }
    }

    pub fn from_scores(n_classes: usize, shape: Shape3, scores: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if scores.len() != n_classes * shape.len() {
            return Err(Error::Shape(format!(
                "{n_classes} classes over {:?} need {} scores, got {}",
                shape.as_array(),
                n_classes * shape.len(),
                scores.len()
            )));
        }
        if let Some(v) = scores.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("mask score {v} outside [0, 1]")));
        }
        Ok(Self { n_classes, shape, scores, provenance })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    /// Scores of class `class_id` (1-based) over the whole volume.
    pub fn class_scores(&self, class_id: u8) -> &[f32] {
        let n = self.shape.len();
        let k = class_id as usize - 1;
        &self.scores[k * n..(k + 1) * n]
    }

    pub fn class_slice(&self, class_id: u8, z: usize) -> &[f32] {
        let n = self.shape.slice_len();
        &self.class_scores(class_id)[z * n..(z + 1) * n]
    }

    pub fn class_slice_mut(&mut self, class_id: u8, z: usize) -> &mut [f32] {
        let total = self.shape.len();
        let n = self.shape.slice_len();
        let k = class_id as usize - 1;
        &mut self.scores[k * total + z * n..k * total + (z + 1) * n]
    }

    /// Raises the stored score to `value` where it is larger (per-voxel max).
    pub fn max_assign(&mut self, class_id: u8, z: usize, values: &[f32]) {
        for (s, v) in self.class_slice_mut(class_id, z).iter_mut().zip(values) {
            *s = s.max(v.clamp(0.0, 1.0));
        }
    }

    pub fn byte_size(&self) -> usize {
        self.scores.len() * std::mem::size_of::<f32>()
    }
}

/// One binary mask per foreground class present in slice `slice_index`, in class order.
pub fn labels_to_binary_masks(labels: &LabelVolume, slice_index: usize) -> Result<Vec<(u8, Mask2)>> {
    let shape = labels.shape();
    if slice_index >= shape.slices {
        return Err(Error::Bounds(format!("slice {slice_index} outside {} slices", shape.slices)));
    }
    Ok(slice_masks(labels.slice(slice_index), shape.height, shape.width))
}

/// Per-class masks of a single label slice.
pub fn slice_masks(slice: &[u8], height: usize, width: usize) -> Vec<(u8, Mask2)> {
    let mut present = [false; 256];
    for &l in slice {
        present[l as usize] = true;
    }
    (1..=255u8)
        .filter(|&c| present[c as usize])
        .map(|c| (c, Mask2 { height, width, data: slice.iter().map(|&l| l == c).collect() }))
        .collect()
}

/// Hard labels from scores: argmax class where its score reaches `threshold`, else 0.
/// Ties resolve to the lowest class index.
pub fn argmax_labeling(scores: &MaskScoreVolume, threshold: f64) -> Result<LabelVolume> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let shape = scores.shape();
    let n = shape.len();
    let mut labels = vec![0u8; n];
    for (v, label) in labels.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_score = f32::NEG_INFINITY;
        for k in 0..scores.n_classes() {
            let s = scores.scores[k * n + v];
            if s > best_score {
                best_score = s;
                best = k + 1;
            }
        }
        if best > 0 && best_score as f64 >= threshold {
            *label = best as u8;
        }
    }
    LabelVolume::new(shape, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_slice_has_no_masks() {
        let labels = LabelVolume::zeros(Shape3::new(2, 4, 4));
        assert!(labels_to_binary_masks(&labels, 1).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_slice_is_bounds_error() {
        let labels = LabelVolume::zeros(Shape3::new(2, 4, 4));
        assert!(matches!(labels_to_binary_masks(&labels, 2), Err(Error::Bounds(_))));
    }

    #[test]
    fn single_class_mask_covers_exactly_its_pixels() {
        let mut raw = vec![0u8; 9];
        raw[1] = 2;
        raw[5] = 2;
        let labels = LabelVolume::new(Shape3::new(1, 3, 3), raw.clone()).unwrap();
        let masks = labels_to_binary_masks(&labels, 0).unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].0, 2);
        for (i, &b) in masks[0].1.data.iter().enumerate() {
            assert_eq!(b, raw[i] == 2);
        }
    }

    #[test]
    fn random_masks_match_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw: Vec<u8> = (0..64).map(|_| [0u8, 1, 3][rng.random_range(0..3)]).collect();
        let labels = LabelVolume::new(Shape3::new(1, 8, 8), raw.clone()).unwrap();
        let masks = labels_to_binary_masks(&labels, 0).unwrap();
        let classes: Vec<u8> = masks.iter().map(|(c, _)| *c).collect();
        assert_eq!(classes, vec![1, 3]);
        for (c, m) in &masks {
            for r in 0..8 {
                for col in 0..8 {
                    assert_eq!(m.get(r, col), raw[r * 8 + col] == *c);
                }
            }
        }
    }

    fn scores_from(values: Vec<f32>, n_classes: usize, shape: Shape3) -> MaskScoreVolume {
        MaskScoreVolume::from_scores(n_classes, shape, values, Provenance::Automatic).unwrap()
    }

    #[test]
    fn argmax_below_threshold_is_background() {
        let shape = Shape3::new(1, 2, 2);
        let s = MaskScoreVolume::zeros(3, shape, Provenance::Automatic);
        assert_eq!(argmax_labeling(&s, 0.5).unwrap().labels(), &[0, 0, 0, 0]);
    }

    #[test]
    fn argmax_single_voxel() {
        let shape = Shape3::new(1, 1, 3);
        let s = scores_from(vec![0.0, 1.0, 0.0], 1, shape);
        assert_eq!(argmax_labeling(&s, 0.5).unwrap().labels(), &[0, 1, 0]);
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let shape = Shape3::new(1, 1, 1);
        let s = scores_from(vec![0.7, 0.7], 2, shape);
        assert_eq!(argmax_labeling(&s, 0.5).unwrap().labels(), &[1]);
    }

    #[test]
    fn argmax_rejects_bad_threshold() {
        let s = MaskScoreVolume::zeros(1, Shape3::new(1, 1, 1), Provenance::Automatic);
        assert!(matches!(argmax_labeling(&s, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn click_wire_form() {
        let c = Click::positive(3, 10, 12, 2);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, r#"{"slice":3,"row":10,"col":12,"class":2,"polarity":"pos"}"#);
        let back: Click = serde_json::from_str(r#"{"slice":3,"row":10,"col":12,"class":2,"polarity":"neg"}"#).unwrap();
        assert_eq!(back.polarity, Polarity::Negative);
        assert_eq!(back.round, 1);
    }

    #[test]
    fn assignment_one_hot() {
        let a = AssignmentMatrix::from_winners(3, &[0, 2, 2, 1]);
        assert!(a.is_one_hot());
        assert_eq!(a.column_sums(), vec![1, 1, 1, 1]);
    }

    proptest! {
        #[test]
        fn masks_reconstruct_label_slice(raw in proptest::collection::vec(0u8..5, 36)) {
            let labels = LabelVolume::new(Shape3::new(1, 6, 6), raw.clone()).unwrap();
            let mut rebuilt = vec![0u8; 36];
            for (c, m) in labels_to_binary_masks(&labels, 0).unwrap() {
                for (r, &b) in rebuilt.iter_mut().zip(&m.data) {
                    if b { *r += c; }
                }
            }
            prop_assert_eq!(rebuilt, raw);
        }

        #[test]
        fn argmax_invariant_under_monotone_transform(values in proptest::collection::vec(0.0f32..1.0, 3 * 8)) {
            let shape = Shape3::new(1, 2, 4);
            let s = scores_from(values.clone(), 3, shape);
            // strictly increasing and exact in binary floating point
            let t = scores_from(values.iter().map(|v| v * 0.5).collect(), 3, shape);
            let a = argmax_labeling(&s, 0.0).unwrap();
            let b = argmax_labeling(&t, 0.0).unwrap();
            prop_assert_eq!(a.labels(), b.labels());
        }
    }
}
