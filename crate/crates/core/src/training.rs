//! Joint automatic/interactive training on short slice chains.
//!
//! Each sample is a few ascending slices of one volume under one shared
//! augmentation. The first slice starts from learned centers, some of them
//! replaced by click-seeded centers; every later slice starts from the centers
//! matched to foreground on the slice before, initialized through their memory.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::error::{Error, Result};
use crate::evaluation::mean_auto_dsc;
use crate::interaction::click_ffn_graph;
use crate::matching::{cost_matrix, hungarian_match, MatchWeights, Matching};
use crate::memory::{fuse_graph, init_next_graph};
use crate::metrics::squared_distance_map;
use crate::model::{decode_graph, encode_graph, Bound, LayerVars, ModelConfig, Params};
use crate::propagation::InferenceConfig;
use crate::synth::Example;
use crate::tensor::Tensor;
use crate::volume::{slice_masks, LabelVolume, Mask2, Shape3, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
    /// Class-loss weight of centers matched to nothing.
    pub no_object: f64,
    /// Weight of the per-pixel center-assignment loss on the affinity logits.
    pub affinity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 2.0, dice: 5.0, bce: 5.0, no_object: 0.1, affinity: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_steps: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Learning-rate multiplier of encoder parameters.
    pub backbone_lr_multiplier: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Global gradient-norm cap, if any.
    pub grad_clip: Option<f64>,
    /// Probability that a present class is seeded from a simulated click on the first slice.
    pub click_init_prob: f64,
    /// Probability that a seeded class accumulates several clicks instead of one.
    pub multi_click_prob: f64,
    /// Draw clicks anywhere in the inner half of the object instead of its exact center.
    pub click_jitter: bool,
    pub beta: f64,
    pub slices_per_volume: usize,
    /// Largest z-gap between consecutive sampled slices.
    pub max_slice_gap: usize,
    pub crop_size: (usize, usize),
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub loss: LossWeights,
    pub matching: MatchWeights,
    pub seed: u64,
    /// Validate every this many iterations (0 disables periodic validation).
    pub val_every: usize,
    pub inference: InferenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.02,
            lr_decay_steps: vec![1400, 1800],
            lr_decay_factor: 0.1,
            backbone_lr_multiplier: 1.0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip: None,
            click_init_prob: 0.5,
            multi_click_prob: 0.5,
            click_jitter: true,
            beta: crate::interaction::DEFAULT_BETA,
            slices_per_volume: 3,
            max_slice_gap: 2,
            crop_size: (64, 64),
            scale_range: (0.5, 1.75),
            hflip_prob: 0.5,
            loss: LossWeights::default(),
            matching: MatchWeights::default(),
            seed: 0,
            val_every: 500,
            inference: InferenceConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size schedule for real CT/MR data (20k iterations, batch 8, 512² crops,
    /// backbone at a tenth of the base rate).
    pub fn large_scale_profile() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 8,
            lr: 2e-4,
            lr_decay_steps: vec![14_000, 18_000],
            backbone_lr_multiplier: 0.1,
            crop_size: (512, 512),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.click_init_prob) || !(0.0..=1.0).contains(&self.multi_click_prob) {
            return Err(Error::Config("click probabilities must lie in [0, 1]".into()));
        }
        if self.slices_per_volume < 2 {
            return Err(Error::Config("slices_per_volume must be at least 2".into()));
        }
        if self.batch_size == 0 || self.max_slice_gap == 0 || self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(Error::Config("batch size, slice gap and crop size must be positive".into()));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return Err(Error::Config(format!("invalid scale range {:?}", self.scale_range)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("beta must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning-rate factor at `iteration` from the step schedule.
    pub fn lr_factor(&self, iteration: usize) -> f64 {
        let n = self.lr_decay_steps.iter().filter(|&&s| iteration >= s).count();
        self.lr_decay_factor.powi(n as i32)
    }
}

/// Augmented slices and labels of one training chain.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub indices: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub slices: Vec<Vec<f32>>,
    pub labels: Vec<Vec<u8>>,
}

/// `count` strictly ascending slice indices with consecutive gaps in `1..=max_gap`.
pub fn sample_slice_indices(n_slices: usize, count: usize, max_gap: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
    if count == 0 || n_slices < count {
        return None;
    }
    let mut gaps: Vec<usize> = (1..count).map(|_| rng.random_range(1..=max_gap)).collect();
    if gaps.iter().sum::<usize>() > n_slices - 1 {
        gaps.iter_mut().for_each(|g| *g = 1);
    }
    let span: usize = gaps.iter().sum();
    let mut z = rng.random_range(0..n_slices - span);
    let mut out = vec![z];
    for g in gaps {
        z += g;
        out.push(z);
    }
    Some(out)
}

/// Scale, crop and flip shared by all slices of a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub scale: f64,
    /// Crop origin in scaled coordinates; negative values pad.
    pub offset: (isize, isize),
    pub flip: bool,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self { scale: 1.0, offset: (0, 0), flip: false }
    }

    pub fn sample(h: usize, w: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let pick = |size: usize, crop: usize, rng: &mut dyn rand::RngCore| {
            let scaled = ((size as f64 * scale).round() as isize).max(1);
            let slack = scaled - crop as isize;
            let (a, b) = (slack.min(0), slack.max(0));
            if a == b { a } else { rng.random_range(a as i64..=b as i64) as isize }
        };
        let oy = pick(h, cfg.crop_size.0, rng);
        let ox = pick(w, cfg.crop_size.1, rng);
        let flip = rng.random_bool(cfg.hflip_prob);
        Self { scale, offset: (oy, ox), flip }
    }

    /// Applies the transform to an `h x w` slice and its labels, producing `crop` sized arrays.
    /// Intensities are resampled bilinearly, labels by nearest neighbour; padding is 0.
    pub fn apply(&self, slice: &[f32], labels: &[u8], h: usize, w: usize, crop: (usize, usize)) -> (Vec<f32>, Vec<u8>) {
        let (ch, cw) = crop;
        let sh = ((h as f64 * self.scale).round() as isize).max(1);
        let sw = ((w as f64 * self.scale).round() as isize).max(1);
        let (sy_scale, sx_scale) = (h as f64 / sh as f64, w as f64 / sw as f64);
        let mut img = vec![0.0f32; ch * cw];
        let mut lab = vec![0u8; ch * cw];
        for cy in 0..ch {
            let sy = cy as isize + self.offset.0;
            if sy < 0 || sy >= sh {
                continue;
            }
            let fy = ((sy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
            let (y0, y1) = (fy.floor() as usize, (fy.floor() as usize + 1).min(h - 1));
            let ty = fy - y0 as f64;
            let ny = (((sy as f64 + 0.5) * sy_scale) as usize).min(h - 1);
            for cx in 0..cw {
                let sx = cx as isize + self.offset.1;
                if sx < 0 || sx >= sw {
                    continue;
                }
                let fx = ((sx as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
                let (x0, x1) = (fx.floor() as usize, (fx.floor() as usize + 1).min(w - 1));
                let tx = fx - x0 as f64;
                let nx = (((sx as f64 + 0.5) * sx_scale) as usize).min(w - 1);
                let v = |y: usize, x: usize| slice[y * w + x] as f64;
                let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
                let bot = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
                let out_x = if self.flip { cw - 1 - cx } else { cx };
                img[cy * cw + out_x] = (top * (1.0 - ty) + bot * ty) as f32;
                lab[cy * cw + out_x] = labels[ny * w + nx];
            }
        }
        (img, lab)
    }
}

/// Samples slice indices and one augmentation applied to all of them.
/// Returns `None` (with a warning) for volumes shorter than `slices_per_volume`.
pub fn build_training_sample(
    volume: &Volume,
    labels: &LabelVolume,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Option<TrainingSample> {
    let shape = volume.shape();
    let Some(indices) = sample_slice_indices(shape.slices, cfg.slices_per_volume, cfg.max_slice_gap, rng) else {
        log::warn!("skipping volume with {} slices (< {})", shape.slices, cfg.slices_per_volume);
        return None;
    };
    let aug = Augmentation::sample(shape.height, shape.width, cfg, rng);
    let (slices, labs) = indices
        .iter()
        .map(|&z| aug.apply(volume.slice(z), labels.slice(z), shape.height, shape.width, cfg.crop_size))
        .unzip();
    Some(TrainingSample { indices, height: cfg.crop_size.0, width: cfg.crop_size.1, slices, labels: labs })
}

/// Click positions seeding one class's center; features are accumulated over them in order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickPlan {
    pub class_id: u8,
    pub points: Vec<(usize, usize)>,
}

fn click_point(mask: &Mask2, jitter: bool, rng: &mut impl Rng) -> (usize, usize) {
    let padded = Shape3::new(1, mask.height + 2, mask.width + 2);
    let mut sites = Vec::new();
    for y in 0..mask.height + 2 {
        for x in 0..mask.width + 2 {
            let inside = y >= 1 && y <= mask.height && x >= 1 && x <= mask.width && mask.get(y - 1, x - 1);
            if !inside {
                sites.push(padded.index(0, y, x));
            }
        }
    }
    let d = squared_distance_map(&sites, padded, [1.0; 3]);
    let dist = |y: usize, x: usize| d[padded.index(0, y + 1, x + 1)].sqrt();
    let mut best = (0, 0);
    let mut best_d = -1.0;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) && dist(y, x) > best_d {
                best_d = dist(y, x);
                best = (y, x);
            }
        }
    }
    if !jitter {
        return best;
    }
    let inner: Vec<(usize, usize)> = (0..mask.height)
        .flat_map(|y| (0..mask.width).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x) && dist(y, x) >= 0.5 * best_d)
        .collect();
    inner[rng.random_range(0..inner.len())]
}

/// Decides, per present class, whether its first-slice center is seeded from clicks.
pub fn maybe_click_init(
    masks: &[(u8, Mask2)],
    prob: f64,
    multi_click_prob: f64,
    jitter: bool,
    rng: &mut impl Rng,
) -> Vec<ClickPlan> {
    let mut plans = Vec::new();
    for (class_id, mask) in masks {
        if mask.count() == 0 || !rng.random_bool(prob) {
            continue;
        }
        let n = if rng.random_bool(multi_click_prob) { rng.random_range(2..=3) } else { 1 };
        let points = (0..n).map(|_| click_point(mask, jitter, rng)).collect();
        plans.push(ClickPlan { class_id: *class_id, points });
    }
    plans
}

/// A ground-truth mask on the mask grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub class_id: u8,
    /// Soft mask (area fraction per cell) at the mask stride.
    pub mask: Vec<f64>,
}

/// Area-averaged downsampling of a binary mask by `s` (cells past the edge average fewer pixels).
pub fn downsample_mask(mask: &[bool], h: usize, w: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut on, mut total) = (0usize, 0usize);
            for y in oy * s..((oy + 1) * s).min(h) {
                for x in ox * s..((ox + 1) * s).min(w) {
                    on += mask[y * w + x] as usize;
                    total += 1;
                }
            }
            out[oy * ow + ox] = on as f64 / total as f64;
        }
    }
    out
}

/// Majority label of each `s x s` block, ties to the lowest label.
pub fn downsample_labels(labels: &[u8], h: usize, w: usize, s: usize) -> Vec<u8> {
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = vec![0u8; oh * ow];
    let mut counts = [0usize; 256];
    for oy in 0..oh {
        for ox in 0..ow {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in oy * s..((oy + 1) * s).min(h) {
                for x in ox * s..((ox + 1) * s).min(w) {
                    counts[labels[y * w + x] as usize] += 1;
                }
            }
            let mut best = 0;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = l;
                }
            }
            out[oy * ow + ox] = best as u8;
        }
    }
    out
}

/// Per-term loss values of one sample, summed over slices and layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
    pub affinity: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.cls += o.cls;
        self.dice += o.dice;
        self.bce += o.bce;
        self.affinity += o.affinity;
    }
}

fn class_probs(t: &Tensor) -> Tensor {
    let mut p = t.clone();
    let c = p.cols();
    for row in p.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    p
}

/// Matches predictions to targets: `forced` pairs first, the rest by minimum cost.
pub fn match_layer(
    mask_logits: &Tensor,
    class_logits: &Tensor,
    targets: &[Target],
    forced: &[(usize, usize)],
    weights: &MatchWeights,
) -> Result<Matching> {
    let n = mask_logits.rows();
    let mut matching = Matching::empty(n);
    for &(c, t) in forced {
        matching.assignment[c] = Some(t);
    }
    let free_preds: Vec<usize> = (0..n).filter(|i| matching.assignment[*i].is_none()).collect();
    let free_targets: Vec<usize> = (0..targets.len()).filter(|t| !forced.iter().any(|f| f.1 == *t)).collect();
    if free_targets.is_empty() {
        return Ok(matching);
    }
    let sub_logits = Tensor::from_rows(&free_preds.iter().map(|&i| mask_logits.row(i).to_vec()).collect::<Vec<_>>());
    let probs = class_probs(class_logits);
    let sub_probs = Tensor::from_rows(&free_preds.iter().map(|&i| probs.row(i).to_vec()).collect::<Vec<_>>());
    let tg: Vec<(usize, Vec<f64>)> =
        free_targets.iter().map(|&t| (targets[t].class_id as usize, targets[t].mask.clone())).collect();
    let sub = hungarian_match(&cost_matrix(&sub_logits, &sub_probs, &tg, weights))?;
    for (j, a) in sub.assignment.iter().enumerate() {
        if let Some(t) = a {
            matching.assignment[free_preds[j]] = Some(free_targets[*t]);
        }
    }
    matching.total_cost = sub.total_cost;
    Ok(matching)
}

/// Deep-supervised loss of one slice. Returns the loss node, the last layer's
/// matching and the per-term values.
///
/// `feature_labels` holds the majority label per feature cell; cells of a matched
/// class are trained to be assigned to that class's matched center.
pub fn compute_loss(
    g: &mut Graph,
    layers: &[LayerVars],
    targets: &[Target],
    feature_labels: &[u8],
    forced: &[(usize, usize)],
    weights: &LossWeights,
    match_weights: &MatchWeights,
) -> Result<(Var, Matching, LossTerms)> {
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut values = LossTerms::default();
    let mut last = None;
    for layer in layers {
        let mask_logits = g.value(layer.mask_logits).clone();
        let class_logits = g.value(layer.class_logits).clone();
        let n = class_logits.rows();
        let matching = match_layer(&mask_logits, &class_logits, targets, forced, match_weights)?;

        let mut cls_targets = vec![0usize; n];
        let mut cls_weights = vec![weights.no_object; n];
        for (c, t) in matching.pairs() {
            cls_targets[c] = targets[t].class_id as usize;
            cls_weights[c] = 1.0;
        }
        let ce = g.cross_entropy(layer.class_logits, cls_targets, cls_weights);
        values.cls += g.scalar(ce);
        terms.push((ce, weights.cls));

        let pairs = matching.pairs();
        if !pairs.is_empty() {
            let m = pairs.len() as f64;
            let mut dice_terms = Vec::new();
            for &(c, t) in &pairs {
                let row = g.select_rows(layer.mask_logits, &[c]);
                let d = g.dice_loss(row, targets[t].mask.clone());
                values.dice += g.scalar(d) / m;
                dice_terms.push((d, weights.dice / m));
            }
            terms.extend(dice_terms);
            let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let stacked = g.select_rows(layer.mask_logits, &rows);
            let tgt: Vec<f64> = pairs.iter().flat_map(|p| targets[p.1].mask.iter().copied()).collect();
            let bce = g.bce_with_logits(stacked, tgt);
            values.bce += g.scalar(bce);
            terms.push((bce, weights.bce));

            let mut center_of_class = BTreeMap::new();
            for &(c, t) in &pairs {
                center_of_class.insert(targets[t].class_id, c);
            }
            let mut aff_targets = vec![0usize; feature_labels.len()];
            let mut aff_weights = vec![0.0; feature_labels.len()];
            for (p, l) in feature_labels.iter().enumerate() {
                if let Some(&c) = center_of_class.get(l) {
                    aff_targets[p] = c;
                    aff_weights[p] = 1.0;
                }
            }
            if weights.affinity > 0.0 && aff_weights.iter().any(|&w| w > 0.0) {
                let per_pixel = g.transpose(layer.affinity);
                let aff = g.cross_entropy(per_pixel, aff_targets, aff_weights);
                values.affinity += g.scalar(aff);
                terms.push((aff, weights.affinity));
            }
        }
        last = Some(matching);
    }
    let loss = g.weighted_sum(&terms);
    Ok((loss, last.expect("at least one decoder layer"), values))
}

/// Result of a sample's forward pass.
pub struct SampleForward {
    pub loss: Var,
    pub terms: LossTerms,
    /// Number of centers carried into each slice after the first.
    pub carried: Vec<usize>,
}

/// Builds the whole chain of one sample into `g`.
pub fn sample_loss(
    g: &mut Graph,
    b: &mut Bound,
    sample: &TrainingSample,
    clicks: &[ClickPlan],
    cfg: &TrainConfig,
) -> Result<SampleForward> {
    let mc = b.config().clone();
    let (h, w) = (sample.height, sample.width);
    let n_total = mc.n_centers();
    let learned = b.var(g, "query.embed");
    let mut carried: Vec<(Var, Option<Var>)> = Vec::new();
    let mut slice_losses = Vec::new();
    let mut terms = LossTerms::default();
    let mut carried_counts = Vec::new();

    for (t, (img, labels)) in sample.slices.iter().zip(&sample.labels).enumerate() {
        let enc = encode_graph(g, b, img, h, w);
        let masks = slice_masks(labels, h, w);
        let targets: Vec<Target> = masks
            .iter()
            .map(|(c, m)| Target { class_id: *c, mask: downsample_mask(&m.data, h, w, mc.mask_stride()) })
            .collect();
        let feature_labels = downsample_labels(labels, h, w, mc.stride);

        let mut rows: Vec<Var> = Vec::new();
        let mut memories: Vec<Option<Var>> = Vec::new();
        let mut forced = Vec::new();
        if t == 0 {
            let (_, fw) = enc.feat_hw;
            for plan in clicks {
                let mut acc: Option<Var> = None;
                for &(row, col) in &plan.points {
                    let cell = (row / mc.stride) * fw + col / mc.stride;
                    let o = g.select_rows(enc.features, &[cell]);
                    acc = Some(match acc {
                        None => o,
                        Some(prev) => {
                            let scaled = g.scale(prev, cfg.beta);
                            g.add(o, scaled)
                        }
                    });
                }
                let center = click_ffn_graph(g, b, acc.expect("click plan has points"));
                let target = targets
                    .iter()
                    .position(|tg| tg.class_id == plan.class_id)
                    .ok_or_else(|| Error::Input(format!("click plan for absent class {}", plan.class_id)))?;
                forced.push((rows.len(), target));
                rows.push(center);
                memories.push(None);
            }
        } else {
            carried_counts.push(carried.len());
            for (init, mem) in carried.drain(..) {
                rows.push(init);
                memories.push(mem);
            }
        }
        let m = rows.len();
        if m > n_total {
            return Err(Error::Config(format!("{m} seeded centers exceed {n_total}")));
        }
        if m < n_total {
            let idx: Vec<usize> = (0..n_total - m).collect();
            rows.push(g.select_rows(learned, &idx));
        }
        let centers = g.concat_rows(&rows);
        let dec = decode_graph(g, b, enc.key_source, enc.features, enc.pixel, centers);
        let (loss, matching, values) =
            compute_loss(g, &dec.layers, &targets, &feature_labels, &forced, &cfg.loss, &cfg.matching)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on sampled slice {}", sample.indices[t])));
        }
        slice_losses.push((loss, 1.0));
        terms.add(&values);

        for (c, _) in matching.pairs() {
            let decoded = g.select_rows(dec.centers, &[c]);
            let prev = if c < m { memories[c] } else { None };
            let init = match prev {
                Some(hm) => init_next_graph(g, b, decoded, hm),
                None => decoded,
            };
            let mem = fuse_graph(g, b, prev, decoded);
            carried.push((init, Some(mem)));
        }
    }
    let loss = g.weighted_sum(&slice_losses);
    Ok(SampleForward { loss, terms, carried: carried_counts })
}

/// Loss value and parameter gradients of one sample.
pub fn sample_gradients(
    params: &Params,
    sample: &TrainingSample,
    clicks: &[ClickPlan],
    cfg: &TrainConfig,
) -> Result<(f64, LossTerms, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let mut b = Bound::new(params, true);
    let fwd = sample_loss(&mut g, &mut b, sample, clicks, cfg)?;
    let mut grads = g.backward(fwd.loss);
    Ok((g.scalar(fwd.loss), fwd.terms, b.collect_grads(&mut grads)))
}

/// Adam with decoupled weight decay. Decay applies to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update; `lr_of(name)` gives each parameter's learning rate.
    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr_of: impl Fn(&str) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(gt) = grads.get(name) else { continue };
            let lr = lr_of(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let decay = if p.shape.len() >= 2 { self.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = gt.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + self.eps) + decay * p.data[i]);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dsc: Option<f64>,
    pub lr: f64,
    pub terms: LossTerms,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<LogRecord>,
    pub final_val_dsc: Option<f64>,
    pub elapsed_secs: f64,
    /// Set when training stopped on a non-finite loss; `params` are then the last finite ones.
    pub aborted: Option<String>,
}

/// Runs the training loop on in-memory examples. `on_log` sees every record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train_set: &[Example],
    val_set: &[Example],
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let usable: Vec<&Example> =
        train_set.iter().filter(|e| e.volume.shape().slices >= cfg.slices_per_volume).collect();
    if usable.len() < train_set.len() {
        log::warn!("skipping {} volumes shorter than {} slices", train_set.len() - usable.len(), cfg.slices_per_volume);
    }
    if usable.is_empty() && cfg.iterations > 0 {
        return Err(Error::Input("no training volume has enough slices".into()));
    }
    let start = Instant::now();
    let mut params = Params::init(model_cfg)?;
    let mut opt = AdamW::new(cfg.adam_betas.0, cfg.adam_betas.1, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut last_good = params.clone();

    for iter in 0..cfg.iterations {
        let jobs: Vec<(usize, u64)> =
            (0..cfg.batch_size).map(|_| (rng.random_range(0..usable.len()), rng.random::<u64>())).collect();
        let results: Vec<Result<(f64, LossTerms, BTreeMap<String, Tensor>)>> = jobs
            .par_iter()
            .map(|&(vi, seed)| {
                let mut srng = ChaCha8Rng::seed_from_u64(seed);
                let ex = usable[vi];
                let sample = build_training_sample(&ex.volume, &ex.labels, cfg, &mut srng)
                    .ok_or_else(|| Error::Input(format!("{} is too short", ex.name)))?;
                let masks = slice_masks(&sample.labels[0], sample.height, sample.width);
                let plans =
                    maybe_click_init(&masks, cfg.click_init_prob, cfg.multi_click_prob, cfg.click_jitter, &mut srng);
                sample_gradients(&params, &sample, &plans, cfg)
            })
            .collect();

        let mut loss = 0.0;
        let mut terms = LossTerms::default();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut failure = None;
        for r in results {
            match r {
                Ok((l, t, gr)) => {
                    loss += l;
                    terms.add(&t);
                    for (name, t) in gr {
                        match grads.get_mut(&name) {
                            Some(acc) => acc.add_assign(&t),
                            None => {
                                grads.insert(name, t);
                            }
                        }
                    }
                }
                Err(e @ Error::Numeric(_)) => failure = Some(e.to_string()),
                Err(e) => return Err(e),
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        loss *= scale;
        if failure.is_none() && !loss.is_finite() {
            failure = Some(format!("non-finite loss at iteration {iter}"));
        }
        if let Some(msg) = failure {
            log::error!("stopping at iteration {iter}: {msg}");
            return Ok(TrainOutcome {
                params: last_good,
                log,
                final_val_dsc: None,
                elapsed_secs: start.elapsed().as_secs_f64(),
                aborted: Some(msg),
            });
        }
        for t in grads.values_mut() {
            t.data.iter_mut().for_each(|v| *v *= scale);
        }
        if let Some(max_norm) = cfg.grad_clip {
            let norm = grads.values().flat_map(|t| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                grads.values_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v *= s));
            }
        }
        let lr = cfg.lr * cfg.lr_factor(iter);
        last_good.clone_from(&params);
        opt.update(&mut params, &grads, |name| {
            if name.starts_with("enc.") { lr * cfg.backbone_lr_multiplier } else { lr }
        });
        if !params.all_finite() {
            return Ok(TrainOutcome {
                params: last_good,
                log,
                final_val_dsc: None,
                elapsed_secs: start.elapsed().as_secs_f64(),
                aborted: Some(format!("non-finite parameters after iteration {iter}")),
            });
        }

        let n = cfg.batch_size as f64;
        let terms = LossTerms { cls: terms.cls / n, dice: terms.dice / n, bce: terms.bce / n, affinity: terms.affinity / n };
        let val_dsc = if cfg.val_every > 0 && (iter + 1) % cfg.val_every == 0 && !val_set.is_empty() {
            Some(mean_auto_dsc(&params, val_set, &cfg.inference)?)
        } else {
            None
        };
        let record = LogRecord { iter, loss, val_dsc, lr, terms };
        on_log(&record);
        log.push(record);
    }

    let final_val_dsc = match log.last().and_then(|r| r.val_dsc) {
        Some(v) => Some(v),
        None if !val_set.is_empty() => Some(mean_auto_dsc(&params, val_set, &cfg.inference)?),
        None => None,
    };
    Ok(TrainOutcome { params, log, final_val_dsc, elapsed_secs: start.elapsed().as_secs_f64(), aborted: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_indices_ascend() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_slice_indices(3, 3, 2, &mut rng), Some(vec![0, 1, 2]));
        assert_eq!(sample_slice_indices(2, 3, 2, &mut rng), None);
        for _ in 0..100 {
            let idx = sample_slice_indices(32, 3, 2, &mut rng).unwrap();
            assert!(idx.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= 2));
            assert!(*idx.last().unwrap() < 32);
        }
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let img: Vec<f32> = (0..20).map(|v| v as f32).collect();
        let lab: Vec<u8> = (0..20).map(|v| (v % 3) as u8).collect();
        let (i2, l2) = Augmentation::identity().apply(&img, &lab, 4, 5, (4, 5));
        assert_eq!(i2, img);
        assert_eq!(l2, lab);
        let flipped = Augmentation { flip: true, ..Augmentation::identity() }.apply(&img, &lab, 4, 5, (4, 5)).0;
        assert_eq!(&flipped[..5], &[4.0, 3.0, 2.0, 1.0, 0.0]);
        let padded = Augmentation { scale: 0.5, offset: (-1, -1), flip: false }.apply(&img, &lab, 4, 4, (4, 4));
        assert_eq!(padded.1[0], 0);
        assert_eq!(padded.0[0], 0.0);
    }

    #[test]
    fn mask_and_label_downsampling() {
        let mask = [true, true, false, true, false, false];
        assert_eq!(downsample_mask(&mask, 2, 3, 2), vec![0.75, 0.0]);
        let labels = [1, 1, 2, 2, 0, 2];
        assert_eq!(downsample_labels(&labels, 2, 3, 2), vec![1, 2]);
    }

    #[test]
    fn click_init_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Mask2 { height: 3, width: 3, data: vec![true; 9] };
        let masks = vec![(1, m.clone()), (3, m)];
        assert!(maybe_click_init(&masks, 0.0, 0.5, true, &mut rng).is_empty());
        let plans = maybe_click_init(&masks, 1.0, 0.0, false, &mut rng);
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[0].points, vec![(1, 1)]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = ModelConfig { dim: 8, n_decoder_layers: 1, per_class_centers: 1, n_classes: 1, ffn_hidden: 8, enc_channels: [2, 2], ..Default::default() };
        let mut p = Params::init(&cfg).unwrap();
        let before = p.get("head.cls.b").clone();
        let mut grads = BTreeMap::new();
        grads.insert("head.cls.b".to_string(), Tensor::new(vec![2], vec![3.0, -0.5]));
        let mut opt = AdamW::new(0.9, 0.999, 1e-12, 0.5);
        opt.update(&mut p, &grads, |_| 0.01);
        let after = p.get("head.cls.b");
        assert!((after.data[0] - (before.data[0] - 0.01)).abs() < 1e-9);
        assert!((after.data[1] - (before.data[1] + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn schedule_steps_down() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_factor(0), 1.0);
        assert!((cfg.lr_factor(1400) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_factor(1999) - 0.01).abs() < 1e-15);
    }
}
