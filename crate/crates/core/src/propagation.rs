//! Slice-by-slice inference over a volume, carrying foreground centers (and
//! their memories) from each slice to the next.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softmax_in_place};
use crate::error::{Error, Result};
use crate::interaction::{adaptive_combine, init_center_from_click, sample_point_feature, DEFAULT_BETA};
use crate::matching::select_foreground_infer;
use crate::memory::{fuse_memory, init_next_center, MemoryState};
use crate::model::{decode, encode_slice, EncodedSlice, Params};
use crate::tensor::Tensor;
use crate::volume::{Click, MaskScoreVolume, Polarity, Provenance, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Minimum foreground class probability for a center to count as an object.
    pub keep_threshold: f64,
    /// Carry foreground centers to the next slice.
    pub propagate: bool,
    /// Fuse carried centers into a per-track memory used to initialize the next slice.
    pub use_memory: bool,
    /// Accumulate click features of a class across rounds.
    pub adaptive_sampling: bool,
    pub beta: f64,
    /// Minimum fused score for a voxel to receive a foreground label.
    pub label_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { keep_threshold: 0.5, propagate: true, use_memory: true, adaptive_sampling: true, beta: DEFAULT_BETA, label_threshold: 0.5 }
    }
}

/// Lazily encoded slices of one preprocessed volume. Each slice is encoded at most once.
pub struct FeatureCache {
    volume: Volume,
    slots: Vec<OnceLock<Arc<EncodedSlice>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl FeatureCache {
    pub fn new(volume: Volume) -> Self {
        let slots = (0..volume.shape().slices).map(|_| OnceLock::new()).collect();
        Self { volume, slots, hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn get(&self, params: &Params, z: usize) -> Result<Arc<EncodedSlice>> {
        let slot = self
            .slots
            .get(z)
            .ok_or_else(|| Error::Input(format!("slice {z} outside a volume of {} slices", self.slots.len())))?;
        if let Some(enc) = slot.get() {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(enc.clone());
        }
        let s = self.volume.shape();
        let enc = Arc::new(
            encode_slice(params, self.volume.slice(z), s.height, s.width)
                .map_err(|e| Error::Numeric(format!("slice {z}: {e}")))?,
        );
        if slot.set(enc.clone()).is_ok() {
            self.misses.fetch_add(1, Ordering::Relaxed);
        } else {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        Ok(slot.get().unwrap().clone())
    }

    /// Encodes every slice not yet cached, in parallel.
    pub fn prefetch_all(&self, params: &Params) -> Result<()> {
        (0..self.slots.len()).into_par_iter().try_for_each(|z| self.get(params, z).map(|_| ()))
    }

    /// Number of lookups served from the cache.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    /// Number of slices actually encoded.
    pub fn encodes(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

/// One center handed to the next slice.
#[derive(Clone, Debug)]
struct Carried {
    /// Initial value on the next slice.
    init: Vec<f64>,
    class_id: u8,
    memory: Option<MemoryState>,
}

/// Centers carried between slices, stored in fixed-capacity slot arrays so the
/// live state does not depend on the number of slices or tracked objects.
#[derive(Clone, Debug)]
pub struct CarriedState {
    dim: usize,
    centers: Vec<f64>,
    memory: Vec<f64>,
    memory_steps: Vec<usize>,
    class_ids: Vec<u8>,
    len: usize,
}

impl CarriedState {
    pub fn new(slots: usize, dim: usize) -> Self {
        Self {
            dim,
            centers: vec![0.0; slots * dim],
            memory: vec![0.0; slots * dim],
            memory_steps: vec![0; slots],
            class_ids: vec![0; slots],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bytes held by the carried centers and memories.
    pub fn byte_size(&self) -> usize {
        (self.centers.len() + self.memory.len()) * std::mem::size_of::<f64>()
            + self.memory_steps.len() * std::mem::size_of::<usize>()
            + self.class_ids.len()
    }

    fn store(&mut self, items: &[Carried]) -> Result<()> {
        let slots = self.class_ids.len();
        if items.len() > slots {
            return Err(Error::Config(format!("{} carried centers exceed {slots} slots", items.len())));
        }
        let d = self.dim;
        for (i, c) in items.iter().enumerate() {
            if c.init.len() != d {
                return Err(Error::Config(format!("carried center has dimension {}, expected {d}", c.init.len())));
            }
            self.centers[i * d..(i + 1) * d].copy_from_slice(&c.init);
            self.class_ids[i] = c.class_id;
            match &c.memory {
                Some(m) => {
                    self.memory[i * d..(i + 1) * d].copy_from_slice(&m.fused);
                    self.memory_steps[i] = m.step;
                }
                None => self.memory_steps[i] = 0,
            }
        }
        self.len = items.len();
        Ok(())
    }

    fn load(&self) -> Vec<Carried> {
        let d = self.dim;
        (0..self.len)
            .map(|i| Carried {
                init: self.centers[i * d..(i + 1) * d].to_vec(),
                class_id: self.class_ids[i],
                memory: (self.memory_steps[i] > 0).then(|| MemoryState {
                    fused: self.memory[i * d..(i + 1) * d].to_vec(),
                    step: self.memory_steps[i],
                }),
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub slices_decoded: usize,
    /// Largest size of the carried state observed during the run, in bytes.
    pub peak_state_bytes: usize,
    /// Largest number of centers carried at once.
    pub max_carried: usize,
}

impl SweepStats {
    fn merge(&mut self, other: &SweepStats) {
        self.slices_decoded += other.slices_decoded;
        self.peak_state_bytes = self.peak_state_bytes.max(other.peak_state_bytes);
        self.max_carried = self.max_carried.max(other.max_carried);
    }
}

/// Role of an input center on a slice.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Role {
    /// Carried from the previous slice.
    Carried,
    /// Seeded from a positive click; always written on its anchor slice.
    Seed,
    /// Seeded from a negative click; competes for pixels, never written or carried.
    Negative,
}

struct Incoming {
    embedding: Vec<f64>,
    class_id: u8,
    memory: Option<MemoryState>,
    role: Role,
}

/// `false`: every kept center is written with its argmax class. `true`: only
/// centers tracking their own class are written and carried.
#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Automatic,
    Tracked,
}

/// Linear interpolation taps `(i0, i1, frac)` mapping `out_len` cells onto `in_len` cells.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Mask logits at the mask stride, bilinearly resized to the slice grid.
pub fn upsample_logits(logits: &[f64], in_hw: (usize, usize), out_hw: (usize, usize)) -> Vec<f64> {
    let (ih, iw) = in_hw;
    let (oh, ow) = out_hw;
    let ty = bilinear_taps(oh, ih);
    let tx = bilinear_taps(ow, iw);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let a = logits[y0 * iw + x0] * (1.0 - fx) + logits[y0 * iw + x1] * fx;
            let b = logits[y1 * iw + x0] * (1.0 - fx) + logits[y1 * iw + x1] * fx;
            out.push(a * (1.0 - fy) + b * fy);
        }
    }
    out
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

struct Sweeper<'a> {
    params: &'a Params,
    cfg: &'a InferenceConfig,
    cache: &'a FeatureCache,
    mode: Mode,
}

impl Sweeper<'_> {
    /// Decodes slice `z` with `incoming` centers plus learned ones, writes scores
    /// into `out` and returns the centers to carry on.
    fn step(&self, z: usize, incoming: &[Incoming], out: &mut MaskScoreVolume) -> Result<Vec<Carried>> {
        let params = self.params;
        let d = params.config.dim;
        let n_total = params.config.n_centers();
        let learned = params.get("query.embed");
        if incoming.len() > n_total {
            return Err(Error::Config(format!("{} input centers exceed the {n_total} available", incoming.len())));
        }
        let mut data = Vec::with_capacity(n_total * d);
        for c in incoming {
            if c.embedding.len() != d {
                return Err(Error::Config(format!("center dimension {} does not match D={d}", c.embedding.len())));
            }
            data.extend_from_slice(&c.embedding);
        }
        data.extend_from_slice(&learned.data[..(n_total - incoming.len()) * d]);
        let centers = Tensor::new(vec![n_total, d], data);

        let enc = self.cache.get(params, z)?;
        let dec = decode(params, &enc, &centers)?;
        let last = dec.last();
        if !last.class_logits.all_finite() || !last.mask_logits.all_finite() {
            return Err(Error::Numeric(format!("non-finite decoder output on slice {z}")));
        }
        let probs = softmax_rows(&last.class_logits);
        let shape = self.cache.volume().shape();
        let out_hw = (shape.height, shape.width);

        let mut write = |n: usize, class_id: u8, p: f64| {
            let logits = upsample_logits(last.mask_logits.row(n), dec.mask_hw, out_hw);
            let scores: Vec<f32> = logits.iter().map(|&l| (p * sigmoid(l)) as f32).collect();
            out.max_assign(class_id, z, &scores);
        };

        let mut keep: Vec<(usize, u8)> = Vec::new();
        match self.mode {
            Mode::Automatic => {
                for (n, class_id, p) in select_foreground_infer(&probs, self.cfg.keep_threshold) {
                    if n < incoming.len() && incoming[n].role == Role::Negative {
                        continue;
                    }
                    write(n, class_id, p);
                    keep.push((n, class_id));
                }
            }
            Mode::Tracked => {
                for (n, c) in incoming.iter().enumerate() {
                    if c.role == Role::Negative {
                        continue;
                    }
                    let row = probs.row(n);
                    let k = c.class_id as usize;
                    let p = row[k];
                    let is_argmax = row.iter().enumerate().all(|(j, &q)| j == k || q < p);
                    let kept = is_argmax && p >= self.cfg.keep_threshold;
                    if kept || c.role == Role::Seed {
                        write(n, c.class_id, p);
                    }
                    if kept {
                        keep.push((n, c.class_id));
                    }
                }
            }
        }

        if !self.cfg.propagate {
            return Ok(Vec::new());
        }
        keep.into_iter()
            .map(|(n, class_id)| {
                let decoded = dec.centers.row(n);
                let prev = incoming.get(n).and_then(|c| c.memory.as_ref());
                if !self.cfg.use_memory {
                    return Ok(Carried { init: decoded.to_vec(), class_id, memory: None });
                }
                let init = init_next_center(decoded, prev, params)?;
                let memory = Some(fuse_memory(prev, decoded, params)?);
                Ok(Carried { init, class_id, memory })
            })
            .collect()
    }

    /// Runs `step` over `order`, feeding each slice's carried centers to the next.
    fn run(&self, order: impl Iterator<Item = usize>, start: Vec<Carried>, out: &mut MaskScoreVolume) -> Result<SweepStats> {
        let cfg = &self.params.config;
        let mut state = CarriedState::new(cfg.n_centers(), cfg.dim);
        state.store(&start)?;
        let mut stats = SweepStats { peak_state_bytes: state.byte_size(), max_carried: state.len(), ..Default::default() };
        for z in order {
            let incoming: Vec<Incoming> = state
                .load()
                .into_iter()
                .map(|c| Incoming { embedding: c.init, class_id: c.class_id, memory: c.memory, role: Role::Carried })
                .collect();
            let carried = self.step(z, &incoming, out)?;
            state.store(&carried)?;
            stats.slices_decoded += 1;
            stats.peak_state_bytes = stats.peak_state_bytes.max(state.byte_size());
            stats.max_carried = stats.max_carried.max(state.len());
        }
        Ok(stats)
    }
}

/// Automatic segmentation: sweeps from the first slice to the last.
pub fn propagate_volume_auto(cache: &FeatureCache, params: &Params, cfg: &InferenceConfig) -> Result<(MaskScoreVolume, SweepStats)> {
    let shape = cache.volume().shape();
    let mut out = MaskScoreVolume::zeros(params.config.n_classes, shape, Provenance::Automatic);
    let sweeper = Sweeper { params, cfg, cache, mode: Mode::Automatic };
    let stats = sweeper.run(0..shape.slices, Vec::new(), &mut out)?;
    Ok((out, stats))
}

/// Accumulated click features per (class, polarity), updated round by round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClickFeatures {
    pub positive: std::collections::BTreeMap<u8, Vec<f64>>,
    pub negative: std::collections::BTreeMap<u8, Vec<f64>>,
}

impl ClickFeatures {
    /// Folds one click's point feature into its accumulator and returns the new value.
    pub fn accumulate(&mut self, click: &Click, feature: &[f64], cfg: &InferenceConfig) -> Vec<f64> {
        let map = match click.polarity {
            Polarity::Positive => &mut self.positive,
            Polarity::Negative => &mut self.negative,
        };
        let beta = if cfg.adaptive_sampling { cfg.beta } else { 0.0 };
        let next = adaptive_combine(feature, map.get(&click.class_id).map(|v| v.as_slice()), beta);
        map.insert(click.class_id, next.clone());
        next
    }

    /// Accumulated click features carried between rounds, in bytes.
    pub fn byte_size(&self) -> usize {
        self.positive.values().chain(self.negative.values()).map(|v| v.len() * 8).sum()
    }
}

/// One refinement round: clicks are grouped by slice; each group seeds centers on
/// its anchor slice, which is decoded once and then swept toward both ends of the
/// volume. Only click-seeded tracks are written.
pub fn run_click_round(
    cache: &FeatureCache,
    params: &Params,
    cfg: &InferenceConfig,
    clicks: &[Click],
    features: &mut ClickFeatures,
    round: u32,
) -> Result<(MaskScoreVolume, SweepStats)> {
    let shape = cache.volume().shape();
    let n_classes = params.config.n_classes;
    if clicks.is_empty() {
        return Err(Error::Input("a refinement round needs at least one click".into()));
    }
    for c in clicks {
        c.validate(shape, n_classes)?;
    }
    let mut anchors: Vec<usize> = clicks.iter().map(|c| c.slice_index).collect();
    anchors.sort_unstable();
    anchors.dedup();

    let mut out = MaskScoreVolume::zeros(n_classes, shape, Provenance::Interactive);
    let mut stats = SweepStats::default();
    let sweeper = Sweeper { params, cfg, cache, mode: Mode::Tracked };
    for anchor in anchors {
        let enc = cache.get(params, anchor)?;
        // One seed per (class, polarity) on this anchor, from the latest accumulated feature.
        let mut seeds: Vec<Incoming> = Vec::new();
        for c in clicks.iter().filter(|c| c.slice_index == anchor) {
            let o = sample_point_feature(&enc.features, c.row, c.col)?;
            let o_hat = features.accumulate(c, &o, cfg);
            let center = init_center_from_click(&o_hat, c.class_id, round, params)?;
            let role = match c.polarity {
                Polarity::Positive => Role::Seed,
                Polarity::Negative => Role::Negative,
            };
            seeds.retain(|s| !(s.class_id == c.class_id && s.role == role));
            seeds.push(Incoming { embedding: center.embedding, class_id: c.class_id, memory: None, role });
        }
        let start = sweeper.step(anchor, &seeds, &mut out)?;
        stats.slices_decoded += 1;
        let mut fwd_out = out.clone();
        let (fwd, bwd) = rayon::join(
            || sweeper.run(anchor + 1..shape.slices, start.clone(), &mut fwd_out),
            || sweeper.run((0..anchor).rev(), start.clone(), &mut out),
        );
        stats.merge(&fwd?);
        stats.merge(&bwd?);
        crate::interaction::fuse_round(&mut out, &fwd_out)?;
    }
    Ok((out, stats))
}

/// Automatic pass plus one round seeded by `clicks`, fused per voxel by maximum.
pub fn propagate_volume_interactive(
    cache: &FeatureCache,
    clicks: &[Click],
    params: &Params,
    cfg: &InferenceConfig,
) -> Result<MaskScoreVolume> {
    let (mut fused, _) = propagate_volume_auto(cache, params, cfg)?;
    let mut features = ClickFeatures::default();
    let (round, _) = run_click_round(cache, params, cfg, clicks, &mut features, 1)?;
    crate::interaction::fuse_round(&mut fused, &round)?;
    Ok(fused)
}
