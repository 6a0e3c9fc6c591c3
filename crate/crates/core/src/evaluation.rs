//! Evaluation drivers over sets of examples: automatic inference, simulated
//! interaction, and the on/off ablation grid.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{aggregate, dsc, evaluate, MetricReport};
use crate::model::Params;
use crate::propagation::{propagate_volume_auto, FeatureCache, InferenceConfig};
use crate::session::{simulate_interactive, SimulationResult};
use crate::synth::Example;
use crate::volume::{argmax_labeling, LabelVolume, Volume};

/// Automatic segmentation of one preprocessed volume.
pub fn predict_auto(params: &Params, volume: &Volume, cfg: &InferenceConfig) -> Result<LabelVolume> {
    let cache = FeatureCache::new(volume.clone());
    let (scores, _) = propagate_volume_auto(&cache, params, cfg)?;
    argmax_labeling(&scores, cfg.label_threshold)
}

/// DSC per class `1..=n_classes`; `None` where the class is absent from both volumes.
pub fn class_dsc(pred: &LabelVolume, gt: &LabelVolume, n_classes: usize) -> Result<BTreeMap<u8, Option<f64>>> {
    let mut out = BTreeMap::new();
    for k in 1..=n_classes as u8 {
        let a = pred.class_mask(k);
        let b = gt.class_mask(k);
        let present = a.iter().chain(&b).any(|&v| v);
        out.insert(k, if present { Some(dsc(&a, &b)?) } else { None });
    }
    Ok(out)
}

/// Mean of the present entries of a [`class_dsc`] map.
pub fn mean_present(per_class: &BTreeMap<u8, Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = per_class.values().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean automatic DSC over every present (volume, class) pair.
pub fn mean_auto_dsc(params: &Params, examples: &[Example], cfg: &InferenceConfig) -> Result<f64> {
    let per: Vec<Vec<f64>> = examples
        .par_iter()
        .map(|ex| {
            let pred = predict_auto(params, &ex.volume, cfg)?;
            Ok(class_dsc(&pred, &ex.labels, params.config.n_classes)?.into_values().flatten().collect())
        })
        .collect::<Result<_>>()?;
    let all: Vec<f64> = per.into_iter().flatten().collect();
    Ok(if all.is_empty() { 1.0 } else { all.iter().sum::<f64>() / all.len() as f64 })
}

/// Full metric reports of automatic inference, one per example, plus their aggregate.
pub fn evaluate_auto(
    params: &Params,
    examples: &[Example],
    cfg: &InferenceConfig,
    tau: f64,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    let reports: Vec<MetricReport> = examples
        .par_iter()
        .map(|ex| {
            let pred = predict_auto(params, &ex.volume, cfg)?;
            evaluate(&pred, &ex.labels, ex.volume.spacing(), params.config.n_classes, tau)
        })
        .collect::<Result<_>>()?;
    let agg = aggregate(&reports);
    Ok((reports, agg))
}

/// Simulated interaction on every example; `per_round_dsc[r]` is the mean over
/// examples of the mean present-class DSC after round `r` (round 0 = automatic).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractiveSummary {
    pub per_round_dsc: Vec<f64>,
    pub volumes: Vec<SimulationResult>,
}

pub fn evaluate_interactive(
    params: &Params,
    examples: &[Example],
    cfg: &InferenceConfig,
    rounds: usize,
) -> Result<InteractiveSummary> {
    let volumes: Vec<SimulationResult> = examples
        .par_iter()
        .map(|ex| simulate_interactive(params, &ex.volume, &ex.labels, cfg, rounds))
        .collect::<Result<_>>()?;
    let mut per_round_dsc = vec![0.0; rounds + 1];
    for v in &volumes {
        for (r, slot) in per_round_dsc.iter_mut().enumerate() {
            // Converged simulations keep their last value for later rounds.
            *slot += v.round_dsc[r.min(v.round_dsc.len() - 1)];
        }
    }
    let n = volumes.len().max(1) as f64;
    per_round_dsc.iter_mut().for_each(|v| *v /= n);
    Ok(InteractiveSummary { per_round_dsc, volumes })
}

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub propagate: bool,
    pub use_memory: bool,
    pub adaptive_sampling: bool,
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
    pub mean_nsd: Option<f64>,
    /// Mean DSC after the simulated interaction rounds, when they were run.
    pub interactive_dsc: Option<f64>,
}

/// Automatic metrics with propagation and memory switched on and off (4 rows),
/// plus, when `rounds > 0`, interactive DSC with adaptive sampling on and off
/// under full propagation (2 more rows).
pub fn ablation_grid(
    params: &Params,
    examples: &[Example],
    base: &InferenceConfig,
    tau: f64,
    rounds: usize,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (propagate, use_memory) in [(false, false), (false, true), (true, false), (true, true)] {
        let cfg = InferenceConfig { propagate, use_memory, ..base.clone() };
        let (_, agg) = evaluate_auto(params, examples, &cfg, tau)?;
        rows.push(AblationRow {
            propagate,
            use_memory,
            adaptive_sampling: base.adaptive_sampling,
            mean_dsc: agg.mean_dsc,
            mean_hd95: agg.mean_hd95,
            mean_nsd: agg.mean_nsd,
            interactive_dsc: None,
        });
    }
    if rounds > 0 {
        for adaptive_sampling in [false, true] {
            let cfg = InferenceConfig { adaptive_sampling, ..base.clone() };
            let s = evaluate_interactive(params, examples, &cfg, rounds)?;
            rows.push(AblationRow {
                propagate: cfg.propagate,
                use_memory: cfg.use_memory,
                adaptive_sampling,
                mean_dsc: None,
                mean_hd95: None,
                mean_nsd: None,
                interactive_dsc: s.per_round_dsc.last().copied(),
            });
        }
    }
    Ok(rows)
}
