//! Multi-round interactive segmentation of one volume, and the simulated user
//! that drives it for evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{class_dsc, mean_present};
use crate::interaction::{fuse_round, simulate_first_click, simulate_refine_click, ClickLedger};
use crate::model::Params;
use crate::propagation::{propagate_volume_auto, run_click_round, ClickFeatures, FeatureCache, InferenceConfig, SweepStats};
use crate::volume::{argmax_labeling, Click, LabelVolume, MaskScoreVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub clicks: Vec<Click>,
    pub stats: SweepStats,
}

/// State of one interactive session: cached slice features, accepted clicks,
/// accumulated click features and the scores fused over all rounds so far.
/// Round 0 is the automatic pass; it runs implicitly before the first click round.
pub struct InteractionSession {
    params: Arc<Params>,
    cache: FeatureCache,
    cfg: InferenceConfig,
    ledger: ClickLedger,
    features: ClickFeatures,
    fused: Option<MaskScoreVolume>,
    rounds: Vec<RoundRecord>,
}

impl InteractionSession {
    pub fn new(params: Arc<Params>, volume: Volume, cfg: InferenceConfig) -> Self {
        let capacity = params.config.per_class_centers;
        Self {
            params,
            cache: FeatureCache::new(volume),
            cfg,
            ledger: ClickLedger::new(capacity),
            features: ClickFeatures::default(),
            fused: None,
            rounds: Vec::new(),
        }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn volume(&self) -> &Volume {
        self.cache.volume()
    }

    pub fn cache(&self) -> &FeatureCache {
        &self.cache
    }

    pub fn ledger(&self) -> &ClickLedger {
        &self.ledger
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.cfg
    }

    /// Number of click rounds run so far.
    pub fn round(&self) -> u32 {
        self.rounds.len() as u32
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    /// Fused scores, once the automatic pass has run.
    pub fn scores(&self) -> Option<&MaskScoreVolume> {
        self.fused.as_ref()
    }

    /// Runs the automatic pass (once) and returns the fused scores.
    pub fn run_auto(&mut self) -> Result<&MaskScoreVolume> {
        if self.fused.is_none() {
            let (scores, _) = propagate_volume_auto(&self.cache, &self.params, &self.cfg)?;
            self.fused = Some(scores);
        }
        Ok(self.fused.as_ref().unwrap())
    }

    /// Runs one refinement round seeded by `clicks` and returns its number.
    /// Rejects the whole batch if any class would exceed its click capacity.
    pub fn refine(&mut self, clicks: &[Click]) -> Result<u32> {
        let shape = self.cache.volume().shape();
        let n_classes = self.params.config.n_classes;
        let mut trial = self.ledger.clone();
        for c in clicks {
            c.validate(shape, n_classes)?;
            trial.push(c.clone())?;
        }
        self.run_auto()?;
        let round = self.round() + 1;
        let stamped: Vec<Click> = clicks.iter().map(|c| Click { round, ..c.clone() }).collect();
        let (scores, stats) = run_click_round(&self.cache, &self.params, &self.cfg, &stamped, &mut self.features, round)?;
        fuse_round(self.fused.as_mut().unwrap(), &scores)?;
        self.ledger = trial;
        self.rounds.push(RoundRecord { round, clicks: stamped, stats });
        Ok(round)
    }

    /// Hard labels of the fused scores (all background before the automatic pass).
    pub fn labels(&self) -> Result<LabelVolume> {
        match &self.fused {
            Some(s) => argmax_labeling(s, self.cfg.label_threshold),
            None => Ok(LabelVolume::zeros(self.cache.volume().shape())),
        }
    }
}

/// Outcome of a simulated interaction on one volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    /// Mean present-class DSC after each round; index 0 is the automatic pass.
    /// Shorter than `rounds + 1` when the prediction became exact.
    pub round_dsc: Vec<f64>,
    pub per_class_dsc: Vec<BTreeMap<u8, Option<f64>>>,
    pub clicks: Vec<Click>,
}

/// Picks the first click: the present class with the lowest automatic DSC (lowest
/// id on ties), at the distance center of its largest ground-truth cross-section.
fn first_click(gt: &LabelVolume, per_class: &BTreeMap<u8, Option<f64>>) -> Result<Option<Click>> {
    let shape = gt.shape();
    let mut worst: Option<(u8, f64)> = None;
    for (&k, d) in per_class {
        if let Some(d) = d {
            let present = gt.labels().iter().any(|&l| l == k);
            if present && worst.is_none_or(|w| *d < w.1) {
                worst = Some((k, *d));
            }
        }
    }
    let Some((k, _)) = worst else { return Ok(None) };
    let mut best = (0usize, 0usize);
    for z in 0..shape.slices {
        let area = gt.slice(z).iter().filter(|&&l| l == k).count();
        if area > best.1 {
            best = (z, area);
        }
    }
    let masks = crate::volume::labels_to_binary_masks(gt, best.0)?;
    let mask = masks.into_iter().find(|(c, _)| *c == k).map(|(_, m)| m).ok_or_else(|| Error::Input("class vanished".into()))?;
    Ok(Some(simulate_first_click(&mask, best.0, k)?))
}

/// Automatic pass followed by up to `rounds` single-click rounds: a first click
/// on the worst class, then clicks on the largest remaining error region.
pub fn simulate_interactive(
    params: &Params,
    volume: &Volume,
    gt: &LabelVolume,
    cfg: &InferenceConfig,
    rounds: usize,
) -> Result<SimulationResult> {
    let n_classes = params.config.n_classes;
    let mut session = InteractionSession::new(Arc::new(params.clone()), volume.clone(), cfg.clone());
    session.run_auto()?;
    let mut pred = session.labels()?;
    let mut per_class = class_dsc(&pred, gt, n_classes)?;
    let mut result = SimulationResult {
        round_dsc: vec![mean_present(&per_class).unwrap_or(1.0)],
        per_class_dsc: vec![per_class.clone()],
        clicks: Vec::new(),
    };
    for r in 1..=rounds {
        let click = if r == 1 {
            first_click(gt, &per_class)?
        } else {
            simulate_refine_click(&pred, gt, n_classes, &session.ledger().full_classes(n_classes))?
        };
        let Some(click) = click else { break };
        session.refine(std::slice::from_ref(&click))?;
        result.clicks.push(Click { round: r as u32, ..click });
        pred = session.labels()?;
        per_class = class_dsc(&pred, gt, n_classes)?;
        result.round_dsc.push(mean_present(&per_class).unwrap_or(1.0));
        result.per_class_dsc.push(per_class.clone());
    }
    Ok(result)
}
