//! Bipartite matching of predicted masks to ground-truth masks.

use serde::{Deserialize, Serialize};

use crate::autograd::{bce_logit, sigmoid, DICE_SMOOTH};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchWeights {
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { cls: 2.0, dice: 5.0, bce: 5.0 }
    }
}

/// Prediction-to-target assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `assignment[n]` is the target matched to prediction `n`, if any.
    pub assignment: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Matching {
    pub fn empty(n_predictions: usize) -> Self {
        Self { assignment: vec![None; n_predictions], total_cost: 0.0 }
    }

    /// `(prediction, target)` pairs ordered by target.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> =
            self.assignment.iter().enumerate().filter_map(|(n, t)| t.map(|t| (n, t))).collect();
        pairs.sort_by_key(|&(_, t)| t);
        pairs
    }

    /// Prediction matched to each target, `None` for unmatched targets.
    pub fn prediction_for_targets(&self, n_targets: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_targets];
        for (n, t) in self.pairs() {
            out[t] = Some(n);
        }
        out
    }
}

/// Soft Dice with the same smoothing as the training loss.
fn soft_dice(mask_logits: &[f64], gt_mask: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut denom = DICE_SMOOTH;
    for (&z, &t) in mask_logits.iter().zip(gt_mask) {
        let s = sigmoid(z);
        inter += s * t;
        denom += s + t;
    }
    (2.0 * inter + DICE_SMOOTH) / denom
}

/// `λ_cls (1 - p(gt_class)) + λ_dice (1 - softDice) + λ_bce meanBCE` for one pair.
pub fn match_cost(
    mask_logits: &[f64],
    class_probs: &[f64],
    gt_mask: &[f64],
    gt_class: usize,
    weights: &MatchWeights,
) -> Result<f64> {
    if mask_logits.len() != gt_mask.len() || mask_logits.is_empty() {
        return Err(Error::Shape(format!("mask sizes {} and {} differ", mask_logits.len(), gt_mask.len())));
    }
    let p = *class_probs
        .get(gt_class)
        .ok_or_else(|| Error::Shape(format!("class {gt_class} outside {} probabilities", class_probs.len())))?;
    let bce = mask_logits.iter().zip(gt_mask).map(|(&z, &t)| bce_logit(z, t)).sum::<f64>() / gt_mask.len() as f64;
    Ok(weights.cls * (1.0 - p) + weights.dice * (1.0 - soft_dice(mask_logits, gt_mask)) + weights.bce * bce)
}

/// All-pairs cost `[N, K]` for `mask_logits[N, P]`, `class_probs[N, C]` and K targets.
pub fn cost_matrix(
    mask_logits: &Tensor,
    class_probs: &Tensor,
    targets: &[(usize, Vec<f64>)],
    weights: &MatchWeights,
) -> Tensor {
    let (n, p) = (mask_logits.rows(), mask_logits.cols());
    let k = targets.len();
    if k == 0 {
        return Tensor::zeros(&[n, 0]);
    }
    let sig = Tensor::new(mask_logits.shape.clone(), mask_logits.data.iter().map(|&z| sigmoid(z)).collect());
    let tgt = Tensor::new(vec![k, p], targets.iter().flat_map(|(_, m)| m.iter().copied()).collect());
    let inter = gemm(&sig, false, &tgt, true);
    let z_t = gemm(mask_logits, false, &tgt, true);
    let sig_sum: Vec<f64> = (0..n).map(|i| sig.row(i).iter().sum()).collect();
    let softplus_sum: Vec<f64> = (0..n).map(|i| mask_logits.row(i).iter().map(|&z| bce_logit(z, 0.0)).sum()).collect();
    let tgt_sum: Vec<f64> = (0..k).map(|j| tgt.row(j).iter().sum()).collect();
    let mut out = Tensor::zeros(&[n, k]);
    for i in 0..n {
        for (j, (cls, _)) in targets.iter().enumerate() {
            let dice = (2.0 * inter.at2(i, j) + DICE_SMOOTH) / (sig_sum[i] + tgt_sum[j] + DICE_SMOOTH);
            let bce = (softplus_sum[i] - z_t.at2(i, j)) / p as f64;
            out.data[i * k + j] =
                weights.cls * (1.0 - class_probs.at2(i, *cls)) + weights.dice * (1.0 - dice) + weights.bce * bce;
        }
    }
    out
}

/// Minimum-cost injection of the K target columns of `cost[N, K]` into its N rows.
///
/// Shortest augmenting path Hungarian algorithm, `O(K² N)`. Deterministic: ties
/// resolve to the first optimum the scan encounters.
pub fn hungarian_match(cost: &Tensor) -> Result<Matching> {
    let (n, k) = (cost.rows(), cost.cols());
    if n < k {
        return Err(Error::InfeasibleMatching { predictions: n, targets: k });
    }
    if !cost.all_finite() {
        return Err(Error::Numeric("matching cost contains non-finite values".into()));
    }
    if k == 0 {
        return Ok(Matching::empty(n));
    }
    // Rows of the working problem are targets (1-based), columns are predictions.
    let c = |t: usize, p: usize| cost.data[(p - 1) * k + (t - 1)];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for t in 1..=k {
        owner[0] = t;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![None; n];
    let mut by_target = vec![0usize; k];
    for j in 1..=n {
        if owner[j] != 0 {
            assignment[j - 1] = Some(owner[j] - 1);
            by_target[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = by_target.iter().enumerate().map(|(t, &p)| cost.at2(p, t)).sum();
    Ok(Matching { assignment, total_cost })
}

/// Indices of predictions kept at inference: argmax class is not no-object and its
/// probability reaches `keep_threshold`. Returns `(index, class, probability)`.
pub fn select_foreground_infer(class_probs: &Tensor, keep_threshold: f64) -> Vec<(usize, u8, f64)> {
    (0..class_probs.rows())
        .filter_map(|i| {
            let row = class_probs.row(i);
            let (best, &p) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
            (best != 0 && p >= keep_threshold).then_some((i, best as u8, p))
        })
        .collect()
}
