//! Training objectives: online pair mining, the multi-similarity global
//! loss, the query-combination triplet loss, and their weighted total.
//!
//! Mining and top-k selection run on detached descriptor values; graph nodes
//! are built only for the pairs that survive, so the tape stays small even
//! for large batches.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::autodiff::{maximum, stack_scalars, sum_tensors, Tensor};
use crate::config::{LocalLossConfig, LossWeights, MsLossConfig};

/// Pairs kept by the online miner. Positive pairs share a label with their
/// anchor; negative pairs never do.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletIndices {
    pub pos_pairs: Vec<(usize, usize)>,
    pub neg_pairs: Vec<(usize, usize)>,
}

impl TripletIndices {
    pub fn is_empty(&self) -> bool {
        self.pos_pairs.is_empty() && self.neg_pairs.is_empty()
    }

    /// Groups pairs by anchor: `anchor -> (positives, negatives)`, anchors
    /// in ascending order, members in kept order.
    pub fn grouped(&self) -> BTreeMap<usize, (Vec<usize>, Vec<usize>)> {
        let mut map: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for &(a, p) in &self.pos_pairs {
            map.entry(a).or_default().0.push(p);
        }
        for &(a, n) in &self.neg_pairs {
            map.entry(a).or_default().1.push(n);
        }
        map
    }
}

/// Online hard mining over a batch of unit-norm descriptors.
///
/// For anchor `i`: a positive `j` is kept when `sim(i,j) < max_k sim(i,k) + eps`
/// over negatives `k`; a negative `k` is kept when
/// `sim(i,k) > min_j sim(i,j) - eps` over positives `j`. Anchors lacking
/// either side keep nothing.
pub fn mine_triplets(descriptors: &Array2<f32>, labels: &[usize], epsilon: f32) -> TripletIndices {
    let b = descriptors.nrows();
    assert_eq!(b, labels.len(), "one label per descriptor");
    let sim = descriptors.dot(&descriptors.t());
    let mut out = TripletIndices::default();
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg: Vec<usize> = (0..b).filter(|&k| labels[k] != labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let max_neg = neg.iter().map(|&k| sim[[i, k]]).fold(f32::NEG_INFINITY, f32::max);
        let min_pos = pos.iter().map(|&j| sim[[i, j]]).fold(f32::INFINITY, f32::min);
        for &j in &pos {
            if sim[[i, j]] < max_neg + epsilon {
                out.pos_pairs.push((i, j));
            }
        }
        for &k in &neg {
            if sim[[i, k]] > min_pos - epsilon {
                out.neg_pairs.push((i, k));
            }
        }
    }
    out
}

/// Indices of the `k` highest scores, ties broken toward the lower index.
fn top_k_desc(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Multi-similarity loss over mined pairs. `descriptors[i]` is the
/// unit-norm global descriptor of image `i` as a graph tensor; mining runs
/// on detached values. The per-anchor terms are averaged over anchors that
/// kept at least one pair; no surviving pairs yields a constant zero.
pub fn ms_loss(descriptors: &[Tensor], labels: &[usize], cfg: &MsLossConfig) -> Tensor {
    let values = descriptor_matrix(descriptors);
    let mined = mine_triplets(&values, labels, cfg.miner_epsilon);
    ms_loss_from_pairs(descriptors, &mined, cfg)
}

/// The loss formula itself, applied to an already-mined pair set.
pub fn ms_loss_from_pairs(
    descriptors: &[Tensor],
    mined: &TripletIndices,
    cfg: &MsLossConfig,
) -> Tensor {
    if mined.is_empty() {
        return Tensor::scalar(0.0);
    }
    let mut anchor_terms = Vec::new();
    for (r, (pos, neg)) in mined.grouped() {
        let mut parts = Vec::new();
        if !pos.is_empty() {
            let sims: Vec<Tensor> = pos
                .iter()
                .map(|&p| descriptors[r].dot(&descriptors[p]))
                .collect();
            let exps = stack_scalars(&sims)
                .add_scalar(-cfg.base)
                .scale(-cfg.alpha)
                .exp()
                .sum_all();
            parts.push(exps.add_scalar(1.0).ln().scale(1.0 / cfg.alpha));
        }
        if !neg.is_empty() {
            let sims: Vec<Tensor> = neg
                .iter()
                .map(|&n| descriptors[r].dot(&descriptors[n]))
                .collect();
            let exps = stack_scalars(&sims)
                .add_scalar(-cfg.base)
                .scale(cfg.beta)
                .exp()
                .sum_all();
            parts.push(exps.add_scalar(1.0).ln().scale(1.0 / cfg.beta));
        }
        anchor_terms.push(sum_tensors(&parts));
    }
    let n = anchor_terms.len() as f32;
    sum_tensors(&anchor_terms).scale(1.0 / n)
}

/// Query-combination triplet loss.
///
/// Per unique mined anchor `r`: take the `min(G, |negatives|)` negatives
/// whose global descriptors are most similar to the anchor's; for every
/// combination index `i`, the positive score is the best same-index dot
/// against the anchor's positives and the negative score the best against
/// the hard pool; keep the `min(H, N_c)` combinations with the highest
/// positive scores and average their hinges `max(0, margin - s_pos + s_neg)`;
/// finally average over anchors, or return zero when none qualify.
pub fn local_triplet_loss(
    descriptors: &[Tensor],
    combinations: &[Tensor],
    labels: &[usize],
    cfg: &LocalLossConfig,
    miner_epsilon: f32,
) -> Tensor {
    assert_eq!(descriptors.len(), combinations.len());
    let values = descriptor_matrix(descriptors);
    let mined = mine_triplets(&values, labels, miner_epsilon);
    let mut anchor_terms = Vec::new();
    for (r, (pos, neg)) in mined.grouped() {
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let g = cfg.hard_negatives.min(neg.len());
        let neg_sims: Vec<f32> = neg.iter().map(|&n| values.row(r).dot(&values.row(n))).collect();
        let pool: Vec<usize> = top_k_desc(&neg_sims, g).into_iter().map(|k| neg[k]).collect();

        let s_pos = maximum(
            &pos.iter()
                .map(|&p| combinations[r].row_dot(&combinations[p]))
                .collect::<Vec<_>>(),
        );
        let s_neg = maximum(
            &pool
                .iter()
                .map(|&n| combinations[r].row_dot(&combinations[n]))
                .collect::<Vec<_>>(),
        );
        let n_c = s_pos.shape()[0];
        let h = cfg.top_combinations.min(n_c);
        let s_pos_vals = s_pos.value1();
        let top = top_k_desc(s_pos_vals.as_slice().unwrap(), h);
        let hinge = s_neg
            .sub(&s_pos)
            .add_scalar(cfg.margin)
            .gather_1d(&top)
            .relu();
        anchor_terms.push(hinge.sum_all().scale(1.0 / h as f32));
    }
    if anchor_terms.is_empty() {
        return Tensor::scalar(0.0);
    }
    let n = anchor_terms.len() as f32;
    sum_tensors(&anchor_terms).scale(1.0 / n)
}

fn descriptor_matrix(descriptors: &[Tensor]) -> Array2<f32> {
    assert!(!descriptors.is_empty());
    let dim = descriptors[0].shape()[0];
    let mut m = Array2::<f32>::zeros((descriptors.len(), dim));
    for (i, d) in descriptors.iter().enumerate() {
        let v = d.value1();
        m.row_mut(i).assign(&v);
    }
    m
}

/// Loss components of one training step, recorded in double precision.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ms: f64,
    pub local: f64,
    pub adv_query: f64,
    pub adv_feature: f64,
}

/// Weighted objective in double precision (for logs and spot checks).
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.ms
        + w.local * parts.local
        + w.adv_query * parts.adv_query
        + w.adv_feature * parts.adv_feature
}

/// Weighted objective on the graph (single precision, backpropagatable).
pub fn combine_losses(
    ms: &Tensor,
    local: &Tensor,
    adv_query: &Tensor,
    adv_feature: &Tensor,
    w: &LossWeights,
) -> Tensor {
    ms.add(&local.scale(w.local as f32))
        .add(&adv_query.scale(w.adv_query as f32))
        .add(&adv_feature.scale(w.adv_feature as f32))
}
