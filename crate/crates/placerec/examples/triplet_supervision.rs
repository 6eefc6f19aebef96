//! The two metric-learning losses side by side: pair-mined multi-similarity
//! on global descriptors, and the query-combination triplet loss that pushes
//! each combination row toward its hardest in-batch negatives.
//!
//! Run with: cargo run --example triplet_supervision

use ndarray::Array1;
use placerec::autodiff::Tensor;
use placerec::config::{LocalLossConfig, MsLossConfig};
use placerec::losses::{local_triplet_loss, mine_triplets, ms_loss};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Unit-norm descriptor with a place-specific direction plus noise.
fn descriptor(rng: &mut ChaCha8Rng, place: usize, dim: usize, noise: f32) -> Tensor {
    let mut v = Array1::<f32>::zeros(dim);
    v[place % dim] = 1.0;
    for x in v.iter_mut() {
        *x += rng.random_range(-noise..noise);
    }
    let norm = v.dot(&v).sqrt();
    Tensor::constant((v / norm).into_dyn())
}

fn combination_matrix(rng: &mut ChaCha8Rng, place: usize, rows: usize, dim: usize) -> Tensor {
    let mut m = ndarray::Array2::<f32>::zeros((rows, dim));
    for i in 0..rows {
        m[[i, (place + i) % dim]] = 1.0;
        for j in 0..dim {
            m[[i, j]] += rng.random_range(-0.2..0.2);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        for j in 0..dim {
            m[[i, j]] /= norm;
        }
    }
    Tensor::constant(m.into_dyn())
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dim = 8;
    // 4 places x 3 images
    let labels: Vec<usize> = (0..12).map(|i| i / 3).collect();
    let descriptors: Vec<Tensor> = labels
        .iter()
        .map(|&p| descriptor(&mut rng, p, dim, 0.45))
        .collect();

    // ---- pair mining ----
    let values = ndarray::Array2::from_shape_fn((12, dim), |(i, j)| {
        descriptors[i].value1()[j]
    });
    let mined = mine_triplets(&values, &labels, 0.1);
    println!(
        "miner kept {} positive and {} negative pairs across {} anchors",
        mined.pos_pairs.len(),
        mined.neg_pairs.len(),
        mined.grouped().len()
    );
    // a mined anchor always has both sides: hard positives only exist
    // relative to a competing negative, and vice versa
    for (anchor, (pos, neg)) in mined.grouped() {
        assert!(!pos.is_empty() && !neg.is_empty());
        let _ = anchor;
    }

    // ---- multi-similarity loss ----
    let cfg = MsLossConfig::default();
    let loss = ms_loss(&descriptors, &labels, &cfg);
    println!("ms_loss = {:.4}", loss.scalar_value());

    // ---- combination-level triplet loss ----
    let combos: Vec<Tensor> = labels
        .iter()
        .map(|&p| combination_matrix(&mut rng, p, 4, dim))
        .collect();
    let local_cfg = LocalLossConfig::default();
    let local = local_triplet_loss(&descriptors, &combos, &labels, &local_cfg, 0.1);
    println!(
        "local triplet loss (margin {}) = {:.4}",
        local_cfg.margin,
        local.scalar_value()
    );

    // a larger margin can only increase the hinge terms
    let mut wide = local_cfg.clone();
    wide.margin = 0.5;
    let wider = local_triplet_loss(&descriptors, &combos, &labels, &wide, 0.1);
    println!("local triplet loss (margin 0.5) = {:.4}", wider.scalar_value());
    assert!(wider.scalar_value() >= local.scalar_value());
}
