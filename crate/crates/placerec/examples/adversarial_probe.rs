//! Measures how much domain information the aggregated query features leak,
//! with and without adversarial alignment, using a linear probe.
//!
//! A discriminator trained through the gradient-reversal layer pushes the
//! model toward domain-invariant features, so the probe should separate the
//! six synthetic domains *worse* after adversarial training.
//!
//! Run with: cargo run --example adversarial_probe

use ndarray::Array2;
use placerec::adversarial::domain_probe_accuracy;
use placerec::autodiff::no_grad;
use placerec::boq::PlaceModel;
use placerec::config::{ModelConfig, RunConfig};
use placerec::data::sampler::{BatchSpec, TrainSet};
use placerec::data::toygen::toy_image;
use placerec::data::transforms::{apply_domain, NUM_DOMAINS};
use placerec::train::Trainer;

/// Aggregated query features of augmented images, with domain labels.
fn probe_set(model: &PlaceModel, size: usize) -> (Array2<f32>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for place in 0..6 {
        let img = toy_image(3, place, 0, size);
        for d in 0..NUM_DOMAINS as u8 {
            let aug = apply_domain(&img, d, 1000 + place as u64).unwrap();
            let out = no_grad(|| model.forward_image(&aug)).unwrap();
            let feats = out.query_features.value2();
            for row in feats.rows() {
                rows.push(row.to_owned());
                labels.push(d as usize);
            }
        }
    }
    let dim = rows[0].len();
    let mut m = Array2::<f32>::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    (m, labels)
}

fn train_arm(adversarial: bool, set: &TrainSet) -> PlaceModel {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.adversarial.hidden_dim = 64;
    cfg.train.epochs = 12;
    cfg.train.warmup_epochs = 1;
    cfg.train.batch_places = 4;
    cfg.train.images_per_place = 3;
    // toy images converge at a much higher rate than full-size ones
    cfg.train.base_lr = 2e-3;
    cfg.train.decay_every = 100;
    cfg.train.seed = 5;
    if !adversarial {
        cfg.loss_weights.adv_query = 0.0;
        cfg.loss_weights.adv_feature = 0.0;
        cfg.adversarial.enabled = false;
    }
    let spec = BatchSpec::new(cfg.train.batch_places, cfg.train.images_per_place);
    let steps = set.steps_per_epoch(&spec);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    for epoch in 0..cfg.train.epochs {
        for step in 0..steps {
            let batch = set.sample_batch(&spec, epoch, step, cfg.train.seed).unwrap();
            let lr = cfg.train.lr_at_step(epoch, step, steps);
            trainer.train_step(&batch, lr, epoch, step).unwrap();
        }
    }
    trainer.model
}

fn main() {
    let size = 42;
    // in-memory training set: 8 places x 6 views
    let places: Vec<(u32, Vec<ndarray::Array3<f32>>)> = (0..8)
        .map(|p| {
            (
                p as u32,
                (0..6).map(|k| toy_image(21, p, k, size)).collect(),
            )
        })
        .collect();
    let set = TrainSet::from_images(places);

    println!("training arm without adversarial alignment...");
    let plain = train_arm(false, &set);
    println!("training arm with adversarial alignment...");
    let aligned = train_arm(true, &set);

    let (feats_plain, labels) = probe_set(&plain, size);
    let (feats_aligned, _) = probe_set(&aligned, size);
    let acc_plain = domain_probe_accuracy(&feats_plain, &labels, NUM_DOMAINS, 300, 0.5);
    let acc_aligned = domain_probe_accuracy(&feats_aligned, &labels, NUM_DOMAINS, 300, 0.5);

    println!("linear probe domain accuracy (chance = {:.1}%):", 100.0 / NUM_DOMAINS as f32);
    println!("  without alignment: {:.1}%", 100.0 * acc_plain);
    println!("  with alignment:    {:.1}%", 100.0 * acc_aligned);
}
