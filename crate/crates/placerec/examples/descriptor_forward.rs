//! Forward pass anatomy: image -> patch features -> cascaded query blocks
//! -> mixed combinations -> flattened global descriptor.
//!
//! Run with: cargo run --example descriptor_forward

use ndarray::Array2;
use placerec::autodiff::no_grad;
use placerec::backbone::FeatureMap;
use placerec::autodiff::Tensor;
use placerec::boq::PlaceModel;
use placerec::config::ModelConfig;
use placerec::data::toygen::toy_image;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> placerec::Result<()> {
    // ---- trainable toy backbone on a procedural image ----
    let cfg = ModelConfig::tiny();
    let model = PlaceModel::new(&cfg, 42)?;
    let img = toy_image(7, 0, 0, cfg.train_resize);
    let out = no_grad(|| model.forward_image(&img))?;

    println!("tiny config: {} blocks x {} queries, feature dim {}", cfg.num_blocks, cfg.queries_per_block, cfg.feature_dim);
    println!("descriptor length {} (= {} combinations x {} dims)", out.descriptor.shape()[0], cfg.num_combinations, cfg.feature_dim);
    let d = out.descriptor.value1();
    println!("descriptor norm {:.6}", d.dot(&d).sqrt());
    println!("query features per image: {}", out.query_features.shape()[0]);

    // every cross-attention row is a distribution over the patch grid
    for (l, attn) in out.cross_attn.iter().enumerate() {
        let worst = attn
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0f32, f32::max);
        println!("block {l}: max |row sum - 1| = {worst:.2e}");
    }

    // ---- external-features mode: bring your own backbone ----
    // 16 features of dim 32 arranged on a 4x4 grid, e.g. exported from a
    // frozen encoder
    let mut ext_cfg = ModelConfig::tiny();
    ext_cfg.backbone = placerec::config::BackboneKind::ExternalFeatures;
    let ext_model = PlaceModel::new(&ext_cfg, 42)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut feats = Array2::<f32>::zeros((16, ext_cfg.feature_dim));
    for v in feats.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let fm = FeatureMap {
        x: Tensor::constant(feats.into_dyn()),
        h: 4,
        w: 4,
    };
    let ext_out = no_grad(|| ext_model.forward_features(&fm));
    println!(
        "external features: descriptor length {}",
        ext_out.descriptor.shape()[0]
    );

    // reference configuration matches the published geometry
    let full = ModelConfig::reference();
    println!(
        "reference config descriptor length: {}",
        full.descriptor_dim()
    );
    Ok(())
}
