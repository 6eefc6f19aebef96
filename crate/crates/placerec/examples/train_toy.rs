//! End-to-end toy run: generate a synthetic place dataset, train the full
//! pipeline (multi-similarity + combination triplets + dual adversarial
//! alignment) for a few epochs, evaluate, and export attention maps.
//!
//! Run with: cargo run --example train_toy

use placerec::config::{ModelConfig, RunConfig};
use placerec::data::toygen::generate_toy_places;
use placerec::data::load_image;
use placerec::train::checkpoint::Checkpoint;
use placerec::train::{dump_attention, evaluate, run_training, EvalOptions};
use placerec::eval::EvalProtocol;

fn main() -> placerec::Result<()> {
    let root = std::path::Path::new("target/train_toy");
    let data_dir = root.join("data");
    let run_dir = root.join("run");
    std::fs::create_dir_all(root)?;

    // ---- data ----
    let manifest = generate_toy_places(8, 6, 42, 13, &data_dir)?;
    println!(
        "generated {} images over 8 places -> {}",
        manifest.rows.len(),
        data_dir.display()
    );

    // ---- config: small model, short schedule ----
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.adversarial.hidden_dim = 32;
    cfg.train.epochs = 6;
    cfg.train.warmup_epochs = 2;
    cfg.train.decay_every = 2;
    cfg.train.batch_places = 4;
    cfg.train.images_per_place = 3;
    cfg.train.base_lr = 4e-4;
    cfg.train.seed = 1;
    cfg.data.manifest = "data/manifest.csv".into();

    // ---- train ----
    let result = run_training(&cfg, root, &run_dir)?;
    let first = result.loss_log.first().unwrap();
    let last = result.loss_log.last().unwrap();
    println!(
        "loss: {:.4} (ms {:.4}) -> {:.4} (ms {:.4}) over {} steps",
        first.total,
        first.ms,
        last.total,
        last.ms,
        result.loss_log.len()
    );
    println!(
        "validation recall@1 per epoch: {:?}",
        result
            .epoch_metrics
            .iter()
            .map(|(_, r)| *r)
            .collect::<Vec<_>>()
    );
    println!("best epoch {} ({:.1}%)", result.best_epoch, result.best_r1);

    // ---- evaluate the selected checkpoint ----
    let ckpt = Checkpoint::load(&result.best_path)?;
    let model = ckpt.build_model()?;
    let mut opts = EvalOptions::new(EvalProtocol::default(), cfg.model.eval_resize);
    opts.protocol.recall_ranks = vec![1, 5];
    let report = evaluate(&model, &manifest, &data_dir, &opts)?;
    print!("{}", report.text_table());

    // ---- attention export (one heat map + raw grid per block) ----
    let image_path = data_dir.join(&manifest.rows[0].image_path);
    let img = load_image(&image_path, Some(cfg.model.eval_resize))?;
    let paths = dump_attention(&model, &img, &root.join("attention"))?;
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}
