//! Cross-attention visualization: where the learned queries look in the
//! image, per aggregation block.
//!
//! Run with: cargo run --example attention_maps

use placerec::autodiff::no_grad;
use placerec::boq::{mean_attention_map, PlaceModel};
use placerec::config::ModelConfig;
use placerec::data::toygen::toy_image;
use placerec::data::{save_heatmap, save_image, upsample_map};

fn main() -> placerec::Result<()> {
    let out_dir = std::path::Path::new("target/attention_maps");
    std::fs::create_dir_all(out_dir)?;

    // bigger input -> finer patch grid (84 px / 14 px patches = 6x6)
    let mut cfg = ModelConfig::tiny();
    cfg.train_resize = 84;
    cfg.eval_resize = 84;
    let model = PlaceModel::new(&cfg, 9)?;

    let img = toy_image(31, 2, 0, cfg.eval_resize);
    save_image(&out_dir.join("input.png"), &img)?;
    let out = no_grad(|| model.forward_image(&img))?;

    for (l, (attn, fm)) in out.cross_attn.iter().zip(&out.block_maps).enumerate() {
        // head-averaged [queries, positions]; each row sums to 1
        let (m, n) = attn.dim();
        println!("block {l}: {m} queries over {n} positions ({}x{})", fm.h, fm.w);
        let grid = mean_attention_map(attn, fm.h, fm.w)?;
        let up = upsample_map(&grid, 84, 84);
        let path = out_dir.join(format!("block{l}.png"));
        save_heatmap(&path, &up)?;
        let peak = grid.iter().cloned().fold(f32::MIN, f32::max);
        let flat = 1.0 / n as f32;
        println!(
            "  peak attention {:.4} vs uniform {:.4} -> {}",
            peak,
            flat,
            path.display()
        );
    }
    Ok(())
}
