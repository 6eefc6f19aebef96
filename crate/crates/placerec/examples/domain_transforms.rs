//! The six synthetic appearance domains (fog, rain, snow, wind, night, sun)
//! plus the reserved held-out shift, applied to one toy image and written
//! as PNGs for inspection.
//!
//! Run with: cargo run --example domain_transforms

use placerec::data::toygen::toy_image;
use placerec::data::transforms::{apply_domain, domain_name, holdout_shift, NUM_DOMAINS};
use placerec::data::{mean_intensity, save_image};

fn main() -> placerec::Result<()> {
    let out_dir = std::path::Path::new("target/domain_transforms");
    std::fs::create_dir_all(out_dir)?;

    let img = toy_image(11, 3, 0, 84);
    save_image(&out_dir.join("original.png"), &img)?;
    println!(
        "original: mean intensity {:.3} -> {}",
        mean_intensity(&img),
        out_dir.join("original.png").display()
    );

    // same seed, same output: transforms are deterministic
    for id in 0..NUM_DOMAINS as u8 {
        let name = domain_name(id)?;
        let aug = apply_domain(&img, id, 7)?;
        let again = apply_domain(&img, id, 7)?;
        assert_eq!(aug, again, "transform must be deterministic by seed");
        let (lo, hi) = aug
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        assert!(lo >= 0.0 && hi <= 1.0, "range must stay in [0,1]");
        let path = out_dir.join(format!("{name}.png"));
        save_image(&path, &aug)?;
        println!(
            "{name:>5}: mean intensity {:.3} (delta {:+.3}) -> {}",
            mean_intensity(&aug),
            mean_intensity(&aug) - mean_intensity(&img),
            path.display()
        );
    }

    // the held-out shift is reserved for evaluation-time distribution shift;
    // training never samples it
    let shifted = holdout_shift(&img, 7);
    save_image(&out_dir.join("holdout.png"), &shifted)?;
    println!(
        "holdout shift: mean intensity {:.3} -> {}",
        mean_intensity(&shifted),
        out_dir.join("holdout.png").display()
    );
    Ok(())
}
