//! Recall@N evaluation on synthetic descriptors: exact cosine search, geo
//! and frame positive definitions, and PCA reduction of the descriptors.
//!
//! Run with: cargo run --example retrieval_eval

use ndarray::{Array1, Array2};
use placerec::eval::pca::{apply_pca_rows, fit_pca};
use placerec::eval::{
    haversine_m, recall_at_n, DescriptorIndex, EvalProtocol, ProtocolMode, Tag,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_rows(mut m: Array2<f32>) -> Array2<f32> {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    m
}

fn main() -> placerec::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 16;
    let n_places = 10;

    // database: one descriptor per place; queries: noisy copies
    let mut db = Array2::<f32>::zeros((n_places, dim));
    for p in 0..n_places {
        for j in 0..dim {
            db[[p, j]] = rng.random_range(-1.0..1.0);
        }
    }
    let db = unit_rows(db);
    let mut queries = Array2::<f32>::zeros((n_places, dim));
    for p in 0..n_places {
        for j in 0..dim {
            queries[[p, j]] = db[[p, j]] + rng.random_range(-0.25..0.25);
        }
    }
    let queries = unit_rows(queries);

    // geo tags: places on a 100 m grid, query within 5 m of its place
    let db_tags: Vec<Tag> = (0..n_places)
        .map(|p| Tag {
            lat: Some(0.0009 * p as f64),
            lon: Some(0.0),
            frame_id: Some(p as i64 * 100),
        })
        .collect();
    let q_tags: Vec<Tag> = (0..n_places)
        .map(|p| Tag {
            lat: Some(0.0009 * p as f64 + 0.00004),
            lon: Some(0.0),
            frame_id: Some(p as i64 * 100 + 3),
        })
        .collect();
    println!(
        "place spacing {:.1} m, query offset {:.1} m",
        haversine_m(0.0, 0.0, 0.0009, 0.0),
        haversine_m(0.0, 0.0, 0.00004, 0.0)
    );

    let index = DescriptorIndex::new(db.clone(), db_tags.clone())?;
    let mut protocol = EvalProtocol::default();
    protocol.recall_ranks = vec![1, 2, 5];
    let geo = recall_at_n(&index, &queries, &q_tags, &protocol)?;
    println!("geo protocol (25 m):\n{}", geo.text_table());

    protocol.mode = ProtocolMode::Frame;
    let frame = recall_at_n(&index, &queries, &q_tags, &protocol)?;
    println!("frame protocol (|delta| <= 10):\n{}", frame.text_table());

    // ---- PCA reduction ----
    // fit on the database only, then project both sides
    let pca = fit_pca(db.view(), 8, false)?;
    let db_red = apply_pca_rows(&pca, db.view())?;
    let q_red = apply_pca_rows(&pca, queries.view())?;
    let norms: Array1<f32> = db_red.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    println!(
        "reduced to {} dims; projector columns orthonormal; row norms ~1 (max dev {:.1e})",
        pca.output_dim(),
        norms.iter().map(|n| (n - 1.0).abs()).fold(0.0f32, f32::max)
    );
    let index_red = DescriptorIndex::new(db_red, db_tags)?;
    protocol.mode = ProtocolMode::Geo;
    let reduced = recall_at_n(&index_red, &q_red, &q_tags, &protocol)?;
    println!("geo protocol after PCA:\n{}", reduced.text_table());
    Ok(())
}
