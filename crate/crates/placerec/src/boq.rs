//! Global descriptor aggregation with cascaded learnable-query blocks.
//!
//! Each block refines the incoming feature map with a transformer encoder
//! layer, self-attends a bank of learnable queries, and cross-attends the
//! refined queries against the features. The per-block query outputs are
//! concatenated, mixed into a smaller set of query combinations by a linear
//! projection over the query axis, row-normalized, and flattened into a
//! single L2-normalized descriptor.

use ndarray::{Array1, Array2, Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_rows, Tensor};
use crate::backbone::{FeatureMap, ToyBackbone};
use crate::config::{BackboneKind, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{normal_init, Conv2d, EncoderLayer, Mha, ParamList};

/// One aggregation block.
pub struct BoqBlock {
    /// Learnable queries `[M, d]`.
    pub queries: Tensor,
    pub encoder: EncoderLayer,
    pub self_attn: Mha,
    pub cross_attn: Mha,
}

pub struct BlockOutput {
    /// Refined feature map `[N, d]` passed to the next block.
    pub features: Tensor,
    /// Aggregated query features `[M, d]`.
    pub queries_out: Tensor,
    /// Head-averaged cross-attention `[M, N]`.
    pub cross_attn: Array2<f32>,
}

impl BoqBlock {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> BoqBlock {
        let d = cfg.feature_dim;
        // queries start as N(0,1)/sqrt(d) so initial attention logits are O(1)
        let q = normal_init(rng, &[cfg.queries_per_block, d], 1.0 / (d as f32).sqrt());
        BoqBlock {
            queries: Tensor::param(q),
            encoder: EncoderLayer::new(rng, d, cfg.encoder_heads, cfg.encoder_ffn_dim),
            self_attn: Mha::new(rng, d, cfg.encoder_heads),
            cross_attn: Mha::new(rng, d, cfg.encoder_heads),
        }
    }

    pub fn forward(&self, x: &Tensor) -> BlockOutput {
        let features = self.encoder.forward(x);
        let refined = self
            .self_attn
            .forward(&self.queries, &self.queries, &self.queries)
            .out
            .add(&self.queries);
        let cross = self.cross_attn.forward(&refined, &features, &features);
        BlockOutput {
            features,
            queries_out: cross.out,
            cross_attn: cross.attn,
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.queries"), self.queries.clone()));
        self.encoder.collect_params(&format!("{prefix}.encoder"), out);
        self.self_attn.collect_params(&format!("{prefix}.self_attn"), out);
        self.cross_attn.collect_params(&format!("{prefix}.cross_attn"), out);
    }
}

/// Everything the forward pass produces. Training consumes the query
/// features and per-block maps; retrieval only needs the descriptor.
pub struct ModelOutput {
    /// Flattened descriptor `[num_combinations * d]`, unit L2 norm.
    pub descriptor: Tensor,
    /// Row-normalized query combinations `[num_combinations, d]`.
    pub combinations: Tensor,
    /// Concatenated per-block query features `[L*M, d]`.
    pub query_features: Tensor,
    /// Refined feature map per block, with its spatial grid.
    pub block_maps: Vec<FeatureMap>,
    /// Head-averaged cross-attention per block `[M, N]`.
    pub cross_attn: Vec<Array2<f32>>,
}

/// Full descriptor model: optional trainable backbone, channel-mixing
/// reduction conv, aggregation blocks, and the query-mixing projection.
pub struct PlaceModel {
    pub cfg: ModelConfig,
    pub backbone: Option<ToyBackbone>,
    pub reduce: Option<Conv2d>,
    pub blocks: Vec<BoqBlock>,
    /// `[num_combinations, L*M]`, no bias.
    pub mix: Tensor,
}

impl PlaceModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<PlaceModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (backbone, reduce) = match cfg.backbone {
            BackboneKind::Toy => (
                Some(ToyBackbone::new(
                    &mut rng,
                    cfg.feature_dim,
                    cfg.encoder_heads,
                    cfg.encoder_ffn_dim,
                )),
                // identity at init: the conv starts as a no-op channel mixer
                Some(Conv2d::identity_3x3(cfg.feature_dim)),
            ),
            BackboneKind::ExternalFeatures => (None, None),
        };
        let blocks = (0..cfg.num_blocks)
            .map(|_| BoqBlock::new(&mut rng, cfg))
            .collect();
        let lq = cfg.total_queries();
        let bound = 1.0 / (lq as f32).sqrt();
        let mix_data: Vec<f32> = {
            use rand::Rng;
            (0..cfg.num_combinations * lq)
                .map(|_| rng.random_range(-bound..bound))
                .collect()
        };
        let mix = Tensor::param(
            ArrayD::from_shape_vec(
                ndarray::IxDyn(&[cfg.num_combinations, lq]),
                mix_data,
            )
            .unwrap(),
        );
        Ok(PlaceModel {
            cfg: cfg.clone(),
            backbone,
            reduce,
            blocks,
            mix,
        })
    }

    /// Runs the aggregation cascade on a prepared feature map.
    pub fn forward_map(&self, fm: &FeatureMap) -> ModelOutput {
        let mut x = fm.x.clone();
        let mut per_block_q = Vec::with_capacity(self.blocks.len());
        let mut block_maps = Vec::with_capacity(self.blocks.len());
        let mut cross_attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(&x);
            x = out.features.clone();
            block_maps.push(FeatureMap {
                x: out.features,
                h: fm.h,
                w: fm.w,
            });
            per_block_q.push(out.queries_out);
            cross_attn.push(out.cross_attn);
        }
        let query_features = concat_rows(&per_block_q);
        let combinations = self.mix.matmul(&query_features).l2_normalize_rows();
        let dim = self.cfg.descriptor_dim();
        let descriptor = combinations.reshape(&[dim]).l2_normalize_flat();
        ModelOutput {
            descriptor,
            combinations,
            query_features,
            block_maps,
            cross_attn,
        }
    }

    /// Applies the channel-mixing conv over the spatial grid, `[N,d] -> [N,d]`.
    fn reduce_map(&self, fm: FeatureMap) -> FeatureMap {
        let Some(conv) = &self.reduce else { return fm };
        let d = self.cfg.feature_dim;
        let (h, w) = (fm.h, fm.w);
        let grid = fm.x.transpose().reshape(&[d, h, w]);
        let mixed = conv.forward(&grid).reshape(&[d, h * w]).transpose();
        FeatureMap { x: mixed, h, w }
    }

    /// Full forward pass from an `[3,H,W]` image (trainable backbone only).
    pub fn forward_image(&self, image: &Array3<f32>) -> Result<ModelOutput> {
        let bb = self.backbone.as_ref().ok_or_else(|| {
            Error::Config("model has no trainable backbone; supply features".into())
        })?;
        let fm = self.reduce_map(bb.forward(image)?);
        Ok(self.forward_map(&fm))
    }

    /// Forward pass from externally computed features.
    pub fn forward_features(&self, fm: &FeatureMap) -> ModelOutput {
        self.forward_map(fm)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.cfg.descriptor_dim()
    }

    pub fn collect_params(&self, out: &mut ParamList) {
        if let Some(bb) = &self.backbone {
            bb.collect_params("backbone", out);
        }
        if let Some(conv) = &self.reduce {
            conv.collect_params("reduce", out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("block{i}"), out);
        }
        out.push(("mix".into(), self.mix.clone()));
    }
}

/// Mean attention over queries for one block: `[M,N] -> [h,w]` heat map.
pub fn mean_attention_map(attn: &Array2<f32>, h: usize, w: usize) -> Result<Array2<f32>> {
    let (m, n) = attn.dim();
    if h * w != n {
        return Err(Error::SpatialSize(format!(
            "attention over {n} tokens does not fit a {h}x{w} grid"
        )));
    }
    let mut mean = Array1::<f32>::zeros(n);
    for row in attn.rows() {
        mean += &row;
    }
    mean /= m as f32;
    Ok(Array2::from_shape_vec((h, w), mean.to_vec()).unwrap())
}
