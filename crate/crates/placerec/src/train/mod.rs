//! Training loop: combined loss, optimizer schedule, evaluation-driven
//! checkpoint selection, and the attention-map export.

pub mod checkpoint;
pub mod optimizer;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::AdversarialHeads;
use crate::autodiff::{backward, no_grad, Tensor};
use crate::boq::{mean_attention_map, ModelOutput, PlaceModel};
use crate::config::RunConfig;
use crate::data::sampler::{Batch, BatchSpec, TrainSet};
use crate::data::transforms::holdout_shift;
use crate::data::{derive_seed, load_image, save_heatmap, upsample_map, Manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::eval::pca::{apply_pca_rows, fit_pca};
use crate::eval::{recall_at_n, DescriptorIndex, EvalProtocol, ProtocolMode, RecallReport, Tag};
use crate::losses::{combine_losses, local_triplet_loss, ms_loss, total_loss, LossParts};
use crate::nn::ParamList;
use checkpoint::Checkpoint;
use optimizer::{namespaced, zero_grads, AdamW};

/// Per-step loss components. `total` is combined in f64.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub ms: f64,
    pub local: f64,
    pub adv_query: f64,
    pub adv_feature: f64,
    pub total: f64,
    pub lr: f64,
}

impl LossRecord {
    pub fn csv_header() -> &'static str {
        "epoch,step,ms,local,adv_query,adv_feature,total,lr"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.epoch,
            self.step,
            self.ms,
            self.local,
            self.adv_query,
            self.adv_feature,
            self.total,
            self.lr
        )
    }
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut s = String::from(LossRecord::csv_header());
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Model, adversarial heads, and optimizer bundled for stepping.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: PlaceModel,
    pub adv: Option<AdversarialHeads>,
    pub params: ParamList,
    pub opt: AdamW,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Trainer> {
        cfg.validate()?;
        let model = PlaceModel::new(&cfg.model, cfg.train.seed)?;
        let adv = if cfg.adversarial.enabled {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.train.seed, 0xD15C]));
            Some(AdversarialHeads::new(&mut rng, &cfg.model, &cfg.adversarial))
        } else {
            None
        };
        let mut params = ParamList::new();
        let mut mp = ParamList::new();
        model.collect_params(&mut mp);
        params.extend(namespaced("model", mp));
        if let Some(heads) = &adv {
            let mut ap = ParamList::new();
            heads.collect_params(&mut ap);
            params.extend(namespaced("adv", ap));
        }
        let opt = AdamW::new(&cfg.train);
        Ok(Trainer {
            cfg,
            model,
            adv,
            params,
            opt,
        })
    }

    /// One forward/backward/update on a batch. The record reports each loss
    /// component; the total is combined in f64.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        lr: f64,
        epoch: usize,
        step: usize,
    ) -> Result<LossRecord> {
        let outputs: Vec<ModelOutput> = batch
            .images
            .iter()
            .map(|img| self.model.forward_image(img))
            .collect::<Result<_>>()?;
        let descriptors: Vec<Tensor> = outputs.iter().map(|o| o.descriptor.clone()).collect();
        let combinations: Vec<Tensor> = outputs.iter().map(|o| o.combinations.clone()).collect();

        let ms = ms_loss(&descriptors, &batch.place_labels, &self.cfg.ms_loss);
        let local = local_triplet_loss(
            &descriptors,
            &combinations,
            &batch.place_labels,
            &self.cfg.local_loss,
            self.cfg.ms_loss.miner_epsilon,
        );
        let (adv_q, adv_x) = match &self.adv {
            Some(heads) => (
                heads.query_loss(&outputs, &batch.domain_labels),
                heads.feature_loss(&outputs, &batch.domain_labels),
            ),
            None => (Tensor::scalar(0.0), Tensor::scalar(0.0)),
        };

        let parts = LossParts {
            ms: ms.scalar_value() as f64,
            local: local.scalar_value() as f64,
            adv_query: adv_q.scalar_value() as f64,
            adv_feature: adv_x.scalar_value() as f64,
        };
        let total_value = total_loss(&parts, &self.cfg.loss_weights);
        if !total_value.is_finite() {
            let batch_seed =
                derive_seed(&[self.cfg.train.seed, epoch as u64, step as u64]);
            return Err(Error::Train(format!(
                "non-finite loss at epoch {epoch} step {step} \
                 (batch seed {batch_seed:#018x}): ms={} local={} adv_q={} adv_x={}",
                parts.ms, parts.local, parts.adv_query, parts.adv_feature
            )));
        }

        let graph_total = combine_losses(&ms, &local, &adv_q, &adv_x, &self.cfg.loss_weights);
        zero_grads(&self.params);
        backward(&graph_total);
        self.opt.step(&self.params, lr as f32);

        Ok(LossRecord {
            epoch,
            step,
            ms: parts.ms,
            local: parts.local,
            adv_query: parts.adv_query,
            adv_feature: parts.adv_feature,
            total: total_value,
            lr,
        })
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub protocol: EvalProtocol,
    pub resize: usize,
    /// Reduce descriptors with PCA fitted on the database split.
    pub pca_dim: Option<usize>,
    pub pca_whiten: bool,
    /// Apply the reserved appearance shift to query images (seed). Used to
    /// probe generalization to an unseen condition.
    pub query_shift: Option<u64>,
}

impl EvalOptions {
    pub fn new(protocol: EvalProtocol, resize: usize) -> EvalOptions {
        EvalOptions {
            protocol,
            resize,
            pca_dim: None,
            pca_whiten: false,
            query_shift: None,
        }
    }
}

/// Picks the positive definition the manifest supports: geo when all eval
/// rows carry coordinates, else frame ids, else pairwise.
pub fn auto_protocol(manifest: &Manifest) -> EvalProtocol {
    let eval_rows: Vec<&ManifestRow> = manifest
        .rows
        .iter()
        .filter(|r| r.split != Split::Train)
        .collect();
    let mut protocol = EvalProtocol::default();
    if !eval_rows.is_empty() && eval_rows.iter().all(|r| r.lat.is_some() && r.lon.is_some()) {
        protocol.mode = ProtocolMode::Geo;
    } else if !eval_rows.is_empty() && eval_rows.iter().all(|r| r.frame_id.is_some()) {
        protocol.mode = ProtocolMode::Frame;
    } else {
        protocol.mode = ProtocolMode::Pairwise;
    }
    protocol
}

/// Inference descriptors for manifest rows, with their tags.
pub fn compute_descriptors(
    model: &PlaceModel,
    rows: &[&ManifestRow],
    root: &Path,
    resize: usize,
    shift: Option<u64>,
) -> Result<(Array2<f32>, Vec<Tag>)> {
    let mut data = Array2::<f32>::zeros((rows.len(), model.descriptor_dim()));
    let mut tags = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let mut img = load_image(&root.join(&row.image_path), Some(resize))?;
        if let Some(seed) = shift {
            img = holdout_shift(&img, derive_seed(&[seed, i as u64]));
        }
        let out = no_grad(|| model.forward_image(&img))?;
        data.row_mut(i).assign(&out.descriptor.value1());
        tags.push(Tag::from_row(row));
    }
    Ok((data, tags))
}

/// Full retrieval evaluation of a model on the manifest's query/db splits.
pub fn evaluate(
    model: &PlaceModel,
    manifest: &Manifest,
    root: &Path,
    opts: &EvalOptions,
) -> Result<RecallReport> {
    let db_rows = manifest.rows_in(Split::Db);
    let query_rows = manifest.rows_in(Split::Query);
    if db_rows.is_empty() || query_rows.is_empty() {
        return Err(Error::Protocol(
            "manifest needs both db and query splits".into(),
        ));
    }
    let (mut db, db_tags) = compute_descriptors(model, &db_rows, root, opts.resize, None)?;
    let (mut queries, query_tags) =
        compute_descriptors(model, &query_rows, root, opts.resize, opts.query_shift)?;
    if let Some(k) = opts.pca_dim {
        let pca = fit_pca(db.view(), k, opts.pca_whiten)?;
        db = apply_pca_rows(&pca, db.view())?;
        queries = apply_pca_rows(&pca, queries.view())?;
    }
    let index = DescriptorIndex::new(db, db_tags)?;
    recall_at_n(&index, &queries, &query_tags, &opts.protocol)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct TrainResult {
    pub loss_log: Vec<LossRecord>,
    /// Validation R@1 per epoch.
    pub epoch_metrics: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_r1: f64,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

/// Trains per the config, evaluating after every epoch and retaining the
/// checkpoint with the best validation R@1 (ties keep the earliest epoch).
pub fn run_training(cfg: &RunConfig, config_root: &Path, out_dir: &Path) -> Result<TrainResult> {
    std::fs::create_dir_all(out_dir)?;
    let manifest_path = config_root.join(&cfg.data.manifest);
    let manifest = Manifest::read_csv(&manifest_path)?;
    // image paths in a manifest are relative to the manifest's directory
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let root = root.as_path();
    let train_set = TrainSet::load(&manifest, root, cfg.model.train_resize)?;
    let spec = BatchSpec::new(cfg.train.batch_places, cfg.train.images_per_place);
    let steps = train_set.steps_per_epoch(&spec);
    let mut trainer = Trainer::new(cfg.clone())?;

    let mut val_opts = EvalOptions::new(auto_protocol(&manifest), cfg.model.eval_resize);
    val_opts.protocol.recall_ranks = vec![1];

    let best_path = out_dir.join("best.qckp");
    let last_path = out_dir.join("last.qckp");
    let mut loss_log = Vec::new();
    let mut epoch_metrics = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_r1 = f64::NEG_INFINITY;
    for epoch in 0..cfg.train.epochs {
        for step in 0..steps {
            let batch = train_set.sample_batch(&spec, epoch, step, cfg.train.seed)?;
            let lr = cfg.train.lr_at_step(epoch, step, steps);
            loss_log.push(trainer.train_step(&batch, lr, epoch, step)?);
        }
        let report = evaluate(&trainer.model, &manifest, root, &val_opts)?;
        let r1 = report.value_at(1).unwrap_or(0.0);
        epoch_metrics.push((epoch, r1));
        if r1 > best_r1 {
            best_epoch = epoch;
            best_r1 = r1;
            Checkpoint::capture(
                cfg,
                &trainer.model,
                trainer.adv.as_ref(),
                Some(&trainer.opt),
                epoch as u32,
                r1,
            )
            .save(&best_path)?;
        }
    }
    Checkpoint::capture(
        cfg,
        &trainer.model,
        trainer.adv.as_ref(),
        Some(&trainer.opt),
        cfg.train.epochs.saturating_sub(1) as u32,
        best_r1,
    )
    .save(&last_path)?;
    write_loss_log(&out_dir.join("loss_log.csv"), &loss_log)?;
    let mut metric_lines = String::new();
    for (e, r1) in &epoch_metrics {
        metric_lines.push_str(&format!("epoch={e} recall@1={r1:.4}\n"));
    }
    metric_lines.push_str(&format!("best_epoch={best_epoch} best_recall@1={best_r1:.4}\n"));
    std::fs::write(out_dir.join("metrics.txt"), metric_lines)?;
    Ok(TrainResult {
        loss_log,
        epoch_metrics,
        best_epoch,
        best_r1,
        best_path,
        last_path,
    })
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

/// Per block: head-averaged cross-attention, averaged over queries, mapped
/// onto the patch grid, upsampled to the image size. Writes a PNG heat map
/// plus a raw values file (u32 h, u32 w, f32 LE row-major), returning the
/// paths.
pub fn dump_attention(
    model: &PlaceModel,
    image: &Array3<f32>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let out = no_grad(|| model.forward_image(image))?;
    let (_, img_h, img_w) = image.dim();
    let mut paths = Vec::new();
    for (l, (attn, fm)) in out.cross_attn.iter().zip(&out.block_maps).enumerate() {
        let grid = mean_attention_map(attn, fm.h, fm.w)?;
        let up = upsample_map(&grid, img_h, img_w);
        let png = out_dir.join(format!("block{l}_attention.png"));
        save_heatmap(&png, &up)?;
        let raw = out_dir.join(format!("block{l}_attention.raw"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&raw)?);
        crate::fileio::write_u32(&mut w, fm.h as u32)?;
        crate::fileio::write_u32(&mut w, fm.w as u32)?;
        let flat = grid.as_standard_layout();
        crate::fileio::write_f32_slice(&mut w, flat.as_slice().unwrap())?;
        paths.push(png);
        paths.push(raw);
    }
    Ok(paths)
}
