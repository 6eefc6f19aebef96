//! Thin command-line front end over the library.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use placerec::config::RunConfig;
use placerec::data::transforms::{apply_domain, domain_id};
use placerec::data::{derive_seed, load_image, save_image, Manifest};
use placerec::error::{Error, Result};
use placerec::eval::{EvalProtocol, ProtocolMode};
use placerec::train::checkpoint::Checkpoint;
use placerec::train::{dump_attention, evaluate, run_training, EvalOptions};

#[derive(Parser)]
#[command(name = "placerec", about = "Visual place recognition trainer and evaluator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        /// TOML run configuration; relative paths inside resolve against the
        /// config file's directory.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest's query/db splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Positive definition: geo, frame, or pairwise.
        #[arg(long, default_value = "geo")]
        protocol: String,
        /// Comma-separated recall ranks.
        #[arg(long, default_value = "1,5,10")]
        recall: String,
        /// Reduce descriptors with PCA fitted on the database split.
        #[arg(long)]
        pca_dim: Option<usize>,
        /// Square resize for evaluation images (defaults to the config value).
        #[arg(long)]
        resize: Option<usize>,
        /// Also write <out>.txt and <out>.kv report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Materialize domain-augmented copies of a dataset.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated domain names (fog,rain,snow,wind,night,sun).
        #[arg(long, default_value = "fog,rain,snow,wind,night,sun")]
        domains: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export per-block attention heat maps for one image.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic toy dataset with manifest and splits.
    Toygen {
        #[arg(long)]
        places: usize,
        #[arg(long)]
        per_place: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 42)]
        size: usize,
    },
}

fn check_device() -> Result<()> {
    match std::env::var("PLACEREC_DEVICE") {
        Ok(v) if v != "cpu" => Err(Error::Config(format!(
            "PLACEREC_DEVICE={v} is not supported; only 'cpu' is available"
        ))),
        _ => Ok(()),
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_train(config: &Path) -> Result<()> {
    let cfg = RunConfig::from_toml_file(config)?;
    let root = parent_dir(config);
    let out_dir = root.join(&cfg.data.out_dir);
    let result = run_training(&cfg, &root, &out_dir)?;
    for (e, r1) in &result.epoch_metrics {
        println!("epoch {e}: recall@1 {r1:.2}");
    }
    println!(
        "best epoch {} (recall@1 {:.2}) -> {}",
        result.best_epoch,
        result.best_r1,
        result.best_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: &Path,
    manifest_path: &Path,
    protocol: &str,
    recall: &str,
    pca_dim: Option<usize>,
    resize: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let model = checkpoint.build_model()?;
    let manifest = Manifest::read_csv(manifest_path)?;
    let ranks: Vec<usize> = recall
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad recall rank '{s}'")))
        })
        .collect::<Result<_>>()?;
    let mut proto = EvalProtocol::default();
    proto.mode = ProtocolMode::parse(protocol)?;
    proto.recall_ranks = ranks;
    let mut opts = EvalOptions::new(
        proto,
        resize.unwrap_or(checkpoint.config.model.eval_resize),
    );
    opts.pca_dim = pca_dim;
    let report = evaluate(&model, &manifest, &parent_dir(manifest_path), &opts)?;
    print!("{}", report.text_table());
    if let Some(base) = out {
        report.write_files(base)?;
    }
    Ok(())
}

fn cmd_augment(manifest_path: &Path, out: &Path, domains: &str, seed: u64) -> Result<()> {
    let manifest = Manifest::read_csv(manifest_path)?;
    let root = parent_dir(manifest_path);
    let ids: Vec<u8> = domains
        .split(',')
        .map(|name| domain_id(name.trim()))
        .collect::<Result<_>>()?;
    let mut out_rows = Vec::new();
    for &d in &ids {
        let name = placerec::data::transforms::domain_name(d)?;
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        for (i, row) in manifest.rows.iter().enumerate() {
            let img = load_image(&root.join(&row.image_path), None)?;
            let aug = apply_domain(&img, d, derive_seed(&[seed, d as u64, i as u64]))?;
            let file = Path::new(&row.image_path)
                .file_name()
                .ok_or_else(|| Error::Config(format!("bad image path '{}'", row.image_path)))?;
            let dest = dir.join(file);
            save_image(&dest, &aug)?;
            let mut new_row = row.clone();
            new_row.image_path = format!("{name}/{}", file.to_string_lossy());
            out_rows.push(new_row);
        }
        println!("wrote {} images under {}", manifest.rows.len(), dir.display());
    }
    Manifest { rows: out_rows }.write_csv(&out.join("manifest.csv"))?;
    Ok(())
}

fn cmd_attn(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let model = checkpoint.build_model()?;
    let img = load_image(image, Some(checkpoint.config.model.eval_resize))?;
    let paths = dump_attention(&model, &img, out)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_toygen(places: usize, per_place: usize, out: &Path, seed: u64, size: usize) -> Result<()> {
    let manifest =
        placerec::data::toygen::generate_toy_places(places, per_place, size, seed, out)?;
    println!(
        "wrote {} images across {places} places -> {}",
        manifest.rows.len(),
        out.join("manifest.csv").display()
    );
    Ok(())
}

fn run() -> Result<()> {
    check_device()?;
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::Eval {
            ckpt,
            manifest,
            protocol,
            recall,
            pca_dim,
            resize,
            out,
        } => cmd_eval(
            ckpt,
            manifest,
            protocol,
            recall,
            *pca_dim,
            *resize,
            out.as_deref(),
        ),
        Command::Augment {
            manifest,
            out,
            domains,
            seed,
        } => cmd_augment(manifest, out, domains, *seed),
        Command::Attn { ckpt, image, out } => cmd_attn(ckpt, image, out),
        Command::Toygen {
            places,
            per_place,
            out,
            seed,
            size,
        } => cmd_toygen(*places, *per_place, out, *seed, *size),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
