//! Checkpoint container: config snapshot plus a named tensor table under
//! the `model/`, `adv/` and `opt/` namespaces.
//!
//! The `adv/` and `opt/` namespaces are optional on load; inference needs
//! only `model/`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::ArrayD;

use crate::adversarial::AdversarialHeads;
use crate::boq::PlaceModel;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fileio;
use crate::nn::ParamList;
use crate::train::optimizer::AdamW;

const CHECKPOINT_MAGIC: &[u8; 4] = b"QCKP";
const CHECKPOINT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u32,
    pub best_metric: f64,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    /// Snapshots model (+ optional adversarial heads and optimizer state).
    pub fn capture(
        config: &RunConfig,
        model: &PlaceModel,
        adv: Option<&AdversarialHeads>,
        opt: Option<&AdamW>,
        epoch: u32,
        best_metric: f64,
    ) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        let mut params = ParamList::new();
        model.collect_params(&mut params);
        for (name, t) in &params {
            tensors.insert(format!("model/{name}"), t.value());
        }
        if let Some(adv) = adv {
            let mut aparams = ParamList::new();
            adv.collect_params(&mut aparams);
            for (name, t) in &aparams {
                tensors.insert(format!("adv/{name}"), t.value());
            }
        }
        if let Some(opt) = opt {
            for (name, arr) in opt.state_tensors() {
                tensors.insert(format!("opt/{name}"), arr);
            }
        }
        Checkpoint {
            config: config.clone(),
            epoch,
            best_metric,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        fileio::write_magic(&mut w, CHECKPOINT_MAGIC)?;
        fileio::write_u32(&mut w, CHECKPOINT_VERSION)?;
        fileio::write_str(&mut w, &self.config.to_toml_string())?;
        fileio::write_u32(&mut w, self.epoch)?;
        fileio::write_f64(&mut w, self.best_metric)?;
        fileio::write_u64(&mut w, self.tensors.len() as u64)?;
        for (name, arr) in &self.tensors {
            fileio::write_str(&mut w, name)?;
            fileio::write_u32(&mut w, arr.ndim() as u32)?;
            for &d in arr.shape() {
                fileio::write_u32(&mut w, d as u32)?;
            }
            let flat = arr.as_standard_layout();
            fileio::write_f32_slice(&mut w, flat.as_slice().unwrap())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        fileio::expect_magic(&mut r, CHECKPOINT_MAGIC)?;
        let version = fileio::read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config = RunConfig::from_toml_str(&fileio::read_str(&mut r)?)?;
        let epoch = fileio::read_u32(&mut r)?;
        let best_metric = fileio::read_f64(&mut r)?;
        let count = fileio::read_u64(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = fileio::read_str(&mut r)?;
            let ndim = fileio::read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(fileio::read_u32(&mut r)? as usize);
            }
            let len: usize = dims.iter().product();
            let data = fileio::read_f32_vec(&mut r, len)?;
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
                .map_err(|_| Error::Format(format!("bad tensor shape for '{name}'")))?;
            tensors.insert(name, arr);
        }
        Ok(Checkpoint {
            config,
            epoch,
            best_metric,
            tensors,
        })
    }

    /// Copies `namespace/` tensors into `params` by name. Every parameter
    /// must be present in the checkpoint; shapes must match.
    pub fn load_namespace(&self, namespace: &str, params: &ParamList) -> Result<()> {
        for (name, t) in params {
            let key = format!("{namespace}/{name}");
            let arr = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{key}'")))?;
            if arr.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor '{key}' has shape {:?}, expected {:?}",
                    arr.shape(),
                    t.shape()
                )));
            }
            t.set_value(arr.clone());
        }
        Ok(())
    }

    pub fn has_namespace(&self, namespace: &str) -> bool {
        let prefix = format!("{namespace}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    /// Rebuilds the model from the config snapshot and restores `model/`.
    pub fn build_model(&self) -> Result<PlaceModel> {
        let model = PlaceModel::new(&self.config.model, self.config.train.seed)?;
        let mut params = ParamList::new();
        model.collect_params(&mut params);
        self.load_namespace("model", &params)?;
        Ok(model)
    }

    /// Rebuilds adversarial heads when the checkpoint carries them.
    pub fn build_adversarial(&self) -> Result<Option<AdversarialHeads>> {
        if !self.has_namespace("adv") {
            return Ok(None);
        }
        let mut rng: rand_chacha::ChaCha8Rng =
            rand::SeedableRng::seed_from_u64(self.config.train.seed);
        let heads = AdversarialHeads::new(&mut rng, &self.config.model, &self.config.adversarial);
        let mut params = ParamList::new();
        heads.collect_params(&mut params);
        self.load_namespace("adv", &params)?;
        Ok(Some(heads))
    }

    /// Restores optimizer state if present.
    pub fn load_optimizer(&self, opt: &mut AdamW) {
        let prefix = "opt/";
        let inner: BTreeMap<String, ArrayD<f32>> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone()))
            })
            .collect();
        if !inner.is_empty() {
            opt.load_state_tensors(&inner);
        }
    }

    /// Drops a namespace (used to prove inference-path purity).
    pub fn strip_namespace(&mut self, namespace: &str) {
        let prefix = format!("{namespace}/");
        self.tensors.retain(|k, _| !k.starts_with(&prefix));
    }
}

/// True when both files hold byte-identical tensor tables and config.
pub fn checkpoints_identical(a: &Checkpoint, b: &Checkpoint) -> bool {
    if a.epoch != b.epoch || a.tensors.len() != b.tensors.len() {
        return false;
    }
    a.tensors.iter().zip(b.tensors.iter()).all(|((ka, va), (kb, vb))| {
        ka == kb
            && va.shape() == vb.shape()
            && va
                .iter()
                .zip(vb.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}
