//! Experiment engine: run configs, the training loop, evaluation over seeded
//! pairs, ablation tables, figure panels and profiling.

mod ablate;
mod eval;
mod figures;
mod profile;

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::data::{generate_synthetic_pair, sample_pair_indices, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::grid::{DisplacementField, LabelMap, Volume};
use crate::models::{crop_var, pad_extents, pad_var, RegistrationModel, VariantConfig, VariantName};
use crate::nn::{Adam, Ctx};
use crate::objectives::{total_loss_var, LossBreakdown, LossInputs, LossWeights};
use crate::tensor::Dims3;

pub use ablate::{ablate, load_table_rows, render_table, write_tables, AblationResult, AblationRow, RowResult, TableRow};
pub use eval::{evaluate, write_eval, EvalOutcome, Predictor};
pub use figures::{error_map, grid_image, render_figures, FigureAnnotations};
pub use profile::{profile, ProfileRow};

/// Relative output directories are placed under this root when it is set.
pub const OUTPUT_ROOT_ENV: &str = "DEFORMKIT_OUTPUT_ROOT";

/// Which architecture to train and at what width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: VariantName,
    /// Every channel plan is divided by this (1 = published widths).
    pub width_divisor: usize,
    /// Padded input extents; defaults to the data extents rounded up to 16.
    pub extents: Option<Dims3>,
    /// Full explicit config; overrides the fields above.
    pub config: Option<VariantConfig>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { variant: VariantName::Vxm, width_divisor: 1, extents: None, config: None }
    }
}

impl ModelSpec {
    pub fn resolve(&self, data_dims: Dims3, seed: u64) -> VariantConfig {
        match &self.config {
            Some(c) => c.clone().with_seed(seed),
            None => {
                let ext = self.extents.unwrap_or_else(|| pad_extents(data_dims));
                VariantConfig::desk(self.variant, ext, self.width_divisor).with_seed(seed)
            }
        }
    }
}

fn default_pool() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated pairs with known deformations. Training cycles through a
    /// pool of `train_pool` pairs; evaluation uses disjoint seeds.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        #[serde(default = "default_pool")]
        train_pool: usize,
    },
    /// JSON manifests of volumes and label maps.
    Manifest {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { spec: SyntheticSpec::default(), train_pool: default_pool() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Iterations per epoch; defaults to the number of training subjects
    /// (manifest) or 10 (synthetic).
    pub iterations_per_epoch: Option<usize>,
    pub lr: f64,
    pub lr_decay: f64,
    pub eval_pairs: usize,
    /// Sequential, order-fixed execution everywhere.
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub loss: LossWeights,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2023,
            epochs: 100,
            iterations_per_epoch: None,
            lr: 1e-4,
            lr_decay: 0.996,
            eval_pairs: 200,
            deterministic: true,
            output_dir: PathBuf::from("runs/default"),
            model: ModelSpec::default(),
            loss: LossWeights::default(),
            data: DataSource::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize run config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::config("iterations_per_epoch must be at least 1"));
        }
        if self.model.width_divisor == 0 {
            return Err(Error::config("width_divisor must be at least 1"));
        }
        self.loss.validate()?;
        if let DataSource::Synthetic { spec, train_pool } = &self.data {
            spec.validate()?;
            if *train_pool == 0 {
                return Err(Error::config("train_pool must be at least 1"));
            }
        }
        Ok(())
    }

    /// Learning rate used during 1-based epoch `epoch`: `lr * decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    /// `output_dir`, placed under `$DEFORMKIT_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// SHA-256 over `target<TAB>source<LF>` lines.
pub fn pair_hash(pairs: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (t, s) in pairs {
        h.update(t.as_bytes());
        h.update(b"\t");
        h.update(s.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// One registration problem.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub target_id: String,
    pub source_id: String,
    pub target: Volume,
    pub source: Volume,
    pub target_labels: Option<LabelMap>,
    pub source_labels: Option<LabelMap>,
    /// Field registering source onto target, when known.
    pub truth: Option<DisplacementField>,
}

impl PairSample {
    /// Anatomical labels present in either map.
    pub fn label_set(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.target_labels.iter().chain(&self.source_labels).flat_map(LabelMap::label_set).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn loss_inputs(&self) -> Result<LossInputs> {
        let set = self.label_set();
        let labels = match (&self.target_labels, &self.source_labels) {
            (Some(t), Some(s)) if !set.is_empty() => Some((t, s)),
            _ => None,
        };
        LossInputs::new(&self.target, &self.source, labels, &set)
    }
}

/// Synthetic seeds for training pool entries and evaluation pairs never overlap.
const SEED_STRIDE: u64 = 1_000_000;
const EVAL_OFFSET: u64 = 500_000;

/// Delivers pairs in a seeded, reproducible order.
pub enum DataProvider {
    Synthetic { spec: SyntheticSpec, pool: usize },
    Manifest { train: Dataset, test: Dataset, cache: RefCell<HashMap<(bool, usize), (Volume, Option<LabelMap>)>> },
}

impl DataProvider {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(match &cfg.data {
            DataSource::Synthetic { spec, train_pool } => DataProvider::Synthetic { spec: spec.clone(), pool: *train_pool },
            DataSource::Manifest { train, test } => {
                let train = Dataset::load(train)?;
                let test = match test {
                    Some(t) => Dataset::load(t)?,
                    None => train.clone(),
                };
                DataProvider::Manifest { train, test, cache: RefCell::new(HashMap::new()) }
            }
        })
    }

    fn synthetic_seed(spec: &SyntheticSpec, eval: bool, k: usize) -> u64 {
        spec.seed
            .wrapping_mul(SEED_STRIDE)
            .wrapping_add(if eval { EVAL_OFFSET } else { 0 })
            .wrapping_add(k as u64)
    }

    /// Extents of every volume (taken from the first entry for manifests).
    pub fn dims(&self) -> Result<Dims3> {
        match self {
            DataProvider::Synthetic { spec, .. } => Ok(spec.shape),
            DataProvider::Manifest { .. } => Ok(self.load(false, 0)?.0.dims()),
        }
    }

    /// Default iteration count per epoch.
    pub fn epoch_len(&self) -> usize {
        match self {
            DataProvider::Synthetic { .. } => 10,
            DataProvider::Manifest { train, .. } => train.len().max(1),
        }
    }

    /// `(target, source)` indices for `n` training iterations.
    pub fn train_schedule(&self, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
        match self {
            DataProvider::Synthetic { pool, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..n).map(|_| rng.gen_range(0..*pool)).map(|k| (k, k)).collect())
            }
            DataProvider::Manifest { train, .. } => sample_pair_indices(train.len(), n, seed),
        }
    }

    /// `(target, source)` indices for `n` evaluation pairs.
    pub fn eval_schedule(&self, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
        match self {
            DataProvider::Synthetic { .. } => Ok((0..n).map(|k| (k, k)).collect()),
            DataProvider::Manifest { test, .. } => sample_pair_indices(test.len(), n, seed),
        }
    }

    pub fn pair_ids(&self, idx: (usize, usize), eval: bool) -> (String, String) {
        match self {
            DataProvider::Synthetic { spec, .. } => {
                let s = Self::synthetic_seed(spec, eval, idx.0);
                (format!("synthetic-{s}/target"), format!("synthetic-{s}/source"))
            }
            DataProvider::Manifest { train, test, .. } => {
                let ds = if eval { test } else { train };
                (ds.entries[idx.0].id.clone(), ds.entries[idx.1].id.clone())
            }
        }
    }

    fn load(&self, eval: bool, i: usize) -> Result<(Volume, Option<LabelMap>)> {
        let DataProvider::Manifest { train, test, cache } = self else {
            unreachable!("manifest loader on synthetic data")
        };
        if let Some(hit) = cache.borrow().get(&(eval, i)) {
            return Ok(hit.clone());
        }
        let ds = if eval { test } else { train };
        let entry = ds.load_entry(i)?;
        cache.borrow_mut().insert((eval, i), entry.clone());
        Ok(entry)
    }

    pub fn pair(&self, idx: (usize, usize), eval: bool) -> Result<PairSample> {
        let (target_id, source_id) = self.pair_ids(idx, eval);
        match self {
            DataProvider::Synthetic { spec, .. } => {
                let seed = Self::synthetic_seed(spec, eval, idx.0);
                let p = generate_synthetic_pair(&SyntheticSpec { seed, ..spec.clone() })?;
                Ok(PairSample {
                    target_id,
                    source_id,
                    target: p.target,
                    source: p.source,
                    target_labels: Some(p.target_labels),
                    source_labels: Some(p.source_labels),
                    truth: Some(p.inverse_field),
                })
            }
            DataProvider::Manifest { .. } => {
                let (target, target_labels) = self.load(eval, idx.0)?;
                let (source, source_labels) = self.load(eval, idx.1)?;
                if target.dims() != source.dims() {
                    return Err(Error::shape(format!(
                        "pair ({target_id}, {source_id}) has extents {} and {}",
                        target.dims(),
                        source.dims()
                    )));
                }
                Ok(PairSample { target_id, source_id, target, source, target_labels, source_labels, truth: None })
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub target: String,
    pub source: String,
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: RegistrationModel,
    pub log: Vec<IterationRecord>,
    pub pairs: Vec<(String, String)>,
    pub pair_hash: String,
    pub output_dir: Option<PathBuf>,
    pub best_epoch_loss: f64,
}

/// Forward on unpadded volumes: pad to multiples of 16, crop every field back.
pub fn forward_cropped(
    model: &RegistrationModel,
    ctx: &Ctx,
    target: &Volume,
    source: &Volume,
) -> Result<(Var, Vec<Var>)> {
    let d = target.dims();
    let p = pad_extents(d);
    let t = pad_var(&Var::constant(target.to_tensor()), p);
    let s = pad_var(&Var::constant(source.to_tensor()), p);
    let out = model.forward(ctx, &t, &s)?;
    let field = crop_var(&out.field, d.at_level(1));
    let per = out.per_level.iter().enumerate().map(|(i, v)| crop_var(v, d.at_level(4 - i))).collect();
    Ok((field, per))
}

/// One optimizer step; returns the loss breakdown before the update.
pub fn train_step(
    model: &mut RegistrationModel,
    opt: &mut Adam,
    pair: &PairSample,
    inputs: &LossInputs,
    weights: &LossWeights,
    iteration: usize,
) -> Result<LossBreakdown> {
    let ctx = Ctx::train(&model.params);
    let (field, per) = forward_cropped(model, &ctx, &pair.target, &pair.source)?;
    let (loss, breakdown) = total_loss_var(inputs, &field, &per, weights)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            iteration,
            detail: format!(
                "pair ({}, {}): similarity {} dice {} smoothness {}",
                pair.target_id, pair.source_id, breakdown.similarity, breakdown.dice, breakdown.smoothness
            ),
        });
    }
    let mut grads = loss.backward();
    let grads = ctx.collect(&mut grads);
    if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
        return Err(Error::NonFinite {
            iteration,
            detail: format!("gradient of parameter {} is not finite", model.params.name(crate::nn::ParamId(i))),
        });
    }
    opt.step(&mut model.params, &grads);
    Ok(breakdown)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Snapshot<'a> {
    epoch: usize,
    lr: f64,
    target: &'a str,
    source: &'a str,
    error: String,
    /// `(name, l2 norm, all finite)` per parameter tensor.
    parameters: Vec<(&'a str, f64, bool)>,
}

/// Diagnostic dump written when training hits a non-finite value.
pub fn write_snapshot(
    dir: &Path,
    err: &Error,
    epoch: usize,
    lr: f64,
    pair: &PairSample,
    model: &RegistrationModel,
) -> Result<PathBuf> {
    let snap = Snapshot {
        epoch,
        lr,
        target: &pair.target_id,
        source: &pair.source_id,
        error: err.to_string(),
        parameters: model
            .params
            .iter()
            .map(|(_, n, t)| (n, t.data().iter().map(|v| v * v).sum::<f64>().sqrt(), t.all_finite()))
            .collect(),
    };
    let path = dir.join("nonfinite_snapshot.json");
    write_file(&path, &serde_json::to_vec_pretty(&snap)?)?;
    Ok(path)
}

/// Train per `cfg`, writing artifacts under its output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let provider = DataProvider::from_config(cfg)?;
    train_with(cfg, &provider, Some(&cfg.resolved_output_dir()))
}

/// Train with an explicit provider; `out_dir = None` keeps everything in memory.
pub fn train_with(cfg: &RunConfig, provider: &DataProvider, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = provider.dims()?;
    let vcfg = cfg.model.resolve(dims, cfg.seed);
    let mut model = RegistrationModel::build(&vcfg)?;
    let per_epoch = cfg.iterations_per_epoch.unwrap_or_else(|| provider.epoch_len());
    let total = per_epoch * cfg.epochs;
    let schedule = provider.train_schedule(total, cfg.seed)?;
    let pairs: Vec<(String, String)> = schedule.iter().map(|&i| provider.pair_ids(i, false)).collect();
    let hash = pair_hash(&pairs);

    let mut log_file = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let resolved = RunConfig { model: ModelSpec { config: Some(vcfg.clone()), ..cfg.model.clone() }, ..cfg.clone() };
        write_file(&dir.join("config.toml"), resolved.to_toml_string()?.as_bytes())?;
        let listing: String = pairs.iter().map(|(t, s)| format!("{t}\t{s}\n")).collect();
        write_file(&dir.join("pairs.tsv"), listing.as_bytes())?;
        let path = dir.join("train_log.jsonl");
        log_file = Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path));
    }

    let synthetic = matches!(provider, DataProvider::Synthetic { .. });
    let mut input_cache: HashMap<(usize, usize), (PairSample, LossInputs)> = HashMap::new();
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(total);
    let mut best = f64::INFINITY;
    let started = std::time::Instant::now();
    for epoch in 1..=cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let mut epoch_sum = 0.0;
        for k in 0..per_epoch {
            let iteration = (epoch - 1) * per_epoch + k + 1;
            let idx = schedule[iteration - 1];
            if !input_cache.contains_key(&idx) {
                let pair = provider.pair(idx, false)?;
                let inputs = pair.loss_inputs()?;
                // Manifest pairs rarely repeat; keep only the synthetic pool.
                if !synthetic {
                    input_cache.clear();
                }
                input_cache.insert(idx, (pair, inputs));
            }
            let (pair, inputs) = &input_cache[&idx];
            let result = train_step(&mut model, &mut opt, pair, inputs, &cfg.loss, iteration);
            let breakdown = match result {
                Ok(b) => b,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = out_dir {
                        write_snapshot(dir, &e, epoch, opt.lr, pair, &model)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            epoch_sum += breakdown.total;
            let rec = IterationRecord {
                iteration,
                epoch,
                lr: opt.lr,
                target: pair.target_id.clone(),
                source: pair.source_id.clone(),
                loss: breakdown,
            };
            if let Some((f, path)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            log::debug!("iter {iteration} epoch {epoch} loss {:.6}", rec.loss.total);
            log.push(rec);
        }
        let epoch_mean = epoch_sum / per_epoch as f64;
        log::info!("epoch {epoch}/{} mean loss {epoch_mean:.6} lr {:.3e}", cfg.epochs, opt.lr);
        if let Some(dir) = out_dir {
            let meta = serde_json::json!({ "epoch": epoch, "mean_loss": epoch_mean, "pair_hash": hash });
            model.save_checkpoint(&dir.join("last.ckpt"), meta.clone())?;
            if epoch_mean < best {
                model.save_checkpoint(&dir.join("best.ckpt"), meta)?;
            }
        }
        best = best.min(epoch_mean);
    }
    if let Some(dir) = out_dir {
        let summary = serde_json::json!({
            "variant": vcfg.name,
            "parameters": model.count_parameters(),
            "iterations": total,
            "pair_hash": hash,
            "best_epoch_loss": best,
            "final_loss": log.last().map(|r| r.loss.total),
            "seconds": started.elapsed().as_secs_f64(),
        });
        write_file(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        pairs,
        pair_hash: hash,
        output_dir: out_dir.map(Path::to_path_buf),
        best_epoch_loss: best,
    })
}
