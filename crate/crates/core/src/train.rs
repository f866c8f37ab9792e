//! Run configuration, the Adam optimizer and the training loop.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomic, GenConfig};
use crate::error::{Error, Result};
use crate::heads::{DecodeOptions, LossConfig};
use crate::model::{Model, ModelConfig, Prepared};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Steps between history rows echoed to stderr; 0 disables.
    pub log_every: usize,
    /// Steps between evaluations on the eval split; 0 disables.
    pub eval_every: usize,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 4,
            lr: 1e-3,
            seed: 7,
            log_every: 25,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

/// Toggle-matrix protocol. Every variant trains from the same seeds on one
/// generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub num_scenes: usize,
    pub val_scenes: usize,
    pub steps: usize,
    /// Seeds for the full vs no-attention Meteor comparison.
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            num_scenes: 64,
            val_scenes: 16,
            steps: 100,
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset root; relative paths resolve against the config file.
    pub dataset: PathBuf,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub decode: DecodeOptions,
    pub train: TrainConfig,
    pub eval_split: String,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeOptions::default(),
            train: TrainConfig::default(),
            eval_split: "train".into(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gen.scene.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.loss.lambda_align < 0.0 || self.loss.lambda_aux < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !matches!(self.eval_split.as_str(), "train" | "val") {
            return Err(Error::Config(format!(
                "eval_split `{}` must be train or val",
                self.eval_split
            )));
        }
        let a = &self.ablate;
        if a.seeds == 0 || a.num_scenes == 0 || a.val_scenes >= a.num_scenes {
            return Err(Error::Config(
                "ablate needs seeds >= 1 and 0 <= val_scenes < num_scenes".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; a relative `dataset` is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }
}

/// Adam with bias correction; only trainable parameters that received a
/// gradient are updated.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &HashMap<String, Tensor<f32>>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in store.iter_mut().filter(|p| p.trainable) {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "adam",
                    p.name.clone(),
                    format!("{:?} vs {:?}", g.shape(), p.tensor.shape()),
                ));
            }
            let n = g.numel();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((x, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let upd = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *x = (*x as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub total: f64,
    pub det: f64,
    pub heatmap: f64,
    pub regression: f64,
    /// Unweighted; 0 when the term is off.
    pub aux: f64,
    pub align: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,det,heatmap,regression,aux,align\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                r.step, r.total, r.det, r.heatmap, r.regression, r.aux, r.align
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }
}

/// Evaluates the loss of one batch without updating anything.
pub fn batch_loss(
    model: &Model,
    store: &ParamStore<f32>,
    batch: &[&Prepared],
    loss: &LossConfig,
) -> Result<HistoryRow> {
    let mut g = Graph::<f32>::new();
    let terms = model.loss(&mut g, store, batch, loss)?;
    Ok(row(&g, 0, &terms))
}

fn row(g: &Graph<f32>, step: usize, t: &crate::heads::LossTerms) -> HistoryRow {
    let v = |x| g.item(x) as f64;
    HistoryRow {
        step,
        total: v(t.total),
        det: v(t.det.total),
        heatmap: v(t.det.heatmap),
        regression: v(t.det.regression),
        aux: t.aux.map_or(0.0, |a| v(a.total)),
        align: t.align.map_or(0.0, v),
    }
}

/// Deterministic epoch-shuffled minibatches.
pub struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    n: usize,
    batch: usize,
}

impl Batches {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
            order: Vec::new(),
            pos: n,
            n,
            batch: batch.min(n).max(1),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Runs `cfg.train.steps` optimizer steps. `hook` sees every step's row and
/// the current parameters (for periodic evaluation and checkpoints).
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    data: &[Prepared],
    cfg: &RunConfig,
    mut hook: impl FnMut(&HistoryRow, &ParamStore<f32>) -> Result<()>,
) -> Result<History> {
    if data.is_empty() {
        return Err(Error::Invalid("train: no samples".into()));
    }
    let mut opt = Adam::new(cfg.train.lr);
    let mut batches = Batches::new(data.len(), cfg.train.batch_size, cfg.train.seed);
    let mut history = History::default();
    for step in 0..cfg.train.steps {
        let idx = batches.next_batch();
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &data[i]).collect();
        let mut g = Graph::<f32>::new();
        let terms = match model.loss(&mut g, store, &batch, &cfg.loss) {
            Ok(t) => t,
            Err(Error::NonFinite { node }) => {
                return Err(Error::Diverged {
                    step,
                    detail: format!("non-finite value in forward pass at node {node}"),
                })
            }
            Err(e) => return Err(e),
        };
        let r = row(&g, step, &terms);
        if ![r.total, r.det, r.heatmap, r.regression, r.aux, r.align]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "total={} det={} heatmap={} regression={} aux={} align={}",
                    r.total, r.det, r.heatmap, r.regression, r.aux, r.align
                ),
            });
        }
        let grads = g.backward(terms.total)?.by_param(&g);
        opt.step(store, &grads)?;
        hook(&r, store)?;
        history.rows.push(r);
    }
    Ok(history)
}
