//! Training loop, optimizer state checkpoints and loss logs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::corpus::{mix_seed, Sample};
use super::par_map;
use crate::error::{Error, Result};
use crate::geometry::{chamfer_l2, PointCloud};
use crate::model::{Network, Prepared, SampleInput};
use crate::objectives::LossBreakdown;
use crate::tensor::{read_checkpoint, write_checkpoint, Adam, Checkpoint, Graph, ParamId, Precision, Tensor};

/// A sample with its preprocessing done once.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample_id: String,
    pub prep: Prepared,
    pub partial: PointCloud,
    pub gt: PointCloud,
}

/// Preprocesses samples with their (optional) references.
pub fn prepare_samples(
    net: &Network,
    samples: &[Sample],
    references: &[Option<PointCloud>],
) -> Result<Vec<PreparedSample>> {
    if samples.len() != references.len() {
        return Err(Error::contract("one reference slot per sample is required"));
    }
    let pairs: Vec<(&Sample, &Option<PointCloud>)> = samples.iter().zip(references).collect();
    par_map(&pairs, |(s, r)| {
        let prep = net.prepare(SampleInput {
            partial: &s.partial,
            image: Some(&s.image),
            reference: r.as_ref(),
        })?;
        Ok(PreparedSample {
            sample_id: s.record.sample_id.clone(),
            prep,
            partial: s.partial.clone(),
            gt: s.gt.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    net: &Network,
    sample: &PreparedSample,
    precision: Precision,
) -> Result<(LossBreakdown, Vec<(ParamId, Tensor)>)> {
    let mut g = Graph::with_precision(precision);
    let fwd = net.forward(&mut g, &sample.prep)?;
    let (loss, parts) = net.loss(&mut g, &fwd, &sample.gt)?;
    g.backward(loss)?;
    Ok((parts, g.param_grads()))
}

/// Optimizer plus progress counters; everything needed to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: Network,
    pub adam: Adam,
    /// Next epoch to run (zero-based).
    pub epoch: usize,
    pub best_val: f64,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let net = Network::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(&net.store);
        Ok(TrainState {
            net,
            adam,
            epoch: 0,
            best_val: f64::INFINITY,
        })
    }

    pub fn steps(&self) -> u64 {
        self.adam.state.step
    }

    /// One optimizer step on the mean gradient of `batch`. Per-sample
    /// gradients are summed in batch order.
    pub fn step(&mut self, batch: &[&PreparedSample], lr: f64, precision: Precision, batch_id: usize) -> Result<LossBreakdown> {
        let net = &self.net;
        let results = par_map(batch, |s| sample_gradients(net, s, precision));
        let n = self.net.store.len();
        let mut sum: Vec<Option<Tensor>> = vec![None; n];
        let mut parts = LossBreakdown::default();
        for r in results {
            let (p, grads) = r.map_err(|e| match e {
                Error::NonFinite { term, .. } => Error::NonFinite { term, batch: batch_id },
                other => other,
            })?;
            parts.accumulate(&p);
            for (id, gr) in grads {
                match &mut sum[id.index()] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gr),
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let grads: Vec<(ParamId, Tensor)> = self
            .net
            .store
            .ids()
            .zip(sum)
            .filter_map(|(id, t)| {
                t.map(|mut t| {
                    t.data_mut().iter_mut().for_each(|x| *x *= scale);
                    (id, t)
                })
            })
            .collect();
        self.adam.step(&mut self.net.store, &grads, lr);
        Ok(parts.scaled(scale))
    }

    /// Runs one epoch: seeded shuffle, then batches in order. Returns the
    /// mean per-sample loss.
    pub fn run_epoch(&mut self, cfg: &RunConfig, train: &[PreparedSample]) -> Result<LossBreakdown> {
        if train.is_empty() {
            return Err(Error::contract("training split is empty"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, self.epoch as u64, 0xe9)));
        let lr = cfg.lr_at(self.epoch);
        let mut total = LossBreakdown::default();
        for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let parts = self.step(&batch, lr, cfg.precision(), b)?;
            total.accumulate(&parts.scaled(batch.len() as f64));
        }
        self.epoch += 1;
        Ok(total.scaled(1.0 / train.len() as f64))
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut ck = self.net.to_checkpoint();
        ck.meta.push(("run_config".into(), serde_json::to_string(cfg).expect("serializes")));
        ck.meta.push(("config_hash".into(), cfg.hash()));
        ck.meta.push(("epoch".into(), self.epoch.to_string()));
        ck.meta.push(("adam_step".into(), self.adam.state.step.to_string()));
        ck.meta.push(("best_val".into(), format!("{:?}", self.best_val)));
        for id in self.net.store.ids() {
            let name = self.net.store.name(id);
            ck.tensors.push((format!("adam.m.{name}"), self.adam.state.first[id.index()].clone()));
            ck.tensors.push((format!("adam.v.{name}"), self.adam.state.second[id.index()].clone()));
        }
        ck
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`]. The stored
    /// model config must equal `cfg.model`.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        let params: Vec<(String, Tensor)> = ck
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam."))
            .cloned()
            .collect();
        let net = Network::from_checkpoint(
            &Checkpoint {
                meta: ck.meta.clone(),
                tensors: params,
            },
            Some(&cfg.model),
        )?;
        let mut adam = Adam::new(&net.store);
        let meta = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Incompatible(format!("bad {k} in checkpoint")))
        };
        adam.state.step = num("adam_step")?;
        for id in net.store.ids() {
            let name = net.store.name(id);
            for (prefix, slot) in [("m", &mut adam.state.first), ("v", &mut adam.state.second)] {
                let t = ck
                    .tensor(&format!("adam.{prefix}.{name}"))
                    .ok_or_else(|| Error::Incompatible(format!("missing optimizer state for {name}")))?;
                slot[id.index()] = t.clone();
            }
        }
        Ok(TrainState {
            net,
            adam,
            epoch: num("epoch")? as usize,
            best_val: meta("best_val")?
                .parse()
                .map_err(|_| Error::Incompatible("bad best_val".into()))?,
        })
    }
}

/// Mean Chamfer-L2 of the completions of `samples`, summed in sample order.
pub fn mean_cd(net: &Network, samples: &[PreparedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let cds = par_map(samples, |s| {
        let out = net.complete(&s.prep)?;
        chamfer_l2(&out.dense, &s.gt)
    });
    let mut sum = 0.0;
    for c in cds {
        sum += c?;
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub seed: f64,
    pub output: f64,
    pub ft: f64,
    pub total: f64,
    pub val_cd_l2: Option<f64>,
}

/// Where a training run writes its files.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("losses.jsonl")
    }
}

/// Trains until `cfg.epochs`, validating after every epoch when a validation
/// set is given. Writes `last.ckpt` every epoch, `best.ckpt` on validation
/// improvement and appends one JSON line per epoch to `losses.jsonl`.
/// `on_epoch` sees each log entry as it is produced.
pub fn train_loop(
    cfg: &RunConfig,
    state: &mut TrainState,
    train: &[PreparedSample],
    val: &[PreparedSample],
    paths: Option<&RunPaths>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if let Some(p) = paths {
        fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
    }
    let mut logs = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        let parts = state.run_epoch(cfg, train)?;
        let val_cd = if val.is_empty() {
            None
        } else {
            Some(mean_cd(&state.net, val)?)
        };
        let improved = val_cd.is_some_and(|v| v < state.best_val);
        if let Some(v) = val_cd.filter(|_| improved) {
            state.best_val = v;
        }
        let log = EpochLog {
            epoch,
            steps: state.steps(),
            lr,
            seed: parts.seed,
            output: parts.output,
            ft: parts.ft,
            total: parts.total,
            val_cd_l2: val_cd,
        };
        if let Some(p) = paths {
            let ck = state.to_checkpoint(cfg);
            write_checkpoint(&p.last(), &ck)?;
            if improved || val.is_empty() {
                write_checkpoint(&p.best(), &ck)?;
            }
            append_line(&p.log(), &serde_json::to_string(&log).expect("serializes"))?;
        }
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Loads a training state for resuming.
pub fn resume(path: &Path, cfg: &RunConfig) -> Result<TrainState> {
    TrainState::from_checkpoint(&read_checkpoint(path)?, cfg)
}
