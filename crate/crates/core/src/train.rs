//! Two-stage training loop over LTS datasets.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::loss::{hybrid_loss, LossBreakdown, LossContext, StageSchedule, Targets};
use crate::lts::DatasetRecord;
use crate::rmgl::{Model, ModelConfig, ModelError, ModelInput, NormStats};
use crate::tensor::{Adam, AdamConfig, Graph, StepOutcome, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("training set is empty")]
    Empty,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch log: {0}")]
    Log(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: StageSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: StageSchedule::default(),
            adam: AdamConfig::default(),
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.schedule.stage1.validate().map_err(TrainError::Config)?;
        self.schedule.stage2.validate().map_err(TrainError::Config)?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the epoch log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub stage: u8,
    pub total: f64,
    pub data: f64,
    pub kcl: f64,
    pub loss_term: f64,
    pub angle_term: f64,
    /// Mean pre-clip gradient norm of the applied steps.
    pub grad_norm: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

/// Model input and loss constants of one record.
pub struct TrainSample {
    pub input: ModelInput,
    pub ctx: LossContext,
}

/// Inputs padded to their own size with targets in edge order.
pub fn inputs_and_targets(
    records: &[DatasetRecord],
) -> Result<(Vec<ModelInput>, Vec<Targets>), ModelError> {
    let mut inputs = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for r in records {
        let input = ModelInput::from_network(&r.network, r.network.n_buses())?;
        targets.push(Targets::from_solution(&r.solution(), &input.edges));
        inputs.push(input);
    }
    Ok((inputs, targets))
}

pub fn fit_stats(inputs: &[ModelInput], targets: &[Targets]) -> NormStats {
    let bus: Vec<_> = targets.iter().map(|t| t.bus.clone()).collect();
    let branch: Vec<_> = targets.iter().map(|t| t.branch.clone()).collect();
    NormStats::fit(inputs, &bus, &branch)
}

pub fn prepare(
    records: &[DatasetRecord],
    inputs: Vec<ModelInput>,
    targets: &[Targets],
    stats: &NormStats,
) -> Vec<TrainSample> {
    inputs
        .into_iter()
        .zip(records.iter().zip(targets))
        .map(|(input, (r, t))| {
            let ctx = LossContext::new(&r.network, &input.edges, t, stats);
            TrainSample { input, ctx }
        })
        .collect()
}

/// Batches of equal bus count, shuffled within and across size groups.
pub fn epoch_batches(sizes: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in sizes.iter().enumerate() {
        groups.entry(n).or_default().push(i);
    }
    let mut batches = Vec::new();
    for mut idx in groups.into_values() {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn accumulate(acc: &mut LossBreakdown, bd: &LossBreakdown, w: f64) {
    acc.total += bd.total * w;
    acc.data += bd.data * w;
    acc.kcl += bd.kcl * w;
    acc.loss_term += bd.loss_term * w;
    acc.angle_term += bd.angle_term * w;
}

/// Trains `model` in place on prepared samples. `on_epoch` sees every log
/// row as it is produced.
pub fn train_prepared(
    model: &mut Model,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, model.params());
    let sizes: Vec<usize> = samples.iter().map(|s| s.input.real_n).collect();
    let mut logs = Vec::with_capacity(cfg.schedule.total_epochs());
    for epoch in 0..cfg.schedule.total_epochs() {
        let (stage, weights) = cfg.schedule.at(epoch);
        let mut acc = LossBreakdown::default();
        let (mut norm_sum, mut steps, mut skipped) = (0.0, 0usize, 0usize);
        for (b, batch) in epoch_batches(&sizes, cfg.batch_size, &mut rng).iter().enumerate() {
            let g = Graph::new();
            let vars = model.bind(&g);
            let inputs: Vec<&ModelInput> = batch.iter().map(|&i| &samples[i].input).collect();
            let ctxs: Vec<&LossContext> = batch.iter().map(|&i| &samples[i].ctx).collect();
            let preds = model.forward(&g, &vars, &inputs)?;
            let (loss, bd) = hybrid_loss(&g, &preds, &ctxs, &weights)?;
            if !bd.total.is_finite() {
                return Err(TrainError::NonFinite { epoch: epoch + 1, batch: b });
            }
            let grads = g.backward(loss)?;
            let grads: Vec<_> = vars.iter().map(|&v| grads.get(v)).collect();
            drop(g);
            match adam.step(model.params_mut(), &grads) {
                StepOutcome::Applied { grad_norm } => {
                    norm_sum += grad_norm;
                    steps += 1;
                }
                StepOutcome::Skipped => skipped += 1,
            }
            accumulate(&mut acc, &bd, batch.len() as f64 / samples.len() as f64);
        }
        if skipped > 0 {
            log::warn!("epoch {}: skipped {skipped} steps with non-finite gradients", epoch + 1);
        }
        let row = EpochLog {
            epoch: epoch + 1,
            stage,
            total: acc.total,
            data: acc.data,
            kcl: acc.kcl,
            loss_term: acc.loss_term,
            angle_term: acc.angle_term,
            grad_norm: if steps > 0 { norm_sum / steps as f64 } else { f64::NAN },
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {:>4} stage {} total {:.6e} data {:.4e} kcl {:.4e} loss {:.4e} angle {:.4e}",
            row.epoch,
            row.stage,
            row.total,
            row.data,
            row.kcl,
            row.loss_term,
            row.angle_term
        );
        on_epoch(&row);
        logs.push(row);
    }
    Ok(logs)
}

/// Fits normalization statistics on `records`, initializes a model from
/// the config seed and trains it.
pub fn train(
    records: &[DatasetRecord],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>), TrainError> {
    if records.is_empty() {
        return Err(TrainError::Empty);
    }
    cfg.validate()?;
    let (inputs, targets) = inputs_and_targets(records)?;
    let stats = fit_stats(&inputs, &targets);
    let samples = prepare(records, inputs, &targets, &stats);
    let mut model = Model::new(cfg.model.clone(), stats, cfg.seed)?;
    let logs = train_prepared(&mut model, &samples, cfg, on_epoch)?;
    Ok((model, logs))
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in logs {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
