//! In-process federated averaging: broadcast, local training, weighted
//! aggregation, repeated for a number of global cycles.

use serde::{Deserialize, Serialize};

use crate::data::{MlmExample, NerSequence};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet};
use crate::seed;
use crate::trainer::{
    train_epoch_finetune, train_epoch_pretrain, AdamState, EpochStats, TrainerConfig,
};

/// Sample-size weighted mean `Σ (n_k / N) · Q_k`, summed in the order given
/// (callers pass contributions in ascending silo order).
pub fn aggregate(contributions: &[(&ParamSet, u64)]) -> Result<ParamSet> {
    let (first, _) = contributions
        .first()
        .ok_or_else(|| Error::Contract("nothing to aggregate".into()))?;
    for (k, (p, n)) in contributions.iter().enumerate() {
        if *n == 0 {
            return Err(Error::Contract(format!(
                "contribution {k} has sample size 0"
            )));
        }
        if let Some(mismatch) = first.first_mismatch(p) {
            return Err(Error::Aggregation(format!(
                "contribution {k} is incongruent: {mismatch}"
            )));
        }
    }
    let total: u64 = contributions.iter().map(|(_, n)| n).sum();
    let weights: Vec<f64> = contributions
        .iter()
        .map(|(_, n)| *n as f64 / total as f64)
        .collect();

    let data: Vec<Vec<&[f64]>> = contributions
        .iter()
        .map(|(p, _)| p.iter().map(|(_, t)| t.data()).collect())
        .collect();
    let mut out = (*first).clone();
    for (i, acc) in out.tensors_mut().enumerate() {
        // Start from the first weighted term so a single contribution (weight
        // exactly 1) comes back bit-for-bit, signed zeros included.
        for (x, &q) in acc.data_mut().iter_mut().zip(data[0][i]) {
            *x = weights[0] * q;
        }
        for (d, &w) in data.iter().zip(&weights).skip(1) {
            for (x, &q) in acc.data_mut().iter_mut().zip(d[i]) {
                *x += w * q;
            }
        }
    }
    Ok(out)
}

/// Which objective a silo trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Training data of one stage.
#[derive(Debug, Clone, PartialEq)]
pub enum StageData {
    Pretrain(Vec<MlmExample>),
    Finetune(Vec<NerSequence>),
}

impl StageData {
    pub fn stage(&self) -> Stage {
        match self {
            StageData::Pretrain(_) => Stage::Pretrain,
            StageData::Finetune(_) => Stage::Finetune,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StageData::Pretrain(d) => d.len(),
            StageData::Finetune(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenation in the order given.
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a StageData>) -> Result<StageData> {
        let mut parts = parts.into_iter();
        let mut out = parts
            .next()
            .ok_or_else(|| Error::Contract("no data to merge".into()))?
            .clone();
        for p in parts {
            match (&mut out, p) {
                (StageData::Pretrain(a), StageData::Pretrain(b)) => a.extend_from_slice(b),
                (StageData::Finetune(a), StageData::Finetune(b)) => a.extend_from_slice(b),
                _ => {
                    return Err(Error::Contract(
                        "cannot merge data of different stages".into(),
                    ))
                }
            }
        }
        Ok(out)
    }

    fn train_epoch(
        &self,
        model: &ModelConfig,
        params: &mut ParamSet,
        config: &TrainerConfig,
        epoch: u64,
        state: &mut AdamState,
    ) -> Result<EpochStats> {
        match self {
            StageData::Pretrain(d) => train_epoch_pretrain(model, params, d, config, epoch, state),
            StageData::Finetune(d) => train_epoch_finetune(model, params, d, config, epoch, state),
        }
    }
}

/// One simulated data holder.
#[derive(Debug, Clone, PartialEq)]
pub struct SiloHandle {
    pub index: usize,
    pub data: StageData,
    /// Patients (pre-training) or notes (fine-tuning): the aggregation weight.
    pub sample_size: u64,
    /// Seed of this silo's trainer (shuffling and dropout).
    pub seed: u64,
}

/// Trainer seed of silo `k`. Silo 0 uses the base seed itself, so a
/// single-silo federation replays centralized training exactly.
pub fn silo_seed(base: u64, k: usize) -> u64 {
    if k == 0 {
        base
    } else {
        seed::derive(base, &[0x5170, k as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub cycles: usize,
    pub local_epochs: usize,
    /// Train silos concurrently between broadcast and aggregation.
    pub parallel: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            cycles: 1,
            local_epochs: 1,
            parallel: false,
        }
    }
}

/// Snapshot after one global cycle.
#[derive(Debug, Clone)]
pub struct GlobalCycleState {
    /// 1-based global cycle number.
    pub cycle: usize,
    pub params: ParamSet,
    /// Per silo, one entry per local epoch.
    pub silo_stats: Vec<Vec<EpochStats>>,
    pub wall_clock_secs: f64,
}

impl GlobalCycleState {
    /// Mean training loss of each silo's final local epoch.
    pub fn silo_losses(&self) -> Vec<f64> {
        self.silo_stats
            .iter()
            .map(|s| s.last().map_or(f64::NAN, |e| e.mean_loss))
            .collect()
    }

    /// Unweighted mean over silos of the final-epoch masked-token loss.
    pub fn mean_mlm_loss(&self) -> Option<f64> {
        let losses: Option<Vec<f64>> = self
            .silo_stats
            .iter()
            .map(|s| s.last().and_then(|e| e.mean_mlm_loss))
            .collect();
        losses.map(|l| l.iter().sum::<f64>() / l.len() as f64)
    }

    /// Unweighted mean over silos of the final-epoch training loss.
    pub fn mean_loss(&self) -> f64 {
        let l = self.silo_losses();
        l.iter().sum::<f64>() / l.len() as f64
    }
}

/// Runs `config.cycles` global cycles starting from `initial`. Every silo
/// starts each cycle from the current global model with fresh optimizer
/// state; the aggregate of the local results becomes the next global model.
pub fn run_federated(
    model: &ModelConfig,
    initial: &ParamSet,
    silos: &[SiloHandle],
    config: &FedConfig,
    trainer: &TrainerConfig,
) -> Result<Vec<GlobalCycleState>> {
    validate_silos(silos)?;
    if config.cycles == 0 || config.local_epochs == 0 {
        return Err(Error::Config(
            "cycles and local_epochs must be at least 1".into(),
        ));
    }
    trainer.validate()?;
    let mut global = initial.clone();
    let mut history = Vec::with_capacity(config.cycles);
    for cycle in 1..=config.cycles {
        let clock = Clock::start();
        let results = train_silos(model, &global, silos, config, trainer, cycle)?;
        let contributions: Vec<(&ParamSet, u64)> = results
            .iter()
            .zip(silos)
            .map(|((p, _), s)| (p, s.sample_size))
            .collect();
        global = aggregate(&contributions).map_err(|e| e.context(format!("cycle {cycle}")))?;
        history.push(GlobalCycleState {
            cycle,
            params: global.clone(),
            silo_stats: results.into_iter().map(|(_, s)| s).collect(),
            wall_clock_secs: clock.elapsed(),
        });
    }
    Ok(history)
}

fn validate_silos(silos: &[SiloHandle]) -> Result<()> {
    if silos.is_empty() {
        return Err(Error::Contract("federation needs at least one silo".into()));
    }
    let stage = silos[0].data.stage();
    for (k, s) in silos.iter().enumerate() {
        if s.index != k {
            return Err(Error::Contract(format!(
                "silo at position {k} has index {}",
                s.index
            )));
        }
        if s.sample_size == 0 || s.data.is_empty() {
            return Err(Error::Contract(format!("silo {k} holds no data")));
        }
        if s.data.stage() != stage {
            return Err(Error::Contract(
                "silos hold data of different stages".into(),
            ));
        }
    }
    Ok(())
}

type LocalResult = (ParamSet, Vec<EpochStats>);

fn train_silos(
    model: &ModelConfig,
    global: &ParamSet,
    silos: &[SiloHandle],
    config: &FedConfig,
    trainer: &TrainerConfig,
    cycle: usize,
) -> Result<Vec<LocalResult>> {
    let local = |silo: &SiloHandle| -> Result<LocalResult> {
        let cfg = trainer.with_seed(silo.seed);
        let mut params = global.clone();
        let mut state = AdamState::new(&params);
        let mut stats = Vec::with_capacity(config.local_epochs);
        for e in 0..config.local_epochs {
            let epoch = ((cycle - 1) * config.local_epochs + e) as u64;
            let s = silo
                .data
                .train_epoch(model, &mut params, &cfg, epoch, &mut state)
                .map_err(|err| match err {
                    Error::Divergence { step, detail, .. } => Error::Divergence {
                        silo: Some(silo.index),
                        step,
                        detail,
                    },
                    other => other,
                })
                .map_err(|err| err.context(format!("cycle {cycle}")))?;
            stats.push(s);
        }
        Ok((params, stats))
    };
    #[cfg(feature = "parallel")]
    if config.parallel {
        use rayon::prelude::*;
        return silos.par_iter().map(local).collect();
    }
    silos.iter().map(local).collect()
}

/// When centralized training resets its Adam moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerPolicy {
    /// Fresh moments every epoch, mirroring the per-broadcast reset of the
    /// federated protocol so one silo reproduces centralized training.
    #[default]
    ResetEachEpoch,
    /// One optimizer state carried across all epochs.
    Persist,
}

/// Ordinary single-site training on merged data, with the same trainer as
/// the silos. Returns the final parameters and per-epoch statistics.
pub fn run_centralized(
    model: &ModelConfig,
    initial: &ParamSet,
    data: &StageData,
    epochs: usize,
    trainer: &TrainerConfig,
    policy: OptimizerPolicy,
) -> Result<(ParamSet, Vec<EpochStats>)> {
    if epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let mut params = initial.clone();
    let mut state = AdamState::new(&params);
    let mut stats = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        if policy == OptimizerPolicy::ResetEachEpoch {
            state = AdamState::new(&params);
        }
        let clock = Clock::start();
        let mut s = data
            .train_epoch(model, &mut params, trainer, epoch as u64, &mut state)
            .map_err(|e| e.context(format!("epoch {}", epoch + 1)))?;
        s.wall_clock_secs = clock.elapsed();
        stats.push(s);
    }
    Ok((params, stats))
}

/// One line of the per-cycle metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    pub silo_losses: Vec<f64>,
    pub aggregate_checkpoint_path: Option<String>,
    #[serde(default)]
    pub experiment: Option<String>,
    #[serde(default)]
    pub stage: Option<Stage>,
    #[serde(default)]
    pub mean_mlm_loss: Option<f64>,
    #[serde(default)]
    pub wall_clock_secs: f64,
}

impl CycleMetrics {
    pub fn from_state(state: &GlobalCycleState, stage: Stage, checkpoint: Option<String>) -> Self {
        Self {
            cycle: state.cycle,
            silo_losses: state.silo_losses(),
            aggregate_checkpoint_path: checkpoint,
            experiment: None,
            stage: Some(stage),
            mean_mlm_loss: state.mean_mlm_loss(),
            wall_clock_secs: state.wall_clock_secs,
        }
    }
}

/// Wall-clock timer that reads zero where no monotonic clock exists.
struct Clock(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Clock {
    fn start() -> Self {
        Clock(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}
