//! Local training loops: Adam with global-norm clipping over seeded-shuffled
//! mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MlmExample, NerSequence};
use crate::error::{Error, Result};
use crate::model::{BoundModel, Mode, ModelConfig, ParamSet};
use crate::seed;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before every update.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::finetune_default()
    }
}

impl TrainerConfig {
    /// Standard BERT pre-training rate.
    pub fn pretrain_default() -> Self {
        Self {
            learning_rate: 1e-4,
            ..Self::finetune_default()
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.max_grad_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trainer config {self:?}")))
        }
    }
}

/// Adam moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

/// One clipped Adam update with bias correction.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &mut [Vec<f64>],
    state: &mut AdamState,
    config: &TrainerConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, t), g) in params.iter().zip(grads.iter()) {
        if g.len() != t.numel() {
            return Err(Error::Contract(format!(
                "gradient of {name} has {} entries, expected {}",
                g.len(),
                t.numel()
            )));
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                silo: None,
                step: state.step as usize,
                detail: format!("gradient of {name} is {bad}"),
            });
        }
    }
    clip_global_norm(grads, config.max_grad_norm);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((x, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Loss summary of one pass over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean of the per-batch training losses.
    pub mean_loss: f64,
    /// Mean per-batch masked-token loss (pre-training only).
    pub mean_mlm_loss: Option<f64>,
    pub batch_losses: Vec<f64>,
    /// Filled in by callers that time the epoch.
    #[serde(default)]
    pub wall_clock_secs: f64,
}

/// Visiting order for `epoch`: a ChaCha shuffle seeded by the trainer seed
/// and the epoch index.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
        seed,
        &[0x0ede, epoch],
    )));
    order
}

/// One pass of MLM (+NSP) training.
pub fn train_epoch_pretrain(
    model: &ModelConfig,
    params: &mut ParamSet,
    data: &[MlmExample],
    config: &TrainerConfig,
    epoch: u64,
    state: &mut AdamState,
) -> Result<EpochStats> {
    let mut mlm_losses = Vec::new();
    let batch_losses = run_epoch(
        model,
        params,
        data,
        config,
        epoch,
        state,
        |tape, bound, batch, mode| {
            let loss = bound.pretrain_loss(tape, batch, mode)?;
            mlm_losses.push(tape.value(loss.mlm).item());
            Ok(loss.total)
        },
    )?;
    Ok(EpochStats {
        mean_loss: mean(&batch_losses),
        mean_mlm_loss: Some(mean(&mlm_losses)),
        batch_losses,
        wall_clock_secs: 0.0,
    })
}

/// One pass of token-classification training.
pub fn train_epoch_finetune(
    model: &ModelConfig,
    params: &mut ParamSet,
    data: &[NerSequence],
    config: &TrainerConfig,
    epoch: u64,
    state: &mut AdamState,
) -> Result<EpochStats> {
    let batch_losses = run_epoch(
        model,
        params,
        data,
        config,
        epoch,
        state,
        |tape, bound, batch, mode| bound.ner_loss(tape, batch, mode),
    )?;
    Ok(EpochStats {
        mean_loss: mean(&batch_losses),
        mean_mlm_loss: None,
        batch_losses,
        wall_clock_secs: 0.0,
    })
}

fn run_epoch<T: Clone>(
    model: &ModelConfig,
    params: &mut ParamSet,
    data: &[T],
    config: &TrainerConfig,
    epoch: u64,
    state: &mut AdamState,
    mut loss_fn: impl FnMut(&mut Tape, &BoundModel, &[T], &mut Mode) -> Result<Var>,
) -> Result<Vec<f64>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params);
    }
    let order = epoch_order(data.len(), config.seed, epoch);
    let mut losses = Vec::with_capacity(order.len().div_ceil(config.batch_size));
    for (step, chunk) in order.chunks(config.batch_size).enumerate() {
        let batch: Vec<T> = chunk.iter().map(|&i| data[i].clone()).collect();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, model, params, true)?;
        let mut mode = Mode::train(seed::derive(config.seed, &[0xd0d0, epoch, step as u64]));
        let loss = loss_fn(&mut tape, &bound, &batch, &mut mode)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                silo: None,
                step,
                detail: format!("loss is {value}"),
            });
        }
        tape.backward(loss)?;
        let mut grads = bound.grads(&tape);
        adam_step(params, &mut grads, state, config).map_err(|e| match e {
            Error::Divergence { silo, detail, .. } => Error::Divergence { silo, step, detail },
            other => other,
        })?;
        losses.push(value);
    }
    Ok(losses)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        build_vocab, encode_ner, generate_corpus, make_mlm_examples, CorpusConfig, Lexicons,
        MlmConfig, Vocab,
    };
    use crate::tensor::Tensor;

    fn scalar_params(x: f64) -> ParamSet {
        ParamSet::new(vec![("x".into(), Tensor::scalar(x))]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = scalar_params(1.5);
        let mut s = AdamState::new(&p);
        s.m[0][0] = 0.4;
        s.v[0][0] = 0.2;
        let cfg = TrainerConfig::pretrain_default();
        adam_step(&mut p, &mut [vec![0.0]], &mut s, &cfg).unwrap();
        // m̂ = 0.36/0.1 is nonzero, so the parameter does move; with fresh
        // state it must not.
        assert!((s.m[0][0] - 0.36).abs() < 1e-15);
        assert!((s.v[0][0] - 0.2 * 0.999).abs() < 1e-15);
        let mut p = scalar_params(1.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut [vec![0.0]], &mut s, &cfg).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 1.5);
    }

    #[test]
    fn positive_gradient_decreases_param() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        let cfg = TrainerConfig::pretrain_default();
        adam_step(&mut p, &mut [vec![1.0]], &mut s, &cfg).unwrap();
        let x = p.get("x").unwrap().item();
        assert!(x < 0.0);
        assert!((x + cfg.learning_rate).abs() < 1e-10);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        let cfg = TrainerConfig {
            learning_rate: 0.1,
            max_grad_norm: f64::MAX,
            ..TrainerConfig::pretrain_default()
        };
        for _ in 0..200 {
            let x = p.get("x").unwrap().item();
            adam_step(&mut p, &mut [vec![2.0 * (x - 3.0)]], &mut s, &cfg).unwrap();
        }
        assert!((p.get("x").unwrap().item() - 3.0).abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(
            &mut p,
            &mut [vec![f64::NAN]],
            &mut s,
            &TrainerConfig::default(),
        );
        assert!(matches!(err, Err(Error::Divergence { .. })));
        assert_eq!(p.get("x").unwrap().item(), 0.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![12.0]];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        let after: f64 = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-9);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1]]);
    }

    fn tiny_setup() -> (ModelConfig, Vocab, crate::data::SyntheticCorpus) {
        let c = generate_corpus(
            &CorpusConfig {
                num_patients: 10,
                ner_train_notes: 13,
                ner_test_notes: 2,
                ..Default::default()
            },
            &Lexicons::clinical(),
        )
        .unwrap();
        let v = build_vocab(
            c.documents
                .iter()
                .flat_map(|d| d.sentences.iter().map(Vec::as_slice)),
            300,
        )
        .unwrap();
        let mut m = ModelConfig::desk(v.len());
        m.num_layers = 1;
        m.hidden_size = 32;
        m.intermediate_size = 64;
        m.max_seq_len = 32;
        (m, v, c)
    }

    #[test]
    fn epochs_are_deterministic_and_batch_larger_than_data_is_fine() {
        let (m, v, c) = tiny_setup();
        let data = make_mlm_examples(&v, &c.documents[..4], 32, 1, &MlmConfig::default()).unwrap();
        let cfg = TrainerConfig {
            batch_size: 1000,
            ..TrainerConfig::pretrain_default().with_seed(3)
        };
        let init = ParamSet::init(&m, 5).unwrap();
        let run = || {
            let mut p = init.clone();
            let mut s = AdamState::new(&p);
            let stats = train_epoch_pretrain(&m, &mut p, &data, &cfg, 0, &mut s).unwrap();
            (p, stats)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert!(a.bit_eq(&b));
        assert_eq!(sa, sb);
        assert_eq!(sa.batch_losses.len(), 1);
        assert!(!a.bit_eq(&init));
    }

    #[test]
    fn finetune_loss_halves_in_four_epochs() {
        let (m, v, c) = tiny_setup();
        let data: Vec<_> = c.ner_train[..50]
            .iter()
            .map(|e| encode_ner(&v, e, m.max_seq_len).unwrap())
            .collect();
        let cfg = TrainerConfig {
            learning_rate: 2e-3,
            batch_size: 4,
            ..TrainerConfig::finetune_default().with_seed(2)
        };
        let mut p = ParamSet::init(&m, 11).unwrap();
        let initial = crate::model::ner_loss(&m, &p, &data).unwrap();
        let mut s = AdamState::new(&p);
        for epoch in 0..4 {
            train_epoch_finetune(&m, &mut p, &data, &cfg, epoch, &mut s).unwrap();
        }
        let last = crate::model::ner_loss(&m, &p, &data).unwrap();
        assert!(last < 0.5 * initial, "{initial} -> {last}");
    }

    #[test]
    fn empty_data_is_rejected() {
        let (m, _, _) = tiny_setup();
        let mut p = ParamSet::init(&m, 1).unwrap();
        let mut s = AdamState::new(&p);
        let cfg = TrainerConfig::default();
        assert!(train_epoch_finetune(&m, &mut p, &[], &cfg, 0, &mut s).is_err());
    }
}
