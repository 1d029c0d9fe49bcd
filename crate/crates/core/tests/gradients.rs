mod common;

use common::{gradcheck, op_specs, relative_error, FD_STEP, FD_TOLERANCE};
use fedbert::data::{MlmExample, NerSequence};
use fedbert::model::{BoundModel, Mode, ModelConfig, ParamSet};
use fedbert::tape::IGNORE_INDEX;
use fedbert::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    for spec in op_specs() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let case = (spec.make)(&mut rng);
            let shapes: Vec<_> = case.inputs.iter().map(|t| t.shape().to_vec()).collect();
            let err = gradcheck(&case);
            assert!(
                err < FD_TOLERANCE,
                "{} at shapes {shapes:?}: relative error {err:e}",
                spec.name
            );
        }
    }
}

#[test]
fn matmul_gradient_of_sum_is_tight() {
    let a = Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.5]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.2, 0.9], vec![-0.6, 0.1], vec![1.3, -0.8]]).unwrap();
    let loss = |a: &Tensor| {
        let mut tape = Tape::new();
        let x = tape.leaf(a.clone(), true);
        let y = tape.constant(b.clone());
        let p = tape.matmul(x, y).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        (tape.value(s).item(), tape.grad(x).unwrap().to_vec())
    };
    let (_, analytic) = loss(&a);
    let numeric: Vec<f64> = (0..a.numel())
        .map(|j| {
            let (mut up, mut down) = (a.clone(), a.clone());
            up.data_mut()[j] += FD_STEP;
            down.data_mut()[j] -= FD_STEP;
            (loss(&up).0 - loss(&down).0) / (2.0 * FD_STEP)
        })
        .collect();
    for (x, y) in analytic.iter().zip(&numeric) {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()), "{x} vs {y}");
    }
}

#[test]
fn softmax_rows_sum_to_one_with_large_entries() {
    let mut tape = Tape::new();
    let x = tape.constant(
        Tensor::from_rows(&[
            vec![1e3, -1e3, 0.5],
            vec![999.0, 1000.0, 1001.0],
            vec![0.0; 3],
        ])
        .unwrap(),
    );
    let p = tape.softmax_rows(x);
    for row in tape.value(p).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(row.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn seeded_computation_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = op_specs();
        let case = (specs.iter().find(|s| s.name == "layer_norm").unwrap().make)(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<_> = case
            .inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let out = (case.build)(&mut tape, &vars).unwrap();
        let out = tape.dropout(out, 0.3, 11).unwrap();
        let g = tape.gelu(out);
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let mut all = bits(tape.value(g).data());
        for v in vars {
            all.extend(bits(tape.grad(v).unwrap()));
        }
        all
    };
    assert_eq!(run(), run());
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden_size: 8,
        num_heads: 2,
        intermediate_size: 16,
        vocab_size: 12,
        max_seq_len: 8,
        dropout_p: 0.0,
        ..ModelConfig::desk(12)
    }
}

/// Compares every parameter gradient of a whole-model loss against
/// central differences.
fn check_model_loss(config: &ModelConfig, loss: impl Fn(&mut Tape, &BoundModel) -> fedbert::Var) {
    let params = ParamSet::init(config, 21).unwrap();
    // Larger weights than the 0.02 init so no gradient is vanishingly small.
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += rand::Rng::random_range(&mut rng, -0.3..0.3);
        }
    }
    let value = |p: &ParamSet| {
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, config, p, false).unwrap();
        let l = loss(&mut tape, &model);
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, config, &params, true).unwrap();
    let l = loss(&mut tape, &model);
    tape.backward(l).unwrap();
    let analytic = model.grads(&tape);

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for (i, name) in names.iter().enumerate() {
        let numel = analytic[i].len();
        let numeric: Vec<f64> = (0..numel)
            .map(|j| {
                let mut up = params.clone();
                up.tensors_mut().nth(i).unwrap().data_mut()[j] += FD_STEP;
                let mut down = params.clone();
                down.tensors_mut().nth(i).unwrap().data_mut()[j] -= FD_STEP;
                (value(&up) - value(&down)) / (2.0 * FD_STEP)
            })
            .collect();
        let err = relative_error(&analytic[i], &numeric);
        assert!(err < FD_TOLERANCE, "{name}: relative error {err:e}");
    }
}

#[test]
fn pretraining_loss_gradient_matches_finite_differences() {
    let config = tiny_config();
    let batch = vec![
        MlmExample {
            token_ids: vec![2, 4, 7, 3, 9, 4, 3],
            segment_ids: vec![0, 0, 0, 0, 1, 1, 1],
            labels: vec![
                IGNORE_INDEX,
                6,
                IGNORE_INDEX,
                IGNORE_INDEX,
                11,
                8,
                IGNORE_INDEX,
            ],
            is_next: true,
        },
        MlmExample {
            token_ids: vec![2, 5, 3, 4, 3],
            segment_ids: vec![0, 0, 0, 1, 1],
            labels: vec![IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX, 10, IGNORE_INDEX],
            is_next: false,
        },
    ];
    check_model_loss(&config, |tape, model| {
        model
            .pretrain_loss(tape, &batch, &mut Mode::Eval)
            .unwrap()
            .total
    });
}

#[test]
fn ner_loss_gradient_matches_finite_differences() {
    let config = tiny_config();
    let batch = vec![
        NerSequence {
            token_ids: vec![2, 6, 7, 8, 3],
            labels: vec![IGNORE_INDEX, 1, 2, 0, IGNORE_INDEX],
            word_starts: vec![1, 2, 3],
            num_words: 3,
        },
        NerSequence {
            token_ids: vec![2, 9, 10, 3],
            labels: vec![IGNORE_INDEX, 5, IGNORE_INDEX, IGNORE_INDEX],
            word_starts: vec![1],
            num_words: 1,
        },
    ];
    check_model_loss(&config, |tape, model| {
        model.ner_loss(tape, &batch, &mut Mode::Eval).unwrap()
    });
}
