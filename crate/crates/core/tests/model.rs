use fedbert::data::{
    build_vocab, encode_ner, generate_corpus, make_mlm_examples, CorpusConfig, Lexicons, MlmConfig,
    MlmExample, NerSequence, Vocab,
};
use fedbert::model::{self, forward, ModelConfig, ParamSet, SequenceInput};
use fedbert::trainer::{self, AdamState, TrainerConfig};
use fedbert::Error;

struct Fixture {
    vocab: Vocab,
    config: ModelConfig,
    mlm: Vec<MlmExample>,
    ner: Vec<NerSequence>,
}

fn fixture() -> Fixture {
    let corpus = generate_corpus(
        &CorpusConfig {
            num_patients: 60,
            ner_train_notes: 20,
            ner_test_notes: 2,
            ..CorpusConfig::default()
        },
        &Lexicons::clinical(),
    )
    .unwrap();
    let vocab = build_vocab(
        corpus
            .documents
            .iter()
            .flat_map(|d| d.sentences.iter().map(|s| s.as_slice())),
        500,
    )
    .unwrap();
    let config = ModelConfig::desk(vocab.len());
    let mlm = make_mlm_examples(&vocab, &corpus.documents, 64, 9, &MlmConfig::default()).unwrap();
    let ner = corpus
        .ner_train
        .iter()
        .map(|e| encode_ner(&vocab, e, 64).unwrap())
        .collect();
    Fixture {
        vocab,
        config,
        mlm,
        ner,
    }
}

fn full(n: usize) -> (Vec<usize>, Vec<bool>) {
    (vec![0; n], vec![true; n])
}

#[test]
fn single_token_attends_to_itself() {
    let f = fixture();
    let params = ParamSet::init(&f.config, 1).unwrap();
    let (seg, mask) = full(1);
    let input = SequenceInput {
        token_ids: &[2],
        segment_ids: &seg,
        attention_mask: &mask,
    };
    let (hidden, capture) = forward(&f.config, &params, input, true).unwrap();
    assert_eq!(hidden.shape(), &[1, f.config.hidden_size]);
    for head in capture.unwrap().heads {
        assert_eq!(head.data(), &[1.0]);
    }
}

#[test]
fn hidden_shape_and_row_sums() {
    let f = fixture();
    let params = ParamSet::init(&f.config, 2).unwrap();
    for n in [2, 7, f.config.max_seq_len] {
        let ids: Vec<usize> = (0..n).map(|i| 5 + i % (f.vocab.len() - 5)).collect();
        let (seg, mask) = full(n);
        let input = SequenceInput {
            token_ids: &ids,
            segment_ids: &seg,
            attention_mask: &mask,
        };
        let (hidden, capture) = forward(&f.config, &params, input, true).unwrap();
        assert_eq!(hidden.shape(), &[n, f.config.hidden_size]);
        let capture = capture.unwrap();
        assert_eq!(
            capture.heads.len(),
            f.config.num_layers * f.config.num_heads
        );
        for head in &capture.heads {
            for row in head.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn padded_columns_receive_no_attention() {
    let f = fixture();
    let params = ParamSet::init(&f.config, 3).unwrap();
    let (n, k) = (12, 5);
    let ids: Vec<usize> = (0..n).map(|i| 6 + i).collect();
    let seg = vec![0; n];
    let mask: Vec<bool> = (0..n).map(|i| i < k).collect();

    // Through the tape: full attention matrices including padded columns.
    let mut tape = fedbert::Tape::new();
    let bound = model::BoundModel::bind(&mut tape, &f.config, &params, false).unwrap();
    let input = SequenceInput {
        token_ids: &ids,
        segment_ids: &seg,
        attention_mask: &mask,
    };
    let (_, probs) = bound
        .encode(&mut tape, input, &mut model::Mode::Eval)
        .unwrap();
    for p in probs {
        let t = tape.value(p);
        for i in 0..k {
            let padded: f64 = (k..n).map(|j| t.data()[i * n + j]).sum();
            assert!(padded < 1e-6, "row {i} puts {padded} on padding");
        }
    }

    // The capture keeps only real positions, and they match an unpadded run.
    let (_, cap) = forward(&f.config, &params, input, true).unwrap();
    let (seg_k, mask_k) = full(k);
    let short = SequenceInput {
        token_ids: &ids[..k],
        segment_ids: &seg_k,
        attention_mask: &mask_k,
    };
    let (_, cap_k) = forward(&f.config, &params, short, true).unwrap();
    for (a, b) in cap.unwrap().heads.iter().zip(&cap_k.unwrap().heads) {
        assert_eq!(a.shape(), &[k, k]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn overlong_or_malformed_input_is_a_contract_error() {
    let f = fixture();
    let params = ParamSet::init(&f.config, 4).unwrap();
    let n = f.config.max_seq_len + 1;
    let ids = vec![5; n];
    let (seg, mask) = full(n);
    let input = SequenceInput {
        token_ids: &ids,
        segment_ids: &seg,
        attention_mask: &mask,
    };
    assert!(matches!(
        forward(&f.config, &params, input, false),
        Err(Error::Contract(_))
    ));

    let mut bad = f.ner[0].clone();
    bad.labels.pop();
    assert!(matches!(
        model::ner_loss(&f.config, &params, &[bad]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn untrained_losses_sit_at_chance() {
    let f = fixture();
    let params = ParamSet::init(&f.config, 5).unwrap();
    let batch = &f.mlm[..200.min(f.mlm.len())];
    let nsp = model::nsp_loss(&f.config, &params, batch).unwrap();
    assert!((nsp - 2f64.ln()).abs() <= 0.2, "nsp {nsp}");
    let mlm = model::mlm_loss(&f.config, &params, batch).unwrap();
    let chance = (f.vocab.len() as f64).ln();
    assert!(
        (mlm - chance).abs() <= 0.15 * chance,
        "mlm {mlm} vs ln V {chance}"
    );
}

#[test]
fn ner_logits_shape() {
    let f = fixture();
    let params = ParamSet::init(&f.config, 6).unwrap();
    let ids = &f.ner[0].token_ids;
    let logits = model::ner_logits(&f.config, &params, ids).unwrap();
    assert_eq!(logits.shape(), &[ids.len(), f.config.num_ner_labels]);
}

#[test]
fn evaluation_forward_is_deterministic() {
    let f = fixture();
    let params = ParamSet::init(&f.config, 7).unwrap();
    let ids = &f.ner[1].token_ids;
    let a = model::ner_logits(&f.config, &params, ids).unwrap();
    let b = model::ner_logits(&f.config, &params, ids).unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_step_lowers_single_example_mlm_loss() {
    let f = fixture();
    let mut params = ParamSet::init(&f.config, 8).unwrap();
    let example = vec![f.mlm[0].clone()];
    let before = model::mlm_loss(&f.config, &params, &example).unwrap();
    let config = TrainerConfig {
        learning_rate: 1e-3,
        batch_size: 1,
        ..TrainerConfig::pretrain_default()
    };
    let mut no_dropout = f.config.clone();
    no_dropout.dropout_p = 0.0;
    let mut state = AdamState::new(&params);
    trainer::train_epoch_pretrain(&no_dropout, &mut params, &example, &config, 0, &mut state)
        .unwrap();
    let after = model::mlm_loss(&f.config, &params, &example).unwrap();
    assert!(after < before, "{after} !< {before}");
}
