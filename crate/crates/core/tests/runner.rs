mod common;

use std::fs;

use common::small_config;
use fedbert::attention::AttentionReport;
use fedbert::fed::{CycleMetrics, Stage};
use fedbert::model::load_checkpoint;
use fedbert::runner::{
    experiment, export_corpus, parse_results_tsv, prepare, CorpusFiles, Evaluation, Finetuning,
    Pretraining, Runner, RESULTS_HEADER, TASK_NAME,
};

fn metrics(dir: &std::path::Path) -> Vec<CycleMetrics> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn matrix_writes_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut runner = Runner::new(small_config(dir.path()), false).unwrap();
    let outcome = runner.run_matrix(None).unwrap();
    assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
    assert_eq!(outcome.executed, vec![1, 2, 3, 4, 5, 6]);

    let text = fs::read_to_string(dir.path().join("results.tsv")).unwrap();
    assert_eq!(text.lines().next(), Some(RESULTS_HEADER));
    let rows = parse_results_tsv(&text).unwrap();
    assert_eq!(rows, outcome.rows);
    assert_eq!(rows.len(), 6);
    for (row, id) in rows.iter().zip(1..) {
        let spec = experiment(id).unwrap();
        assert_eq!(row.task, TASK_NAME);
        assert_eq!(
            (row.pretraining, row.finetuning),
            (spec.pretraining, spec.finetuning)
        );
        for v in [row.precision, row.recall, row.f1] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    let report_text = fs::read_to_string(dir.path().join("attention_report.tsv")).unwrap();
    let report = AttentionReport::parse_tsv(&report_text).unwrap();
    assert_eq!(Some(&report), outcome.report.as_ref());
    assert_eq!(
        report.models,
        ["BERTbase", "ClinicalBERT", "Fed_ClinicalBERT"]
    );

    let lines = metrics(dir.path());
    let fed_pretrain: Vec<_> = lines
        .iter()
        .filter(|m| m.experiment.as_deref() == Some("pretrain_federated"))
        .collect();
    assert_eq!(fed_pretrain.len(), 2);
    for m in fed_pretrain {
        assert_eq!(m.stage, Some(Stage::Pretrain));
        assert_eq!(m.silo_losses.len(), 5);
        assert!(m.mean_mlm_loss.unwrap().is_finite());
        let ckpt = m.aggregate_checkpoint_path.as_ref().unwrap();
        let params = load_checkpoint(ckpt).unwrap();
        assert!(params.layout_mismatch(&runner.prepared().model).is_none());
    }
    for id in 1..=6 {
        assert!(dir
            .path()
            .join(format!("checkpoints/exp{id}_final.fcrp"))
            .exists());
    }
    let evaluations: Vec<serde_json::Value> =
        fs::read_to_string(dir.path().join("evaluation.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
    assert_eq!(evaluations.len(), 6);
    for (e, row) in evaluations.iter().zip(&rows) {
        let eval: Evaluation = serde_json::from_value(e["evaluation"].clone()).unwrap();
        assert_eq!(eval.scores.f1, row.f1);
        assert!((0.0..=1.0).contains(&eval.token_accuracy));
    }

    let vocab = fs::read_to_string(dir.path().join("vocab.txt")).unwrap();
    assert_eq!(vocab.lines().count(), runner.prepared().vocab.len());
}

#[test]
fn no_pretraining_runs_no_pretraining_cycles() {
    let dir = tempfile::tempdir().unwrap();
    let mut runner = Runner::new(small_config(dir.path()), false).unwrap();
    let row = runner.run_experiment(experiment(1).unwrap()).unwrap();
    assert_eq!(row.pretraining, Pretraining::None);
    assert_eq!(row.finetuning, Finetuning::Centralized);
    let lines = metrics(dir.path());
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|m| m.stage == Some(Stage::Finetune)));
    assert!(!dir
        .path()
        .join("checkpoints/pretrain_centralized.fcrp")
        .exists());
}

#[test]
fn resume_completes_the_matrix_and_is_idempotent() {
    let fresh = tempfile::tempdir().unwrap();
    Runner::new(small_config(fresh.path()), false)
        .unwrap()
        .run_matrix(None)
        .unwrap();
    let expected = fs::read(fresh.path().join("results.tsv")).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let partial = Runner::new(small_config(dir.path()), false)
        .unwrap()
        .run_matrix(Some(&[2, 5]))
        .unwrap();
    assert_eq!(partial.executed, vec![2, 5]);
    assert_eq!(partial.rows.len(), 2);
    assert!(partial.report.is_none());

    let resumed = Runner::new(small_config(dir.path()), true)
        .unwrap()
        .run_matrix(None)
        .unwrap();
    assert_eq!(resumed.executed, vec![1, 3, 4, 6]);
    assert_eq!(fs::read(dir.path().join("results.tsv")).unwrap(), expected);

    let again = Runner::new(small_config(dir.path()), true)
        .unwrap()
        .run_matrix(None)
        .unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(fs::read(dir.path().join("results.tsv")).unwrap(), expected);
    assert_eq!(
        fs::read(dir.path().join("attention_report.tsv")).unwrap(),
        fs::read(fresh.path().join("attention_report.tsv")).unwrap()
    );
}

#[test]
fn single_silo_federation_matches_centralized_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.silos = 1;
    config.cycles_pretrain = 2;
    config.epochs_pretrain = 2;
    config.cycles_finetune = 2;
    config.epochs_finetune = 2;
    let mut runner = Runner::new(config, false).unwrap();
    let central = runner.pretrained(Pretraining::Centralized).unwrap();
    let federated = runner.pretrained(Pretraining::Federated).unwrap();
    assert!(central.bit_eq(&federated));
    assert!(!central.bit_eq(&runner.prepared().init));

    let rows: Vec<_> = [2, 5]
        .into_iter()
        .map(|id| runner.run_experiment(experiment(id).unwrap()).unwrap())
        .collect();
    let ckpt = |id: usize| {
        load_checkpoint(dir.path().join(format!("checkpoints/exp{id}_final.fcrp"))).unwrap()
    };
    assert!(ckpt(2).bit_eq(&ckpt(5)));
    assert_eq!(
        (rows[0].precision, rows[0].recall, rows[0].f1),
        (rows[1].precision, rows[1].recall, rows[1].f1)
    );
}

#[test]
fn corpus_files_replace_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(&dir.path().join("out"));
    let files = export_corpus(&config.corpus, dir.path().join("corpus")).unwrap();
    assert_eq!(files, CorpusFiles::in_dir(dir.path().join("corpus")));

    let generated = prepare(&config).unwrap();
    let mut from_files = config.clone();
    from_files.corpus_files = Some(files);
    let loaded = prepare(&from_files).unwrap();
    assert_eq!(loaded.vocab, generated.vocab);
    assert_eq!(loaded.test, generated.test);
    assert!(loaded.init.bit_eq(&generated.init));
    assert_eq!(loaded.pretrain_silos, generated.pretrain_silos);
    assert_eq!(loaded.finetune_silos, generated.finetune_silos);
}

#[test]
fn missing_corpus_file_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.corpus_files = Some(CorpusFiles {
        documents: dir.path().join("nope.jsonl"),
        ner_train: dir.path().join("nope.jsonl"),
        ner_test: dir.path().join("nope.jsonl"),
    });
    let err = prepare(&config).unwrap_err().to_string();
    assert!(err.contains("nope.jsonl"), "{err}");
}
