use super::*;
use crate::corpus::generate_synthetic;
use proptest::prelude::*;

#[test]
fn baseline_examples() {
    let b = mean_value_baseline(&[[-1.0; 5], [1.0; 5]]).unwrap();
    assert_eq!(b.predict(), [0.0; 5]);
    let (mse, avg) = trait_mse(&[(b.predict(), [-1.0; 5]), (b.predict(), [1.0; 5])]);
    assert_eq!(mse, [1.0; 5]);
    assert_eq!(avg, 1.0);
    let single = [0.3, -1.2, 2.0, 0.0, 0.7];
    assert_eq!(mean_value_baseline(&[single]).unwrap().predict(), single);
    assert!(mean_value_baseline(&[]).is_err());
}

proptest! {
    #[test]
    fn baseline_mse_is_second_moment_about_train_mean(
        train in proptest::collection::vec(proptest::array::uniform5(-3.0f64..3.0), 1..20),
        test in proptest::collection::vec(proptest::array::uniform5(-3.0f64..3.0), 1..20),
    ) {
        let b = mean_value_baseline(&train).unwrap();
        let (mse, _) = trait_mse(&test.iter().map(|l| (b.predict(), *l)).collect::<Vec<_>>());
        for k in 0..5 {
            let m = train.iter().map(|l| l[k]).sum::<f64>() / train.len() as f64;
            let mu = test.iter().map(|l| l[k]).sum::<f64>() / test.len() as f64;
            let var = test.iter().map(|l| (l[k] - mu).powi(2)).sum::<f64>() / test.len() as f64;
            prop_assert!((mse[k] - (var + (mu - m).powi(2))).abs() < 1e-12);
        }
    }
}

#[test]
fn subject_aggregation_is_the_model_median() {
    let shared: fn(&[Tensor]) -> crate::model::Result<Tensor> = aggregate_subject;
    assert!(std::ptr::fn_addr_eq(SUBJECT_AGGREGATOR, shared));
}

#[test]
fn config_roundtrip_and_validation() {
    let cfg = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let parsed = ExperimentConfig::from_toml("seed = 4\nscenario = \"B\"\ntasks = [\"Lego\"]\n[train]\nepochs = 3\n").unwrap();
    assert_eq!((parsed.seed, parsed.scenario, parsed.tasks.clone(), parsed.train.epochs), (4, Scenario::B, vec![Task::Lego], 3));
    assert!(ExperimentConfig::from_toml("tasks = []").is_err());
    assert!(ExperimentConfig::from_toml("scenario = \"XL\"").is_err());
    assert!(ExperimentConfig::from_toml("[train]\nbatch_size = 0").is_err());
    let mut cfg = ExperimentConfig::default();
    cfg.paths.split = Some("split.csv".into());
    cfg.resolve_paths(Path::new("/base"));
    assert_eq!(cfg.paths.corpus, PathBuf::from("/base/corpus"));
    assert_eq!(cfg.manifest_path(), PathBuf::from("/base/corpus/manifest.toml"));
    assert_eq!(cfg.paths.split, Some(PathBuf::from("/base/split.csv")));
}

fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        synthetic: SyntheticSessionSpec {
            participants: 12,
            group_size: 2,
            sessions_per_participant: 1,
            tasks: vec![Task::Talk],
            frame_count: 64,
            frame_size: 16,
            ..Default::default()
        },
        train: TrainConfig { batch_size: 4, epochs: 1, validations_per_epoch: 2, ..Default::default() },
        ..Default::default()
    };
    cfg.split.weights.target_ratios = [0.6, 0.2, 0.2];
    generate_synthetic(&cfg.synthetic, cfg.seed).unwrap().write(&dir.join("corpus")).unwrap();
    cfg.resolve_paths(dir);
    cfg
}

#[test]
fn end_to_end_on_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = prepare_split(&cfg, Task::Talk).unwrap();
    assert!(!data.train.is_empty() && !data.val.is_empty() && !data.test.is_empty());
    let sessions = |v: &[PreparedSample]| v.iter().map(|s| s.session.clone()).collect::<std::collections::BTreeSet<_>>();
    assert!(sessions(&data.train).is_disjoint(&sessions(&data.test)));
    // One 64-frame chunk per target.
    assert!(data.train.iter().all(|s| s.chunk_index == 0));

    let start = std::time::Instant::now();
    let b = run_prepared(Scenario::B, Task::Talk, &data, &cfg, None).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    let train_labels: Vec<_> = subject_labels(&data.train).into_values().collect();
    let mean = mean_value_baseline(&train_labels).unwrap();
    let pairs: Vec<_> = subject_labels(&data.test).into_values().map(|l| (mean.predict(), l)).collect();
    assert_eq!(b.mse, trait_mse(&pairs).0);

    let run = dir.path().join("run");
    let l = run_prepared(Scenario::L, Task::Talk, &data, &cfg, Some(&run)).unwrap();
    assert!(l.mse.iter().chain([&l.avg]).all(|v| v.is_finite() && *v >= 0.0));
    assert!(run.join("best.ckpt").exists());
    let again = evaluate_checkpoint(&cfg, Task::Talk, &run.join("best.ckpt")).unwrap();
    assert_eq!(again, l);

    let report = MetricsReport { rows: vec![b, l] };
    let table = report.to_table_csv();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "scenario,Talk_O,Talk_C,Talk_E,Talk_A,Talk_N,Talk_Avg");
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 7));
    assert_eq!(report.to_csv().lines().count(), 3);
    assert_eq!(report.to_text_table().lines().count(), 4);
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.resolve_paths(dir.path());
    assert!(matches!(prepare_split(&cfg, Task::Talk), Err(HarnessError::Corpus(CorpusError::Io(_)))));

    let mut cfg = tiny_config(dir.path());
    cfg.paths.split = Some(dir.path().join("absent.csv"));
    assert!(matches!(prepare_split(&cfg, Task::Talk), Err(HarnessError::MissingSplit(_))));

    let cfg = tiny_config(dir.path());
    std::fs::remove_file(dir.path().join("corpus/sessions/S001/talk_1.vid")).unwrap();
    let err = prepare_split(&cfg, Task::Talk).unwrap_err();
    assert!(err.to_string().contains("talk_1.vid"), "{err}");
}
