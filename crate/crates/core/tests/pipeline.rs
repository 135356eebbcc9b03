use ofcl::config::RunConfig;
use ofcl::eval::{self, AccuracyMode, MetricsReport};
use ofcl::features::{BackboneKind, BackboneSpec};
use ofcl::mob::MarginConfig;
use ofcl::stream::{self, StreamSpec};
use ofcl::trainer::{ItaConfig, Learner, TrainConfig};
use ofcl::{pipeline, KnowledgeSpace, Label, TokenBank};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.stream.num_tasks = 2;
    cfg.stream.base_samples_per_class = 20;
    cfg.train.epochs = 5;
    cfg
}

#[test]
fn run_directory_artifacts_parse() {
    let cfg = small_config();
    let out = pipeline::run(&cfg, &pipeline::load_episodes(&cfg).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pipeline::write_run(dir.path(), &cfg, &out).unwrap();

    let read = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap();
    let report = MetricsReport::parse(&read("metrics.txt")).unwrap();
    assert_eq!(report.acc_per_task.len(), 3);

    let records = eval::parse_records::<f64>(&read("records.csv")).unwrap();
    let again = eval::report_from_records(&records, AccuracyMode::Closed, cfg.tpr_target).unwrap();
    assert_eq!(again.render(), read("metrics.txt"));

    for t in 0..3 {
        KnowledgeSpace::parse_dump(&read(&pipeline::space_dump_name(t))).unwrap();
        TokenBank::parse_dump(&read(&pipeline::token_dump_name(t))).unwrap();
    }
    KnowledgeSpace::parse_dump(&read("ks_final.txt")).unwrap();
    let log = read("loss_log.csv");
    assert_eq!(log.lines().count(), 1 + 3 * cfg.train.epochs);
    assert!(read("projection.csv").starts_with("session,kind,label,x,y,radius\n"));

    let mut back = RunConfig::default();
    back.apply_text(&read("config.txt")).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn manifest_stream_matches_generated_stream() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let episodes = stream::generate(&cfg.stream_spec()).unwrap();
    let manifest = stream::write_stream(dir.path(), &episodes).unwrap();
    let from_files = RunConfig {
        manifest: Some(manifest),
        ..cfg.clone()
    };
    let a = pipeline::run(&cfg, &pipeline::load_episodes(&cfg).unwrap()).unwrap();
    let b = pipeline::run(&from_files, &pipeline::load_episodes(&from_files).unwrap()).unwrap();
    assert_eq!(
        eval::render_records(&a.records),
        eval::render_records(&b.records)
    );
}

#[test]
fn records_mark_next_task_classes_as_open() {
    let cfg = small_config();
    let out = pipeline::run(&cfg, &pipeline::load_episodes(&cfg).unwrap()).unwrap();
    let spec = cfg.stream_spec();
    for r in &out.records {
        let class = r.truth.class().raw() as usize;
        let trained_through = if class < spec.num_base_classes {
            0
        } else {
            1 + (class - spec.num_base_classes) / spec.n_way
        };
        assert_eq!(r.truth.is_open(), trained_through > r.task, "{r:?}");
    }
    assert!(out.records.iter().all(|r| r.task < 3));
}

#[test]
fn single_precision_learner_trains_and_detects() {
    let spec = StreamSpec::<f32> {
        num_tasks: 1,
        base_samples_per_class: 20,
        num_base_classes: 3,
        ..StreamSpec::default()
    };
    let episodes = stream::generate(&spec).unwrap();
    let backbone = BackboneSpec {
        kind: BackboneKind::RandomProjection,
        input_dim: spec.input_dim,
        output_dim: 32,
        seed: 1,
    };
    let margin = MarginConfig::new(0.5f32, 10.0, 10.0, 0.01, 0.05).unwrap();
    let train = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(backbone, ItaConfig::default(), margin, train).unwrap();
    for (t, ep) in episodes.iter().enumerate() {
        learner.train_task(t, &ep.labeled_train().unwrap()).unwrap();
    }
    let test = &episodes[1].test;
    let hits = test
        .iter()
        .filter(|s| {
            let h = learner.embed(&s.features).unwrap();
            learner.known_detection(&h).unwrap().nearest_label == s.label.unwrap()
        })
        .count();
    assert!(hits as f32 / test.len() as f32 > 0.9);
    assert_eq!(learner.space().known().count(), 6);
    assert!(learner.space().sphere(Label::class(5)).is_some());
}
