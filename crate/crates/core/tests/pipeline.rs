use edgecl::autodiff::Mat;
use edgecl::coreset::KnowledgeCoreSet;
use edgecl::csi_sim::SceneSpec;
use edgecl::harness::{
    compute_metrics, curves_csv, evaluate, export_results, load_results, run_sequential, run_trials, Classifier,
    ExperimentConfig, LabeledInput, ModelShape,
};
use edgecl::model::{ModelConfig, ModelParams, ProbVector};
use edgecl::preprocess::PreprocessedSequence;
use edgecl::storage::DatasetMeta;
use edgecl::train::{train_epochs, Period, Sample, TrainConfig, Variant};

fn tiny(n_domains: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.n_domains = n_domains;
    cfg.n_classes = 3;
    cfg.n_per_class = 6;
    cfg.n_trials = 2;
    cfg.scene = SceneSpec {
        n_subcarriers: 4,
        packet_rate: 5.0,
        ..cfg.scene
    };
    cfg.temporal_len = 4;
    cfg.model = ModelShape {
        mlp_hidden: 8,
        width: 8,
        heads: 2,
        n_blocks: 1,
        dropout: 0.1,
    };
    cfg.train.iterations = 20;
    cfg.train.batch_size = 8;
    cfg.train.replay_batch = 8;
    cfg.budget = 2;
    cfg.importance_samples = 6;
    cfg
}

#[test]
fn single_domain_has_one_cell_and_no_forgetting() {
    let out = run_sequential(&tiny(1), Variant::Proposed, 0).unwrap();
    assert_eq!(out.record.matrix.rows.len(), 1);
    assert_eq!(out.record.matrix.rows[0].len(), 1);
    assert_eq!(out.record.metrics.forgetting, 0.0);
}

#[test]
fn only_exemplars_survive_a_period() {
    let cfg = tiny(3);
    for v in [Variant::Proposed, Variant::ErHerding, Variant::BlNondistill, Variant::BlErRand] {
        let out = run_sequential(&cfg, v, 0).unwrap();
        for snap in &out.record.inventory {
            assert!(snap.raw_domains.is_empty(), "{v} kept raw data after period {}", snap.period);
            assert_eq!(snap.exemplars.len(), snap.period + 1);
            assert!(snap.exemplars.values().all(|&n| n == cfg.n_classes * cfg.budget));
        }
        let core = &out.coreset;
        assert_eq!(core.len(), 3 * cfg.n_classes * cfg.budget);
        for e in &core.entries {
            assert!((e.label.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let hard = e.label.as_slice().iter().filter(|&&p| p == 1.0).count() == 1;
            match v {
                Variant::Proposed => assert_eq!(e.eta, cfg.eta),
                _ => assert!(hard && e.eta == 1.0 && e.label.argmax() == e.class),
            }
        }
    }
    let cum = run_sequential(&cfg, Variant::BlCumulative, 0).unwrap();
    assert_eq!(cum.record.inventory.last().unwrap().raw_domains, vec![0, 1, 2]);
    let ft = run_sequential(&cfg, Variant::BlFt, 0).unwrap();
    assert!(ft.coreset.is_empty());
    assert!(ft.record.inventory.iter().all(|s| s.raw_domains.is_empty()));
}

#[test]
fn importance_variants_run() {
    let cfg = tiny(2);
    for v in [Variant::PrEwc, Variant::PrMas] {
        let out = run_sequential(&cfg, v, 1).unwrap();
        assert!(out.record.metrics.average_accuracy.is_finite());
        assert!(out.coreset.is_empty());
    }
}

#[test]
fn cumulative_retains_first_domain_better_than_fine_tuning() {
    let mut cfg = tiny(2);
    cfg.variants = vec![Variant::BlFt, Variant::BlCumulative];
    cfg.n_per_class = 10;
    cfg.scene.packet_rate = 10.0;
    cfg.train.iterations = 150;
    cfg.train.learning_rate = 3e-3;
    let bundle = run_trials(&cfg, &[0, 1, 2, 3, 4]).unwrap();
    let mut wins = 0;
    for t in 0..5 {
        let r = |v| bundle.runs.iter().find(|r| r.variant == v && r.trial == t).unwrap().matrix.rows[1][0];
        if r(Variant::BlCumulative) >= r(Variant::BlFt) {
            wins += 1;
        }
    }
    assert!(wins >= 4, "cumulative retained domain 1 in only {wins}/5 seeds");
}

#[test]
fn export_is_deterministic_and_consistent() {
    let mut cfg = tiny(3);
    cfg.variants = vec![Variant::BlFt, Variant::ErKmeans];
    let bundle = run_trials(&cfg, &[0, 1]).unwrap();
    assert!(bundle.failures.is_empty());
    let dir = tempfile::tempdir().unwrap();
    export_results(&bundle, dir.path()).unwrap();
    let first = std::fs::read(dir.path().join("results.json")).unwrap();
    export_results(&bundle, dir.path()).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("results.json")).unwrap());

    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + cfg.variants.len());
    let curves = curves_csv(&bundle);
    assert_eq!(curves.lines().count(), 1 + 2 * 2 * (3 * 4 / 2));
    for v in ["bl_ft", "er_kmeans"] {
        for t in 0..2 {
            assert!(dir.path().join(format!("matrix_{v}_{t}.csv")).exists());
        }
    }

    let back = load_results(dir.path()).unwrap();
    assert_eq!(back, bundle);
    for r in &back.runs {
        assert_eq!(compute_metrics(&r.matrix).unwrap(), r.metrics);
    }

    let again = run_trials(&cfg, &[1]).unwrap();
    assert_eq!(again.runs, bundle.restrict_trials(&[1]).runs);
}

#[test]
fn coreset_persists() {
    let cfg = tiny(2);
    let out = run_sequential(&cfg, Variant::Proposed, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let scene = cfg.scene.build().unwrap();
    let meta = DatasetMeta {
        domain_id: 0,
        n_classes: cfg.n_classes,
        l_h: scene.layout().len(),
        layout: scene.layout(),
        duration: scene.duration,
        n_min: 0,
        n_max: 0,
        seed: cfg.data_seed,
        user_id: 0,
        scene_hash: scene.hash_hex(),
        entry_count: out.coreset.len(),
        endianness: "little".into(),
    };
    out.coreset.save(dir.path(), &meta).unwrap();
    let back = KnowledgeCoreSet::load(dir.path()).unwrap();
    assert_eq!(back.len(), out.coreset.len());
    for (a, b) in back.entries.iter().zip(&out.coreset.entries) {
        assert_eq!((a.domain, a.class, a.eta), (b.domain, b.class, b.eta));
        for (p, q) in a.label.as_slice().iter().zip(b.label.as_slice()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
    let mut dup = back.clone();
    let again = back.entries[..cfg.n_classes * cfg.budget].to_vec();
    assert!(dup.update_knowledge(0, again).is_err());
}

#[test]
fn separable_toy_loss_drops() {
    let cfg = ModelConfig {
        input_width: 3,
        mlp_hidden: 8,
        width: 8,
        heads: 2,
        n_blocks: 1,
        n_classes: 2,
        dropout: 0.0,
    };
    let mut params = ModelParams::init(cfg, 4).unwrap();
    let data: Vec<Sample> = (0..40)
        .map(|i| {
            let c = i % 2;
            let s = if c == 0 { -1.0 } else { 1.0 };
            let jitter = (i as f64 * 0.37).sin() * 0.2;
            let x = Mat::from_vec(2, 3, vec![s + jitter, 0.5, -s, s, jitter, 0.3]);
            let mut t = vec![0.0; 2];
            t[c] = 1.0;
            Sample::new(PreprocessedSequence { x, temporal_len: 0 }, t)
        })
        .collect();
    let tc = TrainConfig {
        learning_rate: 0.01,
        iterations: 200,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let period = Period {
        data: &data,
        replay: &[],
        importance: None,
        use_sam: true,
    };
    let trace = train_epochs(&mut params, &period, &tc).unwrap();
    let first = trace[0].loss;
    let last = trace[trace.len() - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

struct Uniform(usize);

impl Classifier for Uniform {
    fn predict(&mut self, _: &PreprocessedSequence) -> edgecl::Result<ProbVector> {
        Ok(ProbVector::uniform(self.0))
    }
}

#[test]
fn uniform_predictor_is_at_chance() {
    // ties go to class 0, so accuracy equals the share of class 0
    let data: Vec<LabeledInput> = (0..1000)
        .map(|i| LabeledInput {
            x: PreprocessedSequence {
                x: Mat::zeros(1, 1),
                temporal_len: 0,
            },
            label: (i * 7919) % 10,
        })
        .collect();
    let acc = evaluate(&mut Uniform(10), &data).unwrap();
    assert!((acc - 0.1).abs() <= 0.03);
    assert!(evaluate(&mut Uniform(10), &[]).is_err());
}
