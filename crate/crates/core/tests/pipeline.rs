use std::sync::OnceLock;

use kdselect_core::data::{split_corpus, LabeledSeries, WindowSample};
use kdselect_core::embed::FeatureHashEmbedder;
use kdselect_core::metrics::PerformanceVector;
use kdselect_core::model::{load_model, save_model, SelectorModel};
use kdselect_core::pipeline::*;
use kdselect_core::prune::PruneStrategy;
use kdselect_core::synth::{generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_class_windows(n: usize) -> Vec<WindowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..n)
        .map(|k| {
            let label = k % 2;
            let freq = if label == 0 { 0.2 } else { 0.9 };
            let phase: f64 = rng.random_range(0.0..6.0);
            let values = (0..16).map(|t| (t as f64 * freq + phase).sin() + rng.random_range(-0.2..0.2)).collect();
            let mut perf = vec![0.05; 6];
            perf[label] = 0.9;
            WindowSample {
                series_id: format!("w{k}"),
                offset: 0,
                values,
                hard_label: Some(label),
                performance: Some(PerformanceVector::new(perf)),
                metadata_text: format!("dataset family{label} with period {}", if label == 0 { 31 } else { 7 }),
            }
        })
        .collect()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        window: 16,
        mlp_hidden: vec![32, 16],
        proj_hidden: 16,
        proj_dim: 8,
        text_dim: 16,
        batch_size: 8,
        epochs: 30,
        ..TrainConfig::default()
    }
}

fn two_class_samples(config: &TrainConfig) -> Vec<TrainSample> {
    prepare_samples(&two_class_windows(64), config, &FeatureHashEmbedder::new(config.text_dim)).unwrap()
}

fn epoch_losses(events: &[TrainEvent]) -> Vec<kdselect_core::losses::LossBreakdown> {
    events
        .iter()
        .filter_map(|e| match e {
            TrainEvent::Epoch { loss, .. } => Some(*loss),
            _ => None,
        })
        .collect()
}

#[test]
fn cross_entropy_halves_on_separable_classes() {
    let config = small_config();
    let mut events: Vec<TrainEvent> = Vec::new();
    train(&two_class_samples(&config), &config, &mut events).unwrap();
    let ce: Vec<f64> = epoch_losses(&events).iter().map(|l| l.ce).collect();
    assert_eq!(ce.len(), 30);
    assert!(ce[29] <= 0.5 * ce[0], "{} -> {}", ce[0], ce[29]);
}

#[test]
fn zero_ratio_pruning_matches_full_training() {
    let base = TrainConfig {
        prune_ratio: 0.0,
        epochs: 8,
        ..small_config()
    };
    let samples = two_class_samples(&base);
    let run = |strategy| {
        let mut c = base.clone();
        c.flags.pruning = strategy;
        let mut events: Vec<TrainEvent> = Vec::new();
        let out = train(&samples, &c, &mut events).unwrap();
        let losses: Vec<f64> = events
            .iter()
            .filter_map(|e| match e {
                TrainEvent::Batch { loss, .. } => Some(loss.total),
                _ => None,
            })
            .collect();
        (out.model.params, losses, out.kept_per_epoch)
    };
    let none = run(PruneStrategy::None);
    assert_eq!(none, run(PruneStrategy::InfoBatch));
    assert_eq!(none, run(PruneStrategy::Pa));
}

#[derive(Default)]
struct Recorder {
    events: Vec<TrainEvent>,
    checkpoints: Vec<SelectorModel>,
}

impl TrainObserver for Recorder {
    fn on_event(&mut self, event: &TrainEvent) {
        self.events.push(event.clone());
    }
    fn on_checkpoint(&mut self, _epoch: usize, model: &SelectorModel) {
        self.checkpoints.push(model.clone());
    }
}

#[test]
fn reported_batch_loss_recomputes_from_checkpoint() {
    let mut config = TrainConfig {
        epochs: 4,
        ..small_config()
    };
    config.flags.pisl = true;
    config.flags.mki = true;
    let samples = two_class_samples(&config);
    let mut rec = Recorder::default();
    train(&samples, &config, &mut rec).unwrap();
    for epoch in 1..4 {
        let model = &rec.checkpoints[epoch - 1];
        let ledger = kdselect_core::prune::LossLedger::new(samples.len());
        let (plan, _) = plan_epoch(&config, &ledger, None, epoch).unwrap();
        let batches = epoch_schedule(&config, &plan, epoch);
        let ids = &batches[0];
        let out = batch_loss(model, &samples, ids, &vec![1.0; ids.len()], &config, None).unwrap();
        let reported = rec
            .events
            .iter()
            .find_map(|e| match e {
                TrainEvent::Batch { epoch: e, batch: 0, loss, .. } if *e == epoch => Some(*loss),
                _ => None,
            })
            .unwrap();
        assert!((out.loss.total - reported.total).abs() < 1e-6);
        assert!((out.loss.mki - reported.mki).abs() < 1e-6);
    }
}

#[test]
fn event_stream_round_trips_as_ndjson() {
    let config = TrainConfig {
        epochs: 2,
        ..small_config()
    };
    let mut events: Vec<TrainEvent> = Vec::new();
    train(&two_class_samples(&config), &config, &mut events).unwrap();
    for e in &events {
        let line = e.to_ndjson();
        assert!(!line.contains('\n'));
        let back: TrainEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(&back, e);
    }
}

struct Fixture {
    train_set: Vec<LabeledSeries>,
    test_set: Vec<LabeledSeries>,
    table: ScoreTable,
    model: SelectorModel,
    config: TrainConfig,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = generate(&SynthConfig {
            per_family: 4,
            ..SynthConfig::default()
        });
        let (train_set, test_set) = split_corpus(&corpus, 0.5, 3).unwrap();
        let config = TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        };
        let labeled = label_corpus(&train_set, config.window, config.stride(), &config.zoo).unwrap();
        let embedder = config.embedder().unwrap();
        let samples = prepare_samples(&labeled.labeled, &config, embedder.as_ref()).unwrap();
        let model = train(&samples, &config, &mut NullObserver).unwrap().model;
        let table = score_table(&test_set, config.window, config.stride(), &config.zoo).unwrap();
        Fixture {
            train_set,
            test_set,
            table,
            model,
            config,
        }
    })
}

#[test]
fn report_is_deterministic() {
    let f = fixture();
    let a = evaluate_with_table(&f.model, &f.test_set, &f.table, f.config.stride()).unwrap();
    let b = evaluate_selector(&f.model, &f.test_set, f.config.stride(), &f.config.zoo).unwrap();
    assert_eq!(a, b);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    write_report_csv(&mut x, &a).unwrap();
    write_report_csv(&mut y, &b).unwrap();
    assert_eq!(x, y);
    let text = String::from_utf8(x).unwrap();
    assert_eq!(text.lines().count(), a.rows.len() + 2);
    assert!(text.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn oracle_dominates_and_random_matches_detector_average() {
    let f = fixture();
    let report = evaluate_with_table(&f.model, &f.test_set, &f.table, f.config.stride()).unwrap();
    let oracle = report.mean_auc_oracle;
    for (name, mean) in &report.mean_auc_by_detector {
        assert!(oracle >= *mean, "{name}");
    }
    assert!(oracle >= report.mean_auc_selected);
    for row in &report.rows {
        assert!(row.auc_oracle >= row.auc_selected);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = f.table.series_ids.len();
    let draws = 4000;
    let random = (0..draws)
        .map(|_| {
            let choices: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
            evaluate_choices(&f.table, &choices)
        })
        .sum::<f64>()
        / draws as f64;
    let avg = f.table.detector_means().iter().sum::<f64>() / 6.0;
    assert!((random - avg).abs() < 0.01, "{random} vs {avg}");
    // the oracle choice through the same path
    let oracle_choices: Vec<usize> = (0..n).map(|s| f.table.oracle(s).0).collect();
    assert!((evaluate_choices(&f.table, &oracle_choices) - oracle).abs() < 1e-12);
}

#[test]
fn selector_beats_worst_single_detector() {
    let f = fixture();
    let report = evaluate_with_table(&f.model, &f.test_set, &f.table, f.config.stride()).unwrap();
    let worst = report.mean_auc_by_detector.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    assert!(report.mean_auc_selected > worst, "{} vs {worst}", report.mean_auc_selected);
}

#[test]
fn selection_ignores_logit_scale_and_survives_save() {
    let f = fixture();
    let mut scaled = f.model.clone();
    for name in ["cls.weight", "cls.bias"] {
        let t = scaled.params.tensors.iter_mut().find(|t| t.name == name).unwrap();
        t.data.iter_mut().for_each(|v| *v *= 3.5);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.kdsl");
    save_model(&f.model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    for series in f.test_set.iter().chain(&f.train_set) {
        let a = select(&f.model, series, f.config.stride()).unwrap();
        assert_eq!(a, select(&scaled, series, f.config.stride()).unwrap());
        assert_eq!(a, select(&loaded, series, model_stride(&loaded)).unwrap());
    }
}
