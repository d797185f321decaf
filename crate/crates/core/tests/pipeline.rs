use mqrnn_core::checkpoint;
use mqrnn_core::data::{export_csv, ingest_reader, synthesize_benchmark};
use mqrnn_core::evaluation::{interpolate_percentiles, predict_all, read_grids, write_grids};
use mqrnn_core::{train, EncoderKind, EncoderSpec, ModelSpec, MqModel, NormalizationStats, TrainingConfig};
use proptest::prelude::*;

fn small_spec(kind: EncoderKind, layout: mqrnn_core::FeatureLayout) -> ModelSpec {
    ModelSpec {
        encoder: EncoderSpec {
            kind,
            hidden: 6,
            depth: 4,
            layers: 2,
        },
        horizon: 4,
        features: layout,
        ..ModelSpec::default()
    }
}

#[test]
fn csv_round_trip_preserves_dataset() {
    let bench = synthesize_benchmark(4, 5, 30).unwrap();
    let mut csv = Vec::new();
    export_csv(&bench.dataset, &bench.schema, &mut csv).unwrap();
    let back = ingest_reader(csv.as_slice(), &bench.schema).unwrap();
    assert_eq!(back.series.len(), bench.dataset.series.len());
    for (a, b) in back.series.iter().zip(&bench.dataset.series) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.y, b.y);
        assert_eq!(a.x_future, b.x_future);
    }
}

#[test]
fn shuffled_rows_ingest_identically() {
    let bench = synthesize_benchmark(4, 3, 20).unwrap();
    let mut csv = Vec::new();
    export_csv(&bench.dataset, &bench.schema, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    let shuffled = format!("{header}\n{}\n", lines.join("\n"));
    let a = ingest_reader(text.as_bytes(), &bench.schema).unwrap();
    let b = ingest_reader(shuffled.as_bytes(), &bench.schema).unwrap();
    assert_eq!(a, b);
}

#[test]
fn trained_checkpoint_predicts_identically_after_reload() {
    let bench = synthesize_benchmark(6, 8, 40).unwrap();
    let spec = small_spec(EncoderKind::LstmNarx, bench.dataset.layout.clone());
    let stats = NormalizationStats::fit(&bench.dataset, Some(30), spec.normalization, false);
    let mut model = MqModel::new(spec, 3).unwrap();
    let cfg = TrainingConfig {
        epochs: 3,
        batch_size: 4,
        train_end: Some(30),
        ..TrainingConfig::default()
    };
    train(&mut model, &bench.dataset, &stats, &cfg).unwrap();

    let mut bytes = Vec::new();
    checkpoint::write_checkpoint(&model, &stats, &mut bytes).unwrap();
    let (loaded, loaded_stats) = checkpoint::read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(loaded_stats, stats);

    let a = predict_all(&model, &bench.dataset, &stats, 30, 1).unwrap();
    let b = predict_all(&loaded, &bench.dataset, &loaded_stats, 30, 2).unwrap();
    assert_eq!(a, b);

    let mut csv = Vec::new();
    write_grids(&a, &mut csv).unwrap();
    assert_eq!(read_grids(csv.as_slice()).unwrap(), a);
}

#[test]
fn every_encoder_trains_without_error() {
    let bench = synthesize_benchmark(2, 4, 30).unwrap();
    for kind in [EncoderKind::Lstm, EncoderKind::LstmNarx, EncoderKind::LstmLag, EncoderKind::Wavenet] {
        let spec = small_spec(kind, bench.dataset.layout.clone());
        let stats = NormalizationStats::fit(&bench.dataset, None, spec.normalization, false);
        let mut model = MqModel::new(spec, 1).unwrap();
        let report = train(&mut model, &bench.dataset, &stats, &TrainingConfig { epochs: 2, ..TrainingConfig::default() }).unwrap();
        assert!(report.loss_trace.iter().all(|l| l.is_finite()), "{kind:?}");
    }
}

proptest! {
    #[test]
    fn interpolation_is_monotone_between_monotone_knots(mut vals in proptest::collection::vec(-100.0f64..100.0, 5)) {
        vals.sort_by(f64::total_cmp);
        let knots = [0.01, 0.25, 0.5, 0.75, 0.99];
        let levels: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
        let out = interpolate_percentiles(&knots, &vals, &levels).unwrap();
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(out[0], vals[0]);
        prop_assert_eq!(out[98], vals[4]);
    }
}
