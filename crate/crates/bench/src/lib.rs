//! Fixtures shared by the benchmarks.

use mqrnn_core::data::{synthesize_benchmark, SyntheticBenchmark};
use mqrnn_core::training::TrainingSample;
use mqrnn_core::{EncoderKind, EncoderSpec, ModelSpec, MqModel, NormalizationStats, Result, Tensor};

/// Deterministic pseudo-random matrix.
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..rows * cols)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// A benchmark model with its dataset, statistics and first training sample.
pub struct Fixture {
    pub bench: SyntheticBenchmark,
    pub stats: NormalizationStats,
    pub model: MqModel,
    pub sample: TrainingSample,
}

pub fn fixture(kind: EncoderKind, n_series: usize, t_total: usize, hidden: usize, horizon: usize) -> Result<Fixture> {
    let bench = synthesize_benchmark(1, n_series, t_total)?;
    let spec = ModelSpec {
        encoder: EncoderSpec {
            kind,
            hidden,
            depth: 13,
            layers: 3,
        },
        horizon,
        features: bench.dataset.layout.clone(),
        ..ModelSpec::default()
    };
    let stats = NormalizationStats::fit(&bench.dataset, None, spec.normalization, false);
    let model = MqModel::new(spec, 1)?;
    let sample = TrainingSample::new(&model, &bench.dataset.series[0], &stats, None)?.expect("series long enough");
    Ok(Fixture { bench, stats, model, sample })
}
