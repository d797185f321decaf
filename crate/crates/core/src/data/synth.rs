//! Seasonal, heteroskedastic benchmark series with spikes and analytically
//! known conditional quantiles.
//!
//! `y_t = a + b sin(2 pi t / P) + m e_t + eps_t` with
//! `eps_t = sigma_t z_t`, `sigma_t = s (1 + 0.5 |sin(2 pi t / P)|)` and
//! `z_t` standard normal or unit-scale Student-t. The spike size is
//! `m = spike_ratio * b` and the event indicator `e_t` is published as a
//! future-known covariate together with the seasonal phase.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

use super::{ColumnKind, ColumnSpec, ColumnTag, Dataset, FeatureLayout, SchemaDescriptor, SeriesRecord};
use crate::error::{MqError, Result};
use crate::rng;
use crate::stats::{normal_ppf, student_t_ppf};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    StudentT { dof: f64 },
}

impl NoiseKind {
    fn ppf(self, q: f64) -> Result<f64> {
        match self {
            NoiseKind::Gaussian => normal_ppf(q),
            NoiseKind::StudentT { dof } => student_t_ppf(q, dof),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_series: usize,
    pub t_total: usize,
    pub period: usize,
    pub noise: NoiseKind,
    pub level: (f64, f64),
    pub amplitude: (f64, f64),
    pub noise_scale: (f64, f64),
    /// Multiplies every series' noise scale.
    pub noise_multiplier: f64,
    pub spike_prob: f64,
    pub spike_ratio: f64,
    /// Levels recorded in the oracle sidecar.
    pub quantiles: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_series: 200,
            t_total: 120,
            period: 52,
            noise: NoiseKind::Gaussian,
            level: (8.0, 12.0),
            amplitude: (1.0, 3.0),
            noise_scale: (0.3, 1.0),
            noise_multiplier: 1.0,
            spike_prob: 0.04,
            spike_ratio: 2.0,
            quantiles: vec![0.1, 0.5, 0.9],
        }
    }
}

/// True conditional distribution of one series.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleQuantiles {
    pub series_id: String,
    pub start: i64,
    pub level: f64,
    pub amplitude: f64,
    pub spike_size: f64,
    /// Noiseless path `a + b sin + spike`.
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub noise: NoiseKind,
}

impl OracleQuantiles {
    /// Conditional quantile at row `i`.
    pub fn quantile(&self, i: usize, q: f64) -> Result<f64> {
        Ok(self.mean[i] + self.sigma[i] * self.noise.ppf(q)?)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub config: SynthConfig,
    pub dataset: Dataset,
    pub schema: SchemaDescriptor,
    /// Same order as `dataset.series`.
    pub oracle: Vec<OracleQuantiles>,
}

pub fn synthesize_benchmark(seed: u64, n_series: usize, t_total: usize) -> Result<SyntheticBenchmark> {
    synthesize(
        seed,
        &SynthConfig {
            n_series,
            t_total,
            ..SynthConfig::default()
        },
    )
}

pub fn synthesize(seed: u64, cfg: &SynthConfig) -> Result<SyntheticBenchmark> {
    if cfg.n_series == 0 || cfg.t_total == 0 || cfg.period < 2 {
        return Err(MqError::arg("synthetic benchmark needs series, steps and period >= 2"));
    }
    let future_names = ["spike", "season_sin", "season_cos"];
    let schema = SchemaDescriptor {
        columns: future_names
            .iter()
            .map(|n| ColumnSpec {
                name: n.to_string(),
                tag: ColumnTag::Future,
                kind: ColumnKind::Real,
            })
            .collect(),
    };
    let layout = FeatureLayout {
        hist: Vec::new(),
        future: future_names.iter().map(|s| s.to_string()).collect(),
        ..FeatureLayout::default()
    };
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let student = match cfg.noise {
        NoiseKind::StudentT { dof } => Some(StudentT::new(dof).map_err(|e| MqError::arg(e.to_string()))?),
        NoiseKind::Gaussian => None,
    };
    let width = (cfg.n_series - 1).to_string().len().max(3);

    let mut series = Vec::with_capacity(cfg.n_series);
    let mut oracle = Vec::with_capacity(cfg.n_series);
    for i in 0..cfg.n_series {
        let id = format!("s{i:0width$}");
        let mut prng = rng::indexed_stream(seed, "synth/params", i as u64);
        let a = prng.random_range(cfg.level.0..=cfg.level.1);
        let b = prng.random_range(cfg.amplitude.0..=cfg.amplitude.1);
        let s = prng.random_range(cfg.noise_scale.0..=cfg.noise_scale.1) * cfg.noise_multiplier;
        let m = cfg.spike_ratio * b;
        let mut erng = rng::indexed_stream(seed, "synth/events", i as u64);
        let mut nrng = rng::indexed_stream(seed, "synth/noise", i as u64);

        let mut y = Vec::with_capacity(cfg.t_total);
        let mut x_future = Vec::with_capacity(cfg.t_total);
        let mut mean = Vec::with_capacity(cfg.t_total);
        let mut sigma = Vec::with_capacity(cfg.t_total);
        for step in 0..cfg.t_total {
            let t = (step + 1) as f64;
            let phase = 2.0 * PI * t / cfg.period as f64;
            let spike = if erng.random::<f64>() < cfg.spike_prob { 1.0 } else { 0.0 };
            let mu = a + b * phase.sin() + m * spike;
            let sd = s * (1.0 + 0.5 * phase.sin().abs());
            let z = match &student {
                Some(d) => d.sample(&mut nrng),
                None => std_normal.sample(&mut nrng),
            };
            y.push(mu + sd * z);
            mean.push(mu);
            sigma.push(sd);
            x_future.push(vec![spike, phase.sin(), phase.cos()]);
        }
        series.push(SeriesRecord {
            id: id.clone(),
            start: 1,
            y,
            x_hist: vec![Vec::new(); cfg.t_total],
            x_future,
            static_real: Vec::new(),
            static_cat: Vec::new(),
        });
        oracle.push(OracleQuantiles {
            series_id: id,
            start: 1,
            level: a,
            amplitude: b,
            spike_size: m,
            mean,
            sigma,
            noise: cfg.noise,
        });
    }
    Ok(SyntheticBenchmark {
        config: cfg.clone(),
        dataset: Dataset::new(layout, series)?,
        schema,
        oracle,
    })
}

/// Sidecar CSV: `series_id, t, mean, sigma, q<level>...`.
pub fn write_oracle_csv(bench: &SyntheticBenchmark, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string(), "t".into(), "mean".into(), "sigma".into()];
    header.extend(bench.config.quantiles.iter().map(|q| format!("q{q}")));
    w.write_record(&header)?;
    for o in &bench.oracle {
        for i in 0..o.mean.len() {
            let mut rec = vec![
                o.series_id.clone(),
                (o.start + i as i64).to_string(),
                o.mean[i].to_string(),
                o.sigma[i].to_string(),
            ];
            for &q in &bench.config.quantiles {
                rec.push(o.quantile(i, q)?.to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_median_is_mean_path() {
        let b = synthesize_benchmark(1, 3, 60).unwrap();
        for o in &b.oracle {
            for i in 0..o.mean.len() {
                assert_eq!(o.quantile(i, 0.5).unwrap(), o.mean[i]);
            }
        }
    }

    #[test]
    fn oracle_p90_coverage_monte_carlo() {
        let cfg = SynthConfig {
            n_series: 1000,
            t_total: 100,
            ..SynthConfig::default()
        };
        let b = synthesize(11, &cfg).unwrap();
        let mut covered = 0usize;
        let mut total = 0usize;
        for (s, o) in b.dataset.series.iter().zip(&b.oracle) {
            for i in 0..s.len() {
                total += 1;
                if s.y[i] <= o.quantile(i, 0.9).unwrap() {
                    covered += 1;
                }
            }
        }
        assert_eq!(total, 100_000);
        let rate = covered as f64 / total as f64;
        assert!((0.897..=0.903).contains(&rate), "coverage {rate}");
    }

    #[test]
    fn spike_indicator_aligns_with_spike() {
        let cfg = SynthConfig {
            n_series: 5,
            t_total: 200,
            spike_prob: 0.1,
            ..SynthConfig::default()
        };
        let b = synthesize(4, &cfg).unwrap();
        for (s, o) in b.dataset.series.iter().zip(&b.oracle) {
            let mut seen = 0;
            for i in 0..s.len() {
                let phase = 2.0 * PI * (i + 1) as f64 / 52.0;
                let spike = s.x_future[i][0];
                let smooth = o.level + o.amplitude * phase.sin();
                assert_eq!(o.mean[i], smooth + o.spike_size * spike);
                assert!((s.x_future[i][1] - phase.sin()).abs() < 1e-12);
                if spike == 1.0 {
                    seen += 1;
                }
            }
            assert!(seen > 0);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = synthesize_benchmark(9, 4, 30).unwrap();
        let b = synthesize_benchmark(9, 4, 30).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = synthesize_benchmark(10, 4, 30).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn oracle_sidecar_has_levels() {
        let b = synthesize_benchmark(2, 2, 5).unwrap();
        let mut out = Vec::new();
        write_oracle_csv(&b, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("series_id,t,mean,sigma,q0.1,q0.5,q0.9\n"));
        assert_eq!(text.lines().count(), 11);
    }
}
