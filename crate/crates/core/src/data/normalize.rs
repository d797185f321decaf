use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Dataset, SeriesRecord};
use crate::error::{MqError, Result};

/// How targets are scaled before entering the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Per-series mean and standard deviation.
    #[default]
    Standardize,
    /// Per-series mean absolute value, no centering. Keeps nonnegative
    /// targets nonnegative, as the log-Gaussian head requires.
    MeanScale,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesNorm {
    pub center: f64,
    pub scale: f64,
}

impl SeriesNorm {
    pub const IDENTITY: SeriesNorm = SeriesNorm { center: 0.0, scale: 1.0 };

    pub fn fit(values: &[f64], mode: NormMode) -> Self {
        if values.is_empty() || mode == NormMode::Identity {
            return Self::IDENTITY;
        }
        let n = values.len() as f64;
        let floor = |s: f64| if s > 1e-8 && s.is_finite() { s } else { 1.0 };
        match mode {
            NormMode::Standardize => {
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                SeriesNorm {
                    center: mean,
                    scale: floor(var.sqrt()),
                }
            }
            NormMode::MeanScale => SeriesNorm {
                center: 0.0,
                scale: floor(values.iter().map(|v| v.abs()).sum::<f64>() / n),
            },
            NormMode::Identity => Self::IDENTITY,
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.scale + self.center
    }
}

/// Normalization fitted on the training range only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mode: NormMode,
    pub series: BTreeMap<String, SeriesNorm>,
    pub hist: Vec<SeriesNorm>,
    pub future: Vec<SeriesNorm>,
    pub static_real: Vec<SeriesNorm>,
}

impl NormalizationStats {
    /// Fits target statistics per series on rows with time `<= train_end`,
    /// and (when `scale_features`) global real-feature statistics on the
    /// same rows.
    pub fn fit(dataset: &Dataset, train_end: Option<i64>, mode: NormMode, scale_features: bool) -> Self {
        let series = dataset
            .series
            .iter()
            .map(|s| (s.id.clone(), SeriesNorm::fit(&s.y[..s.prefix_len(train_end)], mode)))
            .collect();
        let layout = &dataset.layout;
        let column_stats = |width: usize, get: &dyn Fn(&SeriesRecord, usize) -> Vec<f64>| -> Vec<SeriesNorm> {
            (0..width)
                .map(|j| {
                    if !scale_features {
                        return SeriesNorm::IDENTITY;
                    }
                    let vals: Vec<f64> = dataset.series.iter().flat_map(|s| get(s, j)).collect();
                    SeriesNorm::fit(&vals, NormMode::Standardize)
                })
                .collect()
        };
        let hist = column_stats(layout.hist.len(), &|s, j| {
            s.x_hist[..s.prefix_len(train_end)].iter().map(|r| r[j]).collect()
        });
        let future = column_stats(layout.future.len(), &|s, j| {
            s.x_future[..s.prefix_len(train_end)].iter().map(|r| r[j]).collect()
        });
        let static_real = column_stats(layout.static_real.len(), &|s, j| vec![s.static_real[j]]);
        NormalizationStats {
            mode,
            series,
            hist,
            future,
            static_real,
        }
    }

    pub fn target(&self, series_id: &str) -> Result<SeriesNorm> {
        self.series
            .get(series_id)
            .copied()
            .ok_or_else(|| MqError::Contract(format!("normalization not fitted for series {series_id}")))
    }

    /// Replaces the target statistics of one series, e.g. when refitting on
    /// the history before a forecast creation time.
    pub fn with_series(mut self, id: &str, norm: SeriesNorm) -> Self {
        self.series.insert(id.to_string(), norm);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_series_gets_unit_scale() {
        let n = SeriesNorm::fit(&[3.0, 3.0, 3.0], NormMode::Standardize);
        assert_eq!(n, SeriesNorm { center: 3.0, scale: 1.0 });
        let m = SeriesNorm::fit(&[2.0, -4.0], NormMode::MeanScale);
        assert_eq!(m, SeriesNorm { center: 0.0, scale: 3.0 });
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(values in prop::collection::vec(-1e3f64..1e3, 1..50), probe in -1e3f64..1e3) {
            for mode in [NormMode::Standardize, NormMode::MeanScale, NormMode::Identity] {
                let n = SeriesNorm::fit(&values, mode);
                prop_assert!(n.scale > 0.0);
                let back = n.denormalize(n.normalize(probe));
                prop_assert!((back - probe).abs() <= 1e-12 * probe.abs().max(1.0));
            }
        }
    }
}
