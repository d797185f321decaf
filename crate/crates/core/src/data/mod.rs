//! Dataset schema, ingestion, covariate construction, normalization and the
//! synthetic benchmark generator.

mod assemble;
mod features;
mod ingest;
mod normalize;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{MqError, Result};

pub use assemble::{assemble_model_inputs, assemble_targets, ModelInputs, Targets};
pub use features::{build_lag_features, event_indicators, seasonal_kernels, us_federal_holidays, Event};
pub use ingest::{export_csv, ingest, ingest_reader, ColumnKind, ColumnSpec, ColumnTag, SchemaDescriptor, MISSING_COLUMN};
pub use normalize::{NormMode, NormalizationStats, SeriesNorm};
pub use synth::{synthesize, synthesize_benchmark, write_oracle_csv, NoiseKind, OracleQuantiles, SynthConfig, SyntheticBenchmark};

/// A static categorical feature and its level vocabulary. Index 0 of the
/// embedding table is reserved for unseen levels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub levels: Vec<String>,
    pub dim: usize,
}

impl CategoricalFeature {
    pub fn new(name: impl Into<String>, mut levels: Vec<String>) -> Self {
        levels.sort();
        levels.dedup();
        let dim = default_embedding_dim(levels.len());
        CategoricalFeature {
            name: name.into(),
            levels,
            dim,
        }
    }

    /// Embedding row for a level; unknown levels map to row 0.
    pub fn row(&self, level: &str) -> usize {
        self.levels.binary_search_by(|l| l.as_str().cmp(level)).map_or(0, |i| i + 1)
    }
}

/// `ceil(sqrt(cardinality))`, capped at 16.
pub fn default_embedding_dim(cardinality: usize) -> usize {
    ((cardinality.max(1) as f64).sqrt().ceil() as usize).clamp(1, 16)
}

/// Names and classes of all covariates, shared by the dataset and the model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub hist: Vec<String>,
    pub future: Vec<String>,
    pub static_real: Vec<String>,
    pub static_cat: Vec<CategoricalFeature>,
}

impl FeatureLayout {
    pub fn embedding_width(&self) -> usize {
        self.static_cat.iter().map(|c| c.dim).sum()
    }

    /// Width of the per-series static vector (embeddings + real statics).
    pub fn static_width(&self) -> usize {
        self.embedding_width() + self.static_real.len()
    }

    /// Column-set compatibility; vocabularies may differ (unseen levels map
    /// to the unknown row).
    pub fn check_compatible(&self, other: &FeatureLayout) -> Result<()> {
        let mut problems = Vec::new();
        let cmp = |what: &str, a: &[String], b: &[String], problems: &mut Vec<String>| {
            if a != b {
                problems.push(format!("{what} columns {a:?} vs {b:?}"));
            }
        };
        cmp("historical", &self.hist, &other.hist, &mut problems);
        cmp("future", &self.future, &other.future, &mut problems);
        cmp("static real", &self.static_real, &other.static_real, &mut problems);
        let ca: Vec<String> = self.static_cat.iter().map(|c| c.name.clone()).collect();
        let cb: Vec<String> = other.static_cat.iter().map(|c| c.name.clone()).collect();
        cmp("static categorical", &ca, &cb, &mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MqError::Data(format!("schema mismatch: {}", problems.join("; "))))
        }
    }
}

/// One observed series with all covariate classes. Time is an integer index
/// starting at `start`; rows are consecutive.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesRecord {
    pub id: String,
    pub start: i64,
    pub y: Vec<f64>,
    /// `T x F_h`
    pub x_hist: Vec<Vec<f64>>,
    /// `T x F_f`, known for every step including the forecast range.
    pub x_future: Vec<Vec<f64>>,
    pub static_real: Vec<f64>,
    pub static_cat: Vec<String>,
}

impl SeriesRecord {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn end(&self) -> i64 {
        self.start + self.y.len() as i64 - 1
    }

    /// Row index of absolute time `t`, if inside the series.
    pub fn index_of(&self, t: i64) -> Option<usize> {
        let i = t - self.start;
        (i >= 0 && (i as usize) < self.y.len()).then_some(i as usize)
    }

    /// Number of rows with time `<= t_end` (the training prefix length).
    pub fn prefix_len(&self, t_end: Option<i64>) -> usize {
        match t_end {
            None => self.y.len(),
            Some(t) => ((t - self.start + 1).max(0) as usize).min(self.y.len()),
        }
    }

    pub fn validate(&self, layout: &FeatureLayout) -> Result<()> {
        let t = self.y.len();
        let bad = |what: &str| MqError::Data(format!("series {}: {what}", self.id));
        if self.x_hist.len() != t || self.x_future.len() != t {
            return Err(bad("temporal arrays differ in length"));
        }
        if self.x_hist.iter().any(|r| r.len() != layout.hist.len()) {
            return Err(bad("historical feature width"));
        }
        if self.x_future.iter().any(|r| r.len() != layout.future.len()) {
            return Err(bad("future feature width"));
        }
        if self.static_real.len() != layout.static_real.len() || self.static_cat.len() != layout.static_cat.len() {
            return Err(bad("static feature width"));
        }
        let finite = self.y.iter().chain(self.x_hist.iter().flatten()).chain(self.x_future.iter().flatten());
        if finite.chain(&self.static_real).any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        Ok(())
    }
}

/// Immutable collection of series sharing one feature layout, ordered by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub layout: FeatureLayout,
    pub series: Vec<SeriesRecord>,
}

impl Dataset {
    pub fn new(layout: FeatureLayout, mut series: Vec<SeriesRecord>) -> Result<Self> {
        series.sort_by(|a, b| a.id.cmp(&b.id));
        for w in series.windows(2) {
            if w[0].id == w[1].id {
                return Err(MqError::Data(format!("duplicate series id {}", w[0].id)));
            }
        }
        for s in &series {
            s.validate(&layout)?;
        }
        Ok(Dataset { layout, series })
    }

    pub fn get(&self, id: &str) -> Option<&SeriesRecord> {
        self.series
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.series[i])
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_dim_rule() {
        assert_eq!(default_embedding_dim(1), 1);
        assert_eq!(default_embedding_dim(10), 4);
        assert_eq!(default_embedding_dim(16), 4);
        assert_eq!(default_embedding_dim(10_000), 16);
    }

    #[test]
    fn unknown_level_maps_to_reserved_row() {
        let c = CategoricalFeature::new("store", vec!["b".into(), "a".into(), "c".into()]);
        assert_eq!(c.row("a"), 1);
        assert_eq!(c.row("c"), 3);
        assert_eq!(c.row("zzz"), 0);
    }

    #[test]
    fn prefix_len_clamps() {
        let s = SeriesRecord {
            id: "a".into(),
            start: 10,
            y: vec![0.0; 5],
            x_hist: vec![vec![]; 5],
            x_future: vec![vec![]; 5],
            static_real: vec![],
            static_cat: vec![],
        };
        assert_eq!(s.prefix_len(Some(12)), 3);
        assert_eq!(s.prefix_len(Some(5)), 0);
        assert_eq!(s.prefix_len(Some(100)), 5);
        assert_eq!(s.prefix_len(None), 5);
        assert_eq!(s.index_of(14), Some(4));
        assert_eq!(s.index_of(15), None);
    }
}
