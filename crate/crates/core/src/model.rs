use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{assemble_model_inputs, FeatureLayout, ModelInputs, NormMode, NormalizationStats, SeriesRecord};
use crate::decoder::{repair_crossings, Decoder, DecoderSpec, Head, LogGaussianParams};
use crate::encoders::{Encoder, EncoderKind, EncoderSpec};
use crate::error::{MqError, Result};
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::autodiff::softplus;
use crate::stats::normal_ppf;

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub head: Head,
    /// Forecast horizon `K`.
    pub horizon: usize,
    /// Strictly increasing levels in (0, 1).
    pub quantiles: Vec<f64>,
    pub features: FeatureLayout,
    pub normalization: NormMode,
    pub scale_features: bool,
    pub repair_crossings: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            encoder: EncoderSpec::default(),
            decoder: DecoderSpec::default(),
            head: Head::Quantile,
            horizon: 13,
            quantiles: vec![0.1, 0.5, 0.9],
            features: FeatureLayout::default(),
            normalization: NormMode::Standardize,
            scale_features: false,
            repair_crossings: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.horizon == 0 {
            return Err(MqError::Config("horizon must be at least 1".into()));
        }
        if self.quantiles.is_empty() {
            return Err(MqError::Config("at least one quantile level is required".into()));
        }
        for &q in &self.quantiles {
            if !(q > 0.0 && q < 1.0) {
                return Err(MqError::Config(format!("quantile level {q} outside (0, 1)")));
            }
        }
        if self.quantiles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MqError::Config("quantile levels must be strictly increasing".into()));
        }
        if self.head == Head::LogGaussian && self.normalization == NormMode::Standardize {
            return Err(MqError::Config(
                "the loggaussian head needs non-centering normalization (mean_scale or identity)".into(),
            ));
        }
        Ok(())
    }

    /// Width of one assembled encoder row, excluding categorical embeddings.
    pub fn encoder_input_width(&self) -> usize {
        let y_cols = match self.encoder.kind {
            EncoderKind::LstmLag => self.encoder.depth + 1,
            _ => 1,
        };
        y_cols + self.features.hist.len() + self.features.future.len() + self.features.static_real.len()
    }

    /// Network outputs per horizon.
    pub fn out_width(&self) -> usize {
        match self.head {
            Head::Quantile => self.quantiles.len(),
            Head::LogGaussian => 2,
        }
    }
}

/// Which encoder steps receive a decoder.
#[derive(Clone, Copy, Debug)]
pub enum DecodeAt<'a> {
    /// Every step of every series (forking sequences).
    Every,
    /// One step per series.
    Steps(&'a [usize]),
}

/// Quantile forecasts for one series at one creation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastGrid {
    pub series_id: String,
    /// Time of the last observation used; row `k-1` targets `fct + k`.
    pub fct: i64,
    pub quantiles: Vec<f64>,
    /// `K x Q`, original units.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct MqModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// One table per categorical static feature, `(levels + 1) x dim`.
    pub embeddings: Vec<ParamId>,
}

impl MqModel {
    /// Fresh model; initial values come from the `init` stream of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut store = ParamStore::new();
        let mut embeddings = Vec::new();
        for c in &spec.features.static_cat {
            let rows = c.levels.len() + 1;
            let mut table = glorot_uniform(&[rows, c.dim], rows, c.dim, &mut rng);
            table.data_mut()[..c.dim].fill(0.0);
            embeddings.push(store.add(format!("embedding.{}", c.name), table)?);
        }
        let enc_in = spec.encoder_input_width() + spec.features.embedding_width();
        let encoder = Encoder::register(&mut store, &spec.encoder, enc_in, &mut rng)?;
        let decoder = Decoder::register(
            &mut store,
            &spec.decoder,
            spec.horizon,
            spec.out_width(),
            spec.encoder.hidden,
            spec.features.static_width(),
            spec.features.future.len(),
            &mut rng,
        )?;
        Ok(MqModel {
            spec,
            store,
            encoder,
            decoder,
            embeddings,
        })
    }

    /// Rebuilds the layout of `spec` and fills it with named values. Every
    /// parameter must be present exactly once with the right shape.
    pub fn from_parts(spec: ModelSpec, values: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = MqModel::new(spec, 0)?;
        if values.len() != model.store.len() {
            return Err(MqError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| MqError::Checkpoint(format!("unexpected parameter {name}")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(MqError::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    /// Per-series static vector `[embeddings, real statics]`, one row per
    /// entry of `rows_of`, which maps output rows to batch members.
    fn statics(&self, g: &mut Graph, batch: &[&ModelInputs], rows_of: &[usize]) -> Result<Option<Var>> {
        if self.spec.features.static_width() == 0 {
            return Ok(None);
        }
        let mut parts = Vec::new();
        for (c, &table) in self.embeddings.iter().enumerate() {
            let t = g.param(&self.store, table);
            let index = rows_of.iter().map(|&b| Some(batch[b].static_rows[c])).collect();
            parts.push(g.gather_rows(t, index)?);
        }
        let n_real = self.spec.features.static_real.len();
        if n_real > 0 {
            let data = rows_of.iter().flat_map(|&b| batch[b].static_real.iter().copied()).collect();
            parts.push(g.input(Tensor::matrix(rows_of.len(), n_real, data)?));
        }
        if parts.len() == 1 {
            Ok(Some(parts[0]))
        } else {
            g.concat_cols(&parts).map(Some)
        }
    }

    /// Encoder hidden states for a batch of equal-length series, stacked
    /// series-major: row `b T + i`.
    pub fn encode(&self, g: &mut Graph, batch: &[&ModelInputs]) -> Result<Var> {
        let steps = batch.first().map(|m| m.len).ok_or_else(|| MqError::arg("empty batch"))?;
        let width = self.spec.encoder_input_width();
        if batch.iter().any(|m| m.len != steps || m.enc_width != width) {
            return Err(MqError::arg("batch members must share length and encoder width"));
        }
        let data: Vec<f64> = batch.iter().flat_map(|m| m.encoder.iter().copied()).collect();
        let mut x = g.input(Tensor::matrix(batch.len() * steps, width, data)?);
        if !self.embeddings.is_empty() {
            let rows_of: Vec<usize> = (0..batch.len()).flat_map(|b| std::iter::repeat_n(b, steps)).collect();
            let mut parts = vec![x];
            for (c, &table) in self.embeddings.iter().enumerate() {
                let t = g.param(&self.store, table);
                let index = rows_of.iter().map(|&b| Some(batch[b].static_rows[c])).collect();
                parts.push(g.gather_rows(t, index)?);
            }
            x = g.concat_cols(&parts)?;
        }
        self.encoder.forward(g, &self.store, x, batch.len(), steps)
    }

    /// Full forward pass. Returns raw outputs `[R K, W]` where the decoded
    /// rows `r` follow `DecodeAt`: `b T + i` for `Every`, `b` for `Steps`.
    pub fn forward(&self, g: &mut Graph, batch: &[&ModelInputs], at: DecodeAt<'_>) -> Result<Var> {
        let hidden = self.encode(g, batch)?;
        let steps = batch[0].len;
        let picks: Vec<(usize, usize)> = match at {
            DecodeAt::Every => (0..batch.len()).flat_map(|b| (0..steps).map(move |i| (b, i))).collect(),
            DecodeAt::Steps(s) => {
                if s.len() != batch.len() || s.iter().any(|&i| i >= steps) {
                    return Err(MqError::arg("one in-range decode step per series is required"));
                }
                s.iter().copied().enumerate().collect()
            }
        };
        let hidden = match at {
            DecodeAt::Every => hidden,
            DecodeAt::Steps(_) => g.gather_rows(hidden, picks.iter().map(|&(b, i)| Some(b * steps + i)).collect())?,
        };
        let rows_of: Vec<usize> = picks.iter().map(|&(b, _)| b).collect();
        let statics = self.statics(g, batch, &rows_of)?;
        let fw = batch[0].future_width;
        let future = if fw > 0 {
            let data = picks
                .iter()
                .flat_map(|&(b, i)| batch[b].future[i * fw..(i + 1) * fw].iter().copied())
                .collect();
            Some(g.input(Tensor::matrix(picks.len(), fw, data)?))
        } else {
            None
        };
        self.decoder.forward(g, &self.store, hidden, statics, future)
    }

    fn inputs_at(&self, record: &SeriesRecord, stats: &NormalizationStats, fct: i64) -> Result<ModelInputs> {
        let idx = record
            .index_of(fct)
            .ok_or_else(|| MqError::Data(format!("series {}: creation time {fct} outside the record", record.id)))?;
        if !self.spec.features.future.is_empty() && idx + self.spec.horizon >= record.len() {
            return Err(MqError::Data(format!(
                "series {}: future covariates for {} steps after {fct} are required, the record ends at {}",
                record.id,
                self.spec.horizon,
                record.end()
            )));
        }
        assemble_model_inputs(record, &self.spec, stats, idx + 1)
    }

    /// Raw decoder outputs (normalized units) for one creation time, `K x W`.
    pub fn raw_outputs(&self, record: &SeriesRecord, stats: &NormalizationStats, fct: i64) -> Result<(ModelInputs, Tensor)> {
        let inputs = self.inputs_at(record, stats, fct)?;
        let last = [inputs.len - 1];
        let mut g = Graph::new();
        let out = self.forward(&mut g, &[&inputs], DecodeAt::Steps(&last))?;
        let out = g.value(out).clone();
        Ok((inputs, out))
    }

    /// Log-Gaussian parameters of `log(1 + y_norm)` for each horizon.
    pub fn loggaussian_decode(&self, record: &SeriesRecord, stats: &NormalizationStats, fct: i64) -> Result<LogGaussianParams> {
        if self.spec.head != Head::LogGaussian {
            return Err(MqError::Contract("model does not have a loggaussian head".into()));
        }
        let (_, out) = self.raw_outputs(record, stats, fct)?;
        Ok(LogGaussianParams {
            mu: (0..out.rows()).map(|k| out.get2(k, 0)).collect(),
            sigma: (0..out.rows()).map(|k| softplus(out.get2(k, 1))).collect(),
        })
    }

    /// Forecast grid at creation time `fct`, in original units.
    pub fn predict(&self, record: &SeriesRecord, stats: &NormalizationStats, fct: i64) -> Result<ForecastGrid> {
        let (inputs, out) = self.raw_outputs(record, stats, fct)?;
        let norm = inputs.norm;
        let levels = &self.spec.quantiles;
        let mut values: Vec<Vec<f64>> = match self.spec.head {
            Head::Quantile => (0..out.rows()).map(|k| out.row(k).to_vec()).collect(),
            Head::LogGaussian => {
                let z = levels.iter().map(|&q| normal_ppf(q)).collect::<Result<Vec<_>>>()?;
                (0..out.rows())
                    .map(|k| {
                        let (mu, sigma) = (out.get2(k, 0), softplus(out.get2(k, 1)));
                        z.iter().map(|&zq| (mu + sigma * zq).exp() - 1.0).collect()
                    })
                    .collect()
            }
        };
        for row in &mut values {
            for v in row.iter_mut() {
                *v = norm.denormalize(*v);
            }
        }
        if self.spec.repair_crossings {
            repair_crossings(&mut values);
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MqError::Numerical(format!("non-finite forecast for series {} at {fct}", record.id)));
        }
        Ok(ForecastGrid {
            series_id: record.id.clone(),
            fct,
            quantiles: levels.clone(),
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_benchmark, CategoricalFeature, Dataset};

    fn small_spec(kind: EncoderKind) -> ModelSpec {
        ModelSpec {
            encoder: EncoderSpec {
                kind,
                hidden: 4,
                depth: 3,
                layers: 1,
            },
            horizon: 3,
            features: FeatureLayout {
                future: vec!["spike".into(), "season_sin".into(), "season_cos".into()],
                ..FeatureLayout::default()
            },
            ..ModelSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::default();
        assert!(s.validate().is_ok());
        s.quantiles = vec![0.5, 0.1];
        assert!(s.validate().is_err());
        s.quantiles = vec![0.0, 0.5];
        assert!(s.validate().is_err());
        let s = ModelSpec {
            head: Head::LogGaussian,
            ..ModelSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MqModel::new(small_spec(EncoderKind::Lstm), 5).unwrap();
        let b = MqModel::new(small_spec(EncoderKind::Lstm), 5).unwrap();
        let c = MqModel::new(small_spec(EncoderKind::Lstm), 6).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn every_encoder_predicts_finite_grid() {
        let bench = synthesize_benchmark(1, 2, 30).unwrap();
        for kind in [EncoderKind::Lstm, EncoderKind::LstmNarx, EncoderKind::LstmLag, EncoderKind::Wavenet] {
            let spec = small_spec(kind);
            let stats = NormalizationStats::fit(&bench.dataset, Some(20), spec.normalization, false);
            let model = MqModel::new(spec, 1).unwrap();
            let g = model.predict(&bench.dataset.series[0], &stats, 20).unwrap();
            assert_eq!(g.values.len(), 3);
            assert!(g.values.iter().all(|r| r.len() == 3));
        }
    }

    #[test]
    fn decoding_every_step_matches_single_step() {
        let bench = synthesize_benchmark(2, 3, 25).unwrap();
        let spec = small_spec(EncoderKind::Lstm);
        let stats = NormalizationStats::fit(&bench.dataset, None, spec.normalization, false);
        let model = MqModel::new(spec, 3).unwrap();
        let inputs: Vec<ModelInputs> = bench
            .dataset
            .series
            .iter()
            .map(|s| assemble_model_inputs(s, &model.spec, &stats, 25).unwrap())
            .collect();
        let refs: Vec<&ModelInputs> = inputs.iter().collect();
        let mut g = Graph::new();
        let all = model.forward(&mut g, &refs, DecodeAt::Every).unwrap();
        let all = g.value(all).clone();
        assert_eq!(all.shape(), &[3 * 25 * 3, 3]);
        let steps = [4, 17, 24];
        let mut g = Graph::new();
        let some = model.forward(&mut g, &refs, DecodeAt::Steps(&steps)).unwrap();
        let some = g.value(some).clone();
        for (b, &i) in steps.iter().enumerate() {
            for k in 0..3 {
                assert_eq!(some.row(b * 3 + k), all.row((b * 25 + i) * 3 + k));
            }
        }
    }

    #[test]
    fn static_embedding_reaches_the_output() {
        let bench = synthesize_benchmark(4, 2, 20).unwrap();
        let mut series = bench.dataset.series.clone();
        series[0].static_cat = vec!["a".into()];
        series[1].static_cat = vec!["b".into()];
        let layout = FeatureLayout {
            static_cat: vec![CategoricalFeature::new("store", vec!["a".into(), "b".into()])],
            ..bench.dataset.layout.clone()
        };
        let data = Dataset::new(layout.clone(), series).unwrap();
        let spec = ModelSpec {
            features: layout,
            ..small_spec(EncoderKind::Lstm)
        };
        let stats = NormalizationStats::fit(&data, None, spec.normalization, false);
        let model = MqModel::new(spec, 1).unwrap();
        let mut rec = data.series[0].clone();
        let a = model.predict(&rec, &stats, 15).unwrap();
        rec.static_cat = vec!["b".into()];
        let b = model.predict(&rec, &stats, 15).unwrap();
        assert_ne!(a.values, b.values);
        rec.static_cat = vec!["never-seen".into()];
        assert!(model.predict(&rec, &stats, 15).is_ok());
    }

    #[test]
    fn from_parts_round_trip_and_rejections() {
        let m = MqModel::new(small_spec(EncoderKind::Wavenet), 9).unwrap();
        let parts: Vec<(String, Tensor)> = m.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let back = MqModel::from_parts(m.spec.clone(), parts.clone()).unwrap();
        assert_eq!(back.store, m.store);
        let mut missing = parts.clone();
        missing.pop();
        assert!(MqModel::from_parts(m.spec.clone(), missing).is_err());
        let mut bad = parts;
        bad[0].1 = Tensor::zeros(&[1, 1]);
        assert!(MqModel::from_parts(m.spec.clone(), bad).is_err());
    }
}
