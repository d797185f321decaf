use super::{build_lag_features, NormalizationStats, SeriesNorm, SeriesRecord};
use crate::encoders::EncoderKind;
use crate::error::{MqError, Result};
use crate::model::ModelSpec;

/// Network-ready arrays for one series, covering encoder steps `0..len`.
///
/// The static embedding is not materialised here: it is a parameter, looked
/// up inside the computation record from `static_rows` and replicated to
/// every step there.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub series_id: String,
    pub len: usize,
    /// Width of one encoder row, excluding the embedding.
    pub enc_width: usize,
    /// `len x enc_width`: y-derived columns, historical, future-at-t and
    /// real static features.
    pub encoder: Vec<f64>,
    /// `K * F_f`
    pub future_width: usize,
    /// `len x (K * F_f)`: row `i` holds `x_f[i+1..=i+K]` in horizon order,
    /// zero beyond the end of the record.
    pub future: Vec<f64>,
    pub static_real: Vec<f64>,
    /// Embedding-table row of each categorical static feature.
    pub static_rows: Vec<usize>,
    pub norm: SeriesNorm,
}

/// Normalized multi-horizon targets for every encoder step.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub horizon: usize,
    /// `len x K`: entry `(i, k-1)` is the normalized `y[i + k]`.
    pub values: Vec<f64>,
    /// Target mask: false where `i + k` is at or beyond the boundary.
    pub live: Vec<bool>,
}

impl Targets {
    pub fn live_count(&self) -> usize {
        self.live.iter().filter(|&&l| l).count()
    }
}

pub fn assemble_model_inputs(
    record: &SeriesRecord,
    spec: &ModelSpec,
    stats: &NormalizationStats,
    len: usize,
) -> Result<ModelInputs> {
    let norm = stats.target(&record.id)?;
    assemble_with_norm(record, spec, stats, norm, len)
}

pub(crate) fn assemble_with_norm(
    record: &SeriesRecord,
    spec: &ModelSpec,
    stats: &NormalizationStats,
    norm: SeriesNorm,
    len: usize,
) -> Result<ModelInputs> {
    if len == 0 || len > record.len() {
        return Err(MqError::arg(format!(
            "series {}: cannot encode {len} of {} steps",
            record.id,
            record.len()
        )));
    }
    let layout = &spec.features;
    let k_max = spec.horizon;
    let y_norm: Vec<f64> = record.y[..len].iter().map(|&v| norm.normalize(v)).collect();
    let lag_depth = match spec.encoder.kind {
        EncoderKind::LstmLag => Some(spec.encoder.depth),
        _ => None,
    };
    let lags = lag_depth.map(|d| build_lag_features(&y_norm, d)).transpose()?;

    let static_real: Vec<f64> = record
        .static_real
        .iter()
        .zip(&stats.static_real)
        .map(|(&v, n)| n.normalize(v))
        .collect();

    let enc_width = spec.encoder_input_width();
    let mut encoder = Vec::with_capacity(len * enc_width);
    for (i, &y) in y_norm.iter().enumerate().take(len) {
        match &lags {
            Some(l) => encoder.extend_from_slice(l.row(i)),
            None => encoder.push(y),
        }
        encoder.extend(record.x_hist[i].iter().zip(&stats.hist).map(|(&v, n)| n.normalize(v)));
        encoder.extend(record.x_future[i].iter().zip(&stats.future).map(|(&v, n)| n.normalize(v)));
        encoder.extend_from_slice(&static_real);
    }
    debug_assert_eq!(encoder.len(), len * enc_width);

    let ff = layout.future.len();
    let future_width = k_max * ff;
    let mut future = vec![0.0; len * future_width];
    for i in 0..len {
        for k in 1..=k_max {
            if let Some(row) = record.x_future.get(i + k) {
                let dst = &mut future[i * future_width + (k - 1) * ff..i * future_width + k * ff];
                for ((d, &v), n) in dst.iter_mut().zip(row).zip(&stats.future) {
                    *d = n.normalize(v);
                }
            }
        }
    }

    let static_rows = layout
        .static_cat
        .iter()
        .zip(&record.static_cat)
        .map(|(c, level)| c.row(level))
        .collect();

    Ok(ModelInputs {
        series_id: record.id.clone(),
        len,
        enc_width,
        encoder,
        future_width,
        future,
        static_real,
        static_rows,
        norm,
    })
}

/// Targets for encoder steps `0..len`; `(i, k)` is live only when
/// `i + k < boundary` (the count of rows usable as training targets).
pub fn assemble_targets(record: &SeriesRecord, norm: SeriesNorm, len: usize, horizon: usize, boundary: usize) -> Targets {
    let boundary = boundary.min(record.len());
    let mut values = vec![0.0; len * horizon];
    let mut live = vec![false; len * horizon];
    for i in 0..len {
        for k in 1..=horizon {
            let j = i + k;
            if j < boundary {
                values[i * horizon + k - 1] = norm.normalize(record.y[j]);
                live[i * horizon + k - 1] = true;
            }
        }
    }
    Targets { horizon, values, live }
}
