//! Scoring of quantile forecast grids against actuals, percentile
//! interpolation and the rolling creation-time protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::pinball;
use crate::data::{Dataset, NormalizationStats};
use crate::error::{MqError, Result};
use crate::model::{ForecastGrid, MqModel};
use crate::training::{train, TrainingConfig};

const LEVEL_TOL: f64 = 1e-9;

/// Creation times, horizon and levels to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationPlan {
    pub fcts: Vec<i64>,
    pub horizon: usize,
    pub quantiles: Vec<f64>,
    /// Skip terms whose target lies after the end of the actuals instead
    /// of failing.
    #[serde(default = "yes")]
    pub mask_beyond_end: bool,
}

fn yes() -> bool {
    true
}

impl EvaluationPlan {
    pub fn new(fcts: Vec<i64>, horizon: usize, quantiles: Vec<f64>) -> Self {
        EvaluationPlan {
            fcts,
            horizon,
            quantiles,
            mask_beyond_end: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fcts.is_empty() {
            return Err(MqError::arg("evaluation plan has no forecast creation times"));
        }
        if self.fcts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MqError::arg("forecast creation times must be strictly increasing"));
        }
        if self.horizon == 0 || self.quantiles.is_empty() {
            return Err(MqError::arg("evaluation plan needs a horizon and quantile levels"));
        }
        if self.quantiles.windows(2).any(|w| w[0] >= w[1]) || self.quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(MqError::arg("plan quantiles must be strictly increasing in (0, 1)"));
        }
        Ok(())
    }
}

/// The 99 levels `0.01 ..= 0.99`.
pub fn percentile_levels() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

fn level_index(levels: &[f64], q: f64) -> Option<usize> {
    levels.iter().position(|&l| (l - q).abs() < LEVEL_TOL)
}

/// Piecewise-linear interpolation of knot values at `levels`. Knots must be
/// strictly increasing; levels outside the knot range are refused.
pub fn interpolate_percentiles(knots: &[f64], values: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    if knots.len() != values.len() || knots.is_empty() {
        return Err(MqError::arg("knots and values must be non-empty and equally long"));
    }
    if knots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MqError::arg("knot levels must be strictly increasing"));
    }
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    levels
        .iter()
        .map(|&q| {
            if let Some(i) = level_index(knots, q) {
                return Ok(values[i]);
            }
            if q < lo || q > hi {
                return Err(MqError::arg(format!("level {q} outside knot range [{lo}, {hi}]; no extrapolation")));
            }
            let j = knots.partition_point(|&k| k < q);
            let (k0, k1, v0, v1) = (knots[j - 1], knots[j], values[j - 1], values[j]);
            Ok(v0 + (v1 - v0) * (q - k0) / (k1 - k0))
        })
        .collect()
}

/// The grid re-expressed at `levels` (exact copy when levels match).
pub fn regrid(grid: &ForecastGrid, levels: &[f64]) -> Result<ForecastGrid> {
    let same = grid.quantiles.len() == levels.len() && grid.quantiles.iter().zip(levels).all(|(a, b)| (a - b).abs() < LEVEL_TOL);
    if same {
        return Ok(grid.clone());
    }
    let values = grid
        .values
        .iter()
        .map(|row| interpolate_percentiles(&grid.quantiles, row, levels))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForecastGrid {
        quantiles: levels.to_vec(),
        values,
        ..grid.clone()
    })
}

/// One scored `(series, fct, k)` term.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub fct: i64,
    /// 1-based horizon.
    pub horizon: usize,
    pub actual: f64,
    pub forecast: Vec<f64>,
}

/// Pairs every grid row with its actual value.
pub fn collect_terms(grids: &[ForecastGrid], actuals: &Dataset, plan: &EvaluationPlan) -> Result<Vec<Term>> {
    plan.validate()?;
    let mut terms = Vec::new();
    for grid in grids {
        if grid.values.len() < plan.horizon {
            return Err(MqError::Data(format!(
                "grid for series {} at {} has {} horizons, plan needs {}",
                grid.series_id,
                grid.fct,
                grid.values.len(),
                plan.horizon
            )));
        }
        let grid = regrid(grid, &plan.quantiles)?;
        let rec = actuals
            .get(&grid.series_id)
            .ok_or_else(|| MqError::Data(format!("no actuals for series {}", grid.series_id)))?;
        for k in 1..=plan.horizon {
            let t = grid.fct + k as i64;
            match rec.index_of(t) {
                Some(i) => terms.push(Term {
                    fct: grid.fct,
                    horizon: k,
                    actual: rec.y[i],
                    forecast: grid.values[k - 1].clone(),
                }),
                None if plan.mask_beyond_end && t > rec.end() => {}
                None => {
                    return Err(MqError::Data(format!("missing actual for series {} at time {t}", grid.series_id)));
                }
            }
        }
    }
    Ok(terms)
}

/// Fraction of terms with `actual <= forecast` at level index `j`; ties
/// count as covered.
pub fn calibration(terms: &[Term], j: usize) -> Result<f64> {
    if terms.is_empty() {
        return Err(MqError::arg("calibration needs at least one term"));
    }
    let hits = terms.iter().filter(|t| t.actual <= t.forecast[j]).count();
    Ok(hits as f64 / terms.len() as f64)
}

/// Mean absolute width between the `q_low` and `q_high` forecasts.
pub fn sharpness(terms: &[Term], levels: &[f64], q_low: f64, q_high: f64) -> Result<f64> {
    let lo = level_index(levels, q_low).ok_or_else(|| MqError::arg(format!("level {q_low} not in the grid")))?;
    let hi = level_index(levels, q_high).ok_or_else(|| MqError::arg(format!("level {q_high} not in the grid")))?;
    if terms.is_empty() {
        return Err(MqError::arg("sharpness needs at least one term"));
    }
    Ok(terms.iter().map(|t| (t.forecast[hi] - t.forecast[lo]).abs()).sum::<f64>() / terms.len() as f64)
}

/// Per-FCT aggregate in the style of the GEFCom criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FctScore {
    pub fct: i64,
    pub terms: usize,
    /// Pinball loss averaged over levels, then over terms.
    pub mean_over_quantiles: f64,
    /// Pinball loss summed over levels, then averaged over terms.
    pub sum_over_quantiles: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub quantiles: Vec<f64>,
    pub horizon: usize,
    /// `[k][j]` mean pinball loss.
    pub loss: Vec<Vec<f64>>,
    /// Terms per horizon.
    pub counts: Vec<usize>,
    /// Pooled over all FCTs and horizons, per level.
    pub calibration: Vec<f64>,
    /// `[k][j]`
    pub calibration_by_horizon: Vec<Vec<f64>>,
    /// Mean P90 - P10 width, when both levels are present.
    pub sharpness: Option<f64>,
    pub sharpness_by_horizon: Option<Vec<f64>>,
    /// Pooled mean pinball loss per level.
    pub loss_by_quantile: Vec<f64>,
    pub fct_scores: Vec<FctScore>,
    /// Average over FCTs of `mean_over_quantiles`.
    pub criterion_mean: f64,
    /// Average over FCTs of `sum_over_quantiles`.
    pub criterion_sum: f64,
    pub n_terms: usize,
}

/// Mean pinball loss per `(k, q)` plus every derived aggregate.
pub fn score_quantile_loss(grids: &[ForecastGrid], actuals: &Dataset, plan: &EvaluationPlan) -> Result<MetricReport> {
    let terms = collect_terms(grids, actuals, plan)?;
    score_terms(&terms, plan)
}

pub fn score_terms(terms: &[Term], plan: &EvaluationPlan) -> Result<MetricReport> {
    if terms.is_empty() {
        return Err(MqError::NoLiveTerms);
    }
    let (kk, qq) = (plan.horizon, plan.quantiles.len());
    let mut loss = vec![vec![0.0; qq]; kk];
    let mut hits = vec![vec![0usize; qq]; kk];
    let mut counts = vec![0usize; kk];
    let mut width = vec![0.0; kk];
    let bounds = level_index(&plan.quantiles, 0.1).zip(level_index(&plan.quantiles, 0.9));
    let mut per_fct: BTreeMap<i64, (usize, f64, f64)> = BTreeMap::new();
    for t in terms {
        let k = t.horizon - 1;
        counts[k] += 1;
        let mut sum = 0.0;
        for (j, &q) in plan.quantiles.iter().enumerate() {
            let l = pinball(t.actual, t.forecast[j], q);
            loss[k][j] += l;
            sum += l;
            if t.actual <= t.forecast[j] {
                hits[k][j] += 1;
            }
        }
        if let Some((lo, hi)) = bounds {
            width[k] += (t.forecast[hi] - t.forecast[lo]).abs();
        }
        let e = per_fct.entry(t.fct).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += sum / qq as f64;
        e.2 += sum;
    }
    let n = terms.len();
    let per = |num: f64, den: usize| if den == 0 { f64::NAN } else { num / den as f64 };
    let loss_by_quantile = (0..qq).map(|j| per(loss.iter().map(|r| r[j]).sum(), n)).collect();
    let calibration = (0..qq).map(|j| hits.iter().map(|r| r[j]).sum::<usize>() as f64 / n as f64).collect();
    let calibration_by_horizon = (0..kk).map(|k| (0..qq).map(|j| per(hits[k][j] as f64, counts[k])).collect()).collect();
    let fct_scores: Vec<FctScore> = per_fct
        .into_iter()
        .map(|(fct, (c, m, s))| FctScore {
            fct,
            terms: c,
            mean_over_quantiles: m / c as f64,
            sum_over_quantiles: s / c as f64,
        })
        .collect();
    let nf = fct_scores.len() as f64;
    Ok(MetricReport {
        quantiles: plan.quantiles.clone(),
        horizon: kk,
        loss: (0..kk).map(|k| loss[k].iter().map(|&l| per(l, counts[k])).collect()).collect(),
        calibration,
        calibration_by_horizon,
        sharpness: bounds.map(|_| width.iter().sum::<f64>() / n as f64),
        sharpness_by_horizon: bounds.map(|_| (0..kk).map(|k| per(width[k], counts[k])).collect()),
        loss_by_quantile,
        criterion_mean: fct_scores.iter().map(|f| f.mean_over_quantiles).sum::<f64>() / nf,
        criterion_sum: fct_scores.iter().map(|f| f.sum_over_quantiles).sum::<f64>() / nf,
        fct_scores,
        counts,
        n_terms: n,
    })
}

impl MetricReport {
    /// Long-format CSV: `metric,horizon,quantile,value`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["metric", "horizon", "quantile", "value"])?;
        let mut row = |m: &str, k: Option<usize>, q: Option<f64>, v: f64| {
            w.write_record([
                m.to_string(),
                k.map(|k| k.to_string()).unwrap_or_default(),
                q.map(|q| q.to_string()).unwrap_or_default(),
                v.to_string(),
            ])
        };
        for (k, r) in self.loss.iter().enumerate() {
            for (j, &l) in r.iter().enumerate() {
                row("quantile_loss", Some(k + 1), Some(self.quantiles[j]), l)?;
            }
        }
        for (k, &c) in self.counts.iter().enumerate() {
            row("count", Some(k + 1), None, c as f64)?;
        }
        for (j, &l) in self.loss_by_quantile.iter().enumerate() {
            row("quantile_loss", None, Some(self.quantiles[j]), l)?;
        }
        for (j, &c) in self.calibration.iter().enumerate() {
            row("calibration", None, Some(self.quantiles[j]), c)?;
        }
        for (k, r) in self.calibration_by_horizon.iter().enumerate() {
            for (j, &c) in r.iter().enumerate() {
                row("calibration", Some(k + 1), Some(self.quantiles[j]), c)?;
            }
        }
        if let (Some(s), Some(by)) = (self.sharpness, &self.sharpness_by_horizon) {
            row("sharpness", None, None, s)?;
            for (k, &v) in by.iter().enumerate() {
                row("sharpness", Some(k + 1), None, v)?;
            }
        }
        for f in &self.fct_scores {
            row(&format!("criterion_mean@fct={}", f.fct), None, None, f.mean_over_quantiles)?;
            row(&format!("criterion_sum@fct={}", f.fct), None, None, f.sum_over_quantiles)?;
        }
        row("criterion_mean", None, None, self.criterion_mean)?;
        row("criterion_sum", None, None, self.criterion_sum)?;
        row("terms", None, None, self.n_terms as f64)?;
        w.flush()?;
        Ok(())
    }

    /// `horizon,mean_loss,q...` loss-by-horizon curve.
    pub fn write_horizon_curve(&self, w: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["horizon".to_string(), "mean_loss".to_string()];
        header.extend(self.quantiles.iter().map(|q| format!("q{q}")));
        w.write_record(&header)?;
        for (k, r) in self.loss.iter().enumerate() {
            let mut rec = vec![(k + 1).to_string(), (r.iter().sum::<f64>() / r.len() as f64).to_string()];
            rec.extend(r.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "terms: {}", self.n_terms);
        for (j, q) in self.quantiles.iter().enumerate() {
            let _ = writeln!(
                s,
                "q={q}: mean loss {:.6}, calibration {:.4}",
                self.loss_by_quantile[j], self.calibration[j]
            );
        }
        if let Some(sh) = self.sharpness {
            let _ = writeln!(s, "sharpness (P90-P10): {sh:.6}");
        }
        let _ = writeln!(s, "criterion, mean over levels: {:.6}", self.criterion_mean);
        let _ = writeln!(s, "criterion, sum over levels: {:.6}", self.criterion_sum);
        s
    }
}

/// Options for [`rolling_evaluate`].
#[derive(Clone, Debug, Default)]
pub struct RollingOptions {
    /// Retrain a fresh model on data up to each FCT.
    pub retrain: Option<TrainingConfig>,
    /// Refit target normalization on data up to each FCT.
    pub refit_normalization: bool,
    pub threads: usize,
}

/// Predicts at every planned FCT from prior data only and scores the grids.
pub fn rolling_evaluate(
    dataset: &Dataset,
    model: &MqModel,
    stats: &NormalizationStats,
    plan: &EvaluationPlan,
    opts: &RollingOptions,
) -> Result<(Vec<ForecastGrid>, MetricReport)> {
    plan.validate()?;
    if plan.horizon > model.spec.horizon {
        return Err(MqError::arg(format!(
            "plan horizon {} exceeds model horizon {}",
            plan.horizon, model.spec.horizon
        )));
    }
    let mut grids = Vec::new();
    for &fct in &plan.fcts {
        let (owned, fitted);
        let (m, st) = match &opts.retrain {
            Some(cfg) => {
                let st = NormalizationStats::fit(dataset, Some(fct), model.spec.normalization, model.spec.scale_features);
                let mut fresh = MqModel::new(model.spec.clone(), cfg.seed)?;
                train(&mut fresh, dataset, &st, &TrainingConfig { train_end: Some(fct), ..cfg.clone() })?;
                owned = fresh;
                fitted = st;
                (&owned, &fitted)
            }
            None if opts.refit_normalization => {
                fitted = NormalizationStats::fit(dataset, Some(fct), model.spec.normalization, model.spec.scale_features);
                (model, &fitted)
            }
            None => (model, stats),
        };
        grids.extend(predict_all(m, dataset, st, fct, opts.threads)?);
    }
    let report = score_quantile_loss(&grids, dataset, plan)?;
    Ok((grids, report))
}

/// Grids for every series that has data at `fct`, in dataset order.
pub fn predict_all(model: &MqModel, dataset: &Dataset, stats: &NormalizationStats, fct: i64, threads: usize) -> Result<Vec<ForecastGrid>> {
    let eligible: Vec<_> = dataset
        .series
        .iter()
        .filter(|s| {
            let ok = s.index_of(fct).is_some();
            if !ok {
                warn!("series {}: no history at creation time {fct}, skipped", s.id);
            }
            ok
        })
        .collect();
    let threads = threads.max(1).min(eligible.len().max(1));
    let results: Vec<Result<ForecastGrid>> = if threads == 1 {
        eligible.iter().map(|s| model.predict(s, stats, fct)).collect()
    } else {
        let chunk = eligible.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = eligible
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| model.predict(s, stats, fct)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("prediction worker panicked"))
                .collect()
        })
    };
    results.into_iter().collect()
}

/// Grid CSV: `series_id,fct,horizon,q...`, one row per horizon.
pub fn write_grids(grids: &[ForecastGrid], w: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let levels = match grids.first() {
        Some(g) => g.quantiles.clone(),
        None => return Err(MqError::arg("no grids to write")),
    };
    let mut header = vec!["series_id".to_string(), "fct".into(), "horizon".into()];
    header.extend(levels.iter().map(|q| format!("q{q}")));
    w.write_record(&header)?;
    for g in grids {
        if g.quantiles != levels {
            return Err(MqError::arg("all grids in one file must share quantile levels"));
        }
        for (k, row) in g.values.iter().enumerate() {
            let mut rec = vec![g.series_id.clone(), g.fct.to_string(), (k + 1).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads grids written by [`write_grids`].
pub fn read_grids(r: impl std::io::Read) -> Result<Vec<ForecastGrid>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.len() < 4 || &header[0] != "series_id" || &header[1] != "fct" || &header[2] != "horizon" {
        return Err(MqError::Data("grid file header must start with series_id,fct,horizon".into()));
    }
    let levels = header
        .iter()
        .skip(3)
        .map(|h| {
            h.strip_prefix('q')
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| MqError::Data(format!("bad quantile column {h}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grids: Vec<ForecastGrid> = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| MqError::Data(format!("grid row {}: bad {what}", line + 2));
        let id = rec[0].to_string();
        let fct: i64 = rec[1].parse().map_err(|_| bad("fct"))?;
        let k: usize = rec[2].parse().map_err(|_| bad("horizon"))?;
        let row = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>>>()?;
        let same = grids.last().is_some_and(|g| g.series_id == id && g.fct == fct);
        if !same {
            grids.push(ForecastGrid {
                series_id: id,
                fct,
                quantiles: levels.clone(),
                values: Vec::new(),
            });
        }
        let g = grids.last_mut().expect("pushed above");
        if k != g.values.len() + 1 {
            return Err(bad("horizon order"));
        }
        g.values.push(row);
    }
    Ok(grids)
}
