//! Total quantile loss, forking- and cutting-sequence training.
//!
//! A batch is split into fixed work units (at most [`UNIT_SERIES`] series
//! of equal encoded length). Each unit gets its own computation record and
//! gradient set; the sets are merged in unit order, so results do not
//! depend on the number of worker threads.

use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::data::{assemble_model_inputs, assemble_targets, Dataset, ModelInputs, NormalizationStats, SeriesRecord, Targets};
use crate::decoder::Head;
use crate::error::{MqError, Result};
use crate::model::{DecodeAt, MqModel};
use crate::optim::{AdamConfig, AdamState};
use crate::params::Gradients;
use crate::rng;
use crate::tensor::Tensor;

/// Largest number of series sharing one computation record.
pub const UNIT_SERIES: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Forking,
    Cutting,
}

impl std::str::FromStr for Scheme {
    type Err = MqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forking" => Ok(Scheme::Forking),
            "cutting" => Ok(Scheme::Cutting),
            other => Err(MqError::arg(format!("unknown scheme {other}"))),
        }
    }
}

/// Quantile levels with optional per-quantile and per-horizon weights
/// (uniform when empty).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileSpec {
    pub levels: Vec<f64>,
    pub quantile_weights: Vec<f64>,
    pub horizon_weights: Vec<f64>,
}

impl QuantileSpec {
    pub fn uniform(levels: Vec<f64>) -> Self {
        QuantileSpec {
            levels,
            quantile_weights: Vec::new(),
            horizon_weights: Vec::new(),
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(MqError::Config("quantile levels must lie in (0, 1)".into()));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MqError::Config("quantile levels must be strictly increasing".into()));
        }
        let check = |w: &[f64], n: usize, what: &str| -> Result<()> {
            if !w.is_empty() && w.len() != n {
                return Err(MqError::Config(format!("{what} weights: expected {n}, got {}", w.len())));
            }
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(MqError::Config(format!("{what} weights must be nonnegative")));
            }
            Ok(())
        };
        check(&self.quantile_weights, self.levels.len(), "quantile")?;
        check(&self.horizon_weights, horizon, "horizon")
    }

    /// Weight of term `(k, j)` (0-based horizon and level).
    pub fn weight(&self, k: usize, j: usize) -> f64 {
        self.horizon_weights.get(k).copied().unwrap_or(1.0) * self.quantile_weights.get(j).copied().unwrap_or(1.0)
    }
}

/// Which `(FCT, horizon)` loss terms count, stored row-major `fct x K`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMask {
    pub horizon: usize,
    pub live: Vec<bool>,
}

impl TargetMask {
    /// Mask for `len` creation times against `boundary` usable rows:
    /// `(i, k)` is live iff `i + k < boundary` (0-based step `i`).
    pub fn boundary(len: usize, horizon: usize, boundary: usize) -> Self {
        let live = (0..len)
            .flat_map(|i| (1..=horizon).map(move |k| i + k < boundary))
            .collect();
        TargetMask { horizon, live }
    }
}

/// Weighted pinball sum over live terms. `pred` is `[R K, Q]`, `targets`
/// and `live` have `R K` entries.
pub fn total_quantile_loss(pred: &Tensor, targets: &[f64], live: &[bool], spec: &QuantileSpec, horizon: usize) -> Result<f64> {
    let q = spec.levels.len();
    if pred.cols() != q || pred.rows() != targets.len() || live.len() != targets.len() || !targets.len().is_multiple_of(horizon) {
        return Err(MqError::shape("total_quantile_loss", pred.shape(), &[targets.len(), q]));
    }
    if !live.iter().any(|&l| l) {
        return Err(MqError::NoLiveTerms);
    }
    let mut total = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        if !live[r] {
            continue;
        }
        for (j, &lvl) in spec.levels.iter().enumerate() {
            let w = spec.weight(r % horizon, j);
            if w != 0.0 {
                total += w * crate::autodiff::pinball(y, pred.get2(r, j), lvl);
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    /// Series per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Cosine-anneal the learning rate to this fraction of `adam.lr` by the
    /// last epoch.
    pub lr_decay: Option<f64>,
    /// Last time step usable for training; `None` uses everything.
    pub train_end: Option<i64>,
    pub threads: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub quantile_weights: Vec<f64>,
    pub horizon_weights: Vec<f64>,
    /// Write a checkpoint every this many epochs (and after the last).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            scheme: Scheme::Forking,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            lr_decay: None,
            train_end: None,
            threads: 1,
            grad_clip: None,
            quantile_weights: Vec::new(),
            horizon_weights: Vec::new(),
            checkpoint_every: None,
            checkpoint_path: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MqError::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(MqError::Config("learning rate must be positive".into()));
        }
        if let Some(f) = self.lr_decay {
            if !(0.0..=1.0).contains(&f) {
                return Err(MqError::Config(format!("lr_decay must lie in [0, 1], got {f}")));
            }
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            None => self.adam.lr,
            Some(f) => {
                let progress = if self.epochs > 1 { epoch as f64 / (self.epochs - 1) as f64 } else { 1.0 };
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                self.adam.lr * (f + (1.0 - f) * cos)
            }
        }
    }
}

/// One series prepared for training: inputs over the training prefix.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub inputs: ModelInputs,
    pub targets: Targets,
}

impl TrainingSample {
    /// Uses only rows up to `train_end`; everything later, including
    /// future covariates, is invisible to training.
    pub fn new(model: &MqModel, record: &SeriesRecord, stats: &NormalizationStats, train_end: Option<i64>) -> Result<Option<Self>> {
        let n = record.prefix_len(train_end);
        if n < 2 {
            warn!("series {}: {n} training rows, skipped", record.id);
            return Ok(None);
        }
        if model.spec.horizon >= n {
            warn!(
                "series {}: horizon {} >= {n} training rows, long horizons are always masked",
                record.id, model.spec.horizon
            );
        }
        let prefix = truncate(record, n);
        let inputs = assemble_model_inputs(&prefix, &model.spec, stats, n)?;
        let targets = assemble_targets(&prefix, inputs.norm, n, model.spec.horizon, n);
        Ok(Some(TrainingSample { inputs, targets }))
    }

    /// Number of forecast creation times.
    pub fn len(&self) -> usize {
        self.inputs.len
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.len == 0
    }
}

fn truncate(record: &SeriesRecord, n: usize) -> SeriesRecord {
    SeriesRecord {
        id: record.id.clone(),
        start: record.start,
        y: record.y[..n].to_vec(),
        x_hist: record.x_hist[..n].to_vec(),
        x_future: record.x_future[..n].to_vec(),
        static_real: record.static_real.clone(),
        static_cat: record.static_cat.clone(),
    }
}

/// The first `len` encoder steps of `inputs`.
pub fn prefix_inputs(inputs: &ModelInputs, len: usize) -> Result<ModelInputs> {
    if len == 0 || len > inputs.len {
        return Err(MqError::arg(format!("creation time {len} outside 1..={}", inputs.len)));
    }
    Ok(ModelInputs {
        len,
        encoder: inputs.encoder[..len * inputs.enc_width].to_vec(),
        future: inputs.future[..len * inputs.future_width].to_vec(),
        ..inputs.clone()
    })
}

/// Raw outputs at every creation time: element `i` is the `K x W` grid
/// decoded from encoder step `i` (FCT `i + 1`).
pub fn forked_forward(model: &MqModel, inputs: &ModelInputs) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &[inputs], DecodeAt::Every)?;
    split_grids(g.value(out), model.spec.horizon)
}

/// Raw outputs at one creation time `fct` in `1..=len`, encoding only the
/// prefix `..fct`.
pub fn cut_forward(model: &MqModel, inputs: &ModelInputs, fct: usize) -> Result<Tensor> {
    let prefix = prefix_inputs(inputs, fct)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &[&prefix], DecodeAt::Steps(&[fct - 1]))?;
    Ok(g.value(out).clone())
}

fn split_grids(out: &Tensor, horizon: usize) -> Result<Vec<Tensor>> {
    let w = out.cols();
    (0..out.rows() / horizon)
        .map(|r| Tensor::matrix(horizon, w, out.data()[r * horizon * w..(r + 1) * horizon * w].to_vec()))
        .collect()
}

/// Loss sum, live-term count and parameter gradients of one work unit.
#[derive(Clone, Debug)]
pub struct UnitResult {
    pub loss: f64,
    pub live: usize,
    pub gradients: Gradients,
}

/// Adds the head's loss node for decoded rows with the given targets.
fn loss_node(g: &mut Graph, model: &MqModel, qspec: &QuantileSpec, pred: Var, targets: Vec<f64>, live: &[bool]) -> Result<Var> {
    let k_max = model.spec.horizon;
    match model.spec.head {
        Head::Quantile => {
            let q = qspec.levels.len();
            let mut weight = vec![0.0; targets.len() * q];
            for (r, &l) in live.iter().enumerate() {
                if l {
                    for j in 0..q {
                        weight[r * q + j] = qspec.weight(r % k_max, j);
                    }
                }
            }
            g.pinball_loss(pred, targets, weight, qspec.levels.clone())
        }
        Head::LogGaussian => {
            let mut z = vec![0.0; targets.len()];
            let mut weight = vec![0.0; targets.len()];
            for (r, (&y, &l)) in targets.iter().zip(live).enumerate() {
                if l {
                    if y <= -1.0 {
                        return Err(MqError::Data(format!(
                            "loggaussian head needs normalized targets above -1, found {y}"
                        )));
                    }
                    z[r] = y.ln_1p();
                    weight[r] = qspec.horizon_weights.get(r % k_max).copied().unwrap_or(1.0);
                }
            }
            let mu = g.slice_cols(pred, 0, 1)?;
            let s = g.slice_cols(pred, 1, 2)?;
            let sigma = g.softplus(s)?;
            g.gaussian_nll(mu, sigma, z, weight)
        }
    }
}

/// Forking loss of equal-length samples: a decoder at every step.
pub fn forking_unit(model: &MqModel, qspec: &QuantileSpec, samples: &[&TrainingSample]) -> Result<UnitResult> {
    let inputs: Vec<&ModelInputs> = samples.iter().map(|s| &s.inputs).collect();
    let mut targets = Vec::new();
    let mut live = Vec::new();
    for s in samples {
        targets.extend_from_slice(&s.targets.values);
        live.extend_from_slice(&s.targets.live);
    }
    run_unit(model, qspec, &inputs, DecodeAt::Every, targets, live)
}

/// Cutting loss: sample `b` encodes its first `cuts[b]` steps and decodes
/// once. All cut prefixes must have equal length.
pub fn cutting_unit(model: &MqModel, qspec: &QuantileSpec, samples: &[&TrainingSample], cuts: &[usize]) -> Result<UnitResult> {
    let k_max = model.spec.horizon;
    let prefixes = samples
        .iter()
        .zip(cuts)
        .map(|(s, &c)| prefix_inputs(&s.inputs, c))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<&ModelInputs> = prefixes.iter().collect();
    let steps: Vec<usize> = cuts.iter().map(|&c| c - 1).collect();
    let mut targets = Vec::new();
    let mut live = Vec::new();
    for (s, &c) in samples.iter().zip(cuts) {
        let row = (c - 1) * k_max..c * k_max;
        targets.extend_from_slice(&s.targets.values[row.clone()]);
        live.extend_from_slice(&s.targets.live[row]);
    }
    run_unit(model, qspec, &inputs, DecodeAt::Steps(&steps), targets, live)
}

fn run_unit(
    model: &MqModel,
    qspec: &QuantileSpec,
    inputs: &[&ModelInputs],
    at: DecodeAt<'_>,
    targets: Vec<f64>,
    live: Vec<bool>,
) -> Result<UnitResult> {
    let n_live = live.iter().filter(|&&l| l).count();
    let mut g = Graph::new();
    let pred = model.forward(&mut g, inputs, at)?;
    if n_live == 0 {
        return Ok(UnitResult {
            loss: 0.0,
            live: 0,
            gradients: Gradients::empty(model.num_params()),
        });
    }
    let loss = loss_node(&mut g, model, qspec, pred, targets, &live)?;
    Ok(UnitResult {
        loss: g.value(loss).item(),
        live: n_live,
        gradients: g.param_gradients(loss, model.num_params())?,
    })
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per live term, one entry per epoch.
    pub loss_trace: Vec<f64>,
    pub steps: u64,
    pub samples: usize,
}

/// Writes `epoch,mean_loss` rows.
pub fn write_loss_trace(trace: &[f64], w: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["epoch", "mean_loss"])?;
    for (e, l) in trace.iter().enumerate() {
        w.write_record([(e + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

enum Unit {
    Fork(Vec<usize>),
    Cut(Vec<usize>, Vec<usize>),
}

/// Groups sample indices with equal encoded length, in first-seen order,
/// into chunks of at most `UNIT_SERIES`.
fn group_by_len(idx: &[usize], len_of: impl Fn(usize) -> usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in idx {
        let l = len_of(i);
        match groups.iter_mut().find(|(gl, _)| *gl == l) {
            Some((_, v)) => v.push(i),
            None => groups.push((l, vec![i])),
        }
    }
    groups
        .into_iter()
        .flat_map(|(_, v)| v.chunks(UNIT_SERIES).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

fn run_units(model: &MqModel, qspec: &QuantileSpec, samples: &[TrainingSample], units: &[Unit], threads: usize) -> Vec<Result<UnitResult>> {
    let eval = |u: &Unit| -> Result<UnitResult> {
        match u {
            Unit::Fork(ix) => {
                let s: Vec<&TrainingSample> = ix.iter().map(|&i| &samples[i]).collect();
                forking_unit(model, qspec, &s)
            }
            Unit::Cut(ix, cuts) => {
                let s: Vec<&TrainingSample> = ix.iter().map(|&i| &samples[i]).collect();
                cutting_unit(model, qspec, &s, cuts)
            }
        }
    };
    let threads = threads.max(1).min(units.len().max(1));
    if threads == 1 {
        return units.iter().map(eval).collect();
    }
    let mut slots: Vec<Option<Result<UnitResult>>> = (0..units.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let eval = &eval;
                scope.spawn(move || {
                    (w..units.len())
                        .step_by(threads)
                        .map(|i| (i, eval(&units[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("training worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every unit evaluated")).collect()
}

/// Prepares every series of `dataset` for training.
pub fn training_samples(model: &MqModel, dataset: &Dataset, stats: &NormalizationStats, train_end: Option<i64>) -> Result<Vec<TrainingSample>> {
    model.spec.features.check_compatible(&dataset.layout)?;
    let mut out = Vec::with_capacity(dataset.len());
    for rec in &dataset.series {
        if let Some(s) = TrainingSample::new(model, rec, stats, train_end)? {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(MqError::Data("no series has enough training rows".into()));
    }
    Ok(out)
}

/// Mini-batch Adam over series samples.
pub fn train(model: &mut MqModel, dataset: &Dataset, stats: &NormalizationStats, config: &TrainingConfig) -> Result<TrainReport> {
    config.validate()?;
    let qspec = QuantileSpec {
        levels: model.spec.quantiles.clone(),
        quantile_weights: config.quantile_weights.clone(),
        horizon_weights: config.horizon_weights.clone(),
    };
    qspec.validate(model.spec.horizon)?;
    let samples = training_samples(model, dataset, stats, config.train_end)?;
    let mut adam = AdamState::new(&model.store, config.adam);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        adam.set_lr(config.lr_at(epoch));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::indexed_stream(config.seed, "train/shuffle", epoch as u64));
        let mut cut_rng = rng::indexed_stream(config.seed, "train/cut", epoch as u64);
        let cuts: Vec<usize> = samples.iter().map(|s| cut_rng.random_range(1..s.len())).collect();

        let (mut epoch_loss, mut epoch_live) = (0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let units: Vec<Unit> = match config.scheme {
                Scheme::Forking => group_by_len(batch, |i| samples[i].len()).into_iter().map(Unit::Fork).collect(),
                Scheme::Cutting => group_by_len(batch, |i| cuts[i])
                    .into_iter()
                    .map(|ix| {
                        let c = ix.iter().map(|&i| cuts[i]).collect();
                        Unit::Cut(ix, c)
                    })
                    .collect(),
            };
            let results = run_units(model, &qspec, &samples, &units, config.threads);
            let mut merged = Gradients::empty(model.num_params());
            let (mut loss, mut live) = (0.0, 0usize);
            for r in results {
                let r = r?;
                loss += r.loss;
                live += r.live;
                merged.merge(&r.gradients)?;
            }
            if live == 0 {
                continue;
            }
            let grad_finite = merged.0.iter().flatten().all(Tensor::is_finite);
            if !loss.is_finite() || !grad_finite {
                let norms = model
                    .store
                    .param_norms()
                    .into_iter()
                    .map(|(n, v)| format!("{n}={v:.4e}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(MqError::Numerical(format!(
                    "non-finite loss {loss} at epoch {} batch {b}; parameter norms: {norms}",
                    epoch + 1
                )));
            }
            epoch_loss += loss;
            epoch_live += live;

            model.store.zero_grad();
            model.store.accumulate(&merged)?;
            let inv = 1.0 / live as f64;
            for p in model.store.iter_mut() {
                p.gradient.data_mut().iter_mut().for_each(|g| *g *= inv);
            }
            if let Some(clip) = config.grad_clip {
                let norm = model.store.grad_norm();
                if norm > clip {
                    let s = clip / norm;
                    for p in model.store.iter_mut() {
                        p.gradient.data_mut().iter_mut().for_each(|g| *g *= s);
                    }
                }
            }
            adam.step(&mut model.store)?;
        }
        let mean = if epoch_live > 0 { epoch_loss / epoch_live as f64 } else { f64::NAN };
        info!("epoch {}: mean loss {mean:.6}", epoch + 1);
        trace.push(mean);

        if let (Some(every), Some(path)) = (config.checkpoint_every, &config.checkpoint_path) {
            if (epoch + 1) % every == 0 || epoch + 1 == config.epochs {
                checkpoint::save(model, stats, path)?;
            }
        }
    }
    Ok(TrainReport {
        loss_trace: trace,
        steps: adam.step_count(),
        samples: samples.len(),
    })
}
