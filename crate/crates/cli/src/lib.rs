//! Command implementations behind the `mqrnn` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mqrnn_core::checkpoint;
use mqrnn_core::data::{ingest, synthesize, write_oracle_csv, export_csv, Dataset, SchemaDescriptor, SynthConfig};
use mqrnn_core::evaluation::{predict_all, read_grids, rolling_evaluate, score_quantile_loss, write_grids, EvaluationPlan, RollingOptions};
use mqrnn_core::training::{train, write_loss_trace};
use mqrnn_core::{
    AdamConfig, DecoderSpec, EncoderKind, EncoderSpec, ForecastGrid, Head, ModelSpec, MqError, MqModel, NormMode,
    NormalizationStats, Scheme, TrainingConfig,
};

pub mod svg;

#[derive(Debug, Parser)]
#[command(name = "mqrnn", version, about = "Multi-horizon quantile recurrent forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint and loss trace.
    Train(CommonArgs),
    /// Write forecast grids at the given creation times.
    Predict(CommonArgs),
    /// Score grids (or a checkpoint over a rolling plan) against actuals.
    Evaluate(CommonArgs),
    /// Generate the synthetic benchmark with its oracle quantiles.
    Synthesize(CommonArgs),
    /// Draw forecast-band SVGs for selected series.
    Report(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Grid CSV to score or plot.
    #[arg(long)]
    pub grids: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub head: Option<Head>,
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    /// Forecast creation times; repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    pub fct: Vec<i64>,
    /// Series to plot (report).
    #[arg(long, value_delimiter = ',')]
    pub series: Vec<String>,
}

/// `[model]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub head: Head,
    pub horizon: usize,
    pub quantiles: Vec<f64>,
    /// Defaults to `standardize`, or `mean_scale` for the loggaussian head.
    pub normalization: Option<NormMode>,
    pub scale_features: bool,
    pub repair_crossings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelSpec::default();
        ModelSection {
            encoder: d.encoder,
            decoder: d.decoder,
            head: d.head,
            horizon: d.horizon,
            quantiles: d.quantiles,
            normalization: None,
            scale_features: false,
            repair_crossings: false,
        }
    }
}

/// `[training]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub scheme: Scheme,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub lr_decay: Option<f64>,
    pub train_end: Option<i64>,
    pub threads: usize,
    pub grad_clip: Option<f64>,
    pub quantile_weights: Vec<f64>,
    pub horizon_weights: Vec<f64>,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        TrainingSection {
            scheme: t.scheme,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            lr_decay: None,
            train_end: None,
            threads: 1,
            grad_clip: None,
            quantile_weights: Vec::new(),
            horizon_weights: Vec::new(),
            checkpoint_every: None,
        }
    }
}

/// `[evaluation]` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub fcts: Vec<i64>,
    /// Defaults to the model horizon.
    pub horizon: Option<usize>,
    /// Defaults to the model (or grid) levels.
    pub quantiles: Option<Vec<f64>>,
    /// Retrain from scratch before every creation time.
    pub retrain: bool,
    pub refit_normalization: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, MqError> {
        toml::from_str(text).map_err(|e| MqError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| MqError::Config(format!("cannot read {}: {e}", p.display())))?;
                RunConfig::parse(&text).with_context(|| format!("in config file {}", p.display()))
            }
        }
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, a: &CommonArgs) -> Self {
        if let Some(s) = a.seed {
            self.training.seed = s;
        }
        if let Some(t) = a.threads {
            self.training.threads = t;
        }
        if let Some(s) = a.scheme {
            self.training.scheme = s;
        }
        if let Some(h) = a.head {
            self.model.head = h;
        }
        if let Some(e) = a.encoder {
            self.model.encoder.kind = e;
        }
        self
    }

    pub fn model_spec(&self, dataset: &Dataset) -> ModelSpec {
        let m = &self.model;
        let normalization = m.normalization.unwrap_or(match m.head {
            Head::Quantile => NormMode::Standardize,
            Head::LogGaussian => NormMode::MeanScale,
        });
        ModelSpec {
            encoder: m.encoder.clone(),
            decoder: m.decoder.clone(),
            head: m.head,
            horizon: m.horizon,
            quantiles: m.quantiles.clone(),
            features: dataset.layout.clone(),
            normalization,
            scale_features: m.scale_features,
            repair_crossings: m.repair_crossings,
        }
    }

    pub fn training_config(&self, checkpoint_path: Option<PathBuf>) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            scheme: t.scheme,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            lr_decay: t.lr_decay,
            train_end: t.train_end,
            threads: t.threads.max(1),
            grad_clip: t.grad_clip,
            quantile_weights: t.quantile_weights.clone(),
            horizon_weights: t.horizon_weights.clone(),
            checkpoint_every: t.checkpoint_every,
            checkpoint_path,
        }
    }
}

/// Everything needed to rerun a command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub grids: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub resolved_config: RunConfig,
    pub outputs: BTreeMap<String, PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Process exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<MqError>() {
            return match e {
                MqError::Argument(_) => 2,
                MqError::Config(_) => 3,
                MqError::Data(_) | MqError::Csv(_) => 4,
                MqError::Numerical(_) | MqError::NoLiveTerms => 5,
                MqError::Checkpoint(_) | MqError::Io(_) => 6,
                _ => 1,
            };
        }
        if cause.downcast_ref::<UnknownSeries>().is_some() {
            return 7;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 6;
        }
    }
    1
}

/// Some requested series were not in the grids; the rest were written.
#[derive(Debug)]
pub struct UnknownSeries(pub Vec<String>);

impl std::fmt::Display for UnknownSeries {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "unknown series skipped: {}", self.0.join(", "))
    }
}

impl std::error::Error for UnknownSeries {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    MqError::Argument(msg.into()).into()
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn load_dataset(a: &CommonArgs) -> Result<Dataset> {
    let data = required(&a.data, "data")?;
    let schema = match &a.schema {
        Some(s) => SchemaDescriptor::load(s).with_context(|| format!("reading schema {}", s.display()))?,
        None => SchemaDescriptor::default(),
    };
    Ok(ingest(data, &schema)?)
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<(), MqError>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct Run<'a> {
    name: &'static str,
    args: &'a CommonArgs,
    config: RunConfig,
    out: PathBuf,
    outputs: BTreeMap<String, PathBuf>,
    started: f64,
}

impl<'a> Run<'a> {
    fn start(name: &'static str, args: &'a CommonArgs) -> Result<Self> {
        let config = RunConfig::load(args.config.as_deref())?.with_overrides(args);
        let out = required(&args.out, "out")?.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run {
            name,
            args,
            config,
            out,
            outputs: BTreeMap::new(),
            started: now(),
        })
    }

    fn path(&mut self, key: &str, file: &str) -> PathBuf {
        let p = self.out.join(file);
        self.outputs.insert(key.to_string(), p.clone());
        p
    }

    fn finish(self) -> Result<()> {
        let manifest = RunManifest {
            command: self.name.to_string(),
            argv: std::env::args().collect(),
            config_path: self.args.config.clone(),
            data: self.args.data.clone(),
            schema: self.args.schema.clone(),
            checkpoint: self.args.checkpoint.clone(),
            grids: self.args.grids.clone(),
            out: self.out.clone(),
            seed: self.config.training.seed,
            threads: self.config.training.threads,
            resolved_config: self.config,
            outputs: self.outputs,
            started_unix: self.started,
            finished_unix: now(),
        };
        let path = manifest.out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Synthesize(a) => cmd_synthesize(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

pub fn cmd_train(a: &CommonArgs) -> Result<()> {
    let mut run = Run::start("train", a)?;
    let dataset = load_dataset(a)?;
    let spec = run.config.model_spec(&dataset);
    let ckpt = run.path("checkpoint", "model.ckpt");
    let trace_path = run.path("loss_trace", "loss_trace.csv");
    let cfg = run.config.training_config(Some(ckpt.clone()));
    let stats = NormalizationStats::fit(&dataset, cfg.train_end, spec.normalization, spec.scale_features);
    let mut model = MqModel::new(spec, cfg.seed)?;
    let report = train(&mut model, &dataset, &stats, &cfg)?;
    checkpoint::save(&model, &stats, &ckpt)?;
    write_file(&trace_path, |b| write_loss_trace(&report.loss_trace, b))?;
    run.finish()
}

fn plan_fcts(a: &CommonArgs, cfg: &RunConfig) -> Result<Vec<i64>> {
    let mut fcts = if a.fct.is_empty() { cfg.evaluation.fcts.clone() } else { a.fct.clone() };
    if fcts.is_empty() {
        return Err(usage("no forecast creation times (use --fct or [evaluation].fcts)"));
    }
    fcts.sort_unstable();
    fcts.dedup();
    Ok(fcts)
}

pub fn cmd_predict(a: &CommonArgs) -> Result<()> {
    let mut run = Run::start("predict", a)?;
    let (model, stats) = checkpoint::load(required(&a.checkpoint, "checkpoint")?)?;
    let dataset = load_dataset(a)?;
    model.spec.features.check_compatible(&dataset.layout)?;
    let fcts = plan_fcts(a, &run.config)?;
    let mut grids = Vec::new();
    for &fct in &fcts {
        grids.extend(predict_all(&model, &dataset, &stats, fct, run.config.training.threads)?);
    }
    let path = run.path("grids", "grids.csv");
    write_file(&path, |b| write_grids(&grids, b))?;
    run.finish()
}

pub fn cmd_evaluate(a: &CommonArgs) -> Result<()> {
    let mut run = Run::start("evaluate", a)?;
    let dataset = load_dataset(a)?;
    let fcts = plan_fcts(a, &run.config)?;
    let ev = run.config.evaluation.clone();
    let (grids, report) = match (&a.grids, &a.checkpoint) {
        (Some(g), _) => {
            let grids = read_grids(fs::File::open(g).with_context(|| format!("opening {}", g.display()))?)?;
            let first = grids.first().ok_or_else(|| MqError::Data("grid file is empty".into()))?;
            let plan = EvaluationPlan::new(
                fcts.clone(),
                ev.horizon.unwrap_or(first.values.len()),
                ev.quantiles.clone().unwrap_or_else(|| first.quantiles.clone()),
            );
            let selected: Vec<ForecastGrid> = grids.into_iter().filter(|g| fcts.contains(&g.fct)).collect();
            if selected.is_empty() {
                return Err(MqError::Data("no grid matches the planned creation times".into()).into());
            }
            let report = score_quantile_loss(&selected, &dataset, &plan)?;
            (None, report)
        }
        (None, Some(c)) => {
            let (model, stats) = checkpoint::load(c)?;
            model.spec.features.check_compatible(&dataset.layout)?;
            let plan = EvaluationPlan::new(
                fcts,
                ev.horizon.unwrap_or(model.spec.horizon),
                ev.quantiles.clone().unwrap_or_else(|| model.spec.quantiles.clone()),
            );
            let opts = RollingOptions {
                retrain: ev.retrain.then(|| run.config.training_config(None)),
                refit_normalization: ev.refit_normalization,
                threads: run.config.training.threads,
            };
            let (grids, report) = rolling_evaluate(&dataset, &model, &stats, &plan, &opts)?;
            (Some(grids), report)
        }
        (None, None) => return Err(usage("evaluate needs --grids or --checkpoint")),
    };
    if let Some(grids) = grids {
        let p = run.path("grids", "grids.csv");
        write_file(&p, |b| write_grids(&grids, b))?;
    }
    let p = run.path("metrics", "metrics.csv");
    write_file(&p, |b| report.write_csv(b))?;
    let p = run.path("horizon_curve", "horizon_curve.csv");
    write_file(&p, |b| report.write_horizon_curve(b))?;
    let p = run.path("summary", "summary.txt");
    fs::write(&p, report.summary())?;
    run.finish()
}

pub fn cmd_synthesize(a: &CommonArgs) -> Result<()> {
    let mut run = Run::start("synthesize", a)?;
    let bench = synthesize(run.config.training.seed, &run.config.synth)?;
    let p = run.path("data", "data.csv");
    write_file(&p, |b| export_csv(&bench.dataset, &bench.schema, b))?;
    let p = run.path("schema", "schema.toml");
    fs::write(&p, bench.schema.to_toml())?;
    let p = run.path("oracle", "oracle.csv");
    write_file(&p, |b| write_oracle_csv(&bench, b))?;
    run.finish()
}

pub fn cmd_report(a: &CommonArgs) -> Result<()> {
    let mut run = Run::start("report", a)?;
    let dataset = load_dataset(a)?;
    let gpath = required(&a.grids, "grids")?;
    let grids = read_grids(fs::File::open(gpath).with_context(|| format!("opening {}", gpath.display()))?)?;
    if a.series.is_empty() {
        return Err(usage("report needs --series"));
    }
    let mut unknown = Vec::new();
    let mut rows = Vec::new();
    for id in &a.series {
        let (Some(rec), true) = (dataset.get(id), grids.iter().any(|g| &g.series_id == id)) else {
            unknown.push(id.clone());
            continue;
        };
        for g in grids.iter().filter(|g| &g.series_id == id) {
            if !a.fct.is_empty() && !a.fct.contains(&g.fct) {
                continue;
            }
            let fig = svg::band_figure(rec, g);
            let p = run.path(&format!("svg:{id}@{}", g.fct), &format!("{id}_{}.svg", g.fct));
            fs::write(&p, fig)?;
            rows.extend(svg::band_rows(rec, g));
        }
    }
    let p = run.path("bands", "bands.csv");
    let levels = grids.first().map(|g| g.quantiles.clone()).unwrap_or_default();
    write_file(&p, |b| svg::write_band_csv(&levels, &rows, b))?;
    run.finish()?;
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(UnknownSeries(unknown).into())
    }
}
