//! The experiment protocols behind the subcommands, callable in-process.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use lorafwi_core::data::{split, subsample, Dataset, NormalizationStats, SampleSet, FRACTIONS};
use lorafwi_core::lora::{attach, LoraAdapter, LoraConfig, LoraModel};
use lorafwi_core::metrics::MetricsReport;
use lorafwi_core::model::{
    load_checkpoint_for, save_checkpoint_with, ArtifactMeta, InversionNet, LoadedCheckpoint, ModelConfig, Network,
};
use lorafwi_core::tensor::Tensor;
use lorafwi_core::train::{
    evaluate, evaluate_with, train, train_until, Method, OptimizerState, TrainConfig, TrainHistory, TrainState,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::report::{config_hash, improvement, Row, RowMethod, Split, SCHEMA_VERSION};

/// Working precision of every experiment.
pub type F = f32;

pub const DEFAULT_SPLIT: f64 = 0.8;

/// Optimizer and schedule settings shared by all training commands.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Defaults to a quarter of the epochs.
    pub warmup_epochs: Option<usize>,
    /// Defaults to 75% and 90% of the epochs.
    pub milestones: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        let d = TrainConfig::desk();
        Self {
            epochs: d.total_epochs,
            batch_size: d.batch_size,
            lr: d.base_lr,
            weight_decay: d.weight_decay,
            warmup_epochs: None,
            milestones: None,
            seed: 0,
        }
    }
}

impl TrainOpts {
    /// The desk schedule (5 warmup epochs, decays at 15 and 18 of 20)
    /// stretched to `epochs`.
    pub fn config(&self, method: Method, lora: Option<LoraConfig>) -> TrainConfig {
        let e = self.epochs;
        let warmup = self.warmup_epochs.unwrap_or(e / 4);
        let milestones = self.milestones.clone().unwrap_or_else(|| {
            let mut m: Vec<usize> = [3 * e / 4, 9 * e / 10].into_iter().filter(|&m| m > warmup && m < e).collect();
            m.dedup();
            m
        });
        TrainConfig {
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_epochs: warmup,
            milestones,
            total_epochs: e,
            batch_size: self.batch_size,
            seed: self.seed,
            method,
            lora,
            ..TrainConfig::desk()
        }
    }
}

pub fn load_datasets(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    paths.iter().map(|p| Dataset::load(p).with_context(|| format!("loading {}", p.display()))).collect()
}

fn check_dims(datasets: &[Dataset], config: &ModelConfig) -> Result<()> {
    for ds in datasets {
        ds.check_dims(config)?;
    }
    Ok(())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)[..6].iter().map(|b| format!("{b:02x}")).collect())
}

pub struct Pretrained {
    pub net: InversionNet<F>,
    pub meta: ArtifactMeta,
    /// Identifies the checkpoint file in config hashes.
    pub digest: String,
}

pub fn load_pretrained(path: &Path, config: &ModelConfig) -> Result<Pretrained> {
    let loaded: LoadedCheckpoint<F> =
        load_checkpoint_for(path, config).with_context(|| format!("loading {}", path.display()))?;
    Ok(Pretrained {
        net: loaded.model,
        meta: loaded.meta,
        digest: file_digest(path)?,
    })
}

#[derive(Serialize)]
struct PretrainSettings<'a> {
    command: &'static str,
    datasets: Vec<&'a str>,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

pub struct PretrainRun {
    pub net: InversionNet<F>,
    pub meta: ArtifactMeta,
    pub state: TrainState<F>,
    /// Epochs run by this invocation only.
    pub history: TrainHistory,
}

impl PretrainRun {
    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = self.state.optimizer.named_tensors();
        save_checkpoint_with(&self.net, &self.meta, &extra, path).with_context(|| format!("writing {}", path.display()))
    }
}

/// Trains a fresh model on the shuffled union of `datasets`, or continues
/// `resume`. Stops after epoch `stop_after` when given.
pub fn pretrain(
    datasets: &[Dataset],
    model_config: &ModelConfig,
    opts: &TrainOpts,
    resume: Option<LoadedCheckpoint<F>>,
    stop_after: Option<usize>,
) -> Result<PretrainRun> {
    ensure!(!datasets.is_empty(), "pretraining needs at least one dataset");
    if datasets.len() < 2 {
        log::warn!("pretraining on a single dataset; a multi-family mixture is expected");
    }
    check_dims(datasets, model_config)?;
    let config = opts.config(Method::Scratch, None);
    config.validate()?;
    let names: Vec<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
    let hash = config_hash(&PretrainSettings {
        command: "pretrain",
        datasets: names.clone(),
        model: model_config,
        train: &config,
    });

    let (mut net, mut state, stats) = match resume {
        Some(ck) => {
            ensure!(
                ck.meta.config_hash.as_deref() == Some(hash.as_str()),
                "resume checkpoint was written with different settings (hash {}, now {hash})",
                ck.meta.config_hash.as_deref().unwrap_or("none")
            );
            let stats = ck.meta.normalization.context("resume checkpoint has no normalization stats")?;
            let optimizer = OptimizerState::from_named(ck.meta.optimizer_steps.unwrap_or(0), ck.extra)?;
            let state = TrainState {
                optimizer,
                next_epoch: ck.meta.epochs_completed.unwrap_or(0),
            };
            (ck.model, state, stats)
        }
        None => {
            let stats = NormalizationStats::fit(datasets.iter().flat_map(|d| d.samples.iter().map(|s| &s.seismic)))?;
            (InversionNet::build(model_config, opts.seed)?, TrainState::default(), stats)
        }
    };

    let mut set = SampleSet::<F>::default();
    for ds in datasets {
        let all: Vec<usize> = (0..ds.len()).collect();
        set.extend(SampleSet::from_dataset(ds, &all, &stats)?);
    }
    let stop = stop_after.map_or(config.total_epochs, |s| s.min(config.total_epochs));
    let history = train_until(&mut net, &set, None, &config, &mut state, stop)?;
    let meta = ArtifactMeta {
        trained_on: names.iter().map(|s| s.to_string()).collect(),
        method: Some("pretrain".into()),
        normalization: Some(stats),
        epochs_completed: Some(state.next_epoch),
        optimizer_steps: Some(state.optimizer.step),
        seed: Some(opts.seed),
        config_hash: Some(hash),
    };
    Ok(PretrainRun {
        net,
        meta,
        state,
        history,
    })
}

/// One fine-tuning run: which method, how much data, which adapter shape.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSpec {
    pub method: RowMethod,
    /// Percentage of the training split, one of 10, 25, 50, 75, 100.
    pub fraction: u32,
    pub lora: Option<LoraConfig>,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub train: TrainOpts,
}

impl CellSpec {
    pub fn new(method: RowMethod, train: TrainOpts) -> Self {
        Self {
            method,
            fraction: 100,
            lora: (method == RowMethod::Lora).then(|| LoraConfig::new(16, 16.0)),
            split_fraction: DEFAULT_SPLIT,
            split_seed: 0,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            FRACTIONS.contains(&self.fraction),
            "fraction must be one of {FRACTIONS:?}, got {}",
            self.fraction
        );
        match (self.method, &self.lora) {
            (RowMethod::Lora, None) => bail!("method lora needs a rank and alpha"),
            (RowMethod::Lora, Some(c)) => c.validate()?,
            (_, Some(_)) => bail!("rank and alpha apply to method lora only"),
            (RowMethod::Pfm, _) => bail!("pfm is not a training method"),
            _ => {}
        }
        Ok(())
    }
}

pub enum Adapted {
    Full(InversionNet<F>),
    Lora(LoraModel<F>),
}

impl Adapted {
    pub fn predict(&mut self, x: &Tensor<F>) -> lorafwi_core::Result<Tensor<F>> {
        match self {
            Self::Full(n) => n.predict(x),
            Self::Lora(m) => m.predict(x),
        }
    }

    pub fn param_counts(&self) -> (usize, usize) {
        match self {
            Self::Full(n) => (n.param_count(true), n.param_count(false)),
            Self::Lora(m) => (m.param_count(true), m.param_count(false)),
        }
    }
}

pub struct CellResult {
    pub model: Adapted,
    pub metrics: MetricsReport,
    pub history: TrainHistory,
    pub row: Row,
    pub meta: ArtifactMeta,
}

impl CellResult {
    /// Full models become checkpoints, LoRA runs write the adapter only.
    pub fn save(&self, path: &Path) -> Result<()> {
        match &self.model {
            Adapted::Full(net) => save_checkpoint_with(net, &self.meta, &[], path),
            Adapted::Lora(m) => m.adapter().save(&self.meta, path),
        }
        .with_context(|| format!("writing {}", path.display()))
    }
}

/// Train and test indices of a task dataset after the data fraction.
pub fn task_indices(ds: &Dataset, spec: &CellSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let (train_idx, test_idx) = split(ds.len(), spec.split_fraction, spec.split_seed)?;
    let kept = subsample(&train_idx, spec.fraction, spec.split_seed)?;
    ensure!(
        kept.len() >= 2,
        "{}% of {} training samples leaves {}; at least 2 are needed",
        spec.fraction,
        train_idx.len(),
        kept.len()
    );
    Ok((kept, test_idx))
}

#[derive(Serialize)]
struct CellSettings<'a> {
    command: &'a str,
    dataset: &'a str,
    pfm: Option<&'a str>,
    model: &'a ModelConfig,
    cell: &'a CellSpec,
}

/// Fine-tunes (or trains from scratch, for the baseline) on the training
/// split of `ds` and scores the held-out split.
pub fn run_cell(
    command: &str,
    pfm: Option<&Pretrained>,
    ds: &Dataset,
    model_config: &ModelConfig,
    spec: &CellSpec,
) -> Result<CellResult> {
    spec.validate()?;
    ds.check_dims(model_config)?;
    match (spec.method, pfm) {
        (RowMethod::Baseline, Some(_)) => bail!("the baseline trains from scratch and takes no pretrained model"),
        (RowMethod::Fft | RowMethod::Lora, None) => bail!("method {} needs a pretrained model", spec.method),
        _ => {}
    }
    let start = Instant::now();
    let (train_idx, test_idx) = task_indices(ds, spec)?;
    let stats = match pfm {
        Some(p) => p.meta.normalization.context("pretrained checkpoint has no normalization stats")?,
        None => NormalizationStats::fit(train_idx.iter().map(|&i| &ds.samples[i].seismic))?,
    };
    let train_set = SampleSet::<F>::from_dataset(ds, &train_idx, &stats)?;
    let test_set = SampleSet::<F>::from_dataset(ds, &test_idx, &stats)?;

    let method = match spec.method {
        RowMethod::Baseline => Method::Scratch,
        RowMethod::Fft => Method::Fft,
        _ => Method::Lora,
    };
    let config = spec.train.config(method, spec.lora.clone());
    let (model, history) = match (spec.method, pfm) {
        (RowMethod::Lora, Some(p)) => {
            let mut m = attach(p.net.clone(), spec.lora.clone().expect("validated"), spec.train.seed)?;
            let h = train(&mut m, &train_set, None, &config)?;
            (Adapted::Lora(m), h)
        }
        (_, Some(p)) => {
            let mut net = p.net.clone();
            net.set_trainable(true);
            let h = train(&mut net, &train_set, None, &config)?;
            (Adapted::Full(net), h)
        }
        (_, None) => {
            let mut net = InversionNet::build(model_config, spec.train.seed)?;
            let h = train(&mut net, &train_set, None, &config)?;
            (Adapted::Full(net), h)
        }
    };
    let mut model = model;
    let metrics = evaluate_with(|x| model.predict(x), &test_set, spec.train.batch_size, false)?;
    let (trainable, total) = model.param_counts();
    let hash = config_hash(&CellSettings {
        command,
        dataset: &ds.name,
        pfm: pfm.map(|p| p.digest.as_str()),
        model: model_config,
        cell: spec,
    });
    let row = Row {
        schema: SCHEMA_VERSION,
        command: command.into(),
        train_dataset: ds.name.clone(),
        test_dataset: ds.name.clone(),
        split: Split::Test,
        method: spec.method,
        data_fraction: spec.fraction,
        rank: spec.lora.as_ref().map(|c| c.rank),
        alpha: spec.lora.as_ref().map(|c| c.alpha),
        trainable_params: trainable,
        total_params: total,
        n_train: train_set.len(),
        mae: metrics.mae,
        rmse: metrics.rmse,
        ssim: metrics.ssim,
        wall_seconds: start.elapsed().as_secs_f64(),
        seed: spec.train.seed,
        config_hash: hash.clone(),
        best: false,
        improvement_mae: None,
        improvement_rmse: None,
        improvement_ssim: None,
    };
    let meta = ArtifactMeta {
        trained_on: vec![ds.name.clone()],
        method: Some(spec.method.name().into()),
        normalization: Some(stats),
        epochs_completed: Some(config.total_epochs),
        optimizer_steps: Some(history.optimizer_steps),
        seed: Some(spec.train.seed),
        config_hash: Some(hash),
    };
    log::info!(
        "{} {} on {} ({}%, {} samples): mae {:.4} rmse {:.4} ssim {:.4}",
        command,
        spec.method,
        ds.name,
        spec.fraction,
        train_set.len(),
        metrics.mae,
        metrics.rmse,
        metrics.ssim
    );
    Ok(CellResult {
        model,
        metrics,
        history,
        row,
        meta,
    })
}

/// Rank/alpha grid of LoRA runs, sorted by MAE with the best row flagged.
pub fn sweep(
    pfm: &Pretrained,
    ds: &Dataset,
    model_config: &ModelConfig,
    ranks: &[usize],
    alphas: &[f64],
    base: &CellSpec,
    mut keep: impl FnMut(&CellResult) -> Result<()>,
) -> Result<Vec<Row>> {
    ensure!(!ranks.is_empty() && !alphas.is_empty(), "sweep needs at least one rank and one alpha");
    let scaling = base.lora.as_ref().map(|c| c.scaling).unwrap_or_default();
    let mut rows = Vec::new();
    for &r in ranks {
        for &a in alphas {
            let spec = CellSpec {
                method: RowMethod::Lora,
                lora: Some(LoraConfig::new(r, a).with_scaling(scaling)),
                ..base.clone()
            };
            let cell = run_cell("sweep", Some(pfm), ds, model_config, &spec)?;
            keep(&cell)?;
            rows.push(cell.row);
        }
    }
    rows.sort_by(|a, b| a.mae.total_cmp(&b.mae));
    rows[0].best = true;
    Ok(rows)
}

/// Fraction by method grid. LoRA rows carry their improvement over the
/// FFT row of the same fraction.
pub fn lowdata(
    pfm: &Pretrained,
    ds: &Dataset,
    model_config: &ModelConfig,
    fractions: &[u32],
    methods: &[RowMethod],
    base: &CellSpec,
) -> Result<Vec<Row>> {
    ensure!(!fractions.is_empty() && !methods.is_empty(), "lowdata needs fractions and methods");
    let mut rows = Vec::new();
    for &fraction in fractions {
        let first = rows.len();
        for &method in methods {
            let spec = CellSpec {
                method,
                fraction,
                lora: (method == RowMethod::Lora).then(|| base.lora.clone().unwrap_or_else(|| LoraConfig::new(16, 16.0))),
                ..base.clone()
            };
            let p = (method != RowMethod::Baseline).then_some(pfm);
            rows.push(run_cell("lowdata", p, ds, model_config, &spec)?.row);
        }
        let group = &mut rows[first..];
        let fft = group.iter().find(|r| r.method == RowMethod::Fft).cloned();
        if let Some(fft) = fft {
            for r in group.iter_mut().filter(|r| r.method == RowMethod::Lora) {
                let (m, e, s) = improvement(&fft, r);
                r.improvement_mae = Some(m);
                r.improvement_rmse = Some(e);
                r.improvement_ssim = Some(s);
            }
        }
    }
    Ok(rows)
}

/// A model ready for inference plus what it was trained on.
pub struct Evaluable {
    pub model: Adapted,
    pub meta: ArtifactMeta,
    pub digest: String,
}

/// Loads a checkpoint, optionally with an adapter on top. The adapter's
/// metadata then describes the model.
pub fn load_evaluable(model: &Path, adapter: Option<&Path>, config: &ModelConfig) -> Result<Evaluable> {
    let base = load_pretrained(model, config)?;
    match adapter {
        None => Ok(Evaluable {
            model: Adapted::Full(base.net),
            meta: base.meta,
            digest: base.digest,
        }),
        Some(path) => {
            let (a, mut meta) = LoraAdapter::<F>::load(path).with_context(|| format!("loading {}", path.display()))?;
            if meta.normalization.is_none() {
                meta.normalization = base.meta.normalization;
            }
            let digest = format!("{}+{}", base.digest, file_digest(path)?);
            Ok(Evaluable {
                model: Adapted::Lora(LoraModel::new(base.net, a)?),
                meta,
                digest,
            })
        }
    }
}

fn method_of(meta: &ArtifactMeta) -> RowMethod {
    match meta.method.as_deref() {
        Some("baseline") => RowMethod::Baseline,
        Some("fft") => RowMethod::Fft,
        Some("lora") => RowMethod::Lora,
        _ => RowMethod::Pfm,
    }
}

/// ID when the model was trained on the dataset, OOD otherwise, unknown
/// without training metadata.
pub fn tag(meta: &ArtifactMeta, dataset: &str) -> Split {
    if meta.trained_on.is_empty() {
        Split::Unknown
    } else if meta.trained_on.iter().any(|t| t == dataset) {
        Split::Id
    } else {
        Split::Ood
    }
}

/// One row per dataset, scored on its held-out split.
#[allow(clippy::too_many_arguments)]
pub fn eval_rows(
    mut predict: impl FnMut(&Tensor<F>) -> lorafwi_core::Result<Tensor<F>>,
    meta: &ArtifactMeta,
    params: (usize, usize),
    datasets: &[Dataset],
    ood: bool,
    split_fraction: f64,
    split_seed: u64,
    digest: &str,
) -> Result<Vec<Row>> {
    ensure!(!datasets.is_empty(), "eval needs at least one dataset");
    let stats = meta.normalization.context("model has no normalization stats")?;
    let hash = config_hash(&(digest, split_fraction, split_seed, ood));
    let mut rows = Vec::new();
    for ds in datasets {
        let start = Instant::now();
        let (_, test_idx) = split(ds.len(), split_fraction, split_seed)?;
        let set = SampleSet::<F>::from_dataset(ds, &test_idx, &stats)?;
        let m = evaluate_with(&mut predict, &set, 8, false)?;
        rows.push(Row {
            schema: SCHEMA_VERSION,
            command: "eval".into(),
            train_dataset: if meta.trained_on.is_empty() { "unknown".into() } else { meta.trained_on.join("+") },
            test_dataset: ds.name.clone(),
            split: if ood { tag(meta, &ds.name) } else { Split::Test },
            method: method_of(meta),
            data_fraction: 100,
            rank: None,
            alpha: None,
            trainable_params: params.0,
            total_params: params.1,
            n_train: 0,
            mae: m.mae,
            rmse: m.rmse,
            ssim: m.ssim,
            wall_seconds: start.elapsed().as_secs_f64(),
            seed: meta.seed.unwrap_or(0),
            config_hash: hash.clone(),
            best: false,
            improvement_mae: None,
            improvement_rmse: None,
            improvement_ssim: None,
        });
    }
    Ok(rows)
}

/// Scores a network on the held-out split of `ds`.
pub fn score<N: Network<F>>(model: &mut N, ds: &Dataset, stats: &NormalizationStats, spec: &CellSpec) -> Result<MetricsReport> {
    let (_, test_idx) = task_indices(ds, spec)?;
    let set = SampleSet::<F>::from_dataset(ds, &test_idx, stats)?;
    Ok(evaluate(model, &set, spec.train.batch_size)?)
}
