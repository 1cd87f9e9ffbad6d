use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use lorafwi_core::data::{synthesize_dataset, Dataset, DatasetSpec, Difficulty, Family, FRACTIONS};
use lorafwi_core::lora::{LoraConfig, ScalingMode};
use lorafwi_core::model::{load_checkpoint_for, ModelConfig};

use crate::config::merge_config_file;
use crate::experiments::{self, CellSpec, TrainOpts};
use crate::report::{self, RowMethod};

/// Bad flags or flag combinations. Exits with status 2, like clap's own
/// usage errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "lorafwi", version, about = "Full-waveform inversion experiments with low-rank adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a synthetic dataset and write it as an FWDS file.
    GenData(GenDataArgs),
    /// Train a model on a mixture of datasets.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained model to one dataset, or train the baseline.
    Finetune(FinetuneArgs),
    /// Score a model on several datasets.
    Eval(EvalArgs),
    /// LoRA rank and alpha grid.
    Sweep(SweepArgs),
    /// Methods against training-set fractions.
    Lowdata(LowdataArgs),
    /// Bar charts and a markdown table from a report CSV.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Tiny,
    Full,
}

impl PresetArg {
    pub fn config(self) -> ModelConfig {
        match self {
            Self::Tiny => ModelConfig::tiny(),
            Self::Full => ModelConfig::full(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Baseline,
    Fft,
    Lora,
}

impl From<MethodArg> for RowMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Baseline => RowMethod::Baseline,
            MethodArg::Fft => RowMethod::Fft,
            MethodArg::Lora => RowMethod::Lora,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScalingArg {
    /// s = alpha / r
    AlphaOverR,
    /// s = alpha
    Alpha,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key = value file of defaults for this subcommand's flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tiny")]
    pub preset: PresetArg,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 8e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Defaults to a quarter of the epochs.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Epochs at which the rate drops tenfold; defaults to 75% and 90%.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl TrainArgs {
    pub fn opts(&self) -> TrainOpts {
        TrainOpts {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            milestones: self.milestones.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    /// Share of each dataset used for training; the rest is the test split.
    #[arg(long, default_value_t = experiments::DEFAULT_SPLIT)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub family: Family,
    #[arg(long)]
    pub difficulty: Difficulty,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', required = true)]
    pub datasets: Vec<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Checkpoint to write (also after `--stop-after`).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV; defaults to the checkpoint path with `.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Continue from a checkpoint written by an interrupted run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct LoraArgs {
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub scaling: Option<ScalingArg>,
}

impl LoraArgs {
    fn any(&self) -> bool {
        self.rank.is_some() || self.alpha.is_some() || self.scaling.is_some()
    }

    fn config(&self) -> LoraConfig {
        let c = LoraConfig::new(self.rank.unwrap_or(16), self.alpha.unwrap_or(16.0));
        match self.scaling {
            Some(ScalingArg::Alpha) => c.with_scaling(ScalingMode::Alpha),
            _ => c,
        }
    }
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pretrained checkpoint, or `none` for the from-scratch baseline.
    #[arg(long)]
    pub pfm: String,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[command(flatten)]
    pub lora: LoraArgs,
    /// Percentage of the training split: 10, 25, 50, 75 or 100.
    #[arg(long, default_value_t = 100)]
    pub fraction: u32,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Checkpoint (fft, baseline) or adapter (lora) to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Report CSV; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// LoRA adapter applied on top of `--model`.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub datasets: Vec<PathBuf>,
    /// Tag rows ID or OOD against the datasets the model was trained on.
    #[arg(long)]
    pub ood: bool,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pfm: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64,128")]
    pub ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16")]
    pub alphas: Vec<f64>,
    #[arg(long, value_enum)]
    pub scaling: Option<ScalingArg>,
    #[arg(long, default_value_t = 100)]
    pub fraction: u32,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Directory for one adapter file per grid cell.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LowdataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pfm: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,75,100")]
    pub fractions: Vec<u32>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "fft,lora")]
    pub methods: Vec<MethodArg>,
    #[command(flatten)]
    pub lora: LoraArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub plots: PathBuf,
}

/// Parses `args` (program name first) after folding in any `--config`
/// file, then runs the subcommand.
pub fn run_from_args(args: Vec<String>) -> Result<()> {
    let (program, rest) = args.split_first().map(|(p, r)| (p.clone(), r.to_vec())).unwrap_or_default();
    let merged = merge_config_file(&Cli::command(), rest).map_err(|e| usage(format!("{e:#}")))?;
    let cli = Cli::try_parse_from(std::iter::once(program).chain(merged))?;
    run(cli.command)
}

/// The error and its causes on one line, skipping causes already quoted
/// by the message above them.
pub fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out.replace('\n', "; ")
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Lowdata(a) => lowdata(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn check_split(s: &SplitArgs) -> Result<()> {
    if !(s.split > 0.0 && s.split < 1.0) {
        return Err(usage(format!("--split must lie in (0, 1), got {}", s.split)));
    }
    Ok(())
}

fn check_fraction(f: u32) -> Result<()> {
    if !FRACTIONS.contains(&f) {
        return Err(usage(format!("--fraction must be one of 10, 25, 50, 75, 100, got {f}")));
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = DatasetSpec::for_model(a.family, a.difficulty, a.n, a.seed, &a.common.preset.config())?;
    let ds = synthesize_dataset(&spec)?;
    ds.save(&a.out)?;
    let bytes = ds.encode();
    // The file ends in the checksum of everything before it.
    let payload = &bytes[..bytes.len() - 4];
    println!(
        "wrote {} samples of {}-{} to {} (crc32 {:08x})",
        ds.len(),
        a.family,
        a.difficulty,
        a.out.display(),
        crc32fast::hash(payload)
    );
    Ok(())
}

fn history_path(a: &PretrainArgs) -> PathBuf {
    a.history.clone().unwrap_or_else(|| a.out.with_extension("history.csv"))
}

/// Keeps rows of epochs before `start` from an existing history file.
fn history_prefix(path: &Path, start: usize) -> Result<String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(String::new());
    };
    let mut out = String::new();
    for line in text.lines().skip(1) {
        let epoch: usize = line.split(',').next().and_then(|e| e.parse().ok()).context("malformed history file")?;
        if epoch < start {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let config = a.common.preset.config();
    let datasets = experiments::load_datasets(&a.datasets)?;
    let resume = a
        .resume
        .as_ref()
        .map(|p| load_checkpoint_for(p, &config).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let start = resume.as_ref().and_then(|r| r.meta.epochs_completed).unwrap_or(0);
    let hist_path = history_path(&a);
    let prefix = if resume.is_some() { history_prefix(&hist_path, start)? } else { String::new() };
    let run = experiments::pretrain(&datasets, &config, &a.train.opts(), resume, a.stop_after)?;
    run.save(&a.out)?;
    let csv = run.history.to_csv();
    let (header, body) = csv.split_once('\n').unwrap_or((csv.as_str(), ""));
    std::fs::write(&hist_path, format!("{header}\n{prefix}{body}")).with_context(|| format!("writing {}", hist_path.display()))?;
    println!(
        "pretrained on {} for epochs {}..{}: checkpoint {}, history {}",
        run.meta.trained_on.join("+"),
        start,
        run.state.next_epoch,
        a.out.display(),
        hist_path.display()
    );
    Ok(())
}

fn load_one(path: &Path) -> Result<Dataset> {
    Ok(experiments::load_datasets(std::slice::from_ref(&path.to_path_buf()))?.remove(0))
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    check_fraction(a.fraction)?;
    check_split(&a.split)?;
    if a.method != MethodArg::Lora && a.lora.any() {
        return Err(usage("--rank, --alpha and --scaling apply to --method lora only"));
    }
    let config = a.common.preset.config();
    let pfm = match a.pfm.as_str() {
        "none" => None,
        p => Some(experiments::load_pretrained(Path::new(p), &config)?),
    };
    let method = match (a.method, &pfm) {
        (MethodArg::Fft, None) => RowMethod::Baseline,
        (MethodArg::Lora, None) => return Err(usage("--method lora needs a pretrained model, not --pfm none")),
        (MethodArg::Baseline, Some(_)) => return Err(usage("--method baseline takes --pfm none")),
        (m, _) => m.into(),
    };
    let ds = load_one(&a.dataset)?;
    let spec = CellSpec {
        method,
        fraction: a.fraction,
        lora: (method == RowMethod::Lora).then(|| a.lora.config()),
        split_fraction: a.split.split,
        split_seed: a.split.split_seed,
        train: a.train.opts(),
    };
    let cell = experiments::run_cell("finetune", pfm.as_ref(), &ds, &config, &spec)?;
    cell.save(&a.out)?;
    let rows = [cell.row];
    match &a.report {
        Some(p) => report::write_csv(&rows, p)?,
        None => print!("{}", report::to_csv(&rows)?),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    check_split(&a.split)?;
    let config = a.common.preset.config();
    let mut model = experiments::load_evaluable(&a.model, a.adapter.as_deref(), &config)?;
    let datasets = experiments::load_datasets(&a.datasets)?;
    for ds in &datasets {
        ds.check_dims(&config)?;
    }
    if a.ood && model.meta.trained_on.is_empty() {
        log::warn!("model records no training datasets; every row is tagged unknown");
    }
    let params = model.model.param_counts();
    let rows = experiments::eval_rows(
        |x| model.model.predict(x),
        &model.meta,
        params,
        &datasets,
        a.ood,
        a.split.split,
        a.split.split_seed,
        &model.digest,
    )?;
    report::write_csv(&rows, &a.out)?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    check_fraction(a.fraction)?;
    check_split(&a.split)?;
    let config = a.common.preset.config();
    let pfm = experiments::load_pretrained(&a.pfm, &config)?;
    let ds = load_one(&a.dataset)?;
    let mut base = CellSpec::new(RowMethod::Lora, a.train.opts());
    base.lora = Some(LoraArgs { rank: None, alpha: None, scaling: a.scaling }.config());
    base.fraction = a.fraction;
    base.split_fraction = a.split.split;
    base.split_seed = a.split.split_seed;
    if let Some(dir) = &a.adapters {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let rows = experiments::sweep(&pfm, &ds, &config, &a.ranks, &a.alphas, &base, |cell| {
        let Some(dir) = &a.adapters else { return Ok(()) };
        let (r, al) = (cell.row.rank.unwrap_or(0), cell.row.alpha.unwrap_or(0.0));
        cell.save(&dir.join(format!("r{r}_a{al}.fwla")))
    })?;
    report::write_csv(&rows, &a.out)?;
    println!("wrote {} rows to {} (best r={:?} alpha={:?})", rows.len(), a.out.display(), rows[0].rank, rows[0].alpha);
    Ok(())
}

fn lowdata(a: LowdataArgs) -> Result<()> {
    check_split(&a.split)?;
    for &f in &a.fractions {
        check_fraction(f)?;
    }
    let config = a.common.preset.config();
    let pfm = experiments::load_pretrained(&a.pfm, &config)?;
    let ds = load_one(&a.dataset)?;
    let mut base = CellSpec::new(RowMethod::Fft, a.train.opts());
    base.lora = Some(a.lora.config());
    base.split_fraction = a.split.split;
    base.split_seed = a.split.split_seed;
    let methods: Vec<RowMethod> = a.methods.iter().map(|&m| m.into()).collect();
    let rows = experiments::lowdata(&pfm, &ds, &config, &a.fractions, &methods, &base)?;
    report::write_csv(&rows, &a.out)?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let rows = report::read_csv(&a.input)?;
    let written = crate::plot::render(&rows, &a.plots)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
