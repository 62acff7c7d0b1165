use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use fsa_core::assess::assess;
use fsa_core::dataset::{generate_benchmark_grid, label_dataset, BenchmarkConfig, ConditionSpec, FaultSpec, LabeledDataset, Scenario, Split};
use fsa_core::eval::{evaluate, EvalSettings};
use fsa_core::experiment::{run_experiment, runs_to_csv, summary_to_csv, ExperimentKind, ExperimentManifest};
use fsa_core::grid::{validate_grid, GridSpec};
use fsa_core::model::{FusionModel, ModelError, SecurityThresholds};
use fsa_core::nn::NnError;
use fsa_core::train::{
    finetune_stage2, pretrain_stage1, train_baseline, train_cn_stage3, BaselineData, BaselineKind, LabeledSet,
    PipelineConfig, Predictor, TrainError,
};

/// Environment variable holding the default worker count.
const WORKERS_ENV: &str = "FSA_WORKERS";

#[derive(Parser)]
#[command(name = "fsa", version, about = "Frequency security assessment with a knowledge-guided fusion model")]
struct Cli {
    /// Worker threads (default: $FSA_WORKERS, else all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark grid.
    GenGrid(GenGridArgs),
    /// Build and label a benchmark dataset.
    GenData(GenDataArgs),
    /// Stage 1: pretrain the MLP channel on closed-form knowledge.
    Pretrain(StageArgs),
    /// Stage 2: fine-tune all main channels on oracle labels.
    Train(StageArgs),
    /// Stage 3: train the constraint corrector.
    TrainCn(StageArgs),
    /// Train one baseline kind end to end.
    TrainBaseline(BaselineArgs),
    /// Screen one operating condition against a fault list.
    Assess(AssessArgs),
    /// Evaluate a model on a dataset split.
    Eval(EvalArgs),
    /// Run a multi-seed experiment.
    Experiment(ExperimentArgs),
    /// Time labelling and assessment.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenGridArgs {
    /// Benchmark config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    buses: Option<usize>,
    #[arg(long)]
    gens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Conditions per penetration level.
    #[arg(long)]
    conditions: Option<usize>,
    #[arg(long)]
    faults: Option<usize>,
    /// Label on one thread.
    #[arg(long)]
    serial: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct StageArgs {
    /// Labelled dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Input checkpoint (required for train-cn; optional for train).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Knowledge CSV for pretraining; sampled from the config when absent.
    #[arg(long)]
    knowledge: Option<PathBuf>,
    /// Use only the first N training records.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    /// KD, DD, SFD, PFD, GL or GL_CN.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AssessArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    /// JSON with one condition or a list of conditions.
    #[arg(long)]
    condition: PathBuf,
    /// Pick this id when the condition file holds a list.
    #[arg(long)]
    condition_id: Option<usize>,
    #[arg(long)]
    faults: PathBuf,
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Writes <out>.json and <out>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val, test or generalization.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// scarcity, knowledge_error, generalization or headline.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated training sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to time assessment with; labelling only when absent.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Validation(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

fn nn_error(e: &NnError) -> CliError {
    match e {
        NnError::NonFinite(_) => CliError::Numerical(e.to_string()),
        _ => CliError::Validation(e.to_string()),
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Nn(n) => nn_error(n),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Nn(n) => nn_error(&n),
            TrainError::Model(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}
validation_from!(
    std::io::Error,
    serde_json::Error,
    fsa_core::dataset::DatasetError,
    fsa_core::grid::GridError,
    fsa_core::asfr::AsfrError,
    fsa_core::eval::EvalError
);

type Result<T> = std::result::Result<T, CliError>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn config_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map_or_else(|| Ok(T::default()), read_json)
}

fn print_config<T: Serialize>(name: &str, value: &T) {
    println!("{name} {}", serde_json::to_string(value).expect("config serializes"));
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn pipeline_config(a: &PipelineArgs) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = config_or_default(&a.config)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    for stage in [&mut cfg.pretrain, &mut cfg.finetune, &mut cfg.cn] {
        if let Some(e) = a.epochs {
            stage.epochs = e;
        }
        if let Some(lr) = a.lr {
            stage.learning_rate = lr;
        }
        if let Some(b) = a.batch_size {
            stage.batch_size = b;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A checkpoint file holds either a predictor or a bare fusion model.
fn load_predictor(path: &Path) -> Result<Predictor> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if let Ok(p) = serde_json::from_str::<Predictor>(&text) {
        return Ok(p);
    }
    let model = FusionModel::from_json(&text)?;
    let gated = model.cn_trained;
    Ok(Predictor::Model { model: Box::new(model), gated })
}

fn load_model(path: &Path) -> Result<FusionModel> {
    match load_predictor(path)? {
        Predictor::Model { model, .. } => Ok(*model),
        Predictor::Knowledge { .. } => Err(CliError::Validation("the closed-form predictor has no trainable model".into())),
    }
}

struct Splits<'a> {
    train: LabeledSet<'a>,
    val: LabeledSet<'a>,
}

fn splits(ds: &LabeledDataset, limit: Option<usize>) -> Result<Splits<'_>> {
    let train: Vec<_> = ds.split(Split::Train).into_iter().take(limit.unwrap_or(usize::MAX)).collect();
    let val = ds.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Validation("dataset needs train and val records".into()));
    }
    Ok(Splits { train: LabeledSet::from_records(&train), val: LabeledSet::from_records(&val) })
}

fn gen_grid(a: GenGridArgs) -> Result<()> {
    let mut cfg: BenchmarkConfig = config_or_default(&a.config)?;
    cfg.n_buses = a.buses.unwrap_or(cfg.n_buses);
    cfg.n_gen = a.gens.unwrap_or(cfg.n_gen);
    cfg.grid_seed = a.seed.unwrap_or(cfg.grid_seed);
    print_config("config", &cfg);
    let spec = generate_benchmark_grid(cfg.n_buses, cfg.n_gen, cfg.mix, cfg.grid_seed)?;
    validate_grid(spec.clone())?;
    write(&a.out, &spec.to_json())?;
    println!("wrote {} nodes to {}", spec.nodes.len(), a.out.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: BenchmarkConfig = config_or_default(&a.config)?;
    cfg.conditions_per_level = a.conditions.unwrap_or(cfg.conditions_per_level);
    cfg.n_faults = a.faults.unwrap_or(cfg.n_faults);
    print_config("config", &cfg);
    let start = Instant::now();
    let scenario = Scenario::build(&cfg)?;
    let ds = label_dataset(&scenario, !a.serial)?;
    ds.write(&a.out)?;
    println!(
        "labelled {} records ({} dropped) in {:.1} s; counts {:?}",
        ds.records.len(),
        ds.manifest.dropped.len(),
        start.elapsed().as_secs_f64(),
        ds.manifest.counts
    );
    Ok(())
}

fn pretrain(a: StageArgs) -> Result<()> {
    let cfg = pipeline_config(&a.pipeline)?;
    print_config("config", &cfg);
    let ds = LabeledDataset::read(&a.data)?;
    let s = splits(&ds, a.limit)?;
    let mut model = match &a.model {
        Some(p) => load_model(p)?,
        None => FusionModel::new(cfg.model.clone())?,
    };
    model.fit_normalization(&s.train.samples, &s.train.labels)?;
    let knowledge = match &a.knowledge {
        Some(p) => fsa_core::asfr::KnowledgeDataset::read_csv(fs::File::open(p)?, ds.f_n())?,
        None => fsa_core::asfr::sample_knowledge_dataset(
            &cfg.knowledge.sampler,
            cfg.knowledge.n_samples,
            cfg.knowledge.seed,
            ds.f_n(),
        )?,
    };
    let outcome = pretrain_stage1(&mut model, &knowledge, &cfg.pretrain)?;
    fsa_core::train::init_head_from_pretrain(&mut model)?;
    model.save(&a.out)?;
    write(&a.out.with_extension("loss.csv"), &outcome.curve.to_csv())?;
    println!("held-out knowledge mse {:.4e}; wrote {}", outcome.heldout_mse, a.out.display());
    Ok(())
}

fn train(a: StageArgs) -> Result<()> {
    let cfg = pipeline_config(&a.pipeline)?;
    print_config("config", &cfg);
    let ds = LabeledDataset::read(&a.data)?;
    let s = splits(&ds, a.limit)?;
    let mut model = match &a.model {
        Some(p) => load_model(p)?,
        None => {
            let mut m = FusionModel::new(cfg.model.clone())?;
            m.fit_normalization(&s.train.samples, &s.train.labels)?;
            m
        }
    };
    let curve = finetune_stage2(&mut model, &s.train, &s.val, &cfg.finetune)?;
    model.save(&a.out)?;
    write(&a.out.with_extension("loss.csv"), &curve.to_csv())?;
    println!("best epoch {} val mse {:.4e}; wrote {}", curve.best_epoch, curve.best_val, a.out.display());
    Ok(())
}

fn train_cn(a: StageArgs) -> Result<()> {
    let cfg = pipeline_config(&a.pipeline)?;
    print_config("config", &cfg);
    let ds = LabeledDataset::read(&a.data)?;
    let s = splits(&ds, a.limit)?;
    let path = a.model.as_ref().ok_or_else(|| CliError::Usage("train-cn needs --model".into()))?;
    let mut model = load_model(path)?;
    let unlabeled: Vec<_> = match a.limit {
        Some(n) => ds.split(Split::Train).into_iter().skip(n).take(2048).map(|r| &r.input).collect(),
        None => Vec::new(),
    };
    let curve = train_cn_stage3(&mut model, &s.train, &unlabeled, &s.val, &cfg.cn, &cfg.cn_augment)?;
    model.save(&a.out)?;
    write(&a.out.with_extension("loss.csv"), &curve.to_csv())?;
    println!("best epoch {} val loss {:.4e}; wrote {}", curve.best_epoch, curve.best_val, a.out.display());
    Ok(())
}

fn train_baseline_cmd(a: BaselineArgs) -> Result<()> {
    let kind = BaselineKind::parse(&a.kind).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = pipeline_config(&a.pipeline)?;
    print_config("config", &cfg);
    let ds = LabeledDataset::read(&a.data)?;
    let s = splits(&ds, a.limit)?;
    let unlabeled: Vec<_> = match a.limit {
        Some(n) => ds.split(Split::Train).into_iter().skip(n).take(2048).map(|r| &r.input).collect(),
        None => Vec::new(),
    };
    let data = BaselineData { train: s.train, val: s.val, unlabeled, knowledge: None };
    let trained = train_baseline(kind, &data, &cfg)?;
    write(&a.out, &serde_json::to_string(&trained.predictor)?)?;
    for (i, c) in trained.curves.iter().enumerate() {
        write(&a.out.with_extension(format!("loss{i}.csv")), &c.to_csv())?;
    }
    println!("trained {}; wrote {}", kind.as_str(), a.out.display());
    Ok(())
}

fn thresholds(path: &Option<PathBuf>) -> Result<SecurityThresholds> {
    let t: SecurityThresholds = config_or_default(path)?;
    t.validate()?;
    Ok(t)
}

fn assess_cmd(a: AssessArgs) -> Result<ExitCode> {
    let t = thresholds(&a.thresholds)?;
    print_config("thresholds", &t);
    let predictor = load_predictor(&a.model)?;
    let grid = validate_grid(GridSpec::load(&a.grid)?)?;
    let text = fs::read_to_string(&a.condition)?;
    let conditions: Vec<ConditionSpec> = match serde_json::from_str::<ConditionSpec>(&text) {
        Ok(c) => vec![c],
        Err(_) => serde_json::from_str(&text)?,
    };
    let conditions: Vec<ConditionSpec> = match a.condition_id {
        Some(id) => conditions.into_iter().filter(|c| c.id == id).collect(),
        None => conditions,
    };
    if conditions.is_empty() {
        return Err(CliError::Validation("no matching condition".into()));
    }
    let faults: Vec<FaultSpec> = read_json(&a.faults)?;
    if faults.is_empty() {
        eprintln!("warning: empty fault list");
    }
    let mut tables = Vec::new();
    let mut failed = 0;
    for c in &conditions {
        let table = assess(&predictor, &grid, c, &faults, &t)?;
        println!("condition {}: {} faults in {:.3} s", c.id, table.rows.len(), table.elapsed_seconds);
        failed += table.failed_rows();
        tables.push(table);
    }
    match &a.out {
        Some(out) => {
            write(&out.with_extension("json"), &serde_json::to_string_pretty(&tables)?)?;
            let csv: String = tables
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let c = t.to_csv();
                    if i == 0 { c } else { c.split_once('\n').map_or(String::new(), |(_, rest)| rest.to_string()) }
                })
                .collect();
            write(&out.with_extension("csv"), &csv)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&tables)?),
    }
    if failed > 0 {
        eprintln!("{failed} fault(s) could not be assessed");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let t = thresholds(&a.thresholds)?;
    print_config("thresholds", &t);
    let split = Split::parse(&a.split).ok_or_else(|| CliError::Usage(format!("unknown split {}", a.split)))?;
    let predictor = load_predictor(&a.model)?;
    let ds = LabeledDataset::read(&a.data)?;
    let recs = ds.split(split);
    let set = LabeledSet::from_records(&recs);
    let preds = predictor.predict(&set.samples)?;
    let ctxs: Vec<_> = set.samples.iter().map(|s| s.ctx).collect();
    let kind = match &predictor {
        Predictor::Knowledge { .. } => "KD",
        Predictor::Model { gated: true, .. } => "model_gated",
        Predictor::Model { .. } => "model",
    };
    let settings = EvalSettings { thresholds: t, ..EvalSettings::new(ds.f_n()) };
    let report = evaluate(kind, &preds, &set.labels, &ctxs, &settings)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => write(p, &json)?,
        None => println!("{json}"),
    }
    println!("mape {:.3} % accuracy {:.4} on {} {} records", report.mape_overall, report.class_accuracy, recs.len(), split.as_str());
    Ok(())
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let kind = ExperimentKind::parse(&a.kind).ok_or_else(|| CliError::Usage(format!("unknown experiment {}", a.kind)))?;
    let mut manifest = match &a.manifest {
        Some(p) => read_json(p)?,
        None => ExperimentManifest::for_kind(kind),
    };
    if let Some(s) = a.seeds {
        manifest.seeds = s;
    }
    if let Some(s) = a.sizes {
        manifest.sizes = s;
    }
    manifest.pipeline.validate()?;
    print_config("manifest", &manifest);
    let ds = LabeledDataset::read(&a.data)?;
    let report = run_experiment(kind, &manifest, &ds);
    fs::create_dir_all(&a.out)?;
    write(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write(&a.out.join("runs.csv"), &runs_to_csv(&report.runs))?;
    write(&a.out.join("summary.csv"), &summary_to_csv(&report.summary))?;
    for row in &report.summary {
        println!(
            "{:6} n={:5} err={:.2} mape {:.3} ± {:.3} % accuracy {:.4} ± {:.4}",
            row.kind.as_str(),
            row.size,
            row.t_r_error,
            row.mape_mean,
            row.mape_std,
            row.accuracy_mean,
            row.accuracy_std
        );
    }
    if let Some(f) = report.failure {
        write(&a.out.join("FAILED"), &f)?;
        return Err(CliError::Validation(format!("experiment incomplete: {f}")));
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg: BenchmarkConfig = config_or_default(&a.config)?;
    cfg.conditions_per_level = 1;
    cfg.generalization_conditions = 1;
    print_config("config", &cfg);
    let scenario = Scenario::build(&cfg)?;
    let start = Instant::now();
    let ds = label_dataset(&scenario, true)?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "labelling: {} records in {:.2} s ({:.1} ms per record)",
        ds.records.len(),
        secs,
        1e3 * secs / ds.records.len().max(1) as f64
    );
    if let Some(p) = &a.model {
        let predictor = load_predictor(p)?;
        let cond = &scenario.conditions[0];
        let t = assess(&predictor, &scenario.grid, cond, &scenario.faults, &SecurityThresholds::default())?;
        println!("assess: {} faults in {:.3} s", t.rows.len(), t.elapsed_seconds);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let workers = match cli.workers {
        Some(w) => Some(w),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(v.parse().map_err(|_| CliError::Usage(format!("{WORKERS_ENV}={v} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(w) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    }
    match cli.cmd {
        Cmd::GenGrid(a) => gen_grid(a)?,
        Cmd::GenData(a) => gen_data(a)?,
        Cmd::Pretrain(a) => pretrain(a)?,
        Cmd::Train(a) => train(a)?,
        Cmd::TrainCn(a) => train_cn(a)?,
        Cmd::TrainBaseline(a) => train_baseline_cmd(a)?,
        Cmd::Assess(a) => return assess_cmd(a),
        Cmd::Eval(a) => eval_cmd(a)?,
        Cmd::Experiment(a) => experiment_cmd(a)?,
        Cmd::Bench(a) => bench(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
