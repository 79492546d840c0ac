//! `tsrm` command-line runner.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error,
//! 3 numeric failure. Results go to stdout and files; diagnostics go to
//! stderr.

pub mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::RunConfig;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use tsrm::checkpoint;
use tsrm::data::{make_windows, SeriesDataset, Split};
use tsrm::explain::{explain_window, DEFAULT_THRESHOLD};
use tsrm::model::{ModelConfig, Tsrm};
use tsrm::tasks::{write_records_csv, EvalRecord, Task};
use tsrm::train::{eval_mask_seed, evaluate, prepare_batch, train, write_history_csv, Objective, TrainOutcome};
use tsrm::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.tsrm";
pub const HISTORY_FILE: &str = "history.csv";
pub const SNAPSHOT_FILE: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

const EVAL_BATCH: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "tsrm", version, about = "Train, evaluate and explain TSRM time-series models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints.
    Eval(EvalArgs),
    /// Export an attention report for one window.
    Explain(ExplainArgs),
    /// Train and compare ablation variants of a run config.
    Ablate(AblateArgs),
    /// Print trainable parameter counts.
    CountParams(CountArgs),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Replaces `train.seed` (also the initialization seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accept hyperparameters outside the documented ranges.
    #[arg(long)]
    pub force_ranges: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; replaces `out` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads per batch; replaces `train.jobs`.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file; repeat for one row per horizon.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Missing ratios for imputation checkpoints (comma separated);
    /// defaults to the training ratio.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Vec<f64>,
    /// Run config that must agree with each checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Window index within the split.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Output directory for `report.json` and `report.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    #[value(name = "n_sweep", alias = "n-sweep")]
    NSweep,
    #[value(name = "no_merge", alias = "no-merge")]
    NoMerge,
    #[value(name = "r1", alias = "R1")]
    R1,
    #[value(name = "r0", alias = "R0")]
    R0,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub variant: Variant,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Variants trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Channel count; read from the dataset when omitted.
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub force_ranges: bool,
}

/// Maps library errors onto the documented exit codes.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::Numeric(_) => 3,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Explain(a) => cmd_explain(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::CountParams(a) => cmd_count(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// A parsed run config with the directory its relative paths fall back to.
struct LoadedRun {
    cfg: RunConfig,
    base: PathBuf,
}

fn load_run(path: &Path, o: &Overrides) -> Result<LoadedRun> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = o.seed {
        cfg.train.seed = seed;
    }
    cfg.model.force_ranges |= o.force_ranges;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = std::fs::canonicalize(&base).unwrap_or(base);
    Ok(LoadedRun { cfg, base })
}

/// Result of one training run.
struct RunResult {
    model: Tsrm,
    outcome: TrainOutcome,
    test: (f64, f64),
}

fn train_run(cfg: &RunConfig, ds: &SeriesDataset, model_cfg: ModelConfig) -> Result<RunResult> {
    let objective = cfg.objective()?;
    cfg.train.validate()?;
    let (t, h, task) = (model_cfg.lookback, model_cfg.horizon, objective.task());
    let train_w = make_windows(ds, Split::Train, t, h, cfg.stride, task)?;
    let val_w = make_windows(ds, Split::Val, t, h, 1, task)?;
    let test_w = make_windows(ds, Split::Test, t, h, 1, task)?;
    log::info!(
        "{} windows: {} train, {} val, {} test",
        ds.name,
        train_w.len(),
        val_w.len(),
        test_w.len()
    );
    let mut model = Tsrm::new(model_cfg, cfg.train.seed)?;
    let outcome = train(&mut model, &train_w, &val_w, objective, &cfg.train)?;
    let test = evaluate(&model, &test_w, objective, eval_mask_seed(cfg.train.seed), eval_batch(cfg))?;
    Ok(RunResult { model, outcome, test })
}

fn eval_batch(cfg: &RunConfig) -> usize {
    cfg.train.batch_size.max(EVAL_BATCH)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let LoadedRun { mut cfg, base } = load_run(&a.config, &a.overrides)?;
    if let Some(out) = &a.out {
        cfg.out = out.clone();
    }
    if let Some(j) = a.jobs {
        cfg.train.jobs = j;
    }
    cfg.objective()?;
    cfg.train.validate()?;
    let ds = cfg.load_dataset(&base)?;
    let model_cfg = cfg.model_config(ds.channels())?;
    let resolved = cfg.resolved(&model_cfg);
    let hash = resolved.hash();
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(SNAPSHOT_FILE), resolved.to_toml().as_bytes())?;

    let run = train_run(&resolved, &ds, model_cfg)?;
    let meta = json!({
        "run_config": resolved,
        "config_hash": hash,
        "data_base": base,
        "best_epoch": run.outcome.best_epoch,
        "best_val_mse": run.outcome.best_val_mse,
    });
    checkpoint::save(&cfg.out.join(CHECKPOINT_FILE), &run.model, meta)?;
    let mut hist = Vec::new();
    write_history_csv(&mut hist, &run.outcome.history)?;
    write_file(&cfg.out.join(HISTORY_FILE), &hist)?;

    let record = EvalRecord {
        split: Split::Test.to_string(),
        task: resolved.task,
        setting: setting_label(&resolved, None),
        epoch: Some(run.outcome.best_epoch),
        config_hash: hash,
        mse: run.test.0,
        mae: run.test.1,
    };
    let mut csv = Vec::new();
    write_records_csv(&mut csv, std::slice::from_ref(&record))?;
    write_file(&cfg.out.join(EVAL_FILE), &csv)?;
    println!(
        "trained {} parameters; best epoch {} (val mse {:.6}); test mse {:.6}, mae {:.6}",
        run.model.count_parameters(),
        run.outcome.best_epoch,
        run.outcome.best_val_mse,
        run.test.0,
        run.test.1
    );
    println!("outputs in {}", cfg.out.display());
    Ok(())
}

fn setting_label(cfg: &RunConfig, ratio: Option<f64>) -> String {
    match cfg.task {
        Task::Forecast => cfg.horizon().to_string(),
        Task::Impute => ratio.or(cfg.missing_ratio).map(|r| r.to_string()).unwrap_or_default(),
    }
}

/// Checkpoint with the run config and metadata stored at training time.
struct LoadedCheckpoint {
    model: Tsrm,
    cfg: RunConfig,
    base: PathBuf,
    best_epoch: Option<usize>,
}

fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (model, header) = checkpoint::load(path)?;
    let meta = &header.metadata;
    let cfg: RunConfig = serde_json::from_value(meta.get("run_config").cloned().unwrap_or_default())
        .map_err(|e| Error::Config(format!("checkpoint {} carries no usable run config: {e}", path.display())))?;
    let base = meta.get("data_base").and_then(|v| v.as_str()).map(PathBuf::from).unwrap_or_default();
    let best_epoch = meta.get("best_epoch").and_then(|v| v.as_u64()).map(|v| v as usize);
    Ok(LoadedCheckpoint { model, cfg, base, best_epoch })
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let expected = a
        .config
        .as_ref()
        .map(|p| load_run(p, &Overrides { seed: None, force_ranges: false }))
        .transpose()?;
    let mut records = Vec::new();
    for path in &a.checkpoint {
        let ck = load_checkpoint(path)?;
        let (cfg, base) = match &expected {
            Some(run) => {
                let mut want = run.cfg.clone();
                want.model.force_ranges |= ck.model.config.force_ranges;
                let model_cfg = want.model_config(ck.model.config.features)?;
                if model_cfg != ck.model.config || want.task != ck.cfg.task {
                    return Err(Error::Config(format!(
                        "checkpoint {} does not match config {}",
                        path.display(),
                        a.config.as_ref().unwrap().display()
                    )));
                }
                (want, run.base.clone())
            }
            None => (ck.cfg.clone(), ck.base.clone()),
        };
        let ds = cfg.load_dataset(&base)?;
        if ds.channels() != ck.model.config.features {
            return Err(Error::Config(format!(
                "checkpoint expects {} channels, dataset {} has {}",
                ck.model.config.features,
                ds.name,
                ds.channels()
            )));
        }
        let mc = &ck.model.config;
        let windows = make_windows(&ds, a.split.into(), mc.lookback, mc.horizon, 1, cfg.task)?;
        let objectives: Vec<(Objective, Option<f64>)> = match cfg.objective()? {
            Objective::Forecast => vec![(Objective::Forecast, None)],
            Objective::Impute { ratio, single_rm_weighting } if a.ratios.is_empty() => {
                vec![(Objective::Impute { ratio, single_rm_weighting }, Some(ratio))]
            }
            Objective::Impute { single_rm_weighting, .. } => a
                .ratios
                .iter()
                .map(|&r| {
                    if !(r > 0.0 && r < 1.0) {
                        return Err(Error::Config(format!("missing ratio must lie strictly between 0 and 1, got {r}")));
                    }
                    Ok((Objective::Impute { ratio: r, single_rm_weighting }, Some(r)))
                })
                .collect::<Result<_>>()?,
        };
        let hash = cfg.hash();
        for (objective, ratio) in objectives {
            let (mse, mae) = evaluate(&ck.model, &windows, objective, eval_mask_seed(cfg.train.seed), eval_batch(&cfg))?;
            records.push(EvalRecord {
                split: Split::from(a.split).to_string(),
                task: cfg.task,
                setting: setting_label(&cfg, ratio),
                epoch: ck.best_epoch,
                config_hash: hash.clone(),
                mse,
                mae,
            });
        }
    }
    if records.len() > 1 {
        records.push(EvalRecord::average(&records)?);
    }
    let mut csv = Vec::new();
    write_records_csv(&mut csv, &records)?;
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_file(out, &csv)?;
    }
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", a.threshold)));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = ck.cfg.load_dataset(&ck.base)?;
    let mc = &ck.model.config;
    let windows = make_windows(&ds, a.split.into(), mc.lookback, mc.horizon, 1, ck.cfg.task)?;
    if a.window >= windows.len() {
        return Err(Error::Config(format!(
            "window {} is out of range: the {} split has {} windows",
            a.window,
            Split::from(a.split),
            windows.len()
        )));
    }
    let batch = prepare_batch(windows.batch(a.window..a.window + 1)?, ck.cfg.objective()?, eval_mask_seed(ck.cfg.train.seed))?;
    let x = batch.inputs.reshape(&[mc.lookback, mc.features])?;
    let mask = batch.mask.map(|m| m.reshape(&[mc.lookback, mc.features])).transpose()?;
    let report = explain_window(&ck.model, &x, mask.as_ref(), a.threshold, &ds.columns)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("report.json"), report.to_json().as_bytes())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&a.out.join("report.csv"), &csv)?;
    for f in &report.features {
        println!("{}: {} highlighted steps {:?}", f.name, f.highlights.len(), f.highlights);
    }
    println!("report written to {}", a.out.display());
    Ok(())
}

/// Ablation variants derived from `base`, labelled.
fn variant_configs(base: &ModelConfig, variant: Variant) -> Vec<(String, ModelConfig)> {
    let mut v = Vec::new();
    match variant {
        Variant::NSweep => {
            for n in 0..=8 {
                v.push((format!("N={n}"), ModelConfig { layers: n, ..base.clone() }));
            }
        }
        Variant::NoMerge => {
            v.push(("base".into(), base.clone()));
            v.push(("no_merge".into(), base.ablation_no_merge()));
        }
        Variant::R1 => {
            v.push(("base".into(), base.clone()));
            v.push(("R1".into(), base.ablation_r1()));
        }
        Variant::R0 => {
            v.push(("base".into(), base.clone()));
            v.push(("R0".into(), base.ablation_r0()));
        }
    }
    v
}

#[derive(serde::Serialize)]
struct AblationRow {
    variant: String,
    layers: usize,
    convs: String,
    merge_trainable: bool,
    params: usize,
    best_epoch: usize,
    val_mse: f64,
    test_mse: f64,
    test_mae: f64,
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let LoadedRun { mut cfg, base } = load_run(&a.config, &a.overrides)?;
    if let Some(out) = &a.out {
        cfg.out = out.clone();
    }
    if a.jobs == 0 {
        return Err(Error::Config("--jobs must be positive".into()));
    }
    cfg.objective()?;
    cfg.train.validate()?;
    let ds = cfg.load_dataset(&base)?;
    let base_model = cfg.model_config(ds.channels())?;
    let variants = variant_configs(&base_model, a.variant);
    for (_, mc) in &variants {
        mc.validate()?;
    }
    create_dir(&cfg.out)?;

    let run_one = |(label, mc): &(String, ModelConfig)| -> Result<AblationRow> {
        let resolved = cfg.resolved(mc);
        let mut resolved = resolved;
        resolved.model.layers = mc.layers;
        resolved.model.merge_trainable = mc.merge_trainable;
        let dir = cfg.out.join(label.replace('=', "_"));
        create_dir(&dir)?;
        write_file(&dir.join(SNAPSHOT_FILE), resolved.to_toml().as_bytes())?;
        let run = train_run(&resolved, &ds, mc.clone())?;
        let mut hist = Vec::new();
        write_history_csv(&mut hist, &run.outcome.history)?;
        write_file(&dir.join(HISTORY_FILE), &hist)?;
        log::info!("{label}: test mse {:.6}", run.test.0);
        Ok(AblationRow {
            variant: label.clone(),
            layers: mc.layers,
            convs: mc.convs.iter().map(|c| format!("s{}d{}", c.kernel, c.dilation)).collect::<Vec<_>>().join(" "),
            merge_trainable: mc.merge_trainable,
            params: run.model.count_parameters(),
            best_epoch: run.outcome.best_epoch,
            val_mse: run.outcome.best_val_mse,
            test_mse: run.test.0,
            test_mae: run.test.1,
        })
    };

    let mut results: Vec<Option<Result<AblationRow>>> = (0..variants.len()).map(|_| None).collect();
    let jobs = a.jobs.min(variants.len()).max(1);
    std::thread::scope(|scope| {
        let chunks: Vec<_> = results.chunks_mut(variants.len().div_ceil(jobs)).zip(variants.chunks(variants.len().div_ceil(jobs))).collect();
        for (slots, work) in chunks {
            let run_one = &run_one;
            scope.spawn(move || {
                for (slot, v) in slots.iter_mut().zip(work) {
                    *slot = Some(run_one(v));
                }
            });
        }
    });
    let rows = results.into_iter().map(|r| r.expect("every variant ran")).collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Data(format!("writing ablation CSV: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("writing ablation CSV: {e}")))?;
    write_file(&cfg.out.join(ABLATION_FILE), &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn cmd_count(a: &CountArgs) -> Result<()> {
    let model = match (&a.checkpoint, &a.config) {
        (Some(p), _) => checkpoint::load(p)?.0,
        (None, Some(p)) => {
            let LoadedRun { cfg, base } = load_run(p, &Overrides { seed: None, force_ranges: a.force_ranges })?;
            let features = match a.features {
                Some(f) => f,
                None => cfg.load_dataset(&base)?.channels(),
            };
            Tsrm::new(cfg.model_config(features)?, 0)?
        }
        (None, None) => return Err(Error::Config("give --config or --checkpoint".into())),
    };
    let mut parts: BTreeMap<String, usize> = BTreeMap::new();
    for (_, p) in model.params.iter().filter(|(_, p)| p.trainable) {
        let component = p.name.split('.').next().unwrap_or(&p.name).to_string();
        *parts.entry(component).or_default() += p.value.numel();
    }
    for (name, count) in &parts {
        println!("{name}\t{count}");
    }
    println!("total\t{}", model.count_parameters());
    Ok(())
}
