//! The subcommands. Each `cmd_*` validates everything it can before creating
//! any file, then does its work and returns the in-memory result.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use leafnet::data::{load_cache, make_split, preprocess_tree, PreprocessConfig, PreprocessReport, Split};
use leafnet::eval::{evaluate, ConfusionMatrix, EvalProtocol, EvalReport};
use leafnet::experiment::{
    prepare_network, run_experiment, run_on_split, summarize, Dataset, ExperimentReport, RunOutputs, RunReport,
};
use leafnet::model::{load_checkpoint, Checkpoint, DigestCheck, Network, TransferReport};
use leafnet::rng;
use leafnet::solver::{RunResult, SolverConfig};
use leafnet::synthetic::{desk_preprocess, write_dataset, Family, SyntheticConfig};
use serde::{Deserialize, Serialize};

use crate::args::{
    Cli, Command, ConfigArgs, EvalArgs, ExperimentArgs, FamilyArg, PreprocessArgs, PresetArg, ReportArgs,
    SyntheticArgs, TrainArgs,
};
use crate::config::{read_file_config, FileConfig, Overrides, RunConfig};
use crate::CliError;

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const RUN_CONFIG: &str = "config.toml";
/// Pixels per confusion-matrix cell in PGM renderings.
const PGM_CELL: usize = 8;

/// What a command did, with enough detail to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub leafnet_version: String,
    /// FNV-1a of the resolved configuration, hex.
    pub config_digest: Option<String>,
    /// One seed per run; every random stream derives from it.
    pub seeds: Vec<u64>,
    pub stream_ids: BTreeMap<String, u64>,
    pub dataset: Option<PathBuf>,
    pub pretrained: Option<PretrainedInfo>,
    pub transfer: Option<TransferReport>,
    pub replay: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainedInfo {
    pub path: PathBuf,
    pub digest: String,
    pub dataset: String,
    pub iteration: usize,
}

fn stream_ids() -> BTreeMap<String, u64> {
    [
        ("split", rng::SPLIT),
        ("init", rng::INIT),
        ("dropout", rng::DROPOUT),
        ("monitor", rng::MONITOR),
        ("eval", rng::EVAL),
        ("classifier_reinit", rng::CLASSIFIER_REINIT),
        ("batch_worker_base", rng::BATCH_WORKER_BASE),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn manifest(command: &str, run: Option<&RunConfig>, seeds: Vec<u64>, pretrained: Option<(&Path, &Checkpoint)>) -> RunManifest {
    RunManifest {
        command: command.into(),
        leafnet_version: env!("CARGO_PKG_VERSION").into(),
        config_digest: run.map(|r| format!("{:016x}", r.digest())),
        seeds,
        stream_ids: stream_ids(),
        dataset: run.map(|r| r.dataset.clone()),
        pretrained: pretrained.map(|(path, c)| PretrainedInfo {
            path: path.to_path_buf(),
            digest: format!("{:016x}", c.digest),
            dataset: c.meta.dataset.clone(),
            iteration: c.meta.iteration,
        }),
        transfer: None,
        replay: String::new(),
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&a).map(drop),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Eval(a) => cmd_eval(&a).map(drop),
        Command::Experiment(a) => cmd_experiment(&a).map(drop),
        Command::SyntheticDataset(a) => cmd_synthetic_dataset(&a).map(drop),
        Command::Report(a) => cmd_report(&a).map(drop),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_vec_pretty(value).map_err(CliError::runtime)?;
    text.push(b'\n');
    write_bytes(path, &text)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn resolve(args: &ConfigArgs, extra: Overrides) -> Result<RunConfig, CliError> {
    let file = match &args.config {
        Some(path) => read_file_config(path)?,
        None => FileConfig::default(),
    };
    let mut o = args.overrides();
    o.pretrained = extra.pretrained;
    o.runs = extra.runs;
    o.iterations = o.iterations.or(extra.iterations);
    o.seed = o.seed.or(extra.seed);
    file.resolve(o)
}

fn load_dataset(run: &RunConfig) -> Result<Dataset, CliError> {
    let root = &run.dataset;
    if !root.is_dir() {
        return Err(CliError::Validation(format!("dataset root {} does not exist", root.display())));
    }
    let cache = load_cache(root).map_err(|e| CliError::Validation(format!("dataset {}: {e}", root.display())))?;
    let canvas = cache.manifest.preprocess.canvas();
    let expected = run.experiment.geometry.canvas;
    if canvas != expected {
        return Err(CliError::Validation(format!(
            "config key 'canvas': cache holds {canvas} px canvases but the configuration expects {expected} px"
        )));
    }
    Dataset::new(cache.index, cache.images).map_err(CliError::validation)
}

fn load_pretrained(path: Option<&Path>) -> Result<Option<Checkpoint>, CliError> {
    path.map(|p| {
        load_checkpoint(p).map_err(|e| CliError::Validation(format!("pretrained checkpoint {}: {e}", p.display())))
    })
    .transpose()
}

fn split_for(dataset: &Dataset, run: &RunConfig, seed: u64) -> Result<Split, CliError> {
    let x = &run.experiment;
    let spec = x.split_spec().map_err(CliError::validation)?;
    make_split(&dataset.index, &spec, seed, x.count_all).map_err(|e| CliError::Validation(format!("split: {e}")))
}

/// Dry transfer: checks the pretrained checkpoint fits this network.
fn check_transfer(run: &RunConfig, classes: usize, seed: u64, pretrained: Option<&Checkpoint>) -> Result<Option<TransferReport>, CliError> {
    prepare_network(&run.experiment.network, classes, seed, pretrained)
        .map(|(_, report)| report)
        .map_err(|e| CliError::Validation(format!("pretrained checkpoint: {e}")))
}

fn write_run_config(run: &RunConfig) -> Result<PathBuf, CliError> {
    let path = run.output.join(RUN_CONFIG);
    write_bytes(&path, FileConfig::from_resolved(run).to_toml().as_bytes())?;
    Ok(path)
}

fn print_accuracies(evals: &[EvalReport]) {
    for e in evals {
        println!("{:<16} {:6.2}  ({}/{})", e.label, 100.0 * e.accuracy, e.correct, e.total);
    }
}

fn write_confusion(dir: &Path, stem: &str, matrix: &ConfusionMatrix, classes: &[String]) -> Result<(), CliError> {
    write_bytes(&dir.join(format!("{stem}.csv")), matrix.to_csv(classes).as_bytes())?;
    write_bytes(&dir.join(format!("{stem}.pgm")), &matrix.to_pgm(PGM_CELL))
}

fn write_eval_outputs(dir: &Path, evals: &[EvalReport], classes: &[String]) -> Result<(), CliError> {
    write_json(&dir.join("eval.json"), &evals)?;
    let mut csv = String::from("protocol,label,accuracy,correct,total\n");
    for e in evals {
        csv.push_str(&format!("{},{},{:.6},{},{}\n", e.protocol, e.label, e.accuracy, e.correct, e.total));
    }
    write_bytes(&dir.join("accuracies.csv"), csv.as_bytes())?;
    for e in evals {
        write_confusion(dir, &format!("confusion_{}", e.protocol.key()), &e.confusion, classes)?;
    }
    Ok(())
}

pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<PreprocessReport, CliError> {
    let mut config = match args.preset {
        PresetArg::Paper => PreprocessConfig::default(),
        PresetArg::Desk => desk_preprocess(),
    };
    config.threshold = args.threshold;
    if let Some(c) = args.content {
        config.content = c;
    }
    if let Some(m) = args.margin {
        config.margin = m;
    }
    if !args.root.is_dir() {
        return Err(CliError::Validation(format!("dataset root {} does not exist", args.root.display())));
    }
    if config.content == 0 {
        return Err(CliError::Validation("content size must be positive".into()));
    }
    let report = preprocess_tree(&args.root, &args.out, &config).map_err(CliError::runtime)?;
    let m = &report.manifest;
    for class in &m.classes {
        let n = m.entries.iter().filter(|e| &e.class == class).count();
        println!("{class:<24} {n:>5}");
    }
    println!(
        "{} images cached ({} written, {} unchanged) in {}",
        m.entries.len(),
        report.written,
        report.skipped,
        args.out.display()
    );
    for f in &m.failures {
        eprintln!("skipped {}: {}", f.source, f.reason);
    }
    if !report.empty_classes.is_empty() {
        return Err(CliError::Partial(format!("classes without usable images: {}", report.empty_classes.join(", "))));
    }
    Ok(report)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunReport, CliError> {
    let extra = Overrides {
        pretrained: args.pretrained.clone(),
        iterations: args.pretrain.then_some(SolverConfig::PRETRAIN_ITERATIONS),
        ..Overrides::default()
    };
    let run = resolve(&args.config, extra)?;
    let x = &run.experiment;
    let dataset = load_dataset(&run)?;
    let split = split_for(&dataset, &run, x.seed)?;
    let pretrained = load_pretrained(run.pretrained.as_deref())?;
    let transfer = check_transfer(&run, dataset.num_classes(), x.seed, pretrained.as_ref())?;

    create_dir(&run.output)?;
    let config_path = write_run_config(&run)?;
    let mut m = manifest("train", Some(&run), vec![x.seed], run.pretrained.as_deref().zip(pretrained.as_ref()));
    m.transfer = transfer;
    m.replay = format!("leafnet train --config {}", config_path.display());
    write_json(&run.output.join(RUN_MANIFEST), &m)?;

    let outputs = RunOutputs {
        dir: Some(run.output.clone()),
        verbose: !args.config.quiet,
    };
    let (_, report) =
        run_on_split(&dataset, &split, x, x.seed, pretrained.as_ref(), &outputs).map_err(CliError::runtime)?;
    print_accuracies(&report.evals);
    Ok(report)
}

/// The run directory holding `<run>/checkpoints/<name>.ckpt`, or the
/// checkpoint's own directory.
fn checkpoint_home(checkpoint: &Path) -> PathBuf {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    match dir.file_name() {
        Some(n) if n == "checkpoints" => dir.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => dir.to_path_buf(),
    }
}

/// `config.toml` of the run, or of the experiment containing the run.
fn default_eval_config(home: &Path) -> Option<PathBuf> {
    [home.join(RUN_CONFIG), home.join("..").join(RUN_CONFIG)]
        .into_iter()
        .find(|p| p.is_file())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<EvalReport>, CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)
        .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", args.checkpoint.display())))?;
    let home = checkpoint_home(&args.checkpoint);
    let mut config_args = args.config.clone();
    if config_args.config.is_none() {
        config_args.config = default_eval_config(&home);
    }
    if config_args.output.is_none() {
        config_args.output = Some(home.join("eval"));
    }
    let run = resolve(
        &config_args,
        Overrides {
            seed: Some(ckpt.meta.seed),
            ..Overrides::default()
        },
    )?;
    let x = &run.experiment;
    let dataset = load_dataset(&run)?;
    let meta = &ckpt.meta;
    if meta.network.input_size != x.geometry.crop {
        return Err(CliError::Validation(format!(
            "checkpoint expects {} px inputs but the crop size is {}",
            meta.network.input_size, x.geometry.crop
        )));
    }
    let mut network = Network::<f32>::build(&meta.network, dataset.num_classes()).map_err(CliError::validation)?;
    let check = if args.force { DigestCheck::Lenient } else { DigestCheck::Strict };
    ckpt.restore_into(&mut network, check).map_err(CliError::validation)?;
    if !args.force && !meta.class_names.is_empty() && meta.class_names != dataset.index.classes {
        return Err(CliError::Validation(
            "checkpoint class names differ from the dataset (use --force to override)".into(),
        ));
    }
    let split = split_for(&dataset, &run, x.seed)?;

    create_dir(&run.output)?;
    let mut m = manifest("eval", Some(&run), vec![x.seed], None);
    m.pretrained = Some(PretrainedInfo {
        path: args.checkpoint.clone(),
        digest: format!("{:016x}", ckpt.digest),
        dataset: meta.dataset.clone(),
        iteration: meta.iteration,
    });
    let protocols: Vec<String> = x.protocols.iter().map(|p| format!("--protocol {p}")).collect();
    m.replay = format!(
        "leafnet eval {} --dataset {} --split {} --seed {} {}{}",
        args.checkpoint.display(),
        run.dataset.display(),
        x.split,
        x.seed,
        protocols.join(" "),
        if args.force { " --force" } else { "" }
    );
    write_json(&run.output.join(RUN_MANIFEST), &m)?;

    let settings = x.eval_settings();
    let evals = x
        .protocols
        .iter()
        .map(|p| evaluate(&network, &dataset.images, &split.test, p, &settings, x.seed))
        .collect::<leafnet::Result<Vec<_>>>()
        .map_err(CliError::runtime)?;
    write_eval_outputs(&run.output, &evals, &dataset.index.classes)?;
    print_accuracies(&evals);
    Ok(evals)
}

fn write_experiment_outputs(dir: &Path, report: &ExperimentReport, classes: &[String]) -> Result<(), CliError> {
    write_json(&dir.join("experiment.json"), report)?;
    write_bytes(&dir.join("table.txt"), report.table().as_bytes())?;
    let mut csv = String::from("protocol,label,mean,std,runs\n");
    for p in &report.protocols {
        let a = &p.aggregate;
        csv.push_str(&format!("{},{},{:.6},{:.6},{}\n", p.key, p.label, a.mean, a.std, a.runs));
    }
    write_bytes(&dir.join("aggregate.csv"), csv.as_bytes())?;
    let mut runs = String::from("run,seed,status\n");
    for r in &report.runs {
        let status = match &r.outcome {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("failed: {}", e.replace(['\n', ','], " ")),
        };
        runs.push_str(&format!("{},{},{}\n", r.index, r.seed, status));
    }
    write_bytes(&dir.join("runs.csv"), runs.as_bytes())?;
    if let Some(m) = &report.merged_confusion {
        write_confusion(dir, "merged_confusion", m, classes)?;
    }
    Ok(())
}

/// Per-run statuses, then the error class the failures amount to.
fn finish_experiment(report: &ExperimentReport) -> Result<(), CliError> {
    print!("{}", report.table());
    let failed = report.failures();
    for r in report.runs.iter().filter(|r| r.outcome.is_err()) {
        eprintln!("run {} (seed {}) failed: {}", r.index, r.seed, r.outcome.as_ref().unwrap_err());
    }
    match failed {
        0 => Ok(()),
        n if n == report.runs.len() => Err(CliError::Runtime(format!("all {n} runs failed"))),
        n => Err(CliError::Partial(format!("{n} of {} runs failed", report.runs.len()))),
    }
}

/// Runs the experiment, then reports per-run failures as a partial failure.
pub fn cmd_experiment(args: &ExperimentArgs) -> Result<ExperimentReport, CliError> {
    let report = experiment(args)?;
    finish_experiment(&report)?;
    Ok(report)
}

/// Everything `cmd_experiment` does except turning failed runs into an error.
pub fn experiment(args: &ExperimentArgs) -> Result<ExperimentReport, CliError> {
    let run = resolve(
        &args.config,
        Overrides {
            pretrained: args.pretrained.clone(),
            runs: args.runs,
            ..Overrides::default()
        },
    )?;
    let x = &run.experiment;
    let dataset = load_dataset(&run)?;
    split_for(&dataset, &run, x.seed)?;
    let pretrained = load_pretrained(run.pretrained.as_deref())?;
    check_transfer(&run, dataset.num_classes(), x.seed, pretrained.as_ref())?;

    create_dir(&run.output)?;
    let config_path = write_run_config(&run)?;
    let seeds = (0..x.runs as u64).map(|i| x.seed + i).collect();
    let mut m = manifest("experiment", Some(&run), seeds, run.pretrained.as_deref().zip(pretrained.as_ref()));
    m.replay = format!("leafnet experiment --config {}", config_path.display());
    write_json(&run.output.join(RUN_MANIFEST), &m)?;

    let report = run_experiment(&dataset, x, pretrained.as_ref(), Some(&run.output), !args.config.quiet)
        .map_err(CliError::runtime)?;
    write_experiment_outputs(&run.output, &report, &dataset.index.classes)?;
    Ok(report)
}

pub fn cmd_synthetic_dataset(args: &SyntheticArgs) -> Result<SyntheticConfig, CliError> {
    let config = SyntheticConfig {
        family: match args.family {
            FamilyArg::A => Family::A,
            FamilyArg::B => Family::B,
        },
        images_per_class: args.per_class,
        size: args.size,
        seed: args.seed,
    };
    if config.size < 16 || config.images_per_class == 0 {
        return Err(CliError::Validation("synthetic images need --size ≥ 16 and --per-class ≥ 1".into()));
    }
    let index = write_dataset(&config, &args.out).map_err(CliError::runtime)?;
    let mut m = manifest("synthetic-dataset", None, vec![config.seed], None);
    m.replay = format!(
        "leafnet synthetic-dataset {} --family {} --per-class {} --size {} --seed {}",
        args.out.display(),
        config.family.name(),
        config.images_per_class,
        config.size,
        config.seed
    );
    write_json(&args.out.join("synthetic.json"), &m)?;
    println!("{} images in {} classes written to {}", index.entries.len(), index.num_classes(), args.out.display());
    if let Some(cache) = &args.cache {
        preprocess_tree(&args.out, cache, &desk_preprocess()).map_err(CliError::runtime)?;
        println!("desk-scale cache written to {}", cache.display());
    }
    Ok(config)
}

fn run_index(dir_name: &str) -> Option<usize> {
    dir_name.strip_prefix("run_")?.parse().ok()
}

/// Recomputes the aggregate table from `run_*/report.json`.
pub fn cmd_report(args: &ReportArgs) -> Result<ExperimentReport, CliError> {
    let dir = &args.dir;
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("experiment directory {}: {e}", dir.display())))?;
    let mut run_dirs: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| run_index(&e.file_name().to_string_lossy()).map(|i| (i, e.path())))
        .collect();
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(CliError::Validation(format!("no run_* directories in {}", dir.display())));
    }
    let recorded: Option<RunManifest> = fs::read(dir.join(RUN_MANIFEST))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let seed_of = |i: usize| recorded.as_ref().and_then(|m| m.seeds.get(i).copied());

    let runs: Vec<RunResult<RunReport>> = run_dirs
        .iter()
        .map(|(index, path)| {
            let file = path.join("report.json");
            let outcome = fs::read(&file)
                .map_err(|e| format!("{}: {e}", file.display()))
                .and_then(|b| serde_json::from_slice::<RunReport>(&b).map_err(|e| format!("{}: {e}", file.display())));
            let seed = outcome.as_ref().map(|r| r.seed).ok().or(seed_of(*index)).unwrap_or(*index as u64);
            RunResult {
                index: *index,
                seed,
                outcome,
            }
        })
        .collect();

    let protocols: Vec<EvalProtocol> = match read_file_config(&dir.join(RUN_CONFIG)).ok().and_then(|c| c.protocols) {
        Some(list) => list
            .iter()
            .map(|p| p.parse())
            .collect::<Result<_, _>>()
            .map_err(CliError::validation)?,
        None => runs
            .iter()
            .find_map(|r| r.outcome.as_ref().ok())
            .map(|r| r.evals.iter().map(|e| e.protocol).collect())
            .unwrap_or_default(),
    };
    let classes = runs
        .iter()
        .find_map(|r| r.outcome.as_ref().ok())
        .and_then(|r| r.evals.first())
        .map(|e| (0..e.confusion.size()).map(|i| i.to_string()).collect::<Vec<_>>())
        .unwrap_or_default();

    let report = summarize(&protocols, runs).map_err(CliError::runtime)?;
    let out = dir.join("report");
    create_dir(&out)?;
    let mut m = manifest("report", None, report.runs.iter().map(|r| r.seed).collect(), None);
    m.config_digest = recorded.and_then(|r| r.config_digest);
    m.replay = format!("leafnet report {}", dir.display());
    write_json(&out.join(RUN_MANIFEST), &m)?;
    write_experiment_outputs(&out, &report, &classes)?;
    finish_experiment(&report)?;
    Ok(report)
}
