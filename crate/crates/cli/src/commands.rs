use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use evidx_core::config::validate_config;
use evidx_core::domain::{
    load_atlas, load_dataset, save_dataset, split_dataset, AtlasConfig, Case, DatasetSplit,
    MCLabelSet, ATLAS_FILE,
};
use evidx_core::eval::counterfactual::{counterfactual_test, CounterfactualConfig};
use evidx_core::eval::summary::{read_results_csv, summarize_results, write_summary_csv};
use evidx_core::eval::sweep::{data_efficiency_sweep, SweepResult};
use evidx_core::labeler::{load_labels, save_labels, LabelerConfig};
use evidx_core::model::checkpoint;
use evidx_core::phantom::{PhantomGenerator, PhantomSpec};
use evidx_core::transfer::{
    evidence_labels, train, InputMode, McPool, RunInputs, RunManifest, Strategy, TrainConfig,
    TrainingData,
};

use crate::{
    plot, Command, CounterfactualArgs, DataArgs, EvalArgs, LabelArgs, PhantomArgs, PlotArgs,
    ReproduceArgs, SummarizeArgs, SweepArgs, TrainArgs,
};

pub(crate) fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom(a) => phantom(a),
        Command::Label(a) => label(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Counterfactual(a) => counterfactual(a),
        Command::Sweep(a) => sweep(a),
        Command::Summarize(a) => summarize(a),
        Command::Plot(a) => plot_cmd(a),
        Command::Reproduce(a) => reproduce(a),
    }
}

/// Files inside a run directory.
pub struct RunFiles {
    pub manifest: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub labels: PathBuf,
    pub thresholds: PathBuf,
}

pub fn run_dir_files(dir: &Path) -> RunFiles {
    RunFiles {
        manifest: dir.join("manifest.json"),
        metrics: dir.join("metrics.json"),
        checkpoint: dir.join("model.ckpt"),
        labels: dir.join("labels.json"),
        thresholds: dir.join("thresholds.csv"),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Cases of a data set directory and its atlas (or `atlas` when given).
pub fn load_inputs(data: &Path, atlas: Option<&Path>) -> Result<(Vec<Case>, AtlasConfig)> {
    let atlas_path = atlas.map_or_else(|| data.join(ATLAS_FILE), Path::to_path_buf);
    let atlas = load_atlas(&atlas_path)
        .with_context(|| format!("loading atlas {}", atlas_path.display()))?;
    let cases = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    info!("loaded {} cases from {}", cases.len(), data.display());
    Ok((cases, atlas))
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let generator = PhantomGenerator::new(spec.clone())?;
    let cases = generator.generate_dataset(a.n_nc, a.n_mci, a.n_ad)?;
    save_dataset(&a.out, &cases, &spec.atlas()?)?;
    write_json(&a.out.join("phantom_spec.json"), &spec)?;
    info!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let data = a.data.data.as_deref().context("--data is required")?;
    let (cases, atlas) = load_inputs(data, a.data.atlas.as_deref())?;
    let split = split_dataset(&cases, a.data.split_seed.unwrap_or(0))?;
    let config = LabelerConfig {
        bin_width: a.bin_width,
        min_group_size: a.min_group_size,
    };
    let (table, labels) = evidence_labels(&cases, &atlas, &split, config)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_labels(&a.out, &labels)?;
    let thresholds = a
        .thresholds
        .unwrap_or_else(|| a.out.with_extension("thresholds.csv"));
    table.write_csv(&thresholds)?;
    info!(
        "labeled {} cases; thresholds in {}",
        labels.len(),
        thresholds.display()
    );
    Ok(())
}

/// Everything a training run reads, resolved from flags and an optional
/// config file.
struct RunSetup {
    data: PathBuf,
    atlas: Option<PathBuf>,
    labels: Option<PathBuf>,
    split_seed: u64,
    train: TrainConfig,
}

fn parse_input_mode(s: &str) -> InputMode {
    match s {
        "original" => InputMode::Original,
        "channels" => InputMode::Channels,
        _ => InputMode::Masked,
    }
}

fn setup_from(a: &TrainArgs) -> Result<RunSetup> {
    let mut s = match &a.config {
        Some(p) => {
            let c = validate_config(p)?;
            RunSetup {
                data: c.data,
                atlas: c.atlas,
                labels: c.labels,
                split_seed: c.split_seed,
                train: c.train,
            }
        }
        None => RunSetup {
            data: a
                .data
                .data
                .clone()
                .context("--data or --config is required")?,
            atlas: None,
            labels: None,
            split_seed: 0,
            train: TrainConfig::default(),
        },
    };
    override_data(&mut s, &a.data);
    if a.labels.is_some() {
        s.labels = a.labels.clone();
    }
    let t = &mut s.train;
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value {
                t.$field = v;
            }
        };
    }
    set!(strategy, a.strategy);
    set!(lambda_mc, a.lambda_mc);
    set!(seed, a.seed);
    set!(data_fraction, a.fraction);
    set!(epochs, a.epochs);
    set!(batch_size, a.batch_size);
    set!(learning_rate, a.learning_rate);
    set!(encoder, a.encoder.clone());
    if a.pretrain_epochs.is_some() {
        t.pretrain_epochs = a.pretrain_epochs;
    }
    if let Some(m) = &a.input {
        t.input = parse_input_mode(m);
    }
    if a.mc_with_mci {
        t.mc_pool = McPool::TrainAndMci;
    }
    if a.init_from.is_some() {
        t.init_from = a.init_from.clone();
    }
    t.freeze_aux |= a.freeze_aux;
    t.zero_aux |= a.zero_aux;
    t.validate()?;
    Ok(s)
}

fn override_data(s: &mut RunSetup, d: &DataArgs) {
    if let Some(p) = &d.data {
        s.data = p.clone();
    }
    if d.atlas.is_some() {
        s.atlas = d.atlas.clone();
    }
    if let Some(v) = d.split_seed {
        s.split_seed = v;
    }
}

struct Prepared {
    cases: Vec<Case>,
    atlas: AtlasConfig,
    split: DatasetSplit,
    labels: Option<BTreeMap<String, MCLabelSet>>,
    data: TrainingData,
}

/// Loads the data set, splits it and attaches labels: read from `labels`
/// when given, derived from the split otherwise (only when `need_labels`).
fn prepare(
    data: &Path,
    atlas: Option<&Path>,
    labels: Option<&Path>,
    split_seed: u64,
    input: InputMode,
    need_labels: bool,
) -> Result<Prepared> {
    let (cases, atlas) = load_inputs(data, atlas)?;
    let split = split_dataset(&cases, split_seed)?;
    let labels = match labels {
        Some(p) => Some(load_labels(p).with_context(|| format!("loading {}", p.display()))?),
        None if need_labels => {
            Some(evidence_labels(&cases, &atlas, &split, LabelerConfig::default())?.1)
        }
        None => None,
    };
    let data = TrainingData::with_split(&cases, &atlas, labels.as_ref(), split.clone(), input)?;
    Ok(Prepared {
        cases,
        atlas,
        split,
        labels,
        data,
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let s = setup_from(&a)?;
    let p = prepare(
        &s.data,
        s.atlas.as_deref(),
        s.labels.as_deref(),
        s.split_seed,
        s.train.input,
        s.train.strategy.needs_labels(),
    )?;
    let run = train(&p.data, &s.train)?;
    create_dir(&a.out)?;
    let files = run_dir_files(&a.out);
    let mut manifest = run.manifest;
    manifest.inputs = RunInputs {
        data: Some(absolute(&s.data)),
        labels: s.labels.as_deref().map(absolute),
        atlas: s.atlas.as_deref().map(absolute),
        k: Some(p.atlas.k()),
    };
    checkpoint::save(&files.checkpoint, &run.params, None)?;
    manifest.checkpoints = vec![files.checkpoint.clone()];
    write_json(&files.manifest, &manifest)?;
    write_json(&files.metrics, &manifest.metrics)?;
    if let Some(test) = &manifest.metrics.test {
        info!(
            "{}: test accuracy {:.4}, AUROC {}",
            s.train.strategy,
            test.accuracy,
            test.auroc.map_or("undefined".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = run_dir_files(dir).manifest;
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn manifest_data(m: &RunManifest) -> Result<&Path> {
    m.inputs
        .data
        .as_deref()
        .context("manifest does not record its data set")
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = read_manifest(&a.run)?;
    let ckpt = checkpoint::load(&run_dir_files(&a.run).checkpoint)?;
    let p = prepare(
        manifest_data(&m)?,
        m.inputs.atlas.as_deref(),
        None,
        m.split_seed,
        m.config.input,
        false,
    )?;
    let ids = match a.split.as_str() {
        "train" => &p.split.train,
        "val" => &p.split.val,
        _ => &p.split.test,
    };
    let mut report = p.data.evaluate(&ckpt.params, ids)?;
    report.strategy = Some(m.config.strategy.name().into());
    report.seed = Some(m.config.seed);
    match &a.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn counterfactual(a: CounterfactualArgs) -> Result<()> {
    let m = read_manifest(&a.run)?;
    let ckpt = checkpoint::load(&run_dir_files(&a.run).checkpoint)?;
    let labels = a.labels.as_deref().or(m.inputs.labels.as_deref());
    let p = prepare(
        manifest_data(&m)?,
        m.inputs.atlas.as_deref(),
        labels,
        m.split_seed,
        m.config.input,
        true,
    )?;
    let by_id: BTreeMap<&str, &Case> = p.cases.iter().map(|c| (c.id.as_str(), c)).collect();
    let test: Vec<&Case> = p.split.test.iter().map(|id| by_id[id.as_str()]).collect();
    let config = CounterfactualConfig {
        noise_sigma: a.sigma,
        bin_width: a.bin_width,
        seed: a.seed,
    };
    let labels = p.labels.as_ref().expect("prepared with labels");
    let result = counterfactual_test(
        &ckpt.params,
        &test,
        labels,
        &p.atlas,
        m.config.input,
        &config,
    )?;
    create_dir(&a.out)?;
    result.write_histogram_csv(&a.out.join("histogram.csv"))?;
    result.write_pairs_csv(&a.out.join("pairs.csv"))?;
    write_json(&a.out.join("counterfactual.json"), &result)?;
    info!(
        "{} pairs ({} test cases without a Severe region excluded); first bin {}",
        result.pairs.len(),
        result.n_excluded,
        result.first_bin_count()
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (mut s, mut strategies, mut fractions, mut seeds) = match &a.config {
        Some(p) => {
            let c = validate_config(p)?;
            let setup = RunSetup {
                data: c.data,
                atlas: c.atlas,
                labels: c.labels,
                split_seed: c.split_seed,
                train: c.train,
            };
            (setup, c.strategies, c.fractions, c.seeds)
        }
        None => (
            RunSetup {
                data: a
                    .data
                    .data
                    .clone()
                    .context("--data or --config is required")?,
                atlas: None,
                labels: None,
                split_seed: 0,
                train: TrainConfig::default(),
            },
            vec![
                Strategy::BaselineRandom,
                Strategy::Eap,
                Strategy::Eat,
                Strategy::Eai,
            ],
            evidx_core::eval::SWEEP_FRACTIONS.to_vec(),
            vec![0, 1, 2],
        ),
    };
    override_data(&mut s, &a.data);
    if a.labels.is_some() {
        s.labels = a.labels.clone();
    }
    if let Some(v) = &a.strategies {
        strategies = v.clone();
    }
    if let Some(v) = &a.fractions {
        fractions = v.clone();
    }
    if let Some(v) = &a.seeds {
        seeds = v.clone();
    }
    if let Some(v) = a.epochs {
        s.train.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        s.train.learning_rate = v;
    }
    s.train.validate()?;
    let p = prepare(
        &s.data,
        s.atlas.as_deref(),
        s.labels.as_deref(),
        s.split_seed,
        s.train.input,
        strategies.iter().any(|st| st.needs_labels()),
    )?;
    let result = data_efficiency_sweep(&p.data, &s.train, &strategies, &fractions, &seeds)?;
    create_dir(&a.out)?;
    result.write_csv(&a.out.join("sweep.csv"))?;
    result.write_plot_data(&a.out.join("sweep_means.csv"))?;
    write_json(&a.out.join("sweep.json"), &result)?;
    info!("{} runs written to {}", result.cells.len(), a.out.display());
    Ok(())
}

fn summarize(a: SummarizeArgs) -> Result<()> {
    let methods = read_results_csv(&a.results)?;
    let rows = summarize_results(&methods)?;
    println!("{:<24} {:>8} {:>8}", "method", "acc(%)", "auroc");
    for r in &rows {
        let mark = |best: bool, bb: bool| match (best, bb) {
            (true, _) => "*",
            (false, true) => "+",
            _ => " ",
        };
        println!(
            "{:<24} {:>7.1}{} {:>7.3}{}",
            r.method,
            r.avg_accuracy_pct,
            mark(r.best_accuracy, r.best_baseline_accuracy),
            r.avg_auroc,
            mark(r.best_auroc, r.best_baseline_auroc)
        );
    }
    println!("* best overall, + best baseline");
    if let Some(out) = &a.out {
        write_summary_csv(out, &rows)?;
    }
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let svg = match a.kind.as_str() {
        "sweep" => plot::sweep_svg(&SweepResult::read_csv(&a.input)?, &a.metric)?,
        _ => plot::histogram_svg(&plot::read_histogram_csv(&a.input)?),
    };
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))
}

fn reproduce(a: ReproduceArgs) -> Result<()> {
    let m = read_manifest(&a.run_dir)?;
    let files = run_dir_files(&a.run_dir);
    let recorded = fs::read_to_string(&files.metrics)
        .with_context(|| format!("reading {}", files.metrics.display()))?;
    let p = prepare(
        manifest_data(&m)?,
        m.inputs.atlas.as_deref(),
        m.inputs.labels.as_deref(),
        m.split_seed,
        m.config.input,
        m.config.strategy.needs_labels(),
    )?;
    let run = train(&p.data, &m.config)?;
    let fresh = serde_json::to_string_pretty(&run.manifest.metrics)? + "\n";
    if fresh == recorded {
        println!("metrics identical");
        return Ok(());
    }
    let diff: Vec<String> = recorded
        .lines()
        .zip(fresh.lines())
        .filter(|(a, b)| a != b)
        .map(|(a, b)| format!("- {a}\n+ {b}"))
        .collect();
    println!("{}", diff.join("\n"));
    bail!("metrics differ from {}", files.metrics.display())
}
