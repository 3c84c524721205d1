//! Command-line front end: every subcommand reads one TOML run file, writes
//! its outputs under an output directory and records them in a manifest.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::data::{fmt_f64, Dataset, Label};
use crate::error::Error;
use crate::flow::{FlowConfig, FlowModel};
use crate::metrics::{read_scores_csv, save_reports, write_roc_csv, DetectionReport};
use crate::rng::derive_seed;
use crate::stats::{
    attack_tune_temperature, detect, sweep_ratio, write_sweep_csv, AttackConfig, DetectSetup, StatisticConfig,
    STAT_LOGLIK, STAT_PERM, STAT_RANK, STAT_WAIC,
};
use crate::synth::{sample, ScenarioSpec};
use crate::train::{train_ensemble, train_mle, EnsembleSpec, TrainConfig};

const AFTER_HELP: &str = "\
RUN FILE
  A TOML file with a top-level `seed` and the sections [model], [train],
  [statistic], [fit.<name>], [[sample]], [detect], [sweep], [attack] and
  [report]. The global seed fills the `seed` of every section that does not
  set one. Relative input paths are looked up in the output directory first
  and then next to the run file. A model is named either by a path ending in
  .json or by a [fit.<name>] entry, which resolves to <out>/<name>.json.

OUTPUTS (all under --out, default: the run file's directory)
  sample   <file> per [[sample]] entry
           dataset CSV: '# scenario=<name> dim=<d>', header x0,..,x<d-1>,label,
           one row per sample, label 0 = in-distribution, 1 = candidate
  train    <name>.json, <name>_log.csv (step,train_loss_nats,eval_bpd_holdout),
           <name>_ensemble_<i>.json when the fit sets `ensemble = k`
  detect   detect/<candidate>_summary.csv (statistic,auc,ap,n_pos,n_neg)
           detect/<candidate>_scores.csv (sample_id,statistic_name,score,label)
  sweep    sweep_<test>.csv (ratio,mean_bpd,stderr)
  attack   attack.csv (tuned_t,median_gap_bpd,fooled_auc,rank_auc),
           attack_summary.csv, attack_scores.csv, attack_roc.csv
           (statistic,fpr,tpr), attacked.csv (dataset CSV)
  report   report.csv (source,statistic,auc,ap,n_pos,n_neg)
  every    manifest.json: each artifact with its SHA-256 and the SHA-256 of
           the effective run configuration
  Floats are written with 17 significant digits.

EXIT CODES
  0 success, 2 configuration error, 3 numeric divergence, 4 data error

ENVIRONMENT
  OODNORM_THREADS caps the number of worker threads.";

#[derive(Debug, Parser)]
#[command(name = "oodnorm", version, about = "Batch-norm flows and out-of-distribution tests", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Run file (TOML).
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global seed, overriding the run file's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps, overriding `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override any setting: `--set section.key=value` (value in TOML syntax).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw the datasets listed as [[sample]] entries.
    Sample(Common),
    /// Fit every [fit.<name>] entry (and its ensemble).
    Train(Common),
    /// Score negatives and candidates with every statistic.
    Detect(Common),
    /// Mean BPD against the share of test samples in the batch.
    Sweep(Common),
    /// Tune a sampling temperature that fools the likelihood-rank test.
    Attack(Common),
    /// Summarize score tables.
    Report(Common),
}

/// A failed invocation, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Divergence(m) => write!(f, "numeric divergence: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_divergence() {
            return CliError::Divergence(e.to_string());
        }
        match e {
            Error::InvalidParameter(_) | Error::NonMonotone(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(m: impl fmt::Display) -> CliError {
    CliError::Config(m.to_string())
}

fn data_err(m: impl fmt::Display) -> CliError {
    CliError::Data(m.to_string())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitEntry {
    data: String,
    #[serde(default)]
    ensemble: usize,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectSection {
    #[serde(default = "default_p")]
    model: String,
    train: String,
    reference: String,
    negatives: String,
    candidates: Vec<String>,
    #[serde(default = "all_statistics")]
    statistics: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    #[serde(default = "default_p")]
    model: String,
    train: String,
    tests: Vec<String>,
    #[serde(default = "default_ratios")]
    ratios: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
struct AttackSection {
    #[serde(default = "default_p")]
    p_model: String,
    #[serde(default = "default_q")]
    q_model: String,
    target: String,
    reference: String,
    train: String,
    #[serde(flatten)]
    params: AttackConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportSection {
    scores: Vec<String>,
}

fn default_p() -> String {
    "p".into()
}
fn default_q() -> String {
    "q".into()
}
fn all_statistics() -> Vec<String> {
    [STAT_LOGLIK, STAT_PERM, STAT_WAIC, STAT_RANK].map(String::from).to_vec()
}
fn default_ratios() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9]
}

/// The effective run configuration with overrides and seeds applied.
struct Run {
    table: Table,
    base_dir: PathBuf,
    out: PathBuf,
    hash: String,
}

fn apply_set(table: &mut Table, assignment: &str) -> CliResult<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("{key}: {p} is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn section<'a>(table: &'a mut Table, name: &str) -> CliResult<&'a mut Table> {
    table
        .entry(name.to_string())
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| config_err(format!("{name} must be a section")))
}

impl Run {
    fn load(common: &Common) -> CliResult<Self> {
        let text = std::fs::read_to_string(&common.config)
            .map_err(|e| config_err(format!("cannot read {}: {e}", common.config.display())))?;
        let mut table: Table =
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", common.config.display())))?;
        for s in &common.set {
            apply_set(&mut table, s)?;
        }
        if let Some(seed) = common.seed {
            table.insert("seed".into(), Value::Integer(seed as i64));
        }
        if let Some(steps) = common.steps {
            section(&mut table, "train")?.insert("steps".into(), Value::Integer(steps as i64));
        }
        let seed = table.get("seed").cloned().unwrap_or(Value::Integer(0));
        if !matches!(seed, Value::Integer(s) if s >= 0) {
            return Err(config_err("seed must be a non-negative integer"));
        }
        for name in ["train", "statistic", "attack"] {
            section(&mut table, name)?.entry("seed").or_insert(seed.clone());
        }
        table.insert("seed".into(), seed);

        let hash = {
            let canonical = toml::to_string(&table).map_err(config_err)?;
            hex(&Sha256::digest(canonical.as_bytes()))
        };
        let base_dir = common.config.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = common.out.clone().unwrap_or_else(|| base_dir.clone());
        std::fs::create_dir_all(&out).map_err(|e| data_err(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self { table, base_dir, out, hash })
    }

    fn seed(&self) -> u64 {
        self.table["seed"].as_integer().expect("validated") as u64
    }

    fn get<T: for<'de> Deserialize<'de>>(&self, name: &str) -> CliResult<T> {
        let v = self.table.get(name).cloned().unwrap_or_else(|| Value::Table(Table::new()));
        v.try_into().map_err(|e| config_err(format!("[{name}]: {e}")))
    }

    fn require<T: for<'de> Deserialize<'de>>(&self, name: &str) -> CliResult<T> {
        if !self.table.contains_key(name) {
            return Err(config_err(format!("run file has no [{name}] section")));
        }
        self.get(name)
    }

    fn input(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            return p.to_path_buf();
        }
        let in_out = self.out.join(p);
        if in_out.exists() {
            in_out
        } else {
            self.base_dir.join(p)
        }
    }

    fn dataset(&self, path: &str) -> CliResult<Dataset> {
        let p = self.input(path);
        Dataset::load_csv(&p).map_err(|e| data_err(format!("{}: {e}", p.display())))
    }

    fn model_path(&self, name: &str) -> PathBuf {
        if name.ends_with(".json") {
            self.input(name)
        } else {
            self.out.join(format!("{name}.json"))
        }
    }

    fn model(&self, name: &str) -> CliResult<FlowModel> {
        let p = self.model_path(name);
        FlowModel::load_json(&p).map_err(|e| data_err(format!("{}: {e}", p.display())))
    }

    fn ensemble(&self, name: &str) -> CliResult<Vec<FlowModel>> {
        let stem = name.strip_suffix(".json").unwrap_or(name);
        let mut members = Vec::new();
        for i in 0.. {
            let p = if name.ends_with(".json") {
                self.input(&format!("{stem}_ensemble_{i}.json"))
            } else {
                self.out.join(format!("{stem}_ensemble_{i}.json"))
            };
            if !p.exists() {
                break;
            }
            members.push(FlowModel::load_json(&p).map_err(|e| data_err(format!("{}: {e}", p.display())))?);
        }
        Ok(members)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    artifacts: Vec<Artifact>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Artifact {
    path: String,
    command: String,
    config_sha256: String,
    sha256: String,
}

/// Adds (or refreshes) `files`, given relative to the output directory.
fn record(run: &Run, command: &str, files: &[String]) -> CliResult<()> {
    let path = run.out.join("manifest.json");
    let mut manifest: Manifest = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))?,
        Err(_) => Manifest::default(),
    };
    for f in files {
        let bytes = std::fs::read(run.out.join(f)).map_err(|e| data_err(format!("{f}: {e}")))?;
        manifest.artifacts.retain(|a| &a.path != f);
        manifest.artifacts.push(Artifact {
            path: f.clone(),
            command: command.into(),
            config_sha256: run.hash.clone(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let text = serde_json::to_string_pretty(&manifest).map_err(data_err)?;
    std::fs::write(&path, text + "\n").map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn stem(path: &str) -> String {
    Path::new(path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.to_string())
}

fn cmd_sample(run: &Run) -> CliResult<Vec<String>> {
    let entries = match run.table.get("sample") {
        Some(Value::Array(a)) if !a.is_empty() => a.clone(),
        _ => return Err(config_err("run file has no [[sample]] entries")),
    };
    let mut written = Vec::new();
    for (i, entry) in entries.into_iter().enumerate() {
        let Value::Table(mut t) = entry else {
            return Err(config_err("[[sample]] entries must be tables"));
        };
        let file = match t.remove("file") {
            Some(Value::String(f)) => f,
            _ => return Err(config_err(format!("[[sample]] entry {i} needs file = \"...\""))),
        };
        let label: Option<Label> = t
            .remove("label")
            .map(|v| v.try_into())
            .transpose()
            .map_err(|e| config_err(format!("[[sample]] {file}: {e}")))?;
        t.entry("seed").or_insert(Value::Integer(derive_seed(run.seed(), &[i as u64]) as i64 & i64::MAX));
        if let Some(Value::String(m)) = t.get("model") {
            let resolved = run.model_path(m);
            t.insert("model".into(), Value::String(resolved.to_string_lossy().into_owned()));
        }
        let spec: ScenarioSpec =
            Value::Table(t).try_into().map_err(|e| config_err(format!("[[sample]] {file}: {e}")))?;
        let mut ds = sample(&spec)?;
        if let Some(l) = label {
            ds = ds.with_label(l);
        }
        let dest = run.out.join(&file);
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(data_err)?;
        }
        ds.save_csv(&dest)?;
        written.push(file);
    }
    Ok(written)
}

fn cmd_train(run: &Run) -> CliResult<Vec<String>> {
    let fits: BTreeMap<String, FitEntry> = run.require("fit")?;
    if fits.is_empty() {
        return Err(config_err("[fit] lists no models"));
    }
    let base: TrainConfig = run.get("train")?;
    base.validate()?;
    let mut written = Vec::new();
    for (name, fit) in &fits {
        let data = run.dataset(&fit.data)?;
        let mut model_table = match run.table.get("model") {
            Some(Value::Table(t)) => t.clone(),
            Some(_) => return Err(config_err("[model] must be a section")),
            None => Table::new(),
        };
        model_table.entry("dim").or_insert(Value::Integer(data.dim() as i64));
        let arch: FlowConfig = Value::Table(model_table).try_into().map_err(|e| config_err(format!("[model]: {e}")))?;
        if arch.dim != data.dim() {
            return Err(data_err(format!("[model] dim {} but {} has dim {}", arch.dim, fit.data, data.dim())));
        }
        let cfg = TrainConfig { seed: fit.seed.unwrap_or(base.seed), ..base.clone() };
        let init = FlowModel::new(&arch, cfg.seed)?;
        let outcome = train_mle(&init, &data, &cfg)?;
        outcome.model.save_json(run.out.join(format!("{name}.json")))?;
        outcome.save_log_csv(run.out.join(format!("{name}_log.csv")))?;
        written.push(format!("{name}.json"));
        written.push(format!("{name}_log.csv"));
        if fit.ensemble > 0 {
            let mut members = vec![outcome.model];
            if fit.ensemble > 1 {
                let spec = EnsembleSpec { k: fit.ensemble - 1, base_seed: cfg.seed + 1, train: cfg.clone() };
                members.extend(train_ensemble(&spec, &arch, &data)?);
            }
            for (i, m) in members.iter().enumerate() {
                let f = format!("{name}_ensemble_{i}.json");
                m.save_json(run.out.join(&f))?;
                written.push(f);
            }
        }
    }
    Ok(written)
}

fn cmd_detect(run: &Run) -> CliResult<Vec<String>> {
    let sec: DetectSection = run.require("detect")?;
    let cfg: StatisticConfig = run.get("statistic")?;
    cfg.validate()?;
    for s in &sec.statistics {
        if ![STAT_LOGLIK, STAT_PERM, STAT_WAIC, STAT_RANK].contains(&s.as_str()) {
            return Err(config_err(format!("unknown statistic {s:?}")));
        }
    }
    if sec.candidates.is_empty() {
        return Err(config_err("[detect] candidates is empty"));
    }
    let model = run.model(&sec.model)?;
    let ensemble = if sec.statistics.iter().any(|s| s == STAT_WAIC) {
        let e = run.ensemble(&sec.model)?;
        if e.is_empty() {
            return Err(data_err(format!(
                "WAIC needs an ensemble for model {:?} (train it with ensemble = k)",
                sec.model
            )));
        }
        e
    } else {
        Vec::new()
    };
    let train = run.dataset(&sec.train)?;
    let reference = run.dataset(&sec.reference)?;
    let negatives = run.dataset(&sec.negatives)?;
    let candidates = sec.candidates.iter().map(|c| run.dataset(c)).collect::<CliResult<Vec<_>>>()?;
    let setup = DetectSetup {
        model: &model,
        ensemble: &ensemble,
        train: train.samples(),
        reference: reference.samples(),
        cfg: &cfg,
    };
    let pairs = detect(&setup, &negatives, &candidates.iter().collect::<Vec<_>>())?;
    std::fs::create_dir_all(run.out.join("detect")).map_err(data_err)?;
    let mut written = Vec::new();
    for (path, reports) in sec.candidates.iter().zip(pairs) {
        let keep: Vec<DetectionReport> =
            reports.into_iter().filter(|r| sec.statistics.contains(&r.statistic)).collect();
        let summary = format!("detect/{}_summary.csv", stem(path));
        let scores = format!("detect/{}_scores.csv", stem(path));
        save_reports(&keep, run.out.join(&summary), run.out.join(&scores))?;
        for r in &keep {
            println!("{:<24} {:<7} auc {:.4} ap {:.4}", stem(path), r.statistic, r.auc, r.ap);
        }
        written.push(summary);
        written.push(scores);
    }
    Ok(written)
}

fn cmd_sweep(run: &Run) -> CliResult<Vec<String>> {
    let sec: SweepSection = run.require("sweep")?;
    let cfg: StatisticConfig = run.get("statistic")?;
    let model = run.model(&sec.model)?;
    let train = run.dataset(&sec.train)?;
    let mut written = Vec::new();
    for t in &sec.tests {
        let test = run.dataset(t)?;
        let rows = sweep_ratio(&model, test.samples(), train.samples(), &sec.ratios, &cfg)?;
        let f = format!("sweep_{}.csv", stem(t));
        let file = std::fs::File::create(run.out.join(&f)).map_err(data_err)?;
        write_sweep_csv(&rows, std::io::BufWriter::new(file))?;
        written.push(f);
    }
    Ok(written)
}

fn cmd_attack(run: &Run) -> CliResult<Vec<String>> {
    let sec: AttackSection = run.require("attack")?;
    let cfg: StatisticConfig = run.get("statistic")?;
    cfg.validate()?;
    let p_model = run.model(&sec.p_model)?;
    let q_model = run.model(&sec.q_model)?;
    let target = run.dataset(&sec.target)?;
    let reference = run.dataset(&sec.reference)?;
    let train = run.dataset(&sec.train)?;
    let result = attack_tune_temperature(&p_model, &q_model, target.samples(), reference.samples(), &sec.params)?;

    let setup = DetectSetup {
        model: &p_model,
        ensemble: &[],
        train: train.samples(),
        reference: reference.samples(),
        cfg: &cfg,
    };
    let reports: Vec<DetectionReport> =
        detect(&setup, &target.clone().with_label(Label::InDistribution), &[&result.samples])?
            .remove(0)
            .into_iter()
            .filter(|r| r.statistic == STAT_PERM || r.statistic == STAT_RANK)
            .collect();

    let head = "tuned_t,median_gap_bpd,fooled_auc,rank_auc\n";
    let row = [result.tuned_t, result.median_gap_bpd, result.fooled_auc, reports[1].auc].map(fmt_f64).join(",");
    std::fs::write(run.out.join("attack.csv"), format!("{head}{row}\n")).map_err(data_err)?;
    save_reports(&reports, run.out.join("attack_summary.csv"), run.out.join("attack_scores.csv"))?;
    let roc = std::fs::File::create(run.out.join("attack_roc.csv")).map_err(data_err)?;
    write_roc_csv(&reports, std::io::BufWriter::new(roc))?;
    result.samples.save_csv(run.out.join("attacked.csv"))?;
    println!(
        "T = {:.4}, median gap {:.4} BPD, perm auc {:.4}, rank auc {:.4}",
        result.tuned_t, result.median_gap_bpd, result.fooled_auc, reports[1].auc
    );
    Ok(["attack.csv", "attack_summary.csv", "attack_scores.csv", "attack_roc.csv", "attacked.csv"]
        .map(String::from)
        .to_vec())
}

fn cmd_report(run: &Run) -> CliResult<Vec<String>> {
    let sec: ReportSection = run.require("report")?;
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["source", "statistic", "auc", "ap", "n_pos", "n_neg"]).map_err(data_err)?;
    for s in &sec.scores {
        let p = run.input(s);
        let file = std::fs::File::open(&p).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
        for r in read_scores_csv(file)? {
            println!("{:<24} {:<7} auc {:.4} ap {:.4}", stem(s), r.statistic, r.auc, r.ap);
            out.write_record([
                stem(s),
                r.statistic,
                fmt_f64(r.auc),
                fmt_f64(r.ap),
                r.n_pos.to_string(),
                r.n_neg.to_string(),
            ])
            .map_err(data_err)?;
        }
    }
    let bytes = out.into_inner().map_err(|e| data_err(e.to_string()))?;
    std::fs::write(run.out.join("report.csv"), bytes).map_err(data_err)?;
    Ok(vec!["report.csv".into()])
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("OODNORM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err(format!("OODNORM_THREADS must be a positive integer, got {raw:?}")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    let (name, common) = match &cli.command {
        Command::Sample(c) => ("sample", c),
        Command::Train(c) => ("train", c),
        Command::Detect(c) => ("detect", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Attack(c) => ("attack", c),
        Command::Report(c) => ("report", c),
    };
    let run = Run::load(common)?;
    let written = match cli.command {
        Command::Sample(_) => cmd_sample(&run)?,
        Command::Train(_) => cmd_train(&run)?,
        Command::Detect(_) => cmd_detect(&run)?,
        Command::Sweep(_) => cmd_sweep(&run)?,
        Command::Attack(_) => cmd_attack(&run)?,
        Command::Report(_) => cmd_report(&run)?,
    };
    record(&run, name, &written)
}

/// Parses `args` (including the program name) and runs them, returning the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("oodnorm: {e}");
            e.exit_code()
        }
    }
}
