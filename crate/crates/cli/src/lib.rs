//! `cait analyze` and `cait simulate`.
//!
//! Settings come from an optional JSON [`RunConfig`] with flag overrides
//! layered on top. Every artifact embeds the effective config (minus the
//! output directory and worker count, which do not affect results) and a
//! `generated_unix` timestamp.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cait::pipeline::DaModel;
use cait::simulation::{
    binary_methods, run_monte_carlo, table1_methods, EffectKind, MethodSpec, SimConfig, SimSetting, SPLINE_DF,
};
use cait::tree::{NodeJson, TreeJson};
use cait::{
    load_csv, mask_all, run_cait, CaitError, CsvSchema, DesignSpec, EstimatorSpec, ForestParams, GrowthConstraints,
    SelectionConfig, SelectionMethod, TrialDataset,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_ROOT: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Analyze,
    Simulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    #[default]
    Unadjusted,
    /// Node GLM with main effects of every covariate.
    Ms,
    /// Spline-additive (df 3) augmentation model of every covariate.
    Da,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionChoice {
    Fts1,
    Fts2,
}

impl From<SelectionChoice> for SelectionMethod {
    fn from(s: SelectionChoice) -> Self {
        match s {
            SelectionChoice::Fts1 => SelectionMethod::Fts1,
            SelectionChoice::Fts2 => SelectionMethod::Fts2,
        }
    }
}

fn default_outcome() -> String {
    "y".into()
}

fn default_treatment() -> String {
    "a".into()
}

fn default_preset() -> String {
    "table1-desk".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("cait-out")
}

/// Everything a run needs. Missing fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    /// Trial CSV for `analyze`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub schema: CsvSchema,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_treatment")]
    pub treatment: String,
    pub estimator: EstimatorChoice,
    /// Full estimator specification; overrides `estimator` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator_spec: Option<EstimatorSpec>,
    pub constraints: GrowthConstraints,
    pub selection: SelectionMethod,
    pub lambda: f64,
    pub valid_frac: f64,
    pub folds: usize,
    /// Oracle forest for FTS-2; `None` uses 500 trees, mtry = (p + 1) / 3, leaves of 5.
    pub forest: Option<ForestParams>,
    pub seed: u64,
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Replications; `None` uses the preset's count.
    pub reps: Option<usize>,
    pub emit_sequence: bool,
    /// Thread cap; results do not depend on it.
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
    #[serde(skip_serializing, default = "default_out")]
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sel = SelectionConfig::default();
        Self {
            command: Command::Analyze,
            data: None,
            schema: CsvSchema::default(),
            outcome: default_outcome(),
            treatment: default_treatment(),
            estimator: EstimatorChoice::Unadjusted,
            estimator_spec: None,
            constraints: GrowthConstraints::default(),
            selection: sel.method,
            lambda: sel.lambda,
            valid_frac: sel.valid_frac,
            folds: sel.folds,
            forest: None,
            seed: 0,
            preset: default_preset(),
            reps: None,
            emit_sequence: false,
            workers: None,
            out: default_out(),
        }
    }
}

impl RunConfig {
    pub fn selection_config(&self) -> SelectionConfig {
        SelectionConfig {
            method: self.selection,
            lambda: self.lambda,
            valid_frac: self.valid_frac,
            folds: self.folds,
            forest: self.forest,
            seed: self.seed,
        }
    }

    /// The estimator to fit on a dataset with `p` covariates.
    pub fn estimator_spec(&self, p: usize) -> EstimatorSpec {
        if let Some(spec) = &self.estimator_spec {
            return spec.clone();
        }
        match self.estimator {
            EstimatorChoice::Unadjusted => EstimatorSpec::unadjusted(),
            EstimatorChoice::Ms => EstimatorSpec::ms(DesignSpec::main_effects(0..p)),
            EstimatorChoice::Da => EstimatorSpec::Da {
                model: DaModel::Glm { design: DesignSpec::splines(0..p, SPLINE_DF) },
                link: None,
            },
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            constraints: self.constraints,
            lambda: self.lambda,
            valid_frac: self.valid_frac,
            folds: self.folds,
            forest: self.forest,
        }
    }

    fn validate(&self) -> Result<(), String> {
        self.constraints.validate().map_err(|e| e.to_string())?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if !(self.valid_frac > 0.0 && self.valid_frac < 1.0) {
            return Err(format!("valid_frac must lie in (0, 1), got {}", self.valid_frac));
        }
        if self.folds < 2 {
            return Err(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.workers == Some(0) {
            return Err("workers must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cait", version, about = "Covariate adjusted interaction trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Grow, prune and select a tree on a trial CSV.
    Analyze(Overrides),
    /// Run a Monte Carlo preset.
    Simulate(Overrides),
}

/// Flags win over values read from `--config`.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON column schema (column kinds, covariate list, outcome kind).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorChoice>,
    #[arg(long, value_enum)]
    pub selection: Option<SelectionChoice>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub valid_frac: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every pruned candidate to sequence.json.
    #[arg(long)]
    pub emit_sequence: bool,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
}

/// A failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid {what} {}: {e}", path.display())))
}

/// Layer `flags` over the config file (if any) over the defaults.
pub fn resolve_config(command: Command, flags: &Overrides) -> Result<RunConfig, Failure> {
    let mut cfg: RunConfig = match &flags.config {
        Some(path) => read_json(path, "config")?,
        None => RunConfig::default(),
    };
    cfg.command = command;
    if let Some(v) = &flags.data {
        cfg.data = Some(v.clone());
    }
    if let Some(path) = &flags.schema {
        cfg.schema = read_json(path, "schema")?;
    }
    if let Some(v) = &flags.outcome {
        cfg.outcome = v.clone();
    }
    if let Some(v) = &flags.treatment {
        cfg.treatment = v.clone();
    }
    if let Some(v) = flags.estimator {
        cfg.estimator = v;
        cfg.estimator_spec = None;
    }
    if let Some(v) = flags.selection {
        cfg.selection = v.into();
    }
    if let Some(v) = flags.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = flags.folds {
        cfg.folds = v;
    }
    if let Some(v) = flags.valid_frac {
        cfg.valid_frac = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.workers {
        cfg.workers = Some(v);
    }
    if let Some(v) = &flags.out {
        cfg.out = v.clone();
    }
    if flags.emit_sequence {
        cfg.emit_sequence = true;
    }
    if let Some(v) = &flags.preset {
        cfg.preset = v.clone();
    }
    if let Some(v) = flags.reps {
        cfg.reps = Some(v);
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Common header of every JSON artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<B> {
    pub generated_unix: u64,
    pub seed: u64,
    pub config: RunConfig,
    #[serde(flatten)]
    pub body: B,
}

fn write_json<B: Serialize>(cfg: &RunConfig, path: &Path, body: B) -> Result<(), Failure> {
    let env = Envelope { generated_unix: timestamp(), seed: cfg.seed, config: cfg.clone(), body };
    let text = serde_json::to_string_pretty(&env).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_FAILURE, format!("cannot write {}: {e}", path.display()))
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w);
    }
    b.build().map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))
}

fn is_data_error(e: &CaitError) -> bool {
    matches!(
        e,
        CaitError::Data { .. }
            | CaitError::InvalidDataset(_)
            | CaitError::MissingColumn(_)
            | CaitError::Io(_)
            | CaitError::UnknownLevel { .. }
            | CaitError::Shape { .. }
    )
}

#[derive(Serialize)]
struct TreeBody<'a> {
    estimator: cait::EstimatorTag,
    tree: &'a TreeJson,
}

#[derive(Serialize)]
struct ReportBody<'a> {
    report: &'a cait::SelectionReport,
}

#[derive(Serialize)]
struct Candidate {
    index: usize,
    n_internal: usize,
    /// Penalty at which this candidate is pruned to the next one.
    critical_lambda: Option<f64>,
    tree: TreeJson,
}

#[derive(Serialize)]
struct SequenceBody {
    candidates: Vec<Candidate>,
}

/// Root effect, checked before growth so that failure there gets its own exit code.
fn check_root(ds: &TrialDataset<f64>, spec: &EstimatorSpec) -> Result<(), Failure> {
    let root = |e: CaitError| Failure::new(EXIT_ROOT, format!("estimation failed at node 0 (root): {e}"));
    let kind = spec.build(ds).map_err(root)?;
    let est = kind.prepare(ds).map_err(root)?;
    est.effect(&mask_all(ds).indices()).map_err(root)?;
    Ok(())
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<String, Failure> {
    let data = cfg.data.as_ref().ok_or_else(|| Failure::config("analyze needs --data"))?;
    let ds: TrialDataset<f64> = load_csv(data, &cfg.schema, &cfg.outcome, &cfg.treatment)
        .map_err(|e| Failure::new(EXIT_DATA, format!("{}: {e}", data.display())))?;
    let spec = cfg.estimator_spec(ds.p());
    let pool = thread_pool(cfg.workers)?;
    let fit = pool.install(|| {
        check_root(&ds, &spec)?;
        run_cait(&ds, &spec, &cfg.constraints, &cfg.selection_config(), None).map_err(|e| {
            let code = if is_data_error(&e) { EXIT_DATA } else { EXIT_FAILURE };
            Failure::new(code, e.to_string())
        })
    })?;

    fs::create_dir_all(&cfg.out).map_err(|e| io_failure(&cfg.out, e))?;
    let names = ds.column_names();
    let kinds = ds.kinds();
    let tree = fit.tree.to_json(names, kinds);
    write_json(cfg, &cfg.out.join("tree.json"), TreeBody { estimator: fit.estimator, tree: &tree })?;
    write_json(cfg, &cfg.out.join("selection_report.json"), ReportBody { report: &fit.report })?;
    if cfg.emit_sequence {
        let candidates = fit
            .sequence
            .trees
            .iter()
            .enumerate()
            .map(|(index, t)| Candidate {
                index,
                n_internal: t.n_internal(),
                critical_lambda: fit.sequence.critical_lambdas.get(index).copied(),
                tree: t.to_json(names, kinds),
            })
            .collect();
        write_json(cfg, &cfg.out.join("sequence.json"), SequenceBody { candidates })?;
    }
    let summary = summarize(&tree, &fit.report, fit.estimator, ds.n());
    let path = cfg.out.join("summary.txt");
    fs::write(&path, &summary).map_err(|e| io_failure(&path, e))?;
    Ok(summary)
}

fn describe_branch(parent: &NodeJson, left: bool) -> String {
    let Some(split) = &parent.split else { return String::new() };
    let name = split.column_name.clone().unwrap_or_else(|| format!("x{}", split.column));
    match (split.threshold, &split.levels, &split.right_levels) {
        (Some(t), _, _) => format!("{name} {} {t}", if left { "<" } else { ">=" }),
        (None, Some(l), Some(r)) => format!("{name} in {{{}}}", if left { l } else { r }.join(", ")),
        _ => name,
    }
}

/// Leaf subgroups with effect +/- sqrt(var); no multiplicity adjustment.
pub fn summarize(tree: &TreeJson, report: &cait::SelectionReport, tag: cait::EstimatorTag, n: usize) -> String {
    let by_id = |id: usize| tree.nodes.iter().find(|x| x.id == id);
    let path = |node: &NodeJson| {
        let mut conds = Vec::new();
        let mut cur = node;
        while let Some(p) = cur.parent.and_then(by_id) {
            let left = p.children.map(|c| c[0] == cur.id).unwrap_or(false);
            conds.push(describe_branch(p, left));
            cur = p;
        }
        conds.reverse();
        if conds.is_empty() {
            "all".to_string()
        } else {
            conds.join(" & ")
        }
    };
    let mut s = String::new();
    let method = match report.method {
        SelectionMethod::Fts1 => "FTS-1",
        SelectionMethod::Fts2 => "FTS-2",
    };
    let _ = writeln!(s, "n = {n}, estimator {tag:?}, selection {method}");
    let _ = writeln!(
        s,
        "selected candidate {} of {} with {} split(s)",
        report.chosen_index,
        report.n_internal.len(),
        tree.n_internal
    );
    let _ = writeln!(s, "leaf subgroups (standard errors are unadjusted for multiplicity):");
    for node in tree.nodes.iter().filter(|x| x.children.is_none()) {
        let se = node.effect_var.max(0.0).sqrt();
        let _ = writeln!(
            s,
            "  node {:>3}  n = {:>5} (treated {:>5})  effect = {:.4} +/- {:.4}  [{}]",
            node.id,
            node.n,
            node.n1,
            node.effect,
            se,
            path(node)
        );
    }
    s
}

/// A named simulation design.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub settings: Vec<SimSetting>,
    pub methods: Vec<MethodSpec>,
    pub reps: usize,
}

pub const PRESET_NAMES: [&str; 4] = ["table1-desk", "table1-full", "n1000-desk", "binary-desk"];

pub fn preset(name: &str) -> Option<Preset> {
    use EffectKind::{Heterogeneous, Homogeneous};
    let continuous = |n| vec![SimSetting::continuous(Homogeneous, n), SimSetting::continuous(Heterogeneous, n)];
    let (settings, methods, reps) = match name {
        "table1-desk" => (continuous(500), table1_methods(), 200),
        "table1-full" => (continuous(500), table1_methods(), 1000),
        "n1000-desk" => (continuous(1000), table1_methods(), 200),
        "binary-desk" => (
            vec![SimSetting::binary(Homogeneous), SimSetting::binary(Heterogeneous)],
            binary_methods(),
            200,
        ),
        _ => return None,
    };
    let name = PRESET_NAMES.iter().find(|p| **p == name)?;
    Some(Preset { name, settings, methods, reps })
}

#[derive(Serialize)]
struct AggregatesBody<'a> {
    preset: &'a str,
    reps: usize,
    settings: Vec<String>,
    methods: Vec<String>,
    aggregates: &'a [cait::simulation::Aggregate],
}

#[derive(Serialize)]
struct RunBody {
    artifacts: &'static [&'static str],
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<String, Failure> {
    let p = preset(&cfg.preset).ok_or_else(|| {
        Failure::config(format!("unknown preset '{}'; available presets: {}", cfg.preset, PRESET_NAMES.join(", ")))
    })?;
    let reps = cfg.reps.unwrap_or(p.reps);
    if reps == 0 {
        return Err(Failure::config("reps must be at least 1"));
    }
    let workers = cfg.workers.unwrap_or_else(rayon::current_num_threads);
    let result = run_monte_carlo(&p.settings, &p.methods, reps, cfg.seed, workers, &cfg.sim_config())
        .map_err(|e| Failure::config(e.to_string()))?;
    fs::create_dir_all(&cfg.out).map_err(|e| io_failure(&cfg.out, e))?;
    let path = cfg.out.join("replications.csv");
    result.write_replications_csv(&path).map_err(|e| io_failure(&path, e))?;
    let path = cfg.out.join("plotdata.csv");
    result.write_plotdata_csv(&path).map_err(|e| io_failure(&path, e))?;
    let body = AggregatesBody {
        preset: p.name,
        reps,
        settings: p.settings.iter().map(|s| s.id()).collect(),
        methods: p.methods.iter().map(|m| m.label()).collect(),
        aggregates: &result.aggregates,
    };
    write_json(cfg, &cfg.out.join("aggregates.json"), body)?;
    // The CSVs cannot carry a header object; the sidecar records what produced them.
    write_json(cfg, &cfg.out.join("run.json"), RunBody { artifacts: &["replications.csv", "plotdata.csv", "aggregates.json"] })?;
    let mut table = Vec::new();
    result.write_table(&mut table).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    Ok(String::from_utf8_lossy(&table).into_owned())
}

/// Parse-free entry point used by `main` and the tests.
pub fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        CliCommand::Analyze(flags) => cmd_analyze(&resolve_config(Command::Analyze, &flags)?),
        CliCommand::Simulate(flags) => cmd_simulate(&resolve_config(Command::Simulate, &flags)?),
    }
}
