//! Experiment harness: configuration files, the three sweeps (capacity,
//! class count, annealing length), statistical comparison between
//! methods, result persistence, and latent export.
//!
//! Results accumulate in an append-only `results.csv` with a
//! schema-version header; re-running a sweep skips rows that already
//! exist, so partial sweeps resume where they stopped. Grid points are
//! independent jobs executed in parallel (under the `parallel` feature)
//! with isolated PRNG streams, then merged in a deterministic order.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{kmeans, pca_fit, pca_kmeans_pipeline, KMeansOptions};
use crate::data::{generate, load_matrix_dir, ConnectomeDataset, SyntheticConfig};
use crate::model::{load_checkpoint, AnnealMode, JointVaeModel, ModelConfig};
use crate::objectives::ObjectiveSpec;
use crate::parallel::par_map_slice;
use crate::stats::{
    adjusted_rand_index, bootstrap_metric, homogeneity, welch_ttest, BootstrapSummary,
};
use crate::trainer::{extract_latents, train, TrainConfig, TrainReport};
use crate::{Error, Result};

/// First line of every results file; bump when columns change.
pub const RESULTS_SCHEMA: &str = "# schema=sitevae-results-v1";
/// Results file name inside the output directory.
pub const RESULTS_FILE: &str = "results.csv";

const RESULTS_HEADER: [&str; 14] = [
    "experiment",
    "method",
    "k_classes",
    "c_c",
    "anneal_iters",
    "seed",
    "ari",
    "homogeneity",
    "boot_mean",
    "boot_sd",
    "boot_ci_lo",
    "boot_ci_hi",
    "discrete_kl_final",
    "effective_classes",
];

// ───────────────────────── Configuration ─────────────────────────

/// The five comparison arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    JointvaeArch,
    JointvaeLoss,
    JointvaeHinge,
    VaeKmeans,
    PcaKmeans,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::JointvaeArch,
        Method::JointvaeLoss,
        Method::JointvaeHinge,
        Method::VaeKmeans,
        Method::PcaKmeans,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::JointvaeArch => "jointvae_arch",
            Method::JointvaeLoss => "jointvae_loss",
            Method::JointvaeHinge => "jointvae_hinge",
            Method::VaeKmeans => "vae_kmeans",
            Method::PcaKmeans => "pca_kmeans",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which experiment a config file describes (informational; the runner
/// invoked decides what actually executes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CapacitySweep,
    ClassSweep,
    AnnealSweep,
    #[default]
    SingleRun,
}

/// Where the dataset comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Generate a synthetic cohort.
    Synthetic(SyntheticConfig),
    /// Ingest a directory of per-subject matrix CSVs plus metadata.
    Ingest {
        dir: PathBuf,
        #[serde(default = "default_pattern")]
        pattern: String,
    },
    /// Load a previously written binary cache.
    Cache { path: PathBuf },
}

fn default_pattern() -> String {
    "*.csv".to_string()
}

impl DatasetConfig {
    pub fn load(&self) -> Result<ConnectomeDataset> {
        match self {
            DatasetConfig::Synthetic(cfg) => generate(cfg),
            DatasetConfig::Ingest { dir, pattern } => load_matrix_dir(dir, pattern),
            DatasetConfig::Cache { path } => ConnectomeDataset::load_cache(path),
        }
    }
}

/// Sweep grids and statistical settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Continuous-capacity grid for the capacity sweep, in nats.
    pub capacities: Vec<f64>,
    /// Discrete-class grid for the class sweep.
    pub k_grid: Vec<usize>,
    /// Annealing lengths as fractions of total iterations.
    pub anneal_fractions: Vec<f64>,
    /// Methods compared in the class sweep.
    pub methods: Vec<Method>,
    /// Bootstrap resample count B.
    pub bootstrap_b: usize,
    /// Projection dimensionality for the PCA baseline; `None` matches the
    /// model's continuous latent width (capacity-matched comparison).
    pub pca_components: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            capacities: vec![50.0, 500.0, 2000.0],
            k_grid: vec![5, 10, 15, 20, 25],
            anneal_fractions: (1..=7).map(|i| i as f64 / 7.0).collect(),
            methods: vec![
                Method::JointvaeArch,
                Method::JointvaeLoss,
                Method::VaeKmeans,
                Method::PcaKmeans,
            ],
            bootstrap_b: 1000,
            pca_components: None,
        }
    }
}

/// Output locations and artifact toggles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write one training-log CSV per trained run.
    #[serde(default = "default_true")]
    pub write_training_logs: bool,
}

fn default_true() -> bool {
    true
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// One experiment definition, loadable from a TOML file. Every section
/// except `dataset` and `output` may be partial or absent; missing
/// fields fall back to the documented defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentKind,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    pub output: OutputSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(e, path))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.sweep.bootstrap_b < 1 {
            return Err(Error::Config("bootstrap_b must be >= 1".into()));
        }
        if self
            .sweep
            .anneal_fractions
            .iter()
            .any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(Error::Config(
                "anneal_fractions must lie in (0, 1]".into(),
            ));
        }
        self.model.validate()?;
        self.objective.validate()?;
        Ok(())
    }

    /// Switch to the full-scale reference regime (long schedule, wide
    /// layers); dataset and latent sizes are left as configured.
    pub fn apply_paper_scale(&mut self) {
        self.train.epochs = 2500;
        self.train.batch_size = 512;
        self.train.anneal_iters = 5000;
        self.model.hidden_dims = vec![1024, 512, 256, 128];
    }

    fn results_path(&self) -> PathBuf {
        self.output.dir.join(RESULTS_FILE)
    }
}

// ───────────────────────── Result rows ─────────────────────────

/// One (method, grid point, seed) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub method: Method,
    pub k_classes: usize,
    /// Continuous capacity (hinge runs only).
    pub c_c: Option<f64>,
    pub anneal_iters: u64,
    pub seed: u64,
    pub ari: f64,
    pub homogeneity: f64,
    pub boot_mean: f64,
    pub boot_sd: f64,
    pub boot_ci_lo: f64,
    pub boot_ci_hi: f64,
    /// Final logged discrete KL (runs with a discrete head only).
    pub discrete_kl_final: Option<f64>,
    /// Classes holding at least 1% of the assignments.
    pub effective_classes: usize,
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultRow {
    /// The identity of a row within a results file: everything that
    /// defines the run, nothing that it measured.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.experiment,
            self.method,
            self.k_classes,
            opt_str(self.c_c),
            self.anneal_iters,
            self.seed
        )
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.experiment.clone(),
            self.method.to_string(),
            self.k_classes.to_string(),
            opt_str(self.c_c),
            self.anneal_iters.to_string(),
            self.seed.to_string(),
            self.ari.to_string(),
            self.homogeneity.to_string(),
            self.boot_mean.to_string(),
            self.boot_sd.to_string(),
            self.boot_ci_lo.to_string(),
            self.boot_ci_hi.to_string(),
            opt_str(self.discrete_kl_final),
            self.effective_classes.to_string(),
        ]
    }

    fn sort_key(&self) -> (String, usize, usize, u64, u64, u64) {
        let method_ix = Method::ALL.iter().position(|m| *m == self.method).unwrap();
        (
            self.experiment.clone(),
            method_ix,
            self.k_classes,
            self.anneal_iters,
            self.c_c.map(f64::to_bits).unwrap_or(0),
            self.seed,
        )
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, ix: usize, path: &Path) -> Result<T>
where
    T::Err: fmt::Display,
{
    rec.get(ix)
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: format!("missing column {}", RESULTS_HEADER[ix]),
        })?
        .parse()
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("column {}: {e}", RESULTS_HEADER[ix]),
        })
}

fn parse_opt(rec: &csv::StringRecord, ix: usize, path: &Path) -> Result<Option<f64>> {
    match rec.get(ix).unwrap_or("") {
        "" => Ok(None),
        _ => parse_field(rec, ix, path).map(Some),
    }
}

/// Read every row of a results file; a missing file is an empty result
/// set, a wrong schema line is an error.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(e, path))?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    if first.trim_end() != RESULTS_SCHEMA {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("expected schema line '{RESULTS_SCHEMA}', found '{first}'"),
        });
    }
    let mut rdr = csv::Reader::from_reader(rest.as_bytes());
    if rdr.headers()? != &csv::StringRecord::from(RESULTS_HEADER.to_vec()) {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "unexpected results header".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(ResultRow {
            experiment: rec.get(0).unwrap_or("").to_string(),
            method: Method::parse(rec.get(1).unwrap_or(""))?,
            k_classes: parse_field(&rec, 2, path)?,
            c_c: parse_opt(&rec, 3, path)?,
            anneal_iters: parse_field(&rec, 4, path)?,
            seed: parse_field(&rec, 5, path)?,
            ari: parse_field(&rec, 6, path)?,
            homogeneity: parse_field(&rec, 7, path)?,
            boot_mean: parse_field(&rec, 8, path)?,
            boot_sd: parse_field(&rec, 9, path)?,
            boot_ci_lo: parse_field(&rec, 10, path)?,
            boot_ci_hi: parse_field(&rec, 11, path)?,
            discrete_kl_final: parse_opt(&rec, 12, path)?,
            effective_classes: parse_field(&rec, 13, path)?,
        });
    }
    Ok(rows)
}

/// Append rows to a results file, creating it (schema line + header)
/// when absent. Rows are written in a deterministic order.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut rows: Vec<&ResultRow> = rows.iter().collect();
    rows.sort_by_key(|r| r.sort_key());
    let fresh = !path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io_at(e, path))?;
    if fresh {
        writeln!(file, "{RESULTS_SCHEMA}").map_err(|e| Error::io_at(e, path))?;
    }
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(RESULTS_HEADER)?;
    }
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush().map_err(|e| Error::io_at(e, path))?;
    Ok(())
}

// ───────────────────────── Job execution ─────────────────────────

/// Classes that hold at least 1% of the assignments; `k_hint` sizes the
/// count table when some classes were never assigned.
pub fn effective_classes(assignments: &[usize], k_hint: usize) -> usize {
    if assignments.is_empty() {
        return 0;
    }
    let width = k_hint.max(assignments.iter().max().map_or(0, |m| m + 1));
    let mut counts = vec![0usize; width];
    for &a in assignments {
        counts[a] += 1;
    }
    let threshold = 0.01 * assignments.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0 && c as f64 >= threshold)
        .count()
}

#[derive(Debug, Clone)]
struct Job {
    method: Method,
    k: usize,
    c_c: Option<f64>,
    anneal_iters: u64,
    seed: u64,
}

impl Job {
    fn key(&self, experiment: &str) -> String {
        format!(
            "{experiment}|{}|{}|{}|{}|{}",
            self.method,
            self.k,
            opt_str(self.c_c),
            self.anneal_iters,
            self.seed
        )
    }

    fn slug(&self, experiment: &str) -> String {
        let mut s = format!("{experiment}_{}_k{}", self.method, self.k);
        if let Some(c) = self.c_c {
            s.push_str(&format!("_cc{}", c.to_string().replace('.', "p")));
        }
        s.push_str(&format!("_ai{}_seed{}", self.anneal_iters, self.seed));
        s
    }
}

struct JobOutput {
    row: ResultRow,
    boot: BootstrapSummary,
}

fn method_model_config(cfg: &ExperimentConfig, ds: &ConnectomeDataset, job: &Job) -> ModelConfig {
    let (anneal_mode, k_classes) = match job.method {
        Method::JointvaeArch => (AnnealMode::ArchAnneal, job.k),
        Method::JointvaeLoss => (AnnealMode::LossAnneal, job.k),
        Method::JointvaeHinge => (AnnealMode::Hinge, job.k),
        Method::VaeKmeans | Method::PcaKmeans => (AnnealMode::None, 0),
    };
    ModelConfig {
        input_dim: ds.d,
        anneal_mode,
        k_classes,
        ..cfg.model.clone()
    }
}

fn method_objective(cfg: &ExperimentConfig, job: &Job) -> ObjectiveSpec {
    let user = &cfg.objective;
    match job.method {
        Method::JointvaeArch => ObjectiveSpec::arch_anneal(if user.mode == AnnealMode::ArchAnneal
        {
            user.beta
        } else {
            1.0
        }),
        Method::JointvaeLoss => ObjectiveSpec::loss_anneal(if user.mode == AnnealMode::LossAnneal
        {
            user.beta
        } else {
            1.0
        }),
        Method::JointvaeHinge => {
            let beta = if user.mode == AnnealMode::Hinge { user.beta } else { 100.0 };
            let c_c = job.c_c.or(user.c_c).unwrap_or(50.0);
            ObjectiveSpec::hinge(beta, c_c, user.c_d)
        }
        // Standard-ELBO VAE baseline (no discrete head).
        Method::VaeKmeans | Method::PcaKmeans => ObjectiveSpec::plain(1.0, 1.0),
    }
}

fn run_job(
    cfg: &ExperimentConfig,
    ds: &ConnectomeDataset,
    experiment: &str,
    job: &Job,
) -> Result<JobOutput> {
    let opts = KMeansOptions::default();
    let (assignments, discrete_kl_final) = match job.method {
        Method::PcaKmeans => {
            let p = cfg
                .sweep
                .pca_components
                .unwrap_or(cfg.model.z_c_dim)
                .min(ds.n)
                .min(ds.d);
            let (km, _) = pca_kmeans_pipeline(&ds.x, ds.n, ds.d, p, job.k, job.seed, &opts)?;
            (km.assignments, None)
        }
        method => {
            let model_cfg = method_model_config(cfg, ds, job);
            let objective = method_objective(cfg, job);
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = job.seed;
            train_cfg.anneal_iters = job.anneal_iters;
            train_cfg.checkpoint_every = None;
            train_cfg.checkpoint_dir = None;
            let mut model = JointVaeModel::new(model_cfg, job.seed)?;
            let report = train(&mut model, ds, &objective, &train_cfg)?;
            if cfg.output.write_training_logs {
                let dir = cfg.output.dir.join("logs");
                fs::create_dir_all(&dir).map_err(|e| Error::io_at(e, &dir))?;
                report
                    .log
                    .write_csv(&dir.join(format!("{}.csv", job.slug(experiment))))?;
            }
            let (z, assignments) = extract_latents(&model, ds)?;
            match method {
                Method::VaeKmeans => {
                    let km = kmeans(&z, ds.n, model.config.z_c_dim, job.k, job.seed, &opts)?;
                    (km.assignments, None)
                }
                _ => {
                    let kl_d = report.log.rows.last().map(|r| r.breakdown.kl_d);
                    (assignments, kl_d)
                }
            }
        }
    };

    let ari = adjusted_rand_index(&ds.site, &assignments)?;
    let hom = homogeneity(&ds.site, &assignments)?;
    let boot = bootstrap_metric(
        &ds.site,
        &assignments,
        |a, b| adjusted_rand_index(a, b),
        cfg.sweep.bootstrap_b,
        job.seed,
    )?;
    let row = ResultRow {
        experiment: experiment.to_string(),
        method: job.method,
        k_classes: job.k,
        c_c: job.c_c,
        anneal_iters: job.anneal_iters,
        seed: job.seed,
        ari,
        homogeneity: hom,
        boot_mean: boot.mean,
        boot_sd: boot.sd,
        boot_ci_lo: boot.ci_lo,
        boot_ci_hi: boot.ci_hi,
        discrete_kl_final,
        effective_classes: effective_classes(&assignments, job.k),
    };
    Ok(JobOutput { row, boot })
}

/// What a sweep call produced.
#[derive(Debug)]
pub struct SweepOutcome {
    /// Rows computed by this invocation (already appended to disk).
    pub rows: Vec<ResultRow>,
    /// Grid points skipped because the results file already had them.
    pub skipped: usize,
    pub results_path: PathBuf,
}

fn run_jobs(
    cfg: &ExperimentConfig,
    ds: &ConnectomeDataset,
    experiment: &str,
    jobs: Vec<Job>,
) -> Result<(Vec<JobOutput>, usize)> {
    fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::io_at(e, &cfg.output.dir))?;
    let existing: BTreeSet<String> = read_results(&cfg.results_path())?
        .iter()
        .map(|r| r.key())
        .collect();
    let (pending, skipped): (Vec<Job>, Vec<Job>) = jobs
        .into_iter()
        .partition(|j| !existing.contains(&j.key(experiment)));
    let n_skipped = skipped.len();
    log::info!(
        "{experiment}: {} grid points to run, {n_skipped} already present",
        pending.len()
    );
    let outputs: Vec<Result<JobOutput>> =
        par_map_slice(&pending, |job| run_job(cfg, ds, experiment, job));
    let mut done = Vec::with_capacity(outputs.len());
    for out in outputs {
        done.push(out?);
    }
    let rows: Vec<ResultRow> = done.iter().map(|o| o.row.clone()).collect();
    append_results(&cfg.results_path(), &rows)?;
    Ok((done, n_skipped))
}

// ───────────────────────── Sweeps ─────────────────────────

/// Hinge-objective capacity sweep: one run per (C_c, seed) at a fixed
/// class count, β = 100 and C_d = log K unless configured otherwise.
pub fn run_capacity_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    if cfg.sweep.capacities.is_empty() {
        return Err(Error::Config("capacity sweep needs a non-empty grid".into()));
    }
    let ds = cfg.dataset.load()?;
    let mut jobs = Vec::new();
    for &c_c in &cfg.sweep.capacities {
        for &seed in &cfg.seeds {
            jobs.push(Job {
                method: Method::JointvaeHinge,
                k: cfg.model.k_classes,
                c_c: Some(c_c),
                anneal_iters: cfg.train.anneal_iters,
                seed,
            });
        }
    }
    let (done, skipped) = run_jobs(cfg, &ds, "capacity_sweep", jobs)?;
    Ok(SweepOutcome {
        rows: done.into_iter().map(|o| o.row).collect(),
        skipped,
        results_path: cfg.results_path(),
    })
}

/// Persisted bootstrap distribution for the t-test pairing.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersistedBoot {
    k: usize,
    method: Method,
    seed: u64,
    summary: BootstrapSummary,
}

/// One method-vs-reference comparison in `ttests.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTestEntry {
    pub method: Method,
    pub seed: u64,
    pub median_ari: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Contents of `ttests.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTestsReport {
    pub k: usize,
    pub reference: Method,
    pub reference_seed: u64,
    pub reference_median_ari: f64,
    pub comparisons: Vec<TTestEntry>,
}

/// Class-count sweep across methods; at k = number of true sites each
/// run's bootstrap distribution is persisted and Welch t-tests between
/// the arch-annealed model and every other method are written to
/// `ttests.json` (each side represented by its median-ARI seed).
pub fn run_class_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    if cfg.sweep.k_grid.is_empty() || cfg.sweep.methods.is_empty() {
        return Err(Error::Config(
            "class sweep needs non-empty k_grid and methods".into(),
        ));
    }
    let ds = cfg.dataset.load()?;
    let mut jobs = Vec::new();
    for &k in &cfg.sweep.k_grid {
        for &method in &cfg.sweep.methods {
            for &seed in &cfg.seeds {
                jobs.push(Job {
                    method,
                    k,
                    c_c: match method {
                        Method::JointvaeHinge => Some(cfg.objective.c_c.unwrap_or(50.0)),
                        _ => None,
                    },
                    anneal_iters: cfg.train.anneal_iters,
                    seed,
                });
            }
        }
    }
    let (done, skipped) = run_jobs(cfg, &ds, "class_sweep", jobs)?;

    // Persist bootstrap distributions at k = S for the paired t-tests.
    let boot_dir = cfg.output.dir.join("bootstrap");
    fs::create_dir_all(&boot_dir).map_err(|e| Error::io_at(e, &boot_dir))?;
    for out in &done {
        if out.row.k_classes != ds.n_sites {
            continue;
        }
        let persisted = PersistedBoot {
            k: out.row.k_classes,
            method: out.row.method,
            seed: out.row.seed,
            summary: out.boot.clone(),
        };
        let path = boot_dir.join(format!("{}_seed{}.json", out.row.method, out.row.seed));
        let file = fs::File::create(&path).map_err(|e| Error::io_at(e, &path))?;
        serde_json::to_writer(file, &persisted)?;
    }
    write_ttests(cfg, ds.n_sites)?;

    Ok(SweepOutcome {
        rows: done.into_iter().map(|o| o.row).collect(),
        skipped,
        results_path: cfg.results_path(),
    })
}

fn load_boots(dir: &Path, k: usize) -> Result<Vec<PersistedBoot>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io_at(e, dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let file = fs::File::open(&path).map_err(|e| Error::io_at(e, &path))?;
        let pb: PersistedBoot = serde_json::from_reader(file)?;
        if pb.k == k {
            out.push(pb);
        }
    }
    Ok(out)
}

/// The median-ARI run of one method: ties and even counts resolve to the
/// lower-middle element, ordered by (point estimate, seed).
fn median_boot(mut boots: Vec<PersistedBoot>) -> Option<PersistedBoot> {
    if boots.is_empty() {
        return None;
    }
    boots.sort_by(|a, b| {
        a.summary
            .point
            .partial_cmp(&b.summary.point)
            .unwrap()
            .then(a.seed.cmp(&b.seed))
    });
    let ix = (boots.len() - 1) / 2;
    Some(boots.swap_remove(ix))
}

/// Compute `ttests.json` from the persisted bootstrap distributions at
/// `k`. Comparisons are emitted only for methods whose distributions
/// exist alongside the arch-annealed reference.
pub fn write_ttests(cfg: &ExperimentConfig, k: usize) -> Result<Option<PathBuf>> {
    let boot_dir = cfg.output.dir.join("bootstrap");
    let all = load_boots(&boot_dir, k)?;
    let by_method = |m: Method| -> Vec<PersistedBoot> {
        all.iter().filter(|b| b.method == m).cloned().collect()
    };
    let Some(reference) = median_boot(by_method(Method::JointvaeArch)) else {
        return Ok(None);
    };
    let mut comparisons = Vec::new();
    for method in Method::ALL {
        if method == Method::JointvaeArch {
            continue;
        }
        let Some(other) = median_boot(by_method(method)) else {
            continue;
        };
        let t = welch_ttest(&reference.summary.values, &other.summary.values)?;
        comparisons.push(TTestEntry {
            method,
            seed: other.seed,
            median_ari: other.summary.point,
            t: t.t,
            df: t.df,
            p: t.p,
        });
    }
    if comparisons.is_empty() {
        return Ok(None);
    }
    let report = TTestsReport {
        k,
        reference: Method::JointvaeArch,
        reference_seed: reference.seed,
        reference_median_ari: reference.summary.point,
        comparisons,
    };
    let path = cfg.output.dir.join("ttests.json");
    let file = fs::File::create(&path).map_err(|e| Error::io_at(e, &path))?;
    serde_json::to_writer_pretty(file, &report)?;
    Ok(Some(path))
}

/// Annealing-length sweep: arch-annealed runs with `anneal_iters` set to
/// each configured fraction of the total iteration count.
pub fn run_anneal_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    if cfg.sweep.anneal_fractions.is_empty() {
        return Err(Error::Config("anneal sweep needs a non-empty grid".into()));
    }
    let ds = cfg.dataset.load()?;
    let total = (cfg.train.epochs * cfg.train.iterations_per_epoch(ds.n)) as f64;
    let mut jobs = Vec::new();
    for &frac in &cfg.sweep.anneal_fractions {
        let anneal_iters = ((frac * total).round() as u64).max(1);
        for &seed in &cfg.seeds {
            jobs.push(Job {
                method: Method::JointvaeArch,
                k: cfg.model.k_classes,
                c_c: None,
                anneal_iters,
                seed,
            });
        }
    }
    let (done, skipped) = run_jobs(cfg, &ds, "anneal_sweep", jobs)?;
    Ok(SweepOutcome {
        rows: done.into_iter().map(|o| o.row).collect(),
        skipped,
        results_path: cfg.results_path(),
    })
}

// ───────────────────────── Single runs & export ─────────────────────────

/// Outcome of one training run plus its evaluation summary.
pub struct SingleRun {
    pub model: JointVaeModel,
    pub report: TrainReport,
    pub dataset: ConnectomeDataset,
    pub summary: RunSummary,
}

/// Human-facing summary of a single run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub ari: f64,
    pub homogeneity: f64,
    pub effective_classes: usize,
    pub discrete_kl_final: Option<f64>,
    pub final_total: Option<f64>,
    pub iterations: u64,
}

/// Train one model exactly as the config's objective describes. Models
/// without a discrete head are evaluated by k-means (k = true site
/// count) on their continuous latents.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<SingleRun> {
    cfg.validate()?;
    let ds = cfg.dataset.load()?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.input_dim = ds.d;
    model_cfg.anneal_mode = cfg.objective.mode;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let mut model = JointVaeModel::new(model_cfg, seed)?;
    let report = train(&mut model, &ds, &cfg.objective, &train_cfg)?;
    let (z, mut assignments) = extract_latents(&model, &ds)?;
    let discrete_kl_final = if model.config.k_classes > 0 {
        report.log.rows.last().map(|r| r.breakdown.kl_d)
    } else {
        assignments = kmeans(
            &z,
            ds.n,
            model.config.z_c_dim,
            ds.n_sites,
            seed,
            &KMeansOptions::default(),
        )?
        .assignments;
        None
    };
    let summary = RunSummary {
        ari: adjusted_rand_index(&ds.site, &assignments)?,
        homogeneity: homogeneity(&ds.site, &assignments)?,
        effective_classes: effective_classes(
            &assignments,
            model.config.k_classes.max(ds.n_sites),
        ),
        discrete_kl_final,
        final_total: report.log.rows.last().map(|r| r.breakdown.total),
        iterations: report.iterations,
    };
    Ok(SingleRun {
        model,
        report,
        dataset: ds,
        summary,
    })
}

/// Write `latents.csv` (full continuous representation + assignment +
/// true site per subject) and `latents_2d.csv` (2-D PCA of the
/// continuous latents) from a trained checkpoint.
pub fn export_latents(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = cfg.dataset.load()?;
    if ck.model.config.input_dim != ds.d {
        return Err(Error::Config(format!(
            "checkpoint input_dim {} does not match dataset dim {}",
            ck.model.config.input_dim, ds.d
        )));
    }
    let (z, assignments) = ck.model.eval_latents(&ds.x, ds.n)?;
    let p = ck.model.config.z_c_dim;
    fs::create_dir_all(out_dir).map_err(|e| Error::io_at(e, out_dir))?;

    let latents_path = out_dir.join("latents.csv");
    let mut w = csv::Writer::from_path(&latents_path)?;
    let mut header = vec!["subject_id".to_string()];
    header.extend((0..p).map(|j| format!("z_{j}")));
    header.push("assignment".into());
    header.push("true_site".into());
    w.write_record(&header)?;
    for i in 0..ds.n {
        let mut rec = vec![ds.subject_ids[i].clone()];
        rec.extend(z[i * p..(i + 1) * p].iter().map(|v| v.to_string()));
        rec.push(
            assignments
                .get(i)
                .map(|a| a.to_string())
                .unwrap_or_default(),
        );
        rec.push(ds.site[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io_at(e, &latents_path))?;

    // 2-D projection (padded with zeros if the latents have rank < 2).
    let p2 = 2.min(p).min(ds.n);
    let pca = pca_fit(&z, ds.n, p, p2)?;
    let proj = pca.project(&z, ds.n)?;
    let latents2d_path = out_dir.join("latents_2d.csv");
    let mut w = csv::Writer::from_path(&latents2d_path)?;
    w.write_record(["subject_id", "pc1", "pc2", "assignment", "true_site"])?;
    for i in 0..ds.n {
        let pc1 = proj[i * pca.p];
        let pc2 = if pca.p > 1 { proj[i * pca.p + 1] } else { 0.0 };
        w.write_record([
            ds.subject_ids[i].clone(),
            pc1.to_string(),
            pc2.to_string(),
            assignments
                .get(i)
                .map(|a| a.to_string())
                .unwrap_or_default(),
            ds.site[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io_at(e, &latents2d_path))?;
    Ok((latents_path, latents2d_path))
}

// ───────────────────────── Reporting ─────────────────────────

/// Median-over-seeds summary of a results file, one line per
/// (experiment, method, grid point), sorted.
pub fn summarize_results(path: &Path) -> Result<String> {
    use std::collections::BTreeMap;
    let rows = read_results(path)?;
    if rows.is_empty() {
        return Ok(format!("no results in {}\n", path.display()));
    }
    type GroupKey = (String, usize, usize, u64, u64);
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in &rows {
        let method_ix = Method::ALL.iter().position(|m| *m == r.method).unwrap();
        groups
            .entry((
                r.experiment.clone(),
                method_ix,
                r.k_classes,
                r.anneal_iters,
                r.c_c.map(f64::to_bits).unwrap_or(0),
            ))
            .or_default()
            .push(r);
    }
    let mut out = String::new();
    out.push_str(
        "experiment      method          k   c_c      anneal  seeds  med_ari  med_hom  med_eff\n",
    );
    for ((experiment, method_ix, k, anneal, _), group) in &groups {
        let aris: Vec<f64> = group.iter().map(|r| r.ari).collect();
        let homs: Vec<f64> = group.iter().map(|r| r.homogeneity).collect();
        let effs: Vec<f64> = group.iter().map(|r| r.effective_classes as f64).collect();
        let c_c = opt_str(group[0].c_c);
        out.push_str(&format!(
            "{:<15} {:<15} {:<3} {:<8} {:<7} {:<6} {:<8.4} {:<8.4} {:<7.1}\n",
            experiment,
            Method::ALL[*method_ix],
            k,
            if c_c.is_empty() { "-" } else { &c_c },
            anneal,
            group.len(),
            crate::stats::median(&aris),
            crate::stats::median(&homs),
            crate::stats::median(&effs),
        ));
    }
    Ok(out)
}
