//! Experiment configuration, execution and result files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::QuantConfig;
use crate::dataset::load_dataset;
use crate::error::{Error, Result};
use crate::graph::{build_partitions, partition_nodes, Graph, NormalizeOptions, Strategy};
use crate::sbm::{generate_sbm, SbmSpec};
use crate::trainer::{train, MetricsRecord, ModelConfig, ModelKind, TrainConfig, TrainMode, TrainOutcome, Variant};

pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_HEADER: &str =
    "epoch,mode,train_loss,train_acc,val_acc,test_acc,main_bytes,meta_bytes,header_bytes,allreduce_bytes,messages,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Dataset(PathBuf),
    Synthetic(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub parts: usize,
    pub strategy: Strategy,
    pub model: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub bits: u8,
    pub variant: Variant,
    pub staleness: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub warmup: usize,
    pub degree_with_self_loops: bool,
    /// Record real per-epoch wall time in `metrics.csv` (otherwise 0, which
    /// keeps the file reproducible byte for byte).
    pub wall_clock: bool,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub comm_threads: bool,
    #[serde(skip, default = "default_timeout")]
    pub recv_timeout: Duration,
}

fn default_timeout() -> Duration {
    Duration::from_secs(120)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DataSource::Synthetic("sbm:k=4,n=125".into()),
            parts: 4,
            strategy: Strategy::Contiguous,
            model: ModelKind::Gcn,
            layers: 2,
            hidden: 32,
            bits: 1,
            variant: Variant::Sync,
            staleness: 0,
            epochs: 100,
            lr: 0.01,
            dropout: 0.0,
            seed: 0,
            warmup: 10,
            degree_with_self_loops: true,
            wall_clock: false,
            out: None,
            comm_threads: true,
            recv_timeout: default_timeout(),
        }
    }
}

/// Whether pipelined sends get their own thread, given a `HALOBIT_THREADS`
/// budget: only when every worker can have a helper.
pub fn comm_threads_allowed(threads: Option<&str>, parts: usize) -> bool {
    match threads.and_then(|t| t.trim().parse::<usize>().ok()) {
        Some(cap) => cap >= 2 * parts,
        None => true,
    }
}

impl ExperimentConfig {
    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        match &self.source {
            DataSource::Synthetic(s) => match s.parse::<SbmSpec>() {
                Ok(spec) => {
                    if let Err(e) = spec.validate() {
                        push_error(&mut errs, e);
                    } else if self.parts > spec.num_nodes() {
                        errs.push(format!("--parts {} exceeds {} nodes", self.parts, spec.num_nodes()));
                    }
                }
                Err(e) => push_error(&mut errs, e),
            },
            DataSource::Dataset(p) => {
                if !p.is_dir() {
                    errs.push(format!("--dataset {} is not a directory", p.display()));
                }
            }
        }
        errs.extend(self.field_errors());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    fn field_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.parts == 0 {
            errs.push("--parts must be at least 1".into());
        }
        if self.parts > u16::MAX as usize {
            errs.push(format!("--parts {} exceeds {}", self.parts, u16::MAX));
        }
        if self.layers == 0 {
            errs.push("--layers must be at least 1".into());
        }
        if self.layers > 255 {
            errs.push("--layers must be at most 255".into());
        }
        if self.hidden == 0 {
            errs.push("--hidden must be positive".into());
        }
        if QuantConfig::new(self.bits).is_err() {
            errs.push(format!("--bits {} not supported (use 1..8, 16 or 32)", self.bits));
        }
        if self.variant == Variant::Sync && self.staleness != 0 {
            errs.push("--staleness only applies to --mode async".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("--lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("--dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.epochs > u32::MAX as usize {
            errs.push("--epochs is too large".into());
        }
        errs
    }

    pub fn quant(&self) -> QuantConfig {
        QuantConfig::new(self.bits).expect("validated")
    }

    pub fn mode(&self) -> TrainMode {
        TrainMode { variant: self.variant, staleness: self.staleness }
    }

    pub fn normalize_options(&self) -> NormalizeOptions {
        NormalizeOptions { degree_with_self_loops: self.degree_with_self_loops }
    }

    /// The synthetic spec with the run seed unless the spec names its own.
    pub fn sbm_spec(&self) -> Option<SbmSpec> {
        match &self.source {
            DataSource::Synthetic(s) => {
                let mut spec: SbmSpec = s.parse().ok()?;
                if !s.contains("seed=") {
                    spec.seed = self.seed;
                }
                Some(spec)
            }
            DataSource::Dataset(_) => None,
        }
    }

    pub fn load_graph(&self) -> Result<Graph> {
        match &self.source {
            DataSource::Dataset(p) => load_dataset(p),
            DataSource::Synthetic(_) => generate_sbm(&self.sbm_spec().expect("validated")),
        }
    }

    pub fn model_config(&self, g: &Graph) -> ModelConfig {
        let mut widths = vec![g.feature_dim()];
        widths.extend(std::iter::repeat_n(self.hidden, self.layers - 1));
        widths.push(g.num_classes);
        ModelConfig { kind: self.model, widths, dropout: self.dropout }
    }

    pub fn train_config(&self, g: &Graph) -> TrainConfig {
        let mut t = TrainConfig::new(self.model_config(g), self.mode(), self.quant(), self.epochs);
        t.lr = self.lr;
        t.seed = self.seed;
        t.comm_threads = self.comm_threads;
        t.recv_timeout = self.recv_timeout;
        t
    }
}

fn push_error(errs: &mut Vec<String>, e: Error) {
    match e {
        Error::InvalidConfig(list) => errs.extend(list),
        Error::Config(msg) => errs.push(msg),
        other => errs.push(other.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

impl From<&MetricsRecord> for EpochSummary {
    fn from(m: &MetricsRecord) -> Self {
        EpochSummary {
            epoch: m.epoch,
            train_loss: m.train_loss,
            train_acc: m.train_acc,
            val_acc: m.val_acc,
            test_acc: m.test_acc,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ByteTotals {
    pub main_bytes: u64,
    pub meta_bytes: u64,
    pub header_bytes: u64,
    pub allreduce_bytes: u64,
    pub messages: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PostWarmup {
    pub epochs: usize,
    pub mean_main_bytes: f64,
    pub mean_meta_bytes: f64,
    pub mean_header_bytes: f64,
    pub mean_wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphInfo {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub version: String,
    pub config: Value,
    pub graph: GraphInfo,
    pub final_epoch: Option<EpochSummary>,
    pub best_val: Option<EpochSummary>,
    pub bytes: ByteTotals,
    pub post_warmup: PostWarmup,
    pub wall_ms_total: f64,
}

impl Summary {
    pub fn build(cfg: &ExperimentConfig, g: &Graph, metrics: &[MetricsRecord], wall_ms_total: f64) -> Result<Self> {
        let final_epoch = metrics.last().map(EpochSummary::from);
        // first epoch reaching the highest validation accuracy
        let best_val = metrics
            .iter()
            .fold(None::<&MetricsRecord>, |best, m| match best {
                Some(b) if b.val_acc >= m.val_acc => Some(b),
                _ => Some(m),
            })
            .map(EpochSummary::from);
        let bytes = metrics.iter().fold(ByteTotals::default(), |mut t, m| {
            t.main_bytes += m.main_bytes;
            t.meta_bytes += m.meta_bytes;
            t.header_bytes += m.header_bytes;
            t.allreduce_bytes += m.allreduce_bytes;
            t.messages += m.messages;
            t
        });
        let after: Vec<&MetricsRecord> = metrics.iter().filter(|m| m.epoch > cfg.warmup).collect();
        let mean = |f: &dyn Fn(&MetricsRecord) -> f64| {
            if after.is_empty() {
                0.0
            } else {
                after.iter().map(|m| f(m)).sum::<f64>() / after.len() as f64
            }
        };
        let post_warmup = PostWarmup {
            epochs: after.len(),
            mean_main_bytes: mean(&|m| m.main_bytes as f64),
            mean_meta_bytes: mean(&|m| m.meta_bytes as f64),
            mean_header_bytes: mean(&|m| m.header_bytes as f64),
            mean_wall_ms: mean(&|m| m.wall_ms),
        };
        let config = serde_json::to_value(cfg)?;
        Ok(Summary {
            schema_version: SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            graph: GraphInfo {
                num_nodes: g.num_nodes,
                num_edges: g.edges.len(),
                feature_dim: g.feature_dim(),
                num_classes: g.num_classes,
            },
            final_epoch,
            best_val,
            bytes,
            post_warmup,
            wall_ms_total,
        })
    }
}

pub fn metrics_csv(metrics: &[MetricsRecord], wall_clock: bool) -> String {
    let mut s = String::with_capacity(64 * (metrics.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let wall = if wall_clock { m.wall_ms } else { 0.0 };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            m.epoch,
            m.mode,
            m.train_loss,
            m.train_acc,
            m.val_acc,
            m.test_acc,
            m.main_bytes,
            m.meta_bytes,
            m.header_bytes,
            m.allreduce_bytes,
            m.messages,
            wall
        );
    }
    s
}

pub struct RunResult {
    pub outcome: TrainOutcome,
    pub summary: Summary,
}

/// Validates, builds the graph and partitions, trains, and writes
/// `metrics.csv` and `summary.json` to `cfg.out` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let g = cfg.load_graph()?;
    run_on_graph(cfg, &g, start)
}

/// Like [`run_experiment`] on a graph already in memory; `cfg.source` is
/// only echoed.
pub fn run_with_graph(cfg: &ExperimentConfig, g: &Graph) -> Result<RunResult> {
    let errs = cfg.field_errors();
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    run_on_graph(cfg, g, Instant::now())
}

fn run_on_graph(cfg: &ExperimentConfig, g: &Graph, start: Instant) -> Result<RunResult> {
    if cfg.parts > g.num_nodes {
        return Err(Error::Config(format!("--parts {} exceeds {} nodes", cfg.parts, g.num_nodes)));
    }
    let tcfg = cfg.train_config(g);
    let agg = tcfg.model.aggregation(g, cfg.normalize_options());
    let plan = partition_nodes(g, cfg.parts, cfg.strategy, cfg.seed)?;
    let parts = build_partitions(g, &agg, &plan)?;
    let outcome = train(g, &parts, &tcfg, cfg.normalize_options())?;
    let wall_ms_total = start.elapsed().as_secs_f64() * 1e3;
    let summary = Summary::build(cfg, g, &outcome.metrics, wall_ms_total)?;
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.csv"), metrics_csv(&outcome.metrics, cfg.wall_clock))?;
        let mut f = fs::File::create(out.join("summary.json"))?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        f.write_all(b"\n")?;
    }
    Ok(RunResult { outcome, summary })
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let path = if path.is_dir() { path.join("summary.json") } else { path.to_path_buf() };
    let bytes = fs::read(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    let v: Value = serde_json::from_slice(&bytes).map_err(|e| Error::load(&path, e.to_string()))?;
    match v.get("schema_version").and_then(Value::as_u64) {
        Some(n) if n == u64::from(SCHEMA_VERSION) => {}
        Some(n) => {
            return Err(Error::load(&path, format!("schema_version {n}, expected {SCHEMA_VERSION}")));
        }
        None => return Err(Error::load(&path, "missing schema_version")),
    }
    serde_json::from_value(v).map_err(|e| Error::load(&path, e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompareFormat {
    Table,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub run: String,
    pub final_test_acc: f64,
    pub best_val_test_acc: f64,
    pub epochs_to_best_val: usize,
    pub main_bytes: u64,
    pub meta_bytes: u64,
    /// Against the first run.
    pub delta_test_acc: f64,
    /// This run's main bytes over the first run's.
    pub bytes_ratio: f64,
}

pub fn compare_rows(runs: &[(String, Summary)]) -> Result<Vec<CompareRow>> {
    if runs.len() < 2 {
        return Err(Error::Config("compare needs at least two runs".into()));
    }
    let acc = |s: &Summary| s.final_epoch.as_ref().map_or(0.0, |e| e.test_acc);
    let base_acc = acc(&runs[0].1);
    let base_bytes = runs[0].1.bytes.main_bytes;
    Ok(runs
        .iter()
        .map(|(name, s)| CompareRow {
            run: name.clone(),
            final_test_acc: acc(s),
            best_val_test_acc: s.best_val.as_ref().map_or(0.0, |e| e.test_acc),
            epochs_to_best_val: s.best_val.as_ref().map_or(0, |e| e.epoch),
            main_bytes: s.bytes.main_bytes,
            meta_bytes: s.bytes.meta_bytes,
            delta_test_acc: acc(s) - base_acc,
            bytes_ratio: if base_bytes == 0 {
                if s.bytes.main_bytes == 0 { 1.0 } else { f64::INFINITY }
            } else {
                s.bytes.main_bytes as f64 / base_bytes as f64
            },
        })
        .collect())
}

pub fn compare_runs(paths: &[PathBuf], format: CompareFormat) -> Result<String> {
    let runs = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), read_summary(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = compare_rows(&runs)?;
    Ok(render(&rows, format))
}

fn render(rows: &[CompareRow], format: CompareFormat) -> String {
    let header = [
        "run",
        "final_test_acc",
        "best_val_test_acc",
        "epochs_to_best_val",
        "main_bytes",
        "meta_bytes",
        "delta_test_acc",
        "bytes_ratio",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.run.clone(),
                format!("{:.4}", r.final_test_acc),
                format!("{:.4}", r.best_val_test_acc),
                r.epochs_to_best_val.to_string(),
                r.main_bytes.to_string(),
                r.meta_bytes.to_string(),
                format!("{:+.4}", r.delta_test_acc),
                format!("{:.4}", r.bytes_ratio),
            ]
        })
        .collect();
    let mut out = String::new();
    match format {
        CompareFormat::Csv => {
            out.push_str(&header.join(","));
            out.push('\n');
            for row in &cells {
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        CompareFormat::Table => {
            let widths: Vec<usize> = (0..header.len())
                .map(|i| cells.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap())
                .collect();
            let line = |vals: Vec<&str>| {
                let mut s = String::new();
                for (i, v) in vals.iter().enumerate() {
                    if i == 0 {
                        let _ = write!(s, "{v:<w$}", w = widths[i]);
                    } else {
                        let _ = write!(s, "  {v:>w$}", w = widths[i]);
                    }
                }
                s.trim_end().to_string() + "\n"
            };
            out.push_str(&line(header.to_vec()));
            for row in &cells {
                out.push_str(&line(row.iter().map(String::as_str).collect()));
            }
        }
    }
    out
}
