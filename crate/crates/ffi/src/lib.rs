//! C ABI for halobit.
//!
//! Graphs, quantized blocks and finished runs are opaque handles released
//! with the matching `hb_*_free`. Every fallible call returns an
//! [`HbStatus`]; on failure a description is available from
//! [`hb_last_error`] on the same thread until the next failing call.
//! Strings returned to the caller are freed with [`hb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use halobit::codec::{dequantize_rows, quantize_rows, QuantConfig, QuantizedBlock};
use halobit::dataset::load_dataset;
use halobit::experiment::{metrics_csv, run_with_graph, ExperimentConfig, RunResult};
use halobit::graph::{Graph, Strategy};
use halobit::linalg::DenseMatrix;
use halobit::rng::{RngStream, StreamKey, StreamKind};
use halobit::sbm::{generate_sbm, SbmSpec};
use halobit::trainer::{EpochMode, ModelKind, Variant};
use halobit::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Load = 4,
    Shape = 5,
    Codec = 6,
    Protocol = 7,
    Numeric = 8,
    Io = 9,
    Panic = 10,
}

impl From<&Error> for HbStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidConfig(_) => HbStatus::Config,
            Error::Load { .. } => HbStatus::Load,
            Error::Shape(_) => HbStatus::Shape,
            Error::Codec(_) => HbStatus::Codec,
            Error::Protocol(_) | Error::Poisoned(_) => HbStatus::Protocol,
            Error::Numeric(_) => HbStatus::Numeric,
            Error::Io(_) | Error::Json(_) => HbStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(HbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(HbStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HbStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(HbStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HbStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HbStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. Owned by the
/// library; valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn hb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Opaque graph handle.
pub struct HbGraph(Graph);

/// Generates a stochastic block model graph from a spec such as
/// `"sbm:k=4,n=125,p_in=0.15,p_out=0.01,d=32,noise=1,seed=0"`.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hb_graph_sbm(spec: *const c_char, out: *mut *mut HbGraph) -> HbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec: SbmSpec = str_arg(spec, "spec")?.parse()?;
        *out = Box::into_raw(Box::new(HbGraph(generate_sbm(&spec)?)));
        Ok(())
    })
}

/// Loads a dataset directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hb_graph_load(path: *const c_char, out: *mut *mut HbGraph) -> HbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        *out = Box::into_raw(Box::new(HbGraph(load_dataset(path)?)));
        Ok(())
    })
}

/// # Safety
/// `g` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hb_graph_free(g: *mut HbGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct HbGraphInfo {
    pub num_nodes: usize,
    /// Directed edges, so each undirected edge counts twice.
    pub num_edges: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// # Safety
/// `g` must be a live graph handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_graph_info(g: *const HbGraph, out: *mut HbGraphInfo) -> HbStatus {
    guard(|| {
        let g = &handle(g, "graph")?.0;
        *out_arg(out, "out")? = HbGraphInfo {
            num_nodes: g.num_nodes,
            num_edges: g.edges.len(),
            feature_dim: g.feature_dim(),
            num_classes: g.num_classes,
        };
        Ok(())
    })
}

/// Opaque quantized block handle.
pub struct HbBlock(QuantizedBlock);

fn quant_config(bits: u8) -> Result<QuantConfig, Fail> {
    Ok(QuantConfig::new(bits)?)
}

/// Quantizes a row-major `rows x dim` matrix with stochastic rounding drawn
/// from the stream keyed by `seed`.
///
/// # Safety
/// `data` must point to `rows * dim` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hb_block_quantize(
    data: *const f64,
    rows: usize,
    dim: usize,
    bits: u8,
    seed: u64,
    out: *mut *mut HbBlock,
) -> HbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let n = rows.checked_mul(dim).ok_or_else(|| invalid("rows * dim overflows"))?;
        let values = if n == 0 {
            Vec::new()
        } else {
            if data.is_null() {
                return Err(null("data"));
            }
            std::slice::from_raw_parts(data, n).to_vec()
        };
        let m = DenseMatrix::from_vec(rows, dim, values)?;
        let mut rng = RngStream::new(StreamKey::new(seed, StreamKind::QuantForward));
        let block = quantize_rows(&m, quant_config(bits)?, &mut rng)?;
        *out = Box::into_raw(Box::new(HbBlock(block)));
        Ok(())
    })
}

/// Parses a block from its wire bytes.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hb_block_from_wire(bytes: *const u8, len: usize, out: *mut *mut HbBlock) -> HbStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let (block, used) = QuantizedBlock::from_wire(std::slice::from_raw_parts(bytes, len))?;
        if used != len {
            return Err(invalid(format!("{} trailing bytes after block", len - used)));
        }
        *out = Box::into_raw(Box::new(HbBlock(block)));
        Ok(())
    })
}

/// # Safety
/// `b` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hb_block_free(b: *mut HbBlock) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct HbBlockInfo {
    pub rows: usize,
    pub dim: usize,
    pub bits: u8,
    /// Packed code bytes (main data).
    pub payload_bytes: usize,
    /// Per-row min and scale.
    pub metadata_bytes: usize,
    /// Full serialized size including the 12-byte header.
    pub wire_bytes: usize,
}

/// # Safety
/// `b` must be a live block handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_block_info(b: *const HbBlock, out: *mut HbBlockInfo) -> HbStatus {
    guard(|| {
        let b = &handle(b, "block")?.0;
        *out_arg(out, "out")? = HbBlockInfo {
            rows: b.num_rows(),
            dim: b.dim(),
            bits: b.bits(),
            payload_bytes: b.payload_len(),
            metadata_bytes: b.metadata_len(),
            wire_bytes: b.wire_len(),
        };
        Ok(())
    })
}

/// Writes the wire bytes into `buf`. `written` receives the wire length even
/// when `cap` is too small, in which case nothing is written and
/// `InvalidArgument` is returned.
///
/// # Safety
/// `buf` must point to `cap` writable bytes (may be NULL when `cap` is 0);
/// `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hb_block_to_wire(
    b: *const HbBlock,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> HbStatus {
    guard(|| {
        let b = &handle(b, "block")?.0;
        let written = out_arg(written, "written")?;
        let wire = b.to_wire();
        *written = wire.len();
        if cap < wire.len() {
            return Err(invalid(format!("buffer holds {cap} bytes, block needs {}", wire.len())));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(wire.as_ptr(), buf, wire.len());
        Ok(())
    })
}

/// Dequantizes into a row-major buffer of `rows * dim` doubles.
///
/// # Safety
/// `out` must point to `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hb_block_dequantize(b: *const HbBlock, out: *mut f64, cap: usize) -> HbStatus {
    guard(|| {
        let b = &handle(b, "block")?.0;
        let m = dequantize_rows(b)?;
        let n = m.data().len();
        if cap < n {
            return Err(invalid(format!("buffer holds {cap} values, block has {n}")));
        }
        if n > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            ptr::copy_nonoverlapping(m.data().as_ptr(), out, n);
        }
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HbStrategy {
    Contiguous = 0,
    Bfs = 1,
    Hash = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HbModel {
    Gcn = 0,
    Sage = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HbMode {
    Sync = 0,
    Async = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct HbRunConfig {
    pub parts: usize,
    pub strategy: HbStrategy,
    pub model: HbModel,
    pub layers: usize,
    pub hidden: usize,
    pub bits: u8,
    pub mode: HbMode,
    pub staleness: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub warmup: usize,
    pub degree_with_self_loops: bool,
}

impl Default for HbRunConfig {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        HbRunConfig {
            parts: d.parts,
            strategy: HbStrategy::Contiguous,
            model: HbModel::Gcn,
            layers: d.layers,
            hidden: d.hidden,
            bits: d.bits,
            mode: HbMode::Sync,
            staleness: d.staleness,
            epochs: d.epochs,
            lr: d.lr,
            dropout: d.dropout,
            seed: d.seed,
            warmup: d.warmup,
            degree_with_self_loops: d.degree_with_self_loops,
        }
    }
}

impl HbRunConfig {
    fn to_experiment(self) -> ExperimentConfig {
        ExperimentConfig {
            parts: self.parts,
            strategy: match self.strategy {
                HbStrategy::Contiguous => Strategy::Contiguous,
                HbStrategy::Bfs => Strategy::BfsBlocks,
                HbStrategy::Hash => Strategy::Hash,
            },
            model: match self.model {
                HbModel::Gcn => ModelKind::Gcn,
                HbModel::Sage => ModelKind::Sage,
            },
            layers: self.layers,
            hidden: self.hidden,
            bits: self.bits,
            variant: match self.mode {
                HbMode::Sync => Variant::Sync,
                HbMode::Async => Variant::Async,
            },
            staleness: self.staleness,
            epochs: self.epochs,
            lr: self.lr,
            dropout: self.dropout,
            seed: self.seed,
            warmup: self.warmup,
            degree_with_self_loops: self.degree_with_self_loops,
            ..Default::default()
        }
    }
}

/// Fills `cfg` with the defaults used by the command-line tool.
///
/// # Safety
/// `cfg` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hb_run_config_default(cfg: *mut HbRunConfig) -> HbStatus {
    guard(|| {
        *out_arg(cfg, "cfg")? = HbRunConfig::default();
        Ok(())
    })
}

/// Opaque handle to a finished training run.
pub struct HbRun(RunResult);

/// Trains on `graph` and returns the finished run.
///
/// # Safety
/// `graph` must be a live graph handle, `cfg` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_run(graph: *const HbGraph, cfg: *const HbRunConfig, out: *mut *mut HbRun) -> HbStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        let cfg = handle(cfg, "cfg")?.to_experiment();
        let out = out_arg(out, "out")?;
        let res = run_with_graph(&cfg, g)?;
        *out = Box::into_raw(Box::new(HbRun(res)));
        Ok(())
    })
}

/// # Safety
/// `r` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hb_run_free(r: *mut HbRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Number of recorded epochs.
///
/// # Safety
/// `r` must be a live run handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn hb_run_num_epochs(r: *const HbRun) -> usize {
    r.as_ref().map_or(0, |r| r.0.outcome.metrics.len())
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct HbEpochMetrics {
    pub epoch: usize,
    /// True when the epoch ran pipelined rather than synchronously.
    pub pipelined: bool,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub main_bytes: u64,
    pub meta_bytes: u64,
    pub header_bytes: u64,
    pub allreduce_bytes: u64,
    pub messages: u64,
}

/// Metrics of the `index`-th epoch (0-based).
///
/// # Safety
/// `r` must be a live run handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_run_epoch(r: *const HbRun, index: usize, out: *mut HbEpochMetrics) -> HbStatus {
    guard(|| {
        let r = &handle(r, "run")?.0;
        let out = out_arg(out, "out")?;
        let m = r
            .outcome
            .metrics
            .get(index)
            .ok_or_else(|| invalid(format!("epoch index {index} out of range")))?;
        *out = HbEpochMetrics {
            epoch: m.epoch,
            pipelined: m.mode == EpochMode::Async,
            train_loss: m.train_loss,
            train_acc: m.train_acc,
            val_acc: m.val_acc,
            test_acc: m.test_acc,
            main_bytes: m.main_bytes,
            meta_bytes: m.meta_bytes,
            header_bytes: m.header_bytes,
            allreduce_bytes: m.allreduce_bytes,
            messages: m.messages,
        };
        Ok(())
    })
}

/// The run's `summary.json` document; free with [`hb_string_free`].
///
/// # Safety
/// `r` must be a live run handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_run_summary_json(r: *const HbRun, out: *mut *mut c_char) -> HbStatus {
    guard(|| {
        let r = &handle(r, "run")?.0;
        let out = out_arg(out, "out")?;
        let s = serde_json::to_string_pretty(&r.summary).map_err(Error::from)?;
        *out = into_c_string(s);
        Ok(())
    })
}

/// The run's `metrics.csv` contents (wall time column zero); free with
/// [`hb_string_free`].
///
/// # Safety
/// `r` must be a live run handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hb_run_metrics_csv(r: *const HbRun, out: *mut *mut c_char) -> HbStatus {
    guard(|| {
        let r = &handle(r, "run")?.0;
        let out = out_arg(out, "out")?;
        *out = into_c_string(metrics_csv(&r.outcome.metrics, false));
        Ok(())
    })
}

/// Writes the final weights of layer `layer` (1-based) row-major into `buf`.
/// `shape` receives `[rows, cols]` even when `cap` is too small.
///
/// # Safety
/// `buf` must point to `cap` writable doubles; `shape` must point to two
/// writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn hb_run_weights(
    r: *const HbRun,
    layer: usize,
    buf: *mut f64,
    cap: usize,
    shape: *mut usize,
) -> HbStatus {
    guard(|| {
        let r = &handle(r, "run")?.0;
        if shape.is_null() {
            return Err(null("shape"));
        }
        let w = layer
            .checked_sub(1)
            .and_then(|i| r.outcome.weights.get(i))
            .ok_or_else(|| invalid(format!("layer {layer} out of range")))?;
        *shape = w.rows();
        *shape.add(1) = w.cols();
        let n = w.data().len();
        if cap < n {
            return Err(invalid(format!("buffer holds {cap} values, layer has {n}")));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(w.data().as_ptr(), buf, n);
        Ok(())
    })
}
