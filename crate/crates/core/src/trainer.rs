//! Partition workers and the training loop.
//!
//! Every epoch each worker runs the forward pass layer by layer, filling its
//! halo rows from peers, computes its share of the loss, back-propagates
//! while returning halo feature gradients to their owners, all-reduces the
//! weight gradients and applies Adam. Loss is normalized by the global
//! training-node count and the all-reduce is a plain sum, so with
//! passthrough communication the update equals the single-worker update.
//!
//! In a pipelined epoch a layer consumes the halo data sent during the
//! previous epoch and hands this epoch's data to a communication thread;
//! epoch 1 starts from zero halo embeddings and skips gradient integration.

use std::fmt;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::codec::QuantConfig;
use crate::error::{Error, Result};
use crate::graph::{mean_adjacency, normalize_adjacency_with, Graph, NormalizeOptions, Partition, Split};
use crate::linalg::{
    adam_step, matmul, matmul_nt, matmul_tn, relu, relu_grad, softmax_cross_entropy, spmm, spmm_t,
    AdamState, CsrMatrix, DenseMatrix,
};
use crate::rng::{RngStream, StreamKey, StreamKind};
use crate::transport::{fabric, Endpoint, HaloSender, Phase, PoisonBarrier, Tag, TransportStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gcn,
    /// `σ([H | mean(H̃)] W)`: self path concatenated with the row-mean of
    /// in-neighbors.
    Sage,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// `[input dim, hidden.., classes]`; `widths.len() - 1` layers.
    pub widths: Vec<usize>,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn gcn(widths: Vec<usize>) -> Self {
        ModelConfig { kind: ModelKind::Gcn, widths, dropout: 0.0 }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn weight_shape(&self, layer: usize) -> (usize, usize) {
        let fan_in = self.widths[layer - 1];
        let rows = match self.kind {
            ModelKind::Gcn => fan_in,
            ModelKind::Sage => 2 * fan_in,
        };
        (rows, self.widths[layer])
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers() == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// The aggregation matrix this model multiplies with.
    pub fn aggregation(&self, g: &Graph, opts: NormalizeOptions) -> CsrMatrix {
        match self.kind {
            ModelKind::Gcn => normalize_adjacency_with(g, opts),
            ModelKind::Sage => mean_adjacency(g),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sync,
    Async,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrainMode {
    pub variant: Variant,
    /// Forced synchronous epoch every `staleness` epochs; 0 disables.
    pub staleness: usize,
}

impl TrainMode {
    pub fn sync() -> Self {
        TrainMode { variant: Variant::Sync, staleness: 0 }
    }

    pub fn pipelined(staleness: usize) -> Self {
        TrainMode { variant: Variant::Async, staleness }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpochMode {
    Sync,
    Async,
}

impl fmt::Display for EpochMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpochMode::Sync => "sync",
            EpochMode::Async => "async",
        })
    }
}

/// Bounded staleness: in pipelined training, epochs divisible by
/// `staleness` run synchronously.
pub fn staleness_adaptor(epoch: usize, mode: TrainMode) -> EpochMode {
    match mode.variant {
        Variant::Sync => EpochMode::Sync,
        Variant::Async if mode.staleness > 0 && epoch % mode.staleness == 0 => EpochMode::Sync,
        Variant::Async => EpochMode::Async,
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: TrainMode,
    pub quant: QuantConfig,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Run codec and sends of pipelined epochs on a helper thread per worker.
    pub comm_threads: bool,
    pub recv_timeout: Duration,
    /// Collect per-layer [`TraceEvent`]s from every worker.
    pub trace: bool,
    /// Keep every worker's weights after every epoch.
    pub record_weights: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, mode: TrainMode, quant: QuantConfig, epochs: usize) -> Self {
        TrainConfig {
            model,
            mode,
            quant,
            epochs,
            lr: 0.01,
            seed: 0,
            comm_threads: true,
            recv_timeout: Duration::from_secs(120),
            trace: false,
            record_weights: false,
        }
    }
}

/// Glorot-uniform weights from `seed`; every worker derives the same values.
pub fn init_weights(model: &ModelConfig, seed: u64) -> Vec<DenseMatrix> {
    (1..=model.num_layers())
        .map(|l| {
            let (r, c) = model.weight_shape(l);
            let limit = (6.0 / (r + c) as f64).sqrt();
            let mut rng = RngStream::new(StreamKey::new(seed, StreamKind::WeightInit).layer(l));
            let data = (0..r * c).map(|_| (2.0 * rng.uniform() - 1.0) * limit).collect();
            DenseMatrix::from_vec(r, c, data).expect("shape")
        })
        .collect()
}

/// Inverted-dropout multipliers for the rows of `nodes` (global ids) at one
/// layer and epoch; node `v` always draws from the same counter range, so
/// the mask does not depend on the partitioning.
fn dropout_mask(seed: u64, epoch: usize, layer: usize, nodes: &[usize], dim: usize, p: f64) -> DenseMatrix {
    let key = StreamKey::new(seed, StreamKind::Dropout).epoch(epoch).layer(layer);
    let keep = 1.0 / (1.0 - p);
    let mut m = DenseMatrix::zeros(nodes.len(), dim);
    for (i, &v) in nodes.iter().enumerate() {
        let mut rng = RngStream::at(key, (v * dim) as u64);
        for x in m.row_mut(i) {
            *x = if rng.uniform() >= p { keep } else { 0.0 };
        }
    }
    m
}

/// Single-worker, full-precision forward pass. `dropout` is `(seed, epoch)`
/// for a training-time pass, `None` for evaluation.
pub fn serial_forward(
    model: &ModelConfig,
    weights: &[DenseMatrix],
    agg: &CsrMatrix,
    features: &DenseMatrix,
    dropout: Option<(u64, usize)>,
) -> Result<DenseMatrix> {
    let nodes: Vec<usize> = (0..features.rows()).collect();
    let mut h = features.clone();
    let layers = model.num_layers();
    for l in 1..=layers {
        if let (Some((seed, epoch)), true) = (dropout, model.dropout > 0.0) {
            h = h.hadamard(&dropout_mask(seed, epoch, l, &nodes, h.cols(), model.dropout))?;
        }
        let z = match model.kind {
            ModelKind::Gcn => matmul(&spmm(agg, &h)?, &weights[l - 1])?,
            ModelKind::Sage => matmul(&h.hstack(&spmm(agg, &h)?)?, &weights[l - 1])?,
        };
        h = if l < layers { relu(&z) } else { z };
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct Accuracy {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

/// Centralized full-precision evaluation with a cached aggregation matrix.
pub struct Evaluator<'g> {
    graph: &'g Graph,
    model: ModelConfig,
    agg: CsrMatrix,
}

impl<'g> Evaluator<'g> {
    pub fn new(graph: &'g Graph, model: &ModelConfig, opts: NormalizeOptions) -> Self {
        Evaluator { graph, model: model.clone(), agg: model.aggregation(graph, opts) }
    }

    pub fn logits(&self, weights: &[DenseMatrix]) -> Result<DenseMatrix> {
        serial_forward(&self.model, weights, &self.agg, &self.graph.features, None)
    }

    pub fn evaluate(&self, weights: &[DenseMatrix]) -> Result<Accuracy> {
        Ok(accuracy_of(&self.logits(weights)?, self.graph))
    }
}

pub fn evaluate(weights: &[DenseMatrix], graph: &Graph, model: &ModelConfig) -> Result<Accuracy> {
    Evaluator::new(graph, model, NormalizeOptions::default()).evaluate(weights)
}

/// Argmax accuracy per split; an empty split scores 0.
pub fn accuracy_of(logits: &DenseMatrix, graph: &Graph) -> Accuracy {
    let pred = logits.argmax_rows();
    let acc = |split: Split| {
        let (mut hit, mut total) = (0usize, 0usize);
        for v in 0..graph.num_nodes {
            if graph.splits[v] == split {
                total += 1;
                hit += usize::from(pred[v] == graph.labels[v]);
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    };
    Accuracy { train: acc(Split::Train), val: acc(Split::Val), test: acc(Split::Test) }
}

/// One record of halo data consumed by a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub partition: usize,
    pub epoch: usize,
    pub layer: usize,
    pub phase: Phase,
    pub mode: EpochMode,
    /// Epoch in which the consumed halo data was produced; `None` when the
    /// layer integrated nothing (pipelined epoch 1 backward).
    pub consumed_tag: Option<usize>,
    /// Sum of absolute values of the consumed halo rows.
    pub halo_abs_sum: f64,
    /// Rows this worker passed through the codec for this layer and phase.
    pub quantized_rows: usize,
    /// Rows this worker owns locally (never quantized).
    pub local_rows: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub mode: EpochMode,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub main_bytes: u64,
    pub meta_bytes: u64,
    pub header_bytes: u64,
    pub allreduce_bytes: u64,
    pub messages: u64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub weights: Vec<DenseMatrix>,
    pub stats: TransportStats,
    pub trace: Vec<TraceEvent>,
    /// `weight_history[epoch - 1][partition]` when recording is enabled.
    pub weight_history: Vec<Vec<Vec<DenseMatrix>>>,
}

/// Received halo data with the epoch it was produced in. Forward buffers
/// hold one matrix per peer in `recv_sets` order; backward buffers hold one
/// per peer in `send_sets` order.
#[derive(Clone, Debug)]
struct HaloBuffer {
    epoch: usize,
    per_peer: Vec<Option<DenseMatrix>>,
}

struct LayerCache {
    /// `Â H̃` (GCN) or `[H | mean(H̃)]` (SAGE), local rows only.
    agg: DenseMatrix,
    pre: DenseMatrix,
    dropout: Option<DenseMatrix>,
}

enum CommJob {
    Send { tag: Tag, outgoing: Vec<Option<DenseMatrix>>, key: StreamKey },
    Flush(Sender<Result<()>>),
}

/// Where pipelined sends run: inline, or on a helper thread.
enum Comm {
    Inline(HaloSender),
    Thread(Sender<CommJob>),
}

fn comm_loop(sender: HaloSender, quant: QuantConfig, jobs: Receiver<CommJob>) {
    let mut failure: Option<Error> = None;
    for job in jobs {
        match job {
            CommJob::Send { tag, outgoing, key } => {
                if failure.is_none() {
                    let mut rng = RngStream::new(key);
                    if let Err(e) = sender.send_all(tag, &outgoing, quant, &mut rng) {
                        failure = Some(e);
                    }
                }
            }
            CommJob::Flush(ack) => {
                let _ = ack.send(match failure.take() {
                    Some(e) => Err(e),
                    None => Ok(()),
                });
            }
        }
    }
}

/// Poisons the barrier if the worker thread unwinds.
struct PanicGuard(Arc<PoisonBarrier>, usize);

impl Drop for PanicGuard {
    fn drop(&mut self) {
        if std::thread::panicking() {
            self.0.poison(format!("worker {} panicked", self.1));
        }
    }
}

struct EpochPlan {
    epoch: usize,
    mode: EpochMode,
    /// Consume data sent by peers during the previous (pipelined) epoch.
    recv_stale: bool,
    /// Send data for the next (pipelined) epoch.
    send_ahead: bool,
}

impl EpochPlan {
    fn new(epoch: usize, total: usize, mode: TrainMode) -> Self {
        let this = staleness_adaptor(epoch, mode);
        let prev_async = epoch > 1 && staleness_adaptor(epoch - 1, mode) == EpochMode::Async;
        let next_async = epoch < total && staleness_adaptor(epoch + 1, mode) == EpochMode::Async;
        EpochPlan {
            epoch,
            mode: this,
            recv_stale: this == EpochMode::Async && prev_async,
            send_ahead: this == EpochMode::Async && next_async,
        }
    }
}

/// One partition's worker: its slice of the graph, its transport endpoint
/// and its model replica.
pub struct Worker<'a> {
    part: &'a Partition,
    ep: Endpoint,
    cfg: &'a TrainConfig,
    comm: Comm,
    weights: Vec<DenseMatrix>,
    adam: Vec<AdamState>,
    fwd_buf: Vec<Option<HaloBuffer>>,
    bwd_buf: Vec<Option<HaloBuffer>>,
    loss_norm: f64,
    trace: Vec<TraceEvent>,
}

/// Result of one forward pass on one worker.
pub struct ForwardPass {
    pub logits: DenseMatrix,
    caches: Vec<LayerCache>,
}

impl<'a> Worker<'a> {
    fn new(part: &'a Partition, ep: Endpoint, cfg: &'a TrainConfig, comm: Comm, weights: Vec<DenseMatrix>, loss_norm: f64) -> Self {
        let layers = cfg.model.num_layers();
        let adam = weights.iter().map(|w| AdamState::new(w.rows(), w.cols(), cfg.lr)).collect();
        Worker {
            part,
            ep,
            cfg,
            comm,
            weights,
            adam,
            fwd_buf: vec![None; layers + 1],
            bwd_buf: vec![None; layers + 1],
            loss_norm,
            trace: Vec::new(),
        }
    }

    fn parties(&self) -> usize {
        self.part.num_partitions
    }

    fn quant_key(&self, epoch: usize, layer: usize, phase: Phase) -> StreamKey {
        let kind = match phase {
            Phase::Forward => StreamKind::QuantForward,
            Phase::Backward => StreamKind::QuantBackward,
        };
        StreamKey::new(self.cfg.seed, kind).partition(self.part.id).epoch(epoch).layer(layer)
    }

    /// Rows for each peer: `sets[k]` indexes into `m`.
    fn outgoing(&self, m: &DenseMatrix, sets: &[Vec<usize>]) -> Vec<Option<DenseMatrix>> {
        sets.iter()
            .enumerate()
            .map(|(k, set)| (k != self.part.id && !set.is_empty()).then(|| m.gather_rows(set)))
            .collect()
    }

    fn submit(&self, tag: Tag, outgoing: Vec<Option<DenseMatrix>>) -> Result<()> {
        let key = self.quant_key(tag.epoch, tag.layer, tag.phase);
        match &self.comm {
            Comm::Inline(sender) => sender.send_all(tag, &outgoing, self.cfg.quant, &mut RngStream::new(key)),
            Comm::Thread(jobs) => jobs
                .send(CommJob::Send { tag, outgoing, key })
                .map_err(|_| Error::protocol("communication thread exited")),
        }
    }

    fn flush(&self) -> Result<()> {
        match &self.comm {
            Comm::Inline(_) => Ok(()),
            Comm::Thread(jobs) => {
                let (tx, rx) = channel();
                jobs.send(CommJob::Flush(tx)).map_err(|_| Error::protocol("communication thread exited"))?;
                rx.recv().map_err(|_| Error::protocol("communication thread exited"))?
            }
        }
    }

    /// Obtains the halo buffer a layer consumes this epoch, exchanging or
    /// receiving as the epoch plan requires.
    fn halo_input(
        &mut self,
        plan: &EpochPlan,
        layer: usize,
        phase: Phase,
        outgoing: Vec<Option<DenseMatrix>>,
    ) -> Result<Option<HaloBuffer>> {
        let (send_sets, recv_sets) = (&self.part.send_sets, &self.part.recv_sets);
        let expect: Vec<usize> = match phase {
            Phase::Forward => recv_sets.iter().map(Vec::len).collect(),
            Phase::Backward => send_sets.iter().map(Vec::len).collect(),
        };
        let quantized_rows: usize = outgoing.iter().flatten().map(DenseMatrix::rows).sum();
        let tag = Tag { epoch: plan.epoch, layer, phase };
        let slot = layer;
        let buffer = match plan.mode {
            EpochMode::Sync => {
                let mut rng = RngStream::new(self.quant_key(plan.epoch, layer, phase));
                let per_peer = self.ep.exchange(tag, &outgoing, &expect, self.cfg.quant, &mut rng)?;
                let buf = HaloBuffer { epoch: plan.epoch, per_peer };
                self.buffers(phase)[slot] = Some(buf.clone());
                Some(buf)
            }
            EpochMode::Async => {
                if plan.recv_stale {
                    let prev = Tag { epoch: plan.epoch - 1, ..tag };
                    let per_peer = self.ep.recv_all(prev, &expect)?;
                    self.buffers(phase)[slot] = Some(HaloBuffer { epoch: plan.epoch - 1, per_peer });
                }
                let buf = if plan.epoch == 1 {
                    match phase {
                        // zero-initialized halo embeddings
                        Phase::Forward => Some(HaloBuffer {
                            epoch: 0,
                            per_peer: expect.iter().map(|&r| (r > 0).then(|| DenseMatrix::zeros(r, 0))).collect(),
                        }),
                        // nothing to integrate yet
                        Phase::Backward => None,
                    }
                } else {
                    let buf = self.buffers(phase)[slot].clone();
                    match buf {
                        Some(b) if b.epoch + 1 == plan.epoch => Some(b),
                        Some(b) => {
                            return Err(Error::protocol(format!(
                                "worker {} layer {layer} {phase}: halo buffer from epoch {} consumed at epoch {}",
                                self.part.id, b.epoch, plan.epoch
                            )))
                        }
                        None => {
                            return Err(Error::protocol(format!(
                                "worker {} layer {layer} {phase}: halo buffer underflow at epoch {}",
                                self.part.id, plan.epoch
                            )))
                        }
                    }
                };
                if plan.send_ahead && self.parties() > 1 {
                    self.submit(tag, outgoing)?;
                }
                buf
            }
        };
        if self.cfg.trace {
            let halo_abs_sum = buffer
                .as_ref()
                .map(|b| b.per_peer.iter().flatten().flat_map(|m| m.data()).map(|v| v.abs()).sum())
                .unwrap_or(0.0);
            let sent_now = plan.mode == EpochMode::Sync || plan.send_ahead;
            self.trace.push(TraceEvent {
                partition: self.part.id,
                epoch: plan.epoch,
                layer,
                phase,
                mode: plan.mode,
                consumed_tag: buffer.as_ref().map(|b| b.epoch),
                halo_abs_sum,
                quantized_rows: if sent_now && self.parties() > 1 { quantized_rows } else { 0 },
                local_rows: self.part.num_local(),
            });
        }
        Ok(buffer)
    }

    fn buffers(&mut self, phase: Phase) -> &mut Vec<Option<HaloBuffer>> {
        match phase {
            Phase::Forward => &mut self.fwd_buf,
            Phase::Backward => &mut self.bwd_buf,
        }
    }

    /// Stacks the local rows on top of the halo rows assembled from `buf`.
    fn assemble(&self, local: &DenseMatrix, buf: Option<&HaloBuffer>) -> Result<DenseMatrix> {
        let mut halo = DenseMatrix::zeros(self.part.num_halo(), local.cols());
        if let Some(buf) = buf {
            for (k, rows) in buf.per_peer.iter().enumerate() {
                // zero-width placeholders stand for zero rows
                let Some(rows) = rows.as_ref().filter(|m| m.cols() > 0) else { continue };
                for (i, &slot) in self.part.recv_sets[k].iter().enumerate() {
                    halo.row_mut(slot).copy_from_slice(rows.row(i));
                }
            }
        }
        local.vstack(&halo)
    }

    pub fn forward(&mut self, epoch: usize) -> Result<ForwardPass> {
        let plan = EpochPlan::new(epoch, self.cfg.epochs, self.cfg.mode);
        self.forward_planned(&plan)
    }

    fn forward_planned(&mut self, plan: &EpochPlan) -> Result<ForwardPass> {
        let model = &self.cfg.model;
        let layers = model.num_layers();
        let mut h = self.part.features.clone();
        let mut caches = Vec::with_capacity(layers);
        for l in 1..=layers {
            let dropout = (model.dropout > 0.0).then(|| {
                dropout_mask(self.cfg.seed, plan.epoch, l, &self.part.local_nodes, h.cols(), model.dropout)
            });
            if let Some(mask) = &dropout {
                h = h.hadamard(mask)?;
            }
            let outgoing = self.outgoing(&h, &self.part.send_sets);
            let buf = self.halo_input(plan, l, Phase::Forward, outgoing)?;
            let full = self.assemble(&h, buf.as_ref())?;
            let w = &self.weights[l - 1];
            let agg = match model.kind {
                ModelKind::Gcn => spmm(&self.part.adj_block, &full)?,
                ModelKind::Sage => h.hstack(&spmm(&self.part.adj_block, &full)?)?,
            };
            let pre = matmul(&agg, w)?;
            h = if l < layers { relu(&pre) } else { pre.clone() };
            caches.push(LayerCache { agg, pre, dropout });
        }
        Ok(ForwardPass { logits: h, caches })
    }

    /// Back-propagates `dlogits` and returns this worker's (un-reduced)
    /// weight gradients.
    pub fn backward(&mut self, epoch: usize, pass: ForwardPass, dlogits: DenseMatrix) -> Result<Vec<DenseMatrix>> {
        let plan = EpochPlan::new(epoch, self.cfg.epochs, self.cfg.mode);
        self.backward_planned(&plan, pass, dlogits)
    }

    fn backward_planned(&mut self, plan: &EpochPlan, pass: ForwardPass, dlogits: DenseMatrix) -> Result<Vec<DenseMatrix>> {
        let layers = self.cfg.model.num_layers();
        let n_local = self.part.num_local();
        let mut grads = vec![DenseMatrix::zeros(0, 0); layers];
        let mut caches = pass.caches;
        let mut delta = dlogits;
        for l in (1..=layers).rev() {
            let cache = caches.pop().expect("one cache per layer");
            grads[l - 1] = matmul_tn(&cache.agg, &delta)?;
            if l == 1 {
                break;
            }
            let w = &self.weights[l - 1];
            let d_agg = matmul_nt(&delta, w)?;
            let (mut local, full) = match self.cfg.model.kind {
                ModelKind::Gcn => {
                    let full = spmm_t(&self.part.adj_block, &d_agg)?;
                    (DenseMatrix::zeros(n_local, full.cols()), full)
                }
                ModelKind::Sage => {
                    let (d_self, d_nbr) = d_agg.split_cols(w.rows() / 2);
                    (d_self, spmm_t(&self.part.adj_block, &d_nbr)?)
                }
            };
            let idx_local: Vec<usize> = (0..n_local).collect();
            let idx_halo: Vec<usize> = (n_local..full.rows()).collect();
            local.add_assign(&full.gather_rows(&idx_local))?;
            let halo = full.gather_rows(&idx_halo);
            let outgoing = self.outgoing(&halo, &self.part.recv_sets);
            if let Some(buf) = self.halo_input(plan, l, Phase::Backward, outgoing)? {
                for (k, rows) in buf.per_peer.iter().enumerate() {
                    let Some(rows) = rows else { continue };
                    for (i, &r) in self.part.send_sets[k].iter().enumerate() {
                        for (a, b) in local.row_mut(r).iter_mut().zip(rows.row(i)) {
                            *a += b;
                        }
                    }
                }
            }
            let below = &caches[l - 2];
            if let Some(mask) = &cache.dropout {
                local = local.hadamard(mask)?;
            }
            delta = local.hadamard(&relu_grad(&below.pre))?;
        }
        Ok(grads)
    }

    fn local_loss(&self, logits: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
        softmax_cross_entropy(logits, &self.part.labels, &self.part.mask(Split::Train), self.loss_norm)
    }

    /// Forward, loss, backward and all-reduce for one epoch. Returns the
    /// local loss share and the reduced gradients.
    fn compute_epoch(&mut self, plan: &EpochPlan) -> Result<(f64, Vec<DenseMatrix>)> {
        let pass = self.forward_planned(plan)?;
        let (loss, dlogits) = self.local_loss(&pass.logits)?;
        let grads = self.backward_planned(plan, pass, dlogits)?;
        let reduced = self.ep.all_reduce_sum(plan.epoch, &grads)?;
        Ok((loss, reduced))
    }

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochReport> {
        let plan = EpochPlan::new(epoch, self.cfg.epochs, self.cfg.mode);
        let before = self.ep.stats();
        let (loss, grads) = self.compute_epoch(&plan)?;
        for ((w, g), s) in self.weights.iter_mut().zip(&grads).zip(&mut self.adam) {
            adam_step(w, g, s)?;
        }
        self.flush()?;
        let stats = self.ep.stats() - before;
        self.ep.barrier(epoch)?;
        Ok(EpochReport {
            partition: self.part.id,
            epoch,
            mode: plan.mode,
            loss,
            stats,
            weights: self.weights.clone(),
            trace: std::mem::take(&mut self.trace),
        })
    }
}

struct EpochReport {
    partition: usize,
    epoch: usize,
    mode: EpochMode,
    loss: f64,
    stats: TransportStats,
    weights: Vec<DenseMatrix>,
    trace: Vec<TraceEvent>,
}

fn check_partitions(graph: &Graph, partitions: &[Partition], cfg: &TrainConfig) -> Result<()> {
    cfg.model.validate()?;
    if partitions.is_empty() {
        return Err(Error::Config("no partitions".into()));
    }
    if cfg.model.widths[0] != graph.feature_dim() {
        return Err(Error::Config(format!(
            "input width {} does not match feature dim {}",
            cfg.model.widths[0],
            graph.feature_dim()
        )));
    }
    if *cfg.model.widths.last().unwrap() != graph.num_classes {
        return Err(Error::Config(format!(
            "output width {} does not match {} classes",
            cfg.model.widths.last().unwrap(),
            graph.num_classes
        )));
    }
    for (i, p) in partitions.iter().enumerate() {
        if p.id != i || p.num_partitions != partitions.len() {
            return Err(Error::Config(format!("partition {i} is out of order")));
        }
    }
    Ok(())
}

/// Picks the most informative error: a worker's own failure rather than the
/// hang-ups it caused in its peers.
fn root_cause(errors: Vec<Error>) -> Error {
    let mut errors = errors;
    let pos = errors
        .iter()
        .position(|e| !matches!(e, Error::Protocol(_) | Error::Poisoned(_)))
        .or_else(|| errors.iter().position(|e| !matches!(e, Error::Poisoned(_))))
        .unwrap_or(0);
    errors.swap_remove(pos)
}

/// Runs `body` on one thread per partition with a connected fabric and
/// returns the per-worker results in partition order.
fn run_workers<T: Send>(
    partitions: &[Partition],
    cfg: &TrainConfig,
    weights: &[DenseMatrix],
    loss_norm: f64,
    body: impl Fn(&mut Worker<'_>) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let endpoints = fabric(partitions.len(), cfg.recv_timeout);
    let results: Vec<Result<T>> = std::thread::scope(|s| {
        let handles: Vec<_> = partitions
            .iter()
            .zip(endpoints)
            .map(|(part, ep)| {
                let body = &body;
                s.spawn(move || {
                    let pipelined = cfg.mode.variant == Variant::Async && partitions.len() > 1;
                    let (comm, comm_thread) = if pipelined && cfg.comm_threads {
                        let (tx, rx) = channel();
                        let sender = ep.halo_sender();
                        let quant = cfg.quant;
                        let h = s.spawn(move || comm_loop(sender, quant, rx));
                        (Comm::Thread(tx), Some(h))
                    } else {
                        (Comm::Inline(ep.halo_sender()), None)
                    };
                    let mut worker = Worker::new(part, ep, cfg, comm, weights.to_vec(), loss_norm);
                    let out = {
                        let _guard = PanicGuard(worker.ep.barrier_handle(), part.id);
                        body(&mut worker)
                    };
                    if let Err(e) = &out {
                        worker.ep.poison(format!("worker {} failed: {e}", part.id));
                    }
                    drop(worker);
                    if let Some(h) = comm_thread {
                        let _ = h.join();
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::protocol("worker panicked"))))
            .collect()
    });
    let mut ok = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(ok)
    } else {
        Err(root_cause(errors))
    }
}

fn global_train_count(partitions: &[Partition]) -> f64 {
    partitions.iter().map(|p| p.splits.iter().filter(|&&s| s == Split::Train).count()).sum::<usize>() as f64
}

/// Loss and all-reduced weight gradients of one synchronous step at
/// `weights`, without updating them.
pub fn compute_gradients(
    graph: &Graph,
    partitions: &[Partition],
    cfg: &TrainConfig,
    weights: &[DenseMatrix],
) -> Result<(f64, Vec<DenseMatrix>)> {
    check_partitions(graph, partitions, cfg)?;
    let mut step_cfg = cfg.clone();
    step_cfg.mode = TrainMode::sync();
    step_cfg.epochs = 1;
    let norm = global_train_count(partitions);
    let out = run_workers(partitions, &step_cfg, weights, norm, |w| {
        let plan = EpochPlan::new(1, 1, TrainMode::sync());
        w.compute_epoch(&plan)
    })?;
    let loss = out.iter().map(|(l, _)| l).sum();
    Ok((loss, out.into_iter().next().unwrap().1))
}

/// Trains for `cfg.epochs` epochs and evaluates the replica of partition 0
/// after each one.
pub fn train(graph: &Graph, partitions: &[Partition], cfg: &TrainConfig, opts: NormalizeOptions) -> Result<TrainOutcome> {
    check_partitions(graph, partitions, cfg)?;
    let weights = init_weights(&cfg.model, cfg.seed);
    let evaluator = Evaluator::new(graph, &cfg.model, opts);
    let mut outcome = TrainOutcome {
        metrics: Vec::with_capacity(cfg.epochs),
        weights: weights.clone(),
        stats: TransportStats::default(),
        trace: Vec::new(),
        weight_history: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    let parties = partitions.len();
    let norm = global_train_count(partitions);
    let (tx, rx) = channel::<EpochReport>();

    std::thread::scope(|s| -> Result<()> {
        let workers = s.spawn(move || {
            run_workers(partitions, cfg, &weights, norm, |w| {
                for epoch in 1..=cfg.epochs {
                    let report = w.run_epoch(epoch)?;
                    if tx.send(report).is_err() {
                        return Err(Error::protocol("coordinator stopped"));
                    }
                }
                Ok(())
            })
        });

        let mut pending: Vec<Option<EpochReport>> = (0..parties).map(|_| None).collect();
        let mut filled = 0;
        let mut epoch = 1;
        let mut last = Instant::now();
        let mut failure = None;
        for report in rx.iter() {
            if failure.is_some() {
                continue;
            }
            let p = report.partition;
            pending[p] = Some(report);
            filled += 1;
            if filled < parties {
                continue;
            }
            filled = 0;
            let reports: Vec<EpochReport> = pending.iter_mut().map(|r| r.take().unwrap()).collect();
            match finish_epoch(epoch, reports, &evaluator, cfg, &mut outcome, &mut last) {
                Ok(()) => epoch += 1,
                Err(e) => failure = Some(e),
            }
        }
        let worker_result = workers.join().unwrap_or_else(|_| Err(Error::protocol("worker pool panicked")));
        match (failure, worker_result) {
            (Some(e), _) => Err(e),
            (None, Err(e)) => Err(e),
            (None, Ok(_)) => Ok(()),
        }
    })?;
    Ok(outcome)
}

fn finish_epoch(
    epoch: usize,
    reports: Vec<EpochReport>,
    evaluator: &Evaluator<'_>,
    cfg: &TrainConfig,
    outcome: &mut TrainOutcome,
    last: &mut Instant,
) -> Result<()> {
    if reports.iter().any(|r| r.epoch != epoch) {
        return Err(Error::protocol(format!("epoch reports out of step at epoch {epoch}")));
    }
    let loss: f64 = reports.iter().map(|r| r.loss).sum();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss became {loss} at epoch {epoch}; lower the learning rate or check the codec"
        )));
    }
    if reports.iter().any(|r| r.weights.iter().any(|w| w.data().iter().any(|x| !x.is_finite()))) {
        return Err(Error::Numeric(format!("non-finite weights after the update at epoch {epoch}")));
    }
    if let Some(r) = reports.iter().find(|r| r.weights != reports[0].weights) {
        return Err(Error::protocol(format!(
            "weights of partition {} diverged from partition 0 at epoch {epoch}",
            r.partition
        )));
    }
    let stats: TransportStats = reports.iter().map(|r| r.stats).sum();
    let acc = evaluator.evaluate(&reports[0].weights)?;
    let now = Instant::now();
    let wall_ms = now.duration_since(*last).as_secs_f64() * 1e3;
    *last = now;
    outcome.metrics.push(MetricsRecord {
        epoch,
        mode: reports[0].mode,
        train_loss: loss,
        train_acc: acc.train,
        val_acc: acc.val,
        test_acc: acc.test,
        main_bytes: stats.main_bytes_sent,
        meta_bytes: stats.metadata_bytes_sent,
        header_bytes: stats.header_bytes_sent,
        allreduce_bytes: stats.allreduce_bytes,
        messages: stats.messages_sent,
        wall_ms,
    });
    outcome.stats = outcome.stats + stats;
    outcome.weights = reports[0].weights.clone();
    if cfg.record_weights {
        outcome.weight_history.push(reports.iter().map(|r| r.weights.clone()).collect());
    }
    if cfg.trace {
        outcome.trace.extend(reports.into_iter().flat_map(|r| r.trace));
    }
    Ok(())
}
