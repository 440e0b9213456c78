//! In-process transport between partition workers.
//!
//! Each ordered pair of workers gets two reliable FIFO channels: one for halo
//! blocks and one for gradient all-reduce. Quantized blocks cross the halo
//! channel in their wire encoding; passthrough blocks stay at full precision.
//! Byte counters follow the sender.

use std::fmt;
use std::ops::{Add, Sub};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::codec::{dequantize_rows, quantize_rows, Payload, QuantConfig, QuantizedBlock, BLOCK_HEADER_BYTES};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::RngStream;

pub const MESSAGE_MAGIC: &[u8; 4] = b"HBM1";
pub const ENVELOPE_BYTES: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Phase {
    Forward = 0,
    Backward = 1,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tag {
    pub epoch: usize,
    pub layer: usize,
    pub phase: Phase,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(epoch {}, layer {}, {})", self.epoch, self.layer, self.phase)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub src: usize,
    pub dst: usize,
    pub tag: Tag,
    pub block: QuantizedBlock,
}

impl Message {
    /// `"HBM1" | src u16 | dst u16 | epoch u32 | layer u8 | phase u8 | block`,
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let block = self.block.to_wire();
        let mut out = Vec::with_capacity(ENVELOPE_BYTES + block.len());
        out.extend_from_slice(MESSAGE_MAGIC);
        out.extend_from_slice(&(self.src as u16).to_le_bytes());
        out.extend_from_slice(&(self.dst as u16).to_le_bytes());
        out.extend_from_slice(&(self.tag.epoch as u32).to_le_bytes());
        out.push(self.tag.layer as u8);
        out.push(self.tag.phase as u8);
        out.extend_from_slice(&block);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < ENVELOPE_BYTES || &bytes[..4] != MESSAGE_MAGIC {
            return Err(Error::protocol("bad message magic"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let epoch = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let phase = match bytes[13] {
            0 => Phase::Forward,
            1 => Phase::Backward,
            p => return Err(Error::protocol(format!("unknown phase byte {p}"))),
        };
        let (block, used) = QuantizedBlock::from_wire(&bytes[ENVELOPE_BYTES..])?;
        if ENVELOPE_BYTES + used != bytes.len() {
            return Err(Error::protocol("trailing bytes after block"));
        }
        Ok(Message {
            src: u16_at(4),
            dst: u16_at(6),
            tag: Tag { epoch, layer: bytes[12] as usize, phase },
            block,
        })
    }
}

/// Sender-side counters of one worker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TransportStats {
    pub main_bytes_sent: u64,
    pub metadata_bytes_sent: u64,
    pub header_bytes_sent: u64,
    pub messages_sent: u64,
    pub allreduce_bytes: u64,
    pub rows_sent: u64,
    pub rows_received: u64,
}

impl Add for TransportStats {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        TransportStats {
            main_bytes_sent: self.main_bytes_sent + o.main_bytes_sent,
            metadata_bytes_sent: self.metadata_bytes_sent + o.metadata_bytes_sent,
            header_bytes_sent: self.header_bytes_sent + o.header_bytes_sent,
            messages_sent: self.messages_sent + o.messages_sent,
            allreduce_bytes: self.allreduce_bytes + o.allreduce_bytes,
            rows_sent: self.rows_sent + o.rows_sent,
            rows_received: self.rows_received + o.rows_received,
        }
    }
}

impl Sub for TransportStats {
    type Output = Self;

    fn sub(self, o: Self) -> Self {
        TransportStats {
            main_bytes_sent: self.main_bytes_sent - o.main_bytes_sent,
            metadata_bytes_sent: self.metadata_bytes_sent - o.metadata_bytes_sent,
            header_bytes_sent: self.header_bytes_sent - o.header_bytes_sent,
            messages_sent: self.messages_sent - o.messages_sent,
            allreduce_bytes: self.allreduce_bytes - o.allreduce_bytes,
            rows_sent: self.rows_sent - o.rows_sent,
            rows_received: self.rows_received - o.rows_received,
        }
    }
}

impl std::iter::Sum for TransportStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(TransportStats::default(), Add::add)
    }
}

enum Frame {
    Wire(Vec<u8>),
    Local(Message),
}

struct ReducePacket {
    src: usize,
    epoch: usize,
    mats: Vec<DenseMatrix>,
}

/// Barrier that can be poisoned; once poisoned every current and future
/// waiter gets an error.
pub struct PoisonBarrier {
    parties: usize,
    timeout: Duration,
    state: Mutex<BarrierState>,
    cv: Condvar,
}

struct BarrierState {
    arrived: usize,
    generation: u64,
    poisoned: Option<String>,
}

impl PoisonBarrier {
    pub fn new(parties: usize, timeout: Duration) -> Self {
        PoisonBarrier {
            parties,
            timeout,
            state: Mutex::new(BarrierState { arrived: 0, generation: 0, poisoned: None }),
            cv: Condvar::new(),
        }
    }

    pub fn wait(&self) -> Result<()> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(why) = &st.poisoned {
            return Err(Error::Poisoned(why.clone()));
        }
        let gen = st.generation;
        st.arrived += 1;
        if st.arrived == self.parties {
            st.arrived = 0;
            st.generation += 1;
            self.cv.notify_all();
            return Ok(());
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                let why = "barrier timed out waiting for peers".to_string();
                st.poisoned = Some(why.clone());
                self.cv.notify_all();
                return Err(Error::Poisoned(why));
            }
            st = self.cv.wait_timeout(st, deadline - now).unwrap_or_else(|e| e.into_inner()).0;
            if st.generation != gen {
                return Ok(());
            }
            if let Some(why) = &st.poisoned {
                return Err(Error::Poisoned(why.clone()));
            }
        }
    }

    pub fn poison(&self, why: impl Into<String>) {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if st.poisoned.is_none() {
            st.poisoned = Some(why.into());
        }
        self.cv.notify_all();
    }

    pub fn is_poisoned(&self) -> bool {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).poisoned.is_some()
    }
}

/// Cloneable send half of a worker's halo channels. Async workers hand one to
/// their communication thread.
#[derive(Clone)]
pub struct HaloSender {
    id: usize,
    txs: Vec<Option<Sender<Frame>>>,
    stats: Arc<Mutex<TransportStats>>,
}

impl HaloSender {
    pub fn send(&self, dst: usize, tag: Tag, block: QuantizedBlock) -> Result<()> {
        let tx = self
            .txs
            .get(dst)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::protocol(format!("worker {} has no channel to {dst}", self.id)))?;
        let (rows, main, meta) = (block.num_rows(), block.payload_len(), block.metadata_len());
        let msg = Message { src: self.id, dst, tag, block };
        let frame = match msg.block.payload() {
            Payload::Packed(_) => Frame::Wire(msg.to_bytes()),
            Payload::Full(_) => Frame::Local(msg),
        };
        tx.send(frame)
            .map_err(|_| Error::protocol(format!("worker {dst} hung up before {tag}")))?;
        let mut s = self.stats.lock().unwrap_or_else(|e| e.into_inner());
        s.main_bytes_sent += main as u64;
        s.metadata_bytes_sent += meta as u64;
        s.header_bytes_sent += BLOCK_HEADER_BYTES as u64;
        s.messages_sent += 1;
        s.rows_sent += rows as u64;
        Ok(())
    }

    /// Quantizes each non-empty outgoing matrix with one shared stream, in
    /// peer order, and sends it.
    pub fn send_all(
        &self,
        tag: Tag,
        outgoing: &[Option<DenseMatrix>],
        cfg: QuantConfig,
        rng: &mut RngStream,
    ) -> Result<()> {
        for (dst, rows) in outgoing.iter().enumerate() {
            if let Some(rows) = rows.as_ref().filter(|m| m.rows() > 0) {
                let block = quantize_rows(rows, cfg, rng)?;
                self.send(dst, tag, block)?;
            }
        }
        Ok(())
    }
}

/// One worker's view of the fabric.
pub struct Endpoint {
    id: usize,
    parties: usize,
    halo: HaloSender,
    halo_rx: Vec<Option<Receiver<Frame>>>,
    reduce_tx: Vec<Option<Sender<ReducePacket>>>,
    reduce_rx: Vec<Option<Receiver<ReducePacket>>>,
    barrier: Arc<PoisonBarrier>,
    timeout: Duration,
}

/// Fully connected fabric for `parties` workers.
pub fn fabric(parties: usize, timeout: Duration) -> Vec<Endpoint> {
    let barrier = Arc::new(PoisonBarrier::new(parties, timeout));
    let mut halo_tx: Vec<Vec<Option<Sender<Frame>>>> = (0..parties).map(|_| (0..parties).map(|_| None).collect()).collect();
    let mut halo_rx: Vec<Vec<Option<Receiver<Frame>>>> = (0..parties).map(|_| (0..parties).map(|_| None).collect()).collect();
    let mut red_tx: Vec<Vec<Option<Sender<ReducePacket>>>> = (0..parties).map(|_| (0..parties).map(|_| None).collect()).collect();
    let mut red_rx: Vec<Vec<Option<Receiver<ReducePacket>>>> = (0..parties).map(|_| (0..parties).map(|_| None).collect()).collect();
    for src in 0..parties {
        for dst in 0..parties {
            if src == dst {
                continue;
            }
            let (t, r) = channel();
            halo_tx[src][dst] = Some(t);
            halo_rx[dst][src] = Some(r);
            let (t, r) = channel();
            red_tx[src][dst] = Some(t);
            red_rx[dst][src] = Some(r);
        }
    }
    let mut out = Vec::with_capacity(parties);
    for (id, (((htx, hrx), rtx), rrx)) in halo_tx.into_iter().zip(halo_rx).zip(red_tx).zip(red_rx).enumerate() {
        out.push(Endpoint {
            id,
            parties,
            halo: HaloSender { id, txs: htx, stats: Arc::new(Mutex::new(TransportStats::default())) },
            halo_rx: hrx,
            reduce_tx: rtx,
            reduce_rx: rrx,
            barrier: Arc::clone(&barrier),
            timeout,
        });
    }
    out
}

impl Endpoint {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    pub fn stats(&self) -> TransportStats {
        *self.halo.stats.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn halo_sender(&self) -> HaloSender {
        self.halo.clone()
    }

    pub fn barrier_handle(&self) -> Arc<PoisonBarrier> {
        Arc::clone(&self.barrier)
    }

    fn count(&self, f: impl FnOnce(&mut TransportStats)) {
        f(&mut self.halo.stats.lock().unwrap_or_else(|e| e.into_inner()));
    }

    /// Receives the next halo block from `src`; it must carry `tag` and
    /// `expected_rows` rows.
    pub fn recv_block(&self, src: usize, tag: Tag, expected_rows: usize) -> Result<QuantizedBlock> {
        let rx = self
            .halo_rx
            .get(src)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::protocol(format!("worker {} has no channel from {src}", self.id)))?;
        let frame = rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => {
                Error::protocol(format!("worker {} timed out waiting for {tag} from {src}", self.id))
            }
            RecvTimeoutError::Disconnected => {
                Error::protocol(format!("worker {src} exited before sending {tag} to {}", self.id))
            }
        })?;
        let msg = match frame {
            Frame::Wire(bytes) => Message::from_bytes(&bytes)?,
            Frame::Local(m) => m,
        };
        if msg.tag != tag || msg.src != src || msg.dst != self.id {
            return Err(Error::protocol(format!(
                "worker {} expected {tag} from {src}, got {} from {}",
                self.id, msg.tag, msg.src
            )));
        }
        if msg.block.num_rows() != expected_rows {
            return Err(Error::protocol(format!(
                "{tag} from {src}: {} rows, expected {expected_rows}",
                msg.block.num_rows()
            )));
        }
        self.count(|s| s.rows_received += expected_rows as u64);
        Ok(msg.block)
    }

    /// Receives and dequantizes one block from every peer with
    /// `expect[k] > 0`.
    pub fn recv_all(&self, tag: Tag, expect: &[usize]) -> Result<Vec<Option<DenseMatrix>>> {
        let mut out = Vec::with_capacity(self.parties);
        for (src, &rows) in expect.iter().enumerate() {
            if src == self.id || rows == 0 {
                out.push(None);
            } else {
                out.push(Some(dequantize_rows(&self.recv_block(src, tag, rows)?)?));
            }
        }
        Ok(out)
    }

    /// Blocking halo exchange: quantize and send `outgoing[k]` to every peer
    /// `k`, then receive `expect[k]` rows from each. Empty sets carry no
    /// message. Returned matrices are dequantized, one per peer.
    pub fn exchange(
        &self,
        tag: Tag,
        outgoing: &[Option<DenseMatrix>],
        expect: &[usize],
        cfg: QuantConfig,
        rng: &mut RngStream,
    ) -> Result<Vec<Option<DenseMatrix>>> {
        if outgoing.len() != self.parties || expect.len() != self.parties {
            return Err(Error::shape("exchange needs one entry per worker"));
        }
        if self.parties == 1 {
            return Ok(vec![None]);
        }
        self.halo.send_all(tag, outgoing, cfg, rng)?;
        self.recv_all(tag, expect)
    }

    /// Elementwise sum over all workers, added in worker-id order so every
    /// worker ends with bit-identical results. Volume is counted at 4 bytes
    /// per element sent.
    pub fn all_reduce_sum(&self, epoch: usize, mats: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        if self.parties == 1 {
            return Ok(mats.to_vec());
        }
        let elems: usize = mats.iter().map(|m| m.rows() * m.cols()).sum();
        for tx in self.reduce_tx.iter().flatten() {
            tx.send(ReducePacket { src: self.id, epoch, mats: mats.to_vec() })
                .map_err(|_| Error::protocol(format!("peer hung up during all-reduce of epoch {epoch}")))?;
        }
        self.count(|s| s.allreduce_bytes += (4 * elems * (self.parties - 1)) as u64);
        let mut acc: Vec<DenseMatrix> = mats.iter().map(|m| DenseMatrix::zeros(m.rows(), m.cols())).collect();
        for src in 0..self.parties {
            let contribution;
            let part: &[DenseMatrix] = if src == self.id {
                mats
            } else {
                let rx = self.reduce_rx[src].as_ref().expect("peer channel");
                let pkt = rx.recv_timeout(self.timeout).map_err(|_| {
                    Error::protocol(format!("worker {} missing all-reduce input from {src}", self.id))
                })?;
                if pkt.epoch != epoch || pkt.src != src {
                    return Err(Error::protocol(format!(
                        "all-reduce tag mismatch: epoch {} from {}, expected epoch {epoch} from {src}",
                        pkt.epoch, pkt.src
                    )));
                }
                contribution = pkt.mats;
                &contribution
            };
            if part.len() != acc.len() {
                return Err(Error::protocol(format!("worker {src} reduces {} matrices, expected {}", part.len(), acc.len())));
            }
            for (a, m) in acc.iter_mut().zip(part) {
                a.add_assign(m).map_err(|e| Error::protocol(format!("all-reduce from {src}: {e}")))?;
            }
        }
        Ok(acc)
    }

    /// Epoch boundary; all workers arrive before any proceeds.
    pub fn barrier(&self, _epoch: usize) -> Result<()> {
        if self.parties == 1 {
            return Ok(());
        }
        self.barrier.wait()
    }

    pub fn poison(&self, why: impl Into<String>) {
        self.barrier.poison(why);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{StreamKey, StreamKind};
    use std::sync::atomic::{AtomicUsize, Ordering};

    const T: Duration = Duration::from_secs(10);

    fn rng() -> RngStream {
        RngStream::new(StreamKey::new(1, StreamKind::QuantForward))
    }

    fn tag(epoch: usize) -> Tag {
        Tag { epoch, layer: 1, phase: Phase::Forward }
    }

    #[test]
    fn single_worker_is_silent() {
        let eps = fabric(1, T);
        let out = eps[0]
            .exchange(tag(1), &[None], &[0], QuantConfig::one_bit(), &mut rng())
            .unwrap();
        assert_eq!(out, vec![None]);
        assert_eq!(eps[0].stats(), TransportStats::default());
        let g = vec![DenseMatrix::identity(2)];
        assert_eq!(eps[0].all_reduce_sum(1, &g).unwrap(), g);
        eps[0].barrier(1).unwrap();
    }

    fn pair() -> (Endpoint, Endpoint) {
        let mut eps = fabric(2, T).into_iter();
        (eps.next().unwrap(), eps.next().unwrap())
    }

    #[test]
    fn two_worker_one_bit_accounting() {
        let (e0, e1) = pair();
        let rows = DenseMatrix::from_vec(3, 16, (0..48).map(|i| (i % 7) as f64).collect()).unwrap();
        let e0 = std::thread::scope(|s| {
            let h = s.spawn(move || {
                e0.exchange(tag(1), &[None, Some(rows)], &[0, 0], QuantConfig::one_bit(), &mut rng()).unwrap();
                e0
            });
            let got = e1
                .exchange(tag(1), &[None, None], &[3, 0], QuantConfig::one_bit(), &mut rng())
                .unwrap();
            assert_eq!(got[0].as_ref().unwrap().shape(), (3, 16));
            h.join().unwrap()
        });
        let s0 = e0.stats();
        assert_eq!(s0.main_bytes_sent, 6);
        assert_eq!(s0.metadata_bytes_sent, 24);
        assert_eq!(s0.header_bytes_sent, 12);
        assert_eq!(s0.messages_sent, 1);
        assert_eq!(e1.stats().rows_received, 3);
        assert_eq!(e1.stats().messages_sent, 0);
    }

    #[test]
    fn passthrough_delivers_exact_values() {
        let (e0, e1) = pair();
        let rows = DenseMatrix::from_rows(&[[0.1, 1.0 / 3.0], [-2.5e-9, 1e300]]);
        let sent = rows.clone();
        let e0 = std::thread::scope(|s| {
            let h = s.spawn(move || {
                e0.exchange(tag(2), &[None, Some(sent)], &[0, 0], QuantConfig::passthrough(), &mut rng())
                    .unwrap();
                e0
            });
            let got = e1
                .exchange(tag(2), &[None, None], &[2, 0], QuantConfig::passthrough(), &mut rng())
                .unwrap();
            assert_eq!(got[0].as_ref().unwrap(), &rows);
            h.join().unwrap()
        });
        assert_eq!(e0.stats().main_bytes_sent, 16);
        assert_eq!(e0.stats().metadata_bytes_sent, 0);
    }

    #[test]
    fn tag_and_row_mismatches_are_protocol_errors() {
        let eps = fabric(2, T);
        let m = DenseMatrix::from_rows(&[[1.0, 2.0]]);
        let hs = eps[0].halo_sender();
        hs.send_all(tag(1), &[None, Some(m.clone())], QuantConfig::one_bit(), &mut rng()).unwrap();
        assert!(matches!(eps[1].recv_block(0, tag(2), 1), Err(Error::Protocol(_))));
        hs.send_all(tag(1), &[None, Some(m)], QuantConfig::one_bit(), &mut rng()).unwrap();
        assert!(matches!(eps[1].recv_block(0, tag(1), 2), Err(Error::Protocol(_))));
    }

    #[test]
    fn missing_message_is_detected() {
        let mut eps = fabric(2, Duration::from_millis(50));
        assert!(matches!(eps[1].recv_block(0, tag(1), 1), Err(Error::Protocol(_))));
        let e0 = eps.remove(0);
        drop(e0);
        let err = eps[0].recv_block(0, tag(1), 1).unwrap_err();
        assert!(err.to_string().contains("exited"), "{err}");
    }

    #[test]
    fn all_reduce_sums_in_fixed_order() {
        let results: Vec<(Vec<DenseMatrix>, TransportStats)> = std::thread::scope(|s| {
            let hs: Vec<_> = fabric(3, T)
                .into_iter()
                .enumerate()
                .map(|(n, e)| {
                    s.spawn(move || {
                        let mut g = DenseMatrix::zeros(2, 2);
                        g.data_mut().iter_mut().for_each(|v| *v = n as f64);
                        (e.all_reduce_sum(1, &[g]).unwrap(), e.stats())
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (r, stats) in &results {
            assert_eq!(r[0], DenseMatrix::from_rows(&[[3.0, 3.0], [3.0, 3.0]]));
            assert_eq!(stats.allreduce_bytes, 4 * 4 * 2);
        }
    }

    #[test]
    fn all_reduce_replays_bit_identically() {
        let run = || -> Vec<DenseMatrix> {
            std::thread::scope(|s| {
                let hs: Vec<_> = fabric(4, T)
                    .into_iter()
                    .enumerate()
                    .map(|(n, e)| {
                        s.spawn(move || {
                            let mut r = RngStream::new(StreamKey::new(n as u64, StreamKind::Synthetic));
                            let g = DenseMatrix::from_vec(3, 3, (0..9).map(|_| r.uniform() * 1e3 - 5e2).collect()).unwrap();
                            e.all_reduce_sum(1, &[g]).unwrap().remove(0)
                        })
                    })
                    .collect();
                hs.into_iter().map(|h| h.join().unwrap()).collect()
            })
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|m| m == &a[0]));
    }

    #[test]
    fn all_reduce_shape_mismatch() {
        let (e0, e1) = pair();
        std::thread::scope(|s| {
            let h = s.spawn(move || e0.all_reduce_sum(1, &[DenseMatrix::zeros(2, 2)]));
            let r1 = e1.all_reduce_sum(1, &[DenseMatrix::zeros(3, 2)]);
            assert!(matches!(r1, Err(Error::Protocol(_))));
            assert!(matches!(h.join().unwrap(), Err(Error::Protocol(_))));
        });
    }

    #[test]
    fn barrier_releases_all_together() {
        let arrived = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for (n, e) in fabric(4, T).into_iter().enumerate() {
                let arrived = &arrived;
                s.spawn(move || {
                    for epoch in 1..=3 {
                        let mut r = RngStream::new(StreamKey::new(n as u64, StreamKind::Synthetic).epoch(epoch));
                        std::thread::sleep(Duration::from_millis((r.uniform() * 20.0) as u64));
                        arrived.fetch_add(1, Ordering::SeqCst);
                        e.barrier(epoch).unwrap();
                        assert!(arrived.load(Ordering::SeqCst) >= 4 * epoch);
                        e.barrier(epoch).unwrap();
                    }
                });
            }
        });
        assert_eq!(arrived.load(Ordering::SeqCst), 12);
    }

    #[test]
    fn poisoned_barrier_aborts_everyone() {
        let eps = fabric(4, T);
        let barrier = eps[0].barrier_handle();
        let start = Instant::now();
        let results: Vec<Result<()>> = std::thread::scope(|s| {
            let hs: Vec<_> = eps
                .into_iter()
                .enumerate()
                .map(|(n, e)| {
                    s.spawn(move || {
                        if n == 2 {
                            std::thread::sleep(Duration::from_millis(30));
                            e.poison("worker 2 failed");
                            return Err(Error::Poisoned("worker 2 failed".into()));
                        }
                        e.barrier(1)
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(results.iter().all(|r| matches!(r, Err(Error::Poisoned(_)))));
        assert!(start.elapsed() < Duration::from_secs(2));
        assert!(barrier.wait().is_err());
    }

    #[test]
    fn message_wire_roundtrip() {
        let m = DenseMatrix::from_rows(&[[0.0, 0.5, 1.0, 0.25]]);
        let block = quantize_rows(&m, QuantConfig::new(4).unwrap(), &mut rng()).unwrap();
        let msg = Message { src: 3, dst: 1, tag: Tag { epoch: 70000, layer: 2, phase: Phase::Backward }, block };
        let bytes = msg.to_bytes();
        assert_eq!(&bytes[..4], b"HBM1");
        assert_eq!(&bytes[4..14], &[3, 0, 1, 0, 0x70, 0x11, 0x01, 0x00, 2, 1]);
        assert_eq!(bytes.len(), ENVELOPE_BYTES + 12 + 8 + 2);
        assert_eq!(Message::from_bytes(&bytes).unwrap(), msg);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Message::from_bytes(&bad).is_err());
        bad = bytes;
        bad.push(0);
        assert!(Message::from_bytes(&bad).is_err());
    }
}
