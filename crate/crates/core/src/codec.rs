//! Per-row affine quantization with stochastic rounding, bit packing and the
//! block wire layout.
//!
//! A row `h` is mapped to codes in `[0, B]`, `B = 2^b - 1`, via
//! `(h - min) / scale` with `scale = (max - min) / B`, rounding up with
//! probability equal to the fractional part. Dequantization is
//! `scale * code + min`, which is unbiased in expectation.
//!
//! `min` and `scale` travel as `f32`. The transmitted `min` is rounded toward
//! negative infinity and `scale` toward positive infinity, and the
//! normalization uses those transmitted values, so every element lands in
//! `[0, B]` and the expectation of the reconstruction is exactly the input.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::RngStream;

pub const WIRE_VERSION: u8 = 1;
pub const BLOCK_HEADER_BYTES: usize = 12;
const PASSTHROUGH_BITS: u8 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantConfig {
    bits: u8,
}

impl QuantConfig {
    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            1..=8 | 16 | PASSTHROUGH_BITS => Ok(QuantConfig { bits }),
            _ => Err(Error::Config(format!(
                "bit width {bits} not supported (use 1..8, 16 or 32)"
            ))),
        }
    }

    pub fn one_bit() -> Self {
        QuantConfig { bits: 1 }
    }

    pub fn passthrough() -> Self {
        QuantConfig { bits: PASSTHROUGH_BITS }
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    pub fn is_passthrough(self) -> bool {
        self.bits == PASSTHROUGH_BITS
    }

    /// Number of quantization bins `B = 2^b - 1`.
    pub fn levels(self) -> u32 {
        if self.is_passthrough() {
            u32::MAX
        } else {
            (1u32 << self.bits) - 1
        }
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::one_bit()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Packed codes, row-major, each row padded to a byte boundary.
    Packed(Vec<u8>),
    /// Passthrough rows. Kept at full precision in process; serialized as
    /// `f32`.
    Full(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    num_rows: usize,
    dim: usize,
    bits: u8,
    row_min: Vec<f32>,
    row_scale: Vec<f32>,
    payload: Payload,
}

impl QuantizedBlock {
    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn row_min(&self) -> &[f32] {
        &self.row_min
    }

    pub fn row_scale(&self) -> &[f32] {
        &self.row_scale
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    /// Main-data size as accounted on the wire.
    pub fn payload_len(&self) -> usize {
        payload_bytes(self.num_rows, self.dim, self.bits)
    }

    pub fn metadata_len(&self) -> usize {
        if self.bits == PASSTHROUGH_BITS {
            0
        } else {
            metadata_bytes(self.num_rows)
        }
    }

    pub fn wire_len(&self) -> usize {
        BLOCK_HEADER_BYTES + self.metadata_len() + self.payload_len()
    }

    /// Codes of row `r`.
    pub fn codes(&self, r: usize) -> Result<Vec<u16>> {
        match &self.payload {
            Payload::Packed(bytes) => {
                let rb = row_bytes(self.dim, self.bits);
                unpack_codes(&bytes[r * rb..(r + 1) * rb], self.dim, self.bits)
            }
            Payload::Full(_) => Err(Error::codec("passthrough block carries no codes")),
        }
    }

    /// Little-endian wire layout: 12-byte header, per-row `(min, scale)` as
    /// `f32` pairs (absent in passthrough), then the payload.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.push(WIRE_VERSION);
        out.push(self.bits);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.num_rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        match &self.payload {
            Payload::Packed(bytes) => {
                for (m, s) in self.row_min.iter().zip(&self.row_scale) {
                    out.extend_from_slice(&m.to_le_bytes());
                    out.extend_from_slice(&s.to_le_bytes());
                }
                out.extend_from_slice(bytes);
            }
            Payload::Full(values) => {
                for &v in values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses one block from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn from_wire(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < BLOCK_HEADER_BYTES {
            return Err(Error::codec("truncated block header"));
        }
        if bytes[0] != WIRE_VERSION {
            return Err(Error::codec(format!("unsupported block version {}", bytes[0])));
        }
        let cfg = QuantConfig::new(bytes[1]).map_err(|e| Error::codec(e.to_string()))?;
        let bits = cfg.bits();
        let num_rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta = if cfg.is_passthrough() { 0 } else { metadata_bytes(num_rows) };
        let body = payload_bytes(num_rows, dim, bits);
        let total = BLOCK_HEADER_BYTES + meta + body;
        if bytes.len() < total {
            return Err(Error::codec(format!(
                "block needs {total} bytes, only {} available",
                bytes.len()
            )));
        }
        let rest = &bytes[BLOCK_HEADER_BYTES..total];
        let f32_at = |b: &[u8], i: usize| f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap());
        let block = if cfg.is_passthrough() {
            let values = (0..num_rows * dim).map(|i| f64::from(f32_at(rest, i))).collect();
            QuantizedBlock {
                num_rows,
                dim,
                bits,
                row_min: Vec::new(),
                row_scale: Vec::new(),
                payload: Payload::Full(values),
            }
        } else {
            let (meta_bytes, packed) = rest.split_at(meta);
            let mut row_min = Vec::with_capacity(num_rows);
            let mut row_scale = Vec::with_capacity(num_rows);
            for r in 0..num_rows {
                row_min.push(f32_at(meta_bytes, 2 * r));
                row_scale.push(f32_at(meta_bytes, 2 * r + 1));
            }
            QuantizedBlock {
                num_rows,
                dim,
                bits,
                row_min,
                row_scale,
                payload: Payload::Packed(packed.to_vec()),
            }
        };
        Ok((block, total))
    }
}

fn row_bytes(dim: usize, bits: u8) -> usize {
    (dim * bits as usize).div_ceil(8)
}

/// Main-data bytes of a block; passthrough counts 4 bytes per element.
pub fn payload_bytes(rows: usize, dim: usize, bits: u8) -> usize {
    rows * row_bytes(dim, bits)
}

/// Two `f32` values (zero-point and scale) per row.
pub fn metadata_bytes(rows: usize) -> usize {
    rows * 8
}

/// Packs one row of codes, LSB-first, into `ceil(len * bits / 8)` bytes.
pub fn pack_codes(codes: &[u16], bits: u8) -> Result<Vec<u8>> {
    let cfg = QuantConfig::new(bits)?;
    if cfg.is_passthrough() {
        return Err(Error::codec("passthrough rows are not packed"));
    }
    let max = cfg.levels();
    let mut out = vec![0u8; row_bytes(codes.len(), bits)];
    let b = bits as usize;
    for (i, &c) in codes.iter().enumerate() {
        if u32::from(c) > max {
            return Err(Error::codec(format!("code {c} exceeds {max} at {bits} bits")));
        }
        let mut bit = i * b;
        let mut v = u32::from(c);
        let mut left = b;
        while left > 0 {
            let byte = bit / 8;
            let off = bit % 8;
            let take = (8 - off).min(left);
            out[byte] |= ((v & ((1 << take) - 1)) as u8) << off;
            v >>= take;
            bit += take;
            left -= take;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`] for a row of `dim` codes.
pub fn unpack_codes(bytes: &[u8], dim: usize, bits: u8) -> Result<Vec<u16>> {
    let cfg = QuantConfig::new(bits)?;
    if cfg.is_passthrough() {
        return Err(Error::codec("passthrough rows are not packed"));
    }
    if bytes.len() != row_bytes(dim, bits) {
        return Err(Error::codec(format!(
            "{} bytes cannot hold exactly {dim} codes of {bits} bits",
            bytes.len()
        )));
    }
    let b = bits as usize;
    let mut codes = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut bit = i * b;
        let mut v = 0u32;
        let mut got = 0;
        while got < b {
            let byte = bit / 8;
            let off = bit % 8;
            let take = (8 - off).min(b - got);
            let chunk = (u32::from(bytes[byte]) >> off) & ((1 << take) - 1);
            v |= chunk << got;
            got += take;
            bit += take;
        }
        codes.push(v as u16);
    }
    Ok(codes)
}

/// Largest `f32` not above `x`.
fn f32_floor(x: f64) -> f32 {
    let f = x as f32;
    if f64::from(f) > x {
        f.next_down()
    } else {
        f
    }
}

/// Smallest `f32` not below `x`.
fn f32_ceil(x: f64) -> f32 {
    let f = x as f32;
    if f64::from(f) < x {
        f.next_up()
    } else {
        f
    }
}

/// Quantizes every row of `m`, drawing one uniform per element in row-major
/// order. Passthrough configs copy the rows and draw nothing.
pub fn quantize_rows(m: &DenseMatrix, cfg: QuantConfig, rng: &mut RngStream) -> Result<QuantizedBlock> {
    if let Some(i) = m.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::codec(format!(
            "non-finite value {} at row {} col {}",
            m.data()[i],
            i / m.cols().max(1),
            i % m.cols().max(1)
        )));
    }
    let (rows, dim) = m.shape();
    if cfg.is_passthrough() {
        return Ok(QuantizedBlock {
            num_rows: rows,
            dim,
            bits: cfg.bits(),
            row_min: Vec::new(),
            row_scale: Vec::new(),
            payload: Payload::Full(m.data().to_vec()),
        });
    }
    let levels = f64::from(cfg.levels());
    let rb = row_bytes(dim, cfg.bits());
    let mut payload = Vec::with_capacity(rows * rb);
    let mut row_min = Vec::with_capacity(rows);
    let mut row_scale = Vec::with_capacity(rows);
    let mut codes = vec![0u16; dim];
    for r in 0..rows {
        let row = m.row(r);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if dim > 0 && (lo.abs() > f64::from(f32::MAX) || hi.abs() > f64::from(f32::MAX)) {
            return Err(Error::codec(format!("row {r} exceeds single-precision range")));
        }
        if dim == 0 || lo == hi {
            for c in codes.iter_mut() {
                *c = 0;
            }
            for _ in 0..dim {
                rng.uniform();
            }
            row_min.push(if dim == 0 { 0.0 } else { lo as f32 });
            row_scale.push(0.0);
        } else {
            let zero = f32_floor(lo);
            let mut scale = f32_ceil((hi - f64::from(zero)) / levels);
            while f64::from(zero) + f64::from(scale) * levels < hi {
                scale = scale.next_up();
            }
            let (z, s) = (f64::from(zero), f64::from(scale));
            for (c, &x) in codes.iter_mut().zip(row) {
                let normalized = ((x - z) / s).clamp(0.0, levels);
                let floor = normalized.floor();
                let frac = normalized - floor;
                let up = rng.uniform() < frac;
                *c = (floor + if up { 1.0 } else { 0.0 }).min(levels) as u16;
            }
            row_min.push(zero);
            row_scale.push(scale);
        }
        payload.extend_from_slice(&pack_codes(&codes, cfg.bits())?);
    }
    Ok(QuantizedBlock {
        num_rows: rows,
        dim,
        bits: cfg.bits(),
        row_min,
        row_scale,
        payload: Payload::Packed(payload),
    })
}

/// Reconstructs `scale * code + min` per element.
pub fn dequantize_rows(q: &QuantizedBlock) -> Result<DenseMatrix> {
    match &q.payload {
        Payload::Full(values) => {
            if values.len() != q.num_rows * q.dim {
                return Err(Error::codec("passthrough payload length mismatch"));
            }
            DenseMatrix::from_vec(q.num_rows, q.dim, values.clone())
        }
        Payload::Packed(bytes) => {
            let rb = row_bytes(q.dim, q.bits);
            if bytes.len() != q.num_rows * rb {
                return Err(Error::codec(format!(
                    "payload of {} bytes, expected {}",
                    bytes.len(),
                    q.num_rows * rb
                )));
            }
            if q.row_min.len() != q.num_rows || q.row_scale.len() != q.num_rows {
                return Err(Error::codec("metadata row count mismatch"));
            }
            let mut out = DenseMatrix::zeros(q.num_rows, q.dim);
            for r in 0..q.num_rows {
                let codes = unpack_codes(&bytes[r * rb..(r + 1) * rb], q.dim, q.bits)?;
                let (z, s) = (f64::from(q.row_min[r]), f64::from(q.row_scale[r]));
                for (o, c) in out.row_mut(r).iter_mut().zip(codes) {
                    *o = s * f64::from(c) + z;
                }
            }
            Ok(out)
        }
    }
}
