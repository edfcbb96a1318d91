//! `.licb` streams: a fixed header, the quantized domain distribution and
//! the range-coded latent.
//!
//! Layout, all integers big-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `LICB` |
//! | 1 | format version |
//! | 2 | original height |
//! | 2 | original width |
//! | 1 | quality index |
//! | 1 | K (0 for a backbone-only stream) |
//! | 1 | blend policy |
//! | 4 | v payload length `Lv` |
//! | `Lv` | K+1 weights as u16 fixed point (`/ 65535`) |
//! | 4 | latent payload length `Ly` |
//! | `Ly` | range-coded latent, channel-major |

use thiserror::Error;

use crate::codec::{Latent, DOWNSAMPLE, MIN_SIDE};
use crate::gate::DomainDistribution;
use crate::policy::PolicyKind;

pub const MAGIC: [u8; 4] = *b"LICB";
pub const FORMAT_VERSION: u8 = 1;

/// Header bytes excluding both payloads.
pub const FIXED_HEADER_LEN: usize = 4 + 1 + 2 + 2 + 1 + 1 + 1 + 4 + 4;

/// Symbols with `|v| <= SYMBOL_BOUND` are coded through the table; others
/// through the escape bucket followed by 32 raw bits.
pub const SYMBOL_BOUND: i32 = 255;

pub const PRECISION_BITS: u32 = 16;
const TOTAL: u32 = 1 << PRECISION_BITS;
const TABLE_SIZE: usize = 2 * SYMBOL_BOUND as usize + 2;
const ESCAPE: usize = TABLE_SIZE - 1;
const TOP: u32 = 1 << 24;

pub const V_SCALE: f64 = 65535.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("not a .licb stream (bad magic)")]
    BadMagic,
    #[error("unsupported stream format version {found} (decoder supports {expected})")]
    Version { found: u8, expected: u8 },
    #[error("truncated stream: {0}")]
    Truncated(String),
    #[error("malformed stream: {0}")]
    Framing(String),
    #[error("stream does not match the model: {0}")]
    Mismatch(String),
    #[error("range coder error: {0}")]
    Coder(String),
    #[error("stream exceeds decode limits: {0}")]
    Limit(String),
    #[error("cannot encode: {0}")]
    Input(String),
}

impl StreamError {
    /// Version and model mismatches, as opposed to damaged data.
    pub fn is_compat(&self) -> bool {
        matches!(self, StreamError::Version { .. } | StreamError::Mismatch(_))
    }
}

type Result<T> = std::result::Result<T, StreamError>;

/// Upper bounds enforced before allocating anything during decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeLimits {
    pub max_pixels: usize,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        DecodeLimits { max_pixels: 4096 * 4096 }
    }
}

/// Latent height and width for an image of `height x width`.
pub fn latent_dims(height: usize, width: usize) -> (usize, usize) {
    let side = |n: usize| n.max(MIN_SIDE).div_ceil(DOWNSAMPLE);
    (side(height), side(width))
}

// ---------------------------------------------------------------- tables

/// P(X > t) for a standard normal.
fn upper_tail(t: f64) -> f64 {
    0.5 * libm::erfc(t / std::f64::consts::SQRT_2)
}

/// Mass of `[lo, hi]` under N(0, 1), accurate in both tails.
fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        upper_tail(lo) - upper_tail(hi)
    } else if hi <= 0.0 {
        upper_tail(-hi) - upper_tail(-lo)
    } else {
        1.0 - upper_tail(hi) - upper_tail(-lo)
    }
}

/// Quantized CDF of one channel: 511 in-range symbols plus the escape
/// bucket, every entry with nonzero frequency, total `2^16`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangeCoderTable {
    cdf: Vec<u32>,
}

impl RangeCoderTable {
    pub fn gaussian(mean: f64, scale: f64) -> Result<Self> {
        if !mean.is_finite() || !scale.is_finite() || scale <= 0.0 {
            return Err(StreamError::Coder(format!("invalid entropy parameters mean {mean}, scale {scale}")));
        }
        let bound = SYMBOL_BOUND as f64 + 0.5;
        let mut probs = Vec::with_capacity(TABLE_SIZE);
        for v in -SYMBOL_BOUND..=SYMBOL_BOUND {
            let v = v as f64;
            probs.push(interval_mass((v - 0.5 - mean) / scale, (v + 0.5 - mean) / scale).max(0.0));
        }
        probs.push((upper_tail((bound - mean) / scale) + upper_tail((bound + mean) / scale)).max(0.0));
        Self::from_probabilities(&probs)
    }

    /// Each entry gets `1 + floor(p * (2^16 - 512))`; the remainder goes to
    /// the most probable entry.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        if probs.len() != TABLE_SIZE || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(StreamError::Coder("corrupted probability table".into()));
        }
        let budget = (TOTAL as usize - TABLE_SIZE) as f64;
        let mut freq: Vec<u32> = probs.iter().map(|p| 1 + (p.min(1.0) * budget).floor() as u32).collect();
        let sum: u32 = freq.iter().sum();
        if sum > TOTAL {
            return Err(StreamError::Coder(format!("probability table sums to {sum} > {TOTAL}")));
        }
        let mut best = 0;
        for (i, &f) in freq.iter().enumerate() {
            if f > freq[best] {
                best = i;
            }
        }
        freq[best] += TOTAL - sum;
        let mut cdf = Vec::with_capacity(TABLE_SIZE + 1);
        cdf.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        Ok(RangeCoderTable { cdf })
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn frequency(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    /// Table index of a symbol, or `None` for the escape bucket.
    fn index_of(v: i32) -> Option<usize> {
        (-SYMBOL_BOUND..=SYMBOL_BOUND).contains(&v).then(|| (v + SYMBOL_BOUND) as usize)
    }

    fn find(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }
}

/// One table per latent channel.
pub fn channel_tables(means: &[f64], scales: &[f64]) -> Result<Vec<RangeCoderTable>> {
    if means.len() != scales.len() {
        return Err(StreamError::Coder("mean and scale counts differ".into()));
    }
    means.iter().zip(scales).map(|(&m, &s)| RangeCoderTable::gaussian(m, s)).collect()
}

// ---------------------------------------------------------------- coder

/// Carry-propagating range encoder with a 32-bit range.
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        self.normalize();
    }

    /// Writes the low `nbits` of `value`, most significant first, at one
    /// bit each.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        for i in (0..nbits).rev() {
            self.range >>= 1;
            if (value >> i) & 1 == 1 {
                self.low += self.range as u64;
            }
            self.normalize();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 5 {
            return Err(StreamError::Truncated("latent payload shorter than the coder preamble".into()));
        }
        let mut d = RangeDecoder { data, pos: 0, range: u32::MAX, code: 0 };
        for _ in 0..5 {
            let b = d.next_byte()?;
            d.code = (d.code << 8) | b as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| StreamError::Truncated("latent payload ended inside the range coder".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }

    pub fn decode(&mut self, table: &RangeCoderTable) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = (self.code / r).min(TOTAL - 1);
        let index = table.find(target);
        let (cum, freq) = (table.cdf[index], table.frequency(index));
        self.code -= r * cum;
        self.range = r * freq;
        self.normalize()?;
        Ok(index)
    }

    pub fn decode_bits(&mut self, nbits: u32) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..nbits {
            self.range >>= 1;
            let bit = if self.code >= self.range {
                self.code -= self.range;
                1
            } else {
                0
            };
            v = (v << 1) | bit;
            self.normalize()?;
        }
        Ok(v)
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

fn unzigzag(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}

/// Range-codes an integer-valued latent, one table per channel.
pub fn encode_latent(y_hat: &Latent, tables: &[RangeCoderTable]) -> Result<Vec<u8>> {
    if !y_hat.quantized {
        return Err(StreamError::Input("latent is not quantized".into()));
    }
    if tables.len() != y_hat.channels {
        return Err(StreamError::Mismatch(format!(
            "latent has {} channels, entropy model {}",
            y_hat.channels,
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (c, table) in tables.iter().enumerate() {
        for &v in y_hat.channel(c) {
            if !v.is_finite() || v.fract() != 0.0 || v.abs() > i32::MAX as f32 / 2.0 {
                return Err(StreamError::Input(format!("latent value {v} is not a codable integer")));
            }
            let v = v as i32;
            match RangeCoderTable::index_of(v) {
                Some(i) => enc.encode(table.cdf[i], table.frequency(i)),
                None => {
                    enc.encode(table.cdf[ESCAPE], table.frequency(ESCAPE));
                    enc.encode_bits(zigzag(v), 32);
                }
            }
        }
    }
    Ok(enc.finish())
}

pub fn decode_latent(
    bytes: &[u8],
    tables: &[RangeCoderTable],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Latent> {
    if tables.len() != channels {
        return Err(StreamError::Mismatch(format!("{channels} latent channels but {} tables", tables.len())));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut data = Vec::with_capacity(channels * height * width);
    for table in tables {
        for _ in 0..height * width {
            let i = dec.decode(table)?;
            let v = if i == ESCAPE {
                let v = unzigzag(dec.decode_bits(32)?);
                if RangeCoderTable::index_of(v).is_some() {
                    return Err(StreamError::Coder(format!("escaped symbol {v} lies inside the table range")));
                }
                v
            } else {
                i as i32 - SYMBOL_BOUND
            };
            data.push(v as f32);
        }
    }
    if dec.position() != bytes.len() {
        return Err(StreamError::Framing(format!(
            "{} unused bytes after the latent",
            bytes.len() - dec.position()
        )));
    }
    Ok(Latent { channels, height, width, data, quantized: true })
}

// ---------------------------------------------------------------- v payload

/// 16-bit fixed point with largest-remainder rounding, so the entries sum
/// to exactly 65535.
pub fn quantize_v(v: &DomainDistribution) -> Vec<u16> {
    let scaled: Vec<f64> = v.as_slice().iter().map(|p| p * V_SCALE).collect();
    let mut q: Vec<u16> = scaled.iter().map(|s| s.floor() as u16).collect();
    let assigned: u64 = q.iter().map(|&x| x as u64).sum();
    let mut missing = (V_SCALE as u64).saturating_sub(assigned);
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if q[i] < u16::MAX {
            q[i] += 1;
            missing -= 1;
        }
    }
    q
}

/// Inverse of [`quantize_v`] with renormalization. Rejects payloads whose
/// raw sum is off by more than one unit per entry and then some.
pub fn dequantize_v(q: &[u16]) -> Result<DomainDistribution> {
    if q.is_empty() {
        return Err(StreamError::Framing("empty v payload".into()));
    }
    let raw: Vec<f64> = q.iter().map(|&x| x as f64 / V_SCALE).collect();
    let sum: f64 = raw.iter().sum();
    let tol = 2.0 * q.len() as f64 / V_SCALE;
    if (sum - 1.0).abs() > tol {
        return Err(StreamError::Framing(format!("v payload sums to {sum:.6}, not 1")));
    }
    DomainDistribution::new(raw.iter().map(|p| p / sum).collect())
        .map_err(|e| StreamError::Framing(format!("invalid v payload: {e}")))
}

// ---------------------------------------------------------------- framing

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub height: u16,
    pub width: u16,
    pub quality: u8,
    pub k: u8,
    pub policy: PolicyKind,
}

/// A framed but not yet entropy-decoded stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawStream<'a> {
    pub header: StreamHeader,
    pub v_raw: Vec<u16>,
    pub latent_bytes: &'a [u8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedStream {
    pub header: StreamHeader,
    pub v: Option<DomainDistribution>,
    pub y_hat: Latent,
}

pub fn encode_stream(
    header: StreamHeader,
    y_hat: &Latent,
    v: Option<&DomainDistribution>,
    tables: &[RangeCoderTable],
) -> Result<Vec<u8>> {
    if header.height == 0 || header.width == 0 {
        return Err(StreamError::Input("image dimensions must be nonzero".into()));
    }
    let (lh, lw) = latent_dims(header.height as usize, header.width as usize);
    if (y_hat.height, y_hat.width) != (lh, lw) {
        return Err(StreamError::Input(format!(
            "latent is {}x{}, expected {lh}x{lw} for a {}x{} image",
            y_hat.height, y_hat.width, header.height, header.width
        )));
    }
    let v_raw = match (header.k, v) {
        (0, None) => Vec::new(),
        (0, Some(_)) => return Err(StreamError::Input("K = 0 stream cannot carry a distribution".into())),
        (k, Some(v)) if v.len() == k as usize + 1 => quantize_v(v),
        (k, _) => return Err(StreamError::Input(format!("K = {k} stream needs a distribution of length {}", k + 1))),
    };
    let latent = encode_latent(y_hat, tables)?;
    let mut out = Vec::with_capacity(FIXED_HEADER_LEN + 2 * v_raw.len() + latent.len());
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&header.height.to_be_bytes());
    out.extend_from_slice(&header.width.to_be_bytes());
    out.push(header.quality);
    out.push(header.k);
    out.push(header.policy.as_u8());
    out.extend_from_slice(&((2 * v_raw.len()) as u32).to_be_bytes());
    for q in &v_raw {
        out.extend_from_slice(&q.to_be_bytes());
    }
    out.extend_from_slice(&(latent.len() as u32).to_be_bytes());
    out.extend_from_slice(&latent);
    Ok(out)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            StreamError::Truncated(format!("{what}: need {n} bytes at offset {}, have {}", self.pos, self.data.len()))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Validates framing and splits a stream into header, v and latent bytes.
pub fn parse_stream(bytes: &[u8], limits: DecodeLimits) -> Result<RawStream<'_>> {
    let mut r = Reader { data: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(StreamError::BadMagic);
    }
    let version = r.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(StreamError::Version { found: version, expected: FORMAT_VERSION });
    }
    let height = r.u16("height")?;
    let width = r.u16("width")?;
    let quality = r.u8("quality")?;
    let k = r.u8("K")?;
    let policy_byte = r.u8("blend policy")?;
    let policy = PolicyKind::from_u8(policy_byte)
        .ok_or_else(|| StreamError::Framing(format!("unknown blend policy code {policy_byte}")))?;
    if height == 0 || width == 0 {
        return Err(StreamError::Framing(format!("zero image dimension {height}x{width}")));
    }
    let pixels = height as usize * width as usize;
    if pixels > limits.max_pixels {
        return Err(StreamError::Limit(format!("{height}x{width} exceeds {} pixels", limits.max_pixels)));
    }
    let v_len = r.u32("v payload length")? as usize;
    let expected_v = if k == 0 { 0 } else { 2 * (k as usize + 1) };
    if v_len != expected_v {
        return Err(StreamError::Framing(format!("v payload of {v_len} bytes for K = {k}")));
    }
    let v_bytes = r.take(v_len, "v payload")?;
    let v_raw = v_bytes.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    let latent_len = r.u32("latent payload length")? as usize;
    let latent_bytes = r.take(latent_len, "latent payload")?;
    if r.pos != bytes.len() {
        return Err(StreamError::Framing(format!("{} trailing bytes after the latent payload", bytes.len() - r.pos)));
    }
    Ok(RawStream { header: StreamHeader { height, width, quality, k, policy }, v_raw, latent_bytes })
}

/// Parses and entropy-decodes a stream.
pub fn decode_stream(
    bytes: &[u8],
    tables: &[RangeCoderTable],
    limits: DecodeLimits,
) -> Result<DecodedStream> {
    let raw = parse_stream(bytes, limits)?;
    let v = if raw.header.k == 0 { None } else { Some(dequantize_v(&raw.v_raw)?) };
    let (lh, lw) = latent_dims(raw.header.height as usize, raw.header.width as usize);
    let y_hat = decode_latent(raw.latent_bytes, tables, tables.len(), lh, lw)?;
    Ok(DecodedStream { header: raw.header, v, y_hat })
}

/// Bytes spent on the distribution, including its length prefix.
pub fn v_overhead_bytes(k: u8) -> usize {
    if k == 0 {
        4
    } else {
        4 + 2 * (k as usize + 1)
    }
}
