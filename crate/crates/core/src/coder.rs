//! Integer quantisation, 16-bit frequency tables, a carryless 64-bit range
//! coder and the `VCNR` bitstream container.

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;

/// Rounds half away from zero.
pub fn quantize(x: f64) -> i32 {
    assert!(x.is_finite(), "contract violation: quantize of non-finite value {x}");
    let r = x.round();
    assert!(
        r >= i32::MIN as f64 && r <= i32::MAX as f64,
        "contract violation: {x} does not fit a 32-bit symbol"
    );
    r as i32
}

pub fn quantize_all(xs: &[f64]) -> Vec<i32> {
    xs.iter().map(|&x| quantize(x)).collect()
}

/// Frequencies for the symbols `lo..=hi` plus an optional escape slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PmfTable {
    lo: i32,
    hi: i32,
    /// In-support frequencies, then the escape frequency when present.
    freqs: Vec<u32>,
    cum: Vec<u32>,
    escape: bool,
}

impl PmfTable {
    /// Apportions `2^16` over the support by largest remainder with a floor
    /// of one per slot. With `escape` set, the slot after `hi` receives the
    /// mass `1 - sum(probs)`.
    pub fn from_probs(lo: i32, probs: &[f64], escape: bool) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("empty support"));
        }
        let mut mass: Vec<f64> = probs.iter().map(|&p| if p.is_finite() { p.max(0.0) } else { 0.0 }).collect();
        if escape {
            let inside: f64 = mass.iter().sum();
            mass.push((1.0 - inside).max(0.0));
        }
        let slots = mass.len();
        if slots as u64 > TOTAL_FREQ as u64 {
            return Err(Error::contract(format!("{slots} symbols exceed the {TOTAL_FREQ} frequency budget")));
        }
        let spare = (TOTAL_FREQ as usize - slots) as f64;
        let total: f64 = mass.iter().sum();
        let ideal: Vec<f64> = if total > 0.0 {
            mass.iter().map(|m| m / total * spare).collect()
        } else {
            vec![spare / slots as f64; slots]
        };
        let mut freqs: Vec<u32> = ideal.iter().map(|x| x.floor() as u32).collect();
        let assigned: u64 = freqs.iter().map(|&f| f as u64).sum();
        let mut left = spare as u64 - assigned;
        let mut order: Vec<usize> = (0..slots).collect();
        order.sort_by(|&a, &b| {
            let ra = ideal[a] - ideal[a].floor();
            let rb = ideal[b] - ideal[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            freqs[i] += 1;
            left -= 1;
        }
        for f in &mut freqs {
            *f += 1;
        }
        let hi = lo
            .checked_add(probs.len() as i32 - 1)
            .ok_or_else(|| Error::contract("support overflows i32"))?;
        Ok(Self::from_freqs(lo, hi, freqs, escape))
    }

    /// Tabulates `pmf(v)` for `v` in `lo..=hi` with an escape slot.
    pub fn from_pmf(lo: i32, hi: i32, pmf: impl Fn(i32) -> f64) -> Result<Self> {
        if lo > hi {
            return Err(Error::contract(format!("empty support [{lo}, {hi}]")));
        }
        let probs: Vec<f64> = (lo..=hi).map(pmf).collect();
        Self::from_probs(lo, &probs, true)
    }

    fn from_freqs(lo: i32, hi: i32, freqs: Vec<u32>, escape: bool) -> Self {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, TOTAL_FREQ);
        PmfTable { lo, hi, freqs, cum, escape }
    }

    pub fn support(&self) -> (i32, i32) {
        (self.lo, self.hi)
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    /// In-support frequencies followed by the escape frequency, if any.
    pub fn frequencies(&self) -> &[u32] {
        &self.freqs
    }

    pub fn escape_frequency(&self) -> Option<u32> {
        self.escape.then(|| *self.freqs.last().unwrap())
    }

    fn slot(&self, v: i32) -> Option<usize> {
        (v >= self.lo && v <= self.hi).then(|| (v as i64 - self.lo as i64) as usize)
    }

    /// Ideal code length of `v` under this table, escapes included.
    pub fn cost_bits(&self, v: i32) -> f64 {
        let bits = |f: u32| PRECISION_BITS as f64 - (f as f64).log2();
        match self.slot(v) {
            Some(i) => bits(self.freqs[i]),
            None => {
                let esc = self.escape_frequency().expect("escape slot");
                bits(esc) + 32.0
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.i32(self.lo).i32(self.hi).u8(self.escape as u8);
        for &f in &self.freqs {
            w.u32(f);
        }
        w.finish()
    }

    fn lookup(&self, target: u32) -> usize {
        // Last slot whose cumulative start is <= target.
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 32;

/// Shortest big-endian prefix of a value in `[low, low + range)`, with the
/// missing bytes read as zero. Both sides derive it from the same state.
fn flush_value(low: u64, range: u64) -> (u64, usize) {
    let end = low as u128 + range as u128;
    for k in 0..=8usize {
        let shift = 64 - 8 * k as u32;
        let unit = 1u128 << shift;
        let v = (low as u128).div_ceil(unit) * unit;
        if v < end && v <= u64::MAX as u128 {
            return (v as u64, k);
        }
    }
    unreachable!("an eight-byte prefix always fits")
}

/// Carryless range encoder with 64-bit state. The flush writes the shortest
/// prefix that pins the final interval, so a decoder can check the length.
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `2^16`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL_FREQ);
        let r = self.range >> PRECISION_BITS;
        self.low = self.low.wrapping_add(r * cum as u64);
        self.range = r * freq as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let (v, k) = flush_value(self.low, self.range);
        self.out.extend_from_slice(&v.to_be_bytes()[..k]);
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    input: &'a [u8],
    /// Bytes shifted in, counting zero padding past the end.
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            low: 0,
            range: u64::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.byte() as u64;
        }
        d
    }

    fn byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative frequency the next symbol falls under.
    pub fn target(&mut self) -> u32 {
        let r = self.range >> PRECISION_BITS;
        ((self.code.wrapping_sub(self.low)) / r).min(TOTAL_FREQ as u64 - 1) as u32
    }

    pub fn consume(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PRECISION_BITS;
        self.low = self.low.wrapping_add(r * cum as u64);
        self.range = r * freq as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.byte() as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Checks that the input is exactly what the encoder would have written.
    pub fn finish(&self) -> Result<()> {
        let (v, k) = flush_value(self.low, self.range);
        let expected = self.pos - 8 + k;
        let n = self.input.len();
        if n < expected {
            return Err(Error::Decode {
                position: n,
                reason: "range-coded stream is truncated".into(),
            });
        }
        if n > expected {
            return Err(Error::Decode {
                position: expected,
                reason: format!("{} trailing bytes", n - expected),
            });
        }
        if self.code != v {
            return Err(Error::Decode {
                position: n,
                reason: "final interval does not match the stream tail".into(),
            });
        }
        Ok(())
    }
}

fn encode_raw32(enc: &mut RangeEncoder, v: i32) {
    let u = v as u32;
    enc.encode(u >> 16, 1);
    enc.encode(u & 0xffff, 1);
}

fn decode_raw32(dec: &mut RangeDecoder) -> i32 {
    let hi = dec.target();
    dec.consume(hi, 1);
    let lo = dec.target();
    dec.consume(lo, 1);
    ((hi << 16) | lo) as i32
}

/// Symbol `i` is coded with `tables[i % tables.len()]`.
pub fn rc_encode(symbols: &[i32], tables: &[PmfTable]) -> Result<Vec<u8>> {
    if tables.is_empty() {
        return Err(Error::contract("no frequency tables"));
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let t = &tables[i % tables.len()];
        match t.slot(s) {
            Some(k) => enc.encode(t.cum[k], t.freqs[k]),
            None => {
                if !t.escape {
                    return Err(Error::contract(format!(
                        "symbol {s} at index {i} is outside [{}, {}] and the table has no escape",
                        t.lo, t.hi
                    )));
                }
                let k = t.freqs.len() - 1;
                enc.encode(t.cum[k], t.freqs[k]);
                encode_raw32(&mut enc, s);
            }
        }
    }
    Ok(enc.finish())
}

/// Decodes exactly `n` symbols; leftover bytes are an error.
pub fn rc_decode(bytes: &[u8], tables: &[PmfTable], n: usize) -> Result<Vec<i32>> {
    if tables.is_empty() {
        return Err(Error::contract("no frequency tables"));
    }
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = &tables[i % tables.len()];
        let k = t.lookup(dec.target());
        dec.consume(t.cum[k], t.freqs[k]);
        let in_support = (t.hi as i64 - t.lo as i64 + 1) as usize;
        if k < in_support {
            out.push(t.lo + k as i32);
        } else {
            out.push(decode_raw32(&mut dec));
        }
    }
    dec.finish()?;
    Ok(out)
}

/// Sum of ideal code lengths; what the coder should approach.
pub fn estimated_bits(symbols: &[i32], tables: &[PmfTable]) -> f64 {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| tables[i % tables.len()].cost_bits(s))
        .sum()
}

pub const BITSTREAM_MAGIC: &[u8; 4] = b"VCNR";
pub const BITSTREAM_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 8 + 8 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub inr_hash: u64,
    pub quantizer_hash: u64,
    /// Bit pattern of the rate-distortion weight as an `f32`.
    pub lambda_tag: u32,
}

impl BitstreamHeader {
    pub fn lambda_tag_for(lambda: f64) -> u32 {
        (lambda as f32).to_bits()
    }

    pub fn lambda(&self) -> f32 {
        f32::from_bits(self.lambda_tag)
    }
}

/// One coded item: its spatial extent and the range-coded latent codes of
/// all its patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemRecord {
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub items: Vec<ItemRecord>,
}

impl Bitstream {
    pub fn pack(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(BITSTREAM_MAGIC)
            .u8(BITSTREAM_VERSION)
            .u64(self.header.inr_hash)
            .u64(self.header.quantizer_hash)
            .u32(self.header.lambda_tag)
            .u32(u32::try_from(self.items.len()).map_err(|_| Error::contract("too many items"))?);
        for item in &self.items {
            let rank = u8::try_from(item.dims.len()).map_err(|_| Error::contract("item rank above 255"))?;
            w.u8(rank);
            for &d in &item.dims {
                w.u32(d);
            }
            let len = u32::try_from(item.payload.len()).map_err(|_| Error::contract("payload above 4 GiB"))?;
            w.u32(len).bytes(&item.payload);
        }
        Ok(w.finish())
    }

    pub fn read_header(bytes: &[u8]) -> Result<(BitstreamHeader, u32)> {
        let mut r = Reader::new(bytes);
        r.expect_magic(BITSTREAM_MAGIC)?;
        let version = r.u8()?;
        if version != BITSTREAM_VERSION {
            return Err(Error::format(format!("unsupported bitstream version {version}")));
        }
        let header = BitstreamHeader {
            inr_hash: r.u64()?,
            quantizer_hash: r.u64()?,
            lambda_tag: r.u32()?,
        };
        Ok((header, r.u32()?))
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self> {
        let (header, count) = Self::read_header(bytes)?;
        let mut r = Reader::new(bytes);
        r.take(HEADER_LEN)?;
        let mut items = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len = r.u32()? as usize;
            let payload = r.take(len)?.to_vec();
            items.push(ItemRecord { dims, payload });
        }
        if r.remaining() != 0 {
            return Err(Error::Decode {
                position: r.position(),
                reason: format!("{} trailing bytes after the last item", r.remaining()),
            });
        }
        Ok(Bitstream { header, items })
    }

    /// Rejects a stream produced with other checkpoints before touching any
    /// payload.
    pub fn unpack_checked(bytes: &[u8], inr_hash: u64, quantizer_hash: u64) -> Result<Self> {
        let (header, _) = Self::read_header(bytes)?;
        if header.inr_hash != inr_hash {
            return Err(Error::HashMismatch {
                what: "INR",
                expected: inr_hash,
                found: header.inr_hash,
            });
        }
        if header.quantizer_hash != quantizer_hash {
            return Err(Error::HashMismatch {
                what: "quantizer",
                expected: quantizer_hash,
                found: header.quantizer_hash,
            });
        }
        Self::unpack(bytes)
    }
}
