use super::range_coder::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::nn::{Tensor, WeightStore};

/// Probability resolution of every table.
pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
/// Raw bits spent on an escaped symbol after its escape code.
pub const ESCAPE_RAW_BITS: u32 = 32;

/// One channel's quantized CDF: `cdf[k]..cdf[k+1]` is the interval of
/// symbol `offset + k` for `k < S`, and `cdf[S]..cdf[S+1]` the escape slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelTable {
    pub offset: i32,
    pub cdf: Vec<u32>,
}

impl ChannelTable {
    pub fn symbols(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn freq(&self, k: usize) -> u32 {
        self.cdf[k + 1] - self.cdf[k]
    }

    pub fn escape_freq(&self) -> u32 {
        self.freq(self.symbols())
    }

    /// Table slot of a symbol, or `None` when it needs the escape.
    pub fn slot(&self, s: i32) -> Option<usize> {
        let k = s as i64 - self.offset as i64;
        (k >= 0 && (k as usize) < self.symbols()).then_some(k as usize)
    }

    fn validate(&self) -> Result<()> {
        let s = self.cdf.len();
        if s < 3 {
            return Err(Error::Entropy("table needs at least one symbol".into()));
        }
        if self.cdf[0] != 0 || self.cdf[s - 1] != PROB_TOTAL {
            return Err(Error::Entropy("cdf must run from 0 to 65536".into()));
        }
        if self.cdf.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Entropy("cdf is not monotone".into()));
        }
        if (0..self.symbols()).any(|k| self.freq(k) == 0) {
            return Err(Error::Entropy("in-range symbol with zero probability".into()));
        }
        Ok(())
    }
}

/// Per-channel probability mass used to build a table.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPmf {
    pub offset: i32,
    pub probs: Vec<f64>,
    /// Mass reserved for out-of-range symbols; zero disables escapes.
    pub escape: f64,
}

/// Factorized (per-channel independent) prior frozen into CDF tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntropyModel {
    channels: Vec<ChannelTable>,
}

fn quantize_pmf(pmf: &ChannelPmf) -> Result<Vec<u32>> {
    let n = pmf.probs.len();
    if n == 0 {
        return Err(Error::Entropy("empty pmf".into()));
    }
    let with_escape = n + 1;
    if with_escape > PROB_TOTAL as usize {
        return Err(Error::Entropy(format!("{n} symbols exceed the table resolution")));
    }
    if pmf.probs.iter().chain([&pmf.escape]).any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Entropy("pmf entries must be finite and non-negative".into()));
    }
    let sum: f64 = pmf.probs.iter().sum::<f64>() + pmf.escape;
    if sum <= 0.0 {
        return Err(Error::Entropy("pmf has no mass".into()));
    }
    let scale = PROB_TOTAL as f64 / sum;
    let mut freq: Vec<u32> = pmf
        .probs
        .iter()
        .map(|p| ((p * scale).round() as u32).max(1))
        .collect();
    freq.push(if pmf.escape > 0.0 {
        ((pmf.escape * scale).round() as u32).max(1)
    } else {
        0
    });
    let total: i64 = freq.iter().map(|&f| f as i64).sum();
    let mut diff = PROB_TOTAL as i64 - total;
    while diff != 0 {
        // the largest slot absorbs the rounding error; first index on ties
        let (imax, &fmax) = freq
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if diff > 0 {
            freq[imax] += diff as u32;
            diff = 0;
        } else {
            let take = ((-diff) as u32).min(fmax - 1);
            if take == 0 {
                return Err(Error::Entropy("cannot renormalize pmf".into()));
            }
            freq[imax] -= take;
            diff += take as i64;
        }
    }
    let mut cdf = Vec::with_capacity(freq.len() + 1);
    cdf.push(0);
    let mut acc = 0;
    for f in freq {
        acc += f;
        cdf.push(acc);
    }
    Ok(cdf)
}

impl EntropyModel {
    pub fn new(channels: Vec<ChannelTable>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Entropy("model without channels".into()));
        }
        for c in &channels {
            c.validate()?;
        }
        Ok(Self { channels })
    }

    /// Proportional 16-bit quantization with a one-count floor for every
    /// in-range symbol, renormalized to sum to 65536.
    pub fn from_pmfs(pmfs: &[ChannelPmf]) -> Result<Self> {
        if pmfs.is_empty() {
            return Err(Error::Entropy("empty pmf list".into()));
        }
        let channels = pmfs
            .iter()
            .map(|p| {
                Ok(ChannelTable {
                    offset: p.offset,
                    cdf: quantize_pmf(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(channels)
    }

    /// Discretized zero-mean Laplacian on `[-radius, radius]` per channel,
    /// `scales[c]` being the channel's decay length.
    pub fn laplacian(scales: &[f64], radius: i32, escape: f64) -> Result<Self> {
        let pmfs: Vec<ChannelPmf> = scales
            .iter()
            .map(|&b| ChannelPmf {
                offset: -radius,
                probs: (-radius..=radius)
                    .map(|s| libm::exp(-(s.abs() as f64) / b.max(1e-6)))
                    .collect(),
                escape,
            })
            .collect();
        Self::from_pmfs(&pmfs)
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn table(&self, c: usize) -> &ChannelTable {
        &self.channels[c]
    }

    fn channel_of(&self, i: usize) -> &ChannelTable {
        &self.channels[i % self.channels.len()]
    }

    /// Bits of one symbol under channel `c`'s table.
    pub fn symbol_bits(&self, c: usize, s: i32) -> f64 {
        let t = &self.channels[c];
        let freq = match t.slot(s) {
            Some(k) => t.freq(k),
            None => t.escape_freq(),
        };
        let raw = if t.slot(s).is_some() { 0.0 } else { ESCAPE_RAW_BITS as f64 };
        if freq == 0 {
            return f64::INFINITY;
        }
        PROB_BITS as f64 - (freq as f64).log2() + raw
    }

    /// Sum of `-log2 p` over a row-major `N x C` symbol matrix.
    pub fn estimate_bits(&self, symbols: &[i32]) -> f64 {
        let c = self.channels.len();
        symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| self.symbol_bits(i % c, s))
            .sum()
    }

    pub fn encode(&self, symbols: &[i32]) -> Result<Vec<u8>> {
        let mut enc = RangeEncoder::new();
        for (i, &s) in symbols.iter().enumerate() {
            let t = self.channel_of(i);
            match t.slot(s) {
                Some(k) => enc.encode(t.cdf[k], t.freq(k), PROB_TOTAL),
                None => {
                    let esc = t.escape_freq();
                    if esc == 0 {
                        return Err(Error::Entropy(format!(
                            "symbol {s} outside the table and escapes are disabled"
                        )));
                    }
                    enc.encode(t.cdf[t.symbols()], esc, PROB_TOTAL);
                    let z = zigzag(s);
                    enc.encode_raw16(z >> 16);
                    enc.encode_raw16(z & 0xFFFF);
                }
            }
        }
        Ok(enc.finish())
    }

    /// Decodes exactly `count` symbols. The model must be the one used to
    /// encode; a mismatched model yields garbage rather than an error.
    pub fn decode(&self, data: &[u8], count: usize) -> Result<Vec<i32>> {
        let mut dec = RangeDecoder::new(data)?;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let t = self.channel_of(i);
            let v = dec.decode_freq(PROB_TOTAL)?;
            let k = t.cdf.partition_point(|&c| c <= v) - 1;
            dec.consume(t.cdf[k], t.freq(k))?;
            if k == t.symbols() {
                let hi = dec.decode_raw16()?;
                let lo = dec.decode_raw16()?;
                out.push(unzigzag((hi << 16) | lo));
            } else {
                out.push(t.offset + k as i32);
            }
        }
        dec.finish()?;
        Ok(out)
    }

    /// Piecewise-linear relaxation of the table: the likelihood of a
    /// continuous value `v` interpolates the masses of its two neighbouring
    /// integers. Returns `(bits, d bits / d v)`; integers reproduce the table.
    pub fn continuous_bits(&self, c: usize, v: f64) -> (f64, f64) {
        let t = &self.channels[c];
        let pos = v - t.offset as f64;
        let k = pos.floor();
        let frac = pos - k;
        let mass = |i: f64| -> f64 {
            if i < 0.0 || i >= t.symbols() as f64 {
                0.0
            } else {
                t.freq(i as usize) as f64
            }
        };
        let (m0, m1) = (mass(k), mass(k + 1.0));
        let m = (1.0 - frac) * m0 + frac * m1;
        if m < 1.0 {
            return (PROB_BITS as f64, 0.0);
        }
        let bits = PROB_BITS as f64 - m.log2();
        let grad = -(m1 - m0) / (m * std::f64::consts::LN_2);
        (bits, grad)
    }

    pub fn store_into(&self, store: &mut WeightStore, stream: &str) -> Result<()> {
        let width = self.channels[0].cdf.len();
        if self.channels.iter().any(|t| t.cdf.len() != width) {
            return Err(Error::Entropy("all channels of a stored model need equal table sizes".into()));
        }
        let cdf = self.channels.iter().flat_map(|t| t.cdf.iter().map(|&v| v as f32)).collect();
        let off = self.channels.iter().map(|t| t.offset as f32).collect();
        store.insert(format!("entropy.{stream}.cdf"), Tensor::new(vec![self.channels.len(), width], cdf)?);
        store.insert(format!("entropy.{stream}.offset"), Tensor::new(vec![self.channels.len()], off)?);
        Ok(())
    }

    pub fn load_from(store: &WeightStore, stream: &str) -> Result<Self> {
        let name = format!("entropy.{stream}.cdf");
        let cdf = store
            .get(&name)
            .ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
        if cdf.dims.len() != 2 {
            return Err(Error::Weights(format!("{name} must be rank 2")));
        }
        let (n, width) = (cdf.dims[0], cdf.dims[1]);
        let off = store.expect(&format!("entropy.{stream}.offset"), &[n])?;
        let channels = (0..n)
            .map(|c| ChannelTable {
                offset: off.values[c] as i32,
                cdf: cdf.values[c * width..(c + 1) * width].iter().map(|&v| v as u32).collect(),
            })
            .collect();
        Self::new(channels)
    }
}

fn zigzag(s: i32) -> u32 {
    ((s << 1) ^ (s >> 31)) as u32
}

fn unzigzag(z: u32) -> i32 {
    ((z >> 1) as i32) ^ -((z & 1) as i32)
}
