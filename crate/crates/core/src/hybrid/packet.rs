//! Binary handoff packet.
//!
//! ```text
//! magic      b"HSDH"
//! version    u16
//! precision  u8            0 = f32, 1 = f16
//! sampler    u8 kind, u32 steps, f64 guidance, f64 eta
//! seed       u64
//! offset     u32           position of the next step
//! t          u32           timestep of the latent
//! remaining  u32 n, u32 × n
//! latent     u32 rows, u32 dim, rows·dim floats
//! tokens     u8 flag [u32 count, u32 width, rows·count·width floats]
//! history    u8 flag [u32 t, rows·dim floats]
//! ```
//! Little-endian throughout.

use half::f16;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{HistoryEntry, SamplerConfig, SamplerKind, SolverHistory};
use crate::scalar::Scalar;

pub const PACKET_MAGIC: &[u8; 4] = b"HSDH";
pub const PACKET_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F16,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }
}

/// Everything the small model needs to continue a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct HandoffPacket<S> {
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Position of the first step still to run.
    pub step_offset: usize,
    /// Timesteps still to run, descending; the last step goes to t = 0.
    pub remaining: Vec<usize>,
    pub latent: Array2<S>,
    /// Timestep of `latent`.
    pub t: usize,
    /// Per-row condition tokens; `None` for unconditional sampling.
    pub tokens: Option<Array3<S>>,
    pub history: SolverHistory<S>,
}

impl<S: Scalar> HandoffPacket<S> {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Packet(m));
        match self.remaining.first() {
            Some(&first) if first != self.t => {
                return fail(format!("latent at t={} but next step starts at {first}", self.t))
            }
            None if self.t != 0 => return fail(format!("no steps remain but latent is at t={}", self.t)),
            _ => {}
        }
        if self.remaining.windows(2).any(|w| w[0] <= w[1]) || self.remaining.contains(&0) {
            return fail("remaining steps must be positive and strictly descending".into());
        }
        if self.step_offset + self.remaining.len() != self.sampler.num_inference_steps {
            return fail(format!(
                "offset {} + {} remaining != {} steps",
                self.step_offset,
                self.remaining.len(),
                self.sampler.num_inference_steps
            ));
        }
        if let Some(tok) = &self.tokens {
            if tok.dim().0 != self.latent.nrows() {
                return fail("token rows differ from latent rows".into());
            }
        }
        if let Some(h) = &self.history.prev {
            if h.t <= self.t {
                return Err(Error::MalformedHistory(format!(
                    "history timestep {} is not after current step {}",
                    h.t, self.t
                )));
            }
            if h.eps.dim() != self.latent.dim() {
                return fail("history shape differs from latent".into());
            }
        }
        Ok(())
    }

    /// Bytes of tensor data at the given precision.
    pub fn tensor_bytes(&self, precision: Precision) -> usize {
        let floats = self.latent.len()
            + self.tokens.as_ref().map_or(0, |t| t.len())
            + self.history.prev.as_ref().map_or(0, |h| h.eps.len());
        floats * precision.bytes()
    }

    /// Bytes of everything except tensor data.
    pub fn header_bytes(&self) -> usize {
        let fixed = 4 + 2 + 1 + (1 + 4 + 8 + 8) + 8 + 4 + 4;
        let remaining = 4 + 4 * self.remaining.len();
        let latent = 8;
        let tokens = 1 + if self.tokens.is_some() { 8 } else { 0 };
        let history = 1 + if self.history.prev.is_some() { 4 } else { 0 };
        fixed + remaining + latent + tokens + history
    }

    /// Exact length of [`encode`](Self::encode)'s output.
    pub fn encoded_len(&self, precision: Precision) -> usize {
        self.header_bytes() + self.tensor_bytes(precision)
    }

    pub fn encode(&self, precision: Precision) -> Vec<u8> {
        let mut w = Writer {
            buf: Vec::with_capacity(self.encoded_len(precision)),
            precision,
        };
        w.bytes(PACKET_MAGIC);
        w.u16(PACKET_VERSION);
        w.u8(match precision {
            Precision::F32 => 0,
            Precision::F16 => 1,
        });
        w.u8(self.sampler.kind.code());
        w.u32(self.sampler.num_inference_steps);
        w.f64(self.sampler.guidance_scale);
        w.f64(self.sampler.eta);
        w.u64(self.seed);
        w.u32(self.step_offset);
        w.u32(self.t);
        w.u32(self.remaining.len());
        for &t in &self.remaining {
            w.u32(t);
        }
        w.u32(self.latent.nrows());
        w.u32(self.latent.ncols());
        w.floats(self.latent.iter());
        match &self.tokens {
            Some(tok) => {
                w.u8(1);
                w.u32(tok.dim().1);
                w.u32(tok.dim().2);
                w.floats(tok.iter());
            }
            None => w.u8(0),
        }
        match &self.history.prev {
            Some(h) => {
                w.u8(1);
                w.u32(h.t);
                w.floats(h.eps.iter());
            }
            None => w.u8(0),
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PACKET_MAGIC {
            return Err(Error::Packet("bad magic".into()));
        }
        let version = r.u16()?;
        if version != PACKET_VERSION {
            return Err(Error::Packet(format!("unsupported version {version}")));
        }
        let precision = match r.u8()? {
            0 => Precision::F32,
            1 => Precision::F16,
            p => return Err(Error::Packet(format!("unknown precision {p}"))),
        };
        let code = r.u8()?;
        let kind = SamplerKind::from_code(code).ok_or_else(|| Error::Packet(format!("unknown sampler {code}")))?;
        let sampler = SamplerConfig {
            kind,
            num_inference_steps: r.u32()?,
            guidance_scale: r.f64()?,
            eta: r.f64()?,
        };
        let seed = r.u64()?;
        let step_offset = r.u32()?;
        let t = r.u32()?;
        let n = r.u32()?;
        r.ensure(n.saturating_mul(4))?;
        let remaining = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let rows = r.u32()?;
        let dim = r.u32()?;
        let latent = Array2::from_shape_vec((rows, dim), r.floats(rows.saturating_mul(dim), precision)?)
            .map_err(|e| Error::Packet(e.to_string()))?;
        let tokens = match r.u8()? {
            0 => None,
            1 => {
                let count = r.u32()?;
                let width = r.u32()?;
                let len = rows.saturating_mul(count).saturating_mul(width);
                Some(
                    Array3::from_shape_vec((rows, count, width), r.floats(len, precision)?)
                        .map_err(|e| Error::Packet(e.to_string()))?,
                )
            }
            f => return Err(Error::Packet(format!("bad token flag {f}"))),
        };
        let history = match r.u8()? {
            0 => SolverHistory::default(),
            1 => {
                let ht = r.u32()?;
                let eps = Array2::from_shape_vec((rows, dim), r.floats(rows.saturating_mul(dim), precision)?)
                    .map_err(|e| Error::Packet(e.to_string()))?;
                SolverHistory {
                    prev: Some(HistoryEntry { t: ht, eps }),
                }
            }
            f => return Err(Error::Packet(format!("bad history flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Packet(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let packet = Self {
            sampler,
            seed,
            step_offset,
            remaining,
            latent,
            t,
            tokens,
            history,
        };
        packet.validate()?;
        Ok(packet)
    }
}

struct Writer {
    buf: Vec<u8>,
    precision: Precision,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.bytes(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn floats<'a, S: Scalar>(&mut self, values: impl Iterator<Item = &'a S>) {
        for v in values {
            match self.precision {
                Precision::F32 => self.bytes(&v.as_f32().to_le_bytes()),
                Precision::F16 => self.bytes(&f16::from_f32(v.as_f32()).to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn ensure(&self, n: usize) -> Result<()> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Packet(format!("truncated at byte {}", self.pos)));
        }
        Ok(())
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.ensure(n)?;
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn floats<S: Scalar>(&mut self, count: usize, precision: Precision) -> Result<Vec<S>> {
        let raw = self.take(count.saturating_mul(precision.bytes()))?;
        Ok(match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| S::lit(f32::from_le_bytes(c.try_into().expect("chunk")) as f64))
                .collect(),
            Precision::F16 => raw
                .chunks_exact(2)
                .map(|c| S::lit(f16::from_le_bytes(c.try_into().expect("chunk")).to_f64()))
                .collect(),
        })
    }
}
