//! FLOPs split between cloud and edge, and the modelled transfer time of
//! the handoff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Bits per second; may be infinite.
    pub bandwidth_bps: f64,
    pub latency_s: f64,
    /// When set, each transfer adds a deterministic extra delay drawn
    /// uniformly from `[0, latency_s)`.
    #[serde(default)]
    pub jitter_seed: Option<u64>,
}

impl ChannelModel {
    /// Decimal megabits per second, no latency.
    pub fn mbps(mbps: f64) -> Self {
        Self {
            bandwidth_bps: mbps * 1e6,
            latency_s: 0.0,
            jitter_seed: None,
        }
    }

    pub fn unlimited() -> Self {
        Self {
            bandwidth_bps: f64::INFINITY,
            latency_s: 0.0,
            jitter_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bps > 0.0) {
            return Err(Error::InvalidChannel(format!("bandwidth {} must be > 0", self.bandwidth_bps)));
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(Error::InvalidChannel(format!("latency {} must be finite and >= 0", self.latency_s)));
        }
        Ok(())
    }

    /// Delay applied to transfer number `index`: the modelled time plus
    /// jitter, if configured.
    pub fn delay(&self, payload_bytes: usize, index: u64) -> Result<f64> {
        let base = transmission_time(payload_bytes, self)?;
        Ok(match self.jitter_seed {
            Some(seed) if self.latency_s > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index);
                base + rng.gen_range(0.0..self.latency_s)
            }
            _ => base,
        })
    }
}

/// Seconds to move `payload_bytes` over the channel.
pub fn transmission_time(payload_bytes: usize, channel: &ChannelModel) -> Result<f64> {
    channel.validate()?;
    Ok(payload_bytes as f64 * 8.0 / channel.bandwidth_bps + channel.latency_s)
}

/// Total FLOPs of a trajectory whose first `k` of `steps` steps run on the
/// large model, from the two single-model totals.
pub fn hybrid_total_flops(small_total: f64, large_total: f64, steps: usize, k: usize) -> Result<f64> {
    if steps == 0 || k > steps {
        return Err(Error::InvalidCost(format!("need 0 <= k <= steps, steps > 0; got k={k}, steps={steps}")));
    }
    Ok(small_total + k as f64 * (large_total - small_total) / steps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// FLOPs of one large-model step.
    pub large_step: f64,
    /// FLOPs of one small-model step.
    pub small_step: f64,
    /// Decoder FLOPs of the cloud-only baseline.
    pub decoder: f64,
    /// Cheaper decoder used on the edge instead of `decoder`.
    #[serde(default)]
    pub light_decoder: Option<f64>,
    pub steps: usize,
    pub cloud_steps: usize,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.large_step, self.small_step, self.decoder, self.light_decoder.unwrap_or(0.0)];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidCost("FLOPs must be finite and >= 0".into()));
        }
        if self.cloud_steps > self.steps {
            return Err(Error::InvalidCost(format!(
                "cloud steps {} exceed {} steps",
                self.cloud_steps, self.steps
            )));
        }
        Ok(())
    }

    pub fn edge_decoder(&self) -> f64 {
        self.light_decoder.unwrap_or(self.decoder)
    }

    /// Everything on the cloud with the large model and full decoder.
    pub fn all_cloud_total(&self) -> f64 {
        self.steps as f64 * self.large_step + self.decoder
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub cloud_flops: f64,
    pub edge_flops: f64,
    pub total_flops: f64,
    pub payload_bytes: usize,
    pub transmission_seconds: f64,
    /// `1 − cloud / all-cloud total`.
    pub cloud_reduction: f64,
}

impl CostReport {
    pub fn with_transfer(mut self, payload_bytes: usize, channel: &ChannelModel) -> Result<Self> {
        self.payload_bytes = payload_bytes;
        self.transmission_seconds = transmission_time(payload_bytes, channel)?;
        Ok(self)
    }
}

/// Cloud runs the large steps; the edge runs the small steps and decodes.
pub fn split_cost(model: &CostModel) -> Result<CostReport> {
    model.validate()?;
    let cloud = model.cloud_steps as f64 * model.large_step;
    let edge = (model.steps - model.cloud_steps) as f64 * model.small_step + model.edge_decoder();
    let baseline = model.all_cloud_total();
    Ok(CostReport {
        cloud_flops: cloud,
        edge_flops: edge,
        total_flops: cloud + edge,
        payload_bytes: 0,
        transmission_seconds: 0.0,
        cloud_reduction: if baseline > 0.0 { 1.0 - cloud / baseline } else { 0.0 },
    })
}
