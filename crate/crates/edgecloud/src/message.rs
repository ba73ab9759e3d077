//! Payloads carried inside frames. Requests and the server greeting are
//! JSON; the handoff is the binary packet encoding.

use hybridsd::hybrid::{HybridPlan, Precision, Start};
use hybridsd::sampler::SamplerConfig;
use hybridsd::{Codec, Denoiser};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, MessageType};

/// Per-row condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Class(usize),
    Null,
    /// Explicit embedding, `tokens × width`.
    Tokens(Vec<Vec<f32>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub seed: u64,
    pub cloud_steps: usize,
    pub sampler: SamplerConfig,
    /// One entry per sample.
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub reset_history: bool,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Img2ImgRequest {
    pub seed: u64,
    pub cloud_steps: usize,
    pub sampler: SamplerConfig,
    pub conditions: Vec<Condition>,
    /// Data-space starting points, one per condition.
    pub points: Vec<Vec<f64>>,
    pub strength: f64,
    #[serde(default)]
    pub reset_history: bool,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Request {
    Generate(GenerateRequest),
    Img2Img(Img2ImgRequest),
}

/// Server reply to HELLO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub latent_dim: usize,
    pub num_classes: usize,
    /// FLOPs of one large-model forward pass for one row.
    pub forward_flops: u64,
}

impl Request {
    pub fn seed(&self) -> u64 {
        match self {
            Request::Generate(r) => r.seed,
            Request::Img2Img(r) => r.seed,
        }
    }

    pub fn plan(&self) -> HybridPlan {
        let (sampler, k, reset) = match self {
            Request::Generate(r) => (r.sampler, r.cloud_steps, r.reset_history),
            Request::Img2Img(r) => (r.sampler, r.cloud_steps, r.reset_history),
        };
        HybridPlan {
            reset_history: reset,
            ..HybridPlan::new(sampler, k)
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            Request::Generate(r) => r.precision,
            Request::Img2Img(r) => r.precision,
        }
    }

    pub fn conditions(&self) -> &[Condition] {
        match self {
            Request::Generate(r) => &r.conditions,
            Request::Img2Img(r) => &r.conditions,
        }
    }

    pub fn rows(&self) -> usize {
        self.conditions().len()
    }

    /// Where the trajectory starts; image starts go through the encoder.
    pub fn start(&self, codec: &Codec) -> Result<Start<f32>> {
        match self {
            Request::Generate(r) => Ok(Start::Noise {
                seed: r.seed,
                rows: r.conditions.len(),
            }),
            Request::Img2Img(r) => {
                if r.points.len() != r.conditions.len() {
                    return Err(Error::Protocol(format!(
                        "{} points for {} conditions",
                        r.points.len(),
                        r.conditions.len()
                    )));
                }
                let x = rows_to_array(&r.points, codec.data_dim)?;
                Ok(Start::Latent {
                    x0: codec.encode(x.view())?,
                    strength: r.strength,
                    seed: r.seed,
                })
            }
        }
    }

    /// Condition tokens for every row, using the model's own embedding for
    /// class and null conditions.
    pub fn tokens(&self, model: &Denoiser) -> Result<Array3<f32>> {
        let conds = self.conditions();
        if conds.is_empty() {
            return Err(Error::Protocol("request has no rows".into()));
        }
        let a = &model.descriptor.attention;
        let (count, width) = (a.num_condition_tokens, a.condition_dim);
        let mut out = Array3::zeros((conds.len(), count, width));
        for (i, c) in conds.iter().enumerate() {
            let row = match c {
                Condition::Class(k) => model.condition_tokens(&[Some(*k)])?.index_axis_move(ndarray::Axis(0), 0),
                Condition::Null => model.condition_tokens(&[None])?.index_axis_move(ndarray::Axis(0), 0),
                Condition::Tokens(t) => {
                    if t.len() != count || t.iter().any(|r| r.len() != width) {
                        return Err(Error::Protocol(format!("embedding must be {count}×{width}")));
                    }
                    Array2::from_shape_fn((count, width), |(j, d)| t[j][d])
                }
            };
            out.index_axis_mut(ndarray::Axis(0), i).assign(&row);
        }
        Ok(out)
    }

    pub fn to_frame(&self) -> Result<Frame> {
        Ok(match self {
            Request::Generate(r) => Frame::new(MessageType::GenerateRequest, serde_json::to_vec(r)?),
            Request::Img2Img(r) => Frame::new(MessageType::Img2ImgRequest, serde_json::to_vec(r)?),
        })
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        match frame.kind {
            MessageType::GenerateRequest => Ok(Request::Generate(serde_json::from_slice(&frame.payload)?)),
            MessageType::Img2ImgRequest => Ok(Request::Img2Img(serde_json::from_slice(&frame.payload)?)),
            other => Err(Error::Protocol(format!("expected a request, got {other:?}"))),
        }
    }
}

fn rows_to_array(rows: &[Vec<f64>], dim: usize) -> Result<Array2<f32>> {
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Protocol(format!("points must have {dim} coordinates")));
    }
    Ok(Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j] as f32))
}
