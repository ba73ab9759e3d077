//! Cloud/edge split execution of hybrid sampling.
//!
//! The cloud runs the first `k` steps with the large model and sends the
//! handoff packet over TCP; the edge finishes with the small model and
//! decodes locally. [`cost`] accounts FLOPs and transfer time for a split.

pub mod client;
pub mod cost;
mod error;
pub mod frame;
pub mod message;
pub mod server;

pub use client::{edge_run, EdgeConfig, EdgeOutcome};
pub use cost::{hybrid_total_flops, split_cost, transmission_time, ChannelModel, CostModel, CostReport};
pub use error::{Error, Result};
pub use frame::{Frame, MessageType, PROTOCOL_VERSION};
pub use message::{Condition, GenerateRequest, Img2ImgRequest, Request, ServerInfo};
pub use server::{Server, ServerHandle, ServerState};
