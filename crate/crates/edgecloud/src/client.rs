//! Edge side: requests a handoff, waits out the modelled transfer, and
//! finishes the trajectory with the small model.

use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use hybridsd::flops::flops_count;
use hybridsd::hybrid::{run_edge_phase, start_position, HandoffPacket, TraceRecord};
use hybridsd::schedule::NoiseSchedule;
use hybridsd::{Codec, Denoiser};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cost::{split_cost, ChannelModel, CostModel, CostReport};
use crate::error::{Error, Result};
use crate::frame::{read_frame, write_frame, Frame, MessageType, MAX_PAYLOAD, PROTOCOL_VERSION};
use crate::message::{Request, ServerInfo};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub channel: ChannelModel,
    /// Actually sleep for the modelled transfer time.
    pub simulate_delay: bool,
    pub timeout: Option<Duration>,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            channel: ChannelModel::mbps(18.88),
            simulate_delay: false,
            timeout: Some(Duration::from_secs(60)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EdgeOutcome {
    /// Decoded data-space sample.
    pub sample: Array2<f32>,
    pub latent: Array2<f32>,
    /// Edge steps only; the cloud steps never leave the server.
    pub trace: Vec<TraceRecord>,
    pub packet: HandoffPacket<f32>,
    pub server: ServerInfo,
    pub cost: CostReport,
    /// Delay applied for the transfer, including jitter.
    pub delay_seconds: f64,
}

fn reply(frame: Option<Frame>, want: MessageType) -> Result<Frame> {
    let f = frame.ok_or_else(|| Error::Protocol(format!("server closed before {want:?}")))?;
    if f.version != PROTOCOL_VERSION {
        return Err(Error::UnsupportedVersion(f.version));
    }
    match f.kind {
        k if k == want => Ok(f),
        MessageType::Error => Err(Error::Remote(f.text())),
        k => Err(Error::Protocol(format!("expected {want:?}, got {k:?}"))),
    }
}

pub fn edge_run<A: ToSocketAddrs>(
    server: A,
    request: &Request,
    small: &Denoiser,
    codec: &Codec,
    schedule: &NoiseSchedule,
    config: &EdgeConfig,
) -> Result<EdgeOutcome> {
    config.channel.validate()?;
    let stream = TcpStream::connect(server)?;
    stream.set_read_timeout(config.timeout)?;
    stream.set_write_timeout(config.timeout)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);

    write_frame(&mut writer, &Frame::new(MessageType::Hello, Vec::new()))?;
    let info: ServerInfo = serde_json::from_slice(&reply(read_frame(&mut reader, MAX_PAYLOAD)?, MessageType::Hello)?.payload)?;
    if info.latent_dim != small.descriptor.latent_dim {
        return Err(Error::Protocol(format!(
            "server latent dim {} != local {}",
            info.latent_dim, small.descriptor.latent_dim
        )));
    }
    write_frame(&mut writer, &request.to_frame()?)?;
    let handoff = reply(read_frame(&mut reader, MAX_PAYLOAD)?, MessageType::Handoff)?;
    let payload_bytes = handoff.payload.len();
    let packet = HandoffPacket::<f32>::decode(&handoff.payload)?;

    let delay = config.channel.delay(payload_bytes, request.seed())?;
    if config.simulate_delay && delay.is_finite() {
        std::thread::sleep(Duration::from_secs_f64(delay));
    }

    let mut trace = Vec::new();
    let state = run_edge_phase(small, schedule, &packet, &mut trace)?;
    let sample = codec.decode(state.z.view())?;
    let _ = write_frame(&mut writer, &Frame::new(MessageType::Done, Vec::new()));

    let steps = packet.sampler.num_inference_steps;
    let first = match request {
        Request::Generate(_) => 0,
        Request::Img2Img(r) => start_position(r.strength, steps)?,
    };
    let per_step = (packet.sampler.evals_per_step() * packet.latent.nrows()) as f64;
    let model = CostModel {
        large_step: per_step * info.forward_flops as f64,
        small_step: per_step * flops_count(&small.descriptor) as f64,
        decoder: (codec.decode_flops() * packet.latent.nrows() as u64) as f64,
        light_decoder: None,
        steps: steps - first,
        cloud_steps: packet.step_offset - first,
    };
    let cost = split_cost(&model)?.with_transfer(payload_bytes, &config.channel)?;
    Ok(EdgeOutcome {
        sample,
        latent: state.z,
        trace,
        packet,
        server: info,
        cost,
        delay_seconds: delay,
    })
}
