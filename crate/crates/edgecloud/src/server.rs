//! Cloud side: runs the large-model steps and replies with a handoff.
//!
//! A session is HELLO → request → HANDOFF → DONE, one request per
//! connection. Any protocol fault is answered with ERROR and the
//! connection is closed; the listener keeps running.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use hybridsd::flops::flops_count;
use hybridsd::hybrid::run_cloud_phase;
use hybridsd::schedule::NoiseSchedule;
use hybridsd::{Codec, Denoiser};
use log::{info, warn};

use crate::error::{Error, Result};
use crate::frame::{read_frame, write_frame, Frame, MessageType, MAX_PAYLOAD, PROTOCOL_VERSION};
use crate::message::{Request, ServerInfo};

/// Shared, read-only server state.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub large: Arc<Denoiser>,
    pub schedule: Arc<NoiseSchedule>,
    pub codec: Arc<Codec>,
    pub max_payload: usize,
    pub io_timeout: Option<Duration>,
}

impl ServerState {
    pub fn new(large: Denoiser, schedule: NoiseSchedule, codec: Codec) -> Self {
        Self {
            large: Arc::new(large),
            schedule: Arc::new(schedule),
            codec: Arc::new(codec),
            max_payload: MAX_PAYLOAD,
            io_timeout: Some(Duration::from_secs(30)),
        }
    }

    pub fn info(&self) -> ServerInfo {
        ServerInfo {
            latent_dim: self.large.descriptor.latent_dim,
            num_classes: self.large.descriptor.num_classes,
            forward_flops: flops_count(&self.large.descriptor),
        }
    }
}

/// What one session did, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub rows: usize,
    pub cloud_steps_run: usize,
    pub cloud_flops: u64,
    pub payload_bytes: usize,
}

fn expect(frame: Option<Frame>, what: &str) -> Result<Frame> {
    let f = frame.ok_or_else(|| Error::Protocol(format!("connection closed before {what}")))?;
    if f.version != PROTOCOL_VERSION {
        return Err(Error::UnsupportedVersion(f.version));
    }
    Ok(f)
}

/// Runs one session on an established stream.
pub fn handle_session(stream: TcpStream, state: &ServerState) -> Result<SessionSummary> {
    stream.set_read_timeout(state.io_timeout)?;
    stream.set_write_timeout(state.io_timeout)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let outcome = session(&mut reader, &mut writer, state);
    if let Err(e) = &outcome {
        // best effort: the peer may already be gone
        let _ = write_frame(&mut writer, &Frame::error(&e.to_string()));
    }
    outcome
}

fn session<R: std::io::Read, W: std::io::Write>(reader: &mut R, writer: &mut W, state: &ServerState) -> Result<SessionSummary> {
    let hello = expect(read_frame(reader, state.max_payload)?, "HELLO")?;
    if hello.kind != MessageType::Hello {
        return Err(Error::Protocol(format!("expected HELLO, got {:?}", hello.kind)));
    }
    write_frame(writer, &Frame::new(MessageType::Hello, serde_json::to_vec(&state.info())?))?;

    let frame = expect(read_frame(reader, state.max_payload)?, "request")?;
    let request = Request::from_frame(&frame)?;
    let tokens = request.tokens(&state.large)?;
    let start = request.start(&state.codec)?;
    let plan = request.plan();
    let mut trace = Vec::new();
    let packet = run_cloud_phase(state.large.as_ref(), &plan, &state.schedule, &start, Some(tokens), &mut trace)?;
    let payload = packet.encode(request.precision());
    let summary = SessionSummary {
        rows: request.rows(),
        cloud_steps_run: trace.len(),
        cloud_flops: trace.len() as u64
            * plan.sampler.evals_per_step() as u64
            * request.rows() as u64
            * flops_count(&state.large.descriptor),
        payload_bytes: payload.len(),
    };
    write_frame(writer, &Frame::new(MessageType::Handoff, payload))?;

    match read_frame(reader, state.max_payload) {
        Ok(Some(f)) if f.kind == MessageType::Done => {}
        Ok(Some(f)) => warn!("expected DONE, got {:?}", f.kind),
        Ok(None) => {}
        Err(e) => warn!("session ended without DONE: {e}"),
    }
    Ok(summary)
}

pub struct Server {
    listener: TcpListener,
    state: Arc<ServerState>,
}

impl Server {
    pub fn bind<A: ToSocketAddrs>(addr: A, state: ServerState) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            state: Arc::new(state),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until `stop` is set; each connection gets its own thread.
    pub fn run(self, stop: Arc<AtomicBool>) -> Result<()> {
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let state = Arc::clone(&self.state);
            std::thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                match handle_session(stream, &state) {
                    Ok(s) => info!(
                        "{peer:?}: {} rows, {} cloud steps, {} cloud FLOPs, {} byte handoff",
                        s.rows, s.cloud_steps_run, s.cloud_flops, s.payload_bytes
                    ),
                    Err(e) => warn!("{peer:?}: {e}"),
                }
            });
        }
        Ok(())
    }

    /// Serves on a background thread.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || self.run(flag));
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) -> Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<()> {
        let Some(thread) = self.thread.take() else {
            return Ok(());
        };
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        thread
            .join()
            .map_err(|_| Error::Protocol("server thread panicked".into()))?
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
