//! Point-to-point proximity link standing in for the Bluetooth connection.
//!
//! Two backends share one contract: an in-process queue pair and a local
//! TCP socket pair. Frames are delivered in order, exactly once, until the
//! link dies; after that both ends only ever see [`LinkError::LinkDown`].
//!
//! On the wire a frame is a 4-byte big-endian payload length followed by the
//! payload.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::clock::SimClock;
use crate::protocol::{decode_message, encode_message, DecodeError, ProtocolMessage};

pub const FRAME_HEADER_LEN: usize = 4;
pub const MIN_FRAME_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error("link is down")]
    LinkDown,
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("frame of {len} bytes exceeds the {max} byte limit")]
    FrameTooLarge { len: usize, max: usize },
    #[error("invalid link parameters: {0}")]
    InvalidParams(String),
    #[error("link i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkParams {
    pub latency_ms: f64,
    /// Simulated seconds after pairing at which the link dies on its own.
    pub disconnect_at_s: Option<f64>,
    pub max_frame_bytes: usize,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            latency_ms: 20.0,
            disconnect_at_s: None,
            max_frame_bytes: 65_536,
        }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<(), LinkError> {
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(LinkError::InvalidParams("latency_ms must be >= 0".into()));
        }
        if self.max_frame_bytes < MIN_FRAME_LIMIT {
            return Err(LinkError::InvalidParams(format!(
                "max_frame_bytes must be >= {MIN_FRAME_LIMIT}"
            )));
        }
        if let Some(t) = self.disconnect_at_s {
            if !(t >= 0.0) {
                return Err(LinkError::InvalidParams("disconnect_at_s must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// One encoded protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(payload: impl Into<Vec<u8>>) -> Self {
        Self {
            payload: payload.into(),
        }
    }

    pub fn from_message(msg: &ProtocolMessage) -> Self {
        Self::new(encode_message(msg))
    }

    pub fn to_message(&self) -> Result<ProtocolMessage, DecodeError> {
        decode_message(&self.payload)
    }
}

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Incremental decoder for a byte stream of length-prefixed frames.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    max_frame_bytes: usize,
}

impl FrameDecoder {
    pub fn new(max_frame_bytes: usize) -> Self {
        Self {
            buf: Vec::new(),
            max_frame_bytes,
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `Ok(None)` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, LinkError> {
        if self.buf.len() < FRAME_HEADER_LEN {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..FRAME_HEADER_LEN].try_into().unwrap()) as usize;
        if len > self.max_frame_bytes {
            return Err(LinkError::FrameTooLarge {
                len,
                max: self.max_frame_bytes,
            });
        }
        if self.buf.len() < FRAME_HEADER_LEN + len {
            return Ok(None);
        }
        let payload = self.buf[FRAME_HEADER_LEN..FRAME_HEADER_LEN + len].to_vec();
        self.buf.drain(..FRAME_HEADER_LEN + len);
        Ok(Some(Frame { payload }))
    }
}

/// Either end of a paired link.
#[derive(Debug)]
pub enum Endpoint {
    Memory(MemoryEndpoint),
    Tcp(TcpEndpoint),
}

impl Endpoint {
    pub async fn send_frame(&self, frame: Frame) -> Result<(), LinkError> {
        match self {
            Endpoint::Memory(e) => e.send_frame(frame),
            Endpoint::Tcp(e) => e.send_frame(frame).await,
        }
    }

    /// Waits up to `timeout_s` simulated seconds; `None` waits indefinitely.
    pub async fn recv_frame(&self, timeout_s: Option<f64>) -> Result<Frame, LinkError> {
        match self {
            Endpoint::Memory(e) => e.recv_frame(timeout_s).await,
            Endpoint::Tcp(e) => e.recv_frame(timeout_s).await,
        }
    }

    pub async fn inject_disconnect(&self) {
        match self {
            Endpoint::Memory(e) => e.inject_disconnect(),
            Endpoint::Tcp(e) => e.inject_disconnect().await,
        }
    }

    pub fn is_alive(&self) -> bool {
        match self {
            Endpoint::Memory(e) => e.is_alive(),
            Endpoint::Tcp(e) => e.is_alive(),
        }
    }

    pub async fn send_message(&self, msg: &ProtocolMessage) -> Result<(), LinkError> {
        self.send_frame(Frame::from_message(msg)).await
    }
}

#[derive(Debug)]
struct MemoryInner {
    alive: bool,
    /// Index 0 holds frames bound for side 0.
    queues: [VecDeque<(Instant, Frame)>; 2],
}

#[derive(Debug)]
struct MemoryShared {
    inner: Mutex<MemoryInner>,
    notify: [Notify; 2],
    params: LinkParams,
    latency: std::time::Duration,
    dies_at: Option<Instant>,
}

impl MemoryShared {
    /// Marks the link dead (dropping undelivered frames) if it is dead.
    fn check_alive(&self, inner: &mut MemoryInner) -> bool {
        if inner.alive && self.dies_at.is_some_and(|t| Instant::now() >= t) {
            self.kill(inner);
        }
        inner.alive
    }

    fn kill(&self, inner: &mut MemoryInner) {
        inner.alive = false;
        inner.queues.iter_mut().for_each(VecDeque::clear);
        self.notify.iter().for_each(Notify::notify_waiters);
    }
}

#[derive(Debug)]
pub struct MemoryEndpoint {
    shared: Arc<MemoryShared>,
    side: usize,
    clock: SimClock,
}

/// Creates an in-process link. Latency and the scheduled disconnect are
/// measured on `clock`.
pub fn pair(params: LinkParams, clock: SimClock) -> Result<(Endpoint, Endpoint), LinkError> {
    params.validate()?;
    let dies_at = params
        .disconnect_at_s
        .map(|t| clock.instant_at(clock.now_s() + t));
    let shared = Arc::new(MemoryShared {
        inner: Mutex::new(MemoryInner {
            alive: true,
            queues: [VecDeque::new(), VecDeque::new()],
        }),
        notify: [Notify::new(), Notify::new()],
        latency: clock.wall_duration(params.latency_ms / 1000.0),
        params,
        dies_at,
    });
    let end = |side| {
        Endpoint::Memory(MemoryEndpoint {
            shared: shared.clone(),
            side,
            clock,
        })
    };
    Ok((end(0), end(1)))
}

impl MemoryEndpoint {
    fn send_frame(&self, frame: Frame) -> Result<(), LinkError> {
        let max = self.shared.params.max_frame_bytes;
        if frame.payload.len() > max {
            return Err(LinkError::FrameTooLarge {
                len: frame.payload.len(),
                max,
            });
        }
        let mut inner = self.shared.inner.lock().unwrap();
        if !self.shared.check_alive(&mut inner) {
            return Err(LinkError::LinkDown);
        }
        let peer = 1 - self.side;
        inner.queues[peer].push_back((Instant::now() + self.shared.latency, frame));
        drop(inner);
        self.shared.notify[peer].notify_waiters();
        Ok(())
    }

    async fn recv_frame(&self, timeout_s: Option<f64>) -> Result<Frame, LinkError> {
        let deadline = timeout_s.map(|t| self.clock.instant_at(self.clock.now_s() + t));
        loop {
            let notified = self.shared.notify[self.side].notified();
            tokio::pin!(notified);
            notified.as_mut().enable();

            let wake = {
                let mut inner = self.shared.inner.lock().unwrap();
                if !self.shared.check_alive(&mut inner) {
                    return Err(LinkError::LinkDown);
                }
                let now = Instant::now();
                let queue = &mut inner.queues[self.side];
                match queue.front() {
                    Some(&(at, _)) if at <= now => return Ok(queue.pop_front().unwrap().1),
                    _ => {}
                }
                if deadline.is_some_and(|d| now >= d) {
                    return Err(LinkError::Timeout);
                }
                [queue.front().map(|f| f.0), self.shared.dies_at, deadline]
                    .into_iter()
                    .flatten()
                    .min()
            };
            match wake {
                Some(at) => {
                    tokio::select! {
                        _ = &mut notified => {}
                        _ = tokio::time::sleep_until(at) => {}
                    }
                }
                None => notified.await,
            }
        }
    }

    fn inject_disconnect(&self) {
        let mut inner = self.shared.inner.lock().unwrap();
        if inner.alive {
            self.shared.kill(&mut inner);
        }
    }

    fn is_alive(&self) -> bool {
        let mut inner = self.shared.inner.lock().unwrap();
        self.shared.check_alive(&mut inner)
    }
}

#[derive(Debug)]
pub struct TcpEndpoint {
    writer: tokio::sync::Mutex<Option<OwnedWriteHalf>>,
    frames: tokio::sync::Mutex<mpsc::UnboundedReceiver<Frame>>,
    alive: Arc<AtomicBool>,
    reader: JoinHandle<()>,
    params: LinkParams,
    clock: SimClock,
    dies_at: Option<Instant>,
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

pub async fn connect_tcp(
    addr: SocketAddr,
    params: LinkParams,
    clock: SimClock,
) -> Result<Endpoint, LinkError> {
    params.validate()?;
    let stream = TcpStream::connect(addr)
        .await
        .map_err(|e| LinkError::Io(e.to_string()))?;
    Ok(TcpEndpoint::from_stream(stream, params, clock))
}

/// Accepting side of the TCP backend.
pub struct TcpLinkListener {
    listener: TcpListener,
    params: LinkParams,
    clock: SimClock,
}

impl TcpLinkListener {
    pub async fn bind(addr: SocketAddr, params: LinkParams, clock: SimClock) -> Result<Self, LinkError> {
        params.validate()?;
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|e| LinkError::Io(e.to_string()))?;
        Ok(Self {
            listener,
            params,
            clock,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, LinkError> {
        self.listener
            .local_addr()
            .map_err(|e| LinkError::Io(e.to_string()))
    }

    pub async fn accept(&self) -> Result<Endpoint, LinkError> {
        let (stream, _) = self
            .listener
            .accept()
            .await
            .map_err(|e| LinkError::Io(e.to_string()))?;
        Ok(TcpEndpoint::from_stream(stream, self.params, self.clock))
    }
}

impl TcpEndpoint {
    fn from_stream(stream: TcpStream, params: LinkParams, clock: SimClock) -> Endpoint {
        let _ = stream.set_nodelay(true);
        let (mut read, write) = stream.into_split();
        let (tx, rx) = mpsc::unbounded_channel();
        let alive = Arc::new(AtomicBool::new(true));
        let reader_alive = alive.clone();
        let max = params.max_frame_bytes;
        let reader = tokio::spawn(async move {
            let mut header = [0u8; FRAME_HEADER_LEN];
            loop {
                if read.read_exact(&mut header).await.is_err() {
                    break;
                }
                let len = u32::from_be_bytes(header) as usize;
                if len > max {
                    break;
                }
                let mut payload = vec![0u8; len];
                if read.read_exact(&mut payload).await.is_err() {
                    break;
                }
                if tx.send(Frame { payload }).is_err() {
                    break;
                }
            }
            reader_alive.store(false, Ordering::SeqCst);
        });
        let dies_at = params
            .disconnect_at_s
            .map(|t| clock.instant_at(clock.now_s() + t));
        Endpoint::Tcp(TcpEndpoint {
            writer: tokio::sync::Mutex::new(Some(write)),
            frames: tokio::sync::Mutex::new(rx),
            alive,
            reader,
            params,
            clock,
            dies_at,
        })
    }

    fn is_alive(&self) -> bool {
        if self.dies_at.is_some_and(|t| Instant::now() >= t) {
            self.alive.store(false, Ordering::SeqCst);
        }
        self.alive.load(Ordering::SeqCst)
    }

    async fn send_frame(&self, frame: Frame) -> Result<(), LinkError> {
        let max = self.params.max_frame_bytes;
        if frame.payload.len() > max {
            return Err(LinkError::FrameTooLarge {
                len: frame.payload.len(),
                max,
            });
        }
        if !self.is_alive() {
            self.inject_disconnect().await;
            return Err(LinkError::LinkDown);
        }
        let mut writer = self.writer.lock().await;
        let Some(w) = writer.as_mut() else {
            return Err(LinkError::LinkDown);
        };
        if w.write_all(&encode_frame(&frame.payload)).await.is_err() {
            self.alive.store(false, Ordering::SeqCst);
            return Err(LinkError::LinkDown);
        }
        Ok(())
    }

    async fn recv_frame(&self, timeout_s: Option<f64>) -> Result<Frame, LinkError> {
        if !self.is_alive() {
            self.inject_disconnect().await;
            return Err(LinkError::LinkDown);
        }
        let limit = [
            timeout_s.map(|t| self.clock.instant_at(self.clock.now_s() + t)),
            self.dies_at,
        ]
        .into_iter()
        .flatten()
        .min();
        let mut frames = self.frames.lock().await;
        let got = match limit {
            Some(at) => match tokio::time::timeout_at(at, frames.recv()).await {
                Ok(f) => f,
                Err(_) if self.is_alive() => return Err(LinkError::Timeout),
                Err(_) => None,
            },
            None => frames.recv().await,
        };
        match got {
            Some(frame) if self.is_alive() => Ok(frame),
            _ => {
                drop(frames);
                self.inject_disconnect().await;
                Err(LinkError::LinkDown)
            }
        }
    }

    async fn inject_disconnect(&self) {
        self.alive.store(false, Ordering::SeqCst);
        self.reader.abort();
        if let Some(mut w) = self.writer.lock().await.take() {
            let _ = w.shutdown().await;
        }
    }
}
