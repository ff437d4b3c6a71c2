//! Byte-stream transport: length-prefixed frames over TCP, sender-side
//! token-bucket bandwidth pacing, and links whose reader/writer threads keep
//! transfers progressing while the caller computes.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Frame
// ---------------------------------------------------------------------------

/// Wire header: length u32 | kind u8 | collective_id u64 | origin u16 |
/// step u16, all little-endian; `length` counts payload bytes only.
pub const FRAME_HEADER_LEN: usize = 17;

/// Refuse frames beyond this size rather than trusting a corrupt length field.
const MAX_PAYLOAD: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Control = 0,
    TensorFragment = 1,
    Trace = 2,
}

impl FrameKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Control),
            1 => Some(Self::TensorFragment),
            2 => Some(Self::Trace),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub collective_id: u64,
    pub origin_rank: u16,
    pub step: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn control(payload: Vec<u8>) -> Self {
        Self { kind: FrameKind::Control, collective_id: 0, origin_rank: 0, step: 0, payload }
    }

    pub fn fragment(collective_id: u64, origin_rank: u16, step: u16, payload: Vec<u8>) -> Self {
        Self { kind: FrameKind::TensorFragment, collective_id, origin_rank, step, payload }
    }

    pub fn encode_header(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut h = [0u8; FRAME_HEADER_LEN];
        h[0..4].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        h[4] = self.kind as u8;
        h[5..13].copy_from_slice(&self.collective_id.to_le_bytes());
        h[13..15].copy_from_slice(&self.origin_rank.to_le_bytes());
        h[15..17].copy_from_slice(&self.step.to_le_bytes());
        h
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode_header())?;
        w.write_all(&self.payload)
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Self> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        r.read_exact(&mut header)?;
        let len = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("frame payload of {len} bytes exceeds the {MAX_PAYLOAD} limit"),
            ));
        }
        let kind = FrameKind::from_u8(header[4]).ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidData, format!("unknown frame kind {}", header[4]))
        })?;
        let collective_id = u64::from_le_bytes(header[5..13].try_into().unwrap());
        let origin_rank = u16::from_le_bytes(header[13..15].try_into().unwrap());
        let step = u16::from_le_bytes(header[15..17].try_into().unwrap());
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Ok(Self { kind, collective_id, origin_rank, step, payload })
    }
}

// ---------------------------------------------------------------------------
// Token bucket
// ---------------------------------------------------------------------------

/// Bucket depth in bytes. Writes are paced in sub-chunks no larger than this.
pub const BUCKET_CAPACITY_BYTES: f64 = 64.0 * 1024.0;
const PACING_CHUNK: usize = 16 * 1024;

/// Sender-side pacer: tokens accrue at the configured rate up to the bucket
/// capacity and each outgoing chunk consumes its size. The bucket starts
/// empty, so even the first bytes of a transfer are paced.
pub struct TokenBucket {
    rate_bytes_per_sec: f64,
    tokens: f64,
    last_refill: Instant,
}

impl TokenBucket {
    pub fn new(rate_bits_per_sec: u64) -> Self {
        Self {
            rate_bytes_per_sec: rate_bits_per_sec as f64 / 8.0,
            tokens: 0.0,
            last_refill: Instant::now(),
        }
    }

    fn refill(&mut self) {
        let now = Instant::now();
        let dt = now.duration_since(self.last_refill).as_secs_f64();
        self.last_refill = now;
        self.tokens = (self.tokens + dt * self.rate_bytes_per_sec).min(BUCKET_CAPACITY_BYTES);
    }

    /// Blocks until `n` tokens are available, then consumes them.
    pub fn take(&mut self, n: usize) {
        let need = n as f64;
        loop {
            self.refill();
            if self.tokens >= need {
                self.tokens -= need;
                return;
            }
            let deficit = need - self.tokens;
            let wait = deficit / self.rate_bytes_per_sec;
            thread::sleep(Duration::from_secs_f64(wait.clamp(0.000_2, 0.05)));
        }
    }
}

// ---------------------------------------------------------------------------
// Link
// ---------------------------------------------------------------------------

enum Outbound {
    Frame { frame: Frame, done: mpsc::SyncSender<io::Result<()>> },
    Shutdown,
}

/// Completion handle for a posted send; the transfer proceeds on the writer
/// thread while the caller computes.
pub struct SendTicket {
    done: mpsc::Receiver<io::Result<()>>,
    peer_rank: usize,
}

impl SendTicket {
    pub fn wait(self, timeout: Duration) -> Result<()> {
        match self.done.recv_timeout(timeout) {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(Error::Collective {
                primitive: "send",
                rank: Some(self.peer_rank),
                detail: e.to_string(),
            }),
            Err(_) => Err(Error::PeerTimeout {
                rank: self.peer_rank,
                waited_ms: timeout.as_millis() as u64,
            }),
        }
    }
}

/// One direction-agnostic connection to a peer. Outbound frames are handed to
/// a writer thread (which applies bandwidth pacing); inbound frames are
/// parsed by a reader thread into a channel the caller drains on demand.
pub struct Link {
    peer_rank: usize,
    out_tx: mpsc::Sender<Outbound>,
    in_rx: mpsc::Receiver<io::Result<Frame>>,
    /// Payload bytes of tensor fragments actually written to the socket.
    fragment_bytes_sent: Arc<AtomicU64>,
    /// Pacing limit in bits/s; 0 means unlimited. Writable at runtime.
    rate_bps: Arc<AtomicU64>,
    stream: TcpStream,
    writer: Option<thread::JoinHandle<()>>,
    reader: Option<thread::JoinHandle<()>>,
}

impl Link {
    pub fn new(stream: TcpStream, peer_rank: usize, rate_bps: Option<u64>) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let fragment_bytes_sent = Arc::new(AtomicU64::new(0));
        let rate = Arc::new(AtomicU64::new(rate_bps.unwrap_or(0)));

        let mut write_half = stream.try_clone()?;
        let (out_tx, out_rx) = mpsc::channel::<Outbound>();
        let counter = Arc::clone(&fragment_bytes_sent);
        let writer_rate = Arc::clone(&rate);
        let writer = thread::spawn(move || {
            let mut bucket: Option<(u64, TokenBucket)> = None;
            while let Ok(msg) = out_rx.recv() {
                let (frame, done) = match msg {
                    Outbound::Frame { frame, done } => (frame, done),
                    Outbound::Shutdown => break,
                };
                let bps = writer_rate.load(Ordering::Relaxed);
                if bps == 0 {
                    bucket = None;
                } else {
                    match &bucket {
                        Some((current, _)) if *current == bps => {}
                        _ => bucket = Some((bps, TokenBucket::new(bps))),
                    }
                }
                let result = write_frame(&mut write_half, &frame, bucket.as_mut().map(|(_, b)| b));
                if result.is_ok() && frame.kind == FrameKind::TensorFragment {
                    counter.fetch_add(frame.payload.len() as u64, Ordering::Relaxed);
                }
                let failed = result.is_err();
                let _ = done.send(result);
                if failed {
                    break;
                }
            }
        });

        let mut read_half = stream.try_clone()?;
        let (in_tx, in_rx) = mpsc::channel::<io::Result<Frame>>();
        let reader = thread::spawn(move || loop {
            match Frame::read_from(&mut read_half) {
                Ok(frame) => {
                    if in_tx.send(Ok(frame)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = in_tx.send(Err(e));
                    break;
                }
            }
        });

        Ok(Self {
            peer_rank,
            out_tx,
            in_rx,
            fragment_bytes_sent,
            rate_bps: rate,
            stream,
            writer: Some(writer),
            reader: Some(reader),
        })
    }

    pub fn peer_rank(&self) -> usize {
        self.peer_rank
    }

    pub fn fragment_bytes_sent(&self) -> u64 {
        self.fragment_bytes_sent.load(Ordering::Relaxed)
    }

    pub fn set_bandwidth(&self, rate_bps: Option<u64>) {
        self.rate_bps.store(rate_bps.unwrap_or(0), Ordering::Relaxed);
    }

    /// Posts a frame for transmission and returns immediately.
    pub fn post(&self, frame: Frame) -> SendTicket {
        let (done_tx, done_rx) = mpsc::sync_channel(1);
        let ticket = SendTicket { done: done_rx, peer_rank: self.peer_rank };
        if self.out_tx.send(Outbound::Frame { frame, done: done_tx }).is_err() {
            // Writer already gone; the ticket will report the closed link.
        }
        ticket
    }

    /// Posts a frame and waits for it to hit the socket.
    pub fn send(&self, frame: Frame, timeout: Duration) -> Result<()> {
        self.post(frame).wait(timeout)
    }

    pub fn recv(&self, timeout: Duration) -> Result<Frame> {
        match self.in_rx.recv_timeout(timeout) {
            Ok(Ok(frame)) => Ok(frame),
            Ok(Err(e)) => Err(Error::Collective {
                primitive: "recv",
                rank: Some(self.peer_rank),
                detail: if e.kind() == io::ErrorKind::UnexpectedEof {
                    "peer closed the connection".into()
                } else {
                    e.to_string()
                },
            }),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(Error::PeerTimeout {
                rank: self.peer_rank,
                waited_ms: timeout.as_millis() as u64,
            }),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(Error::Collective {
                primitive: "recv",
                rank: Some(self.peer_rank),
                detail: "link reader stopped".into(),
            }),
        }
    }

    /// Non-blocking check for an already-buffered frame.
    pub fn try_recv(&self) -> Option<Result<Frame>> {
        match self.in_rx.try_recv() {
            Ok(Ok(frame)) => Some(Ok(frame)),
            Ok(Err(e)) => Some(Err(Error::Collective {
                primitive: "recv",
                rank: Some(self.peer_rank),
                detail: e.to_string(),
            })),
            Err(_) => None,
        }
    }
}

fn write_frame(
    w: &mut TcpStream,
    frame: &Frame,
    mut bucket: Option<&mut TokenBucket>,
) -> io::Result<()> {
    let header = frame.encode_header();
    if let Some(b) = bucket.as_deref_mut() {
        b.take(header.len());
    }
    w.write_all(&header)?;
    for chunk in frame.payload.chunks(PACING_CHUNK) {
        if let Some(b) = bucket.as_deref_mut() {
            b.take(chunk.len());
        }
        w.write_all(chunk)?;
    }
    Ok(())
}

impl Drop for Link {
    fn drop(&mut self) {
        let _ = self.out_tx.send(Outbound::Shutdown);
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}
