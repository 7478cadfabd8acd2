//! Message delivery between the server loop and client workers.
//!
//! Socket frames: magic `FDA1`, one type byte, an 8-byte little-endian
//! payload length, then the payload. Arrays are a 4-byte little-endian count
//! followed by little-endian `f64`s. A client announces itself with an upload
//! carrying two empty arrays.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::{Broadcast, RoundMessage, Upload};
use super::runner::ClientWorker;
use crate::error::{FedError, Result};
use crate::linalg::ParamVector;

const MAGIC: &[u8; 4] = b"FDA1";
const MSG_BROADCAST: u8 = 1;
const MSG_UPLOAD: u8 = 2;
const MSG_SHUTDOWN: u8 = 3;
/// Refuse frames above 1 GiB.
const MAX_PAYLOAD: u64 = 1 << 30;

/// Synchronous round delivery. Uploads come back sorted by client id.
pub trait Transport {
    fn exchange(&mut self, clients: &[usize], msg: &Broadcast) -> Result<Vec<Upload>>;
    fn shutdown(&mut self) -> Result<()>;
}

/// Calls the workers directly, spreading sampled clients over scoped threads.
pub struct InMemoryTransport {
    workers: Vec<Arc<ClientWorker>>,
    threads: usize,
}

impl InMemoryTransport {
    pub fn new(workers: Vec<Arc<ClientWorker>>) -> Self {
        let threads = thread::available_parallelism().map_or(1, |n| n.get());
        InMemoryTransport { workers, threads }
    }
}

impl Transport for InMemoryTransport {
    fn exchange(&mut self, clients: &[usize], msg: &Broadcast) -> Result<Vec<Upload>> {
        if let Some(&bad) = clients.iter().find(|&&k| k >= self.workers.len()) {
            return Err(FedError::Protocol(format!("no worker for client {bad}")));
        }
        let chunk = clients.len().div_ceil(self.threads.max(1)).max(1);
        let workers = &self.workers;
        let mut uploads = thread::scope(|s| {
            let handles: Vec<_> = clients
                .chunks(chunk)
                .map(|ids| s.spawn(move || ids.iter().map(|&k| workers[k].handle(msg)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(clients.len());
            for h in handles {
                out.extend(h.join().map_err(|_| FedError::Protocol("client worker panicked".into()))??);
            }
            Ok::<_, FedError>(out)
        })?;
        uploads.sort_by_key(|u| u.client);
        Ok(uploads)
    }

    fn shutdown(&mut self) -> Result<()> {
        Ok(())
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    handle: Option<JoinHandle<Result<()>>>,
}

/// One loopback TCP connection per client, each served by its own thread.
pub struct SocketTransport {
    conns: Vec<Connection>,
}

impl SocketTransport {
    pub fn spawn(workers: Vec<Arc<ClientWorker>>) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let mut handles: Vec<Option<JoinHandle<Result<()>>>> = workers
            .iter()
            .map(|w| {
                let w = Arc::clone(w);
                Some(thread::spawn(move || client_loop(&w, addr)))
            })
            .collect();
        let mut slots: Vec<Option<Connection>> = (0..workers.len()).map(|_| None).collect();
        for _ in 0..workers.len() {
            let (stream, _) = listener.accept()?;
            stream.set_nodelay(true)?;
            let mut reader = BufReader::new(stream.try_clone()?);
            let hello = match read_frame(&mut reader)? {
                RoundMessage::Upload(u) if u.z.dim() == 0 && u.nu.dim() == 0 => u.client,
                other => return Err(FedError::Protocol(format!("expected client hello, got {other:?}"))),
            };
            let slot = slots
                .get_mut(hello)
                .ok_or_else(|| FedError::Protocol(format!("hello from unknown client {hello}")))?;
            if slot.is_some() {
                return Err(FedError::Protocol(format!("client {hello} connected twice")));
            }
            *slot = Some(Connection { reader, writer: BufWriter::new(stream), handle: handles[hello].take() });
        }
        let conns = slots.into_iter().map(|c| c.expect("every client said hello")).collect();
        Ok(SocketTransport { conns })
    }

    /// Surfaces the worker's own error when its connection breaks.
    fn fail(&mut self, client: usize, err: FedError) -> FedError {
        if let Some(h) = self.conns[client].handle.take() {
            if let Ok(Err(e)) = h.join() {
                return e;
            }
        }
        err
    }
}

fn client_loop(worker: &ClientWorker, addr: std::net::SocketAddr) -> Result<()> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let hello = Upload { client: worker.id, z: ParamVector::zeros(0), nu: ParamVector::zeros(0) };
    write_frame(&mut writer, &RoundMessage::Upload(hello))?;
    loop {
        match read_frame(&mut reader)? {
            RoundMessage::Broadcast(b) => {
                let up = worker.handle(&b)?;
                write_frame(&mut writer, &RoundMessage::Upload(up))?;
            }
            RoundMessage::Shutdown => return Ok(()),
            RoundMessage::Upload(_) => return Err(FedError::Protocol("client received an upload".into())),
        }
    }
}

impl Transport for SocketTransport {
    fn exchange(&mut self, clients: &[usize], msg: &Broadcast) -> Result<Vec<Upload>> {
        let frame = RoundMessage::Broadcast(msg.clone());
        for &k in clients {
            let conn = self
                .conns
                .get_mut(k)
                .ok_or_else(|| FedError::Protocol(format!("no connection for client {k}")))?;
            if let Err(e) = write_frame(&mut conn.writer, &frame) {
                return Err(self.fail(k, e));
            }
        }
        let mut uploads = Vec::with_capacity(clients.len());
        for &k in clients {
            match read_frame(&mut self.conns[k].reader) {
                Ok(RoundMessage::Upload(u)) if u.client == k => uploads.push(u),
                Ok(other) => return Err(FedError::Protocol(format!("client {k} sent {other:?}"))),
                Err(e) => return Err(self.fail(k, e)),
            }
        }
        Ok(uploads)
    }

    fn shutdown(&mut self) -> Result<()> {
        let mut first_err = None;
        for conn in &mut self.conns {
            let _ = write_frame(&mut conn.writer, &RoundMessage::Shutdown);
            if let Some(h) = conn.handle.take() {
                match h.join() {
                    Ok(Err(e)) => {
                        first_err.get_or_insert(e);
                    }
                    Err(_) => {
                        first_err.get_or_insert(FedError::Protocol("client thread panicked".into()));
                    }
                    Ok(Ok(())) => {}
                }
            }
        }
        first_err.map_or(Ok(()), Err)
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        if self.conns.iter().any(|c| c.handle.is_some()) {
            let _ = self.shutdown();
        }
    }
}

fn put_array(buf: &mut Vec<u8>, v: &[f64]) {
    buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn encode(msg: &RoundMessage) -> Vec<u8> {
    let (kind, payload) = match msg {
        RoundMessage::Broadcast(b) => {
            let mut p = Vec::new();
            put_array(&mut p, b.x.as_slice());
            put_array(&mut p, b.nu.as_slice());
            put_array(&mut p, &b.h_diag);
            p.extend_from_slice(&b.round.to_le_bytes());
            p.extend_from_slice(&b.step.to_le_bytes());
            (MSG_BROADCAST, p)
        }
        RoundMessage::Upload(u) => {
            let mut p = Vec::new();
            put_array(&mut p, u.z.as_slice());
            put_array(&mut p, u.nu.as_slice());
            p.extend_from_slice(&(u.client as u64).to_le_bytes());
            (MSG_UPLOAD, p)
        }
        RoundMessage::Shutdown => (MSG_SHUTDOWN, Vec::new()),
    };
    let mut out = Vec::with_capacity(13 + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FedError::Protocol("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self) -> Result<Vec<f64>> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| FedError::Protocol("array too long".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FedError::Protocol(format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn vector(v: Vec<f64>) -> Result<ParamVector> {
    ParamVector::new(v).map_err(|_| FedError::Protocol("non-finite value on the wire".into()))
}

pub(crate) fn decode(kind: u8, payload: &[u8]) -> Result<RoundMessage> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let msg = match kind {
        MSG_BROADCAST => {
            let x = vector(c.array()?)?;
            let nu = vector(c.array()?)?;
            let h_diag = c.array()?;
            let round = c.u64()?;
            let step = c.u64()?;
            RoundMessage::Broadcast(Broadcast { x, nu, h_diag, round, step })
        }
        MSG_UPLOAD => {
            let z = vector(c.array()?)?;
            let nu = vector(c.array()?)?;
            let client = usize::try_from(c.u64()?).map_err(|_| FedError::Protocol("client id overflow".into()))?;
            RoundMessage::Upload(Upload { client, z, nu })
        }
        MSG_SHUTDOWN => RoundMessage::Shutdown,
        other => return Err(FedError::Protocol(format!("unknown message type {other}"))),
    };
    c.finish()?;
    Ok(msg)
}

fn write_frame<W: Write>(w: &mut W, msg: &RoundMessage) -> Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

fn read_frame<R: Read>(r: &mut R) -> Result<RoundMessage> {
    let mut header = [0u8; 13];
    r.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(FedError::Protocol("bad frame magic".into()));
    }
    let len = u64::from_le_bytes(header[5..].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(FedError::Protocol(format!("frame of {len} bytes exceeds the limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    decode(header[4], &payload)
}
