//! Real transport over loopback TCP. Every ordered node pair gets its own
//! connection direction; each packet travels as `[u32 len][packet bytes]`
//! with the same packet encoding the simulator uses.
//!
//! Each node runs on its own thread and owns its core and memory; a writer
//! and a reader thread per link hand packets to and from node mailboxes.
//! Timings taken over this transport are wall-clock.

use std::collections::BTreeMap;
use std::io::{self, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use bytes::Bytes;
use thiserror::Error;

use crate::addressing::{resolve_range, GlobalAddress, NodeId, SegmentLayout};
use crate::am::{Command, CommandKind, CoreState, Effect, Handle, HandlerFn, QueueClass};
use crate::bench::{BenchOp, BenchRow, MAX_TRANSFER};
use crate::config::JobConfig;
use crate::memory::{LocalRange, NodeMemory, Region};
use crate::wire::{encode_message, packetize, Packet};

#[derive(Debug, Error)]
pub enum SocketError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("node {0} is not part of this job")]
    BadNode(NodeId),
    #[error("{0}")]
    Remote(String),
    #[error("node thread exited")]
    Closed,
    #[error("timed out waiting for delivery")]
    Timeout,
}

type Reply<T> = Sender<Result<T, String>>;

enum Mail {
    Host { command: Command, done: Reply<()> },
    Packet { from: NodeId, bytes: Bytes },
    Read { range: LocalRange, reply: Reply<Vec<u8>> },
    Write { offset: u64, data: Vec<u8>, reply: Reply<()> },
    Register { opcode: u8, handler: HandlerFn, reply: Reply<()> },
    Shutdown,
}

/// Count of messages a node has delivered, for waiting on one-sided
/// operations from outside the node.
#[derive(Default)]
struct Progress {
    delivered: Mutex<u64>,
    changed: Condvar,
}

impl Progress {
    fn bump(&self) {
        *self.delivered.lock().expect("progress lock") += 1;
        self.changed.notify_all();
    }

    fn count(&self) -> u64 {
        *self.delivered.lock().expect("progress lock")
    }

    fn wait_past(&self, seen: u64, timeout: Duration) -> bool {
        let guard = self.delivered.lock().expect("progress lock");
        let (guard, _) = self.changed.wait_timeout_while(guard, timeout, |d| *d <= seen).expect("progress lock");
        *guard > seen
    }
}

struct Node {
    id: NodeId,
    core: CoreState,
    memory: NodeMemory,
    mtu: usize,
    links: BTreeMap<NodeId, Sender<Bytes>>,
    self_mailbox: Sender<Mail>,
    progress: Arc<Progress>,
    waiting: BTreeMap<Handle, Reply<()>>,
    next_handle: u64,
}

impl Node {
    fn run(mut self, mailbox: Receiver<Mail>) {
        for mail in mailbox {
            match mail {
                Mail::Host { command, done } => self.submit(command, done),
                Mail::Packet { from, bytes } => {
                    if let Err(e) = self.receive(from, bytes) {
                        log::error!("node {}: {e}", self.id);
                        for (_, w) in std::mem::take(&mut self.waiting) {
                            let _ = w.send(Err(e.clone()));
                        }
                    }
                }
                Mail::Read { range, reply } => {
                    let _ = reply.send(self.memory.view(range).map(<[u8]>::to_vec).map_err(|e| e.to_string()));
                }
                Mail::Write { offset, data, reply } => {
                    let _ = reply.send(self.memory.dma_write(Region::Shared, offset, &data).map_err(|e| e.to_string()));
                }
                Mail::Register { opcode, handler, reply } => {
                    let _ = reply.send(self.core.register_handler(opcode, handler).map_err(|e| e.to_string()));
                }
                Mail::Shutdown => break,
            }
        }
    }

    fn submit(&mut self, command: Command, done: Reply<()>) {
        let handle = Handle { node: self.id, id: self.next_handle };
        self.next_handle += 1;
        match self.core.submit_command(command, QueueClass::Host, Some(handle)) {
            Ok(()) => {
                self.waiting.insert(handle, done);
                if let Err(e) = self.pump() {
                    log::error!("node {}: {e}", self.id);
                }
            }
            Err(e) => {
                let _ = done.send(Err(e.to_string()));
            }
        }
    }

    fn pump(&mut self) -> Result<(), String> {
        while let Some((_, queued)) = self.core.schedule() {
            let handle = queued.handle;
            let out = match self.core.sequence(queued, &self.memory) {
                Ok(out) => out,
                Err(e) => {
                    if let Some(w) = handle.and_then(|h| self.waiting.remove(&h)) {
                        let _ = w.send(Err(e.to_string()));
                    }
                    continue;
                }
            };
            let message = encode_message(&out.header, &out.payload).map_err(|e| e.to_string())?;
            let packets = packetize(&message, out.seq, self.mtu).map_err(|e| e.to_string())?;
            let dst = out.header.dst;
            for p in packets {
                let bytes = p.to_bytes();
                if dst == self.id {
                    let _ = self.self_mailbox.send(Mail::Packet { from: self.id, bytes });
                } else {
                    let link = self.links.get(&dst).ok_or_else(|| format!("no link to node {dst}"))?;
                    link.send(bytes).map_err(|_| format!("link to node {dst} closed"))?;
                }
            }
            if out.kind != CommandKind::Get {
                if let Some(w) = handle.and_then(|h| self.waiting.remove(&h)) {
                    let _ = w.send(Ok(()));
                }
            }
        }
        Ok(())
    }

    fn receive(&mut self, from: NodeId, bytes: Bytes) -> Result<(), String> {
        let packet = Packet::from_bytes(bytes).map_err(|e| e.to_string())?;
        let Some((header, payload)) = self.core.receive_packet(from, packet).map_err(|e| e.to_string())? else {
            return Ok(());
        };
        let effects = self.core.on_message(&header, &payload, &mut self.memory).map_err(|e| e.to_string())?;
        for effect in effects {
            if let Effect::GetCompleted { handle: Some(h), .. } = effect {
                if let Some(w) = self.waiting.remove(&h) {
                    let _ = w.send(Ok(()));
                }
            }
        }
        self.progress.bump();
        self.pump()
    }
}

fn writer(stream: TcpStream, frames: Receiver<Bytes>) {
    // The reader holds a clone of this socket, so dropping ours would not
    // close it; shut the write side down explicitly so the peer sees EOF.
    let _close = CloseOnDrop(stream.try_clone().ok());
    let mut out = BufWriter::new(stream);
    let write = |out: &mut BufWriter<TcpStream>, b: &Bytes| -> io::Result<()> {
        out.write_all(&(b.len() as u32).to_le_bytes())?;
        out.write_all(b)
    };
    while let Ok(first) = frames.recv() {
        if write(&mut out, &first).is_err() {
            return;
        }
        while let Ok(more) = frames.try_recv() {
            if write(&mut out, &more).is_err() {
                return;
            }
        }
        if out.flush().is_err() {
            return;
        }
    }
}

struct CloseOnDrop(Option<TcpStream>);

impl Drop for CloseOnDrop {
    fn drop(&mut self) {
        if let Some(s) = &self.0 {
            let _ = s.shutdown(std::net::Shutdown::Write);
        }
    }
}

fn reader(mut stream: TcpStream, from: NodeId, mailbox: Sender<Mail>) {
    let mut len = [0u8; 4];
    while stream.read_exact(&mut len).is_ok() {
        let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
        if stream.read_exact(&mut body).is_err() {
            return;
        }
        if mailbox.send(Mail::Packet { from, bytes: Bytes::from(body) }).is_err() {
            return;
        }
    }
}

fn connected_pair() -> io::Result<(TcpStream, TcpStream)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let a = TcpStream::connect(listener.local_addr()?)?;
    let (b, _) = listener.accept()?;
    a.set_nodelay(true)?;
    b.set_nodelay(true)?;
    Ok((a, b))
}

/// A job whose nodes talk over loopback TCP, fully connected.
pub struct SocketJob {
    layout: SegmentLayout,
    mailboxes: Vec<Sender<Mail>>,
    progress: Vec<Arc<Progress>>,
    threads: Vec<JoinHandle<()>>,
    timeout: Duration,
}

impl SocketJob {
    pub fn start(config: &JobConfig) -> Result<Self, SocketError> {
        config.validate().map_err(SocketError::Remote)?;
        let n = config.nodes;
        let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::channel::<Mail>()).unzip();
        let mut links: Vec<BTreeMap<NodeId, Sender<Bytes>>> = vec![BTreeMap::new(); n];
        let mut threads = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let (si, sj) = connected_pair()?;
                for (from, to, stream) in [(i, j, si), (j, i, sj)] {
                    let (tx, rx) = mpsc::channel();
                    links[from].insert(NodeId(to as u16), tx);
                    let read_half = stream.try_clone()?;
                    threads.push(std::thread::spawn(move || writer(stream, rx)));
                    // This end's reader receives what the other end writes.
                    let mailbox = senders[from].clone();
                    let peer = NodeId(to as u16);
                    threads.push(std::thread::spawn(move || reader(read_half, peer, mailbox)));
                }
            }
        }
        let progress: Vec<_> = (0..n).map(|_| Arc::new(Progress::default())).collect();
        for (i, (rx, node_links)) in receivers.into_iter().zip(links).enumerate() {
            let id = NodeId(i as u16);
            let node = Node {
                id,
                core: CoreState::new(id, n, config.core.queue_depth),
                memory: NodeMemory::new(&config.segment, config.core.scratch_size),
                mtu: config.packet_size,
                links: node_links,
                self_mailbox: senders[i].clone(),
                progress: progress[i].clone(),
                waiting: BTreeMap::new(),
                next_handle: 0,
            };
            threads.push(std::thread::spawn(move || node.run(rx)));
        }
        Ok(SocketJob { layout: config.segment, mailboxes: senders, progress, threads, timeout: Duration::from_secs(30) })
    }

    fn mailbox(&self, node: NodeId) -> Result<&Sender<Mail>, SocketError> {
        self.mailboxes.get(node.index()).ok_or(SocketError::BadNode(node))
    }

    fn call<T>(&self, node: NodeId, mail: impl FnOnce(Reply<T>) -> Mail) -> Result<T, SocketError> {
        let (tx, rx) = mpsc::channel();
        self.mailbox(node)?.send(mail(tx)).map_err(|_| SocketError::Closed)?;
        match rx.recv_timeout(self.timeout) {
            Ok(r) => r.map_err(SocketError::Remote),
            Err(mpsc::RecvTimeoutError::Timeout) => Err(SocketError::Timeout),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(SocketError::Closed),
        }
    }

    pub fn write_shared(&self, node: NodeId, offset: u64, data: &[u8]) -> Result<(), SocketError> {
        self.call(node, |reply| Mail::Write { offset, data: data.to_vec(), reply })
    }

    pub fn read_shared(&self, node: NodeId, offset: u64, len: u64) -> Result<Vec<u8>, SocketError> {
        self.call(node, |reply| Mail::Read { range: LocalRange::shared(offset, len), reply })
    }

    pub fn register_handler(&self, node: NodeId, opcode: u8, handler: HandlerFn) -> Result<(), SocketError> {
        self.call(node, |reply| Mail::Register { opcode, handler, reply })
    }

    /// Puts `source` to `dest` and blocks until the destination node has
    /// delivered it.
    pub fn put(&self, node: NodeId, dest: GlobalAddress, source: LocalRange) -> Result<(), SocketError> {
        resolve_range(dest, source.len, &self.layout).map_err(|e| SocketError::Remote(e.to_string()))?;
        let progress = self.progress.get(dest.node.index()).ok_or(SocketError::BadNode(dest.node))?;
        let seen = progress.count();
        let command = Command::Put { dst: dest.node, source, dest_offset: dest.offset, reply_to: None };
        self.call(node, |done| Mail::Host { command, done })?;
        if progress.wait_past(seen, self.timeout) {
            Ok(())
        } else {
            Err(SocketError::Timeout)
        }
    }

    /// Blocks until the reply data has been written locally.
    pub fn get(&self, node: NodeId, src: GlobalAddress, len: u64, dest_offset: u64) -> Result<(), SocketError> {
        resolve_range(src, len, &self.layout).map_err(|e| SocketError::Remote(e.to_string()))?;
        let command = Command::Get { src: src.node, src_offset: src.offset, len: len as u32, dest_offset };
        self.call(node, |done| Mail::Host { command, done })
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for m in &self.mailboxes {
            let _ = m.send(Mail::Shutdown);
        }
        self.mailboxes.clear();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for SocketJob {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Wall-clock bandwidth sweep over loopback TCP. The latency column holds
/// the wall-clock completion time of each transfer.
pub fn socket_bandwidth(
    base: &JobConfig,
    op: BenchOp,
    packet_sizes: &[usize],
    transfers: &[u64],
) -> Result<Vec<BenchRow>, SocketError> {
    let mut rows = Vec::new();
    for &packet_size in packet_sizes {
        let mut cfg = JobConfig { nodes: base.nodes.max(2), packet_size, ..base.clone() };
        cfg.segment.shared_size = cfg.segment.shared_size.max(MAX_TRANSFER);
        let job = SocketJob::start(&cfg)?;
        for &t in transfers {
            let start = Instant::now();
            match op {
                BenchOp::Put => job.put(NodeId(0), GlobalAddress::new(1, 0), LocalRange::shared(0, t))?,
                BenchOp::Get => job.get(NodeId(0), GlobalAddress::new(1, 0), t, 0)?,
            }
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            rows.push(BenchRow {
                op,
                packet_size,
                transfer_size: t,
                bandwidth_mbs: t as f64 / secs / 1e6,
                latency_us: secs * 1e6,
            });
        }
        job.shutdown();
    }
    Ok(rows)
}
