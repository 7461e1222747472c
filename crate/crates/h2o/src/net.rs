//! Socket mode: one instance driven by wall-clock timers and TCP.
//!
//! Reader threads decode frames and hand them to the instance loop over a
//! channel. Each peer gets a writer thread that connects lazily and drops a
//! message when the peer is unreachable; the protocol's timeouts handle the
//! loss. Peers whose address is not a socket address (command-line clients)
//! are answered on the connection they came in on.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use h2o_core::config::ClusterConfig;
use h2o_core::node::msg::{self, ADMIN_KILL};
use h2o_core::node::Node;
use h2o_core::wire::{decode_frame, encode_frame, Address, Envelope, FrameError};
use serde_json::json;

use crate::fsdisk::FsDisk;
use crate::sampler::OsSampler;

const MAX_FRAME: usize = 64 << 20;
const CONNECT_TIMEOUT: Duration = Duration::from_millis(500);
const SAMPLE_EVERY_MS: u64 = 1000;

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Reads one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Envelope>> {
    let mut head = [0u8; 4];
    match r.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(head) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut buf = Vec::with_capacity(4 + len);
    buf.extend_from_slice(&head);
    buf.resize(4 + len, 0);
    r.read_exact(&mut buf[4..])?;
    match decode_frame(&buf) {
        Ok((env, _)) => Ok(Some(env)),
        Err(e) => Err(io::Error::new(io::ErrorKind::InvalidData, e)),
    }
}

pub fn write_frame(w: &mut impl Write, env: &Envelope) -> io::Result<()> {
    let bytes = encode_frame(env).map_err(|e: FrameError| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&bytes)?;
    w.flush()
}

fn resolve(addr: &Address) -> Option<SocketAddr> {
    addr.as_str().to_socket_addrs().ok()?.next()
}

/// Instances are named `host:port`; anything else is a client.
pub fn is_socket_addr(addr: &Address) -> bool {
    addr.as_str().rsplit_once(':').is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok())
}

struct Inbound {
    env: Envelope,
    conn: Option<TcpStream>,
}

fn reader(mut stream: TcpStream, tx: Sender<Inbound>) {
    loop {
        match read_frame(&mut stream) {
            Ok(Some(env)) => {
                let conn = stream.try_clone().ok();
                if tx.send(Inbound { env, conn }).is_err() {
                    return;
                }
            }
            _ => return,
        }
    }
}

fn writer(target: SocketAddr, rx: Receiver<Envelope>) {
    let mut conn: Option<TcpStream> = None;
    for env in rx {
        if conn.is_none() {
            conn = TcpStream::connect_timeout(&target, CONNECT_TIMEOUT).ok();
            if let Some(c) = &conn {
                let _ = c.set_nodelay(true);
            }
        }
        if let Some(c) = conn.as_mut() {
            if write_frame(c, &env).is_err() {
                conn = None;
            }
        }
    }
}

#[derive(Default)]
struct Router {
    writers: HashMap<Address, Sender<Envelope>>,
    clients: HashMap<Address, TcpStream>,
}

impl Router {
    fn route(&mut self, env: Envelope) {
        if let Some(c) = self.clients.get_mut(&env.to) {
            if write_frame(c, &env).is_err() {
                self.clients.remove(&env.to);
            }
            return;
        }
        if let Some(w) = self.writers.get(&env.to) {
            if w.send(env.clone()).is_ok() {
                return;
            }
        }
        let Some(target) = resolve(&env.to) else { return };
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || writer(target, rx));
        let to = env.to.clone();
        let _ = tx.send(env);
        self.writers.insert(to, tx);
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: Address,
    pub bootstrap: Option<Address>,
    pub data_dir: PathBuf,
    pub cfg: ClusterConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Stopped,
    Departed,
    Killed,
}

/// Binds the listener and runs the instance until it departs, is killed or
/// `stop` is set. Events are written to `events` as JSON lines.
pub fn serve(opts: ServeOptions, stop: Arc<AtomicBool>, mut events: impl Write) -> anyhow::Result<Outcome> {
    let listener = TcpListener::bind(opts.addr.as_str()).with_context(|| format!("binding {}", opts.addr))?;
    let disk = FsDisk::open(&opts.data_dir).map_err(|e| anyhow::anyhow!("{e}"))?;
    let local = listener.local_addr()?;
    let closing = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Inbound>();
    {
        let tx = tx.clone();
        let closing = closing.clone();
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                if closing.load(Ordering::Relaxed) {
                    return;
                }
                let _ = stream.set_nodelay(true);
                let tx = tx.clone();
                thread::spawn(move || reader(stream, tx));
            }
        });
    }
    drop(tx);

    let mut sampler = OsSampler::new();
    let me = opts.addr.clone();
    let first = sampler.sample(&me, &opts.data_dir, now_ms());
    let mut node = Node::start(me.clone(), opts.cfg.clone(), Box::new(disk), opts.bootstrap.clone(), first, now_ms());
    let mut router = Router::default();
    let mut next_sample = now_ms() + SAMPLE_EVERY_MS;
    let outcome = loop {
        flush(&mut node, &mut router, &mut events)?;
        if node.has_departed() {
            break Outcome::Departed;
        }
        if stop.load(Ordering::Relaxed) {
            break Outcome::Stopped;
        }
        let now = now_ms();
        let due = node.next_deadline().unwrap_or(u64::MAX).min(next_sample);
        let wait = due.saturating_sub(now).min(100);
        match rx.recv_timeout(Duration::from_millis(wait)) {
            Ok(Inbound { env, conn }) => {
                if env.msg_type == ADMIN_KILL {
                    if let Some(mut c) = conn {
                        let reply = reply_env(&me, &env, msg::encode(&msg::Empty {}));
                        let _ = write_frame(&mut c, &reply);
                    }
                    node.halt();
                    break Outcome::Killed;
                }
                if !is_socket_addr(&env.from) {
                    if let Some(c) = conn {
                        router.clients.insert(env.from.clone(), c);
                    }
                }
                node.handle(env, now_ms());
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break Outcome::Stopped,
        }
        let now = now_ms();
        if node.next_deadline().is_some_and(|d| d <= now) {
            node.tick(now);
        }
        if now >= next_sample {
            node.refresh_sample(sampler.sample(&me, &opts.data_dir, now));
            next_sample = now + SAMPLE_EVERY_MS;
        }
    };
    // Give the writer threads a moment to push out final messages.
    thread::sleep(Duration::from_millis(200));
    for c in router.clients.values() {
        let _ = c.shutdown(Shutdown::Both);
    }
    closing.store(true, Ordering::Relaxed);
    let _ = TcpStream::connect_timeout(&local, CONNECT_TIMEOUT);
    Ok(outcome)
}

fn reply_env(me: &Address, req: &Envelope, mut body: serde_json::Map<String, serde_json::Value>) -> Envelope {
    body.insert("re".into(), json!(req.rid));
    Envelope::new(&msg::reply_type(&req.msg_type), me.clone(), req.from.clone(), 0, body)
}

fn flush(node: &mut Node, router: &mut Router, events: &mut impl Write) -> anyhow::Result<()> {
    for e in node.take_events() {
        let line = json!({ "t": now_ms(), "node": node.addr().as_str(), "kind": e.kind, "detail": e.detail });
        writeln!(events, "{line}")?;
    }
    events.flush()?;
    for env in node.take_outbox() {
        router.route(env);
    }
    Ok(())
}
