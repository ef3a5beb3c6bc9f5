//! Live sessions over a socket. One session per connection; the connection
//! thread owns the session core and both model stages.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, TryRecvError};
use tungstenite::{Message, WebSocket};

use super::protocol::{parse_client, ChunkMsg, ClientMsg, ServerMsg};
use super::session::{
    build_generator, cache_stats, ChunkTimings, ControlEvent, EventKind, PlaybackMode, SessionChunkRecord,
    SessionConfig, SessionCore, SessionTrace, StageWindow, StateChange,
};
use super::state::SessionState;
use crate::denoise::StreamingGenerator;
use crate::error::{LpmError, Result};

/// Upper bound on one blocking wait, so client messages are never starved.
const MAX_WAIT: Duration = Duration::from_millis(50);

/// A session advancing in real time. Stages run back to back on the calling
/// thread; each is padded to its configured latency (times `time_scale`).
#[derive(Debug)]
pub struct LiveSession {
    core: SessionCore,
    gen: StreamingGenerator,
    start: Instant,
    next: usize,
    discarded: usize,
    play_starts: Vec<f64>,
    prev_play_end: f64,
    records: Vec<SessionChunkRecord>,
    changes: Vec<StateChange>,
    max_chunks: Option<usize>,
    end_requested: bool,
}

impl LiveSession {
    pub fn new(cfg: SessionConfig, max_chunks: Option<usize>) -> Result<Self> {
        if !(cfg.time_scale > 0.0) {
            return Err(LpmError::Config("time_scale must be positive".into()));
        }
        let gen = build_generator(&cfg)?;
        Ok(Self {
            core: SessionCore::new(cfg)?,
            gen,
            start: Instant::now(),
            next: 0,
            discarded: 0,
            play_starts: Vec::new(),
            prev_play_end: f64::NEG_INFINITY,
            records: Vec::new(),
            changes: Vec::new(),
            max_chunks,
            end_requested: false,
        })
    }

    fn cfg(&self) -> &SessionConfig {
        self.core.config()
    }

    /// Session time in unscaled milliseconds.
    pub fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3 / self.cfg().time_scale
    }

    pub fn ingest(&mut self, kind: EventKind) {
        if kind == EventKind::End {
            self.end_requested = true;
        }
        let at = self.now_ms();
        self.core.ingest(ControlEvent::new(at, kind));
    }

    pub fn play_head(&self, now: f64) -> usize {
        match self.cfg().playback {
            PlaybackMode::Realtime => self.discarded + self.play_starts.iter().filter(|&&p| p <= now).count(),
            PlaybackMode::Frozen => self.discarded,
            PlaybackMode::Acked => self.core.acked_play_head().max(self.discarded),
        }
    }

    pub fn admissible(&self) -> bool {
        let ph = self.play_head(self.now_ms());
        self.next - ph.min(self.next) < self.cfg().lookahead
    }

    pub fn finished(&self) -> bool {
        self.core.state() == SessionState::Terminated || self.max_chunks.is_some_and(|m| self.next >= m)
    }

    /// Ends take effect at the next boundary even when the gate is closed.
    pub fn should_step(&self) -> bool {
        !self.finished() && (self.end_requested || self.admissible())
    }

    /// Time until the gate may open on its own (realtime playback only).
    pub fn next_wakeup(&self) -> Option<Duration> {
        if self.cfg().playback != PlaybackMode::Realtime {
            return None;
        }
        let now = self.now_ms();
        let t = self.play_starts.iter().copied().filter(|&p| p > now).min_by(f64::total_cmp)?;
        Some(Duration::from_secs_f64((t - now) * self.cfg().time_scale / 1e3))
    }

    fn pad_until(&self, t_ms: f64) {
        let wait = t_ms - self.now_ms();
        if wait > 0.0 {
            thread::sleep(Duration::from_secs_f64(wait * self.cfg().time_scale / 1e3));
        }
    }

    /// Runs one boundary and, unless the session ended there, one chunk.
    pub fn step(&mut self) -> Result<Vec<ServerMsg>> {
        let k = self.next;
        let t0 = self.now_ms();
        let play_head = self.play_head(t0);
        let changes = self.core.boundary(t0, k);
        let mut out: Vec<ServerMsg> = changes.iter().map(ServerMsg::from).collect();
        self.changes.extend(changes);
        if self.core.state() == SessionState::Terminated {
            return Ok(out);
        }
        let state = self.core.state();
        let (cond, stamp) = self.core.conditioning(k)?;
        self.gen.record_timings = true;
        let (_, rec) = self.gen.generate_chunk(&cond)?;
        self.core.commit_chunk(&rec.latent_hash);
        let measured = rec.timings.expect("timings recorded");
        let scale = self.cfg().time_scale;
        let [lg, lr, ld] = self.cfg().latencies_ms;
        let g = StageWindow {
            start: t0,
            finish: t0 + lg.max(measured.gen_ms / scale),
        };
        let r = StageWindow {
            start: g.finish,
            finish: g.finish + lr.max(measured.refine_ms / scale),
        };
        let d = StageWindow {
            start: r.finish,
            finish: r.finish + ld,
        };
        self.pad_until(d.finish);
        let discarded = state == SessionState::Warmup;
        if discarded {
            self.discarded += 1;
        } else {
            let p = d.finish.max(self.prev_play_end);
            self.prev_play_end = p + self.cfg().chunk_ms;
            self.play_starts.push(p);
        }
        let record = SessionChunkRecord {
            index: k,
            state,
            discarded,
            stamp,
            latent_hash: rec.latent_hash,
            nfe: rec.nfe,
            timings: ChunkTimings {
                gen: g,
                refine: r,
                decode: d,
            },
            gen_head: k,
            play_head,
            cache: cache_stats(&self.gen),
        };
        out.push(ServerMsg::Chunk(ChunkMsg::from(&record)));
        self.records.push(record);
        self.next += 1;
        Ok(out)
    }

    pub fn trace(&self) -> SessionTrace {
        SessionTrace {
            records: self.records.clone(),
            state_changes: self.changes.clone(),
            final_state: self.core.state(),
            lookahead: self.cfg().lookahead,
            stalled_at: None,
            errors: self.core.errors().to_vec(),
        }
    }
}

pub enum Recv {
    Line(String),
    Timeout,
    Closed,
}

/// One framed, bidirectional client connection.
pub trait Transport {
    /// `Some(Duration::ZERO)` polls; `None` blocks.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Recv>;
    fn send(&mut self, msg: &ServerMsg) -> Result<()>;
}

/// Newline-delimited JSON over TCP. A reader thread splits lines.
pub struct NdjsonTransport {
    writer: TcpStream,
    lines: Receiver<String>,
}

impl NdjsonTransport {
    pub fn new(stream: TcpStream) -> Result<Self> {
        let reader = stream.try_clone()?;
        let (tx, rx) = unbounded();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            writer: stream,
            lines: rx,
        })
    }
}

impl Transport for NdjsonTransport {
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Recv> {
        Ok(match timeout {
            None => self.lines.recv().map_or(Recv::Closed, Recv::Line),
            Some(d) if d.is_zero() => match self.lines.try_recv() {
                Ok(l) => Recv::Line(l),
                Err(TryRecvError::Empty) => Recv::Timeout,
                Err(TryRecvError::Disconnected) => Recv::Closed,
            },
            Some(d) => match self.lines.recv_timeout(d) {
                Ok(l) => Recv::Line(l),
                Err(RecvTimeoutError::Timeout) => Recv::Timeout,
                Err(RecvTimeoutError::Disconnected) => Recv::Closed,
            },
        })
    }

    fn send(&mut self, msg: &ServerMsg) -> Result<()> {
        let mut line = serde_json::to_vec(msg)?;
        line.push(b'\n');
        self.writer.write_all(&line)?;
        Ok(())
    }
}

/// One JSON message per WebSocket text frame.
pub struct WsTransport {
    ws: WebSocket<TcpStream>,
}

impl WsTransport {
    /// Performs the server handshake.
    pub fn accept(stream: TcpStream) -> Result<Self> {
        let ws = tungstenite::accept(stream).map_err(|e| LpmError::Protocol(format!("websocket handshake: {e}")))?;
        Ok(Self { ws })
    }
}

fn ws_err(e: tungstenite::Error) -> LpmError {
    LpmError::Protocol(format!("websocket: {e}"))
}

impl Transport for WsTransport {
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Recv> {
        let sock = self.ws.get_ref();
        match timeout {
            Some(d) if d.is_zero() => sock.set_nonblocking(true)?,
            t => {
                sock.set_nonblocking(false)?;
                sock.set_read_timeout(t)?;
            }
        }
        loop {
            return match self.ws.read() {
                Ok(Message::Text(t)) => Ok(Recv::Line(t)),
                Ok(Message::Binary(b)) => Ok(Recv::Line(String::from_utf8_lossy(&b).into_owned())),
                Ok(Message::Close(_)) => Ok(Recv::Closed),
                Ok(_) => continue,
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    Ok(Recv::Timeout)
                }
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => Ok(Recv::Closed),
                Err(e) => Err(ws_err(e)),
            };
        }
    }

    fn send(&mut self, msg: &ServerMsg) -> Result<()> {
        let sock = self.ws.get_ref();
        sock.set_nonblocking(false)?;
        self.ws.send(Message::Text(serde_json::to_string(msg)?)).map_err(ws_err)
    }
}

enum Handled {
    Continue,
    Closed,
}

fn handle_line(session: &mut LiveSession, t: &mut impl Transport, line: &str) -> Result<Handled> {
    let msg = match parse_client(line) {
        Ok(m) => m,
        Err(e) => {
            t.send(&ServerMsg::error(e))?;
            return Ok(Handled::Continue);
        }
    };
    match msg.to_event() {
        Ok(Some(ev)) => session.ingest(ev),
        Ok(None) => t.send(&ServerMsg::error("session already started"))?,
        Err(e) => t.send(&ServerMsg::error(e))?,
    }
    Ok(Handled::Continue)
}

fn recv_into(session: &mut LiveSession, t: &mut impl Transport, timeout: Option<Duration>) -> Result<Option<Handled>> {
    match t.recv(timeout)? {
        Recv::Line(l) => handle_line(session, t, &l).map(Some),
        Recv::Timeout => Ok(None),
        Recv::Closed => Ok(Some(Handled::Closed)),
    }
}

/// Runs one session over `t`: waits for `start`, then streams chunk and
/// state messages until the session ends, the chunk budget is spent or the
/// client disconnects. A final metrics message follows a normal end.
pub fn serve_session(t: &mut impl Transport) -> Result<Option<SessionTrace>> {
    let (cfg, max_chunks) = loop {
        match t.recv(None)? {
            Recv::Line(l) => match parse_client(&l) {
                Ok(ClientMsg::Start { config, max_chunks }) => break (config, max_chunks),
                Ok(_) => t.send(&ServerMsg::error("expected a start message"))?,
                Err(e) => t.send(&ServerMsg::error(e))?,
            },
            Recv::Timeout => {}
            Recv::Closed => return Ok(None),
        }
    };
    let mut session = match LiveSession::new(cfg, max_chunks) {
        Ok(s) => s,
        Err(e) => {
            t.send(&ServerMsg::error(e))?;
            return Ok(None);
        }
    };
    loop {
        while let Some(h) = recv_into(&mut session, t, Some(Duration::ZERO))? {
            if let Handled::Closed = h {
                return Ok(Some(session.trace()));
            }
        }
        if session.finished() {
            break;
        }
        if session.should_step() {
            match session.step() {
                Ok(msgs) => {
                    for m in &msgs {
                        t.send(m)?;
                    }
                }
                Err(e) => {
                    t.send(&ServerMsg::error(&e))?;
                    return Err(e);
                }
            }
            continue;
        }
        let wait = session.next_wakeup().map_or(MAX_WAIT, |d| d.min(MAX_WAIT)).max(Duration::from_millis(1));
        if let Some(Handled::Closed) = recv_into(&mut session, t, Some(wait))? {
            return Ok(Some(session.trace()));
        }
    }
    let trace = session.trace();
    if let Some(m) = trace.metrics() {
        t.send(&ServerMsg::Metrics(m))?;
    }
    Ok(Some(trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Framing {
    Ndjson,
    WebSocket,
}

fn serve_stream(stream: TcpStream, framing: Framing) -> Result<Option<SessionTrace>> {
    match framing {
        Framing::Ndjson => serve_session(&mut NdjsonTransport::new(stream)?),
        Framing::WebSocket => serve_session(&mut WsTransport::accept(stream)?),
    }
}

/// Accepts connections forever (or `max_connections`), one thread each.
pub fn spawn_listener(
    listener: TcpListener,
    framing: Framing,
    max_connections: Option<usize>,
) -> Result<(SocketAddr, JoinHandle<()>)> {
    let addr = listener.local_addr()?;
    let handle = thread::spawn(move || {
        let mut workers = Vec::new();
        for (i, stream) in listener.incoming().enumerate() {
            match stream {
                Ok(s) => workers.push(thread::spawn(move || {
                    if let Err(e) = serve_stream(s, framing) {
                        eprintln!("session ended with error: {e}");
                    }
                })),
                Err(e) => eprintln!("accept failed: {e}"),
            }
            if max_connections.is_some_and(|m| i + 1 >= m) {
                break;
            }
        }
        for w in workers {
            let _ = w.join();
        }
    });
    Ok((addr, handle))
}
