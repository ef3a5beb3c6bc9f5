//! Session engine: the single writer of session state.
//!
//! Control events queue as they arrive and are applied only at chunk
//! boundaries (the moment generation of the next chunk is admitted). The
//! conditioning for chunk k is built once at its boundary and travels with
//! the chunk through the pipeline unchanged.

use std::io::Write;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::audio::{window_with_silence, AudioBuffer, AudioEncoder, TextEncoder};
use super::state::{transition, AudioStream, SessionState, Trigger};
use crate::denoise::{
    latent_hash, BackboneOutput, GeneratorConfig, NfeCount, StreamingGenerator, TimestepSchedule,
};
use crate::error::{LpmError, Result};
use crate::kvcache::{KvVariant, RetentionPolicy};
use crate::latcore::Tensor2D;
use crate::pipeline::{
    fixed_stages, metrics, run_wall_with, Admission, ChunkJob, Clock, GateConfig, Metrics, PipelineTrace, Playback,
    StageName, StageWork, WallOptions,
};
use crate::ropekit::RefType;
use crate::toydit::{Backbone, CondBundle, ModelConfig, Refiner, ToyDit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// One second of samples for second `k` of a stream.
    Audio {
        stream: AudioStream,
        k: usize,
        samples: Vec<f32>,
    },
    Text {
        prompt: String,
    },
    UserSpeechStart,
    UserSpeechEnd,
    AgentSpeechStart,
    AgentSpeechEnd,
    Interrupt,
    /// Playback of `chunk` started on the client.
    PlayAck {
        chunk: usize,
    },
    End,
}

impl EventKind {
    pub fn trigger(&self) -> Option<Trigger> {
        match self {
            EventKind::UserSpeechStart => Some(Trigger::UserSpeechStart),
            EventKind::UserSpeechEnd => Some(Trigger::UserSpeechEnd),
            EventKind::AgentSpeechStart => Some(Trigger::AgentSpeechStart),
            EventKind::AgentSpeechEnd => Some(Trigger::AgentSpeechEnd),
            EventKind::Interrupt => Some(Trigger::Interrupt),
            EventKind::End => Some(Trigger::End),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlEvent {
    pub at_ms: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl ControlEvent {
    pub fn new(at_ms: f64, kind: EventKind) -> Self {
        Self { at_ms, kind }
    }
}

/// Reads an NDJSON event script; blank lines are skipped.
pub fn parse_script(text: &str) -> Result<Vec<ControlEvent>> {
    let mut events: Vec<ControlEvent> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(LpmError::from))
        .collect::<Result<_>>()?;
    events.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
    Ok(events)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaybackMode {
    /// Each chunk plays for `chunk_ms` once decoded, back to back.
    Realtime,
    /// Playback never advances.
    Frozen,
    /// Playback advances only on `PlayAck` events.
    Acked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub seed: u64,
    pub policy: RetentionPolicy,
    pub schedule: TimestepSchedule,
    pub reuse_noise: bool,
    /// Generator, refiner, decoder.
    pub latencies_ms: [f64; 3],
    pub lookahead: usize,
    pub playback: PlaybackMode,
    pub chunk_ms: f64,
    /// Delay before a user-speech-end event is applied.
    pub grace_ms: f64,
    pub sample_rate: usize,
    pub text_tokens: usize,
    pub clock: Clock,
    /// Wall clock only: multiplier on every simulated duration.
    pub time_scale: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            model_seed: 0,
            seed: 0,
            policy: RetentionPolicy::default(),
            schedule: TimestepSchedule::default(),
            reuse_noise: false,
            latencies_ms: [700.0, 700.0, 180.0],
            lookahead: 2,
            playback: PlaybackMode::Realtime,
            chunk_ms: 1000.0,
            grace_ms: 500.0,
            sample_rate: 1600,
            text_tokens: 4,
            clock: Clock::Sim,
            time_scale: 1.0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.policy.validate()?;
        self.schedule.validate()?;
        if self.lookahead == 0 {
            return Err(LpmError::Config("lookahead must be >= 1".into()));
        }
        if self.latencies_ms.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || !(self.chunk_ms > 0.0) {
            return Err(LpmError::Config("latencies and chunk length must be finite and non-negative".into()));
        }
        if !(self.grace_ms >= 0.0) {
            return Err(LpmError::Config("grace_ms must be >= 0".into()));
        }
        if self.sample_rate == 0 || self.sample_rate as f64 % self.model.audio_fps != 0.0 {
            return Err(LpmError::Config("sample_rate must be a multiple of the audio frame rate".into()));
        }
        Ok(())
    }

    fn frame_rate(&self) -> usize {
        self.model.audio_fps as usize
    }
}

/// Survives control updates; mutated only when a chunk is generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistentState {
    pub next_chunk: usize,
    pub seed: u64,
    pub latent_tail: Option<String>,
}

/// Replaced by control updates at boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct RefreshableState {
    pub prompt: String,
    pub text_tokens: Tensor2D,
    pub speak: AudioBuffer,
    pub listen: AudioBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionSplitState {
    pub persistent: PersistentState,
    pub refreshable: RefreshableState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateChange {
    pub from: SessionState,
    pub to: SessionState,
    pub boundary: usize,
    pub at_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Pending {
    effective_ms: f64,
    seq: u64,
    event: ControlEvent,
}

/// Queue of events waiting for a boundary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PendingEvents {
    items: Vec<Pending>,
    seq: u64,
}

impl PendingEvents {
    /// User-speech-end takes effect `grace_ms` after arrival.
    pub fn push(&mut self, event: ControlEvent, grace_ms: f64) {
        let effective_ms = match event.kind {
            EventKind::UserSpeechEnd => event.at_ms + grace_ms,
            _ => event.at_ms,
        };
        self.items.push(Pending {
            effective_ms,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Earliest effective time still queued.
    pub fn next_effective_ms(&self) -> Option<f64> {
        self.items.iter().map(|p| p.effective_ms).min_by(f64::total_cmp)
    }
}

/// Applies every queued event effective at or before `boundary_ms`, in
/// effective-time order. Later text updates overwrite earlier ones. A user
/// speech start cancels a still-pending earlier speech end.
pub fn apply_boundary_updates(
    split: &mut SessionSplitState,
    state: &mut SessionState,
    pending: &mut PendingEvents,
    boundary_ms: f64,
    next_chunk: usize,
    text: &TextEncoder,
) -> (Vec<StateChange>, Vec<LpmError>) {
    let mut due: Vec<Pending> = Vec::new();
    let mut keep = Vec::new();
    for p in pending.items.drain(..) {
        if p.effective_ms <= boundary_ms {
            due.push(p);
        } else {
            keep.push(p);
        }
    }
    due.sort_by(|a, b| a.effective_ms.total_cmp(&b.effective_ms).then(a.seq.cmp(&b.seq)));
    let mut changes = Vec::new();
    let mut errors = Vec::new();
    let mut cancelled_before: Option<f64> = None;
    for p in due {
        let ev = p.event;
        if matches!(ev.kind, EventKind::UserSpeechEnd) && cancelled_before.is_some_and(|t| ev.at_ms < t) {
            continue;
        }
        match &ev.kind {
            EventKind::Text { prompt } => {
                split.refreshable.prompt = prompt.clone();
                split.refreshable.text_tokens = text.encode(prompt);
            }
            EventKind::Audio { stream, k, samples } => {
                let buf = match stream {
                    AudioStream::Speak => &mut split.refreshable.speak,
                    AudioStream::Listen => &mut split.refreshable.listen,
                };
                if let Err(e) = buf.push_second(*k, samples.clone()) {
                    errors.push(e);
                }
            }
            EventKind::PlayAck { .. } => {}
            kind => {
                if matches!(kind, EventKind::UserSpeechStart) {
                    cancelled_before = Some(cancelled_before.map_or(ev.at_ms, |t: f64| t.max(ev.at_ms)));
                }
                let trig = kind.trigger().expect("control event");
                let next = transition(*state, trig);
                if next != *state {
                    changes.push(StateChange {
                        from: *state,
                        to: next,
                        boundary: next_chunk,
                        at_ms: boundary_ms,
                    });
                    *state = next;
                }
            }
        }
    }
    // speech ends still waiting out their grace are cancelled by any applied start
    if let Some(t) = cancelled_before {
        keep.retain(|p| !(matches!(p.event.kind, EventKind::UserSpeechEnd) && p.event.at_ms < t));
    }
    pending.items = keep;
    (changes, errors)
}

/// Identity of the conditioning one chunk was generated under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondStamp {
    pub cond_hash: String,
    pub text_hash: String,
    pub speak_active: bool,
    pub listen_active: bool,
    pub audio_underrun: Vec<AudioStream>,
}

pub fn conditioning_hash(cond: &CondBundle, state: SessionState) -> String {
    let mut h = Sha256::new();
    h.update(format!("{state:?}|{}|{}", cond.speak_muted, cond.listen_muted).as_bytes());
    for t in [&cond.text_tokens, &cond.speak_audio.frames, &cond.listen_audio.frames, &cond.ref_tokens] {
        h.update((t.rows() as u64).to_le_bytes());
        h.update(t.to_le_bytes());
    }
    h.update(cond.speak_audio.t0.to_le_bytes());
    h.update(cond.listen_audio.t0.to_le_bytes());
    h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Session state, event queue and encoders. Owns no model state.
#[derive(Debug)]
pub struct SessionCore {
    cfg: SessionConfig,
    state: SessionState,
    split: SessionSplitState,
    pending: PendingEvents,
    text: TextEncoder,
    audio: AudioEncoder,
    ref_tokens: Tensor2D,
    ref_slots: Vec<(RefType, u64)>,
    acked_play_head: usize,
    errors: Vec<String>,
}

impl SessionCore {
    pub fn new(cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        let text = TextEncoder {
            d_cond: cfg.model.d_cond,
            n_tokens: cfg.text_tokens,
        };
        let audio = AudioEncoder::new(cfg.sample_rate, cfg.frame_rate(), cfg.model.d_cond, cfg.seed ^ 0xa0d1)?;
        let ref_slots = vec![(RefType::Expression, 1), (RefType::View, 1), (RefType::SinkRef, 1)];
        let ref_tokens = crate::denoise::NoiseSource::new(cfg.seed ^ 0x5ef).sample(
            usize::MAX,
            crate::denoise::NoiseStream::Initial,
            ref_slots.len(),
            cfg.model.d_model,
        );
        let split = SessionSplitState {
            persistent: PersistentState {
                next_chunk: 0,
                seed: cfg.seed,
                latent_tail: None,
            },
            refreshable: RefreshableState {
                prompt: String::new(),
                text_tokens: text.encode(""),
                speak: AudioBuffer::new(cfg.sample_rate),
                listen: AudioBuffer::new(cfg.sample_rate),
            },
        };
        Ok(Self {
            cfg,
            state: SessionState::Warmup,
            split,
            pending: PendingEvents::default(),
            text,
            audio,
            ref_tokens,
            ref_slots,
            acked_play_head: 0,
            errors: Vec::new(),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn split(&self) -> &SessionSplitState {
        &self.split
    }

    pub fn pending(&self) -> &PendingEvents {
        &self.pending
    }

    pub fn errors(&self) -> &[String] {
        &self.errors
    }

    /// Play head implied by acknowledgements (chunks `< head` have started).
    pub fn acked_play_head(&self) -> usize {
        self.acked_play_head
    }

    /// Queues an event. Playback acknowledgements are not boundary-aligned
    /// and take effect immediately.
    pub fn ingest(&mut self, ev: ControlEvent) {
        if let EventKind::PlayAck { chunk } = ev.kind {
            self.acked_play_head = self.acked_play_head.max(chunk + 1);
            return;
        }
        self.pending.push(ev, self.cfg.grace_ms);
    }

    /// Boundary before chunk `next_chunk`: warmup completion first, then queued events.
    pub fn boundary(&mut self, now_ms: f64, next_chunk: usize) -> Vec<StateChange> {
        let mut changes = Vec::new();
        if self.state == SessionState::Warmup && next_chunk >= self.cfg.policy.sink_chunks {
            let to = transition(self.state, Trigger::WarmupComplete);
            changes.push(StateChange {
                from: self.state,
                to,
                boundary: next_chunk,
                at_ms: now_ms,
            });
            self.state = to;
        }
        let (more, errors) = apply_boundary_updates(
            &mut self.split,
            &mut self.state,
            &mut self.pending,
            now_ms,
            next_chunk,
            &self.text,
        );
        changes.extend(more);
        self.errors.extend(errors.into_iter().map(|e| e.to_string()));
        changes
    }

    /// Conditioning for chunk `k` under the current state.
    pub fn conditioning(&self, k: usize) -> Result<(CondBundle, CondStamp)> {
        let (speak_active, listen_active) = self.state.audio_activity();
        let r = &self.split.refreshable;
        let mut underrun = Vec::new();
        let mut encode = |buf: &AudioBuffer, stream: AudioStream, active: bool| {
            if active && !buf.has_second(k) {
                underrun.push(stream);
            }
            self.audio.encode(&window_with_silence(buf, k))
        };
        let speak_audio = encode(&r.speak, AudioStream::Speak, speak_active)?;
        let listen_audio = encode(&r.listen, AudioStream::Listen, listen_active)?;
        let cond = CondBundle {
            text_tokens: r.text_tokens.clone(),
            speak_audio,
            listen_audio,
            ref_tokens: self.ref_tokens.clone(),
            ref_slots: self.ref_slots.clone(),
            speak_muted: !speak_active,
            listen_muted: !listen_active,
        };
        let stamp = CondStamp {
            cond_hash: conditioning_hash(&cond, self.state),
            text_hash: latent_hash(&r.text_tokens),
            speak_active,
            listen_active,
            audio_underrun: underrun,
        };
        Ok((cond, stamp))
    }

    pub(crate) fn commit_chunk(&mut self, latent_hash: &str) {
        self.split.persistent.next_chunk += 1;
        self.split.persistent.latent_tail = Some(latent_hash.to_string());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageWindow {
    pub start: f64,
    pub finish: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkTimings {
    pub gen: StageWindow,
    pub refine: StageWindow,
    pub decode: StageWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub retained: Vec<usize>,
    pub entries: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionChunkRecord {
    pub index: usize,
    pub state: SessionState,
    /// Warmup chunks are generated for their cache entries and never played.
    pub discarded: bool,
    pub stamp: CondStamp,
    pub latent_hash: String,
    pub nfe: NfeCount,
    pub timings: ChunkTimings,
    pub gen_head: usize,
    pub play_head: usize,
    pub cache: CacheStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub records: Vec<SessionChunkRecord>,
    pub state_changes: Vec<StateChange>,
    pub final_state: SessionState,
    pub lookahead: usize,
    pub stalled_at: Option<usize>,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Chunk(SessionChunkRecord),
    State(StateChange),
    Metrics(Metrics),
}

impl SessionTrace {
    pub fn states(&self) -> Vec<SessionState> {
        self.records.iter().map(|r| r.state).collect()
    }

    pub fn pipeline_trace(&self) -> PipelineTrace {
        let mut jobs = Vec::new();
        for r in &self.records {
            for (stage, w, enq) in [
                (StageName::Generator, r.timings.gen, r.timings.gen.start),
                (StageName::Refiner, r.timings.refine, r.timings.gen.finish),
                (StageName::Decoder, r.timings.decode, r.timings.refine.finish),
            ] {
                jobs.push(ChunkJob {
                    chunk_index: r.index,
                    stage,
                    t_enqueue: enq.min(w.start),
                    t_start: w.start,
                    t_finish: w.finish,
                });
            }
        }
        PipelineTrace {
            clock: Clock::Sim,
            jobs,
            admissions: self
                .records
                .iter()
                .map(|r| Admission {
                    chunk_index: r.index,
                    time: r.timings.gen.start,
                    gen_head: r.gen_head,
                    play_head: r.play_head,
                })
                .collect(),
            playback: Vec::new(),
            lookahead: Some(self.lookahead),
            stalled_at: self.stalled_at,
        }
    }

    pub fn metrics(&self) -> Option<Metrics> {
        metrics(&self.pipeline_trace()).ok()
    }

    /// `gen_head − play_head < L` at every admission.
    pub fn lookahead_respected(&self) -> bool {
        self.records.iter().all(|r| r.gen_head.saturating_sub(r.play_head) < self.lookahead)
    }

    /// NDJSON: state changes interleaved before the chunk whose boundary they
    /// occurred at, then a metrics line.
    pub fn write_ndjson(&self, mut w: impl Write) -> Result<()> {
        let mut changes = self.state_changes.iter().peekable();
        for r in &self.records {
            while let Some(c) = changes.next_if(|c| c.boundary <= r.index) {
                serde_json::to_writer(&mut w, &TraceLine::State(*c))?;
                w.write_all(b"\n")?;
            }
            serde_json::to_writer(&mut w, &TraceLine::Chunk(r.clone()))?;
            w.write_all(b"\n")?;
        }
        for c in changes {
            serde_json::to_writer(&mut w, &TraceLine::State(*c))?;
            w.write_all(b"\n")?;
        }
        if let Some(m) = self.metrics() {
            serde_json::to_writer(&mut w, &TraceLine::Metrics(m))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Backbone and refiner built from the config's seed; the refiner starts as
/// a copy of the backbone.
pub fn build_generator(cfg: &SessionConfig) -> Result<StreamingGenerator> {
    let backbone = Backbone::new(ToyDit::random(cfg.model.clone(), cfg.model_seed)?);
    let refiner = Refiner::from_backbone(&backbone);
    build_generator_from(cfg, backbone, refiner)
}

pub fn build_generator_from(cfg: &SessionConfig, backbone: Backbone, refiner: Refiner) -> Result<StreamingGenerator> {
    StreamingGenerator::new(
        backbone,
        refiner,
        GeneratorConfig {
            policy: cfg.policy,
            sched: cfg.schedule,
            seed: cfg.seed,
            reuse_noise: cfg.reuse_noise,
        },
    )
}

pub(crate) fn cache_stats(gen: &StreamingGenerator) -> CacheStats {
    let b = gen.backbone_stage().cache();
    let r = gen.refiner_stage().cache();
    CacheStats {
        retained: b.stored_chunks(KvVariant::Noisy).into_iter().collect(),
        entries: b.entry_count() + r.entry_count(),
        bytes: b.stored_bytes() + r.stored_bytes(),
    }
}

/// Runs a scripted session for up to `n_chunks` chunks on the configured clock.
pub fn run_session(events: &[ControlEvent], n_chunks: usize, cfg: &SessionConfig) -> Result<SessionTrace> {
    match cfg.clock {
        Clock::Sim => run_session_sim(events, n_chunks, cfg, build_generator(cfg)?),
        Clock::Wall => run_session_wall(events, n_chunks, cfg, build_generator(cfg)?),
    }
}

/// Discrete-event session: model compute is real, stage timings are the
/// configured latencies.
pub fn run_session_sim(
    events: &[ControlEvent],
    n_chunks: usize,
    cfg: &SessionConfig,
    mut gen: StreamingGenerator,
) -> Result<SessionTrace> {
    let mut core = SessionCore::new(cfg.clone())?;
    let mut events: Vec<ControlEvent> = events.to_vec();
    events.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
    let mut next_event = 0usize;
    let [lg, lr, ld] = cfg.latencies_ms;
    let mut free = [0.0f64; 3];
    let mut prev_play_end = f64::NEG_INFINITY;
    let mut play_starts: Vec<f64> = Vec::new();
    let mut discarded_count = 0usize;
    let mut records = Vec::new();
    let mut state_changes = Vec::new();
    let mut stalled_at = None;

    'chunks: for k in 0..n_chunks {
        let mut t = free[0];
        let play_head = loop {
            while next_event < events.len() && events[next_event].at_ms <= t {
                core.ingest(events[next_event].clone());
                next_event += 1;
            }
            // warmup chunks count as played from their admission
            let play_head = match cfg.playback {
                PlaybackMode::Realtime => discarded_count + play_starts.iter().filter(|&&p| p <= t).count(),
                PlaybackMode::Frozen => discarded_count,
                PlaybackMode::Acked => core.acked_play_head().max(discarded_count),
            };
            if k - play_head.min(k) < cfg.lookahead {
                break play_head;
            }
            let next_play = match cfg.playback {
                PlaybackMode::Realtime => play_starts.iter().copied().filter(|&p| p > t).min_by(f64::total_cmp),
                _ => None,
            };
            let next_ev = (cfg.playback == PlaybackMode::Acked)
                .then(|| events.get(next_event).map(|e| e.at_ms))
                .flatten();
            match [next_play, next_ev].into_iter().flatten().min_by(f64::total_cmp) {
                Some(nt) => t = nt,
                None => {
                    stalled_at = Some(k);
                    break 'chunks;
                }
            }
        };
        let changes = core.boundary(t, k);
        state_changes.extend(changes);
        if core.state() == SessionState::Terminated {
            break;
        }
        let state = core.state();
        let (cond, stamp) = core.conditioning(k)?;
        let (latent, rec) = gen.generate_chunk(&cond)?;
        core.commit_chunk(&rec.latent_hash);
        let discarded = state == SessionState::Warmup;
        let g = StageWindow { start: t, finish: t + lg };
        let rs = g.finish.max(free[1]);
        let r = StageWindow { start: rs, finish: rs + lr };
        let ds = r.finish.max(free[2]);
        let d = StageWindow { start: ds, finish: ds + ld };
        free = [g.finish, r.finish, d.finish];
        if discarded {
            discarded_count += 1;
        } else if cfg.playback == PlaybackMode::Realtime {
            let p = d.finish.max(prev_play_end);
            prev_play_end = p + cfg.chunk_ms;
            play_starts.push(p);
        }
        debug_assert_eq!(latent_hash(&latent.tokens), rec.latent_hash);
        records.push(SessionChunkRecord {
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
            cache: cache_stats(&gen),
        });
    }
    // events that arrived after the last boundary still count toward the final state
    Ok(SessionTrace {
        records,
        state_changes,
        final_state: core.state(),
        lookahead: cfg.lookahead,
        stalled_at,
        errors: core.errors().to_vec(),
    })
}

struct GenPacket {
    out: BackboneOutput,
    cond: CondBundle,
    stamp: CondStamp,
    state: SessionState,
    play_head: usize,
}

struct RefPacket {
    gen: GenPacket,
    latent_hash: String,
    refiner_nfe: usize,
    cache: CacheStats,
}

/// Wall-clock session: one thread per stage. The generator thread owns the
/// session core and the noisy-history cache, the refiner thread owns the
/// clean-history cache. Times are reported in unscaled milliseconds.
pub fn run_session_wall(
    events: &[ControlEvent],
    n_chunks: usize,
    cfg: &SessionConfig,
    gen: StreamingGenerator,
) -> Result<SessionTrace> {
    let playback = match cfg.playback {
        PlaybackMode::Realtime => Playback::Realtime { chunk_ms: cfg.chunk_ms },
        PlaybackMode::Frozen => Playback::Frozen,
        PlaybackMode::Acked => {
            return Err(LpmError::Config("acked playback needs a live client (use the server)".into()));
        }
    };
    let gate = GateConfig {
        lookahead: cfg.lookahead,
        playback,
        warmup_chunks: cfg.policy.sink_chunks,
    };
    let mut events: Vec<ControlEvent> = events.to_vec();
    events.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
    let core = Mutex::new(SessionCore::new(cfg.clone())?);
    let changes = Mutex::new(Vec::new());
    let (mut bstage, mut rstage) = gen.into_stages();
    let start = std::time::Instant::now();
    let scale = cfg.time_scale;
    let mut next_event = 0usize;
    let [lg, lr, ld] = cfg.latencies_ms;
    let stages = fixed_stages(lg, lr, ld);
    let work = StageWork {
        generate: |k: usize| -> Result<Option<GenPacket>> {
            let now = start.elapsed().as_secs_f64() * 1e3 / scale;
            let mut core = core.lock().expect("session core");
            if core.state() == SessionState::Terminated {
                return Ok(None);
            }
            while next_event < events.len() && events[next_event].at_ms <= now {
                core.ingest(events[next_event].clone());
                next_event += 1;
            }
            let ch = core.boundary(now, k);
            changes.lock().expect("changes").extend(ch);
            if core.state() == SessionState::Terminated {
                return Ok(None);
            }
            let state = core.state();
            let (cond, stamp) = core.conditioning(k)?;
            let out = bstage.step(&cond)?;
            core.split.persistent.next_chunk += 1;
            Ok(Some(GenPacket {
                out,
                cond,
                stamp,
                state,
                play_head: 0,
            }))
        },
        refine: |_k: usize, g: Option<GenPacket>| -> Result<Option<RefPacket>> {
            let Some(g) = g else { return Ok(None) };
            let r = rstage.step(&g.out, &g.cond)?;
            let cache = CacheStats {
                retained: rstage.cache().stored_chunks(KvVariant::Clean).into_iter().collect(),
                entries: rstage.cache().entry_count(),
                bytes: rstage.cache().stored_bytes(),
            };
            Ok(Some(RefPacket {
                latent_hash: latent_hash(&r.latent.tokens),
                refiner_nfe: r.refiner_nfe,
                gen: g,
                cache,
            }))
        },
        decode: |_k: usize, r: Option<RefPacket>| -> Result<Option<RefPacket>> { Ok(r) },
    };
    let opts = WallOptions {
        time_scale: scale,
        queue_bound: cfg.lookahead,
    };
    let (ptrace, outputs) = run_wall_with(n_chunks, &stages, Some(gate), opts, work)?;
    let core = core.into_inner().expect("session core");
    let mut records = Vec::new();
    for p in outputs.into_iter().flatten() {
        let k = p.gen.out.chunk_index;
        let window = |s: StageName| {
            let j = ptrace.job(s, k).expect("job recorded");
            StageWindow {
                start: j.t_start,
                finish: j.t_finish,
            }
        };
        let play_head = ptrace
            .admissions
            .iter()
            .find(|a| a.chunk_index == k)
            .map_or(p.gen.play_head, |a| a.play_head);
        records.push(SessionChunkRecord {
            index: k,
            state: p.gen.state,
            discarded: p.gen.state == SessionState::Warmup,
            stamp: p.gen.stamp,
            latent_hash: p.latent_hash,
            nfe: NfeCount {
                backbone: p.gen.out.backbone_nfe,
                refiner: p.refiner_nfe,
            },
            timings: ChunkTimings {
                gen: window(StageName::Generator),
                refine: window(StageName::Refiner),
                decode: window(StageName::Decoder),
            },
            gen_head: k,
            play_head,
            cache: p.cache,
        });
    }
    Ok(SessionTrace {
        records,
        state_changes: changes.into_inner().expect("changes"),
        final_state: core.state(),
        lookahead: cfg.lookahead,
        stalled_at: ptrace.stalled_at,
        errors: core.errors().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SessionConfig {
        SessionConfig {
            model: ModelConfig::tiny(),
            ..Default::default()
        }
    }

    #[test]
    fn empty_script_warms_up_then_idles() {
        let t = run_session(&[], 6, &tiny_cfg()).unwrap();
        use SessionState::*;
        assert_eq!(t.states(), vec![Warmup, Warmup, Warmup, Idle, Idle, Idle]);
        assert!(t.records[..3].iter().all(|r| r.discarded));
        assert_eq!(t.state_changes.len(), 1);
        assert!(t.lookahead_respected());
        assert!(t.records.iter().all(|r| r.nfe == NfeCount { backbone: 2, refiner: 1 }));
    }

    #[test]
    fn text_update_lands_on_next_chunk() {
        let cfg = tiny_cfg();
        let base = run_session(&[], 6, &cfg).unwrap();
        // chunk 4 is admitted at 2800 ms; arrive mid-generation of chunk 4
        let at = base.records[4].timings.gen.start + 10.0;
        let ev = [ControlEvent::new(at, EventKind::Text { prompt: "wave".into() })];
        let t = run_session(&ev, 6, &cfg).unwrap();
        assert_eq!(t.records[4].stamp, base.records[4].stamp);
        assert_ne!(t.records[5].stamp.text_hash, base.records[5].stamp.text_hash);
        let marker = latent_hash(&TextEncoder { d_cond: cfg.model.d_cond, n_tokens: cfg.text_tokens }.encode("wave"));
        assert_eq!(t.records[5].stamp.text_hash, marker);
    }

    #[test]
    fn last_writer_wins_within_a_chunk() {
        let cfg = tiny_cfg();
        let ev = [
            ControlEvent::new(10.0, EventKind::Text { prompt: "a".into() }),
            ControlEvent::new(20.0, EventKind::Text { prompt: "b".into() }),
        ];
        let t = run_session(&ev, 3, &cfg).unwrap();
        let enc = TextEncoder { d_cond: cfg.model.d_cond, n_tokens: cfg.text_tokens };
        assert_eq!(t.records[1].stamp.text_hash, latent_hash(&enc.encode("b")));
    }

    #[test]
    fn grace_period_and_cancellation() {
        let cfg = tiny_cfg();
        let base = run_session(&[], 7, &cfg).unwrap();
        let b = |k: usize| base.records[k].timings.gen.start;
        // speech events during warmup are table no-ops, so start after it
        let ev = [
            ControlEvent::new(b(3) + 50.0, EventKind::UserSpeechStart),
            // effective 200 ms after boundary 5: without the grace it would land there
            ControlEvent::new(b(5) + 200.0 - cfg.grace_ms, EventKind::UserSpeechEnd),
        ];
        let t = run_session(&ev, 7, &cfg).unwrap();
        use SessionState::*;
        assert_eq!(t.states(), vec![Warmup, Warmup, Warmup, Idle, Listening, Listening, Idle]);
        let mut ev2 = ev.to_vec();
        ev2.push(ControlEvent::new(b(5) - 100.0, EventKind::UserSpeechStart));
        let t2 = run_session(&ev2, 7, &cfg).unwrap();
        assert_eq!(t2.states()[4..], [Listening, Listening, Listening]);
    }

    #[test]
    fn frozen_playback_stalls_after_lookahead() {
        let cfg = SessionConfig {
            playback: PlaybackMode::Frozen,
            ..tiny_cfg()
        };
        let t = run_session(&[], 10, &cfg).unwrap();
        // 3 warmup chunks count as played, then L = 2 more
        assert_eq!(t.records.len(), 5);
        assert_eq!(t.stalled_at, Some(5));
        assert!(t.lookahead_respected());
    }

    #[test]
    fn acked_playback_follows_acks() {
        let cfg = SessionConfig {
            playback: PlaybackMode::Acked,
            ..tiny_cfg()
        };
        let ev = [
            ControlEvent::new(5000.0, EventKind::PlayAck { chunk: 3 }),
            ControlEvent::new(9000.0, EventKind::PlayAck { chunk: 4 }),
        ];
        let t = run_session(&ev, 10, &cfg).unwrap();
        assert_eq!(t.records.len(), 7);
        assert_eq!(t.records[5].timings.gen.start, 5000.0);
        assert_eq!(t.records[6].timings.gen.start, 9000.0);
        assert!(t.lookahead_respected());
    }

    #[test]
    fn end_terminates_at_next_boundary() {
        let ev = [ControlEvent::new(3000.0, EventKind::End)];
        let t = run_session(&ev, 10, &tiny_cfg()).unwrap();
        assert_eq!(t.final_state, SessionState::Terminated);
        assert_eq!(t.records.len(), 5);
    }

    #[test]
    fn script_parsing() {
        let text = r#"{"at_ms": 5, "kind": "interrupt"}

{"at_ms": 1, "kind": "text", "prompt": "hi"}
{"at_ms": 2, "kind": "audio", "stream": "listen", "k": 0, "samples": [0.0]}"#;
        let ev = parse_script(text).unwrap();
        assert_eq!(ev.len(), 3);
        assert_eq!(ev[0].kind, EventKind::Text { prompt: "hi".into() });
        assert!(parse_script(r#"{"at_ms": 1, "kind": "dance"}"#).is_err());
    }

    #[test]
    fn bad_audio_is_reported_not_fatal() {
        let ev = [ControlEvent::new(
            0.0,
            EventKind::Audio {
                stream: AudioStream::Listen,
                k: 0,
                samples: vec![0.0; 3],
            },
        )];
        let t = run_session(&ev, 3, &tiny_cfg()).unwrap();
        assert_eq!(t.errors.len(), 1);
        assert_eq!(t.records.len(), 3);
    }

    #[test]
    fn wall_clock_session_matches_sim_latents() {
        let cfg = tiny_cfg();
        let sim = run_session(&[], 6, &cfg).unwrap();
        let wall_cfg = SessionConfig {
            clock: Clock::Wall,
            time_scale: 0.005,
            ..cfg
        };
        let wall = run_session(&[], 6, &wall_cfg).unwrap();
        let hashes = |t: &SessionTrace| t.records.iter().map(|r| r.latent_hash.clone()).collect::<Vec<_>>();
        assert_eq!(hashes(&sim), hashes(&wall));
        assert_eq!(sim.states(), wall.states());
        wall.pipeline_trace().check_dependencies().unwrap();
        assert!(wall.lookahead_respected());
    }
}
