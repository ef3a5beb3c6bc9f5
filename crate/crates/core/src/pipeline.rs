//! Overlapped generator → refiner → decoder pipeline.
//!
//! Dependencies: generator(k) after generator(k−1); refiner(k) after
//! generator(k); decoder(k) after refiner(k). Each stage runs one job at a
//! time. An optional lookahead gate admits generator(k) only while
//! `k − play_head < L`, where `play_head` counts chunks whose playback started.
//!
//! Two clocks share these rules: a single-threaded discrete-event simulator
//! and a wall-clock executor with one thread per stage.

use std::io::Write;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded};
use serde::{Deserialize, Serialize};

use crate::error::{LpmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Generator,
    Refiner,
    Decoder,
}

impl StageName {
    pub const ALL: [StageName; 3] = [StageName::Generator, StageName::Refiner, StageName::Decoder];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latency {
    /// Simulated milliseconds.
    Fixed(f64),
    /// Wall-clock duration of the supplied work.
    Measured,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: StageName,
    pub latency: Latency,
}

/// Three fixed-latency stages in pipeline order.
pub fn fixed_stages(gen_ms: f64, refine_ms: f64, decode_ms: f64) -> [StageSpec; 3] {
    [
        StageSpec {
            name: StageName::Generator,
            latency: Latency::Fixed(gen_ms),
        },
        StageSpec {
            name: StageName::Refiner,
            latency: Latency::Fixed(refine_ms),
        },
        StageSpec {
            name: StageName::Decoder,
            latency: Latency::Fixed(decode_ms),
        },
    ]
}

/// Reported production budgets: generator 700, refiner 700, VAE decoder 180 ms.
pub const DEFAULT_LATENCIES_MS: (f64, f64, f64) = (700.0, 700.0, 180.0);
/// Alternative preset with the kernel-level 1-NFE figure (0.35 s) per model stage.
pub const KERNEL_LATENCIES_MS: (f64, f64, f64) = (350.0, 350.0, 180.0);

pub fn validate_stages(stages: &[StageSpec; 3]) -> Result<()> {
    for (s, expected) in stages.iter().zip(StageName::ALL) {
        if s.name != expected {
            return Err(LpmError::Config(format!("stage order: found {:?} where {expected:?} belongs", s.name)));
        }
        if let Latency::Fixed(ms) = s.latency {
            if !(ms >= 0.0 && ms.is_finite()) {
                return Err(LpmError::Config(format!("{:?} latency {ms} ms", s.name)));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkJob {
    pub chunk_index: usize,
    pub stage: StageName,
    pub t_enqueue: f64,
    pub t_start: f64,
    pub t_finish: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Playback {
    /// Chunk k plays for `chunk_ms` starting when decoded and the previous chunk ended.
    Realtime { chunk_ms: f64 },
    /// Playback never advances.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Maximum chunks generation may lead playback.
    pub lookahead: usize,
    pub playback: Playback,
    /// Leading chunks that are discarded instead of played; they count as
    /// played when their generation is admitted.
    pub warmup_chunks: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            lookahead: 2,
            playback: Playback::Realtime { chunk_ms: 1000.0 },
            warmup_chunks: 0,
        }
    }
}

/// `gen_head − play_head < L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookaheadGate {
    pub lookahead: usize,
    pub gen_head: usize,
    pub play_head: usize,
}

impl LookaheadGate {
    pub fn new(lookahead: usize) -> Self {
        Self {
            lookahead,
            gen_head: 0,
            play_head: 0,
        }
    }

    pub fn admit_generation(&self) -> bool {
        self.gen_head.saturating_sub(self.play_head) < self.lookahead
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Admission {
    pub chunk_index: usize,
    pub time: f64,
    pub gen_head: usize,
    pub play_head: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    Sim,
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub clock: Clock,
    /// Jobs in completion order per stage, stages interleaved by chunk.
    pub jobs: Vec<ChunkJob>,
    pub admissions: Vec<Admission>,
    /// Playback start time per played chunk index.
    pub playback: Vec<(usize, f64)>,
    pub lookahead: Option<usize>,
    /// Chunks that could never be admitted (frozen playback).
    pub stalled_at: Option<usize>,
}

impl PipelineTrace {
    pub fn job(&self, stage: StageName, chunk: usize) -> Option<&ChunkJob> {
        self.jobs.iter().find(|j| j.stage == stage && j.chunk_index == chunk)
    }

    pub fn stage_jobs(&self, stage: StageName) -> Vec<&ChunkJob> {
        let mut v: Vec<&ChunkJob> = self.jobs.iter().filter(|j| j.stage == stage).collect();
        v.sort_by_key(|j| j.chunk_index);
        v
    }

    pub fn completed_chunks(&self) -> usize {
        self.stage_jobs(StageName::Decoder).len()
    }

    /// Chunk order in which each stage executed.
    pub fn stage_orders(&self) -> [Vec<usize>; 3] {
        StageName::ALL.map(|s| {
            let mut v: Vec<&ChunkJob> = self.jobs.iter().filter(|j| j.stage == s).collect();
            v.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.chunk_index.cmp(&b.chunk_index)));
            v.iter().map(|j| j.chunk_index).collect()
        })
    }

    /// Prerequisites finish before dependants start; timestamps are ordered.
    pub fn check_dependencies(&self) -> Result<()> {
        for j in &self.jobs {
            if !(j.t_enqueue <= j.t_start && j.t_start <= j.t_finish) {
                return Err(LpmError::Contract(format!("job {j:?} timestamps out of order")));
            }
            let prereqs: Vec<(StageName, usize)> = match j.stage {
                StageName::Generator => j.chunk_index.checked_sub(1).map(|p| (StageName::Generator, p)).into_iter().collect(),
                StageName::Refiner => vec![(StageName::Generator, j.chunk_index)],
                StageName::Decoder => vec![(StageName::Refiner, j.chunk_index)],
            };
            for (stage, chunk) in prereqs {
                let p = self
                    .job(stage, chunk)
                    .ok_or_else(|| LpmError::Contract(format!("{j:?} lacks prerequisite {stage:?}({chunk})")))?;
                if p.t_finish > j.t_start {
                    return Err(LpmError::Contract(format!("{j:?} starts before {p:?} finishes")));
                }
            }
        }
        Ok(())
    }

    /// Per stage, `[t_start, t_finish)` intervals are disjoint.
    pub fn check_capacity(&self) -> Result<()> {
        for s in StageName::ALL {
            let mut v: Vec<&ChunkJob> = self.jobs.iter().filter(|j| j.stage == s).collect();
            v.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
            for w in v.windows(2) {
                if w[1].t_start < w[0].t_finish {
                    return Err(LpmError::Contract(format!("{s:?} overlaps: {:?} and {:?}", w[0], w[1])));
                }
            }
        }
        Ok(())
    }

    /// `gen_head − play_head ≤ L` at every admission.
    pub fn check_lookahead(&self) -> Result<()> {
        if let Some(l) = self.lookahead {
            for a in &self.admissions {
                if a.gen_head - a.play_head.min(a.gen_head) >= l {
                    return Err(LpmError::Contract(format!("admission {a:?} exceeds lookahead {l}")));
                }
            }
        }
        Ok(())
    }

    pub fn write_ndjson(&self, mut w: impl Write) -> Result<()> {
        for j in &self.jobs {
            serde_json::to_writer(&mut w, j)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn fixed_ms(spec: &StageSpec) -> Result<f64> {
    match spec.latency {
        Latency::Fixed(ms) => Ok(ms),
        Latency::Measured => Err(LpmError::Config(format!(
            "{:?} latency is measured; the simulator needs a duration source",
            spec.name
        ))),
    }
}

/// Discrete-event simulation with fixed latencies.
pub fn simulate(n_chunks: usize, stages: &[StageSpec; 3], gate: Option<GateConfig>) -> Result<PipelineTrace> {
    validate_stages(stages)?;
    let lat = [fixed_ms(&stages[0])?, fixed_ms(&stages[1])?, fixed_ms(&stages[2])?];
    simulate_with(n_chunks, gate, |stage, _| lat[stage.index()])
}

/// Discrete-event simulation with per-job durations from `duration_ms`.
pub fn simulate_with(
    n_chunks: usize,
    gate: Option<GateConfig>,
    mut duration_ms: impl FnMut(StageName, usize) -> f64,
) -> Result<PipelineTrace> {
    if n_chunks == 0 {
        return Err(LpmError::Contract("pipeline run needs at least one chunk".into()));
    }
    let mut jobs = Vec::with_capacity(3 * n_chunks);
    let mut admissions = Vec::new();
    let mut playback: Vec<(usize, f64)> = Vec::new();
    // play_start[j]; None means never
    let mut play_start: Vec<Option<f64>> = Vec::with_capacity(n_chunks);
    let mut free = [0.0f64; 3];
    let mut prev_play_end: f64 = f64::NEG_INFINITY;
    let mut stalled_at = None;
    for k in 0..n_chunks {
        let admit = match gate {
            None => 0.0,
            Some(g) => {
                if k < g.lookahead {
                    0.0
                } else {
                    match play_start[k - g.lookahead] {
                        Some(t) => t,
                        None => {
                            stalled_at = Some(k);
                            break;
                        }
                    }
                }
            }
        };
        let g_start = admit.max(free[0]);
        if let Some(g) = gate {
            let play_head = play_start.iter().filter(|p| p.is_some_and(|t| t <= g_start)).count();
            admissions.push(Admission {
                chunk_index: k,
                time: g_start,
                gen_head: k,
                play_head,
            });
            let _ = g;
        }
        let g_finish = g_start + duration_ms(StageName::Generator, k);
        jobs.push(ChunkJob {
            chunk_index: k,
            stage: StageName::Generator,
            t_enqueue: admit,
            t_start: g_start,
            t_finish: g_finish,
        });
        free[0] = g_finish;
        let r_start = g_finish.max(free[1]);
        let r_finish = r_start + duration_ms(StageName::Refiner, k);
        jobs.push(ChunkJob {
            chunk_index: k,
            stage: StageName::Refiner,
            t_enqueue: g_finish,
            t_start: r_start,
            t_finish: r_finish,
        });
        free[1] = r_finish;
        let d_start = r_finish.max(free[2]);
        let d_finish = d_start + duration_ms(StageName::Decoder, k);
        jobs.push(ChunkJob {
            chunk_index: k,
            stage: StageName::Decoder,
            t_enqueue: r_finish,
            t_start: d_start,
            t_finish: d_finish,
        });
        free[2] = d_finish;
        let ps = match gate {
            Some(g) if k < g.warmup_chunks => Some(g_start),
            Some(GateConfig {
                playback: Playback::Frozen,
                ..
            }) => None,
            Some(GateConfig {
                playback: Playback::Realtime { chunk_ms },
                ..
            }) => {
                let t = d_finish.max(prev_play_end);
                prev_play_end = t + chunk_ms;
                playback.push((k, t));
                Some(t)
            }
            None => None,
        };
        play_start.push(ps);
    }
    Ok(PipelineTrace {
        clock: Clock::Sim,
        jobs,
        admissions,
        playback,
        lookahead: gate.map(|g| g.lookahead),
        stalled_at,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ttfr_ms: f64,
    /// Mean decoder inter-completion time over the second half of the run.
    pub steady_period_ms: Option<f64>,
    /// Busy time / trace span, in generator, refiner, decoder order.
    pub utilization: [f64; 3],
    pub span_ms: f64,
    pub chunks: usize,
}

pub fn metrics(trace: &PipelineTrace) -> Result<Metrics> {
    let dec = trace.stage_jobs(StageName::Decoder);
    let first = dec.first().ok_or_else(|| LpmError::Contract("empty trace".into()))?;
    let ttfr = first.t_finish;
    let finishes: Vec<f64> = dec.iter().map(|j| j.t_finish).collect();
    let steady = (finishes.len() >= 2).then(|| {
        let from = (finishes.len() / 2).min(finishes.len() - 2);
        let diffs: Vec<f64> = finishes[from..].windows(2).map(|w| w[1] - w[0]).collect();
        diffs.iter().sum::<f64>() / diffs.len() as f64
    });
    let t0 = trace.jobs.iter().map(|j| j.t_start).fold(f64::INFINITY, f64::min);
    let t1 = trace.jobs.iter().map(|j| j.t_finish).fold(f64::NEG_INFINITY, f64::max);
    let span = t1 - t0;
    let utilization = StageName::ALL.map(|s| {
        let busy: f64 = trace.jobs.iter().filter(|j| j.stage == s).map(|j| j.t_finish - j.t_start).sum();
        if span > 0.0 {
            busy / span
        } else {
            0.0
        }
    });
    Ok(Metrics {
        ttfr_ms: ttfr,
        steady_period_ms: steady,
        utilization,
        span_ms: span,
        chunks: dec.len(),
    })
}

/// `slack_k = k·chunk_ms + TTFR − decoder(k).t_finish`.
pub fn realtime_margin(trace: &PipelineTrace, chunk_duration_ms: f64) -> Result<Vec<f64>> {
    let dec = trace.stage_jobs(StageName::Decoder);
    let ttfr = dec.first().ok_or_else(|| LpmError::Contract("empty trace".into()))?.t_finish;
    Ok(dec
        .iter()
        .map(|j| j.chunk_index as f64 * chunk_duration_ms + ttfr - j.t_finish)
        .collect())
}

/// Work performed by the wall-clock executor. Each closure runs on its own
/// thread and owns whatever state it captures.
pub struct StageWork<G, R, D> {
    pub generate: G,
    pub refine: R,
    pub decode: D,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WallOptions {
    /// Multiplier applied to fixed latencies and playback durations.
    pub time_scale: f64,
    /// Queue bound between stages.
    pub queue_bound: usize,
}

impl Default for WallOptions {
    fn default() -> Self {
        Self {
            time_scale: 1.0,
            queue_bound: 2,
        }
    }
}

fn sleep_ms(ms: f64) {
    if ms > 0.0 {
        thread::sleep(Duration::from_secs_f64(ms / 1e3));
    }
}

/// Wall-clock run with placeholder work (sleeps for fixed latencies).
pub fn run_wall(
    n_chunks: usize,
    stages: &[StageSpec; 3],
    gate: Option<GateConfig>,
    opts: WallOptions,
) -> Result<PipelineTrace> {
    let work = StageWork {
        generate: |_k: usize| Ok(()),
        refine: |_k: usize, _g: ()| Ok(()),
        decode: |_k: usize, _r: ()| Ok(()),
    };
    run_wall_with(n_chunks, stages, gate, opts, work).map(|(t, _)| t)
}

/// Wall-clock run over real work. Fixed-latency stages pad their work with a
/// sleep up to the scaled latency; measured stages take as long as the work.
/// Times in the trace are unscaled milliseconds from the run start.
pub fn run_wall_with<G, R, D, GO, RO, DO>(
    n_chunks: usize,
    stages: &[StageSpec; 3],
    gate: Option<GateConfig>,
    opts: WallOptions,
    work: StageWork<G, R, D>,
) -> Result<(PipelineTrace, Vec<DO>)>
where
    G: FnMut(usize) -> Result<GO> + Send,
    R: FnMut(usize, GO) -> Result<RO> + Send,
    D: FnMut(usize, RO) -> Result<DO> + Send,
    GO: Send,
    RO: Send,
    DO: Send,
{
    validate_stages(stages)?;
    if n_chunks == 0 {
        return Err(LpmError::Contract("pipeline run needs at least one chunk".into()));
    }
    if !(opts.time_scale > 0.0) {
        return Err(LpmError::Config("time_scale must be positive".into()));
    }
    let scale = opts.time_scale;
    let start = Instant::now();
    let now = move || start.elapsed().as_secs_f64() * 1e3 / scale;
    let timed = move |spec: &StageSpec, t_start: f64| {
        if let Latency::Fixed(ms) = spec.latency {
            let remaining = t_start + ms - now();
            sleep_ms(remaining * scale);
        }
    };
    let bound = opts.queue_bound.max(1);
    let (g_tx, g_rx) = bounded::<(usize, f64, GO)>(bound);
    let (r_tx, r_rx) = bounded::<(usize, f64, RO)>(bound);
    let (d_tx, d_rx) = unbounded::<(usize, f64, DO)>();
    let (job_tx, job_rx) = unbounded::<ChunkJob>();
    let (play_tx, play_rx) = unbounded::<(usize, f64)>();
    let (adm_tx, adm_rx) = unbounded::<Admission>();
    let StageWork {
        mut generate,
        mut refine,
        mut decode,
    } = work;
    let [g_spec, r_spec, d_spec] = *stages;

    let result: Result<(Vec<DO>, Option<usize>)> = thread::scope(|s| {
        let gen_jobs = job_tx.clone();
        let gen = s.spawn(move || -> Result<Option<usize>> {
            let mut play_head = 0usize;
            for k in 0..n_chunks {
                let admit = if let Some(g) = gate {
                    loop {
                        while play_rx.try_recv().is_ok() {
                            play_head += 1;
                        }
                        if k - play_head.min(k) < g.lookahead {
                            break;
                        }
                        if matches!(g.playback, Playback::Frozen) {
                            return Ok(Some(k));
                        }
                        match play_rx.recv() {
                            Ok(_) => play_head += 1,
                            Err(_) => return Ok(Some(k)),
                        }
                    }
                    let t = now();
                    let _ = adm_tx.send(Admission {
                        chunk_index: k,
                        time: t,
                        gen_head: k,
                        play_head,
                    });
                    if k < g.warmup_chunks {
                        play_head += 1;
                    }
                    t
                } else {
                    0.0
                };
                let t_start = now();
                let out = generate(k)?;
                timed(&g_spec, t_start);
                let t_finish = now();
                let _ = gen_jobs.send(ChunkJob {
                    chunk_index: k,
                    stage: StageName::Generator,
                    t_enqueue: admit.min(t_start),
                    t_start,
                    t_finish,
                });
                if g_tx.send((k, t_finish, out)).is_err() {
                    break;
                }
            }
            Ok(None)
        });
        let ref_jobs = job_tx.clone();
        let refi = s.spawn(move || -> Result<()> {
            for (k, enq, g) in g_rx {
                let t_start = now();
                let out = refine(k, g)?;
                timed(&r_spec, t_start);
                let t_finish = now();
                let _ = ref_jobs.send(ChunkJob {
                    chunk_index: k,
                    stage: StageName::Refiner,
                    t_enqueue: enq,
                    t_start,
                    t_finish,
                });
                if r_tx.send((k, t_finish, out)).is_err() {
                    break;
                }
            }
            Ok(())
        });
        let dec_jobs = job_tx;
        let dec = s.spawn(move || -> Result<()> {
            for (k, enq, r) in r_rx {
                let t_start = now();
                let out = decode(k, r)?;
                timed(&d_spec, t_start);
                let t_finish = now();
                let _ = dec_jobs.send(ChunkJob {
                    chunk_index: k,
                    stage: StageName::Decoder,
                    t_enqueue: enq,
                    t_start,
                    t_finish,
                });
                if d_tx.send((k, t_finish, out)).is_err() {
                    break;
                }
            }
            Ok(())
        });
        // playback runs on this thread
        let mut outputs = Vec::new();
        let mut prev_end = f64::NEG_INFINITY;
        for (k, finish, out) in d_rx {
            outputs.push(out);
            if let Some(GateConfig {
                playback: Playback::Realtime { chunk_ms },
                warmup_chunks,
                ..
            }) = gate
            {
                if k < warmup_chunks {
                    continue;
                }
                let t = finish.max(prev_end);
                sleep_ms((t - now()) * scale);
                let t = now().max(t);
                prev_end = t + chunk_ms;
                let _ = play_tx.send((k, t));
            }
        }
        drop(play_tx);
        let stalled = gen.join().expect("generator thread")?;
        refi.join().expect("refiner thread")?;
        dec.join().expect("decoder thread")?;
        Ok((outputs, stalled))
    });
    let (outputs, stalled_at) = result?;
    let mut jobs: Vec<ChunkJob> = job_rx.try_iter().collect();
    jobs.sort_by_key(|j| (j.chunk_index, j.stage));
    let admissions: Vec<Admission> = adm_rx.try_iter().collect();
    Ok((
        PipelineTrace {
            clock: Clock::Wall,
            jobs,
            admissions,
            playback: Vec::new(),
            lookahead: gate.map(|g| g.lookahead),
            stalled_at,
        },
        outputs,
    ))
}
