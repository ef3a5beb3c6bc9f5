//! Oracles shared by the integration tests.
#![allow(dead_code)]

use lpm_core::denoise::{renoise, NoiseSource, NoiseStream, StreamingGenerator, GeneratorConfig, TimestepSchedule};
use lpm_core::kvcache::{LayerWindow, RetentionPolicy, WindowKv};
use lpm_core::latcore::Tensor2D;
use lpm_core::ropekit::{apply_rope, Position3};
use lpm_core::runtime::{AudioStream, ControlEvent, EventKind, SessionConfig, SessionCore};
use lpm_core::toydit::{Backbone, ChunkInput, CondBundle, ForwardOptions, ModelConfig, Refiner, ToyDit};
use rand::Rng;

/// Per-chunk conditioning from a session fed one second of both audio
/// streams per chunk.
pub fn session_conds(n: usize, seed: u64, model: &ModelConfig) -> Vec<CondBundle> {
    let cfg = SessionConfig {
        seed,
        model: model.clone(),
        ..Default::default()
    };
    let sr = cfg.sample_rate;
    let mut core = SessionCore::new(cfg).unwrap();
    for k in 0..n {
        for stream in [AudioStream::Speak, AudioStream::Listen] {
            let samples = (0..sr).map(|i| ((i + 37 * k) as f32 * 0.013).sin()).collect();
            core.ingest(ControlEvent::new(0.0, EventKind::Audio { stream, k, samples }));
        }
    }
    core.ingest(ControlEvent::new(0.0, EventKind::Text { prompt: "nod".into() }));
    (0..n)
        .map(|k| {
            core.boundary(k as f64 * 700.0, k);
            core.conditioning(k).unwrap().0
        })
        .collect()
}

/// Retained history for `current`: sinks and the recent window, minus `current`.
fn history_ids(current: usize, policy: &RetentionPolicy) -> Vec<usize> {
    (0..current)
        .filter(|&j| j < policy.sink_chunks || j + policy.recent_chunks > current)
        .collect()
}

/// Window assembled from raw pre-RoPE projections, rotated at packed slots.
fn window(model: &ToyDit, cond: &CondBundle, kv: &[Vec<(Tensor2D, Tensor2D)>], ids: &[usize]) -> WindowKv {
    let cfg = model.config();
    let tpc = cfg.tokens_per_chunk;
    let refs = model.reference_window(cond).unwrap();
    let positions: Vec<Position3> = (0..ids.len() * tpc).map(|r| Position3::temporal(r as u64)).collect();
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let (k, v) = if ids.is_empty() {
                (Tensor2D::zeros(0, cfg.d_model), Tensor2D::zeros(0, cfg.d_model))
            } else {
                let ks: Vec<&Tensor2D> = ids.iter().map(|&j| &kv[j][l].0).collect();
                let vs: Vec<&Tensor2D> = ids.iter().map(|&j| &kv[j][l].1).collect();
                (Tensor2D::vstack(&ks).unwrap(), Tensor2D::vstack(&vs).unwrap())
            };
            LayerWindow {
                video_k: apply_rope(&k, &positions, model.rope()).unwrap(),
                video_v: v,
                ref_k: refs.layers[l].ref_k.clone(),
                ref_v: refs.layers[l].ref_v.clone(),
            }
        })
        .collect();
    WindowKv {
        chunk_ids: ids.to_vec(),
        tokens_per_chunk: tpc,
        video_positions: positions,
        ref_positions: refs.ref_positions.clone(),
        layers,
    }
}

fn run(model: &ToyDit, cond: &CondBundle, win: &WindowKv, k: usize, x: &Tensor2D, t: f32) -> (Tensor2D, Vec<(Tensor2D, Tensor2D)>) {
    let input = ChunkInput {
        chunk_index: k,
        tokens: x,
        timestep: t,
    };
    let out = model.forward(&[input], cond, win, ForwardOptions::default()).unwrap();
    (out.output, out.layer_kv)
}

/// Cache-free generation: every chunk's history is rebuilt from the raw
/// projections of all earlier chunks. Returns final latents.
pub fn recompute_rollout(
    backbone: &ToyDit,
    refiner: &ToyDit,
    conds: &[CondBundle],
    seed: u64,
    policy: &RetentionPolicy,
    sched: &TimestepSchedule,
) -> Vec<Tensor2D> {
    let cfg = backbone.config();
    let (rows, cols) = (cfg.tokens_per_chunk, cfg.d_model);
    let noise = NoiseSource::new(seed);
    let mut noisy = Vec::new();
    let mut clean = Vec::new();
    let mut out = Vec::new();
    // references come from the first conditioning seen
    let ref_cond = &conds[0];
    for (k, cond) in conds.iter().enumerate() {
        let ids = history_ids(k, policy);
        let mut with_refs = cond.clone();
        with_refs.ref_tokens = ref_cond.ref_tokens.clone();
        with_refs.ref_slots = ref_cond.ref_slots.clone();

        let win = window(backbone, &with_refs, &noisy, &ids);
        let eps0 = noise.sample(k, NoiseStream::Initial, rows, cols);
        let x_t0 = renoise(&Tensor2D::zeros(rows, cols), sched.t0, &eps0).unwrap();
        let (first, _) = run(backbone, cond, &win, k, &x_t0, sched.t0);
        let x_t1 = renoise(&first, sched.t1, &noise.sample(k, NoiseStream::BackboneRenoise, rows, cols)).unwrap();
        let (second, kv) = run(backbone, cond, &win, k, &x_t1, sched.t1);
        noisy.push(kv);

        let win = window(refiner, &with_refs, &clean, &ids);
        let x_t2 = renoise(&second, sched.t2, &noise.sample(k, NoiseStream::RefinerRenoise, rows, cols)).unwrap();
        let (fin, kv) = run(refiner, cond, &win, k, &x_t2, sched.t2);
        clean.push(kv);
        out.push(fin);
    }
    out
}

pub fn generator(model_seed: u64, seed: u64, cfg: ModelConfig) -> StreamingGenerator {
    let bb = Backbone::new(ToyDit::random(cfg, model_seed).unwrap());
    let rf = Refiner::from_backbone(&bb);
    StreamingGenerator::new(
        bb,
        rf,
        GeneratorConfig {
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

/// Random control script over `n_chunks` seconds of session time.
pub fn fuzz_script(rng: &mut impl Rng, n_chunks: usize, sample_rate: usize) -> Vec<ControlEvent> {
    let horizon = n_chunks as f64 * 1000.0;
    let n = rng.gen_range(0..30);
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        let at = if rng.gen_bool(0.2) {
            // land exactly on a likely boundary
            rng.gen_range(0..n_chunks) as f64 * 700.0
        } else {
            rng.gen_range(0.0..horizon)
        };
        let kind = match rng.gen_range(0..10) {
            0 => EventKind::Text {
                prompt: format!("p{}", rng.gen_range(0..5)),
            },
            1 => EventKind::UserSpeechStart,
            2 => EventKind::UserSpeechEnd,
            3 => EventKind::AgentSpeechStart,
            4 => EventKind::AgentSpeechEnd,
            5 => EventKind::Interrupt,
            6 => EventKind::PlayAck {
                chunk: rng.gen_range(0..n_chunks),
            },
            7 if rng.gen_bool(0.3) => EventKind::End,
            _ => EventKind::Audio {
                stream: if rng.gen_bool(0.5) { AudioStream::Speak } else { AudioStream::Listen },
                k: rng.gen_range(0..n_chunks),
                samples: (0..sample_rate).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            },
        };
        events.push(ControlEvent::new(at, kind));
    }
    events.sort_by(|a, b| a.at_ms.total_cmp(&b.at_ms));
    events
}
