//! Exit-gate criteria A1–A11. Prints one PASS/FAIL line per criterion to
//! stderr (uncaptured), then fails if any criterion failed.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::thread;
use std::time::Instant;

use lpm_core::denoise::{NfeCount, TimestepSchedule};
use lpm_core::distill::{dmd_grad, gradient_check, run_curriculum, LabConfig, MixtureTeacher, Mlp, V2};
use lpm_core::kvcache::{retained_set, RetentionPolicy};
use lpm_core::latcore::{LatentChunk, Tensor2D};
use lpm_core::pipeline::{fixed_stages, metrics, realtime_margin, simulate};
use lpm_core::ropekit::RefType;
use lpm_core::runtime::audio::{chunk_audio, AudioBuffer};
use lpm_core::runtime::{run_session, PlaybackMode, SessionConfig, SessionTrace};
use lpm_core::toydit::{AudioFeatures, ChunkInput, CondBundle, ForwardOptions, ModelConfig, ToyDit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// A1: cached generation vs cache-free recompute over an 8-chunk rollout.
fn a1() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let conds = common::session_conds(8, 9, &cfg);
    let mut g = common::generator(3, 9, cfg);
    let bb = g.backbone_stage().backbone().model().clone();
    let rf = g.refiner_stage().refiner().model().clone();
    let cached: Vec<Tensor2D> = conds.iter().map(|c| g.generate_chunk(c).unwrap().0.tokens).collect();
    let oracle = common::recompute_rollout(&bb, &rf, &conds, 9, &RetentionPolicy::default(), &TimestepSchedule::default());
    let d = cached.iter().zip(&oracle).map(|(a, b)| a.max_abs_diff(b)).fold(0.0f32, f32::max);
    let secs = start.elapsed().as_secs_f64();
    ensure(d < 1e-5, format!("max|Δ| = {d:.3e} (need < 1e-5)"))?;
    ensure(secs < 10.0, format!("took {secs:.2} s (need < 10 s)"))?;
    Ok(format!("max|Δ| = {d:.2e} < 1e-5, {secs:.2} s < 10 s"))
}

// A2: retained set of 5 and a constant stored-entry count from chunk 4 on.
fn a2() -> Outcome {
    let p = RetentionPolicy::default();
    for k in 4..=200 {
        let s = retained_set(k, &p);
        ensure(s.len() == 5, format!("|retained_set({k})| = {}", s.len()))?;
    }
    let cfg = ModelConfig::tiny();
    let n_layers = cfg.n_layers;
    let conds = common::session_conds(16, 1, &cfg);
    let mut g = common::generator(1, 1, cfg);
    for (k, c) in conds.iter().enumerate() {
        g.generate_chunk(c).unwrap();
        let (nb, nr) = (
            g.backbone_stage().cache().entry_count(),
            g.refiner_stage().cache().entry_count(),
        );
        if k >= 4 {
            ensure(nb == 5 * n_layers && nr == 5 * n_layers, format!("chunk {k}: entries {nb}/{nr}"))?;
        }
    }
    Ok(format!("|retained| = 5 for k in 4..=200; entries = {} per cache from chunk 4", 5 * n_layers))
}

// A3: perturbing chunk j never moves outputs of chunks before j.
fn a3() -> Outcome {
    let cfg = ModelConfig::default();
    let tpc = cfg.tokens_per_chunk;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let m = ToyDit::random(cfg.clone(), 17).unwrap();
    let cond = CondBundle {
        text_tokens: rand_tensor(&mut rng, 3, cfg.d_cond),
        speak_audio: AudioFeatures {
            frames: rand_tensor(&mut rng, 160, cfg.d_cond),
            t0: 0.0,
        },
        listen_audio: AudioFeatures {
            frames: rand_tensor(&mut rng, 160, cfg.d_cond),
            t0: 0.0,
        },
        ref_tokens: rand_tensor(&mut rng, 2, cfg.d_model),
        ref_slots: vec![(RefType::Expression, 1), (RefType::View, 1)],
        speak_muted: false,
        listen_muted: false,
    };
    let mut worst = 0.0f32;
    let mut cases = 0;
    for n in 1..=6 {
        let xs: Vec<LatentChunk> = (0..n)
            .map(|i| LatentChunk::new(i, rand_tensor(&mut rng, tpc, cfg.d_model), 1.0))
            .collect();
        let base = m.full_forward(&xs, &cond, ForwardOptions::default()).unwrap().output;
        for j in 0..n {
            let mut ys = xs.clone();
            ys[j].tokens = rand_tensor(&mut rng, tpc, cfg.d_model);
            let out = m.full_forward(&ys, &cond, ForwardOptions::default()).unwrap().output;
            if j > 0 {
                let d = base.slice_rows(0, j * tpc).max_abs_diff(&out.slice_rows(0, j * tpc));
                worst = worst.max(d);
            }
            let own = base.slice_rows(j * tpc, tpc).max_abs_diff(&out.slice_rows(j * tpc, tpc));
            ensure(own > 0.0, format!("n={n} j={j}: perturbation had no effect"))?;
            cases += 1;
        }
    }
    ensure(worst <= 1e-6, format!("future influence {worst:.3e} (need ≤ 1e-6)"))?;
    Ok(format!("{cases} perturbations over n ≤ 6, max past change {worst:.1e} ≤ 1e-6"))
}

// A4: (700, 700, 180) ms stages over 20 chunks.
fn a4() -> Outcome {
    let trace = simulate(20, &fixed_stages(700.0, 700.0, 180.0), None).unwrap();
    let m = metrics(&trace).unwrap();
    let period = m.steady_period_ms.ok_or("no steady period")?;
    let slack = realtime_margin(&trace, 1000.0).unwrap();
    ensure(m.ttfr_ms == 1580.0, format!("TTFR {} ms", m.ttfr_ms))?;
    ensure((period - 700.0).abs() <= 0.05 * 700.0, format!("period {period} ms"))?;
    ensure(slack[1..].iter().all(|s| *s > 0.0), format!("slack {slack:?}"))?;
    let min = slack[1..].iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("TTFR = {} ms, period = {period} ms (±5%), min slack after chunk 0 = {min} ms", m.ttfr_ms))
}

// A5: 2 backbone + 1 refiner evaluations for every chunk.
fn a5() -> Outcome {
    let trace = run_session(&[], 20, &SessionConfig::default()).unwrap();
    let want = NfeCount { backbone: 2, refiner: 1 };
    ensure(trace.records.len() == 20, "session stopped early")?;
    ensure(trace.records.iter().all(|r| r.nfe == want), "NFE mismatch in session")?;
    let cfg = ModelConfig::tiny();
    let conds = common::session_conds(12, 2, &cfg);
    let mut g = common::generator(2, 2, cfg);
    for c in &conds {
        let (_, rec) = g.generate_chunk(c).unwrap();
        ensure(rec.nfe == want, format!("chunk {}: {:?}", rec.index, rec.nfe))?;
    }
    ensure(
        g.backbone_stage().backbone().evaluations() == 24 && g.refiner_stage().refiner().evaluations() == 12,
        "model evaluation counters disagree",
    )?;
    Ok("32 chunks, each 2 backbone + 1 refiner evaluations".into())
}

// A6: 3 s audio windows with a 1 s stride.
fn a6() -> Outcome {
    let sr = 1600;
    let samples: Vec<f32> = (0..sr * 61).map(|i| i as f32).collect();
    let buf = AudioBuffer::from_samples(sr, &samples);
    let w0 = chunk_audio(&buf, 0).unwrap();
    ensure(w0.samples.len() == 3 * sr, "window length")?;
    ensure(w0.samples[..2 * sr].iter().all(|x| *x == 0.0), "step-0 history not zero-padded")?;
    ensure(w0.samples[2 * sr..] == samples[..sr], "step-0 current second")?;
    ensure(w0.start_sample == -2 * sr as i64, "step-0 start")?;
    for k in 0..60 {
        let a = chunk_audio(&buf, k).unwrap();
        let b = chunk_audio(&buf, k + 1).unwrap();
        ensure(b.start_sample - a.start_sample == sr as i64, format!("stride at {k}"))?;
        ensure(a.samples[sr..] == b.samples[..2 * sr], format!("overlap at {k}"))?;
    }
    Ok("60 steps: 2 s shared per pair, 1 s stride, step 0 zero-padded".into())
}

fn isolation_violation(trace: &SessionTrace, events: &[lpm_core::runtime::ControlEvent], cfg: &SessionConfig, k: usize) -> Option<String> {
    let rec = &trace.records[k];
    let start = rec.timings.gen.start;
    let early: Vec<_> = events.iter().filter(|e| e.at_ms <= start).cloned().collect();
    let again = run_session(&early, k + 1, cfg).unwrap();
    let other = again.records.get(k)?;
    (other.stamp != rec.stamp || other.state != rec.state).then(|| {
        format!(
            "chunk {k}: stamp changed by events after generation start ({} vs {})",
            rec.stamp.cond_hash, other.stamp.cond_hash
        )
    })
}

// A7: 1000 fuzzed sessions.
fn a7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut chunks = 0;
    let mut probes = 0;
    for s in 0..1000 {
        let playback = [PlaybackMode::Realtime, PlaybackMode::Frozen, PlaybackMode::Acked][s % 3];
        let cfg = SessionConfig {
            model: ModelConfig::tiny(),
            seed: rng.gen(),
            playback,
            lookahead: rng.gen_range(1..=3),
            ..Default::default()
        };
        let n = rng.gen_range(4..14);
        let events = common::fuzz_script(&mut rng, n, cfg.sample_rate);
        let trace = run_session(&events, n, &cfg).unwrap();
        for r in &trace.records {
            ensure(
                r.gen_head >= r.play_head.min(r.gen_head) && r.gen_head - r.play_head.min(r.gen_head) <= cfg.lookahead,
                format!("session {s} chunk {}: gen {} play {} L {}", r.index, r.gen_head, r.play_head, cfg.lookahead),
            )?;
        }
        ensure(trace.lookahead_respected(), format!("session {s}: lookahead"))?;
        chunks += trace.records.len();
        if trace.records.is_empty() {
            continue;
        }
        for _ in 0..2 {
            let k = rng.gen_range(0..trace.records.len());
            if let Some(v) = isolation_violation(&trace, &events, &cfg, k) {
                return Err(format!("session {s}: {v}"));
            }
            probes += 1;
        }
    }
    Ok(format!("1000 sessions, {chunks} chunks, {probes} isolation probes; gen−play ≤ L throughout"))
}

// A8: audio routing by layer parity, 100 random models.
fn a8() -> Outcome {
    let cfg = ModelConfig::default();
    let tpc = cfg.tokens_per_chunk;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for seed in 0..100 {
        let m = ToyDit::random(cfg.clone(), seed).unwrap();
        let cond = CondBundle {
            text_tokens: rand_tensor(&mut rng, 3, cfg.d_cond),
            speak_audio: AudioFeatures {
                frames: rand_tensor(&mut rng, 64, cfg.d_cond),
                t0: 0.0,
            },
            listen_audio: AudioFeatures {
                frames: rand_tensor(&mut rng, 64, cfg.d_cond),
                t0: 0.0,
            },
            ref_tokens: rand_tensor(&mut rng, 1, cfg.d_model),
            ref_slots: vec![(RefType::Expression, 1)],
            speak_muted: false,
            listen_muted: false,
        };
        let xs: Vec<LatentChunk> = (0..2)
            .map(|i| LatentChunk::new(i, rand_tensor(&mut rng, tpc, cfg.d_model), 1.0))
            .collect();
        let opts = ForwardOptions {
            capture_cross: true,
            ..Default::default()
        };
        let base = m.full_forward(&xs, &cond, opts).unwrap();
        let inputs: Vec<ChunkInput<'_>> = xs
            .iter()
            .map(|c| ChunkInput {
                chunk_index: c.chunk_index,
                tokens: &c.tokens,
                timestep: c.timestep,
            })
            .collect();
        let (sm, lm) = m.audio_masks(&inputs, &cond).unwrap();
        for (perturb_listen, same_parity) in [(true, 0), (false, 1)] {
            let mut other = cond.clone();
            let target = if perturb_listen { &mut other.listen_audio } else { &mut other.speak_audio };
            target.frames = rand_tensor(&mut rng, 64, cfg.d_cond);
            for layer in 0..cfg.n_layers {
                let c = m.cross_attention(layer, &base.cross_inputs[layer], &other, &sm, &lm).unwrap();
                if layer % 2 == same_parity {
                    ensure(c == base.cross[layer], format!("model {seed} layer {layer}: output moved"))?;
                } else {
                    ensure(c.a_audio != base.cross[layer].a_audio, format!("model {seed} layer {layer}: stream ignored"))?;
                }
            }
        }
    }
    Ok("100 models: listen perturbation leaves even layers bit-identical, speak leaves odd".into())
}

// A9: full curriculum on the 2-mode teacher.
fn a9() -> Outcome {
    let start = Instant::now();
    let (_, r) = run_curriculum(LabConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let fs = &r.full_stack;
    let detail = format!(
        "{secs:.0} s; occupancy {:.3}/{:.3}; mean err {:.3}/{:.3} σ; drift {:.3} -> {:.3} ({:.1}%); W2 3-NFE {:.4} vs 2-NFE {:.4}",
        fs.occupancy[0],
        fs.occupancy[1],
        fs.mean_error_sigma[0],
        fs.mean_error_sigma[1],
        r.stage2_backbone.drift,
        r.stage3_backbone.drift,
        100.0 * r.drift_improvement,
        fs.sliced_w2,
        r.backbone_only.sliced_w2
    );
    ensure(secs < 600.0, format!("over 10 min: {detail}"))?;
    ensure(r.modes_occupied(), format!("(a) occupancy < 30%: {detail}"))?;
    ensure(r.mode_means_accurate(), format!("(b) mean error ≥ 0.15σ: {detail}"))?;
    ensure(r.drift_improved(), format!("(c) drift gain < 20%: {detail}"))?;
    ensure(r.refiner_helps(), format!("(d) refiner worse: {detail}"))?;
    Ok(detail)
}

// A10: gradient and score oracles.
fn a10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_grad = 0.0f64;
    for seed in 0..5 {
        let m = Mlp::new(&[11, 16, 16, 2], seed, 1.0).unwrap();
        let x: Vec<f64> = (0..3 * 11).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst_grad = worst_grad.max(gradient_check(&m, &x, &c, 1e-5));
    }
    ensure(worst_grad < 1e-3, format!("backprop rel-err {worst_grad:.2e}"))?;

    let t = MixtureTeacher::default();
    let h = 1e-5;
    let mut worst_score = 0.0f64;
    for _ in 0..500 {
        let x: V2 = [rng.gen_range(-4.0..4.0), rng.gen_range(-3.0..3.0)];
        let prev: V2 = [rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)];
        let tt = rng.gen_range(0.0..0.99);
        let s = t.real_score(x, tt, prev);
        for d in 0..2 {
            let (mut up, mut dn) = (x, x);
            up[d] += h;
            dn[d] -= h;
            let fd = (t.log_density(up, tt, prev) - t.log_density(dn, tt, prev)) / (2.0 * h);
            worst_score = worst_score.max((fd - s[d]).abs());
        }
    }
    ensure(worst_score < 1e-4, format!("score FD error {worst_score:.2e}"))?;

    let x: Vec<V2> = (0..256).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
    let prev: Vec<V2> = (0..256).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
    let ts: Vec<f64> = (0..256).map(|_| rng.gen_range(0.02..0.98)).collect();
    let eps: Vec<V2> = (0..256).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
    let g = dmd_grad(&t, &t, &x, &prev, &ts, &eps);
    ensure(g.iter().all(|v| *v == [0.0, 0.0]), "DMD gradient not exactly zero")?;
    Ok(format!(
        "backprop rel-err {worst_grad:.1e} < 1e-3, score FD {worst_score:.1e} < 1e-4, DMD(fake ≡ real) = 0 exactly"
    ))
}

// A11: bit-identical reruns and the (5, 20) prefix property.
fn a11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SessionConfig {
        seed: 1234,
        ..Default::default()
    };
    let events: Vec<_> = common::fuzz_script(&mut rng, 20, cfg.sample_rate)
        .into_iter()
        .filter(|e| e.kind != lpm_core::runtime::EventKind::End)
        .collect();
    let ndjson = |n: usize| {
        let mut buf = Vec::new();
        run_session(&events, n, &cfg).unwrap().write_ndjson(&mut buf).unwrap();
        buf
    };
    ensure(ndjson(20) == ndjson(20), "reruns differ")?;
    let long = run_session(&events, 20, &cfg).unwrap();
    let short = run_session(&events, 5, &cfg).unwrap();
    ensure(long.records.len() == 20 && short.records.len() == 5, "sessions stopped early")?;
    ensure(long.records[..5] == short.records[..], "5-chunk run is not a prefix of the 20-chunk run")?;

    let model = ModelConfig::default();
    let conds = common::session_conds(20, 5, &model);
    let mut a = common::generator(4, 5, model.clone());
    let mut b = common::generator(4, 5, model);
    let la: Vec<_> = conds.iter().map(|c| a.generate_chunk(c).unwrap().0).collect();
    let lb: Vec<_> = conds[..5].iter().map(|c| b.generate_chunk(c).unwrap().0).collect();
    ensure(la[..5] == lb[..], "generator prefix differs")?;
    Ok(format!("{} events; identical NDJSON on rerun; (k, n) = (5, 20) prefix holds", events.len()))
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let distill = thread::spawn(|| guarded(a9));
    let quick: [Criterion; 10] = [
        ("A1", "pre-RoPE cache equivalence", a1),
        ("A2", "retention arithmetic", a2),
        ("A3", "causality", a3),
        ("A4", "pipeline timing", a4),
        ("A5", "NFE accounting", a5),
        ("A6", "audio chunking", a6),
        ("A7", "boundary isolation", a7),
        ("A8", "parity routing", a8),
        ("A10", "gradient and score oracles", a10),
        ("A11", "determinism and prefix", a11),
    ];
    let mut results: Vec<(&str, &str, Outcome)> = quick.iter().map(|(id, name, f)| (*id, *name, guarded(*f))).collect();
    results.insert(8, ("A9", "distillation curriculum", distill.join().unwrap_or_else(|_| Err("thread panicked".into()))));

    let mut err = std::io::stderr().lock();
    let mut failed = Vec::new();
    for (id, name, r) in &results {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(*id);
                ("FAIL", d)
            }
        };
        writeln!(err, "{tag} {id} {name}: {detail}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
