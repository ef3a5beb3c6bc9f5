//! Few-step schedule, rectified-flow re-noising and the per-chunk
//! backbone (2 NFE) → refiner (1 NFE) generation loop.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LpmError, Result};
use crate::kvcache::{KvCache, KvVariant, RetentionPolicy};
use crate::latcore::{LatentChunk, Tensor2D};
use crate::toydit::{export_kv, Backbone, CondBundle, Refiner};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    pub t0: f32,
    pub t1: f32,
    pub t2: f32,
}

impl Default for TimestepSchedule {
    fn default() -> Self {
        Self {
            t0: 1.0,
            t1: 0.5,
            t2: 0.3,
        }
    }
}

impl TimestepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.t0 <= 1.0 && self.t0 > self.t1 && self.t1 > self.t2 && self.t2 > 0.0) {
            return Err(LpmError::Config(format!(
                "schedule needs 1 >= T0 > T1 > T2 > 0, got {} {} {}",
                self.t0, self.t1, self.t2
            )));
        }
        Ok(())
    }

    /// `[T0, T1, T2, 0]`.
    pub fn levels(&self) -> [f32; 4] {
        [self.t0, self.t1, self.t2, 0.0]
    }
}

/// Per-chunk timesteps, non-decreasing in chunk order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkTimestepVector(Vec<f32>);

impl ChunkTimestepVector {
    pub fn new(values: Vec<f32>, sched: &TimestepSchedule) -> Result<Self> {
        let levels = sched.levels();
        if let Some(v) = values.iter().find(|v| !levels.contains(v)) {
            return Err(LpmError::Contract(format!("timestep {v} is not a schedule level")));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(LpmError::Contract(format!("timesteps {values:?} decrease")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    /// True when every entry is `T0` or `T1`.
    pub fn backbone_admissible(&self, sched: &TimestepSchedule) -> bool {
        self.0.iter().all(|&t| t == sched.t0 || t == sched.t1)
    }
}

/// Which draw inside a chunk's generation a noise tensor feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseStream {
    Initial,
    BackboneRenoise,
    RefinerRenoise,
}

impl NoiseStream {
    fn id(self) -> u64 {
        match self {
            NoiseStream::Initial => 0,
            NoiseStream::BackboneRenoise => 1,
            NoiseStream::RefinerRenoise => 2,
        }
    }
}

/// Standard-normal noise keyed by (seed, chunk, stream); draws are independent
/// of request order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSource {
    seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sample(&self, chunk: usize, stream: NoiseStream, rows: usize, cols: usize) -> Tensor2D {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((chunk as u64).to_le_bytes());
        h.update(stream.id().to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor2D::from_vec(rows, cols, data).expect("sized buffer")
    }
}

/// `x_t = (1 − t)·x0 + t·ε`.
pub fn renoise(x0: &Tensor2D, t: f32, eps: &Tensor2D) -> Result<Tensor2D> {
    if !(0.0..=1.0).contains(&t) {
        return Err(LpmError::Contract(format!("renoise level {t} outside [0, 1]")));
    }
    if x0.shape() != eps.shape() {
        return Err(LpmError::Shape(format!("renoise {:?} vs noise {:?}", x0.shape(), eps.shape())));
    }
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| (1.0 - t) * x + t * e)
        .collect();
    Tensor2D::from_vec(x0.rows(), x0.cols(), data)
}

/// Hex SHA-256 prefix of the tensor's little-endian bytes.
pub fn latent_hash(t: &Tensor2D) -> String {
    let digest = Sha256::digest(t.to_le_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCount {
    pub backbone: usize,
    pub refiner: usize,
}

impl NfeCount {
    pub fn total(&self) -> usize {
        self.backbone + self.refiner
    }
}

/// Backbone stage of one chunk, ready for the refiner.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub chunk_index: usize,
    /// Second backbone prediction, before the refiner re-noise.
    pub x0_backbone: Tensor2D,
    /// Refiner input at `T2`.
    pub x_t2: LatentChunk,
    pub backbone_nfe: usize,
    pub gen_ms: f64,
}

/// Owns the backbone and the noisy-history cache.
#[derive(Debug)]
pub struct BackboneStage {
    backbone: Backbone,
    cache: KvCache,
    policy: RetentionPolicy,
    sched: TimestepSchedule,
    noise: NoiseSource,
    reuse_noise: bool,
    next_index: usize,
}

impl BackboneStage {
    pub fn new(
        backbone: Backbone,
        policy: RetentionPolicy,
        sched: TimestepSchedule,
        noise: NoiseSource,
        reuse_noise: bool,
    ) -> Result<Self> {
        policy.validate()?;
        sched.validate()?;
        let cfg = backbone.model().config();
        let cache = KvCache::new(cfg.tokens_per_chunk, cfg.n_layers, cfg.d_model);
        Ok(Self {
            backbone,
            cache,
            policy,
            sched,
            noise,
            reuse_noise,
            next_index: 0,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }

    /// Runs both backbone evaluations for the next chunk and commits its
    /// noisy-history K/V. References are installed from the first `cond` seen.
    pub fn step(&mut self, cond: &CondBundle) -> Result<BackboneOutput> {
        let start = Instant::now();
        let index = self.next_index;
        let model = self.backbone.model();
        let cfg = model.config();
        let (rows, cols) = (cfg.tokens_per_chunk, cfg.d_model);
        if !self.cache.has_references(KvVariant::Noisy) {
            self.cache
                .set_references(KvVariant::Noisy, model.reference_kv(cond)?, model.reference_positions(cond)?)?;
        }
        let history = self
            .cache
            .assemble_history(KvVariant::Noisy, index, &self.policy, model.rope())?;
        let before = self.backbone.evaluations();

        let eps0 = self.noise.sample(index, NoiseStream::Initial, rows, cols);
        let x_t0 = LatentChunk::new(index, renoise(&Tensor2D::zeros(rows, cols), self.sched.t0, &eps0)?, self.sched.t0);
        let first = self.backbone.predict(&[x_t0], cond, &history, &self.sched)?;

        let eps1 = if self.reuse_noise {
            eps0.clone()
        } else {
            self.noise.sample(index, NoiseStream::BackboneRenoise, rows, cols)
        };
        let x_t1 = LatentChunk::new(index, renoise(&first.x0[0].tokens, self.sched.t1, &eps1)?, self.sched.t1);
        let second = self.backbone.predict(&[x_t1], cond, &history, &self.sched)?;

        for e in export_kv(&second, KvVariant::Noisy, &self.policy) {
            self.cache.insert(e)?;
        }
        self.cache.evict_for(index, &self.policy);

        let eps2 = if self.reuse_noise {
            eps0
        } else {
            self.noise.sample(index, NoiseStream::RefinerRenoise, rows, cols)
        };
        let x0_backbone = second.x0[0].tokens.clone();
        let x_t2 = LatentChunk::new(index, renoise(&x0_backbone, self.sched.t2, &eps2)?, self.sched.t2);
        self.next_index += 1;
        Ok(BackboneOutput {
            chunk_index: index,
            x0_backbone,
            x_t2,
            backbone_nfe: self.backbone.evaluations() - before,
            gen_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Final output of one chunk.
#[derive(Clone, Debug)]
pub struct RefinedChunk {
    pub latent: LatentChunk,
    pub refiner_nfe: usize,
    pub refine_ms: f64,
}

/// Owns the refiner and the clean-history cache.
#[derive(Debug)]
pub struct RefinerStage {
    refiner: Refiner,
    cache: KvCache,
    policy: RetentionPolicy,
    sched: TimestepSchedule,
}

impl RefinerStage {
    pub fn new(refiner: Refiner, policy: RetentionPolicy, sched: TimestepSchedule) -> Result<Self> {
        policy.validate()?;
        sched.validate()?;
        let cfg = refiner.model().config();
        let cache = KvCache::new(cfg.tokens_per_chunk, cfg.n_layers, cfg.d_model);
        Ok(Self {
            refiner,
            cache,
            policy,
            sched,
        })
    }

    pub fn refiner(&self) -> &Refiner {
        &self.refiner
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// One refiner evaluation on the `T2` input; commits clean-history K/V.
    pub fn step(&mut self, input: &BackboneOutput, cond: &CondBundle) -> Result<RefinedChunk> {
        let start = Instant::now();
        let index = input.chunk_index;
        let model = self.refiner.model();
        if !self.cache.has_references(KvVariant::Clean) {
            self.cache
                .set_references(KvVariant::Clean, model.reference_kv(cond)?, model.reference_positions(cond)?)?;
        }
        let history = self
            .cache
            .assemble_history(KvVariant::Clean, index, &self.policy, model.rope())?;
        let before = self.refiner.evaluations();
        let pred = self
            .refiner
            .predict(std::slice::from_ref(&input.x_t2), cond, &history, &self.sched)?;
        for e in export_kv(&pred, KvVariant::Clean, &self.policy) {
            self.cache.insert(e)?;
        }
        self.cache.evict_for(index, &self.policy);
        let mut latent = pred.x0.into_iter().next().expect("one chunk in, one out");
        latent.timestep = 0.0;
        Ok(RefinedChunk {
            latent,
            refiner_nfe: self.refiner.evaluations() - before,
            refine_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub gen_ms: f64,
    pub refine_ms: f64,
}

/// One line of the rollout trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub index: usize,
    pub t_vec: Vec<f32>,
    pub nfe: NfeCount,
    pub latent_hash: String,
    pub cache_bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timings: Option<StepTimings>,
}

/// Sequential backbone + refiner generation for one session.
#[derive(Debug)]
pub struct StreamingGenerator {
    backbone: BackboneStage,
    refiner: RefinerStage,
    sched: TimestepSchedule,
    /// Include wall-clock timings in records (breaks bit-identical traces).
    pub record_timings: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct GeneratorConfig {
    pub policy: RetentionPolicy,
    pub sched: TimestepSchedule,
    pub seed: u64,
    pub reuse_noise: bool,
}


impl StreamingGenerator {
    pub fn new(backbone: Backbone, refiner: Refiner, cfg: GeneratorConfig) -> Result<Self> {
        if backbone.model().config() != refiner.model().config() {
            return Err(LpmError::Config("backbone and refiner configs differ".into()));
        }
        Ok(Self {
            backbone: BackboneStage::new(backbone, cfg.policy, cfg.sched, NoiseSource::new(cfg.seed), cfg.reuse_noise)?,
            refiner: RefinerStage::new(refiner, cfg.policy, cfg.sched)?,
            sched: cfg.sched,
            record_timings: false,
        })
    }

    pub fn into_stages(self) -> (BackboneStage, RefinerStage) {
        (self.backbone, self.refiner)
    }

    pub fn backbone_stage(&self) -> &BackboneStage {
        &self.backbone
    }

    pub fn refiner_stage(&self) -> &RefinerStage {
        &self.refiner
    }

    pub fn next_index(&self) -> usize {
        self.backbone.next_index()
    }

    pub fn generate_chunk(&mut self, cond: &CondBundle) -> Result<(LatentChunk, ChunkRecord)> {
        let b = self.backbone.step(cond)?;
        let r = self.refiner.step(&b, cond)?;
        let record = ChunkRecord {
            index: b.chunk_index,
            t_vec: vec![self.sched.t0, self.sched.t1, self.sched.t2],
            nfe: NfeCount {
                backbone: b.backbone_nfe,
                refiner: r.refiner_nfe,
            },
            latent_hash: latent_hash(&r.latent.tokens),
            cache_bytes: self.backbone.cache().stored_bytes() + self.refiner.cache().stored_bytes(),
            timings: self.record_timings.then_some(StepTimings {
                gen_ms: b.gen_ms,
                refine_ms: r.refine_ms,
            }),
        };
        Ok((r.latent, record))
    }

    /// `n_chunks` sequential chunks under a conditioning function of the chunk index.
    pub fn rollout(
        &mut self,
        n_chunks: usize,
        mut cond_for: impl FnMut(usize) -> CondBundle,
    ) -> Result<(Vec<LatentChunk>, Vec<ChunkRecord>)> {
        if n_chunks == 0 {
            return Err(LpmError::Contract("rollout needs at least one chunk".into()));
        }
        let mut chunks = Vec::with_capacity(n_chunks);
        let mut records = Vec::with_capacity(n_chunks);
        for _ in 0..n_chunks {
            let cond = cond_for(self.next_index());
            let (c, r) = self.generate_chunk(&cond)?;
            chunks.push(c);
            records.push(r);
        }
        Ok((chunks, records))
    }
}

pub fn write_trace(records: &[ChunkRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
