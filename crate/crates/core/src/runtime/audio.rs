//! Overlapping audio windows and deterministic encoder stubs.
//!
//! Step `k` conditions on samples covering seconds `[k−2, k+1)`: two seconds
//! of history and the current second. Seconds before the session start or
//! never received are silence.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{LpmError, Result};
use crate::latcore::{matmul, Tensor2D};
use crate::toydit::AudioFeatures;

pub const HISTORY_SECONDS: usize = 2;
pub const WINDOW_SECONDS: usize = 3;

/// One second-aligned audio stream, stored by second index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AudioBuffer {
    sample_rate: usize,
    seconds: BTreeMap<usize, Vec<f32>>,
}

impl AudioBuffer {
    pub fn new(sample_rate: usize) -> Self {
        Self {
            sample_rate,
            seconds: BTreeMap::new(),
        }
    }

    pub fn sample_rate(&self) -> usize {
        self.sample_rate
    }

    /// Stores second `k`. A later write for the same second replaces it.
    pub fn push_second(&mut self, k: usize, samples: Vec<f32>) -> Result<()> {
        if samples.len() != self.sample_rate {
            return Err(LpmError::Protocol(format!(
                "second {k} carries {} samples, expected {}",
                samples.len(),
                self.sample_rate
            )));
        }
        self.seconds.insert(k, samples);
        Ok(())
    }

    pub fn has_second(&self, k: usize) -> bool {
        self.seconds.contains_key(&k)
    }

    /// Appends a contiguous sample stream starting at second 0.
    pub fn from_samples(sample_rate: usize, samples: &[f32]) -> Self {
        let mut b = Self::new(sample_rate);
        for (k, chunk) in samples.chunks_exact(sample_rate).enumerate() {
            b.seconds.insert(k, chunk.to_vec());
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioWindow {
    pub step: usize,
    /// Absolute index of the first sample; negative before the session start.
    pub start_sample: i64,
    pub samples: Vec<f32>,
    pub sample_rate: usize,
    /// Seconds that were zero-filled because they were never received.
    pub missing_history: Vec<usize>,
}

impl AudioWindow {
    /// Half-open absolute sample range.
    pub fn sample_range(&self) -> (i64, i64) {
        (self.start_sample, self.start_sample + self.samples.len() as i64)
    }

    pub fn history(&self) -> &[f32] {
        &self.samples[..HISTORY_SECONDS * self.sample_rate]
    }

    pub fn current(&self) -> &[f32] {
        &self.samples[HISTORY_SECONDS * self.sample_rate..]
    }

    /// Window start time in seconds.
    pub fn t0(&self) -> f64 {
        self.step as f64 - HISTORY_SECONDS as f64
    }
}

/// Window for step `k`. Fails with an underrun when second `k` is absent.
pub fn chunk_audio(buffer: &AudioBuffer, k: usize) -> Result<AudioWindow> {
    let sr = buffer.sample_rate;
    if !buffer.has_second(k) {
        return Err(LpmError::AudioUnderrun {
            step: k,
            have: 0,
            need: sr,
        });
    }
    Ok(window_with_silence(buffer, k))
}

/// Like [`chunk_audio`] but substitutes silence for a missing current second.
pub fn window_with_silence(buffer: &AudioBuffer, k: usize) -> AudioWindow {
    let sr = buffer.sample_rate;
    let mut samples = Vec::with_capacity(WINDOW_SECONDS * sr);
    let mut missing_history = Vec::new();
    for s in k as i64 - HISTORY_SECONDS as i64..=k as i64 {
        match (s >= 0).then(|| buffer.seconds.get(&(s as usize))).flatten() {
            Some(sec) => samples.extend_from_slice(sec),
            None => {
                if s >= 0 && (s as usize) < k {
                    missing_history.push(s as usize);
                }
                samples.extend(std::iter::repeat_n(0.0, sr));
            }
        }
    }
    AudioWindow {
        step: k,
        start_sample: (k as i64 - HISTORY_SECONDS as i64) * sr as i64,
        samples,
        sample_rate: sr,
        missing_history,
    }
}

/// Frames of `sample_rate / frame_rate` samples, each mapped to `d_cond`
/// features by a fixed seeded projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioEncoder {
    pub sample_rate: usize,
    pub frame_rate: usize,
    projection: Tensor2D,
}

impl AudioEncoder {
    pub fn new(sample_rate: usize, frame_rate: usize, d_cond: usize, seed: u64) -> Result<Self> {
        if frame_rate == 0 || !sample_rate.is_multiple_of(frame_rate) {
            return Err(LpmError::Config(format!(
                "sample rate {sample_rate} is not a multiple of frame rate {frame_rate}"
            )));
        }
        let spf = sample_rate / frame_rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0f32, 1.0 / (spf as f32).sqrt()).expect("finite std");
        let data = (0..spf * d_cond).map(|_| n.sample(&mut rng)).collect();
        Ok(Self {
            sample_rate,
            frame_rate,
            projection: Tensor2D::from_vec(spf, d_cond, data)?,
        })
    }

    pub fn encode(&self, w: &AudioWindow) -> Result<AudioFeatures> {
        if w.sample_rate != self.sample_rate {
            return Err(LpmError::Config("window sample rate differs from encoder".into()));
        }
        let spf = self.projection.rows();
        let frames = Tensor2D::from_vec(w.samples.len() / spf, spf, w.samples.clone())?;
        Ok(AudioFeatures {
            frames: matmul(&frames, &self.projection)?,
            t0: w.t0(),
        })
    }
}

/// Prompt → a few pseudo-token embeddings seeded by the prompt's hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoder {
    pub d_cond: usize,
    pub n_tokens: usize,
}

impl TextEncoder {
    pub fn encode(&self, prompt: &str) -> Tensor2D {
        let seed: [u8; 32] = Sha256::digest(prompt.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let n = Normal::new(0.0f32, 1.0).expect("finite std");
        let data = (0..self.n_tokens * self.d_cond).map(|_| n.sample(&mut rng)).collect();
        Tensor2D::from_vec(self.n_tokens, self.d_cond, data).expect("sized buffer")
    }
}
