//! Chunk-wise causal self-attention masks and temporally aligned audio
//! cross-attention masks.
//!
//! Sequence layout everywhere: video tokens of each chunk in chunk order, then
//! reference tokens. Video queries see their own chunk (bidirectionally), every
//! earlier chunk present in the sequence, and all reference tokens. Reference
//! queries see reference tokens only.

use serde::{Deserialize, Serialize};

use crate::error::{LpmError, Result};
pub use crate::latcore::BoolMask;

fn causal_over(chunk_ids: &[usize], tokens_per_chunk: usize, n_ref_tokens: usize) -> BoolMask {
    let n_video = chunk_ids.len() * tokens_per_chunk;
    let total = n_video + n_ref_tokens;
    BoolMask::from_fn(total, total, |q, k| {
        match (q < n_video, k < n_video) {
            (true, true) => {
                chunk_ids[k / tokens_per_chunk] <= chunk_ids[q / tokens_per_chunk]
            }
            (true, false) => true,
            (false, true) => false,
            (false, false) => true,
        }
    })
}

/// Full-sequence mask over chunks `0..n_chunks` followed by `n_ref_tokens`.
pub fn chunk_causal_mask(
    n_chunks: usize,
    tokens_per_chunk: usize,
    n_ref_tokens: usize,
) -> Result<BoolMask> {
    if n_chunks * tokens_per_chunk + n_ref_tokens == 0 {
        return Err(LpmError::Shape("empty attention sequence".into()));
    }
    let ids: Vec<usize> = (0..n_chunks).collect();
    Ok(causal_over(&ids, tokens_per_chunk, n_ref_tokens))
}

/// Mask over the retained chunks only (sorted ascending, current chunk last);
/// evicted chunks contribute no columns at all.
pub fn windowed_context_mask(
    retained_chunks: &[usize],
    tokens_per_chunk: usize,
    n_ref_tokens: usize,
) -> Result<BoolMask> {
    if retained_chunks.is_empty() {
        return Err(LpmError::Contract("retained chunk set is empty".into()));
    }
    if retained_chunks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LpmError::Contract(format!(
            "retained chunks {retained_chunks:?} are not strictly increasing"
        )));
    }
    if retained_chunks.len() * tokens_per_chunk + n_ref_tokens == 0 {
        return Err(LpmError::Shape("empty attention sequence".into()));
    }
    Ok(causal_over(retained_chunks, tokens_per_chunk, n_ref_tokens))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioWindowSpec {
    /// Half-width in audio frames for the speaking branch.
    pub speak_window: usize,
    /// Half-width in audio frames for the listening branch.
    pub listen_window: usize,
}

impl Default for AudioWindowSpec {
    fn default() -> Self {
        Self {
            speak_window: 3,
            listen_window: 12,
        }
    }
}

impl AudioWindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speak_window == 0 || self.listen_window <= self.speak_window {
            return Err(LpmError::Config(format!(
                "audio windows need 1 <= speak ({}) < listen ({})",
                self.speak_window, self.listen_window
            )));
        }
        Ok(())
    }
}

/// Half-width of an audio attention window; `Global` attends every frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AudioWindow {
    Frames(usize),
    Global,
}

/// Audio mask with video token `j` at time `j / video_token_rate` and audio
/// frame `f` at `f / audio_fps`, both seconds from zero.
pub fn audio_window_mask(
    n_video_tokens: usize,
    video_token_rate: f64,
    n_audio_frames: usize,
    audio_fps: f64,
    window: AudioWindow,
) -> Result<BoolMask> {
    audio_window_mask_at(0.0, n_video_tokens, video_token_rate, 0.0, n_audio_frames, audio_fps, window)
}

/// [`audio_window_mask`] with explicit start times (seconds) for the video
/// tokens and the audio frames.
pub fn audio_window_mask_at(
    video_t0: f64,
    n_video_tokens: usize,
    video_token_rate: f64,
    audio_t0: f64,
    n_audio_frames: usize,
    audio_fps: f64,
    window: AudioWindow,
) -> Result<BoolMask> {
    if !(video_token_rate > 0.0 && audio_fps > 0.0) {
        return Err(LpmError::Config(format!(
            "rates must be positive (video {video_token_rate}, audio {audio_fps})"
        )));
    }
    let mut mask = BoolMask::new(n_video_tokens, n_audio_frames, matches!(window, AudioWindow::Global));
    let AudioWindow::Frames(half) = window else {
        return Ok(mask);
    };
    if n_audio_frames == 0 {
        return Ok(mask);
    }
    for j in 0..n_video_tokens {
        let tau = video_t0 + j as f64 / video_token_rate;
        // distance in frame units
        let center = (tau - audio_t0) * audio_fps;
        let mut any = false;
        for f in 0..n_audio_frames {
            if (f as f64 - center).abs() <= half as f64 + 1e-9 {
                mask.set(j, f, true);
                any = true;
            }
        }
        if !any {
            let nearest = center.round().clamp(0.0, (n_audio_frames - 1) as f64) as usize;
            mask.set(j, nearest, true);
        }
    }
    Ok(mask)
}
