//! Rotary position embedding with a three-axis (t, h, w) split and per-reference
//! temporal offsets.
//!
//! Each head vector is divided into three contiguous axis segments. Inside a
//! segment of width `a`, the pair `(2k, 2k + 1)` is rotated by
//! `pos / base^(2k / a)` where `pos` is that axis' coordinate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LpmError, Result};
use crate::latcore::Tensor2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
    /// `(t_dim, h_dim, w_dim)`; sums to `head_dim`, each even.
    pub axes: (usize, usize, usize),
}

impl RopeParams {
    /// Temporal-only rotation over the whole head (the toy model's 1-D token stream).
    pub fn temporal(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, 10000.0, (head_dim, 0, 0))
    }

    pub fn new(head_dim: usize, base: f64, axes: (usize, usize, usize)) -> Result<Self> {
        let p = Self {
            head_dim,
            base,
            axes,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.axes;
        if !self.head_dim.is_multiple_of(2) {
            return Err(LpmError::Config(format!("head_dim {} is odd", self.head_dim)));
        }
        if t % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(LpmError::Config(format!("axis dims {:?} must be even", self.axes)));
        }
        if t + h + w != self.head_dim {
            return Err(LpmError::Config(format!(
                "axis dims {:?} do not sum to head_dim {}",
                self.axes, self.head_dim
            )));
        }
        if !(self.base > 1.0) {
            return Err(LpmError::Config(format!("rope base {} must exceed 1", self.base)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position3 {
    pub t: u64,
    pub h: u64,
    pub w: u64,
}

impl Position3 {
    pub fn temporal(t: u64) -> Self {
        Self { t, h: 0, w: 0 }
    }

    pub fn shifted(self, dt: u64) -> Self {
        Self { t: self.t + dt, ..self }
    }
}

/// Rotates one head vector in place.
fn rotate_head(v: &mut [f32], pos: Position3, params: &RopeParams) {
    let (t_dim, h_dim, w_dim) = params.axes;
    let segments = [(0, t_dim, pos.t), (t_dim, h_dim, pos.h), (t_dim + h_dim, w_dim, pos.w)];
    for (start, width, coord) in segments {
        if width == 0 || coord == 0 {
            continue;
        }
        for k in 0..width / 2 {
            let inv_freq = params.base.powf(-((2 * k) as f64) / width as f64);
            let (s, c) = (coord as f64 * inv_freq).sin_cos();
            let (s, c) = (s as f32, c as f32);
            let i = start + 2 * k;
            let (x0, x1) = (v[i], v[i + 1]);
            v[i] = x0 * c - x1 * s;
            v[i + 1] = x0 * s + x1 * c;
        }
    }
}

/// Applies RoPE to every row of `x`. Rows may hold several heads back to back
/// (`x.cols()` a multiple of `head_dim`); each head gets the row's position.
pub fn apply_rope(x: &Tensor2D, positions: &[Position3], params: &RopeParams) -> Result<Tensor2D> {
    if x.rows() != positions.len() {
        return shape_err(format!(
            "apply_rope: {} rows vs {} positions",
            x.rows(),
            positions.len()
        ));
    }
    if x.rows() > 0 && (x.cols() == 0 || !x.cols().is_multiple_of(params.head_dim)) {
        return shape_err(format!(
            "apply_rope: row width {} is not a multiple of head_dim {}",
            x.cols(),
            params.head_dim
        ));
    }
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        for head in out.row_mut(r).chunks_mut(params.head_dim) {
            rotate_head(head, pos, params);
        }
    }
    Ok(out)
}

/// Rotates stored pre-RoPE keys at fresh positions. Always starts from the
/// un-rotated copy, so calling it twice with the same positions is not a
/// double rotation.
pub fn reapply_positions(
    pre_rope_k: &Tensor2D,
    new_positions: &[Position3],
    params: &RopeParams,
) -> Result<Tensor2D> {
    apply_rope(pre_rope_k, new_positions, params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefType {
    Expression,
    View,
    SinkRef,
}

/// Reference-token temporal offset table: base offset per reference type plus
/// `sub_step · j` for the j-th sub-type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentOffsets {
    pub base: BTreeMap<RefType, u64>,
    pub sub_step: u64,
    /// Inclusive sub-index range per type.
    pub sub_range: BTreeMap<RefType, (u64, u64)>,
    /// Longest video temporal extent the offsets must clear.
    pub max_video_t_len: u64,
}

impl Default for SegmentOffsets {
    fn default() -> Self {
        let base = BTreeMap::from([
            (RefType::Expression, 10_000),
            (RefType::View, 20_000),
            (RefType::SinkRef, 30_000),
        ]);
        let sub_range = BTreeMap::from([
            (RefType::Expression, (1, 8)),
            (RefType::View, (1, 4)),
            (RefType::SinkRef, (1, 4)),
        ]);
        Self {
            base,
            sub_step: 100,
            sub_range,
            max_video_t_len: 4_096,
        }
    }
}

impl SegmentOffsets {
    pub fn offset(&self, ref_type: RefType, sub_index: u64) -> Result<u64> {
        let base = self
            .base
            .get(&ref_type)
            .ok_or_else(|| LpmError::Config(format!("reference type {ref_type:?} not registered")))?;
        Ok(base + self.sub_step * sub_index)
    }

    /// Every `(type, sub)` pair in the configured ranges, in table order.
    pub fn all_pairs(&self) -> Vec<(RefType, u64)> {
        self.sub_range
            .iter()
            .filter(|(ty, _)| self.base.contains_key(ty))
            .flat_map(|(&ty, &(lo, hi))| (lo..=hi).map(move |j| (ty, j)))
            .collect()
    }

    /// Offsets are pairwise distinct and every reference position lands past
    /// the longest video.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (ty, j) in self.all_pairs() {
            let off = self.offset(ty, j)?;
            if off < self.max_video_t_len {
                return Err(LpmError::Config(format!(
                    "offset {off} for {ty:?}/{j} overlaps video positions < {}",
                    self.max_video_t_len
                )));
            }
            if let Some(prev) = seen.insert(off, (ty, j)) {
                return Err(LpmError::Config(format!(
                    "offset {off} shared by {prev:?} and {:?}",
                    (ty, j)
                )));
            }
        }
        Ok(())
    }
}

/// Position of a reference token: `(t_len + o_i + so_j, h, w)`.
pub fn ref_position(
    video_t_len: u64,
    ref_type: RefType,
    sub_index: u64,
    offs: &SegmentOffsets,
    h: u64,
    w: u64,
) -> Result<Position3> {
    Ok(Position3 {
        t: video_t_len + offs.offset(ref_type, sub_index)?,
        h,
        w,
    })
}
