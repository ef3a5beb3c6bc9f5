//! Dense f32 kernels and the latent/token data model shared by every other module.
//!
//! Storage is row-major and dense. Masks are boolean grids that attention code
//! turns into an additive bias before the softmax.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LpmError, Result};

pub const RMS_EPS: f32 = 1e-6;

/// Additive bias used for masked attention logits.
pub const MASK_BIAS: f32 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "buffer of {} values cannot be {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return shape_err(format!("row {i} has {} values, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows `[start, start + len)` as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor2D {
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Tensor2D {
            rows: len,
            cols: self.cols,
            data,
        }
    }

    /// Columns `[start, start + len)` as a new tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    /// Writes `src` into columns `[start, start + src.cols)`.
    pub fn write_cols(&mut self, start: usize, src: &Tensor2D) {
        debug_assert_eq!(src.rows, self.rows);
        for r in 0..self.rows {
            self.row_mut(r)[start..start + src.cols].copy_from_slice(src.row(r));
        }
    }

    /// Stacks tensors vertically. All parts must share a column count.
    pub fn vstack(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        let cols = match parts.iter().find(|p| p.rows > 0) {
            Some(p) => p.cols,
            None => parts.first().map_or(0, |p| p.cols),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.rows == 0 {
                continue;
            }
            if p.cols != cols {
                return shape_err(format!("vstack: {} columns vs {cols}", p.cols));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.shape() != other.shape() {
            return shape_err(format!("add {:?} + {:?}", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!("add {:?} + {:?}", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor2D) -> f32 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Little-endian byte image of the values, used for hashing and checkpoints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Standard matrix product `a × b`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return shape_err(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    if !out.all_finite() {
        return Err(LpmError::NonFinite("matmul"));
    }
    Ok(out)
}

/// Boolean attention mask, `true` = attend. Rows are queries, columns keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BoolMask {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Every query row has at least one key it may attend to.
    pub fn rows_nonempty(&self) -> bool {
        (0..self.rows).all(|r| self.row(r).iter().any(|b| *b))
    }

    /// Rows `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> BoolMask {
        BoolMask {
            rows: len,
            cols: self.cols,
            bits: self.bits[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Additive bias: 0 where attendable, [`MASK_BIAS`] elsewhere.
    pub fn to_bias(&self) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self
                .bits
                .iter()
                .map(|&b| if b { 0.0 } else { MASK_BIAS })
                .collect(),
        }
    }

    /// `self ⊇ other` elementwise.
    pub fn contains(&self, other: &BoolMask) -> bool {
        self.shape() == other.shape() && self.bits.iter().zip(&other.bits).all(|(a, b)| *a || !*b)
    }
}

/// Row-wise softmax. Masked entries come out exactly zero.
pub fn softmax_rows(m: &Tensor2D, mask: Option<&BoolMask>) -> Result<Tensor2D> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return shape_err(format!(
                "mask {:?} vs logits {:?}",
                mask.shape(),
                m.shape()
            ));
        }
    }
    let mut out = Tensor2D::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let keep = |c: usize| mask.is_none_or(|mk| mk.get(r, c));
        let max = (0..m.cols)
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            return Err(LpmError::DegenerateRow { row: r });
        }
        let orow = out.row_mut(r);
        let mut sum = 0.0f32;
        for c in 0..m.cols {
            if keep(c) {
                let e = (row[c] - max).exp();
                orow[c] = e;
                sum += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    if !out.all_finite() {
        return Err(LpmError::NonFinite("softmax_rows"));
    }
    Ok(out)
}

/// `gain_i * v_i / sqrt(mean(v²) + ε)`.
pub fn rmsnorm(v: &[f32], gain: &[f32]) -> Result<Vec<f32>> {
    if v.len() != gain.len() || v.is_empty() {
        return shape_err(format!("rmsnorm: {} values, {} gains", v.len(), gain.len()));
    }
    let ms = v.iter().map(|x| x * x).sum::<f32>() / v.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    Ok(v.iter().zip(gain).map(|(x, g)| g * x * inv).collect())
}

/// [`rmsnorm`] applied to every row.
pub fn rmsnorm_rows(m: &Tensor2D, gain: &[f32]) -> Result<Tensor2D> {
    let mut out = Tensor2D::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let normed = rmsnorm(m.row(r), gain)?;
        out.row_mut(r).copy_from_slice(&normed);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Video,
    Reference,
    Sink,
}

/// A contiguous run of tokens of one kind inside an attention sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub len: usize,
    pub kind: TokenKind,
}

impl TokenSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Checks that spans are disjoint and tile `[0, total)` exactly.
pub fn spans_partition(spans: &[TokenSpan], total: usize) -> bool {
    let mut sorted: Vec<_> = spans.iter().filter(|s| s.len > 0).collect();
    sorted.sort_by_key(|s| s.start);
    let mut cursor = 0;
    for s in sorted {
        if s.start != cursor {
            return false;
        }
        cursor = s.end();
    }
    cursor == total
}

/// One chunk of latent tokens at a given noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentChunk {
    pub chunk_index: usize,
    pub tokens: Tensor2D,
    pub timestep: f32,
}

impl LatentChunk {
    pub fn new(chunk_index: usize, tokens: Tensor2D, timestep: f32) -> Self {
        Self {
            chunk_index,
            tokens,
            timestep,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<Vec<f32>> {
        let n = a.len();
        let m = b[0].len();
        let k = b.len();
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i][t] * b[t][j];
                }
                out[i][j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_m() {
        let m = Tensor2D::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(matmul(&Tensor2D::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn hand_computed_product() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let b = vec![vec![5.0], vec![6.0]];
        let oracle = naive_matmul(&a, &b);
        assert_eq!(oracle, vec![vec![17.0], vec![39.0]]);
        let got = matmul(
            &Tensor2D::from_rows(&a).unwrap(),
            &Tensor2D::from_rows(&b).unwrap(),
        )
        .unwrap();
        assert_eq!(got.data(), &[17.0, 39.0]);
    }

    #[test]
    fn zero_annihilates() {
        let m = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let z = matmul(&Tensor2D::zeros(2, 2), &m).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor2D::zeros(2, 3);
        let b = Tensor2D::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(LpmError::Shape(_))));
    }

    #[test]
    fn softmax_symmetric_row() {
        let m = Tensor2D::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariance() {
        for &(x, c) in &[(0.0f32, 1.0f32), (-30.0, 0.5), (12.0, -2.0)] {
            let m = Tensor2D::from_rows(&[vec![x, x + c]]).unwrap();
            let s = softmax_rows(&m, None).unwrap();
            let expect = 1.0 / (1.0 + (-c).exp());
            assert!((s.get(0, 1) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_masked_entry_matches_recomputation() {
        let m = Tensor2D::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let mut mask = BoolMask::new(1, 3, true);
        mask.set(0, 2, false);
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        let reduced = softmax_rows(&Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap(), None).unwrap();
        assert_eq!(s.get(0, 2), 0.0);
        assert!((s.get(0, 0) - reduced.get(0, 0)).abs() < 1e-7);
        assert!((s.get(0, 1) - reduced.get(0, 1)).abs() < 1e-7);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let m = Tensor2D::zeros(2, 2);
        let mut mask = BoolMask::new(2, 2, true);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        assert!(matches!(
            softmax_rows(&m, Some(&mask)),
            Err(LpmError::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn bias_path_matches_boolean_mask() {
        let m = Tensor2D::from_rows(&[vec![0.3, -1.0, 2.0, 0.7]]).unwrap();
        let mask = BoolMask::from_fn(1, 4, |_, c| c % 2 == 0);
        let a = softmax_rows(&m, Some(&mask)).unwrap();
        let b = softmax_rows(&m.add(&mask.to_bias()).unwrap(), None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-7);
        assert_eq!(b.get(0, 1), 0.0);
    }

    #[test]
    fn rmsnorm_examples() {
        let out = rmsnorm(&[1.0; 4], &[1.0; 4]).unwrap();
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-5));
        assert_eq!(rmsnorm(&[0.0; 3], &[1.0; 3]).unwrap(), vec![0.0; 3]);
        let out = rmsnorm(&[3.0, 4.0], &[1.0, 1.0]).unwrap();
        let d = (12.5f32 + RMS_EPS).sqrt();
        assert!((out[0] - 3.0 / d).abs() < 1e-7);
        assert!((out[1] - 4.0 / d).abs() < 1e-7);
        assert!(rmsnorm(&[], &[]).is_err());
    }

    #[test]
    fn span_partition_check() {
        let spans = [
            TokenSpan { start: 0, len: 4, kind: TokenKind::Sink },
            TokenSpan { start: 4, len: 4, kind: TokenKind::Video },
            TokenSpan { start: 8, len: 2, kind: TokenKind::Reference },
        ];
        assert!(spans_partition(&spans, 10));
        assert!(!spans_partition(&spans, 11));
        let overlapping = [
            TokenSpan { start: 0, len: 4, kind: TokenKind::Video },
            TokenSpan { start: 3, len: 2, kind: TokenKind::Reference },
        ];
        assert!(!spans_partition(&overlapping, 5));
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2D> {
        proptest::collection::vec(-2.0f32..2.0, rows * cols)
            .prop_map(move |d| Tensor2D::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-4);
        }

        #[test]
        fn softmax_rows_sum_to_one(m in small_matrix(4, 6), bits in proptest::collection::vec(any::<bool>(), 24)) {
            let mut mask = BoolMask::from_fn(4, 6, |r, c| bits[r * 6 + c]);
            for r in 0..4 {
                mask.set(r, r, true);
            }
            let s = softmax_rows(&m.scale(10.0), Some(&mask)).unwrap();
            for r in 0..4 {
                let sum: f32 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                for c in 0..6 {
                    if !mask.get(r, c) {
                        prop_assert_eq!(s.get(r, c), 0.0);
                    }
                }
            }
        }

        #[test]
        fn rmsnorm_scale_equivariant(v in proptest::collection::vec(-3.0f32..3.0, 8), c in 0.1f32..50.0) {
            let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            prop_assume!(norm >= 1.0);
            let gain = vec![1.0; 8];
            let a = rmsnorm(&v, &gain).unwrap();
            let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
            let b = rmsnorm(&scaled, &gain).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-4);
            }
        }
    }
}
