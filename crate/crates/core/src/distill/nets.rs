//! Student and fake-score networks, and autoregressive rollouts of the
//! backbone (2 NFE) with an optional refiner (1 NFE).

use rand::Rng;

use super::mlp::{Mlp, Tape};
use super::teacher::{gaussian2, renoise2, MixtureTeacher, V2};
use crate::error::Result;

/// `[x (2), t, sin/cos(πt·{1,2,4}) (6), cond (2)]`.
pub const N_FEATURES: usize = 11;

pub fn features(x: V2, t: f64, cond: V2, out: &mut [f64]) {
    use std::f64::consts::PI;
    out[0] = x[0];
    out[1] = x[1];
    out[2] = t;
    for (i, f) in [1.0, 2.0, 4.0].iter().enumerate() {
        out[3 + 2 * i] = (PI * t * f).sin();
        out[4 + 2 * i] = (PI * t * f).cos();
    }
    out[9] = cond[0];
    out[10] = cond[1];
}

/// Anything that maps `(x_t, t, cond)` to an estimate of the clean point.
pub trait Denoiser {
    fn denoise_batch(&self, xs: &[V2], ts: &[f64], conds: &[V2]) -> Vec<V2>;
}

impl Denoiser for MixtureTeacher {
    fn denoise_batch(&self, xs: &[V2], ts: &[f64], conds: &[V2]) -> Vec<V2> {
        xs.iter().zip(ts).zip(conds).map(|((x, t), c)| self.denoise(*x, *t, *c)).collect()
    }
}

/// 3-layer MLP predicting `x̂0`. For students `cond` is the history
/// summary; for the fake-score net it is the clean previous chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct XNet {
    pub mlp: Mlp,
}

impl XNet {
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&[N_FEATURES, hidden, hidden, 2], seed, 0.5)?,
        })
    }

    fn pack(xs: &[V2], ts: &[f64], conds: &[V2]) -> Vec<f64> {
        assert!(xs.len() == ts.len() && xs.len() == conds.len(), "batch length mismatch");
        let mut buf = vec![0.0; xs.len() * N_FEATURES];
        for (i, row) in buf.chunks_exact_mut(N_FEATURES).enumerate() {
            features(xs[i], ts[i], conds[i], row);
        }
        buf
    }

    fn unpack(out: Vec<f64>) -> Vec<V2> {
        out.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
    }

    pub fn forward(&self, xs: &[V2], ts: &[f64], conds: &[V2]) -> (Vec<V2>, Tape) {
        let (out, tape) = self.mlp.forward(&Self::pack(xs, ts, conds));
        (Self::unpack(out), tape)
    }

    /// Parameter gradient of `Σ g_i · x̂0_i`.
    pub fn backward(&self, tape: &Tape, g: &[V2]) -> Vec<f64> {
        let flat: Vec<f64> = g.iter().flat_map(|v| [v[0], v[1]]).collect();
        self.mlp.backward(tape, &flat).0
    }

    pub fn weight_hash(&self) -> String {
        self.mlp.weight_hash()
    }
}

impl Denoiser for XNet {
    fn denoise_batch(&self, xs: &[V2], ts: &[f64], conds: &[V2]) -> Vec<V2> {
        Self::unpack(self.mlp.predict(&Self::pack(xs, ts, conds)))
    }
}

/// Per-chunk records of a batch of rollouts; indexed `[sequence][chunk]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollouts {
    /// Backbone output after its second evaluation.
    pub backbone_out: Vec<Vec<V2>>,
    /// History the backbone saw: the previous chunk's `T1` input.
    pub noisy_hist: Vec<Vec<V2>>,
    /// History the refiner saw: the previous final output.
    pub clean_hist: Vec<Vec<V2>>,
    /// Final output (refiner if present, else backbone).
    pub output: Vec<Vec<V2>>,
}

impl Rollouts {
    pub fn n(&self) -> usize {
        self.output.len()
    }

    pub fn len(&self) -> usize {
        self.output.first().map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }

    /// Clean previous chunk the teacher conditions on.
    pub fn prev(&self, i: usize, l: usize) -> V2 {
        if l == 0 {
            [0.0; 2]
        } else {
            self.output[i][l - 1]
        }
    }
}

/// `n` sequences of `len` chunks, batched across sequences. The backbone
/// runs `T0 → x̂0 → renoise(T1) → x̂0`; the refiner re-noises that to `T2`.
pub fn rollout(
    backbone: &XNet,
    refiner: Option<&XNet>,
    levels: &[f64; 4],
    n: usize,
    len: usize,
    rng: &mut impl Rng,
) -> Rollouts {
    let [t0, t1, t2, _] = *levels;
    let mut r = Rollouts {
        backbone_out: vec![Vec::with_capacity(len); n],
        noisy_hist: vec![Vec::with_capacity(len); n],
        clean_hist: vec![Vec::with_capacity(len); n],
        output: vec![Vec::with_capacity(len); n],
    };
    let mut noisy = vec![[0.0; 2]; n];
    let mut clean = vec![[0.0; 2]; n];
    for _ in 0..len {
        let eps0: Vec<V2> = (0..n).map(|_| gaussian2(rng)).collect();
        let first = backbone.denoise_batch(&eps0, &vec![t0; n], &noisy);
        let x_t1: Vec<V2> = first.iter().map(|x| renoise2(*x, t1, gaussian2(rng))).collect();
        let out = backbone.denoise_batch(&x_t1, &vec![t1; n], &noisy);
        let fin = match refiner {
            Some(rf) => {
                let x_t2: Vec<V2> = out.iter().map(|x| renoise2(*x, t2, gaussian2(rng))).collect();
                rf.denoise_batch(&x_t2, &vec![t2; n], &clean)
            }
            None => out.clone(),
        };
        for i in 0..n {
            r.backbone_out[i].push(out[i]);
            r.noisy_hist[i].push(noisy[i]);
            r.clean_hist[i].push(clean[i]);
            r.output[i].push(fin[i]);
        }
        noisy = x_t1;
        clean = fin;
    }
    r
}
