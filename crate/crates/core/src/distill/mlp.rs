//! Fixed-topology f64 MLP (SiLU hidden activations) with hand-written
//! reverse mode and Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{LpmError, Result};
use crate::latcore::Tensor2D;

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Dense layers `sizes[0] → … → sizes[n]`; parameters live in one flat
/// vector, per layer `W` (`in × out`, row-major) then `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    batch: usize,
    /// Per layer: its input (post-activation of the previous layer).
    inputs: Vec<Vec<f64>>,
    /// Per hidden layer: pre-activation.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// He-style normal init scaled for SiLU; zero biases; last layer scaled by `out_gain`.
    pub fn new(sizes: &[usize], seed: u64, out_gain: f64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(LpmError::Config(format!("bad mlp sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let n_layers = sizes.len() - 1;
        for l in 0..n_layers {
            let (i, o) = (sizes[l], sizes[l + 1]);
            let gain = if l + 1 == n_layers { out_gain } else { 1.0 };
            let n = Normal::new(0.0, gain * (2.0 / i as f64).sqrt()).expect("finite std");
            params.extend((0..i * o).map(|_| n.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_in(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_out(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        let mut v = Vec::new();
        for l in 0..self.sizes.len() - 1 {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            v.push((off, off + i * o));
            off += i * o + o;
        }
        v
    }

    /// Forward over a row-major batch `x` (`batch × n_in`).
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Tape) {
        let n_in = self.n_in();
        assert_eq!(x.len() % n_in, 0, "input length not a multiple of n_in");
        let batch = x.len() / n_in;
        let offs = self.layer_offsets();
        let n_layers = offs.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut cur = x.to_vec();
        for (l, &(w_off, b_off)) in offs.iter().enumerate() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[w_off..w_off + i * o];
            let b = &self.params[b_off..b_off + o];
            let mut out = vec![0.0; batch * o];
            for r in 0..batch {
                let row = &mut out[r * o..(r + 1) * o];
                row.copy_from_slice(b);
                for (k, &a) in cur[r * i..(r + 1) * i].iter().enumerate() {
                    if a != 0.0 {
                        for (y, wv) in row.iter_mut().zip(&w[k * o..(k + 1) * o]) {
                            *y += a * wv;
                        }
                    }
                }
            }
            inputs.push(cur);
            if l + 1 < n_layers {
                let act = out.iter().map(|&z| silu(z)).collect();
                pre.push(out);
                cur = act;
            } else {
                cur = out;
            }
        }
        (cur, Tape { batch, inputs, pre })
    }

    /// Gradients of `Σ dout · output` w.r.t. the parameters and the input.
    pub fn backward(&self, tape: &Tape, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let offs = self.layer_offsets();
        let batch = tape.batch;
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = dout.to_vec();
        for l in (0..offs.len()).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = offs[l];
            let x = &tape.inputs[l];
            let w = &self.params[w_off..w_off + i * o];
            let mut dx = vec![0.0; batch * i];
            {
                let (gw, gb) = grads[w_off..b_off + o].split_at_mut(i * o);
                for r in 0..batch {
                    let d = &delta[r * o..(r + 1) * o];
                    for (g, dv) in gb.iter_mut().zip(d) {
                        *g += dv;
                    }
                    for k in 0..i {
                        let a = x[r * i + k];
                        let gw_row = &mut gw[k * o..(k + 1) * o];
                        let w_row = &w[k * o..(k + 1) * o];
                        let mut acc = 0.0;
                        for j in 0..o {
                            gw_row[j] += a * d[j];
                            acc += w_row[j] * d[j];
                        }
                        dx[r * i + k] = acc;
                    }
                }
            }
            if l > 0 {
                for (dv, &z) in dx.iter_mut().zip(&tape.pre[l - 1]) {
                    *dv *= silu_grad(z);
                }
            }
            delta = dx;
        }
        (grads, delta)
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).0
    }

    /// Hex SHA-256 prefix of the parameter bytes.
    pub fn weight_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_checkpoint(&self, kind: &str, meta: serde_json::Value) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(kind, serde_json::json!({ "sizes": self.sizes, "meta": meta }));
        for (l, (w_off, b_off)) in self.layer_offsets().into_iter().enumerate() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let to32 = |s: &[f64]| s.iter().map(|&v| v as f32).collect::<Vec<_>>();
            ck.push(format!("layer{l}.w"), Tensor2D::from_vec(i, o, to32(&self.params[w_off..w_off + i * o]))?);
            ck.push(format!("layer{l}.b"), Tensor2D::from_vec(1, o, to32(&self.params[b_off..b_off + o]))?);
        }
        Ok(ck)
    }

    /// Checkpoints hold f32; reloaded weights are the f32 roundings.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let sizes: Vec<usize> = serde_json::from_value(ck.config["sizes"].clone())?;
        let mut m = Self::new(&sizes, 0, 1.0)?;
        for (l, (w_off, b_off)) in m.layer_offsets().into_iter().enumerate() {
            let (i, o) = (sizes[l], sizes[l + 1]);
            let w = ck.get(&format!("layer{l}.w"))?;
            let b = ck.get(&format!("layer{l}.b"))?;
            if w.shape() != (i, o) || b.shape() != (1, o) {
                return Err(LpmError::Checkpoint(format!("layer {l} has the wrong shape")));
            }
            for (dst, src) in m.params[w_off..w_off + i * o].iter_mut().zip(w.data()) {
                *dst = *src as f64;
            }
            for (dst, src) in m.params[b_off..b_off + o].iter_mut().zip(b.data()) {
                *dst = *src as f64;
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(LpmError::NonFinite("adam gradient"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Max relative error between backprop and central differences of
/// `L = Σ c · f(x)` over every parameter and input.
pub fn gradient_check(m: &Mlp, x: &[f64], c: &[f64], h: f64) -> f64 {
    let loss = |m: &Mlp, x: &[f64]| -> f64 { m.predict(x).iter().zip(c).map(|(a, b)| a * b).sum() };
    let (_, tape) = m.forward(x);
    let (gp, gx) = m.backward(&tape, c);
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-6);
    let mut worst = 0.0f64;
    let mut mm = m.clone();
    for (i, &g) in gp.iter().enumerate() {
        let p = mm.params[i];
        mm.params[i] = p + h;
        let up = loss(&mm, x);
        mm.params[i] = p - h;
        let dn = loss(&mm, x);
        mm.params[i] = p;
        worst = worst.max(rel(g, (up - dn) / (2.0 * h)));
    }
    let mut xx = x.to_vec();
    for i in 0..x.len() {
        let v = xx[i];
        xx[i] = v + h;
        let up = loss(m, &xx);
        xx[i] = v - h;
        let dn = loss(m, &xx);
        xx[i] = v;
        worst = worst.max(rel(gx[i], (up - dn) / (2.0 * h)));
    }
    worst
}
