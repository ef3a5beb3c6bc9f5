//! Autoregressive 2-D Gaussian-mixture teacher with closed-form scores
//! under rectified-flow corruption `x_t = (1−t)·x0 + t·ε`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LpmError, Result};

pub type V2 = [f64; 2];

#[inline]
pub fn add(a: V2, b: V2) -> V2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: V2, b: V2) -> V2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: V2, s: f64) -> V2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn norm2(a: V2) -> f64 {
    a[0] * a[0] + a[1] * a[1]
}

pub fn gaussian2(rng: &mut impl Rng) -> V2 {
    [rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// `x_t = (1−t)·x0 + t·ε`.
#[inline]
pub fn renoise2(x0: V2, t: f64, eps: V2) -> V2 {
    add(scale(x0, 1.0 - t), scale(eps, t))
}

/// Chunk `ℓ` is drawn from `Σ_k w_k N(base_k + A·prev, σ²I)` with `prev`
/// the clean chunk `ℓ−1` (zero for chunk 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureTeacher {
    pub weights: Vec<f64>,
    pub bases: Vec<V2>,
    pub coupling: [[f64; 2]; 2],
    pub sigma: f64,
}

impl Default for MixtureTeacher {
    fn default() -> Self {
        Self {
            weights: vec![0.5, 0.5],
            bases: vec![[-2.0, 0.0], [2.0, 0.0]],
            coupling: [[0.5, -0.2], [0.2, 0.5]],
            sigma: 0.5,
        }
    }
}

impl MixtureTeacher {
    pub fn single(mu: V2, sigma: f64) -> Self {
        Self {
            weights: vec![1.0],
            bases: vec![mu],
            coupling: [[0.0; 2]; 2],
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.weights.iter().sum();
        if self.weights.is_empty() || self.weights.len() != self.bases.len() {
            return Err(LpmError::Config("teacher needs one base per weight".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(LpmError::Config("teacher weights must be positive and sum to 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(LpmError::Config("teacher sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn n_modes(&self) -> usize {
        self.weights.len()
    }

    pub fn means(&self, prev: V2) -> Vec<V2> {
        let a = self.coupling;
        let shift = [a[0][0] * prev[0] + a[0][1] * prev[1], a[1][0] * prev[0] + a[1][1] * prev[1]];
        self.bases.iter().map(|b| add(*b, shift)).collect()
    }

    /// Per-component log weight + log N(x; (1−t)μ_k, v_t I), and v_t.
    fn component_logs(&self, x: V2, t: f64, prev: V2) -> (Vec<f64>, f64) {
        let a = 1.0 - t;
        let var = a * a * self.sigma * self.sigma + t * t;
        let logs = self
            .means(prev)
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                w.ln() - norm2(sub(x, scale(*m, a))) / (2.0 * var) - (2.0 * std::f64::consts::PI * var).ln()
            })
            .collect();
        (logs, var)
    }

    fn softmax(logs: &[f64]) -> (Vec<f64>, f64) {
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        (e.iter().map(|v| v / z).collect(), mx + z.ln())
    }

    /// `log p_t(x | prev)`.
    pub fn log_density(&self, x: V2, t: f64, prev: V2) -> f64 {
        Self::softmax(&self.component_logs(x, t, prev).0).1
    }

    /// Posterior component probabilities at noise level `t`.
    pub fn responsibilities(&self, x: V2, t: f64, prev: V2) -> Vec<f64> {
        Self::softmax(&self.component_logs(x, t, prev).0).0
    }

    /// `∇_x log p_t(x | prev)` for `t ∈ [0, 1]`.
    pub fn real_score(&self, x: V2, t: f64, prev: V2) -> V2 {
        let (logs, var) = self.component_logs(x, t, prev);
        let (r, _) = Self::softmax(&logs);
        let a = 1.0 - t;
        let mut s = [0.0; 2];
        for (rk, m) in r.iter().zip(self.means(prev)) {
            s = add(s, scale(sub(scale(m, a), x), rk / var));
        }
        s
    }

    /// `E[x0 | x_t = x, prev]`; finite at `t = 1`.
    pub fn denoise(&self, x: V2, t: f64, prev: V2) -> V2 {
        let (logs, var) = self.component_logs(x, t, prev);
        let (r, _) = Self::softmax(&logs);
        let a = 1.0 - t;
        let gain = a * self.sigma * self.sigma / var;
        let mut d = [0.0; 2];
        for (rk, m) in r.iter().zip(self.means(prev)) {
            d = add(d, scale(add(m, scale(sub(x, scale(m, a)), gain)), *rk));
        }
        d
    }

    /// Probability-flow velocity `dx/dt = (x − E[x0|x]) / t`.
    pub fn velocity(&self, x: V2, t: f64, prev: V2) -> V2 {
        scale(sub(x, self.denoise(x, t, prev)), 1.0 / t)
    }

    /// Most responsible clean-data component.
    pub fn assign(&self, x: V2, prev: V2) -> usize {
        let r = self.responsibilities(x, 0.0, prev);
        (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).expect("non-empty mixture")
    }

    /// Direct ancestral draw of one chunk.
    pub fn sample(&self, prev: V2, rng: &mut impl Rng) -> V2 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.n_modes() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        add(self.means(prev)[k], scale(gaussian2(rng), self.sigma))
    }

    /// `n` independent sequences of `len` chunks by ancestral sampling.
    pub fn sample_sequences(&self, n: usize, len: usize, seed: u64) -> Vec<Vec<V2>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut prev = [0.0; 2];
                (0..len)
                    .map(|_| {
                        prev = self.sample(prev, &mut rng);
                        prev
                    })
                    .collect()
            })
            .collect()
    }

    /// Euler integration of the PF-ODE from `T0` through each level down to
    /// 0, `substeps` steps per interval. Returns the state at every level.
    pub fn ode_chunk(&self, x_start: V2, prev: V2, levels: &[f64; 4], substeps: usize) -> [V2; 4] {
        let mut out = [x_start; 4];
        let mut x = x_start;
        for seg in 0..3 {
            let (hi, lo) = (levels[seg], levels[seg + 1]);
            let h = (hi - lo) / substeps as f64;
            for s in 0..substeps {
                let t = hi - s as f64 * h;
                x = sub(x, scale(self.velocity(x, t, prev), h));
            }
            out[seg + 1] = x;
        }
        out
    }
}

/// Teacher PF-ODE states per chunk at `[T0, T1, T2, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub levels: [f64; 4],
    pub seed: u64,
    /// `sequences[i][ℓ]` holds chunk `ℓ` of sequence `i`.
    pub sequences: Vec<Vec<[V2; 4]>>,
}

impl TrajectoryDataset {
    /// Each chunk starts from fresh noise and is integrated conditioned on
    /// the previous chunk's clean endpoint.
    pub fn generate(teacher: &MixtureTeacher, n: usize, len: usize, levels: [f64; 4], substeps: usize, seed: u64) -> Result<Self> {
        teacher.validate()?;
        if n == 0 || len == 0 || substeps == 0 {
            return Err(LpmError::Config("trajectory dataset needs n, len and substeps > 0".into()));
        }
        if levels[0] != 1.0 || levels[3] != 0.0 || levels.windows(2).any(|w| w[0] <= w[1]) {
            return Err(LpmError::Config("levels must descend from 1 to 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences = (0..n)
            .map(|_| {
                let mut prev = [0.0; 2];
                (0..len)
                    .map(|_| {
                        let states = teacher.ode_chunk(gaussian2(&mut rng), prev, &levels, substeps);
                        prev = states[3];
                        states
                    })
                    .collect()
            })
            .collect();
        Ok(Self { levels, seed, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn chunks_per_sequence(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.len())
    }

    pub fn clean(&self, i: usize, l: usize) -> V2 {
        self.sequences[i][l][3]
    }

    /// Clean chunk `ℓ−1`, or zero for chunk 0.
    pub fn prev_clean(&self, i: usize, l: usize) -> V2 {
        if l == 0 {
            [0.0; 2]
        } else {
            self.clean(i, l - 1)
        }
    }

    /// Splits off the last `n_holdout` sequences.
    pub fn split(mut self, n_holdout: usize) -> (Self, Self) {
        let cut = self.sequences.len().saturating_sub(n_holdout);
        let held = self.sequences.split_off(cut);
        let rest = Self {
            levels: self.levels,
            seed: self.seed,
            sequences: held,
        };
        (self, rest)
    }
}
