//! Rollout quality against the teacher: mode occupancy, per-mode mean
//! error and a sliced 2-Wasserstein proxy.

use serde::{Deserialize, Serialize};

use super::teacher::{add, norm2, scale, sub, MixtureTeacher, V2};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Fraction of chunks assigned to each teacher component.
    pub occupancy: Vec<f64>,
    /// Per component: `‖mean(x − μ_k(prev))‖ / σ` over assigned chunks.
    pub mean_error_sigma: Vec<f64>,
    /// Sliced W2 to teacher samples, averaged over chunk positions.
    pub sliced_w2: f64,
    /// Sliced W2 at the last chunk position.
    pub drift: f64,
}

/// Sliced W2 over `n_dirs` evenly spaced directions; equal-size sets.
pub fn sliced_w2(a: &[V2], b: &[V2], n_dirs: usize) -> f64 {
    assert_eq!(a.len(), b.len(), "sliced W2 needs equal-size sets");
    if a.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..n_dirs {
        let th = std::f64::consts::PI * j as f64 / n_dirs as f64;
        let (c, s) = (th.cos(), th.sin());
        let proj = |v: &[V2]| {
            let mut p: Vec<f64> = v.iter().map(|x| c * x[0] + s * x[1]).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pa, pb) = (proj(a), proj(b));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    }
    (total / n_dirs as f64).sqrt()
}

pub const N_DIRS: usize = 32;

/// Compares generated sequences with teacher sequences of the same shape.
/// Each chunk's teacher conditional uses the generated previous chunk.
pub fn evaluate(teacher: &MixtureTeacher, generated: &[Vec<V2>], reference: &[Vec<V2>]) -> EvalReport {
    let n = generated.len();
    if n == 0 {
        return EvalReport::default();
    }
    let k = teacher.n_modes();
    let len = generated[0].len();
    let mut count = vec![0usize; k];
    let mut resid = vec![[0.0; 2]; k];
    for seq in generated {
        let mut prev = [0.0; 2];
        for &x in seq {
            let m = teacher.assign(x, prev);
            count[m] += 1;
            resid[m] = add(resid[m], sub(x, teacher.means(prev)[m]));
            prev = x;
        }
    }
    let total = (n * len) as f64;
    let occupancy = count.iter().map(|&c| c as f64 / total).collect();
    let mean_error_sigma = (0..k)
        .map(|m| {
            if count[m] == 0 {
                f64::INFINITY
            } else {
                norm2(scale(resid[m], 1.0 / count[m] as f64)).sqrt() / teacher.sigma
            }
        })
        .collect();
    let column = |s: &[Vec<V2>], l: usize| s.iter().map(|q| q[l]).collect::<Vec<_>>();
    let per_chunk: Vec<f64> = (0..len)
        .map(|l| sliced_w2(&column(generated, l), &column(reference, l), N_DIRS))
        .collect();
    EvalReport {
        n,
        occupancy,
        mean_error_sigma,
        sliced_w2: per_chunk.iter().sum::<f64>() / len as f64,
        drift: *per_chunk.last().expect("non-empty sequences"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_samples_score_as_teacher() {
        let t = MixtureTeacher::default();
        let gen = t.sample_sequences(2000, 4, 1);
        let reference = t.sample_sequences(2000, 4, 2);
        let r = evaluate(&t, &gen, &reference);
        for o in &r.occupancy {
            assert!((o - 0.5).abs() < 0.03);
        }
        assert!(r.mean_error_sigma.iter().all(|e| *e < 0.1));
        assert!(r.sliced_w2 < 0.15, "{}", r.sliced_w2);
    }

    #[test]
    fn constant_generator_occupies_one_mode() {
        let t = MixtureTeacher::default();
        let gen = vec![vec![[-2.0, 0.0]; 1]; 100];
        let r = evaluate(&t, &gen, &t.sample_sequences(100, 1, 0));
        assert_eq!(r.occupancy, vec![1.0, 0.0]);
        assert!(r.mean_error_sigma[1].is_infinite());
        assert_eq!(evaluate(&t, &[], &[]), EvalReport::default());
    }

    #[test]
    fn sliced_w2_of_a_shift() {
        let a: Vec<V2> = (0..50).map(|i| [i as f64 * 0.1, 0.0]).collect();
        let b: Vec<V2> = a.iter().map(|x| [x[0] + 1.0, x[1]]).collect();
        // mean over directions of cos² is 1/2
        assert!((sliced_w2(&a, &b, 64) - 0.5f64.sqrt()).abs() < 1e-9);
        assert_eq!(sliced_w2(&a, &a, 8), 0.0);
    }
}
