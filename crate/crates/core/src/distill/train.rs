//! The four-stage curriculum: trajectory regression, off-policy DMD with a
//! regression regularizer, on-policy DMD on backbone rollouts, and refiner
//! DMD on re-noised backbone outputs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport};
use super::mlp::Adam;
use super::nets::{rollout, Denoiser, Rollouts, XNet};
use super::teacher::{gaussian2, norm2, renoise2, sub, MixtureTeacher, TrajectoryDataset, V2};
use crate::checkpoint::Checkpoint;
use crate::error::{LpmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub teacher: MixtureTeacher,
    /// `[T0, T1, T2, 0]`.
    pub levels: [f64; 4],
    /// Euler substeps per teacher ODE interval.
    pub substeps: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub seq_len: usize,
    pub hidden: usize,
    /// Chunks per batch.
    pub batch: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub stage4_steps: usize,
    /// Fake-score updates before the first DMD step.
    pub fake_warmup_steps: usize,
    /// Fake-score updates per generator update.
    pub fake_updates: usize,
    pub lr_reg: f64,
    pub lr_fake: f64,
    pub lr_gen: f64,
    /// Weight of the regression regularizer in stage 2.
    pub reg_weight: f64,
    /// Perturbation timesteps are uniform on `[t_min, t_max]`.
    pub t_min: f64,
    pub t_max: f64,
    /// Chunks per training rollout in stages 3 and 4.
    pub rollout_len: usize,
    pub eval_rollouts: usize,
    pub eval_len: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            teacher: MixtureTeacher::default(),
            levels: [1.0, 0.5, 0.3, 0.0],
            substeps: 40,
            n_train: 2048,
            n_holdout: 256,
            seq_len: 8,
            hidden: 64,
            batch: 256,
            stage1_steps: 4000,
            stage2_steps: 1500,
            stage3_steps: 1500,
            stage4_steps: 1000,
            fake_warmup_steps: 500,
            fake_updates: 5,
            lr_reg: 1e-3,
            lr_fake: 1e-3,
            lr_gen: 2e-4,
            reg_weight: 0.1,
            t_min: 0.02,
            t_max: 0.98,
            rollout_len: 8,
            eval_rollouts: 1000,
            eval_len: 16,
            log_every: 100,
            seed: 0,
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        let ok = self.n_train > 0
            && self.n_holdout > 0
            && self.seq_len > 0
            && self.hidden > 0
            && self.batch >= self.seq_len.max(self.rollout_len)
            && self.rollout_len > 0
            && self.log_every > 0
            && 0.0 < self.t_min
            && self.t_min < self.t_max
            && self.t_max < 1.0
            && self.reg_weight >= 0.0;
        if !ok {
            return Err(LpmError::Config("invalid distillation config".into()));
        }
        Ok(())
    }
}

/// Where a batch's input states came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Lineage {
    /// Teacher ODE trajectories of the dataset with this seed.
    Teacher { dataset_seed: u64 },
    /// Rollouts of the backbone with these weights.
    BackboneRollout { weights: String },
    /// Rollouts of this backbone and refiner.
    StackRollout { backbone: String, refiner: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lineage: Lineage,
    pub x_in: Vec<V2>,
    pub t: Vec<f64>,
    /// Student conditioning.
    pub hist: Vec<V2>,
    /// Clean previous chunk the teacher conditions on.
    pub prev: Vec<V2>,
    /// Clean teacher targets; empty for rollout batches.
    pub target: Vec<V2>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: u8,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub batches_checked: usize,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub seconds: f64,
}

/// Per-chunk timesteps non-decreasing in chunk index, each in `{T1, T0}`.
pub fn chunk_schedule(len: usize, t0: f64, t1: f64, rng: &mut impl Rng) -> Vec<f64> {
    let split = rng.gen_range(0..=len);
    (0..len).map(|l| if l < split { t1 } else { t0 }).collect()
}

/// Per-sample gradient of the DMD objective w.r.t. the generator output:
/// perturb `x̂0` to `x_t` and return `D_fake(x_t) − D_real(x_t)`. This is
/// `(s_fake − s_real)·∂x_t/∂x̂0` weighted by `t²/(1−t)²`.
pub fn dmd_grad(
    fake: &impl Denoiser,
    real: &impl Denoiser,
    x0_hat: &[V2],
    prev: &[V2],
    ts: &[f64],
    eps: &[V2],
) -> Vec<V2> {
    let xt: Vec<V2> = x0_hat.iter().zip(ts).zip(eps).map(|((x, t), e)| renoise2(*x, *t, *e)).collect();
    let df = fake.denoise_batch(&xt, ts, prev);
    let dr = real.denoise_batch(&xt, ts, prev);
    df.iter().zip(&dr).map(|(a, b)| sub(*a, *b)).collect()
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(LpmError::Diverged {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

/// One denoising-score-matching step of `fake` on clean samples `x0`.
pub fn fake_step(
    fake: &mut XNet,
    opt: &mut Adam,
    x0: &[V2],
    prev: &[V2],
    t_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = x0.len() as f64;
    let ts: Vec<f64> = x0.iter().map(|_| rng.gen_range(t_range.0..t_range.1)).collect();
    let xt: Vec<V2> = x0.iter().zip(&ts).map(|(x, t)| renoise2(*x, *t, gaussian2(rng))).collect();
    let (pred, tape) = fake.forward(&xt, &ts, prev);
    let mut loss = 0.0;
    let g: Vec<V2> = pred
        .iter()
        .zip(x0)
        .map(|(p, x)| {
            let d = sub(*p, *x);
            loss += norm2(d) / n;
            [2.0 * d[0] / n, 2.0 * d[1] / n]
        })
        .collect();
    let grads = fake.backward(&tape, &g);
    opt.update(&mut fake.mlp.params, &grads)?;
    Ok(loss)
}

/// Student state across the curriculum.
#[derive(Clone, Debug)]
pub struct Lab {
    pub cfg: LabConfig,
    pub train: TrajectoryDataset,
    pub holdout: TrajectoryDataset,
    pub backbone: XNet,
    pub refiner: Option<XNet>,
    pub fake: XNet,
    fake_opt: Adam,
    fake_warm: bool,
    pub curves: Vec<CurvePoint>,
    /// Backbone after each completed stage.
    pub snapshots: Vec<(u8, XNet)>,
    pub completed: u8,
}

impl Lab {
    pub fn new(cfg: LabConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = TrajectoryDataset::generate(
            &cfg.teacher,
            cfg.n_train + cfg.n_holdout,
            cfg.seq_len,
            cfg.levels,
            cfg.substeps,
            cfg.seed,
        )?;
        let (train, holdout) = ds.split(cfg.n_holdout);
        let backbone = XNet::new(cfg.hidden, cfg.seed ^ 0xb0)?;
        let fake = XNet::new(cfg.hidden, cfg.seed ^ 0xfa)?;
        let fake_opt = Adam::new(fake.mlp.params.len(), cfg.lr_fake);
        Ok(Self {
            cfg,
            train,
            holdout,
            backbone,
            refiner: None,
            fake,
            fake_opt,
            fake_warm: false,
            curves: Vec::new(),
            snapshots: Vec::new(),
            completed: 0,
        })
    }

    fn rng(&self, stage: u8) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(stage as u64))
    }

    fn log(&mut self, stage: u8, step: usize, metric: &str, value: f64) {
        self.curves.push(CurvePoint {
            stage,
            step,
            metric: metric.to_string(),
            value,
        });
    }

    fn t_range(&self) -> (f64, f64) {
        (self.cfg.t_min, self.cfg.t_max)
    }

    fn require(&self, stage: u8) -> Result<()> {
        if self.completed + 1 != stage {
            return Err(LpmError::Contract(format!(
                "stage {stage} needs stage {} completed (have {})",
                stage - 1,
                self.completed
            )));
        }
        Ok(())
    }

    fn finish(&mut self, stage: u8) {
        self.completed = stage;
        self.snapshots.push((stage, self.backbone.clone()));
    }

    /// Stage-1 inputs are teacher ODE states at each chunk's level.
    fn regression_batch(&self, ds: &TrajectoryDataset, rng: &mut impl Rng) -> Batch {
        let [t0, t1, _, _] = self.cfg.levels;
        let len = ds.chunks_per_sequence();
        let mut b = Batch {
            lineage: Lineage::Teacher { dataset_seed: ds.seed },
            x_in: Vec::new(),
            t: Vec::new(),
            hist: Vec::new(),
            prev: Vec::new(),
            target: Vec::new(),
        };
        for _ in 0..self.cfg.batch / len {
            let i = rng.gen_range(0..ds.len());
            for (l, &t) in chunk_schedule(len, t0, t1, rng).iter().enumerate() {
                let level = if t == t0 { 0 } else { 1 };
                b.x_in.push(ds.sequences[i][l][level]);
                b.t.push(t);
                b.hist.push(noisy_history(ds, i, l, t1, rng));
                b.prev.push(ds.prev_clean(i, l));
                b.target.push(ds.clean(i, l));
            }
        }
        b
    }

    /// Stage-2 inputs are teacher clean chunks re-noised to each chunk's level.
    fn offpolicy_batch(&self, rng: &mut impl Rng) -> Batch {
        let [t0, t1, _, _] = self.cfg.levels;
        let ds = &self.train;
        let len = ds.chunks_per_sequence();
        let mut b = Batch {
            lineage: Lineage::Teacher { dataset_seed: ds.seed },
            x_in: Vec::new(),
            t: Vec::new(),
            hist: Vec::new(),
            prev: Vec::new(),
            target: Vec::new(),
        };
        for _ in 0..self.cfg.batch / len {
            let i = rng.gen_range(0..ds.len());
            for (l, &t) in chunk_schedule(len, t0, t1, rng).iter().enumerate() {
                b.x_in.push(renoise2(ds.clean(i, l), t, gaussian2(rng)));
                b.t.push(t);
                b.hist.push(noisy_history(ds, i, l, t1, rng));
                b.prev.push(ds.prev_clean(i, l));
                b.target.push(ds.clean(i, l));
            }
        }
        b
    }

    /// Stage-3 inputs are the current backbone's own outputs, re-noised.
    fn onpolicy_batch(&self, rng: &mut impl Rng) -> Batch {
        let [t0, t1, _, _] = self.cfg.levels;
        let len = self.cfg.rollout_len;
        let n = self.cfg.batch / len;
        let r = rollout(&self.backbone, None, &self.cfg.levels, n, len, rng);
        let mut b = Batch {
            lineage: Lineage::BackboneRollout {
                weights: self.backbone.weight_hash(),
            },
            x_in: Vec::new(),
            t: Vec::new(),
            hist: Vec::new(),
            prev: Vec::new(),
            target: Vec::new(),
        };
        for i in 0..n {
            for (l, &t) in chunk_schedule(len, t0, t1, rng).iter().enumerate() {
                b.x_in.push(renoise2(r.backbone_out[i][l], t, gaussian2(rng)));
                b.t.push(t);
                b.hist.push(r.noisy_hist[i][l]);
                b.prev.push(r.prev(i, l));
            }
        }
        b
    }

    /// Stage-4 inputs are backbone outputs re-noised to `T2`, with the
    /// stack's own clean history.
    fn refiner_batch(&self, rng: &mut impl Rng) -> Batch {
        let refiner = self.refiner.as_ref().expect("refiner initialized");
        let t2 = self.cfg.levels[2];
        let len = self.cfg.rollout_len;
        let n = self.cfg.batch / len;
        let r: Rollouts = rollout(&self.backbone, Some(refiner), &self.cfg.levels, n, len, rng);
        let mut b = Batch {
            lineage: Lineage::StackRollout {
                backbone: self.backbone.weight_hash(),
                refiner: refiner.weight_hash(),
            },
            x_in: Vec::new(),
            t: Vec::new(),
            hist: Vec::new(),
            prev: Vec::new(),
            target: Vec::new(),
        };
        for i in 0..n {
            for l in 0..len {
                b.x_in.push(renoise2(r.backbone_out[i][l], t2, gaussian2(rng)));
                b.t.push(t2);
                b.hist.push(r.clean_hist[i][l]);
                b.prev.push(r.prev(i, l));
            }
        }
        b
    }

    /// Mean squared regression error on a fixed held-out batch set.
    pub fn heldout_loss(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x401d);
        let [t0, t1, _, _] = self.cfg.levels;
        let ds = &self.holdout;
        let (mut xs, mut ts, mut hs, mut ys) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..ds.len() {
            for l in 0..ds.chunks_per_sequence() {
                for (level, t) in [(0, t0), (1, t1)] {
                    xs.push(ds.sequences[i][l][level]);
                    ts.push(t);
                    hs.push(noisy_history(ds, i, l, t1, &mut rng));
                    ys.push(ds.clean(i, l));
                }
            }
        }
        let pred = self.backbone.denoise_batch(&xs, &ts, &hs);
        pred.iter().zip(&ys).map(|(p, y)| norm2(sub(*p, *y))).sum::<f64>() / pred.len() as f64
    }

    fn regression_step(&mut self, opt: &mut Adam, b: &Batch) -> Result<f64> {
        let n = b.x_in.len() as f64;
        let (pred, tape) = self.backbone.forward(&b.x_in, &b.t, &b.hist);
        let mut loss = 0.0;
        let g: Vec<V2> = pred
            .iter()
            .zip(&b.target)
            .map(|(p, y)| {
                let d = sub(*p, *y);
                loss += norm2(d) / n;
                [2.0 * d[0] / n, 2.0 * d[1] / n]
            })
            .collect();
        let grads = self.backbone.backward(&tape, &g);
        opt.update(&mut self.backbone.mlp.params, &grads)?;
        Ok(loss)
    }

    /// Stage 1: regress teacher ODE states at `{T0, T1}` onto clean targets.
    pub fn stage1(&mut self) -> Result<StageReport> {
        self.require(1)?;
        let start = Instant::now();
        let before = self.backbone.weight_hash();
        let mut rng = self.rng(1);
        let mut opt = Adam::new(self.backbone.mlp.params.len(), self.cfg.lr_reg);
        let initial = self.heldout_loss();
        self.log(1, 0, "heldout_reg", initial);
        let mut checked = 0;
        for step in 1..=self.cfg.stage1_steps {
            let b = self.regression_batch(&self.train, &mut rng);
            if !matches!(b.lineage, Lineage::Teacher { .. }) {
                return Err(LpmError::Contract("stage 1 batch not teacher-derived".into()));
            }
            checked += 1;
            let loss = self.regression_step(&mut opt, &b)?;
            check_finite(step, "regression loss", loss)?;
            if step % self.cfg.log_every == 0 {
                self.log(1, step, "train_reg", loss);
                let h = self.heldout_loss();
                self.log(1, step, "heldout_reg", h);
            }
        }
        let final_loss = self.heldout_loss();
        self.finish(1);
        Ok(StageReport {
            stage: 1,
            steps: self.cfg.stage1_steps,
            initial_loss: initial,
            final_loss,
            batches_checked: checked,
            backbone_hash_before: before,
            backbone_hash_after: self.backbone.weight_hash(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// One DMD generator update of `net` on `b`, plus `w·‖x̂0 − target‖²`
    /// when targets are present. Returns the regression term.
    fn dmd_update(&mut self, refiner: bool, opt: &mut Adam, b: &Batch, w: f64, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let n = b.x_in.len() as f64;
        let net = if refiner { self.refiner.as_ref().expect("refiner") } else { &self.backbone };
        let (pred, tape) = net.forward(&b.x_in, &b.t, &b.hist);
        let ts: Vec<f64> = pred.iter().map(|_| rng.gen_range(self.cfg.t_min..self.cfg.t_max)).collect();
        let eps: Vec<V2> = pred.iter().map(|_| gaussian2(rng)).collect();
        let d = dmd_grad(&self.fake, &self.cfg.teacher, &pred, &b.prev, &ts, &eps);
        let mut reg = 0.0;
        let mut dmd_norm = 0.0;
        let g: Vec<V2> = pred
            .iter()
            .enumerate()
            .map(|(i, p)| {
                dmd_norm += norm2(d[i]).sqrt() / n;
                let mut gi = d[i];
                if w > 0.0 && !b.target.is_empty() {
                    let r = sub(*p, b.target[i]);
                    reg += norm2(r) / n;
                    gi = [gi[0] + 2.0 * w * r[0], gi[1] + 2.0 * w * r[1]];
                }
                [gi[0] / n, gi[1] / n]
            })
            .collect();
        let grads = net.backward(&tape, &g);
        let params = if refiner {
            &mut self.refiner.as_mut().expect("refiner").mlp.params
        } else {
            &mut self.backbone.mlp.params
        };
        opt.update(params, &grads)?;
        Ok((dmd_norm, reg))
    }

    /// Trains the fake-score net on current student outputs for `b`.
    fn fake_update_on(&mut self, refiner: bool, b: &Batch, rng: &mut impl Rng) -> Result<f64> {
        let net = if refiner { self.refiner.as_ref().expect("refiner") } else { &self.backbone };
        let x0 = net.denoise_batch(&b.x_in, &b.t, &b.hist);
        let range = self.t_range();
        fake_step(&mut self.fake, &mut self.fake_opt, &x0, &b.prev, range, rng)
    }

    /// Stage 2: off-policy DMD on re-noised teacher cleans with the
    /// regression regularizer.
    pub fn stage2(&mut self) -> Result<StageReport> {
        self.require(2)?;
        let start = Instant::now();
        let before = self.backbone.weight_hash();
        let mut rng = self.rng(2);
        if !self.fake_warm {
            for step in 1..=self.cfg.fake_warmup_steps {
                let b = self.offpolicy_batch(&mut rng);
                let l = self.fake_update_on(false, &b, &mut rng)?;
                check_finite(step, "fake warmup loss", l)?;
                if step % self.cfg.log_every == 0 {
                    self.log(2, 0, "fake_warmup", l);
                }
            }
            self.fake_warm = true;
        }
        let mut opt = Adam::new(self.backbone.mlp.params.len(), self.cfg.lr_gen);
        let initial = self.heldout_loss();
        let mut checked = 0;
        let w = self.cfg.reg_weight;
        for step in 1..=self.cfg.stage2_steps {
            let mut fake_loss = 0.0;
            for _ in 0..self.cfg.fake_updates {
                let b = self.offpolicy_batch(&mut rng);
                fake_loss = self.fake_update_on(false, &b, &mut rng)?;
            }
            check_finite(step, "fake loss", fake_loss)?;
            let b = self.offpolicy_batch(&mut rng);
            if !matches!(b.lineage, Lineage::Teacher { dataset_seed } if dataset_seed == self.train.seed) {
                return Err(LpmError::Contract("stage 2 batch not teacher-derived".into()));
            }
            checked += 1;
            let (dmd, reg) = self.dmd_update(false, &mut opt, &b, w, &mut rng)?;
            check_finite(step, "dmd gradient", dmd)?;
            if step % self.cfg.log_every == 0 {
                self.log(2, step, "dmd_grad", dmd);
                self.log(2, step, "reg", reg);
                self.log(2, step, "fake_dsm", fake_loss);
            }
        }
        let final_loss = self.heldout_loss();
        self.finish(2);
        Ok(StageReport {
            stage: 2,
            steps: self.cfg.stage2_steps,
            initial_loss: initial,
            final_loss,
            batches_checked: checked,
            backbone_hash_before: before,
            backbone_hash_after: self.backbone.weight_hash(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Stage 3: on-policy DMD on the current backbone's rollouts.
    pub fn stage3(&mut self) -> Result<StageReport> {
        self.require(3)?;
        let start = Instant::now();
        let before = self.backbone.weight_hash();
        let mut rng = self.rng(3);
        let mut opt = Adam::new(self.backbone.mlp.params.len(), self.cfg.lr_gen);
        let mut checked = 0;
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 1..=self.cfg.stage3_steps {
            let mut fake_loss = 0.0;
            for _ in 0..self.cfg.fake_updates {
                let b = self.onpolicy_batch(&mut rng);
                fake_loss = self.fake_update_on(false, &b, &mut rng)?;
            }
            check_finite(step, "fake loss", fake_loss)?;
            let b = self.onpolicy_batch(&mut rng);
            let current = self.backbone.weight_hash();
            if !matches!(&b.lineage, Lineage::BackboneRollout { weights } if *weights == current) {
                return Err(LpmError::Contract("stage 3 batch not from the current backbone".into()));
            }
            checked += 1;
            let (dmd, _) = self.dmd_update(false, &mut opt, &b, 0.0, &mut rng)?;
            check_finite(step, "dmd gradient", dmd)?;
            if step == 1 {
                first = dmd;
            }
            last = dmd;
            if step % self.cfg.log_every == 0 {
                self.log(3, step, "dmd_grad", dmd);
                self.log(3, step, "fake_dsm", fake_loss);
            }
        }
        self.finish(3);
        Ok(StageReport {
            stage: 3,
            steps: self.cfg.stage3_steps,
            initial_loss: first,
            final_loss: last,
            batches_checked: checked,
            backbone_hash_before: before,
            backbone_hash_after: self.backbone.weight_hash(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Stage 4: copy the backbone into the refiner, freeze the backbone and
    /// train the refiner by DMD on re-noised backbone outputs at `T2`.
    pub fn stage4(&mut self) -> Result<StageReport> {
        self.require(4)?;
        let start = Instant::now();
        let before = self.backbone.weight_hash();
        self.refiner = Some(self.backbone.clone());
        if self.refiner.as_ref().map(|r| &r.mlp.params) != Some(&self.backbone.mlp.params) {
            return Err(LpmError::Contract("refiner init differs from backbone".into()));
        }
        let mut rng = self.rng(4);
        let mut opt = Adam::new(self.backbone.mlp.params.len(), self.cfg.lr_gen);
        let mut checked = 0;
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 1..=self.cfg.stage4_steps {
            let mut fake_loss = 0.0;
            for _ in 0..self.cfg.fake_updates {
                let b = self.refiner_batch(&mut rng);
                fake_loss = self.fake_update_on(true, &b, &mut rng)?;
            }
            check_finite(step, "fake loss", fake_loss)?;
            let b = self.refiner_batch(&mut rng);
            if !matches!(&b.lineage, Lineage::StackRollout { backbone, .. } if *backbone == before) {
                return Err(LpmError::Contract("stage 4 batch not from the frozen backbone".into()));
            }
            checked += 1;
            let (dmd, _) = self.dmd_update(true, &mut opt, &b, 0.0, &mut rng)?;
            check_finite(step, "dmd gradient", dmd)?;
            if step == 1 {
                first = dmd;
            }
            last = dmd;
            if step % self.cfg.log_every == 0 {
                self.log(4, step, "dmd_grad", dmd);
                self.log(4, step, "fake_dsm", fake_loss);
            }
        }
        let after = self.backbone.weight_hash();
        if after != before {
            return Err(LpmError::Contract("backbone changed during refiner training".into()));
        }
        self.finish(4);
        Ok(StageReport {
            stage: 4,
            steps: self.cfg.stage4_steps,
            initial_loss: first,
            final_loss: last,
            batches_checked: checked,
            backbone_hash_before: before,
            backbone_hash_after: after,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn run_stage(&mut self, stage: u8) -> Result<StageReport> {
        match stage {
            1 => self.stage1(),
            2 => self.stage2(),
            3 => self.stage3(),
            4 => self.stage4(),
            s => Err(LpmError::Config(format!("no stage {s}"))),
        }
    }

    pub fn snapshot(&self, stage: u8) -> Option<&XNet> {
        self.snapshots.iter().find(|(s, _)| *s == stage).map(|(_, n)| n)
    }

    /// `eval_rollouts × eval_len` rollouts of a stack against teacher
    /// samples. Fixed seeds, so stacks are compared on common noise.
    pub fn evaluate_stack(&self, backbone: &XNet, refiner: Option<&XNet>) -> EvalReport {
        let n = self.cfg.eval_rollouts;
        let len = self.cfg.eval_len;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xe7a1);
        let r = rollout(backbone, refiner, &self.cfg.levels, n, len, &mut rng);
        let reference = self.cfg.teacher.sample_sequences(n, len, self.cfg.seed ^ 0x7eac);
        evaluate(&self.cfg.teacher, &r.output, &reference)
    }

    pub fn write_curves(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "stage,step,metric,value")?;
        for p in &self.curves {
            writeln!(w, "{},{},{},{}", p.stage, p.step, p.metric, p.value)?;
        }
        Ok(())
    }

    /// Writes `backbone.ckpt`, `fake.ckpt`, `refiner.ckpt` (after stage 4)
    /// and `stage<k>_backbone.ckpt` snapshots into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = |role: &str| serde_json::json!({ "role": role, "completed": self.completed, "seed": self.cfg.seed });
        self.backbone.mlp.to_checkpoint("distill-mlp", meta("backbone"))?.save(dir.join("backbone.ckpt"))?;
        self.fake.mlp.to_checkpoint("distill-mlp", meta("fake"))?.save(dir.join("fake.ckpt"))?;
        if let Some(r) = &self.refiner {
            r.mlp.to_checkpoint("distill-mlp", meta("refiner"))?.save(dir.join("refiner.ckpt"))?;
        }
        for (s, n) in &self.snapshots {
            n.mlp
                .to_checkpoint("distill-mlp", meta("backbone"))?
                .save(dir.join(format!("stage{s}_backbone.ckpt")))?;
        }
        std::fs::write(dir.join("lab.json"), serde_json::to_vec_pretty(&serde_json::json!({
            "completed": self.completed,
            "config": self.cfg,
        }))?)?;
        let mut f = std::fs::File::create(dir.join("curves.csv"))?;
        self.write_curves(&mut f)?;
        Ok(())
    }

    /// Restores the state written by [`Lab::save`]. Weights come back as
    /// their f32 roundings; optimizer moments restart.
    pub fn load(cfg: LabConfig, dir: &Path) -> Result<Self> {
        let mut lab = Self::new(cfg)?;
        let info: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("lab.json"))?)?;
        lab.completed = info["completed"]
            .as_u64()
            .ok_or_else(|| LpmError::Checkpoint("lab.json lacks completed".into()))? as u8;
        let load = |name: &str| -> Result<XNet> {
            Ok(XNet {
                mlp: super::mlp::Mlp::from_checkpoint(&Checkpoint::load(dir.join(name))?)?,
            })
        };
        lab.backbone = load("backbone.ckpt")?;
        lab.fake = load("fake.ckpt")?;
        lab.fake_warm = lab.completed >= 2;
        if lab.completed >= 4 {
            lab.refiner = Some(load("refiner.ckpt")?);
        }
        for s in 1..=lab.completed {
            let p = format!("stage{s}_backbone.ckpt");
            if dir.join(&p).exists() {
                lab.snapshots.push((s, load(&p)?));
            }
        }
        Ok(lab)
    }
}

/// Backbone history at chunk `ℓ`: the previous clean chunk re-noised to
/// `T1`, or zero for chunk 0.
fn noisy_history(ds: &TrajectoryDataset, i: usize, l: usize, t1: f64, rng: &mut impl Rng) -> V2 {
    if l == 0 {
        [0.0; 2]
    } else {
        renoise2(ds.clean(i, l - 1), t1, gaussian2(rng))
    }
}

/// Outcome of the full curriculum and the acceptance measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub stages: Vec<StageReport>,
    pub stage2_backbone: EvalReport,
    pub stage3_backbone: EvalReport,
    /// Final backbone alone (2 NFE).
    pub backbone_only: EvalReport,
    /// Backbone + refiner (3 NFE).
    pub full_stack: EvalReport,
    /// Relative drift improvement of stage 3 over stage 2.
    pub drift_improvement: f64,
    pub seconds: f64,
}

impl CurriculumReport {
    pub fn modes_occupied(&self) -> bool {
        self.full_stack.occupancy.iter().all(|o| *o >= 0.30)
    }

    pub fn mode_means_accurate(&self) -> bool {
        self.full_stack.mean_error_sigma.iter().all(|e| *e < 0.15)
    }

    pub fn drift_improved(&self) -> bool {
        self.drift_improvement >= 0.20
    }

    pub fn refiner_helps(&self) -> bool {
        self.full_stack.sliced_w2 <= self.backbone_only.sliced_w2
    }
}

/// Runs stages 1–4 and evaluates the checkpoints.
pub fn run_curriculum(cfg: LabConfig) -> Result<(Lab, CurriculumReport)> {
    let start = Instant::now();
    let mut lab = Lab::new(cfg)?;
    let mut stages = Vec::new();
    for s in 1..=4 {
        stages.push(lab.run_stage(s)?);
    }
    let report = curriculum_report(&lab, stages, start.elapsed().as_secs_f64())?;
    Ok((lab, report))
}

pub fn curriculum_report(lab: &Lab, stages: Vec<StageReport>, seconds: f64) -> Result<CurriculumReport> {
    let s2 = lab
        .snapshot(2)
        .ok_or_else(|| LpmError::Contract("stage 2 snapshot missing".into()))?;
    let stage2_backbone = lab.evaluate_stack(s2, None);
    let stage3_backbone = lab.evaluate_stack(&lab.backbone, None);
    let full_stack = lab.evaluate_stack(&lab.backbone, lab.refiner.as_ref());
    let drift_improvement = 1.0 - stage3_backbone.drift / stage2_backbone.drift;
    Ok(CurriculumReport {
        stages,
        backbone_only: stage3_backbone.clone(),
        stage2_backbone,
        stage3_backbone,
        full_stack,
        drift_improvement,
        seconds,
    })
}
