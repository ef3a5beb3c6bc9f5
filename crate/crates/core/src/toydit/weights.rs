use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::checkpoint::Checkpoint;
use crate::error::{LpmError, Result};
use crate::latcore::Tensor2D;

/// Which audio stream a layer's cross-attention branch reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AudioBranch {
    Speak,
    Listen,
}

impl AudioBranch {
    /// Even layers listen to the speaking stream, odd layers to the listening one.
    pub fn for_layer(layer: usize) -> Self {
        if layer.is_multiple_of(2) {
            AudioBranch::Speak
        } else {
            AudioBranch::Listen
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            AudioBranch::Speak => "spk",
            AudioBranch::Listen => "lis",
        }
    }
}

/// Shared timestep MLP: sinusoid(t) → silu(W1) → W2.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeMlp {
    pub w1: Tensor2D,
    pub b1: Tensor2D,
    pub w2: Tensor2D,
    pub b2: Tensor2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub norm1: Vec<f32>,
    /// d_model × 6·d_model: shift/scale/gate for attention then FFN.
    pub ada_w: Tensor2D,
    pub ada_b: Tensor2D,
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
    pub cross_wq: Tensor2D,
    pub cross_q_gain: Vec<f32>,
    pub wk_txt: Tensor2D,
    pub wv_txt: Tensor2D,
    pub wo_txt: Tensor2D,
    pub branch: AudioBranch,
    pub wk_aud: Tensor2D,
    pub wv_aud: Tensor2D,
    pub wo_aud: Tensor2D,
    pub norm2: Vec<f32>,
    pub ffn_w1: Tensor2D,
    pub ffn_b1: Tensor2D,
    pub ffn_w2: Tensor2D,
    pub ffn_b2: Tensor2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub time: TimeMlp,
    pub blocks: Vec<BlockWeights>,
    /// Residual output head: x̂0 = h + h·w_out.
    pub w_out: Tensor2D,
}

struct Init {
    rng: ChaCha8Rng,
    zero: bool,
}

impl Init {
    fn mat(&mut self, rows: usize, cols: usize, std: f32) -> Tensor2D {
        if self.zero {
            return Tensor2D::zeros(rows, cols);
        }
        let n = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..rows * cols).map(|_| n.sample(&mut self.rng)).collect();
        Tensor2D::from_vec(rows, cols, data).expect("sized buffer")
    }

    fn proj(&mut self, rows: usize, cols: usize) -> Tensor2D {
        self.mat(rows, cols, 1.0 / (rows as f32).sqrt())
    }

    fn gain(&mut self, n: usize) -> Vec<f32> {
        if self.zero {
            vec![0.0; n]
        } else {
            vec![1.0; n]
        }
    }
}

impl ModelWeights {
    fn build(cfg: &ModelConfig, mut init: Init) -> Self {
        let d = cfg.d_model;
        let time = TimeMlp {
            w1: init.proj(cfg.d_freq, d),
            b1: init.mat(1, d, 0.02),
            w2: init.proj(d, d),
            b2: init.mat(1, d, 0.02),
        };
        let blocks = (0..cfg.n_layers)
            .map(|layer| BlockWeights {
                norm1: init.gain(d),
                ada_w: init.mat(d, 6 * d, 0.5 / (d as f32).sqrt()),
                ada_b: init.mat(1, 6 * d, 0.1),
                wq: init.proj(d, d),
                wk: init.proj(d, d),
                wv: init.proj(d, d),
                wo: init.proj(d, d),
                cross_wq: init.proj(d, d),
                cross_q_gain: init.gain(d),
                wk_txt: init.proj(cfg.d_cond, d),
                wv_txt: init.proj(cfg.d_cond, d),
                wo_txt: init.mat(d, d, 0.5 / (d as f32).sqrt()),
                branch: AudioBranch::for_layer(layer),
                wk_aud: init.proj(cfg.d_cond, d),
                wv_aud: init.proj(cfg.d_cond, d),
                wo_aud: init.mat(d, d, 0.5 / (d as f32).sqrt()),
                norm2: init.gain(d),
                ffn_w1: init.proj(d, cfg.ffn_hidden()),
                ffn_b1: init.mat(1, cfg.ffn_hidden(), 0.02),
                ffn_w2: init.proj(cfg.ffn_hidden(), d),
                ffn_b2: init.mat(1, d, 0.02),
            })
            .collect();
        let w_out = init.mat(d, d, 0.1 / (d as f32).sqrt());
        Self { time, blocks, w_out }
    }

    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        Self::build(
            cfg,
            Init {
                rng: ChaCha8Rng::seed_from_u64(seed),
                zero: false,
            },
        )
    }

    /// All-zero weights: every block is a pure residual and the model passes
    /// its input through unchanged.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(
            cfg,
            Init {
                rng: ChaCha8Rng::seed_from_u64(0),
                zero: true,
            },
        )
    }

    pub fn to_checkpoint(&self, cfg: &ModelConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("toydit", serde_json::to_value(cfg)?);
        let row = |v: &[f32]| Tensor2D::from_vec(1, v.len(), v.to_vec()).expect("row");
        ck.push("time.w1", self.time.w1.clone());
        ck.push("time.b1", self.time.b1.clone());
        ck.push("time.w2", self.time.w2.clone());
        ck.push("time.b2", self.time.b2.clone());
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            let br = b.branch.tag();
            ck.push(p("norm1"), row(&b.norm1));
            ck.push(p("ada_w"), b.ada_w.clone());
            ck.push(p("ada_b"), b.ada_b.clone());
            ck.push(p("attn.wq"), b.wq.clone());
            ck.push(p("attn.wk"), b.wk.clone());
            ck.push(p("attn.wv"), b.wv.clone());
            ck.push(p("attn.wo"), b.wo.clone());
            ck.push(p("cross.wq"), b.cross_wq.clone());
            ck.push(p("cross.q_gain"), row(&b.cross_q_gain));
            ck.push(p("cross.txt.wk"), b.wk_txt.clone());
            ck.push(p("cross.txt.wv"), b.wv_txt.clone());
            ck.push(p("cross.txt.wo"), b.wo_txt.clone());
            ck.push(p(&format!("cross.{br}.wk")), b.wk_aud.clone());
            ck.push(p(&format!("cross.{br}.wv")), b.wv_aud.clone());
            ck.push(p("cross.aud.wo"), b.wo_aud.clone());
            ck.push(p("norm2"), row(&b.norm2));
            ck.push(p("ffn.w1"), b.ffn_w1.clone());
            ck.push(p("ffn.b1"), b.ffn_b1.clone());
            ck.push(p("ffn.w2"), b.ffn_w2.clone());
            ck.push(p("ffn.b2"), b.ffn_b2.clone());
        }
        ck.push("out.w", self.w_out.clone());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(ModelConfig, Self)> {
        if ck.kind != "toydit" {
            return Err(LpmError::Checkpoint(format!("expected toydit checkpoint, got {}", ck.kind)));
        }
        let cfg: ModelConfig = serde_json::from_value(ck.config.clone())?;
        cfg.validate()?;
        let t = |n: &str| ck.get(n).cloned();
        let v = |n: &str| ck.get(n).map(|t| t.data().to_vec());
        let time = TimeMlp {
            w1: t("time.w1")?,
            b1: t("time.b1")?,
            w2: t("time.w2")?,
            b2: t("time.b2")?,
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = |n: &str| format!("blocks.{i}.{n}");
            let branch = AudioBranch::for_layer(i);
            let br = branch.tag();
            blocks.push(BlockWeights {
                norm1: v(&p("norm1"))?,
                ada_w: t(&p("ada_w"))?,
                ada_b: t(&p("ada_b"))?,
                wq: t(&p("attn.wq"))?,
                wk: t(&p("attn.wk"))?,
                wv: t(&p("attn.wv"))?,
                wo: t(&p("attn.wo"))?,
                cross_wq: t(&p("cross.wq"))?,
                cross_q_gain: v(&p("cross.q_gain"))?,
                wk_txt: t(&p("cross.txt.wk"))?,
                wv_txt: t(&p("cross.txt.wv"))?,
                wo_txt: t(&p("cross.txt.wo"))?,
                branch,
                wk_aud: t(&p(&format!("cross.{br}.wk")))
                    .map_err(|_| LpmError::Checkpoint(format!("layer {i} lacks its {br} branch weights")))?,
                wv_aud: t(&p(&format!("cross.{br}.wv")))?,
                wo_aud: t(&p("cross.aud.wo"))?,
                norm2: v(&p("norm2"))?,
                ffn_w1: t(&p("ffn.w1"))?,
                ffn_b1: t(&p("ffn.b1"))?,
                ffn_w2: t(&p("ffn.w2"))?,
                ffn_b2: t(&p("ffn.b2"))?,
            });
        }
        let w = Self {
            time,
            blocks,
            w_out: t("out.w")?,
        };
        w.check_shapes(&cfg)?;
        Ok((cfg, w))
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let expect = |name: &str, t: &Tensor2D, shape: (usize, usize)| -> Result<()> {
            if t.shape() != shape {
                return Err(LpmError::Shape(format!("{name}: {:?}, expected {shape:?}", t.shape())));
            }
            Ok(())
        };
        if self.blocks.len() != cfg.n_layers {
            return Err(LpmError::Shape(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                cfg.n_layers
            )));
        }
        expect("time.w1", &self.time.w1, (cfg.d_freq, d))?;
        expect("time.w2", &self.time.w2, (d, d))?;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.branch != AudioBranch::for_layer(i) {
                return Err(LpmError::Config(format!("layer {i} carries the wrong audio branch")));
            }
            expect("ada_w", &b.ada_w, (d, 6 * d))?;
            for (n, w) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo), ("cross_wq", &b.cross_wq)] {
                expect(n, w, (d, d))?;
            }
            for (n, w) in [("wk_txt", &b.wk_txt), ("wv_txt", &b.wv_txt), ("wk_aud", &b.wk_aud), ("wv_aud", &b.wv_aud)] {
                expect(n, w, (cfg.d_cond, d))?;
            }
            expect("ffn_w1", &b.ffn_w1, (d, cfg.ffn_hidden()))?;
            expect("ffn_w2", &b.ffn_w2, (cfg.ffn_hidden(), d))?;
            if b.norm1.len() != d || b.norm2.len() != d || b.cross_q_gain.len() != d {
                return Err(LpmError::Shape(format!("layer {i} norm gains")));
            }
        }
        expect("out.w", &self.w_out, (d, d))
    }
}
