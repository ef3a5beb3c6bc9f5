//! Toy-scale distillation curriculum against an analytic mixture teacher.

pub mod eval;
pub mod mlp;
pub mod nets;
pub mod teacher;
pub mod train;

pub use eval::{evaluate, sliced_w2, EvalReport};
pub use mlp::{gradient_check, Adam, Mlp};
pub use nets::{rollout, Denoiser, Rollouts, XNet};
pub use teacher::{MixtureTeacher, TrajectoryDataset, V2};
pub use train::{dmd_grad, run_curriculum, CurriculumReport, Lab, LabConfig, Lineage, StageReport};
