use lpm_core::distill::{run_curriculum, Denoiser, LabConfig, MixtureTeacher, V2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reduced() -> LabConfig {
    LabConfig {
        n_train: 512,
        n_holdout: 64,
        batch: 128,
        hidden: 32,
        stage1_steps: 800,
        stage2_steps: 200,
        stage3_steps: 200,
        stage4_steps: 200,
        fake_warmup_steps: 200,
        fake_updates: 2,
        eval_rollouts: 300,
        eval_len: 8,
        log_every: 50,
        ..Default::default()
    }
}

#[test]
fn reduced_curriculum_keeps_its_contracts() {
    let cfg = reduced();
    let (lab, report) = run_curriculum(cfg.clone()).unwrap();
    assert_eq!(report.stages.len(), 4);
    for (i, s) in report.stages.iter().enumerate() {
        assert_eq!(s.stage as usize, i + 1);
        assert_eq!(s.batches_checked, s.steps);
        assert!(s.final_loss.is_finite());
    }
    let s4 = &report.stages[3];
    assert_eq!(s4.backbone_hash_before, s4.backbone_hash_after);
    assert_eq!(lab.backbone.weight_hash(), s4.backbone_hash_after);
    assert_eq!(lab.snapshot(3).unwrap().weight_hash(), s4.backbone_hash_before);

    // refiner on clean teacher samples re-noised to T2
    let refiner = lab.refiner.as_ref().unwrap();
    let t = &cfg.teacher;
    let t2 = cfg.levels[2];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let seqs = t.sample_sequences(500, 4, 17);
    let (mut xs, mut hist, mut clean) = (Vec::new(), Vec::new(), Vec::new());
    for s in &seqs {
        for l in 0..s.len() {
            let eps: V2 = [rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal)];
            xs.push([(1.0 - t2) * s[l][0] + t2 * eps[0], (1.0 - t2) * s[l][1] + t2 * eps[1]]);
            hist.push(if l == 0 { [0.0; 2] } else { s[l - 1] });
            clean.push(s[l]);
        }
    }
    let out = refiner.denoise_batch(&xs, &vec![t2; xs.len()], &hist);
    let mse = out
        .iter()
        .zip(&clean)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum::<f64>()
        / out.len() as f64;
    let rmse = mse.sqrt();
    eprintln!("refiner reconstruction RMSE {rmse:.3} (σ = {})", t.sigma);
    assert!(rmse < 1.5 * t.sigma, "refiner RMSE {rmse} vs σ {}", t.sigma);
}

#[test]
fn curriculum_is_seed_deterministic() {
    let cfg = LabConfig {
        stage1_steps: 50,
        stage2_steps: 10,
        stage3_steps: 10,
        stage4_steps: 10,
        fake_warmup_steps: 10,
        eval_rollouts: 50,
        ..reduced()
    };
    let (a, ra) = run_curriculum(cfg.clone()).unwrap();
    let (b, rb) = run_curriculum(cfg).unwrap();
    assert_eq!(a.backbone.weight_hash(), b.backbone.weight_hash());
    assert_eq!(ra.full_stack, rb.full_stack);
}

#[test]
fn invalid_teacher_is_rejected() {
    let cfg = LabConfig {
        teacher: MixtureTeacher {
            sigma: 0.0,
            ..Default::default()
        },
        ..reduced()
    };
    assert!(run_curriculum(cfg).is_err());
}
