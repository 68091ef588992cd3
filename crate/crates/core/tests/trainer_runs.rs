//! End-to-end trainer behaviour on tiny networks and datasets.

use std::path::Path;

use madan::datagen::{generate_suite, load_suite, SuiteConfig};
use madan::losses::Term;
use madan::models::{
    DiscriminatorConfig, FeatureDiscriminatorConfig, GeneratorConfig, ModelBundle, ModelConfig, SegmenterConfig,
};
use madan::nn::ParamSet;
use madan::trainer::{
    planned_steps, run_madan, Phase, RunStatus, TrainConfig, TrainData, TrainMode, Trainer, CHECKPOINT_FILE,
    METRICS_FILE,
};

fn tiny_model(sources: usize) -> ModelConfig {
    ModelConfig {
        sources,
        classes: 5,
        generator: GeneratorConfig {
            channels: [4, 8, 8],
            residual_blocks: 1,
        },
        discriminator: DiscriminatorConfig { channels: [4, 8, 8, 8] },
        segmenter: SegmenterConfig {
            channels: [8, 8, 8, 8],
            norm_groups: 4,
        },
        feature_discriminator: FeatureDiscriminatorConfig { channels: 8 },
        seed: 3,
    }
}

fn tiny_config(sources: usize) -> TrainConfig {
    TrainConfig {
        model: tiny_model(sources),
        stage_epochs: [1, 3, 1],
        batch_size: 4,
        sad_freeze_epochs: 1,
        ccd_freeze_epochs: 2,
        outer_rounds: 2,
        crop: 16,
        ..TrainConfig::default()
    }
}

fn tiny_data(dir: &Path, shifts: &[f64], n: usize) -> TrainData {
    let cfg = SuiteConfig {
        seed: 11,
        source_shifts: shifts.to_vec(),
        target_shift: 0.6,
        n_per_domain: n,
        n_test: 4,
        height: 24,
        width: 24,
    };
    generate_suite(&cfg, dir).unwrap();
    TrainData::from_suite(&load_suite(dir, shifts.len()).unwrap()).unwrap()
}

fn data2() -> (tempfile::TempDir, TrainData) {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), &[0.4, 0.8], 6);
    (dir, data)
}

fn params<'a>(b: &'a ModelBundle<f32>, prefix: &str) -> Vec<&'a ParamSet<f32>> {
    b.named_params()
        .into_iter()
        .filter(|(n, _)| n == prefix || n.starts_with(&format!("{prefix}.")))
        .map(|(_, p)| p)
        .collect()
}

fn same(a: &ModelBundle<f32>, b: &ModelBundle<f32>, prefix: &str) -> bool {
    let (pa, pb) = (params(a, prefix), params(b, prefix));
    assert!(!pa.is_empty(), "no parameters under {prefix}");
    pa.iter().zip(&pb).all(|(x, y)| x.tensors() == y.tensors())
}

#[test]
fn identical_runs_write_identical_metrics() {
    let (_d, data) = data2();
    let cfg = tiny_config(2);
    let out = tempfile::tempdir().unwrap();
    let (a, b) = (out.path().join("a"), out.path().join("b"));
    run_madan(&cfg, &data, Some(&a)).unwrap();
    run_madan(&cfg, &data, Some(&b)).unwrap();
    let ma = std::fs::read(a.join(METRICS_FILE)).unwrap();
    assert_eq!(ma, std::fs::read(b.join(METRICS_FILE)).unwrap());
    assert!(ma.len() > 200);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (_d, data) = data2();
    let cfg = tiny_config(2);
    let out = tempfile::tempdir().unwrap();
    let full_dir = out.path().join("full");
    let full = run_madan(&cfg, &data, Some(&full_dir)).unwrap();
    let full_metrics = std::fs::read_to_string(full_dir.join(METRICS_FILE)).unwrap();
    let total_epochs = full.history.len();
    for halt in [1, 3, 5, total_epochs - 1] {
        let dir = out.path().join(format!("halt{halt}"));
        let mut t = Trainer::new(cfg.clone(), &data, Some(dir.clone())).unwrap();
        assert!(matches!(t.run(Some(halt), |_, _| {}).unwrap(), RunStatus::Halted));
        let mut t = Trainer::resume(cfg.clone(), &data, Some(dir.clone()), &dir.join(CHECKPOINT_FILE)).unwrap();
        let RunStatus::Finished(o) = t.run(None, |_, _| {}).unwrap() else {
            panic!("resumed run halted");
        };
        assert_eq!(o.history, full.history, "halt after {halt}");
        assert_eq!(o.bundle, full.bundle, "halt after {halt}");
        assert_eq!(std::fs::read_to_string(dir.join(METRICS_FILE)).unwrap(), full_metrics);
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let (_d, data) = data2();
    let cfg = tiny_config(2);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg.clone(), &data, Some(dir.path().to_path_buf())).unwrap();
    t.run(Some(1), |_, _| {}).unwrap();
    let other = TrainConfig { seed: 1, ..cfg };
    assert!(Trainer::resume(other, &data, None, &dir.path().join(CHECKPOINT_FILE)).is_err());
}

#[test]
fn step_count_matches_budget() {
    let dir = tempfile::tempdir().unwrap();
    // Unequal source sizes: X' has 6 + 5 samples.
    let data = {
        let d = dir.path();
        let a = tiny_data(&d.join("a"), &[0.4, 0.8], 6);
        let b = tiny_data(&d.join("b"), &[0.4, 0.8], 5);
        TrainData {
            sources: vec![a.sources[0].clone(), b.sources[1].clone()],
            target: a.target,
            target_test: a.target_test,
        }
    };
    assert_eq!(data.epoch_len(Phase::Segment), 11);
    assert_eq!(data.epoch_len(Phase::Adapt), 6);
    for mode in [TrainMode::Madan, TrainMode::SourceOnly] {
        let cfg = TrainConfig { mode, ..tiny_config(2) };
        let o = run_madan(&cfg, &data, None).unwrap();
        assert_eq!(o.steps, planned_steps(&cfg, &data), "{mode}");
    }
    // Hand count for MADAN: stage 1 = 2 + 2 + 3 steps, each round's
    // stage 2 = 3 * 2 and stage 3 = 1 * 3.
    assert_eq!(planned_steps(&tiny_config(2), &data), 7 + 2 * (6 + 3));
}

#[test]
fn zero_epochs_leave_initialisation_untouched() {
    let (_d, data) = data2();
    let cfg = TrainConfig {
        stage_epochs: [0; 3],
        sad_freeze_epochs: 0,
        ccd_freeze_epochs: 0,
        outer_rounds: 1,
        ..tiny_config(2)
    };
    let o = run_madan(&cfg, &data, None).unwrap();
    assert_eq!(o.steps, 0);
    assert!(o.history.is_empty());
    let init = ModelBundle::<f32>::new(&cfg.model).unwrap();
    for (name, _) in init.named_params() {
        assert!(same(&o.bundle, &init, &name), "{name} changed");
    }
}

#[test]
fn zero_feature_weight_leaves_feature_discriminator_untouched() {
    let (_d, data) = data2();
    let mut cfg = tiny_config(2);
    cfg.weights.w_feat = 0.0;
    let o = run_madan(&cfg, &data, None).unwrap();
    let init = ModelBundle::<f32>::new(&cfg.model).unwrap();
    assert!(same(&o.bundle, &init, "d_f"));
    assert!(!same(&o.bundle, &init, "f"));
    let mut cfg = tiny_config(2);
    cfg.weights.w_feat = 1.0;
    let o = run_madan(&cfg, &data, None).unwrap();
    assert!(!same(&o.bundle, &init, "d_f"));
}

/// Snapshots of the bundle after every stage-2 epoch, keyed by cumulative
/// stage-2 epoch count, plus the bundle at the start of stage 2.
fn stage2_snapshots(cfg: &TrainConfig, data: &TrainData) -> Vec<(usize, ModelBundle<f32>)> {
    let mut snaps = Vec::new();
    let mut t = Trainer::new(cfg.clone(), data, None).unwrap();
    t.run(None, |s, row| {
        if row.phase == Phase::Adapt {
            snaps.push((s.stage2_epochs_done, s.bundle.clone()));
        } else if row.phase == Phase::AdaptedSeg {
            snaps.push((0, s.bundle.clone()));
        }
    })
    .unwrap();
    snaps
}

#[test]
fn freeze_schedule_holds_aggregation_discriminators_and_ccd() {
    let (_d, data) = data2();
    let cfg = TrainConfig {
        stage_epochs: [1, 5, 0],
        sad_freeze_epochs: 2,
        ccd_freeze_epochs: 4,
        outer_rounds: 1,
        ..tiny_config(2)
    };
    let madan = stage2_snapshots(&cfg, &data);
    let mut no_ccd_cfg = cfg.clone();
    no_ccd_cfg.weights.w_ccd = 0.0;
    let no_ccd = stage2_snapshots(&no_ccd_cfg, &data);
    let start = &madan[0].1;
    for ((e, b), (_, r)) in madan.iter().zip(&no_ccd).skip(1) {
        assert_eq!(
            same(b, start, "d_a"),
            *e <= cfg.sad_freeze_epochs,
            "D_A at stage-2 epoch {e}"
        );
        let gens_equal = same(b, r, "g_st") && same(b, r, "g_ts") && same(b, r, "d_s");
        assert_eq!(
            gens_equal,
            *e <= cfg.ccd_freeze_epochs,
            "CCD influence at stage-2 epoch {e}"
        );
    }
}

#[test]
fn freeze_counts_stage2_epochs_across_rounds() {
    let (_d, data) = data2();
    let cfg = TrainConfig {
        stage_epochs: [0, 2, 0],
        sad_freeze_epochs: 2,
        ccd_freeze_epochs: 2,
        outer_rounds: 2,
        ..tiny_config(2)
    };
    let o = run_madan(&cfg, &data, None).unwrap();
    let rows: Vec<_> = o.history.iter().filter(|r| r.phase == Phase::Adapt).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[..2]
        .iter()
        .all(|r| r.term(Term::Sad) == 0.0 && r.term(Term::Ccd) == 0.0));
    assert!(rows[2..]
        .iter()
        .all(|r| r.term(Term::Sad) > 0.0 && r.term(Term::Ccd) > 0.0));
}

#[test]
fn source_segmenters_stay_frozen_after_stage1() {
    let (_d, data) = data2();
    let cfg = tiny_config(2);
    let mut after_stage1 = None;
    let mut t = Trainer::new(cfg.clone(), &data, None).unwrap();
    let status = t
        .run(None, |s, row| {
            if row.phase == Phase::AdaptedSeg {
                after_stage1 = Some(s.bundle.clone());
            }
        })
        .unwrap();
    let RunStatus::Finished(o) = status else { panic!() };
    let s1 = after_stage1.unwrap();
    assert!(s1.source_segmenters_frozen());
    let init = ModelBundle::<f32>::new(&cfg.model).unwrap();
    assert!(!same(&s1, &init, "f_src"));
    assert!(same(&t.state().bundle, &s1, "f_src"));
    assert!(same(&o.bundle, &s1, "f_src"));
}

#[test]
fn stage2_without_semantic_terms_is_a_pure_cyclegan_continuation() {
    let (_d, data) = data2();
    let run = |w_sem: f64, w_task: f64| {
        let mut cfg = TrainConfig {
            stage_epochs: [1, 2, 0],
            sad_freeze_epochs: 2,
            ccd_freeze_epochs: 2,
            outer_rounds: 1,
            ..tiny_config(2)
        };
        cfg.weights.w_sad = 0.0;
        cfg.weights.w_ccd = 0.0;
        cfg.weights.w_sem = w_sem;
        cfg.weights.w_task = w_task;
        run_madan(&cfg, &data, None).unwrap()
    };
    let stage2 = |o: &madan::trainer::TrainOutcome| -> Vec<[f64; 3]> {
        o.history
            .iter()
            .filter(|r| r.phase == Phase::Adapt)
            .map(|r| [r.term(Term::GanSt), r.term(Term::GanTs), r.term(Term::Cyc)])
            .collect()
    };
    // The segmenter (trained or not) must not reach the generators.
    let (a, b) = (run(0.0, 1.0), run(0.0, 0.0));
    assert_eq!(stage2(&a), stage2(&b));
    assert!(same(&a.bundle, &b.bundle, "g_st") && same(&a.bundle, &b.bundle, "g_ts"));
    // Control: with DSC on, it does.
    let (c, d) = (run(1.0, 1.0), run(1.0, 0.0));
    assert_ne!(stage2(&c), stage2(&d));
}

#[test]
fn source_only_mode_trains_only_the_task_segmenter() {
    let (_d, data) = data2();
    let cfg = TrainConfig {
        mode: TrainMode::SourceOnly,
        ..tiny_config(2)
    };
    let o = run_madan(&cfg, &data, None).unwrap();
    assert!(o.history.iter().all(|r| r.phase == Phase::SourceOnly));
    // Round 1 covers stage 1 + stage 3 epochs, later rounds stage 3.
    assert_eq!(o.history.len(), 2 + 1);
    let init = ModelBundle::<f32>::new(&cfg.model).unwrap();
    for p in ["g_st", "g_ts", "d_t", "d_s", "d_a", "d_f", "f_src"] {
        assert!(same(&o.bundle, &init, p), "{p} changed");
    }
    assert!(!same(&o.bundle, &init, "f"));
    assert!(o.best_miou.is_some());
}

#[test]
fn stage1_lowers_held_out_cycle_loss() {
    // Median over three seeds of the held-out L1 round-trip error.
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), &[0.4, 0.8], 8);
    let held_out = madan::trainer::DomainData::from_dataset(
        &madan::datagen::load_dataset(&madan::datagen::SuiteLayout::new(dir.path()).source_test(0)).unwrap(),
    )
    .unwrap();
    let cycle = |b: &ModelBundle<f32>| {
        let fake = b.to_target[0].translate(&held_out.images).unwrap();
        let back = b.to_source[0].translate(&fake).unwrap();
        let d = &held_out.images;
        d.data()
            .iter()
            .zip(back.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum::<f64>()
            / d.numel() as f64
    };
    let mut improved = 0;
    for seed in 0..3 {
        let mut cfg = TrainConfig {
            stage_epochs: [6, 0, 0],
            sad_freeze_epochs: 0,
            ccd_freeze_epochs: 0,
            outer_rounds: 1,
            learning_rate: 1e-3,
            seed,
            ..tiny_config(2)
        };
        cfg.model.seed = seed;
        let init = ModelBundle::<f32>::new(&cfg.model).unwrap();
        let trained = run_madan(&cfg, &data, None).unwrap().bundle;
        if cycle(&trained) < cycle(&init) {
            improved += 1;
        }
    }
    assert!(improved >= 2, "cycle loss improved for {improved}/3 seeds");
}
