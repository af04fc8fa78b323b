use humocon_core::synthkit::{generate_dataset, PairedSample, SceneSpec};
use humocon_core::trainer::*;
use humocon_core::Error;

fn tiny() -> (TrainConfig, Vec<PairedSample>) {
    let scene = SceneSpec::default();
    let mut cfg = TrainConfig::desk(&scene);
    cfg.seed = 3;
    cfg.stage1 = StageConfig { iters: 4, micro_batch: 4, ..cfg.stage1 };
    cfg.stage2 = StageConfig { iters: 4, micro_batch: 4, ..cfg.stage2 };
    (cfg, generate_dataset(&scene, 8).unwrap())
}

fn video_params(t: &Trainer) -> Vec<(String, Vec<f64>)> {
    let p = &t.model.params;
    p.ids().map(|id| (p.name(id).to_string(), p.get(id).data().to_vec())).filter(|(n, _)| n.starts_with("video.")).collect()
}

#[test]
fn presets_carry_their_schedules() {
    let scene = SceneSpec::default();
    let p = TrainConfig::preset("full-scale", &scene).unwrap();
    assert_eq!((p.stage1.iters, p.stage1.lr, p.stage1.micro_batch, p.stage1.grad_accum_steps), (60_000, 1e-4, 16, 8));
    assert_eq!((p.stage2.iters, p.stage2.lr, p.stage2.micro_batch, p.stage2.grad_accum_steps), (8_000, 1e-5, 16, 8));
    let w = &p.loss.weights;
    assert_eq!((w.lambda_dis, w.lambda_act, w.lambda_align), (0.3, 0.1, 0.1));
    let d = TrainConfig::preset("desk", &scene).unwrap();
    assert_eq!((d.stage1.iters, d.stage1.lr, d.stage2.iters, d.stage2.lr), (2000, 1e-3, 1000, 3e-4));
    assert!(matches!(TrainConfig::preset("huge", &scene), Err(Error::Config(_))));
}

#[test]
fn total_decomposes_at_every_step_and_stage_one_is_motion_only() {
    let (cfg, data) = tiny();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let before = video_params(&t);
    let mut reports = Vec::new();
    for stage in [1, 2] {
        t.begin_stage(stage).unwrap();
        t.run_stage(&data, |r| {
            reports.push(r.clone());
            Ok(())
        })
        .unwrap();
        if stage == 1 {
            assert_eq!(video_params(&t), before);
        }
    }
    assert_eq!(reports.len(), 8);
    for r in &reports {
        let want = total_loss(&r.parts, &cfg.loss.weights, cfg.loss.commitment).unwrap();
        assert!((r.total - want).abs() <= 1e-12 * want.abs().max(1.0));
        assert!(r.total.is_finite());
    }
    for r in &reports[..4] {
        assert_eq!(r.stage, 1);
        assert!(r.parts.rec_motion.is_some() && r.parts.rec_video.is_none() && r.parts.align.is_none());
    }
    for r in &reports[4..] {
        assert!(r.parts.rec_video.is_some() && r.parts.align.is_some() && r.parts.dis.is_some() && r.parts.act.is_some());
    }
}

#[test]
fn disabling_alignment_leaves_the_term_absent() {
    let (mut cfg, data) = tiny();
    cfg.loss.align = false;
    let mut t = Trainer::new(cfg).unwrap();
    t.begin_stage(1).unwrap();
    t.run_stage(&data, |_| Ok(())).unwrap();
    t.begin_stage(2).unwrap();
    let r = t.train_step(&data).unwrap();
    assert!(r.parts.align.is_none() && r.parts.rec_video.is_some());
}

#[test]
fn stage_two_needs_a_finished_stage_one() {
    let (cfg, data) = tiny();
    let mut t = Trainer::new(cfg).unwrap();
    assert!(matches!(t.begin_stage(2), Err(Error::Input(_))));
    t.begin_stage(1).unwrap();
    t.train_step(&data).unwrap();
    assert!(matches!(t.begin_stage(2), Err(Error::Input(_))));
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(pretrain(tiny().0, &data, StageSelect::Two, tmp.path()), Err(Error::Input(_))));
}

#[test]
fn zero_iterations_checkpoint_the_initialisation() {
    let (mut cfg, data) = tiny();
    cfg.stage1.iters = 0;
    cfg.stage2.iters = 0;
    let tmp = tempfile::tempdir().unwrap();
    pretrain(cfg.clone(), &data, StageSelect::All, tmp.path()).unwrap();
    let loaded = Trainer::load(stage_checkpoint(tmp.path(), 2)).unwrap();
    let fresh = Trainer::new(cfg).unwrap();
    assert_eq!(loaded.model.params, fresh.model.params);
    assert_eq!(loaded.model.motion_codebook, fresh.model.motion_codebook);
    assert!(read_metrics(tmp.path().join("metrics.jsonl")).unwrap().is_empty());
}

#[test]
fn save_load_round_trip_and_corruption() {
    let (cfg, data) = tiny();
    let mut t = Trainer::new(cfg).unwrap();
    t.begin_stage(1).unwrap();
    t.train_step(&data).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.ckpt");
    t.save(&path).unwrap();
    let back = Trainer::load(&path).unwrap();
    assert_eq!(back.model.params, t.model.params);
    assert_eq!(back.model.motion_codebook, t.model.motion_codebook);
    assert_eq!((back.stage, back.step, back.config_hash.as_str()), (1, 1, t.config_hash.as_str()));

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Trainer::load(&path), Err(Error::Integrity { .. })));

    let mut foreign = std::fs::read(tmp.path().join("t.ckpt")).unwrap();
    foreign[13] = b'9';
    std::fs::write(&path, &foreign).unwrap();
    assert!(matches!(Trainer::load(&path), Err(Error::Version { .. })));
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_curve() {
    let (cfg, data) = tiny();
    let tmp = tempfile::tempdir().unwrap();
    let run = |stop: Option<u64>| {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let mut out = Vec::new();
        t.begin_stage(1).unwrap();
        for _ in 0..stop.unwrap_or(4) {
            out.push(t.train_step(&data).unwrap());
        }
        if stop.is_some() {
            let p = tmp.path().join("mid.ckpt");
            t.save(&p).unwrap();
            t = Trainer::load(&p).unwrap();
        }
        let mut sink = |r: &LossReport| {
            out.push(r.clone());
            Ok(())
        };
        t.run_stage(&data, &mut sink).unwrap();
        t.begin_stage(2).unwrap();
        t.run_stage(&data, &mut sink).unwrap();
        out
    };
    let (full, resumed) = (run(None), run(Some(2)));
    assert_eq!(full.len(), resumed.len());
    for (a, b) in full.iter().zip(&resumed) {
        assert!((a.total - b.total).abs() <= 1e-6, "step {} of stage {}", a.step, a.stage);
    }
}

#[test]
fn metrics_file_round_trips() {
    let (cfg, data) = tiny();
    let tmp = tempfile::tempdir().unwrap();
    pretrain(cfg, &data, StageSelect::One, tmp.path()).unwrap();
    let reports = read_metrics(tmp.path().join("metrics.jsonl")).unwrap();
    assert_eq!(reports.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(stage_checkpoint(tmp.path(), 1).exists());
}
