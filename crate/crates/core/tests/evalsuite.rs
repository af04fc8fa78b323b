use humocon_core::evalsuite::oracles::binomial_band;
use humocon_core::evalsuite::*;
use humocon_core::synthkit::{generate_dataset, SceneSpec};
use humocon_core::trainer::{pretrain, StageConfig, StageSelect, TrainConfig};
use humocon_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Frames = Vec<Vec<f64>>;

fn random_frames(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Frames {
    (0..n).map(|_| (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn random_features_retrieve_at_chance() {
    let (seqs, t, k, h) = (100, 8, 32, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let video: Vec<Frames> = (0..seqs).map(|_| random_frames(&mut rng, t, h)).collect();
    let motion: Vec<Frames> = (0..seqs).map(|_| random_frames(&mut rng, k, h)).collect();
    let maps: Vec<Vec<usize>> = vec![(0..t).map(|i| 4 * i).collect(); seqs];
    let r = retrieval_from_features(&video, &motion, &maps).unwrap();
    assert_eq!(r.chance, 1.0 / 32.0);
    let (lo, hi) = binomial_band(r.chance, seqs * t, 3.0);
    assert!((lo..=hi).contains(&r.top1), "{} outside [{lo}, {hi}]", r.top1);
}

#[test]
fn matching_frames_retrieve_perfectly() {
    let (t, k) = (8, 32);
    let one_hot = |i: usize| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let map: Vec<usize> = (0..t).map(|i| 4 * i + 1).collect();
    let video = vec![map.iter().map(|&a| one_hot(a)).collect::<Frames>()];
    let motion = vec![(0..k).map(one_hot).collect::<Frames>()];
    let r = retrieval_from_features(&video, &motion, &[map]).unwrap();
    assert_eq!((r.top1, r.top5), (1.0, 1.0));
}

#[test]
fn ties_share_the_credit() {
    // the target ties with three others: top-1 credit is one quarter
    let video = vec![vec![vec![1.0, 0.0]]];
    let motion = vec![vec![vec![1.0, 0.0]; 4].into_iter().chain([vec![0.0, 1.0]]).collect::<Frames>()];
    let r = retrieval_from_features(&video, &motion, &[vec![2]]).unwrap();
    assert_eq!((r.top1, r.top5), (0.25, 1.0));
}

#[test]
fn unpaired_sets_are_rejected() {
    let v = vec![vec![vec![1.0]]];
    let m = vec![vec![vec![1.0]]];
    assert!(matches!(retrieval_from_features(&v, &[], &[vec![0]]), Err(Error::Input(_))));
    assert!(matches!(retrieval_from_features(&v, &m, &[vec![0, 0]]), Err(Error::Input(_))));
    assert!(matches!(retrieval_from_features(&v, &m, &[vec![3]]), Err(Error::Index(_))));
}

fn tiny_config(scene: &SceneSpec) -> TrainConfig {
    let mut cfg = TrainConfig::desk(scene);
    cfg.stage1 = StageConfig { iters: 3, micro_batch: 4, ..cfg.stage1 };
    cfg.stage2 = StageConfig { iters: 3, micro_batch: 4, ..cfg.stage2 };
    cfg
}

#[test]
fn ablation_is_deterministic_across_thread_counts() {
    let scene = SceneSpec::default();
    let train = generate_dataset(&scene, 8).unwrap();
    let held = generate_dataset(&SceneSpec { seed: 99, ..scene.clone() }, 4).unwrap();
    let rows = [AblationRowKind::Full, AblationRowKind::WoAlign];
    let run = |threads| run_ablation(&tiny_config(&scene), &rows, &[1, 2, 3], &train, &held, &AblationOptions { threads, metrics_dir: None }).unwrap();
    let (a, b) = (run(1), run(2));
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.rows.len(), 2);
    assert!(a.rows.iter().all(|r| r.error.is_none() && r.per_seed.len() == 3));

    let single = run_ablation(&tiny_config(&scene), &rows[..1], &[1, 2, 3], &train, &held, &AblationOptions::default()).unwrap();
    assert!(single.comparisons.is_empty());
    assert!(matches!(
        run_ablation(&tiny_config(&scene), &rows, &[1, 1, 2], &train, &held, &AblationOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn empty_directory_gives_an_empty_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = report(tmp.path()).unwrap();
    assert!(!out.warnings.is_empty());
    assert_eq!(out.files, vec![tmp.path().join(SUMMARY_FILE)]);
}

#[test]
fn full_run_report_is_complete_and_reproducible() {
    let scene = SceneSpec::default();
    let train = generate_dataset(&scene, 8).unwrap();
    let held = generate_dataset(&SceneSpec { seed: 99, ..scene.clone() }, 4).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&scene);
    pretrain(cfg.clone(), &train, StageSelect::All, tmp.path()).unwrap();
    run_ablation(&cfg, &[AblationRowKind::Full, AblationRowKind::WoAct], &[1, 2, 3], &train, &held, &AblationOptions::default())
        .unwrap()
        .write(tmp.path())
        .unwrap();

    let first = report(tmp.path()).unwrap();
    assert!(first.warnings.is_empty(), "{:?}", first.warnings);
    for f in PLOT_FILES {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let text = std::fs::read(tmp.path().join(SUMMARY_FILE)).unwrap();
    let second = report(tmp.path()).unwrap();
    assert_eq!(first, second);
    assert_eq!(std::fs::read(tmp.path().join(SUMMARY_FILE)).unwrap(), text);
}
