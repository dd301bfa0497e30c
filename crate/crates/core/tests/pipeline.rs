use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skd_core::distiller::{
    finetune, init_student, load_checkpoint, pretrain_student, save_checkpoint, total_loss, Architecture,
    Supervision, TrainConfig,
};
use skd_core::mincut::{load_mask, save_mask};
use skd_core::{
    build_selection_graph, class_centroids, energy, load_student_set, minimize, save_student_set, synthesize,
    Measure, SelectionMask, SynthConfig,
};

fn small_config() -> SynthConfig {
    SynthConfig {
        class_count: 4,
        per_class_count: 10,
        versions: 4,
        ..SynthConfig::default()
    }
}

#[test]
fn file_pipeline_matches_in_memory_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let set = synthesize(&small_config()).unwrap();
    save_student_set(&set, dir.path().join("set.skd")).unwrap();
    let loaded = load_student_set(dir.path().join("set.skd")).unwrap();
    assert_eq!(loaded, set);

    let graph = build_selection_graph(&loaded, &class_centroids(&loaded).unwrap(), Measure::CosSim).unwrap();
    let (mask, e) = minimize(&graph, -1.0).unwrap();
    assert_eq!(energy(&graph, &mask, -1.0).unwrap(), e);
    save_mask(&mask, -1.0, dir.path().join("mask.txt")).unwrap();
    let (mask_back, lambda) = load_mask(dir.path().join("mask.txt")).unwrap();
    assert_eq!((mask_back.clone(), lambda), (mask.clone(), -1.0));

    let config = TrainConfig { epochs: 2, seed: 3, ..TrainConfig::default() };
    let mut a = init_student(&Architecture::for_dataset(&set), 3).unwrap();
    pretrain_student(&mut a, &set, &config).unwrap();
    save_checkpoint(&a, dir.path().join("pre.json")).unwrap();
    let mut b = load_checkpoint(dir.path().join("pre.json")).unwrap();
    finetune(&mut a, &set, Some(&mask), &config).unwrap();
    finetune(&mut b, &loaded, Some(&mask_back), &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn loss_decomposes_and_dc_equals_sc_with_full_mask() {
    let set = synthesize(&small_config()).unwrap();
    let model = init_student(&Architecture::for_dataset(&set), 5).unwrap();
    let full = SelectionMask::full(set.len());
    let half: SelectionMask = (0..set.len()).map(|i| i % 2 == 1).collect::<Vec<_>>().into();

    let sc = total_loss(&model, &set, Some(&half), Supervision::Sc).unwrap();
    let c = total_loss(&model, &set, None, Supervision::C).unwrap();
    let s = total_loss(&model, &set, Some(&half), Supervision::S).unwrap();
    assert!((sc - (c + s)).abs() <= 1e-12 * sc.abs());

    let dc = total_loss(&model, &set, None, Supervision::Dc).unwrap();
    let sc_full = total_loss(&model, &set, Some(&full), Supervision::Sc).unwrap();
    assert_eq!(dc, sc_full);
}

#[test]
fn selection_prefers_inliers_across_seeds() {
    for seed in 20..25 {
        let set = synthesize(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let graph = build_selection_graph(&set, &class_centroids(&set).unwrap(), Measure::CosSim).unwrap();
        let (mask, _) = minimize(&graph, -1.0).unwrap();
        let rate = |flag: bool| {
            let group: Vec<_> = set.records().iter().filter(|r| r.outlier_flag == Some(flag)).collect();
            group.iter().filter(|r| mask.alpha[r.id]).count() as f64 / group.len() as f64
        };
        assert!(rate(false) > rate(true), "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Classes too large for exhaustive search: the optimum must still beat
    // every random mask and every single-face flip of itself.
    #[test]
    fn optimum_beats_random_and_flipped_masks(seed in 0u64..10_000, lambda in -8.0f64..0.0) {
        let set = synthesize(&SynthConfig {
            class_count: 3,
            per_class_count: 40,
            versions: 1,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let graph = build_selection_graph(&set, &class_centroids(&set).unwrap(), Measure::CosSim).unwrap();
        let (mask, best) = minimize(&graph, lambda).unwrap();
        let tol = 1e-9 * (1.0 + best.abs());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let p = rng.random::<f64>();
            let other: SelectionMask = (0..set.len()).map(|_| rng.random_bool(p)).collect::<Vec<_>>().into();
            prop_assert!(energy(&graph, &other, lambda).unwrap() >= best - tol);
        }
        for i in 0..set.len() {
            let mut flipped = mask.clone();
            flipped.alpha[i] = !flipped.alpha[i];
            prop_assert!(energy(&graph, &flipped, lambda).unwrap() >= best - tol);
        }
    }
}
