use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::nn::FfnKind;
use crate::tensor::Tensor;
use crate::train::{l2_normalize, run_training, task_for, ArchRef, ClipModel, DataConfig, EvalConfig, TrainConfig};
use crate::zoo::{build, Arch, ConvBlockKind, ModelGraph, TextSpec, VariantSpec, VitSpec};

fn rand_unit(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    l2_normalize(&Tensor::<f64>::randn(vec![n, d], 1.0, rng)).unwrap()
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

#[test]
fn zero_shot_self_similarity_and_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let classes = rand_unit(5, 8, &mut rng);
    let p = ClassPromptSet::from_embeddings(names(5), &classes).unwrap();
    let labels: Vec<usize> = (0..5).collect();
    let z = classify_embeddings(&classes, &p, &labels).unwrap();
    assert_eq!(z.predictions, labels);
    assert_eq!(z.accuracy, 1.0);
    let imgs = Tensor::<f64>::randn(vec![50, 8], 1.0, &mut rng);
    let a = classify_embeddings(&imgs, &p, &[0; 50]).unwrap();
    let b = classify_embeddings(&imgs.map(|v| v * 7.5), &p, &[0; 50]).unwrap();
    assert_eq!(a.predictions, b.predictions);
}

#[test]
fn zero_shot_chance_level_on_random_embeddings() {
    // accuracy ~ Binomial(n, 1/K)/n; bound by 3 standard deviations
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (k, n) = (4usize, 10_000usize);
    let p = ClassPromptSet::from_embeddings(names(k), &rand_unit(k, 16, &mut rng)).unwrap();
    let imgs = rand_unit(n, 16, &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let acc = classify_embeddings(&imgs, &p, &labels).unwrap().accuracy;
    let q = 1.0 / k as f64;
    let sd = (q * (1.0 - q) / n as f64).sqrt();
    assert!((acc - q).abs() <= 3.0 * sd, "{acc}");
}

#[test]
fn zero_shot_needs_two_classes() {
    let one = Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(ClassPromptSet::from_embeddings(names(1), &one), Err(Error::Config(_))));
}

/// Recall by sorting each query's candidates (stable, partner first on ties).
fn sort_oracle(x: &Tensor<f64>, y: &Tensor<f64>, k: usize) -> (f64, f64) {
    let s = similarity(x, y).unwrap();
    let n = s.len();
    let hit = |scores: Vec<f64>, q: usize| {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then((a != q).cmp(&(b != q))));
        order[..k].contains(&q)
    };
    let i2t = (0..n).filter(|&i| hit(s[i].clone(), i)).count();
    let t2i = (0..n).filter(|&i| hit((0..n).map(|j| s[j][i]).collect(), i)).count();
    (i2t as f64 / n as f64, t2i as f64 / n as f64)
}

#[test]
fn recall_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_unit(6, 5, &mut rng);
    assert_eq!(retrieval_recall_at_k(&x, &x, 1).unwrap(), (1.0, 1.0));
    let y = rand_unit(6, 5, &mut rng);
    assert_eq!(retrieval_recall_at_k(&x, &y, 6).unwrap(), (1.0, 1.0));
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let (a, b) = (rand_unit(4, 3, &mut r), rand_unit(4, 3, &mut r));
        for k in 1..=4 {
            assert_eq!(retrieval_recall_at_k(&a, &b, k).unwrap(), sort_oracle(&a, &b, k));
        }
    }
    assert!(matches!(retrieval_recall_at_k(&x, &y, 7), Err(Error::Contract(_))));
    assert!(matches!(retrieval_recall_at_k(&x, &y, 0), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_monotone_in_k(seed in 0u64..10_000, n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (rand_unit(n, 4, &mut rng), rand_unit(n, 4, &mut rng));
        let mut prev = (0.0, 0.0);
        for k in 1..=n {
            let r = retrieval_recall_at_k(&x, &y, k).unwrap();
            prop_assert!(r.0 >= prev.0 && r.1 >= prev.1);
            prev = r;
        }
    }

    #[test]
    fn zero_shot_argmax_survives_monotone_maps(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cls = rand_unit(6, 4, &mut rng);
        let imgs = rand_unit(10, 4, &mut rng);
        let s = similarity(&imgs, &cls).unwrap();
        let direct: Vec<usize> = s.iter().map(|r| super::zero_shot::argmax(r)).collect();
        let mapped: Vec<usize> = s
            .iter()
            .map(|r| super::zero_shot::argmax(&r.iter().map(|v| (3.0 * v).exp() - 2.0).collect::<Vec<_>>()))
            .collect();
        prop_assert_eq!(direct, mapped);
    }
}

fn tiny_vitamin(size: usize) -> ModelGraph<f64> {
    let v = VariantSpec {
        name: "tiny".into(),
        stem_channels: 8,
        stage_depths: [1, 1, 1],
        stage_channels: [8, 16, 24],
        heads: 2,
        embed_dim: 16,
        strides: [2, 2, 2, 2],
        expansion: 2,
        patchify_kernel: 3,
        conv_block: ConvBlockKind::MbconvLn,
        token_block: FfnKind::GeGlu,
    };
    build(&Arch::Vitamin(v), size, 4).unwrap()
}

#[test]
fn one_tile_window_is_direct_extraction() {
    let m = tiny_vitamin(32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(vec![2, 3, 32, 32], 1.0, &mut rng);
    assert!(sliding_window_extract(&m, &x, 32).unwrap().bitwise_eq(&m.tokens_of(&x).unwrap()));
}

#[test]
fn tiles_stitch_row_major() {
    let m = tiny_vitamin(32);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::randn(vec![1, 3, 64, 96], 1.0, &mut rng);
    let map = sliding_window_extract(&m, &x, 32).unwrap();
    assert_eq!(map.shape(), &[1, 4 * 6, 24]);
    // tile (row 1, col 2) occupies global token rows 2..4, cols 4..6
    let mut crop = Vec::new();
    for c in 0..3 {
        for y in 32..64 {
            let at = (c * 64 + y) * 96 + 64;
            crop.extend_from_slice(&x.data()[at..at + 32]);
        }
    }
    let t = m.tokens_of(&Tensor::new(vec![1, 3, 32, 32], crop).unwrap()).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            let g = ((2 + r) * 6 + 4 + c) * 24;
            let l = (r * 2 + c) * 24;
            assert_eq!(&map.data()[g..g + 24], &t.data()[l..l + 24]);
        }
    }
    let constant = Tensor::<f64>::full(vec![1, 3, 64, 64], 0.3);
    let cm = sliding_window_extract(&m, &constant, 32).unwrap();
    let first = &cm.data()[..24];
    let tile = |ty: usize, tx: usize| -> Vec<f64> {
        (0..4)
            .flat_map(|k| {
                let g = ((ty * 2 + k / 2) * 4 + tx * 2 + k % 2) * 24;
                cm.data()[g..g + 24].to_vec()
            })
            .collect()
    };
    assert_eq!(first, &tile(0, 0)[..24]);
    for (ty, tx) in [(0, 1), (1, 0), (1, 1)] {
        assert_eq!(tile(0, 0), tile(ty, tx));
    }
}

#[test]
fn window_errors() {
    let m = tiny_vitamin(32);
    let x = Tensor::<f64>::zeros(vec![1, 3, 48, 64]);
    match sliding_window_extract(&m, &x, 32) {
        Err(Error::Dimension { detail, .. }) => assert!(detail.contains("pad to 64x64"), "{detail}"),
        other => panic!("{other:?}"),
    }
    let y = Tensor::<f64>::zeros(vec![1, 3, 64, 64]);
    assert!(matches!(sliding_window_extract(&m, &y, 24), Err(Error::Dimension { .. })));
    assert!(matches!(sliding_window_extract(&m, &y, 64), Err(Error::Contract(_))));
    let vit = build::<f64>(
        &Arch::Vit(VitSpec {
            name: "v".into(),
            patch: 8,
            width: 16,
            depth: 1,
            heads: 2,
            embed_dim: 8,
        }),
        16,
        0,
    )
    .unwrap();
    assert_eq!(sliding_window_extract(&vit, &Tensor::zeros(vec![1, 3, 32, 48]), 16).unwrap().shape(), &[1, 24, 16]);
}

fn tiny_config(steps: u64) -> TrainConfig {
    let image = tiny_vitamin(16).arch;
    TrainConfig {
        seed: 5,
        batch_size: 8,
        total_samples: 8 * steps,
        lr: 2e-3,
        weight_decay: 0.02,
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-6,
        warmup_steps: 1,
        schedule: crate::train::ScheduleKind::WarmupCosine,
        drop_path: 0.0,
        image_size: 16,
        image: ArchRef::Spec(image),
        text: TextSpec {
            vocab: 14,
            context: 8,
            width: 16,
            depth: 1,
            heads: 2,
            embed_dim: 16,
        },
        data: DataConfig {
            n_values: 4,
            context: 8,
            noise: 0.05,
        },
        ltt: Default::default(),
        eval: EvalConfig {
            zero_shot_per_class: 2,
            loss_batches: 1,
            templates: 2,
        },
        log_every: 1,
        checkpoint_every: 0,
        log_wall_time: false,
    }
}

#[test]
fn evaluation_is_pure_and_deterministic() {
    let cfg = tiny_config(2);
    let m = ClipModel::<f32>::new(&cfg.image_arch().unwrap(), 16, &cfg.text, 1).unwrap();
    let task = task_for(&cfg).unwrap();
    let before = model_digest(&m);
    let a = evaluate_task(&m, &task, &cfg.eval, 8).unwrap();
    let b = evaluate_task(&m, &task, &cfg.eval, 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(model_digest(&m), before);
    let reps = task_reports(&m, &task, &cfg.eval, 8, &a).unwrap();
    assert_eq!(reps.len(), 3);
    let j = reps[1].to_json().unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&j).unwrap(), reps[1]);
    assert!(matches!(EvalReport::new("t", "r_at_1", 1.5, 1, 0, "d"), Err(Error::Numeric(_))));
    // template averaging keeps rows unit-norm
    let p = synthetic_prompts(&m, &task, &task.holdout(), 2).unwrap();
    for r in p.embeddings.data().chunks(16) {
        let n: f64 = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

#[test]
fn sweep_single_cell_matches_standalone_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(3);
    let grid = SweepGrid {
        variants: vec![cfg.image.clone()],
        budgets: vec![cfg.total_samples],
        seeds: vec![],
    };
    let rows = benchmark_sweep(&grid, &cfg, &dir.path().join("sw"), false, |_| {}).unwrap();
    assert_eq!(rows.len(), 1);
    let solo = run_training::<f32>(&cfg, &dir.path().join("solo"), false, |_| {}).unwrap();
    let m = evaluate_task(&solo.state.model, &task_for(&cfg).unwrap(), &cfg.eval, cfg.batch_size).unwrap();
    assert_eq!(rows[0].final_loss, m.eval_loss);
    assert_eq!(rows[0].zero_shot_acc, m.zero_shot_acc);
    assert_eq!(rows[0].r_at_1, m.r_at_1);
    assert_eq!(rows[0].status, CellStatus::Ok);
    let csv = std::fs::read_to_string(dir.path().join("sw").join(SWEEP_CSV)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), SWEEP_HEADER);
}

#[test]
fn sweep_rows_cover_grid_and_resume_reuses_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let mut cfg = tiny_config(2);
    cfg.warmup_steps = 0;
    let mut vit = cfg.clone();
    vit.image = ArchRef::Spec(Arch::Vit(VitSpec {
        name: "tiny-vit".into(),
        patch: 4,
        width: 16,
        depth: 1,
        heads: 2,
        embed_dim: 16,
    }));
    let grid = SweepGrid {
        variants: vec![cfg.image.clone(), vit.image.clone()],
        budgets: vec![8, 16],
        seeds: vec![1, 2],
    };
    let rows = benchmark_sweep(&grid, &cfg, &out, false, |_| {}).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(read_sweep_csv(&out.join(SWEEP_CSV)).unwrap().len(), 8);
    let svgs: Vec<Vec<u8>> = PLOT_METRICS
        .iter()
        .map(|m| std::fs::read(out.join(format!("sweep_{m}.svg"))).unwrap())
        .collect();
    let mut ran = 0;
    let again = benchmark_sweep(&grid, &cfg, &out, true, |_| ran += 1).unwrap();
    assert_eq!(ran, 8);
    assert_eq!(again.len(), rows.len());
    for (a, b) in again.iter().zip(&rows) {
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    }
    for (m, bytes) in PLOT_METRICS.iter().zip(svgs) {
        assert_eq!(std::fs::read(out.join(format!("sweep_{m}.svg"))).unwrap(), bytes);
    }
    // a config error in any cell is reported before training
    let bad = SweepGrid {
        budgets: vec![8, 0],
        ..grid
    };
    assert!(matches!(benchmark_sweep(&bad, &cfg, &dir.path().join("bad"), false, |_| {}), Err(Error::Config(_))));
}

#[test]
fn diverging_cell_is_marked_failed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(4);
    cfg.lr = 1e30;
    let grid = SweepGrid {
        variants: vec![cfg.image.clone()],
        budgets: vec![32],
        seeds: vec![],
    };
    let rows = benchmark_sweep(&grid, &cfg, dir.path(), false, |_| {}).unwrap();
    assert_eq!(rows[0].status, CellStatus::Failed);
    let csv = std::fs::read_to_string(dir.path().join(SWEEP_CSV)).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",failed"));
}
