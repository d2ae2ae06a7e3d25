mod common;

use common::oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselseg::dataio::{read_checkpoint, write_checkpoint, BinaryMask, Checkpoint, FundusImage};
use vesselseg::evaluate::{roc_auc, stratified_auc_scores};
use vesselseg::labelgen::{
    build_class_map, dilate, erode, opening, ClassMap, ClassWeights, StructuringElement,
};
use vesselseg::network::{Mode, NetConfig, ParamKind, ParamStore, Tensor, UNet};
use vesselseg::preprocess::{to_gray_clahe, ClaheConfig, GrayImage, PatchSample, Transform};
use vesselseg::training::{loss_and_gradients, sgd_step, total_loss, OptimizerState};

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> BinaryMask {
    let density = rng.gen_range(0.1..0.7);
    BinaryMask::new(n, n, (0..n * n).map(|_| rng.gen_bool(density)).collect()).unwrap()
}

#[test]
fn morphology_matches_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let m = random_mask(&mut rng, 32);
        for r in [1, 2] {
            let se = StructuringElement::square(2 * r + 1).unwrap();
            assert_eq!(erode(&m, &se), oracle::erode_square(&m, r as isize));
            assert_eq!(dilate(&m, &se), oracle::dilate_square(&m, r as isize));
        }
        let se3 = StructuringElement::square(3).unwrap();
        assert_eq!(opening(&m, &se3), oracle::open3(&m));
        assert_eq!(build_class_map(&m, 2).unwrap(), oracle::class_map(&m, 2));
    }
}

#[test]
fn clahe_matches_naive_oracle_within_one_level() {
    let n = 64;
    let green: Vec<u8> = (0..n * n)
        .map(|i| if i / n + i % n < 70 { 80 } else { 170 })
        .collect();
    let img = FundusImage::new(n, n, green.iter().flat_map(|&g| [0, g, 0]).collect()).unwrap();
    let cfg = ClaheConfig {
        tile_rows: 2,
        tile_cols: 2,
        clip_limit: 2.0,
    };
    let got = to_gray_clahe(&img, &cfg).unwrap();
    let want = oracle::clahe(&green, n, n, 2, 2, 2.0);
    let worst = got
        .data()
        .iter()
        .zip(&want)
        .map(|(&g, &w)| (g as f64 * 255.0 - w).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1.0, "max difference {worst} gray levels");
}

#[test]
fn auc_equals_mann_whitney_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=64);
        // Few distinct values so ties are common.
        let levels = rng.gen_range(1..8);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / 4.0)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let auc = roc_auc(&scores, &labels).unwrap().auc;
        assert!((auc - oracle::mann_whitney(&scores, &labels)).abs() < 1e-9);
    }
}

#[test]
fn stratified_auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 32;
    for _ in 0..20 {
        let gt = random_mask(&mut rng, n);
        let classes = build_class_map(&gt, 2).unwrap();
        let fov = BinaryMask::new(n, n, (0..n * n).map(|_| rng.gen_bool(0.9)).collect()).unwrap();
        let scores: Vec<f64> = (0..n * n)
            .map(|_| (rng.gen_range(0..50) as f64) / 50.0)
            .collect();
        let got = stratified_auc_scores(&scores, &classes, Some(&fov)).unwrap();
        let oracle_for = |positive: &[u8]| {
            let (mut s, mut l) = (Vec::new(), Vec::new());
            for i in 0..n * n {
                let c = classes.data()[i];
                if !fov.data()[i] || (c >= 3 && !positive.contains(&c)) {
                    continue;
                }
                s.push(scores[i]);
                l.push(positive.contains(&c));
            }
            oracle::mann_whitney(&s, &l)
        };
        for (value, positive) in [
            (got.all, &[3u8, 4][..]),
            (got.thick, &[3]),
            (got.thin, &[4]),
        ] {
            let want = oracle_for(positive);
            if want.is_nan() {
                assert!(value.is_nan());
            } else {
                assert!((value - want).abs() < 1e-9, "{value} vs {want}");
            }
        }
    }
}

fn rotation_only(deg: f64) -> Transform {
    Transform {
        flip_horizontal: false,
        flip_vertical: false,
        rotation_deg: deg,
        scale: 1.0,
        shear_deg: 0.0,
        brightness: 0.0,
        contrast: 1.0,
        noise_sigma: 0.0,
    }
}

fn random_patch(rng: &mut ChaCha8Rng, n: usize) -> PatchSample {
    PatchSample {
        input: GrayImage::new(n, n, (0..n * n).map(|_| rng.gen::<f32>()).collect()).unwrap(),
        labels: ClassMap::new(n, n, (0..n * n).map(|_| rng.gen_range(0..5)).collect()).unwrap(),
        origin: (0, 0),
        source: 0,
    }
}

#[test]
fn quarter_turns_are_index_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 12;
    let p = random_patch(&mut rng, n);
    let out = rotation_only(90.0).apply(&p, &mut rng);
    // Output (r, c) reads source row n-1-c, column r.
    for r in 0..n {
        for c in 0..n {
            assert_eq!(out.labels.get(r, c), p.labels.get(n - 1 - c, r));
            assert!((out.input.get(r, c) - p.input.get(n - 1 - c, r)).abs() < 1e-5);
        }
    }
    let half = rotation_only(180.0).apply(&p, &mut rng);
    for r in 0..n {
        for c in 0..n {
            assert_eq!(half.labels.get(r, c), p.labels.get(n - 1 - r, n - 1 - c));
        }
    }
}

#[test]
fn arbitrary_rotation_matches_nearest_neighbour_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 33;
    let p = random_patch(&mut rng, n);
    let centre = (n as f64 - 1.0) / 2.0;
    for deg in [17.0, -23.5, 30.0] {
        let out = rotation_only(deg).apply(&p, &mut rng);
        let t: f64 = f64::to_radians(deg);
        let mut agree = 0;
        let mut checked = 0;
        for r in 0..n {
            for c in 0..n {
                // Rotate the output offset back by the angle, as a complex product.
                let (re, im) = (c as f64 - centre, r as f64 - centre);
                let (sx, sy) = (re * t.cos() + im * t.sin(), im * t.cos() - re * t.sin());
                let (sx, sy) = (sx + centre, sy + centre);
                if sx < -0.5 || sy < -0.5 || sx > n as f64 - 0.5 || sy > n as f64 - 0.5 {
                    continue;
                }
                checked += 1;
                if out.labels.get(r, c) == p.labels.get(sy.round() as usize, sx.round() as usize) {
                    agree += 1;
                }
            }
        }
        // Only exact rounding ties may differ.
        assert!(
            agree as f64 >= 0.999 * checked as f64,
            "{deg}: {agree}/{checked}"
        );
    }
}

#[test]
fn small_descent_step_does_not_increase_loss() {
    let net = UNet::new(&NetConfig::micro()).unwrap();
    let weights = ClassWeights::new(vec![1.0, 2.0, 4.0, 2.0, 4.0]).unwrap();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut params: ParamStore<f32> = net.init_params(seed).unwrap();
        let x = Tensor::from_vec(
            &[2, 1, 16, 16],
            (0..512).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap();
        let targets: Vec<ClassMap> = (0..2)
            .map(|_| {
                ClassMap::new(16, 16, (0..256).map(|_| rng.gen_range(0..5)).collect()).unwrap()
            })
            .collect();
        let eval = loss_and_gradients(&net, &params, &x, &targets, &weights, 5e-4, 0).unwrap();
        let mut state = OptimizerState::new(&params);
        sgd_step(&mut params, &eval.grads, &mut state, 1e-4, 0.0).unwrap();
        let (out, _) = net
            .forward(&x, &params, Mode::Train { dropout_seed: 0 })
            .unwrap();
        let after = total_loss(&out, &targets, &weights, &params, 5e-4)
            .unwrap()
            .total;
        assert!(
            after <= eval.loss.total,
            "seed {seed}: {} -> {after}",
            eval.loss.total
        );
    }
}

#[test]
fn random_checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let kinds = [
        ParamKind::ConvWeight,
        ParamKind::Bias,
        ParamKind::BnScale,
        ParamKind::BnRunningVar,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for round in 0..25 {
        let mut store = ParamStore::<f32>::new();
        for t in 0..rng.gen_range(1..8) {
            let shape: Vec<usize> = (0..rng.gen_range(1..=4))
                .map(|_| rng.gen_range(1..5))
                .collect();
            let len = shape.iter().product();
            // Arbitrary bit patterns, NaN payloads and infinities included.
            let data = (0..len).map(|_| f32::from_bits(rng.gen())).collect();
            let kind = kinds[rng.gen_range(0..kinds.len())];
            store
                .register(
                    &format!("layer{t}.{round}"),
                    kind,
                    Tensor::from_vec(&shape, data).unwrap(),
                )
                .unwrap();
        }
        let mut ckpt = Checkpoint::new(rng.gen(), (0..32).map(|_| rng.gen()).collect());
        for e in store.entries() {
            ckpt.tensors.insert(e.name.clone(), e.value.clone());
        }
        let path = dir.path().join("r.vseg");
        write_checkpoint(&ckpt, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(
            (back.epoch, &back.config_digest),
            (ckpt.epoch, &ckpt.config_digest)
        );
        assert_eq!(back.tensors.len(), store.len());
        for e in store.entries() {
            let t = &back.tensors[&e.name];
            assert_eq!(t.shape(), e.value.shape());
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t.data()), bits(e.value.data()));
        }
    }
}
