use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use csasr::config::RunConfig;
use csasr::csa::{csa_block_with_gates, CsaConfig};
use csasr::dataset::{make_splits, split_counts, DatasetEntry, DatasetIndex, SplitSpec};
use csasr::gradcheck::random_tensor;
use csasr::imaging::{bicubic_resize, psnr, ssim, ImageF32};
use csasr::network::{build_model, ModelConfig};
use csasr::params::{ModelParams, SpecBuilder};
use csasr::tensor::{Tape, Tensor};
use csasr::trainer::{adam_step, AdamConfig, Checkpoint, OptimState, RngState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(c: usize, h: usize, w: usize, seed: u64) -> ImageF32 {
    let t = random_tensor(&[c, h, w], 0.5, seed);
    ImageF32::new(c, h, w, t.data().iter().map(|v| (v + 0.5) as f32).collect()).unwrap()
}

fn fake_index(class_sizes: &[usize]) -> DatasetIndex {
    let mut entries = Vec::new();
    let mut class_names = Vec::new();
    for (ci, &n) in class_sizes.iter().enumerate() {
        let class = format!("class{ci:02}");
        for i in 0..n {
            entries.push(DatasetEntry { class: class.clone(), path: PathBuf::from(format!("/data/{class}/{i:03}.png")) });
        }
        class_names.push(class);
    }
    DatasetIndex { root: PathBuf::from("/data"), entries, class_names }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pixel_shuffle_round_trips(n in 1usize..3, c in 1usize..4, r in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = random_tensor(&[n, c * r * r, h, w], 1.0, seed);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.clone());
        let up = t.pixel_shuffle(v, r).unwrap();
        prop_assert_eq!(t.value(up).shape(), &[n, c, h * r, w * r][..]);
        let back = t.pixel_unshuffle(up, r).unwrap();
        prop_assert_eq!(t.value(back), &x);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = random_tensor(&[rows, cols], scale, seed);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x);
        let y = t.softmax_last_axis(v).unwrap();
        for row in t.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(d in 2usize..16, shift in -5.0f64..5.0, seed in any::<u64>()) {
        let mut x = random_tensor(&[3, d], 2.0, seed);
        x.data_mut().iter_mut().for_each(|v| *v += shift);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.clone());
        let g = t.constant(Tensor::full([d], 1.0));
        let b = t.constant(Tensor::zeros([d]));
        let y = t.layer_norm(v, g, b, 1e-6).unwrap();
        let stats = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / d as f64;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64)
        };
        for (out, inp) in t.value(y).data().chunks(d).zip(x.data().chunks(d)) {
            let (mean, var) = stats(out);
            let (_, s2) = stats(inp);
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - s2 / (s2 + 1e-6)).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_gates_stay_inside_the_unit_interval(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let cfg = CsaConfig { reduction: 4, ..CsaConfig::new(8) };
        let mut b = SpecBuilder::new();
        cfg.block_specs(&mut b);
        let params = ModelParams::<f64>::initialize(&b.into_specs(), seed).unwrap();
        let f = random_tensor(&[2, 8, 7, 7], scale, seed ^ 0xABCD);
        let mut t = Tape::new();
        let bind = params.bind(&mut t, false);
        let x = t.constant(f.clone());
        let (out, gates) = csa_block_with_gates(&mut t, x, &cfg, &bind.root()).unwrap();
        for g in [gates.m_c, gates.m_s] {
            prop_assert!(t.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        prop_assert!(t.value(out).data().iter().zip(f.data()).all(|(o, i)| o.abs() <= i.abs()));
    }

    #[test]
    fn bicubic_preserves_constants(h in 1usize..12, w in 1usize..12, oh in 1usize..24, ow in 1usize..24, v in 0.0f32..1.0) {
        let out = bicubic_resize(&ImageF32::filled(2, h, w, v), oh, ow);
        prop_assert_eq!((out.height, out.width), (oh, ow));
        prop_assert!(out.data.iter().all(|&x| (x - v).abs() <= 1e-5));
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let (a, b) = (image(3, h, w, seed), image(3, h, w, seed.wrapping_add(1)));
        let (p1, p2) = (psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((p1 - p2).abs() < 1e-9);
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&s1));
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn splits_partition_every_class(sizes in prop::collection::vec(2usize..30, 1..6), seed in any::<u64>()) {
        let index = fake_index(&sizes);
        let spec = make_splits(&index, seed).unwrap();
        let all: BTreeSet<usize> = spec.train.iter().chain(&spec.val).chain(&spec.test).copied().collect();
        prop_assert_eq!(all.len(), index.len());
        prop_assert_eq!(spec.train.len() + spec.val.len() + spec.test.len(), index.len());
        for (class, members) in index.by_class() {
            let (tr, va, te) = split_counts(members.len());
            let count = |list: &[usize]| list.iter().filter(|&&i| index.entries[i].class == class).count();
            prop_assert_eq!((count(&spec.train), count(&spec.val), count(&spec.test)), (tr, va, te));
        }
        let text = spec.to_text(&index);
        let back = SplitSpec::parse(&text, Path::new("split.txt"), &index).unwrap();
        prop_assert_eq!(back, spec.clone());
        prop_assert_eq!(make_splits(&index, seed).unwrap(), spec);
    }

    #[test]
    fn adam_ignores_zero_gradients(w0 in -3.0f64..3.0, steps in 1usize..20, lr in 1e-5f64..1e-1) {
        let cfg = AdamConfig { lr, beta1: 0.9, beta2: 0.99, eps: 1e-8 };
        let mut p = ModelParams::from_map(BTreeMap::from([("w".to_string(), Tensor::full([3], w0))]));
        let mut state = OptimState::new(&p);
        for _ in 0..steps {
            adam_step(&mut p, BTreeMap::from([("w".to_string(), vec![0.0; 3])]), &mut state, &cfg).unwrap();
        }
        prop_assert!(p.get("w").unwrap().data().iter().all(|&v| v == w0));
        prop_assert!(state.v.values().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn config_text_round_trips(scale in 2usize..5, lr in 1e-6f64..1e-2, seed in any::<u64>(), stages in 1usize..5, augment in any::<bool>()) {
        let mut cfg = RunConfig::default();
        cfg.model.scale = scale;
        cfg.model.num_stages = stages;
        cfg.train.lr = lr;
        cfg.train.seed = seed;
        cfg.data.augment = augment;
        prop_assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), epoch in 0u64..100, step in 0u64..10_000, draws in 0usize..50) {
        let config = RunConfig::default();
        let params = build_model::<f32>(&ModelConfig::toy(2), seed).unwrap();
        let mut optim = OptimState::new(&params);
        optim.t = step;
        for (i, m) in optim.m.values_mut().enumerate() {
            m.iter_mut().enumerate().for_each(|(j, v)| *v = (i * 31 + j) as f32 * 1e-3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..draws {
            rand::Rng::random::<u32>(&mut rng);
        }
        let ck = Checkpoint { config, params, optim, epoch, step, best_psnr: 12.5, rng: RngState::capture(&rng) };
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(&back.params, &ck.params);
        prop_assert_eq!(&back.optim, &ck.optim);
        prop_assert_eq!(&back.rng, &ck.rng);
        prop_assert_eq!((back.epoch, back.step), (epoch, step));
        prop_assert_eq!(&back.config, &ck.config);
        let mut a = back.rng.restore();
        prop_assert_eq!(rand::Rng::random::<u64>(&mut a), rand::Rng::random::<u64>(&mut rng));
    }
}
