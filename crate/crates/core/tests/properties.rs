use fudsa::config::RunConfig;
use fudsa::data::{
    check_target_size, mask_from_pgm, mask_to_pgm, resize_pair, split_dataset, synth_phantom, train_count, window_and_normalize, Pgm,
    PhantomConfig, RawSlice,
};
use fudsa::loss::{focal_tversky, tversky_index, LossConfig};
use fudsa::metrics::{segmentation_metrics, Confusion};
use fudsa::{ften, Shape, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn mask(bits: &[bool]) -> Tensor<f64> {
    Tensor::new(Shape::new(1, 1, 8, 8).unwrap(), bits.iter().map(|&b| b as u8 as f64).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metrics_match_pixel_counts(p in vec(any::<bool>(), 64), y in vec(any::<bool>(), 64)) {
        let m = segmentation_metrics(&mask(&p), &mask(&y)).unwrap();
        let count = |a: bool, b: bool| p.iter().zip(&y).filter(|&(&u, &v)| u == a && v == b).count() as u64;
        prop_assert_eq!(m.counts, Confusion { tp: count(true, true), fp: count(true, false), fn_: count(false, true), tn: count(false, false) });
        prop_assert!((m.dsc - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        for v in [m.dsc, m.iou, m.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.iou <= m.dsc);
    }

    #[test]
    fn soft_probabilities_threshold_inclusively(p in vec(0.0f64..1.0, 64), y in vec(any::<bool>(), 64)) {
        let probs = Tensor::new(Shape::new(1, 1, 8, 8).unwrap(), p.clone()).unwrap();
        let hard: Vec<bool> = p.iter().map(|&v| v >= 0.5).collect();
        prop_assert_eq!(segmentation_metrics(&probs, &mask(&y)).unwrap(), segmentation_metrics(&mask(&hard), &mask(&y)).unwrap());
    }

    #[test]
    fn focal_tversky_is_bounded_and_zero_only_when_perfect(p in vec(0.0f64..=1.0, 16), y in vec(any::<bool>(), 16)) {
        prop_assume!(y.iter().any(|&b| b));
        let shape = Shape::new(1, 1, 4, 4).unwrap();
        let probs = Tensor::new(shape, p).unwrap();
        let target = Tensor::new(shape, y.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let cfg = LossConfig::default();
        let ftl = focal_tversky(&probs, &target, &cfg).unwrap();
        let ti = tversky_index(&probs, &target, cfg.alpha, cfg.beta, cfg.smooth).unwrap();
        prop_assert!((0.0..=1.0).contains(&ftl));
        prop_assert!((ftl - (1.0 - ti).max(0.0).powf(1.0 / cfg.gamma)).abs() < 1e-12);
        prop_assert_eq!(focal_tversky(&target, &target, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn split_partitions_ids(n in 2usize..50, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|k| format!("id{k}")).collect();
        let s = split_dataset(&ids, seed).unwrap();
        prop_assert_eq!(s.train_ids.len(), train_count(n));
        prop_assert_eq!(s.train_ids.len(), (4 * n).div_ceil(5).min(n - 1));
        prop_assert!(!s.val_ids.is_empty());
        let mut all: Vec<String> = s.train_ids.iter().chain(&s.val_ids).cloned().collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        prop_assert_eq!(all, want);
        prop_assert_eq!(split_dataset(&ids, seed).unwrap(), s);
    }

    #[test]
    fn windowing_is_monotone_and_bounded(mut px in vec(any::<i16>(), 2..64), lo in -2000.0f64..0.0, width in 1.0f64..3000.0) {
        px.sort_unstable();
        let raw = RawSlice::new("w", 1, px.len(), px.clone()).unwrap();
        let out: Tensor<f64> = window_and_normalize(&raw, lo, lo + width).unwrap();
        let v = out.data();
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        for (&hu, &x) in px.iter().zip(v) {
            if (hu as f64) <= lo {
                prop_assert_eq!(x, 0.0);
            }
            if (hu as f64) >= lo + width {
                prop_assert_eq!(x, 1.0);
            }
        }
    }

    #[test]
    fn phantom_pipeline_keeps_masks_binary(seed in any::<u64>(), k in 1usize..5, target in prop::sample::select(vec![16usize, 32, 48, 64])) {
        let size = 16 * k;
        let p = synth_phantom("f", seed, size, &PhantomConfig::default()).unwrap();
        let pair = p.pair::<f32>(-1000.0, 170.0).unwrap();
        prop_assert!(pair.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(pair.lesion_pixels(), p.mask.iter().filter(|&&m| m == 1).count());
        let back = resize_pair(pair, target, 4).unwrap();
        prop_assert_eq!(back.size(), (target, target));
        prop_assert!(back.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(back.image.data().iter().all(|v| (-1e-6..=1.0 + 1e-6).contains(v)));
        let pgm = Pgm::parse(&p.slice.to_pgm().to_bytes()).unwrap();
        prop_assert_eq!(RawSlice::from_pgm("f", &pgm), p.slice.clone());
        let m = mask_to_pgm(&p.mask_tensor::<f64>());
        prop_assert_eq!(mask_from_pgm::<f64>(&m).unwrap(), p.mask_tensor::<f64>());
    }

    #[test]
    fn target_sizes_follow_divisibility(size in 0usize..200, levels in 1usize..6) {
        let ok = size >= 8 && size % (1 << levels) == 0;
        prop_assert_eq!(check_target_size(size, levels).is_ok(), ok);
    }

    #[test]
    fn ften_round_trips_bit_exactly(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let t: Tensor<f32> = Tensor::create([n, c, h, w], fudsa::Init::Uniform { lo: -1e3, hi: 1e3, seed }).unwrap();
        let bytes = ften::to_bytes(&t);
        let back: Tensor<f32> = ften::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(ften::to_bytes(&back), bytes);
    }

    #[test]
    fn config_round_trips(levels in 2usize..6, seed in any::<u64>(), lr in 1e-6f64..1.0, batch in 1usize..64, ds in any::<bool>()) {
        let mut cfg = RunConfig::default();
        cfg.network.levels = levels;
        cfg.network.variant.deep_supervision = ds;
        cfg.train.seed = seed;
        cfg.train.adam.learning_rate = lr;
        cfg.train.batch_size = batch;
        prop_assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }
}
