use proptest::prelude::*;

use tipseg::augment::{
    apply_op, equalize, pipeline, posterize, solarize, AugmentConfig, Op, Preset, RngStream,
};
use tipseg::imgdata::{GrayImage, LabelMask, Sample};
use tipseg::lossmetrics::{
    confusion, metrics, otsu_level_from_histogram, otsu_threshold, ConfusionTotals,
};
use tipseg::trainer::{history_csv, parse_history_csv, EpochRecord, History};

fn sample(w: usize, h: usize, pixels: &[u8], labels: &[u8]) -> Sample {
    Sample::new(
        "p",
        GrayImage::new(w, h, pixels.to_vec()).unwrap(),
        LabelMask::new(w, h, labels.to_vec()).unwrap(),
    )
    .unwrap()
}

fn arb_sample() -> impl Strategy<Value = Sample> {
    (8usize..48, 8usize..48).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(any::<u8>(), w * h),
            proptest::collection::vec(0u8..9, w * h),
        )
            .prop_map(move |(p, l)| sample(w, h, &p, &l))
    })
}

fn arb_preset() -> impl Strategy<Value = Preset> {
    prop_oneof![Just(Preset::None), Just(Preset::Minimal), Just(Preset::Full)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pipeline_is_square_and_never_invents_labels(s in arb_sample(), preset in arb_preset(), seed in any::<u64>()) {
        let mut cfg = AugmentConfig::from_preset(preset);
        cfg.output_size = 32;
        let out = pipeline(&s, &cfg, &mut RngStream::new(seed, 0));
        prop_assert_eq!((out.width(), out.height()), (32, 32));
        let allowed = s.mask.label_set();
        prop_assert!(out.mask.label_set().iter().all(|l| *l == 0 || allowed.contains(l)));
    }

    #[test]
    fn pipeline_replays_from_its_stream(s in arb_sample(), seed in any::<u64>(), stream in any::<u64>()) {
        let mut cfg = AugmentConfig::full();
        cfg.output_size = 24;
        let a = pipeline(&s, &cfg, &mut RngStream::new(seed, stream));
        let b = pipeline(&s, &cfg, &mut RngStream::new(seed, stream));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn photometric_ops_keep_the_mask(s in arb_sample(), seed in any::<u64>()) {
        let cfg = AugmentConfig::full();
        let mut rng = RngStream::new(seed, 1);
        for op in Op::ALL.into_iter().filter(|o| o.is_photometric()) {
            prop_assert_eq!(&apply_op(op, &s, &cfg, &mut rng).mask, &s.mask);
        }
    }

    #[test]
    fn posterize_and_equalize_are_idempotent(pixels in proptest::collection::vec(any::<u8>(), 64), bits in 1u8..=8) {
        let img = GrayImage::new(8, 8, pixels).unwrap();
        let p = posterize(&img, bits);
        prop_assert_eq!(posterize(&p, bits), p.clone());
        let e = equalize(&img);
        prop_assert_eq!(equalize(&e), e);
    }

    #[test]
    fn solarize_at_zero_inverts_twice_to_identity(pixels in proptest::collection::vec(any::<u8>(), 64)) {
        let img = GrayImage::new(8, 8, pixels).unwrap();
        prop_assert_eq!(solarize(&solarize(&img, 0), 0), img);
    }

    #[test]
    fn otsu_splits_two_separated_modes(lo in 0u8..100, gap in 20u8..150, a in 1u64..500, b in 1u64..500) {
        let hi = lo + gap;
        let mut hist = [0u64; 256];
        hist[lo as usize] = a;
        hist[hi as usize] = b;
        let t = otsu_level_from_histogram(&hist).unwrap();
        prop_assert!(lo <= t && t < hi);
    }

    #[test]
    fn otsu_mask_is_binary_and_monotone(pixels in proptest::collection::vec(any::<u8>(), 2..400)) {
        let n = pixels.len();
        let img = GrayImage::new(n, 1, pixels.clone()).unwrap();
        if let Ok(mask) = otsu_threshold(&img) {
            for (i, &v) in pixels.iter().enumerate() {
                for (j, &u) in pixels.iter().enumerate().take(8) {
                    if v > u {
                        prop_assert!(mask.labels()[i] >= mask.labels()[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn merged_totals_equal_the_concatenation(
        a in proptest::collection::vec((0u8..9, 0u8..9), 1..200),
        b in proptest::collection::vec((0u8..9, 0u8..9), 1..200),
    ) {
        let mk = |v: &[(u8, u8)]| {
            let n = v.len();
            (
                LabelMask::new(n, 1, v.iter().map(|p| p.0).collect()).unwrap(),
                LabelMask::new(n, 1, v.iter().map(|p| p.1).collect()).unwrap(),
            )
        };
        let (pa, ta) = mk(&a);
        let (pb, tb) = mk(&b);
        let mut merged = ConfusionTotals::empty(9);
        merged.merge(&confusion(&pa, &ta, 9).unwrap());
        merged.merge(&confusion(&pb, &tb, 9).unwrap());
        let all: Vec<(u8, u8)> = a.iter().chain(&b).copied().collect();
        let (pc, tc) = mk(&all);
        let whole = confusion(&pc, &tc, 9).unwrap();
        prop_assert_eq!(&merged, &whole);
        let r = metrics(&merged);
        prop_assert!((0.0..=1.0).contains(&r.miou) && r.miou <= r.f1 + 1e-12);
    }

    #[test]
    fn history_csv_round_trips(losses in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..100.0), 0..20)) {
        let records: Vec<EpochRecord> = losses
            .iter()
            .enumerate()
            .map(|(epoch, &(train_loss, val_loss, seconds))| EpochRecord { epoch, train_loss, val_loss, seconds })
            .collect();
        let history = History { records, best_epoch: None };
        let parsed = parse_history_csv(&history_csv(&history)).unwrap();
        prop_assert_eq!(parsed.records.len(), history.records.len());
        for (p, h) in parsed.records.iter().zip(&history.records) {
            prop_assert_eq!(p.epoch, h.epoch);
            prop_assert!((p.train_loss - h.train_loss).abs() < 1e-9);
            prop_assert!((p.val_loss - h.val_loss).abs() < 1e-9);
        }
    }
}
